#include "rtnlinv/planner.hpp"

#include <fftw3.h>
#include <unistd.h>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <sstream>
#include <thread>

#include "rtnlinv/fft.hpp"

namespace rtnlinv {

namespace {

uint64_t steady_ns() {
  return static_cast<uint64_t>(
      std::chrono::duration_cast<std::chrono::nanoseconds>(
          std::chrono::steady_clock::now().time_since_epoch())
          .count());
}

// Smallest positive increment the clock source resolves; used for the
// resolution warning when a measured minimum is under 10 ticks.
uint64_t estimate_tick(const std::function<uint64_t()>& now) {
  uint64_t tick = std::numeric_limits<uint64_t>::max();
  uint64_t prev = now();
  for (int i = 0; i < 512; ++i) {
    uint64_t t = now();
    if (t > prev && t - prev < tick) tick = t - prev;
    prev = t;
  }
  if (tick == std::numeric_limits<uint64_t>::max()) tick = 1;
  return tick;
}

int even_ceil(double x) {
  int v = static_cast<int>(std::ceil(x - 1e-9));
  if (v % 2 != 0) ++v;
  return v;
}

int even_floor(double x) {
  int v = static_cast<int>(std::floor(x + 1e-9));
  if (v % 2 != 0) --v;
  return v;
}

}  // namespace

std::string default_machine_key() {
  char host[256] = "unknown";
  gethostname(host, sizeof(host) - 1);
  std::ostringstream os;
  os << host << "-x" << std::thread::hardware_concurrency();
  return os.str();
}

std::string default_library_key() {
  std::ostringstream os;
  os << "fftw-" << fftw_version;
  return os.str();
}

FftLookupTable benchmark_fft(int size_lo, int size_hi, int trials,
                             std::function<uint64_t()> now_ns) {
  if (size_lo < 2 || size_hi < size_lo) throw UsageError("benchmark_fft: bad size range");
  if (trials < 1) throw UsageError("benchmark_fft: trials must be >= 1");
  if (!now_ns) now_ns = steady_ns;

  FftLookupTable table;
  table.machine_key = default_machine_key();
  table.library_key = default_library_key();
  const uint64_t tick = estimate_tick(now_ns);

  fft::CtxScope scope(fft::Ctx::bench);
  for (int n = size_lo; n <= size_hi; ++n) {
    CImage scratch(n);
    for (size_t i = 0; i < scratch.v.size(); ++i) {
      scratch.v[i] = cfloat(static_cast<float>((i % 37) * 0.1f), static_cast<float>((i % 11) * -0.2f));
    }
    fft::forward(scratch);  // warm-up creates and caches the plan

    uint64_t best = std::numeric_limits<uint64_t>::max();
    for (int t = 0; t < trials; ++t) {
      const uint64_t t0 = now_ns();
      fft::forward(scratch);
      const uint64_t t1 = now_ns();
      const uint64_t dt = t1 > t0 ? t1 - t0 : 0;
      if (dt < best) best = dt;
    }
    if (best < 10 * tick) {
      table.resolution_warning = true;
      std::fprintf(stderr, "bench-fft: size %d min %llu ns is under 10 clock ticks (%llu ns)\n",
                   n, static_cast<unsigned long long>(best),
                   static_cast<unsigned long long>(tick));
    }
    table.entries_us[n] = best / 1000.0;
  }
  return table;
}

std::pair<int, double> select_grid(int N, const FftLookupTable& table, double gamma_min,
                                   double gamma_max) {
  if (N < 2) throw UsageError("select_grid: N too small");
  const int lo = even_ceil(2.0 * gamma_min * N);
  const int hi = even_floor(2.0 * gamma_max * N);
  if (lo > hi) throw UsageError("select_grid: empty grid search interval");

  int best_g = -1;
  double best_t = std::numeric_limits<double>::infinity();
  for (int g = lo; g <= hi; g += 2) {
    auto it = table.entries_us.find(g);
    if (it == table.entries_us.end()) {
      throw UsageError("select_grid: lookup table does not cover size " + std::to_string(g));
    }
    if (it->second < best_t) {
      best_t = it->second;
      best_g = g;
    }
  }
  return {best_g, best_g / (2.0 * N)};
}

ReconPlan make_plan(int N, int J, const FftLookupTable* table, double gamma_min,
                    double gamma_max) {
  ReconPlan plan;
  plan.N = N;
  plan.J = J;
  if (table) {
    auto [g, gamma] = select_grid(N, *table, gamma_min, gamma_max);
    plan.G = g;
    plan.gamma = gamma;
  } else {
    plan.G = even_ceil(2.0 * 1.5 * N);
    plan.gamma = plan.G / (2.0 * N);
  }
  plan.Gc = coil_grid_side(plan.G);
  return plan;
}

void save_table(const FftLookupTable& table, const std::string& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw DataError("cannot write lookup table: " + path);
  out << "# machine:\t" << table.machine_key << "\n";
  out << "# library:\t" << table.library_key << "\n";
  for (const auto& [size, us] : table.entries_us) {
    char line[64];
    std::snprintf(line, sizeof(line), "%d\t%.3f\n", size, us);
    out << line;
  }
  if (!out.good()) throw DataError("write failed for lookup table: " + path);
}

FftLookupTable load_table(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open lookup table: " + path);
  FftLookupTable table;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    if (line[0] == '#') {
      const auto tab = line.find('\t');
      if (tab == std::string::npos) continue;
      const std::string value = line.substr(tab + 1);
      if (line.rfind("# machine:", 0) == 0) table.machine_key = value;
      if (line.rfind("# library:", 0) == 0) table.library_key = value;
      continue;
    }
    std::istringstream ls(line);
    int size = 0;
    double us = 0;
    if (!(ls >> size >> us) || size < 2 || us <= 0) {
      throw DataError("malformed lookup table line: " + line);
    }
    table.entries_us[size] = us;
  }
  return table;
}

int coil_grid_side(int G) { return G / 4; }

CImage crop_k(const CImage& x, int Gc) {
  if (Gc > x.n) throw UsageError("crop_k: target larger than source");
  const int off = dc_index(x.n) - dc_index(Gc);
  CImage out(Gc);
  for (int r = 0; r < Gc; ++r) {
    const cfloat* src = x.v.data() + static_cast<size_t>(r + off) * x.n + off;
    std::copy(src, src + Gc, out.v.data() + static_cast<size_t>(r) * Gc);
  }
  return out;
}

CImage pad_k(const CImage& x, int G) {
  if (x.n > G) throw UsageError("pad_k: source larger than target");
  const int off = dc_index(G) - dc_index(x.n);
  CImage out(G);
  for (int r = 0; r < x.n; ++r) {
    const cfloat* src = x.v.data() + static_cast<size_t>(r) * x.n;
    std::copy(src, src + x.n, out.v.data() + static_cast<size_t>(r + off) * G + off);
  }
  return out;
}

}  // namespace rtnlinv
