#include "rtnlinv/fft.hpp"

#include <fftw3.h>

#include <atomic>
#include <map>
#include <mutex>
#include <utility>
#include <vector>

namespace rtnlinv::fft {

namespace {

std::atomic<uint64_t> g_counts[4];
thread_local Ctx t_ctx = Ctx::other;

// Plans are cached per (side, direction) and shared between threads;
// fftw_execute_dft on a shared plan is reentrant, only planning needs the
// lock. FFTW_UNALIGNED lets the plan run on whatever buffer we hand it.
std::mutex g_plan_mutex;
std::map<std::pair<int, int>, fftw_plan> g_plans;

fftw_plan plan_for(int n, int sign) {
  std::lock_guard<std::mutex> lock(g_plan_mutex);
  auto key = std::make_pair(n, sign);
  auto it = g_plans.find(key);
  if (it != g_plans.end()) return it->second;
  std::vector<std::complex<double>> scratch(static_cast<size_t>(n) * n);
  auto* p = reinterpret_cast<fftw_complex*>(scratch.data());
  fftw_plan plan = fftw_plan_dft_2d(n, n, p, p, sign, FFTW_ESTIMATE | FFTW_UNALIGNED);
  if (!plan) throw std::runtime_error("fftw planning failed for size " + std::to_string(n));
  g_plans.emplace(key, plan);
  return plan;
}

// Centered transform via index rolls by c = n/2 on load and store:
//   X[p,q] = s * sum_{r,t} x[r,t] exp(sign * 2*pi*i * ((p-c)(r-c)+(q-c)(t-c)) / n)
// with s = 1/n. Load fills buf[u] = x[(u+c) mod n] per axis, store writes
// out[(v+c) mod n] = s * Y[v] per axis.
void run(cfloat* data, int n, int sign) {
  fftw_plan plan = plan_for(n, sign);
  thread_local std::vector<std::complex<double>> buf;
  buf.resize(static_cast<size_t>(n) * n);
  const int c = n / 2;

  for (int r = 0; r < n; ++r) {
    int rs = r + c;
    if (rs >= n) rs -= n;
    const cfloat* src = data + static_cast<size_t>(rs) * n;
    std::complex<double>* dst = buf.data() + static_cast<size_t>(r) * n;
    for (int col = 0; col < n; ++col) {
      int cs = col + c;
      if (cs >= n) cs -= n;
      dst[col] = std::complex<double>(src[cs].real(), src[cs].imag());
    }
  }

  fftw_execute_dft(plan, reinterpret_cast<fftw_complex*>(buf.data()),
                   reinterpret_cast<fftw_complex*>(buf.data()));

  const double s = 1.0 / n;
  for (int r = 0; r < n; ++r) {
    int rs = r + c;
    if (rs >= n) rs -= n;
    cfloat* dst = data + static_cast<size_t>(rs) * n;
    const std::complex<double>* src = buf.data() + static_cast<size_t>(r) * n;
    for (int col = 0; col < n; ++col) {
      int cs = col + c;
      if (cs >= n) cs -= n;
      dst[cs] = cfloat(static_cast<float>(src[col].real() * s),
                       static_cast<float>(src[col].imag() * s));
    }
  }

  g_counts[static_cast<int>(t_ctx)].fetch_add(1, std::memory_order_relaxed);
}

}  // namespace

CtxScope::CtxScope(Ctx c) : prev_(t_ctx) { t_ctx = c; }
CtxScope::~CtxScope() { t_ctx = prev_; }

Ctx current() { return t_ctx; }

void forward(cfloat* data, int n) { run(data, n, FFTW_FORWARD); }
void inverse(cfloat* data, int n) { run(data, n, FFTW_BACKWARD); }
void forward(CImage& img) { run(img.v.data(), img.n, FFTW_FORWARD); }
void inverse(CImage& img) { run(img.v.data(), img.n, FFTW_BACKWARD); }

uint64_t count(Ctx c) { return g_counts[static_cast<int>(c)].load(); }

uint64_t count_total() {
  uint64_t t = 0;
  for (const auto& c : g_counts) t += c.load();
  return t;
}

void reset_counts() {
  for (auto& c : g_counts) c.store(0);
}

}  // namespace rtnlinv::fft
