#include "rtnlinv/autotune.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

namespace rtnlinv {

namespace {

constexpr int kBucketCaps[] = {5, 10, 25, 50, 200};

}  // namespace

int frames_bucket(int frames) {
  if (frames < 1) throw UsageError("frames_bucket: frame count must be >= 1");
  for (int b = 0; b < 5; ++b) {
    if (frames <= kBucketCaps[b]) return b;
  }
  return 5;
}

std::string bucket_label(int bucket) {
  if (bucket < 0 || bucket > 5) throw UsageError("bucket_label: bucket out of range");
  if (bucket == 5) return "inf";
  return std::to_string(kBucketCaps[bucket]);
}

int bucket_from_label(const std::string& s) {
  for (int b = 0; b < 6; ++b) {
    if (s == bucket_label(b)) return b;
  }
  throw DataError("unknown frames bucket '" + s + "'");
}

std::vector<std::pair<int, int>> legal_configs(int total_workers) {
  if (total_workers < 1) throw UsageError("legal_configs: need at least one worker");
  std::vector<std::pair<int, int>> out;
  for (int A = 1; A <= std::min(4, total_workers); ++A) {
    for (int T = 1; T * A <= total_workers; ++T) out.emplace_back(T, A);
  }
  return out;
}

std::pair<int, int> select_config(const ProtocolKey& key, const std::vector<TuningRecord>& db) {
  // candidate key: exact if present, else the nearest recorded key that
  // shares the imaging mode
  const TuningRecord* best = nullptr;
  bool have_key = false;
  ProtocolKey chosen{};
  auto distance = [&key](const ProtocolKey& k) {
    return std::tuple(std::abs(k.N - key.N), std::abs(k.bucket - key.bucket),
                      std::abs(k.J - key.J), k);
  };
  for (const TuningRecord& r : db) {
    if (r.key.mode != key.mode) continue;
    if (!have_key || distance(r.key) < distance(chosen)) {
      have_key = true;
      chosen = r.key;
    }
  }
  if (!have_key) return {1, 1};
  for (const TuningRecord& r : db) {
    if (!(r.key == chosen)) continue;
    if (!best || r.runtime_ms < best->runtime_ms ||
        (r.runtime_ms == best->runtime_ms &&
         std::pair(r.A, r.T) < std::pair(best->A, best->T))) {
      best = &r;
    }
  }
  return {best->T, best->A};
}

std::pair<int, int> learn_step(const ProtocolKey& key, const std::vector<TuningRecord>& db,
                               int total_workers) {
  std::set<std::pair<int, int>> seen;
  for (const TuningRecord& r : db) {
    if (r.key == key) seen.insert({r.T, r.A});
  }
  for (const auto& cfg : legal_configs(total_workers)) {
    if (!seen.count(cfg)) return cfg;
  }
  return select_config(key, db);
}

std::string format_record(const TuningRecord& r) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.3f", r.runtime_ms);
  std::ostringstream os;
  os << mode_name(r.key.mode) << '\t' << r.key.N << '\t' << bucket_label(r.key.bucket) << '\t'
     << r.key.J << '\t' << r.T << '\t' << r.A << '\t' << buf << '\t' << r.timestamp;
  return os.str();
}

void TuneDb::append(const TuningRecord& r) {
  bool needs_newline = false;
  {
    std::error_code ec;
    const auto size = std::filesystem::file_size(path_, ec);
    if (!ec && size > 0) {
      std::ifstream probe(path_, std::ios::binary);
      probe.seekg(-1, std::ios::end);
      char last = '\n';
      probe.read(&last, 1);
      needs_newline = probe.gcount() == 1 && last != '\n';
    }
  }
  std::ofstream out(path_, std::ios::app);
  if (!out) throw DataError(path_ + ": cannot open for append");
  // a torn final line from a crashed writer gets terminated so it can never
  // swallow this record; load() will skip the fragment
  if (needs_newline) out << '\n';
  out << format_record(r) << '\n';
  out.flush();
  if (!out) throw DataError(path_ + ": append failed");
}

std::vector<TuningRecord> TuneDb::load() const {
  skipped_ = 0;
  std::vector<TuningRecord> out;
  std::ifstream in(path_);
  if (!in) return out;  // no database yet is an empty database
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::istringstream is(line);
    std::string mode, bucket;
    TuningRecord r;
    if (!(is >> mode >> r.key.N >> bucket >> r.key.J >> r.T >> r.A >> r.runtime_ms >>
          r.timestamp)) {
      ++skipped_;
      continue;
    }
    try {
      r.key.mode = mode_from_name(mode);
      r.key.bucket = bucket_from_label(bucket);
    } catch (const DataError&) {
      ++skipped_;
      continue;
    }
    if (r.T < 1 || r.A < 1 || !(r.runtime_ms > 0)) {
      ++skipped_;
      continue;
    }
    out.push_back(r);
  }
  return out;
}

}  // namespace rtnlinv
