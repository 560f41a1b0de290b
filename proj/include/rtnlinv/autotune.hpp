#pragma once

#include <compare>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "rtnlinv/ingest.hpp"

namespace rtnlinv {

// Frame-count bucket index: <=5, <=10, <=25, <=50, <=200, >200.
int frames_bucket(int frames);
std::string bucket_label(int bucket);          // "5".."200", "inf"
int bucket_from_label(const std::string& s);   // DataError on unknown

// What a tuning measurement is keyed by: the imaging mode, the data size,
// the frame-count bucket, and the channel count the solver sees. Field order
// is the canonical sort order (mode changes the algorithm shape, sizes
// degrade gracefully), so the defaulted comparison is the nearest-key order.
struct ProtocolKey {
  ImagingMode mode = ImagingMode::single_slice;
  int N = 0;
  int bucket = 0;
  int J = 0;

  auto operator<=>(const ProtocolKey&) const = default;
};

struct TuningRecord {
  ProtocolKey key;
  int T = 1;             // reconstruction threads
  int A = 1;             // workers per thread
  double runtime_ms = 0; // median per-frame wall time of the steady region
  int64_t timestamp = 0; // seconds since the epoch
};

// All (T, A) pairs the runtime can use: A capped at 4 (the reduction domain
// is small) and T * A bounded by the worker total. For 8 workers this is the
// 16-element space A=1:T<=8, A=2:T<=4, A in {3,4}:T<=2. Canonical order is
// A-major ascending, T ascending within.
std::vector<std::pair<int, int>> legal_configs(int total_workers = 8);

// Best recorded (T, A) for the key: exact match -> argmin runtime; no exact
// match -> the nearest key with the same mode under the canonical order ->
// its argmin; nothing comparable -> (1, 1). Ties in runtime resolve to the
// smaller (A, T) so selection is deterministic.
std::pair<int, int> select_config(const ProtocolKey& key, const std::vector<TuningRecord>& db);

// Next configuration to measure: the first legal config (canonical order)
// with no record for this key; once the space is covered, defers to
// select_config.
std::pair<int, int> learn_step(const ProtocolKey& key, const std::vector<TuningRecord>& db,
                               int total_workers = 8);

// Append-only TSV store, one record per line:
//   mode N frames_bucket J T A runtime_ms timestamp
// A crashed writer can leave a torn final line; append() re-terminates it and
// load() skips anything unparseable, so the store is single-writer
// crash-safe and always loadable.
class TuneDb {
 public:
  explicit TuneDb(std::string path) : path_(std::move(path)) {}

  const std::string& path() const { return path_; }

  void append(const TuningRecord& r);  // one line, flushed; DataError on I/O failure
  std::vector<TuningRecord> load() const;
  size_t skipped_lines() const { return skipped_; }  // from the last load()

 private:
  std::string path_;
  mutable size_t skipped_ = 0;
};

std::string format_record(const TuningRecord& r);

}  // namespace rtnlinv
