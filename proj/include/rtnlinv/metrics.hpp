#pragma once

#include <cstdint>
#include <optional>
#include <string>

#include "rtnlinv/types.hpp"

namespace rtnlinv {

// S = t_old / t_new (times in the same unit, both > 0)
double speedup(double t_old, double t_new);

// E = S_p / p for p parallel workers
double efficiency(double s, int p);

struct StageTimes {
  double mean_ms = 0;
  double max_ms = 0;
  int processed = 0;
};

// Run summary the CLI prints. Wall-clock fields vary run to run; everything
// else is deterministic for a fixed seed.
struct PerfReport {
  int frames_in = 0;
  int images_out = 0;
  double wall_seconds = 0;
  double fps = 0;
  double steady_median_ms = 0;   // per-frame time, the autotune record R
  StageTimes stage[5];           // src, pre, rec, pst, snk
  int prologue_frames = 4;       // stages - 1
  int epilogue_frames = 4;
  int T = 1;
  int A = 1;
  std::optional<double> S;       // present when a baseline time is supplied
  std::optional<double> E;
  uint64_t fft_normal_op = 0;
  uint64_t fft_setup = 0;
  uint64_t fft_other = 0;
  double data_scale = 1.0;
};

std::string report_text(const PerfReport& r);
std::string report_json(const PerfReport& r);

}  // namespace rtnlinv
