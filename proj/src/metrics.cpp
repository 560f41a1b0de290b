#include "rtnlinv/metrics.hpp"

#include <sstream>

#include "json.hpp"

namespace rtnlinv {

double speedup(double t_old, double t_new) {
  if (!(t_old > 0) || !(t_new > 0)) throw UsageError("speedup: times must be positive");
  return t_old / t_new;
}

double efficiency(double s, int p) {
  if (!(s > 0)) throw UsageError("efficiency: speedup must be positive");
  if (p < 1) throw UsageError("efficiency: need at least one worker");
  return s / p;
}

namespace {

const char* kStageNames[5] = {"src", "pre", "rec", "pst", "snk"};

}  // namespace

std::string report_text(const PerfReport& r) {
  std::ostringstream os;
  os.setf(std::ios::fixed);
  os.precision(2);
  os << "frames in          " << r.frames_in << "\n"
     << "images out         " << r.images_out << "\n"
     << "wall seconds       " << r.wall_seconds << "\n"
     << "fps                " << r.fps << "\n"
     << "per-frame ms (R)   " << r.steady_median_ms << "\n"
     << "threads T          " << r.T << "\n"
     << "workers/thread A   " << r.A << "\n"
     << "prologue/epilogue  " << r.prologue_frames << "/" << r.epilogue_frames
     << " frames\n";
  for (int s = 0; s < 5; ++s) {
    os << "stage " << kStageNames[s] << "          mean " << r.stage[s].mean_ms << " ms, max "
       << r.stage[s].max_ms << " ms, n=" << r.stage[s].processed << "\n";
  }
  if (r.S) os << "speedup S          " << *r.S << "\n";
  if (r.E) os << "efficiency E       " << *r.E << "\n";
  os << "fft normal-op      " << r.fft_normal_op << "\n"
     << "fft setup          " << r.fft_setup << "\n"
     << "fft other          " << r.fft_other << "\n";
  os.precision(6);
  os << "data scale         " << r.data_scale << "\n";
  return os.str();
}

std::string report_json(const PerfReport& r) {
  nlohmann::json j;
  j["frames_in"] = r.frames_in;
  j["images_out"] = r.images_out;
  j["wall_seconds"] = r.wall_seconds;
  j["fps"] = r.fps;
  j["per_frame_ms"] = r.steady_median_ms;
  j["T"] = r.T;
  j["A"] = r.A;
  j["prologue_frames"] = r.prologue_frames;
  j["epilogue_frames"] = r.epilogue_frames;
  for (int s = 0; s < 5; ++s) {
    j["stages"][kStageNames[s]] = {{"mean_ms", r.stage[s].mean_ms},
                                   {"max_ms", r.stage[s].max_ms},
                                   {"processed", r.stage[s].processed}};
  }
  if (r.S) j["speedup"] = *r.S;
  if (r.E) j["efficiency"] = *r.E;
  j["fft"] = {{"normal_op", r.fft_normal_op}, {"setup", r.fft_setup}, {"other", r.fft_other}};
  j["data_scale"] = r.data_scale;
  return j.dump(2);
}

}  // namespace rtnlinv
