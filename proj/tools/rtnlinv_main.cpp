#include <cstdint>
#include <ctime>
#include <iostream>
#include <map>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "CLI11.hpp"
#include "rtnlinv/autotune.hpp"
#include "rtnlinv/fft.hpp"
#include "rtnlinv/ingest.hpp"
#include "rtnlinv/metrics.hpp"
#include "rtnlinv/nlinv.hpp"
#include "rtnlinv/pipeline.hpp"
#include "rtnlinv/planner.hpp"
#include "rtnlinv/seqsim.hpp"

namespace {

using namespace rtnlinv;

struct PhantomArgs {
  std::string out;
  int n = 64;
  int j = 4;
  int k = 11;
  int u = 5;
  int frames = 30;
  int slices = 1;
  std::string mode = "single_slice";
  double noise = 0.0;
  uint64_t seed = 1234;
  double flow_phase = 0.7853981633974483;  // pi/4
  bool paper_scale = false;
};

int run_phantom(const PhantomArgs& a) {
  const ImagingMode mode = mode_from_name(a.mode);
  if (mode == ImagingMode::flow && a.frames % 2 != 0) {
    throw UsageError("flow datasets need an even frame count");
  }
  if (mode == ImagingMode::multi_slice && a.slices < 2) {
    throw UsageError("multi_slice needs --slices >= 2");
  }
  if (mode != ImagingMode::multi_slice && a.slices != 1) {
    throw UsageError("--slices > 1 requires --mode multi_slice");
  }

  DatasetHeader hdr;
  hdr.N = a.n;
  hdr.J_physical = a.j;
  hdr.K = a.k;
  hdr.U = a.u;
  hdr.frames = a.frames;
  hdr.slices = a.slices;
  hdr.mode = mode;
  hdr.samples_per_spoke = 2 * a.n;

  TrajectorySpec traj;
  traj.K = a.k;
  traj.U = a.u;
  traj.samples_per_spoke = hdr.samples_per_spoke;

  std::vector<PhantomSpec> phantoms;
  for (int s = 0; s < a.slices; ++s) {
    PhantomSpec ph = default_phantom(a.j, a.seed + 7919ull * static_cast<uint64_t>(s));
    ph.noise_sigma = a.noise;
    if (mode == ImagingMode::flow) ph.flow_phase = a.flow_phase;
    // slices share geometry but move differently, so they are tellable apart
    ph.motion.amp_x *= 1.0 + 0.25 * s;
    phantoms.push_back(std::move(ph));
  }

  RtkWriter writer(a.out, hdr);
  for (int n = 0; n < a.frames; ++n) {
    for (int s = 0; s < a.slices; ++s) {
      writer.write_frame(simulate_frame(phantoms[static_cast<size_t>(s)], traj, n, s));
    }
  }
  writer.close();
  std::cout << a.out << ": " << a.frames << " frames x " << a.slices << " slices, N="
            << a.n << " J=" << a.j << " K=" << a.k << " U=" << a.u << " mode="
            << mode_name(mode) << "\n";
  return 0;
}

struct ReconstructArgs {
  std::string in;
  std::string out;
  int T = 0;  // 0: not set on the command line
  int A = 0;
  bool autotune = false;
  bool learn = false;
  std::string tune_db = "tune.tsv";
  int total_workers = 8;
  int newton = 0;
  double alpha0 = -1;
  double alpha_q = -1;
  double cg_tol = -1;
  int cg_budget = -1;
  double gamma_min = 1.4;
  double gamma_max = 2.0;
  std::string fft_table;
  int compress = 0;
  double delay = 0.0;
  bool median = false;
  bool no_chain = false;
  int queue_cap = 4;
  std::string report = "text";
  double baseline_ms = 0.0;
};

int run_reconstruct(const ReconstructArgs& a) {
  RtkReader reader(a.in);
  const DatasetHeader hdr = reader.header();

  // channel compression calibrates on a separate pass over the first frames
  std::unique_ptr<CompressionMatrix> cm;
  if (a.compress > 0) {
    if (a.compress > hdr.J_physical) {
      throw UsageError("--compress asks for more channels than the data holds");
    }
    RtkReader calib(a.in);
    std::vector<KSpaceFrame> head;
    KSpaceFrame f;
    const int want = std::min(hdr.frames * hdr.slices, 8);
    for (int i = 0; i < want && calib.read_frame(f); ++i) head.push_back(f);
    cm = std::make_unique<CompressionMatrix>(calibrate_compression(head, a.compress));
  }
  const int J_solver = cm ? cm->J_virtual : hdr.J_physical;

  FftLookupTable table;
  const FftLookupTable* table_ptr = nullptr;
  if (!a.fft_table.empty()) {
    table = load_table(a.fft_table);
    table_ptr = &table;
  }
  ReconPlan plan = make_plan(hdr.N, J_solver, table_ptr, a.gamma_min, a.gamma_max);
  if (a.newton > 0) plan.newton_steps = a.newton;
  if (a.alpha0 >= 0) plan.alpha0 = static_cast<float>(a.alpha0);
  if (a.alpha_q >= 0) plan.alpha_q = static_cast<float>(a.alpha_q);
  if (a.cg_tol >= 0) plan.cg_tol = static_cast<float>(a.cg_tol);
  if (a.cg_budget >= 0) plan.cg_iter_budget = a.cg_budget;

  // (T, A) comes from the flags or from the tuning database
  int T = a.T > 0 ? a.T : 1;
  int A = a.A > 0 ? a.A : 1;
  ProtocolKey key{hdr.mode, hdr.N, frames_bucket(hdr.frames), J_solver};
  TuneDb db(a.tune_db);
  if (a.autotune || a.learn) {
    const std::vector<TuningRecord> recs = db.load();
    const std::pair<int, int> ta =
        a.learn ? learn_step(key, recs, a.total_workers) : select_config(key, recs);
    T = ta.first;
    A = ta.second;
  }

  PipelineConfig cfg;
  cfg.plan = plan;
  cfg.sched = TemporalSchedule::for_turns(hdr.U);
  cfg.T = T;
  cfg.A = A;
  cfg.queue_cap = a.queue_cap;
  cfg.chain = !a.no_chain;
  cfg.delay_samples = a.delay;
  cfg.compression = cm.get();
  cfg.median_filter = a.median;

  RtkSource src(reader);
  RtiWriter writer(a.out, hdr);
  RtiSink snk(writer);

  fft::reset_counts();
  const PipelineStats stats = run_pipeline(src, snk, hdr, cfg);

  if (stats.failed) {
    std::cerr << "error: " << stats.error << "\n";
    if (stats.last_good_frame >= 0) {
      std::cerr << "last good output frame: " << stats.last_good_frame << "\n";
    }
    switch (stats.fault) {
      case FaultKind::usage: return 2;
      case FaultKind::data: return 3;
      default: return 4;
    }
  }

  PerfReport rep;
  rep.frames_in = stats.frames_in;
  rep.images_out = stats.images_out;
  rep.wall_seconds = stats.wall_seconds;
  rep.fps = stats.fps;
  rep.steady_median_ms = stats.steady_median_ms;
  for (int s = 0; s < 5; ++s) rep.stage[s] = stats.stage[s];
  rep.prologue_frames = stats.prologue_frames;
  rep.epilogue_frames = stats.epilogue_frames;
  rep.T = T;
  rep.A = A;
  if (a.baseline_ms > 0) {
    rep.S = speedup(a.baseline_ms, stats.steady_median_ms);
    rep.E = efficiency(*rep.S, T * A);
  }
  rep.fft_normal_op = fft::count(fft::Ctx::normal_op);
  rep.fft_setup = fft::count(fft::Ctx::setup);
  rep.fft_other = fft::count(fft::Ctx::other);
  rep.data_scale = stats.slice_scale.empty() ? 1.0 : stats.slice_scale[0];

  if (a.report == "json") {
    std::cout << report_json(rep) << "\n";
  } else {
    std::cout << report_text(rep);
  }

  if (a.learn) {
    TuningRecord rec;
    rec.key = key;
    rec.T = T;
    rec.A = A;
    rec.runtime_ms = stats.steady_median_ms;
    rec.timestamp = static_cast<int64_t>(std::time(nullptr));
    db.append(rec);
    std::cout << "recorded: " << format_record(rec) << "\n";
  }
  return 0;
}

struct BenchArgs {
  int lo = 32;
  int hi = 128;
  int trials = 3;
  std::string out;
};

int run_bench(const BenchArgs& a) {
  const FftLookupTable table = benchmark_fft(a.lo, a.hi, a.trials);
  save_table(table, a.out);
  std::cout << a.out << ": " << table.entries_us.size() << " sizes, " << a.lo << ".."
            << a.hi << ", machine " << table.machine_key << "\n";
  if (table.resolution_warning) {
    std::cerr << "warning: clock resolution is coarse next to the fastest transforms\n";
  }
  return 0;
}

struct TuneReportArgs {
  std::string db = "tune.tsv";
  std::string mode;
  int n = 0;
  int frames = 0;
  int j = 0;
};

int run_tune_report(const TuneReportArgs& a) {
  TuneDb db(a.db);
  const std::vector<TuningRecord> recs = db.load();
  const bool filtered = !a.mode.empty() || a.n > 0 || a.frames > 0 || a.j > 0;
  if (filtered) {
    if (a.mode.empty() || a.n <= 0 || a.frames <= 0 || a.j <= 0) {
      throw UsageError("a filtered report needs all of --mode, --n, --frames, --j");
    }
    ProtocolKey key{mode_from_name(a.mode), a.n, frames_bucket(a.frames), a.j};
    const std::pair<int, int> ta = select_config(key, recs);
    std::cout << "T=" << ta.first << " A=" << ta.second << "\n";
    return 0;
  }
  std::cout << recs.size() << " records";
  if (db.skipped_lines() > 0) std::cout << " (" << db.skipped_lines() << " lines skipped)";
  std::cout << "\n";
  // best per key, keys in canonical order
  std::map<ProtocolKey, const TuningRecord*> best;
  std::map<ProtocolKey, int> counts;
  for (const TuningRecord& r : recs) {
    ++counts[r.key];
    auto it = best.find(r.key);
    if (it == best.end() || r.runtime_ms < it->second->runtime_ms) best[r.key] = &r;
  }
  for (const auto& [key, rec] : best) {
    std::cout << mode_name(key.mode) << " N=" << key.N << " frames<=" << bucket_label(key.bucket)
              << " J=" << key.J << ": best T=" << rec->T << " A=" << rec->A << " at "
              << rec->runtime_ms << " ms/frame (" << counts[key] << " measured)\n";
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Real-time radial MRI reconstruction"};
  app.require_subcommand(1);

  PhantomArgs pa;
  CLI::App* ph = app.add_subcommand("phantom", "Simulate a radial k-space dataset");
  ph->add_option("--out", pa.out, "output .rtk path")->required();
  ph->add_option("--n", pa.n, "image side length")->check(CLI::PositiveNumber);
  ph->add_option("--j", pa.j, "receive channels")->check(CLI::PositiveNumber);
  ph->add_option("--k", pa.k, "spokes per frame")->check(CLI::PositiveNumber);
  ph->add_option("--u", pa.u, "interleaved turns")->check(CLI::PositiveNumber);
  ph->add_option("--frames", pa.frames, "frames per slice")->check(CLI::PositiveNumber);
  ph->add_option("--slices", pa.slices, "slice count")->check(CLI::PositiveNumber);
  ph->add_option("--mode", pa.mode, "single_slice, multi_slice or flow");
  ph->add_option("--noise", pa.noise, "complex noise sigma per sample")
      ->check(CLI::NonNegativeNumber);
  ph->add_option("--seed", pa.seed, "noise seed");
  ph->add_option("--flow-phase", pa.flow_phase, "flow-encoded phase offset, radians");
  ph->add_flag("--paper-scale", pa.paper_scale, "defaults N=160 J=10 K=17");

  ReconstructArgs ra;
  CLI::App* rc = app.add_subcommand("reconstruct", "Reconstruct an image series");
  rc->add_option("--in", ra.in, "input .rtk path")->required();
  rc->add_option("--out", ra.out, "output .rti path")->required();
  CLI::Option* ot = rc->add_option("-T,--threads", ra.T, "reconstruction threads")
                        ->check(CLI::Range(1, 64));
  CLI::Option* oa = rc->add_option("-A,--workers", ra.A, "workers per thread")
                        ->check(CLI::Range(1, 4));
  CLI::Option* oauto =
      rc->add_flag("--autotune", ra.autotune, "pick (T, A) from the tuning database");
  CLI::Option* olearn = rc->add_flag(
      "--learn", ra.learn, "measure the next untried (T, A) and record the result");
  oauto->excludes(ot)->excludes(oa);
  olearn->excludes(ot)->excludes(oa);
  rc->add_option("--tune-db", ra.tune_db, "tuning database path");
  rc->add_option("--total-workers", ra.total_workers, "thread budget for tuning")
      ->check(CLI::Range(1, 64));
  rc->add_option("--newton", ra.newton, "Newton steps per frame")->check(CLI::PositiveNumber);
  rc->add_option("--alpha0", ra.alpha0, "initial regularization weight");
  rc->add_option("--alpha-q", ra.alpha_q, "regularization reduction per step");
  rc->add_option("--cg-tol", ra.cg_tol, "inner solver relative tolerance (0 disables)");
  rc->add_option("--cg-budget", ra.cg_budget, "total inner iterations per frame (0 = off)");
  rc->add_option("--gamma-min", ra.gamma_min, "grid oversampling lower bound");
  rc->add_option("--gamma-max", ra.gamma_max, "grid oversampling upper bound");
  rc->add_option("--fft-table", ra.fft_table, "transform timing table for grid planning");
  rc->add_option("--compress", ra.compress, "virtual channels to compress to")
      ->check(CLI::PositiveNumber);
  rc->add_option("--delay", ra.delay, "gradient delay correction, samples");
  rc->add_flag("--median", ra.median, "temporal median-of-3 on magnitude output");
  rc->add_flag("--no-chain", ra.no_chain, "reconstruct every frame from scratch");
  rc->add_option("--queue-cap", ra.queue_cap, "stage queue capacity")
      ->check(CLI::Range(1, 64));
  rc->add_option("--report", ra.report, "report format: text or json")
      ->check(CLI::IsMember({"text", "json"}));
  rc->add_option("--baseline-ms", ra.baseline_ms,
                 "single-thread per-frame time; adds speedup and efficiency");

  BenchArgs ba;
  CLI::App* bf = app.add_subcommand("bench-fft", "Time transforms and save a lookup table");
  bf->add_option("--lo", ba.lo, "smallest size")->check(CLI::PositiveNumber);
  bf->add_option("--hi", ba.hi, "largest size")->check(CLI::PositiveNumber);
  bf->add_option("--trials", ba.trials, "timed repetitions per size")
      ->check(CLI::PositiveNumber);
  bf->add_option("--out", ba.out, "table path")->required();

  TuneReportArgs ta;
  CLI::App* tr = app.add_subcommand("tune-report", "Summarize the tuning database");
  tr->add_option("--db", ta.db, "tuning database path");
  tr->add_option("--mode", ta.mode, "filter: imaging mode");
  tr->add_option("--n", ta.n, "filter: image side length");
  tr->add_option("--frames", ta.frames, "filter: frame count");
  tr->add_option("--j", ta.j, "filter: channel count");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc_code = app.exit(e);
    return rc_code == 0 ? 0 : 2;
  }

  try {
    if (ph->parsed()) {
      if (pa.paper_scale) {
        if (ph->count("--n") == 0) pa.n = 160;
        if (ph->count("--j") == 0) pa.j = 10;
        if (ph->count("--k") == 0) pa.k = 17;
      }
      return run_phantom(pa);
    }
    if (rc->parsed()) return run_reconstruct(ra);
    if (bf->parsed()) return run_bench(ba);
    if (tr->parsed()) return run_tune_report(ta);
  } catch (const rtnlinv::UsageError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const rtnlinv::DataError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    // SolverError, DecompFault and anything unexpected
    std::cerr << "error: " << e.what() << "\n";
    return 4;
  }
  return 0;
}
