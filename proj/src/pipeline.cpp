#include "rtnlinv/pipeline.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <thread>

namespace rtnlinv {

// ---------------------------------------------------------------------------
// Idealized clock model

SimResult simulate_pipeline(int frames, const std::vector<int>& stage_costs, int queue_cap) {
  const int S = static_cast<int>(stage_costs.size());
  if (frames < 1) throw UsageError("simulate_pipeline: need at least one frame");
  if (S < 1) throw UsageError("simulate_pipeline: need at least one stage");
  if (queue_cap < 1) throw UsageError("simulate_pipeline: queue capacity must be >= 1");
  for (int c : stage_costs) {
    if (c < 0) throw UsageError("simulate_pipeline: stage costs must be >= 0");
  }

  // pull: the tick a stage takes a frame in; depart: the tick the frame moves
  // on (past any blocking on a full downstream queue). A stage holds its
  // frame from pull to depart, so it is busy for the blocked time too.
  std::vector<std::vector<int>> pull(static_cast<size_t>(S)),
      depart(static_cast<size_t>(S));
  for (int s = 0; s < S; ++s) {
    pull[static_cast<size_t>(s)].assign(static_cast<size_t>(frames), 0);
    depart[static_cast<size_t>(s)].assign(static_cast<size_t>(frames), 0);
  }
  for (int f = 0; f < frames; ++f) {
    for (int s = 0; s < S; ++s) {
      int t = 0;
      if (s > 0) t = std::max(t, depart[static_cast<size_t>(s - 1)][static_cast<size_t>(f)]);
      if (f > 0) t = std::max(t, depart[static_cast<size_t>(s)][static_cast<size_t>(f - 1)]);
      pull[static_cast<size_t>(s)][static_cast<size_t>(f)] = t;
      int d = t + stage_costs[static_cast<size_t>(s)];
      // the frame may only leave once the queue into stage s+1 has a slot,
      // which frees when frame f - cap is pulled out of it
      if (s + 1 < S && f >= queue_cap) {
        d = std::max(d, pull[static_cast<size_t>(s + 1)][static_cast<size_t>(f - queue_cap)]);
      }
      depart[static_cast<size_t>(s)][static_cast<size_t>(f)] = d;
    }
  }

  SimResult res;
  res.finish_tick = depart[static_cast<size_t>(S - 1)];
  res.makespan_ticks = res.finish_tick[static_cast<size_t>(frames - 1)];
  res.prologue_ticks = pull[static_cast<size_t>(S - 1)][0];
  res.epilogue_ticks =
      res.makespan_ticks -
      (pull[0][static_cast<size_t>(frames - 1)] + stage_costs[0]);
  return res;
}

// ---------------------------------------------------------------------------
// Postprocessing

ImageOut magnitude_image(const CImage& img, int frame_index, int slice_id) {
  ImageOut out;
  out.frame_index = frame_index;
  out.slice_id = slice_id;
  out.n = img.n;
  out.kind = ImageKind::magnitude;
  out.pixels.resize(img.v.size());
  for (size_t i = 0; i < img.v.size(); ++i) {
    out.pixels[i] = std::abs(img.v[i]);
  }
  return out;
}

ImageOut phase_difference_image(const CImage& even, const CImage& odd, int pair_index,
                                int slice_id) {
  if (even.n != odd.n) throw UsageError("phase_difference_image: size mismatch");
  ImageOut out;
  out.frame_index = pair_index;
  out.slice_id = slice_id;
  out.n = even.n;
  out.kind = ImageKind::phase_difference;
  out.pixels.resize(even.v.size());
  for (size_t i = 0; i < even.v.size(); ++i) {
    out.pixels[i] = std::arg(std::complex<double>(even.v[i]) *
                             std::conj(std::complex<double>(odd.v[i])));
  }
  return out;
}

namespace {

float median3(float a, float b, float c) {
  return std::max(std::min(a, b), std::min(std::max(a, b), c));
}

ImageOut median_of(const ImageOut& a, const ImageOut& b, const ImageOut& c) {
  ImageOut out = b;  // keeps b's frame index and slice
  for (size_t i = 0; i < out.pixels.size(); ++i) {
    out.pixels[i] = median3(a.pixels[i], b.pixels[i], c.pixels[i]);
  }
  return out;
}

}  // namespace

std::vector<ImageOut> MedianFilter3::push(ImageOut img) {
  std::deque<ImageOut>& held = held_[img.slice_id];
  std::vector<ImageOut> out;
  if (held.empty()) {
    held.push_back(std::move(img));
    return out;
  }
  if (held.size() == 1) {
    // first frame: the missing predecessor is replicated
    out.push_back(median_of(held[0], held[0], img));
  } else {
    out.push_back(median_of(held[0], held[1], img));
    held.pop_front();
  }
  held.push_back(std::move(img));
  return out;
}

std::vector<ImageOut> MedianFilter3::drain() {
  std::vector<ImageOut> out;
  for (auto& [slice, held] : held_) {
    if (held.size() == 1) {
      out.push_back(held[0]);  // single frame passes through
    } else if (held.size() == 2) {
      out.push_back(median_of(held[0], held[1], held[1]));
    }
    held.clear();
  }
  held_.clear();
  return out;
}

bool VectorSource::next(KSpaceFrame& out) {
  if (fail_at >= 0 && static_cast<size_t>(fail_at) == pos_) {
    throw DataError("source failed at frame " + std::to_string(fail_at));
  }
  if (pos_ >= frames_.size()) return false;
  out = frames_[pos_++];
  return true;
}

// ---------------------------------------------------------------------------
// The threaded pipeline

namespace {

void sleep_ms(int ms) {
  if (ms > 0) std::this_thread::sleep_for(std::chrono::milliseconds(ms));
}

FaultKind classify_fault(const std::exception& e) {
  if (dynamic_cast<const UsageError*>(&e) != nullptr) return FaultKind::usage;
  if (dynamic_cast<const DataError*>(&e) != nullptr) return FaultKind::data;
  return FaultKind::solver;  // SolverError, DecompFault, anything unexpected
}

struct RecInput {
  int g = -1;  // stream order index: frame * slices + slice
  int frame = 0;
  int slice = 0;
  GriddedData z;
  std::shared_ptr<const PsfKernel> psf;
};

struct RecOutput {
  int g = -1;
  int frame = 0;
  int slice = 0;
  CImage image;
};

class StageTimer {
 public:
  void add(double ms) {
    std::lock_guard<std::mutex> lk(mu_);
    sum_ += ms;
    max_ = std::max(max_, ms);
    ++n_;
  }
  StageTimes snapshot() const {
    std::lock_guard<std::mutex> lk(mu_);
    StageTimes t;
    t.processed = n_;
    t.max_ms = max_;
    t.mean_ms = n_ > 0 ? sum_ / n_ : 0.0;
    return t;
  }

 private:
  mutable std::mutex mu_;
  double sum_ = 0;
  double max_ = 0;
  int n_ = 0;
};

// The rec stage's mailbox: the pre stage deposits gridded frames in stream
// order, each reconstruction worker claims exactly the indices assigned to
// it. Deposits block once queue_cap frames sit unclaimed, which is what
// backpressures the upstream stages when reconstruction falls behind.
class ArrivalStore {
 public:
  ArrivalStore(int total, int cap) : slots_(static_cast<size_t>(total)), cap_(cap) {}

  bool deposit(std::unique_ptr<RecInput> in) {
    std::unique_lock<std::mutex> lk(mu_);
    cv_space_.wait(lk, [&] { return aborted_ || held_ < cap_; });
    if (aborted_) return false;
    const int g = in->g;
    slots_[static_cast<size_t>(g)] = std::move(in);
    ++held_;
    cv_slot_.notify_all();
    return true;
  }

  std::unique_ptr<RecInput> claim(int g) {
    std::unique_lock<std::mutex> lk(mu_);
    cv_slot_.wait(lk, [&] {
      return aborted_ || closed_ || slots_[static_cast<size_t>(g)] != nullptr;
    });
    if (slots_[static_cast<size_t>(g)] == nullptr) return nullptr;
    auto out = std::move(slots_[static_cast<size_t>(g)]);
    --held_;
    cv_space_.notify_all();
    return out;
  }

  void close() {
    std::lock_guard<std::mutex> lk(mu_);
    closed_ = true;
    cv_slot_.notify_all();
  }

  void abort() {
    std::lock_guard<std::mutex> lk(mu_);
    aborted_ = true;
    closed_ = true;
    for (auto& s : slots_) s.reset();
    held_ = 0;
    cv_slot_.notify_all();
    cv_space_.notify_all();
  }

 private:
  std::mutex mu_;
  std::condition_variable cv_slot_;
  std::condition_variable cv_space_;
  std::vector<std::unique_ptr<RecInput>> slots_;
  int cap_;
  int held_ = 0;
  bool closed_ = false;
  bool aborted_ = false;
};

// Restores frame order between the reconstruction workers and pst: results
// enter in completion order, leave in stream order. Whichever worker delivers
// the next expected frame drains the run of ready successors.
class Resequencer {
 public:
  explicit Resequencer(BoundedQueue<RecOutput>& out) : out_(out) {}

  bool deposit(RecOutput r) {
    std::unique_lock<std::mutex> lk(mu_);
    done_.emplace(r.g, std::move(r));
    while (true) {
      auto it = done_.find(next_);
      if (it == done_.end()) return true;
      RecOutput item = std::move(it->second);
      done_.erase(it);
      lk.unlock();
      const bool ok = out_.push(std::move(item));
      lk.lock();
      if (!ok) return false;
      ++next_;
    }
  }

  size_t buffered() const {
    std::lock_guard<std::mutex> lk(mu_);
    return done_.size();
  }

 private:
  mutable std::mutex mu_;
  std::map<int, RecOutput> done_;
  int next_ = 0;
  BoundedQueue<RecOutput>& out_;
};

struct SliceChain {
  explicit SliceChain(int frames) : ledger(frames), ests(static_cast<size_t>(frames)) {}
  CompletionLedger ledger;
  std::vector<Estimate> ests;
};

}  // namespace

PipelineStats run_pipeline(FrameSource& src, ImageSink& snk, const DatasetHeader& hdr,
                           const PipelineConfig& cfg) {
  validate_header(hdr);
  if (cfg.T < 1) throw UsageError("run_pipeline: thread count must be >= 1");
  if (cfg.A < 1) throw UsageError("run_pipeline: worker count must be >= 1");
  if (cfg.queue_cap < 1) throw UsageError("run_pipeline: queue capacity must be >= 1");
  const int J_expect = cfg.compression ? cfg.compression->J_virtual : hdr.J_physical;
  if (cfg.plan.J != J_expect) {
    throw UsageError("run_pipeline: plan channel count does not match the data");
  }
  if (cfg.plan.N != hdr.N) {
    throw UsageError("run_pipeline: plan field of view does not match the data");
  }

  const int Sl = hdr.slices;
  const int F = hdr.frames;
  const int total = F * Sl;
  const int T = std::min(cfg.T, total);
  const int M = cfg.plan.newton_steps;

  const CImage winv = make_weights_inv(cfg.plan.Gc, cfg.plan.G);
  const Estimate unity = initial_estimate(cfg.plan);

  BoundedQueue<KSpaceFrame> q_pre(static_cast<size_t>(cfg.queue_cap));
  ArrivalStore arrivals(total, cfg.queue_cap);
  BoundedQueue<RecOutput> q_pst(static_cast<size_t>(cfg.queue_cap));
  BoundedQueue<ImageOut> q_snk(static_cast<size_t>(cfg.queue_cap));
  Resequencer reseq(q_pst);

  std::vector<std::unique_ptr<SliceChain>> chains;
  chains.reserve(static_cast<size_t>(Sl));
  for (int s = 0; s < Sl; ++s) chains.push_back(std::make_unique<SliceChain>(F));

  std::vector<double> slice_scale(static_cast<size_t>(Sl), 1.0);
  std::vector<FrameAudit> audit(static_cast<size_t>(total));

  std::atomic<bool> failed{false};
  FaultKind fault_kind = FaultKind::none;
  std::string fault_msg;
  std::mutex fault_mu;
  const auto fail = [&](const std::exception& e) {
    bool first = false;
    {
      std::lock_guard<std::mutex> lk(fault_mu);
      if (!failed.load()) {
        failed.store(true);
        fault_kind = classify_fault(e);
        fault_msg = e.what();
        first = true;
      }
    }
    if (first) {
      // drain: discard queued work everywhere and wake every waiter
      q_pre.abort();
      arrivals.abort();
      q_pst.abort();
      q_snk.abort();
      for (auto& ch : chains) ch->ledger.poison();
    }
  };

  std::atomic<int> in_flight{0};
  std::atomic<int> max_in_flight{0};
  const auto enter_flight = [&] {
    const int v = in_flight.fetch_add(1) + 1;
    int m = max_in_flight.load();
    while (v > m && !max_in_flight.compare_exchange_weak(m, v)) {
    }
  };

  StageTimer timers[5];
  const auto start = std::chrono::steady_clock::now();
  const auto ms_since = [](std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0)
        .count();
  };

  int frames_in = 0;
  const auto src_main = [&] {
    try {
      int count = 0;
      KSpaceFrame f;
      while (count < total) {
        const auto t0 = std::chrono::steady_clock::now();
        if (!src.next(f)) {
          throw DataError("source ended after " + std::to_string(count) + " of " +
                          std::to_string(total) + " frames");
        }
        const int expect_frame = count / Sl;
        const int expect_slice = count % Sl;
        if (f.frame_index != expect_frame || f.slice_id != expect_slice) {
          throw DataError("source out of order: frame " + std::to_string(f.frame_index) +
                          " slice " + std::to_string(f.slice_id) + " where frame " +
                          std::to_string(expect_frame) + " slice " +
                          std::to_string(expect_slice) + " was due");
        }
        sleep_ms(cfg.stage_cost_ms[0]);
        timers[0].add(ms_since(t0));
        enter_flight();
        if (!q_pre.push(std::move(f))) return;
        ++count;
        frames_in = count;
      }
      q_pre.close();
    } catch (const std::exception& e) {
      fail(e);
      q_pre.close();
    }
  };

  const auto pre_main = [&] {
    try {
      FramePsfProvider psf_provider(cfg.plan, cfg.delay_samples);
      KSpaceFrame f;
      while (q_pre.pop(f)) {
        const auto t0 = std::chrono::steady_clock::now();
        if (cfg.pre_hook) cfg.pre_hook(f);
        const KSpaceFrame* use = &f;
        KSpaceFrame tmp;
        if (cfg.compression != nullptr) {
          tmp = apply_compression(f, *cfg.compression);
          use = &tmp;
        }
        if (use->J != cfg.plan.J) {
          throw UsageError("pre: channel count does not match the plan");
        }
        auto in = std::make_unique<RecInput>();
        in->frame = use->frame_index;
        in->slice = use->slice_id;
        in->g = in->frame * Sl + in->slice;
        in->z = grid_adjoint(*use, cfg.plan, cfg.delay_samples);
        in->psf = psf_provider.get(*use);
        if (cfg.normalize) {
          auto& s = slice_scale[static_cast<size_t>(in->slice)];
          if (in->frame == 0) {
            double nsq = 0;
            for (const CImage& img : in->z.z) nsq += nrm2sq(img);
            if (nsq > 0) s = 100.0 / std::sqrt(nsq);
          }
          if (s != 1.0) {
            const cfloat sc(static_cast<float>(s), 0.0f);
            for (CImage& img : in->z.z) scale(img, sc);
          }
        }
        sleep_ms(cfg.stage_cost_ms[1]);
        timers[1].add(ms_since(t0));
        if (!arrivals.deposit(std::move(in))) return;
      }
      arrivals.close();
    } catch (const std::exception& e) {
      fail(e);
      arrivals.close();
    }
  };

  std::atomic<int> rec_live{T};
  const auto rec_main = [&](int t) {
    // the reconstruction fan-in: whichever worker leaves last seals the queue
    struct Closer {
      std::atomic<int>& live;
      BoundedQueue<RecOutput>& q;
      ~Closer() {
        if (live.fetch_sub(1) == 1) q.close();
      }
    } closer{rec_live, q_pst};
    try {
      std::unique_ptr<WorkerGroup> wg;
      if (cfg.A > 1) wg = std::make_unique<WorkerGroup>(cfg.A, cfg.worker_timeout);
      for (int g = t; g < total; g += T) {
        auto in = arrivals.claim(g);
        if (!in) return;
        const auto t0 = std::chrono::steady_clock::now();
        const int n = in->frame;
        const int sl = in->slice;
        SliceChain& ch = *chains[static_cast<size_t>(sl)];
        if (ch.ledger.poisoned()) return;
        const bool chained = cfg.chain && n > 0;
        // frames inside the strict prefix wait for the whole predecessor
        if (chained && n <= cfg.sched.l) ch.ledger.wait_complete(n - 1);
        FrameAudit a;
        a.frame = n;
        a.thread = t;
        a.workers = cfg.A;
        a.reg_src.assign(static_cast<size_t>(M), -1);
        a.start_seq = ch.ledger.next_seq();
        if (chained) a.init_src = h_choose(n, 0, M, cfg.sched, ch.ledger);
        const Estimate init =
            (a.init_src >= 0) ? ch.ests[static_cast<size_t>(a.init_src)] : unity;
        const RegProvider reg = [&](int m) -> const Estimate& {
          if (!chained) {
            if (m == M - 1) a.reg_final_seq = ch.ledger.next_seq();
            return unity;
          }
          const int src_n = h_choose(n, m, M, cfg.sched, ch.ledger);
          if (m == M - 1) a.reg_final_seq = ch.ledger.next_seq();
          a.reg_src[static_cast<size_t>(m)] = src_n;
          return ch.ests[static_cast<size_t>(src_n)];
        };
        FrameResult fr = reconstruct_frame(in->z, *in->psf, cfg.plan, winv, init, reg,
                                           wg.get(),
                                           [&](int m) { ch.ledger.mark_step(n, m); });
        a.reg_final_src = chained ? a.reg_src[static_cast<size_t>(M - 1)] : -1;
        const double s = slice_scale[static_cast<size_t>(sl)];
        if (cfg.normalize && s != 1.0) {
          scale(fr.image, cfloat(static_cast<float>(1.0 / s), 0.0f));
        }
        ch.ests[static_cast<size_t>(n)] = std::move(fr.est);
        a.finish_seq = ch.ledger.next_seq();
        audit[static_cast<size_t>(in->g)] = std::move(a);
        ch.ledger.mark_complete(n);
        sleep_ms(cfg.stage_cost_ms[2]);
        timers[2].add(ms_since(t0));
        RecOutput out;
        out.g = in->g;
        out.frame = n;
        out.slice = sl;
        out.image = std::move(fr.image);
        if (!reseq.deposit(std::move(out))) return;
      }
    } catch (const std::exception& e) {
      fail(e);
    }
  };

  const auto pst_main = [&] {
    try {
      MedianFilter3 median;
      std::vector<std::unique_ptr<RecOutput>> pending_even(static_cast<size_t>(Sl));
      RecOutput r;
      bool snk_open = true;
      while (snk_open && q_pst.pop(r)) {
        const auto t0 = std::chrono::steady_clock::now();
        std::vector<ImageOut> outs;
        if (hdr.mode == ImagingMode::flow) {
          auto& pe = pending_even[static_cast<size_t>(r.slice)];
          if (!pe) {
            pe = std::make_unique<RecOutput>(std::move(r));
            timers[3].add(ms_since(t0));
            continue;
          }
          if (pe->frame + 1 != r.frame) {
            throw DataError("flow pairing broken at frame " + std::to_string(r.frame));
          }
          outs.push_back(
              phase_difference_image(pe->image, r.image, pe->frame / 2, r.slice));
          pe.reset();
        } else {
          ImageOut m = magnitude_image(r.image, r.frame, r.slice);
          if (cfg.median_filter) {
            outs = median.push(std::move(m));
          } else {
            outs.push_back(std::move(m));
          }
        }
        sleep_ms(cfg.stage_cost_ms[3]);
        timers[3].add(ms_since(t0));
        for (ImageOut& o : outs) {
          if (!q_snk.push(std::move(o))) {
            snk_open = false;
            break;
          }
        }
      }
      if (!failed.load()) {
        for (ImageOut& o : median.drain()) {
          if (!q_snk.push(std::move(o))) break;
        }
        for (const auto& pe : pending_even) {
          if (pe) {
            throw DataError("unpaired flow frame " + std::to_string(pe->frame));
          }
        }
      }
      q_snk.close();
    } catch (const std::exception& e) {
      fail(e);
      q_snk.close();
    }
  };

  int images_out = 0;
  int last_good = -1;
  std::vector<double> snk_arrival_s;
  const auto snk_main = [&] {
    try {
      std::vector<int> last(static_cast<size_t>(Sl), -1);
      const int frames_per_image = hdr.mode == ImagingMode::flow ? 2 : 1;
      ImageOut img;
      while (q_snk.pop(img)) {
        const auto t0 = std::chrono::steady_clock::now();
        int& prev = last[static_cast<size_t>(img.slice_id)];
        if (img.frame_index <= prev) {
          throw DataError("sink ordering violated: frame " +
                          std::to_string(img.frame_index) + " after " +
                          std::to_string(prev) + " on slice " +
                          std::to_string(img.slice_id));
        }
        prev = img.frame_index;
        snk.write(img);
        sleep_ms(cfg.stage_cost_ms[4]);
        timers[4].add(ms_since(t0));
        snk_arrival_s.push_back(
            std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count());
        last_good = std::max(last_good, img.frame_index);
        ++images_out;
        in_flight.fetch_sub(frames_per_image);
      }
      if (!failed.load()) snk.close();
    } catch (const std::exception& e) {
      fail(e);
    }
  };

  std::vector<std::thread> threads;
  threads.reserve(static_cast<size_t>(4 + T));
  threads.emplace_back(src_main);
  threads.emplace_back(pre_main);
  for (int t = 0; t < T; ++t) threads.emplace_back(rec_main, t);
  threads.emplace_back(pst_main);
  threads.emplace_back(snk_main);
  for (std::thread& th : threads) th.join();

  PipelineStats stats;
  stats.frames_in = frames_in;
  stats.images_out = images_out;
  stats.wall_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  stats.fps = stats.wall_seconds > 0 ? images_out / stats.wall_seconds : 0.0;
  for (int s = 0; s < 5; ++s) stats.stage[s] = timers[s].snapshot();
  stats.prologue_frames = 4;
  stats.epilogue_frames = 4;
  stats.failed = failed.load();
  stats.fault = fault_kind;
  stats.error = fault_msg;
  stats.last_good_frame = last_good;
  stats.max_in_flight = max_in_flight.load();
  stats.snk_arrival_s = std::move(snk_arrival_s);
  stats.audit = std::move(audit);
  stats.slice_scale = std::move(slice_scale);

  // per-frame runtime: median inter-delivery interval over the steady region
  std::vector<double> intervals;
  for (size_t i = 1; i < stats.snk_arrival_s.size(); ++i) {
    intervals.push_back((stats.snk_arrival_s[i] - stats.snk_arrival_s[i - 1]) * 1000.0);
  }
  std::vector<double> steady = intervals;
  if (intervals.size() > 8) {
    steady.assign(intervals.begin() + 4, intervals.end() - 4);
  }
  if (!steady.empty()) {
    std::nth_element(steady.begin(), steady.begin() + steady.size() / 2, steady.end());
    stats.steady_median_ms = steady[steady.size() / 2];
  } else if (!stats.snk_arrival_s.empty()) {
    stats.steady_median_ms = stats.snk_arrival_s[0] * 1000.0;
  } else {
    stats.steady_median_ms = stats.wall_seconds * 1000.0;
  }
  return stats;
}

}  // namespace rtnlinv
