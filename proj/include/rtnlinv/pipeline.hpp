#pragma once

#include <array>
#include <chrono>
#include <condition_variable>
#include <deque>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <string>
#include <vector>

#include "rtnlinv/ingest.hpp"
#include "rtnlinv/metrics.hpp"
#include "rtnlinv/nlinv.hpp"

namespace rtnlinv {

// ---------------------------------------------------------------------------
// Idealized clock model of the five-stage pipeline, used to reason about
// prologue/epilogue structure and bottleneck behavior without threads. Every
// stage processes one frame per `cost` ticks, queues between stages hold
// queue_cap frames, and a full downstream queue blocks the producer.

struct SimResult {
  int makespan_ticks = 0;
  int prologue_ticks = 0;  // sink idle time before the first frame arrives
  int epilogue_ticks = 0;  // drain time after the source has finished
  std::vector<int> finish_tick;  // per frame, when it leaves the last stage
};

SimResult simulate_pipeline(int frames, const std::vector<int>& stage_costs,
                            int queue_cap = 4);

// ---------------------------------------------------------------------------
// Postprocessing

ImageOut magnitude_image(const CImage& img, int frame_index, int slice_id);

// Phase difference of a flow-encoded pair: arg(even * conj(odd)) pixelwise,
// so the pair (rho, rho e^{i theta}) maps to -theta everywhere.
ImageOut phase_difference_image(const CImage& even, const CImage& odd, int pair_index,
                                int slice_id);

// Streaming temporal median-of-3 on magnitude pixels, per slice, edge frames
// replicated. One frame of lookahead: push() emits the previous frame once
// its successor is known, drain() flushes the last one.
class MedianFilter3 {
 public:
  std::vector<ImageOut> push(ImageOut img);
  std::vector<ImageOut> drain();

 private:
  std::map<int, std::deque<ImageOut>> held_;  // per slice, at most 2 frames
};

// ---------------------------------------------------------------------------
// Frame flow endpoints. Each stream is single-owner: the source is consumed
// by the src stage thread and the sink by the snk stage thread only.

struct FrameSource {
  virtual ~FrameSource() = default;
  virtual bool next(KSpaceFrame& out) = 0;  // false at end of stream
};

struct ImageSink {
  virtual ~ImageSink() = default;
  virtual void write(const ImageOut& img) = 0;
  virtual void close() {}
};

class VectorSource : public FrameSource {
 public:
  explicit VectorSource(std::vector<KSpaceFrame> frames)
      : frames_(std::move(frames)) {}
  bool next(KSpaceFrame& out) override;

  int fail_at = -1;  // test hook: throw DataError when reaching this index

 private:
  std::vector<KSpaceFrame> frames_;
  size_t pos_ = 0;
};

class CollectSink : public ImageSink {
 public:
  void write(const ImageOut& img) override { images.push_back(img); }
  std::vector<ImageOut> images;
};

class RtkSource : public FrameSource {
 public:
  explicit RtkSource(RtkReader& reader) : reader_(&reader) {}
  bool next(KSpaceFrame& out) override { return reader_->read_frame(out); }

 private:
  RtkReader* reader_;
};

class RtiSink : public ImageSink {
 public:
  explicit RtiSink(RtiWriter& writer) : writer_(&writer) {}
  void write(const ImageOut& img) override { writer_->write_image(img); }
  void close() override { writer_->close(); }

 private:
  RtiWriter* writer_;
};

// ---------------------------------------------------------------------------
// The real pipeline: five stage threads (src, pre, rec, pst, snk) joined by
// bounded blocking queues, with the rec stage fanning out to T reconstruction
// workers and re-sequencing results back into frame order before pst.
// Messages are moved between stages, never shared.

enum class FaultKind { none, usage, data, solver };

struct PipelineConfig {
  ReconPlan plan;
  TemporalSchedule sched{1, 1};
  int T = 1;  // reconstruction worker threads inside rec
  int A = 1;  // channel workers per reconstruction thread
  int queue_cap = 4;
  bool chain = true;
  bool normalize = true;
  double delay_samples = 0.0;
  const CompressionMatrix* compression = nullptr;
  bool median_filter = false;
  std::chrono::milliseconds worker_timeout{30000};
  // synthetic per-stage load (ms of sleep per frame), for timing tests
  std::array<int, 5> stage_cost_ms{0, 0, 0, 0, 0};
  // test hook, runs in pre before gridding and may mutate the frame
  std::function<void(KSpaceFrame&)> pre_hook;
};

struct PipelineStats {
  int frames_in = 0;
  int images_out = 0;
  double wall_seconds = 0;
  double fps = 0;
  StageTimes stage[5];  // src, pre, rec, pst, snk
  int prologue_frames = 4;
  int epilogue_frames = 4;
  // median inter-delivery time at the sink over the steady region (first and
  // last stages-1 deliveries excluded); single delivery: its latency. This is
  // the per-frame runtime the tuning database records.
  double steady_median_ms = 0;
  bool failed = false;
  FaultKind fault = FaultKind::none;
  std::string error;
  int last_good_frame = -1;  // highest output frame index delivered in order
  int max_in_flight = 0;     // frames inside the pipeline, peak
  std::vector<double> snk_arrival_s;   // per delivered image, seconds from start
  std::vector<FrameAudit> audit;       // per (frame, slice), stream order
  std::vector<double> slice_scale;     // data normalization factor per slice
};

// Runs hdr.frames * hdr.slices frames from src through all five stages into
// snk. Slices form independent temporal chains. On a stage failure the
// pipeline drains: queued frames are discarded, threads stop, and the stats
// carry the fault kind, its message, and the last good frame.
PipelineStats run_pipeline(FrameSource& src, ImageSink& snk, const DatasetHeader& hdr,
                           const PipelineConfig& cfg);

// ---------------------------------------------------------------------------
// Bounded blocking queue joining two stages. close() lets the consumer drain
// what is queued; abort() discards queued items so a fault stops the flow
// immediately. Exposed for the unit tests.

template <typename T>
class BoundedQueue {
 public:
  explicit BoundedQueue(size_t cap) : cap_(cap < 1 ? 1 : cap) {}

  // blocks while full; false once closed (the item is not queued)
  bool push(T v) {
    std::unique_lock<std::mutex> lk(mu_);
    cv_push_.wait(lk, [&] { return closed_ || q_.size() < cap_; });
    if (closed_) return false;
    q_.push_back(std::move(v));
    cv_pop_.notify_one();
    return true;
  }

  // blocks while empty; false once closed and drained
  bool pop(T& out) {
    std::unique_lock<std::mutex> lk(mu_);
    cv_pop_.wait(lk, [&] { return closed_ || !q_.empty(); });
    if (q_.empty()) return false;
    out = std::move(q_.front());
    q_.pop_front();
    cv_push_.notify_one();
    return true;
  }

  void close() {
    std::lock_guard<std::mutex> lk(mu_);
    closed_ = true;
    cv_push_.notify_all();
    cv_pop_.notify_all();
  }

  void abort() {
    std::lock_guard<std::mutex> lk(mu_);
    closed_ = true;
    q_.clear();
    cv_push_.notify_all();
    cv_pop_.notify_all();
  }

  size_t capacity() const { return cap_; }

 private:
  size_t cap_;
  std::mutex mu_;
  std::condition_variable cv_push_;
  std::condition_variable cv_pop_;
  std::deque<T> q_;
  bool closed_ = false;
};

}  // namespace rtnlinv
