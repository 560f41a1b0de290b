#pragma once

#include <atomic>
#include <chrono>
#include <condition_variable>
#include <cstdint>
#include <functional>
#include <mutex>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include "rtnlinv/fft.hpp"
#include "rtnlinv/types.hpp"

namespace rtnlinv {

// Largest worker group one reconstruction thread may own (mirrors the
// peer-access limit of one accelerator domain).
constexpr int kGroupSizeMax = 4;

// Contiguous balanced channel blocks [begin, end), sizes differing by at
// most one, larger blocks first. Deterministic.
std::vector<std::pair<int, int>> partition_channels(int J, int A);

// Sums per-channel terms in index order. Workers deposit their channels'
// contributions at the channels' global slots beforehand, so the result is
// bit-identical no matter how the channels were partitioned.
CImage all_reduce_sum(const std::vector<CImage>& terms);

// A compute workers driven in lockstep: run(fn) executes fn(a) for every
// a in [0, A); the calling thread acts as worker 0 and the pool supplies the
// rest. A missing worker past the deadline raises DecompFault.
class WorkerGroup {
 public:
  explicit WorkerGroup(int A,
                       std::chrono::milliseconds timeout = std::chrono::seconds(30));
  ~WorkerGroup();
  WorkerGroup(const WorkerGroup&) = delete;
  WorkerGroup& operator=(const WorkerGroup&) = delete;

  int size() const { return A_; }
  void run(const std::function<void(int)>& fn);

  // test hook: worker `a` stalls past the deadline on its next task
  void inject_stall(int a);

 private:
  void worker_main(int a);

  int A_;
  std::chrono::milliseconds timeout_;
  std::mutex mu_;
  std::condition_variable cv_task_;
  std::condition_variable cv_done_;
  std::function<void(int)> task_;  // owned copy so late wakeups never dangle
  fft::Ctx task_ctx_ = fft::Ctx::other;
  uint64_t generation_ = 0;
  int pending_ = 0;
  bool shutdown_ = false;
  std::vector<char> stall_;   // per worker, consumed on use
  std::exception_ptr first_error_;
  std::vector<std::thread> threads_;
};

// Out-of-order schedule parameters: frames 1..l run strictly in order, later
// frames may regularize against any completed frame in the lookback window
// [n-o, n-1] until the final Newton step, which always uses n-1.
struct TemporalSchedule {
  int l = 1;
  int o = 1;
  static TemporalSchedule for_turns(int U) {
    return TemporalSchedule{U, (U + 1) / 2};
  }
};

// Tracks per-frame reconstruction progress. Monotone per frame; waiters are
// woken on completion. Also allocates the global event sequence numbers the
// audit log uses to prove ordering.
class CompletionLedger {
 public:
  explicit CompletionLedger(int frames);

  void mark_step(int n, int m);  // Newton step m of frame n finished
  void mark_complete(int n);
  bool completed(int n) const;
  int last_step(int n) const;  // -1 if none

  // Blocks until frame n completes. Throws DecompFault past the deadline
  // (generous; exists so scheduling bugs fail loudly instead of hanging).
  void wait_complete(int n,
                     std::chrono::milliseconds deadline = std::chrono::minutes(10));

  // Fails the whole series: current and future waiters throw DecompFault
  // instead of blocking on frames that will never arrive.
  void poison();
  bool poisoned() const;

  uint64_t next_seq() { return seq_.fetch_add(1); }

 private:
  mutable std::mutex mu_;
  std::condition_variable cv_;
  std::vector<int> last_step_;
  std::vector<char> complete_;
  bool poisoned_ = false;
  std::atomic<uint64_t> seq_{0};
};

// The frame whose estimate initializes / regularizes Newton step m of frame
// n. Returns n-1 for the strict prefix (n <= l) and for the final step
// (m = M-1, waiting for n-1 to complete); otherwise the most recent completed
// frame in [n-o, n-1], blocking for n-o when none is ready yet.
int h_choose(int n, int m, int M, const TemporalSchedule& sched, CompletionLedger& ledger);

// One audit line per frame, enough to replay the scheduling decisions.
struct FrameAudit {
  int frame = 0;
  int thread = 0;
  int workers = 1;
  int init_src = -1;              // h(n, 0)
  int reg_final_src = -1;         // must equal n-1 for n >= 1
  std::vector<int> reg_src;       // per Newton step
  uint64_t start_seq = 0;
  uint64_t reg_final_seq = 0;     // taken after the closing-step source resolved
  uint64_t finish_seq = 0;
};

std::string format_audit(const FrameAudit& a);

}  // namespace rtnlinv
