#include "rtnlinv/decomp.hpp"

#include <algorithm>
#include <sstream>

#include "rtnlinv/fft.hpp"

namespace rtnlinv {

std::vector<std::pair<int, int>> partition_channels(int J, int A) {
  if (A < 1 || A > kGroupSizeMax || A > J) {
    throw UsageError("partition_channels: worker count out of range");
  }
  std::vector<std::pair<int, int>> blocks;
  const int base = J / A;
  const int rem = J % A;
  int begin = 0;
  for (int a = 0; a < A; ++a) {
    const int size = base + (a < rem ? 1 : 0);
    blocks.emplace_back(begin, begin + size);
    begin += size;
  }
  return blocks;
}

CImage all_reduce_sum(const std::vector<CImage>& terms) {
  if (terms.empty()) throw UsageError("all_reduce_sum: no terms");
  const int G = terms[0].n;
  std::vector<std::complex<double>> acc(static_cast<size_t>(G) * G, {0, 0});
  for (const CImage& t : terms) {
    if (t.n != G) throw UsageError("all_reduce_sum: size mismatch");
    for (size_t i = 0; i < acc.size(); ++i) acc[i] += std::complex<double>(t.v[i]);
  }
  CImage out(G);
  for (size_t i = 0; i < acc.size(); ++i) {
    out.v[i] = cfloat(static_cast<float>(acc[i].real()), static_cast<float>(acc[i].imag()));
  }
  return out;
}

WorkerGroup::WorkerGroup(int A, std::chrono::milliseconds timeout)
    : A_(A), timeout_(timeout), stall_(static_cast<size_t>(std::max(A, 1)), 0) {
  if (A < 1 || A > kGroupSizeMax) {
    throw UsageError("WorkerGroup: worker count out of range");
  }
  threads_.reserve(static_cast<size_t>(A_ - 1));
  for (int a = 1; a < A_; ++a) {
    threads_.emplace_back([this, a] { worker_main(a); });
  }
}

WorkerGroup::~WorkerGroup() {
  {
    std::unique_lock<std::mutex> lock(mu_);
    // let stalled stragglers from a faulted run drain before shutdown
    cv_done_.wait(lock, [this] { return pending_ == 0; });
    shutdown_ = true;
  }
  cv_task_.notify_all();
  for (std::thread& t : threads_) t.join();
}

void WorkerGroup::worker_main(int a) {
  uint64_t seen = 0;
  while (true) {
    std::function<void(int)> task;
    fft::Ctx ctx = fft::Ctx::other;
    bool stalled = false;
    {
      std::unique_lock<std::mutex> lock(mu_);
      cv_task_.wait(lock, [&] { return shutdown_ || generation_ > seen; });
      if (shutdown_) return;
      seen = generation_;
      task = task_;
      ctx = task_ctx_;
      if (stall_[static_cast<size_t>(a)]) {
        stall_[static_cast<size_t>(a)] = 0;
        stalled = true;
      }
    }
    std::exception_ptr err;
    if (stalled) {
      // simulated dead worker: blow the deadline and never touch the task,
      // whose captured state is gone once run() gives up on this step
      std::this_thread::sleep_for(timeout_ * 3);
    } else {
      try {
        fft::CtxScope scope(ctx);
        task(a);
      } catch (...) {
        err = std::current_exception();
      }
    }
    {
      std::lock_guard<std::mutex> lock(mu_);
      if (err && !first_error_) first_error_ = err;
      --pending_;
    }
    cv_done_.notify_all();
  }
}

void WorkerGroup::run(const std::function<void(int)>& fn) {
  if (A_ == 1) {
    fn(0);
    return;
  }
  {
    std::unique_lock<std::mutex> lock(mu_);
    // a previous faulted run may still have stragglers finishing up
    if (!cv_done_.wait_for(lock, timeout_ * 10, [this] { return pending_ == 0; })) {
      throw DecompFault("worker group wedged by an earlier fault");
    }
    task_ = fn;
    task_ctx_ = fft::current();
    first_error_ = nullptr;
    pending_ = A_ - 1;
    ++generation_;
  }
  cv_task_.notify_all();

  std::exception_ptr caller_err;
  try {
    fn(0);
  } catch (...) {
    caller_err = std::current_exception();
  }

  std::unique_lock<std::mutex> lock(mu_);
  const bool done = cv_done_.wait_for(lock, timeout_, [this] { return pending_ == 0; });
  if (caller_err) std::rethrow_exception(caller_err);
  if (!done) throw DecompFault("worker missed the step deadline");
  if (first_error_) std::rethrow_exception(first_error_);
}

void WorkerGroup::inject_stall(int a) {
  std::lock_guard<std::mutex> lock(mu_);
  if (a >= 0 && a < A_) stall_[static_cast<size_t>(a)] = 1;
}

CompletionLedger::CompletionLedger(int frames)
    : last_step_(static_cast<size_t>(std::max(frames, 0)), -1),
      complete_(static_cast<size_t>(std::max(frames, 0)), 0) {}

void CompletionLedger::mark_step(int n, int m) {
  std::lock_guard<std::mutex> lock(mu_);
  auto& cur = last_step_.at(static_cast<size_t>(n));
  if (m < cur) throw UsageError("CompletionLedger: step progress must be monotone");
  cur = m;
}

void CompletionLedger::mark_complete(int n) {
  {
    std::lock_guard<std::mutex> lock(mu_);
    complete_.at(static_cast<size_t>(n)) = 1;
  }
  cv_.notify_all();
}

bool CompletionLedger::completed(int n) const {
  std::lock_guard<std::mutex> lock(mu_);
  return n >= 0 && n < static_cast<int>(complete_.size()) &&
         complete_[static_cast<size_t>(n)] != 0;
}

int CompletionLedger::last_step(int n) const {
  std::lock_guard<std::mutex> lock(mu_);
  return last_step_.at(static_cast<size_t>(n));
}

void CompletionLedger::wait_complete(int n, std::chrono::milliseconds deadline) {
  std::unique_lock<std::mutex> lock(mu_);
  const bool ok = cv_.wait_for(lock, deadline, [&] {
    return poisoned_ || complete_.at(static_cast<size_t>(n)) != 0;
  });
  if (poisoned_) throw DecompFault("series aborted by an earlier fault");
  if (!ok) throw DecompFault("timed out waiting for a predecessor frame");
}

void CompletionLedger::poison() {
  {
    std::lock_guard<std::mutex> lock(mu_);
    poisoned_ = true;
  }
  cv_.notify_all();
}

bool CompletionLedger::poisoned() const {
  std::lock_guard<std::mutex> lock(mu_);
  return poisoned_;
}

int h_choose(int n, int m, int M, const TemporalSchedule& sched,
             CompletionLedger& ledger) {
  if (n < 1) throw UsageError("h_choose: defined for n >= 1 only");
  if (n <= sched.l || m == M - 1) {
    // the strict prefix and the closing step both pin to the predecessor,
    // whose estimate must exist before it can be read
    ledger.wait_complete(n - 1);
    return n - 1;
  }
  const int lo = std::max(n - sched.o, 0);
  for (int w = n - 1; w >= lo; --w) {
    if (ledger.completed(w)) return w;
  }
  // window empty: hold for its oldest member rather than reaching further back
  ledger.wait_complete(lo);
  return lo;
}

std::string format_audit(const FrameAudit& a) {
  std::ostringstream os;
  os << "frame " << a.frame << ": init<-" << a.init_src << ", reg_final<-"
     << a.reg_final_src << ", thread " << a.thread << ", workers " << a.workers;
  return os.str();
}

}  // namespace rtnlinv
