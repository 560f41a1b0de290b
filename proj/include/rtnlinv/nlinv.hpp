#pragma once

#include <chrono>
#include <complex>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <vector>

#include "rtnlinv/decomp.hpp"
#include "rtnlinv/planner.hpp"
#include "rtnlinv/preproc.hpp"
#include "rtnlinv/seqsim.hpp"
#include "rtnlinv/types.hpp"

namespace rtnlinv {

// Joint unknown: image component on the oversampled grid plus one weighted,
// cropped k-space component per coil (the hat variables).
struct Estimate {
  CImage rho;
  std::vector<CImage> chat;  // J entries, Gc x Gc each
};

// rho = 1 on the field-of-view window, coils = 0
Estimate initial_estimate(const ReconPlan& plan);

void est_fill(Estimate& e, cfloat v);
void est_axpy(Estimate& y, double a, const Estimate& x);  // y += a*x
void est_scale(Estimate& e, double a);
std::complex<double> est_dot(const Estimate& a, const Estimate& b);
double est_nrm2sq(const Estimate& e);

// 1 / w(k) with w(k) = (1 + 880 |k|^2)^16. k is the per-pixel frequency of
// the full G grid (|kx|,|ky| < 0.5 over G cells); only the central Gc x Gc
// patch of that band is stored, so the array covers |k| <= Gc/(2G). w can
// overflow single precision when Gc approaches G, so the reciprocal is
// computed in double and stored (subnormal floats are fine there). Real
// values in the real part.
CImage make_weights_inv(int Gc, int G);

// c_j = iFFT(pad(chat_j / w)): cropped weighted k-space coil to a G-grid
// image. One transform. The DC-spike response is the constant 1/G (unitary
// transform convention).
CImage apply_W_inv(const CImage& chat, const CImage& winv, int G);

// exact adjoint: crop(FFT(u)) / w (weights real, so no conjugation needed)
CImage apply_W_invH(const CImage& u, const CImage& winv, int Gc);

// Everything the linearized operator needs, frozen for one Newton step:
// the decoded coils, the masked image component, and the shared kernels.
struct StepCache {
  const ReconPlan* plan = nullptr;
  const PsfKernel* psf = nullptr;
  const CImage* winv = nullptr;
  CImage rho;                 // masked
  std::vector<CImage> coils;  // decoded c_j, G x G
  WorkerGroup* workers = nullptr;  // null = single worker
};

// Decodes the coils of x (J transforms, booked to the caller's context).
StepCache make_step_cache(const Estimate& x, const ReconPlan& plan,
                          const PsfKernel& psf, const CImage& winv,
                          WorkerGroup* workers = nullptr);

// Gauss-Newton normal operator DF^H DF (no regularization term): per channel
// t_j = T(c_j drho + rho W^-1 dchat_j), returning
// (sum_j conj(c_j) t_j, W^-H(conj(rho) t_j)). Exactly 4 transforms per
// channel per call. Channel work fans out across the worker group; the
// channel sum is reduced in global channel order, so results do not depend
// on the partition.
Estimate apply_normal(const Estimate& dx, const StepCache& sc);

struct CgResult {
  Estimate x;
  int iters = 0;
  std::vector<double> residuals;  // norm after each iteration
};

// Solves (DF^H DF + alpha I) x = rhs with a conjugate-residual recurrence:
// residual norms are non-increasing by construction and the operator is
// applied exactly `iters` times. tol is relative to |rhs| and 0 disables
// the residual stop. Non-finite residuals raise SolverError.
CgResult cg_solve(const Estimate& rhs, const StepCache& sc, float alpha, float tol,
                  int max_iter);

struct StepStats {
  int cg_iters = 0;
  double residual0 = 0;  // data-residual norm entering the step
};

// One IRGNM update in place: rhs = DF^H(z - T(C x)) - alpha (x - damping*reg),
// then x += cg_solve(rhs). Setup spends 4 transforms per channel.
StepStats newton_step(Estimate& x, const Estimate& reg, float alpha,
                      const GriddedData& z, const PsfKernel& psf,
                      const ReconPlan& plan, const CImage& winv,
                      WorkerGroup* workers, float cg_tol, int cg_max_iter);

// Supplies the regularization target for Newton step m (the scheduler hook;
// a plain chained solve returns the previous frame's estimate every time).
using RegProvider = std::function<const Estimate&(int m)>;

struct FrameResult {
  CImage image;  // N x N output: rho times root-sum-of-squares coil magnitude
  Estimate est;  // final estimate, for chaining
  int cg_iters = 0;
  std::vector<int> cg_per_step;
  double seconds = 0;  // wall time of the solve (the autotune record R)
};

FrameResult reconstruct_frame(const GriddedData& z, const PsfKernel& psf,
                              const ReconPlan& plan, const CImage& winv,
                              const Estimate& init, const RegProvider& reg,
                              WorkerGroup* workers = nullptr,
                              const std::function<void(int)>& on_step = {});

// Kernel provider for a frame stream. Zero-delay kernels come from the
// trajectory cache (a K-spoke, U-turn series revisits the same angle set
// every U frames); a gradient-delay correction shifts the sample positions,
// invalidating those, so shifted kernels are built once per angle set and
// memoized alongside. Thread-safe.
class FramePsfProvider {
 public:
  FramePsfProvider(const ReconPlan& plan, double delay_samples);
  std::shared_ptr<const PsfKernel> get(const KSpaceFrame& frame);

 private:
  ReconPlan plan_;
  double delay_;
  PsfCache cache_;
  std::mutex mu_;
  std::map<uint64_t, std::shared_ptr<const PsfKernel>> delayed_;
};

struct SeriesOptions {
  TemporalSchedule sched{1, 1};
  int T = 1;  // reconstruction threads
  int A = 1;  // workers per thread
  bool chain = true;       // false: every frame starts from scratch
  bool normalize = true;   // scale data so the first gridded frame has norm 100
  double delay_samples = 0.0;
  const CompressionMatrix* compression = nullptr;
  std::chrono::milliseconds worker_timeout{30000};
};

struct FrameStats {
  int cg_iters = 0;
  double seconds = 0;
};

struct SeriesResult {
  std::vector<CImage> images;     // frame order, N x N, normalization undone
  std::vector<FrameAudit> audit;  // frame order
  std::vector<FrameStats> stats;
  double data_scale = 1.0;
};

// Reference implementation: one thread, frames strictly in order, each frame
// initialized and regularized from its immediate predecessor.
SeriesResult reconstruct_series_plain(const std::vector<KSpaceFrame>& frames,
                                      const ReconPlan& plan, const SeriesOptions& opts);

// Scheduled implementation: T reconstruction threads take frames round-robin;
// frames 1..l run strictly in order, later frames initialize and regularize
// from the newest completed frame in the lookback window and always close
// against frame n-1. T=1 reproduces the plain solver bit for bit.
SeriesResult reconstruct_series(const std::vector<KSpaceFrame>& frames,
                                const ReconPlan& plan, const SeriesOptions& opts);

// Magnitude comparison up to a global scale (the estimation problem only
// determines the image-coil product, so a single fitted factor is allowed):
// fits s minimizing |s*|got| - |want||_2 over pixels within interior_frac*N
// of center, then returns that misfit relative to |want|'s norm there.
double nrmse_scaled(const CImage& got, const CImage& want, double interior_frac = 0.45);

}  // namespace rtnlinv
