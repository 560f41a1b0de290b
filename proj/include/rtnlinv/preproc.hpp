#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <memory>
#include <mutex>
#include <string>
#include <vector>

#include "rtnlinv/planner.hpp"
#include "rtnlinv/seqsim.hpp"
#include "rtnlinv/types.hpp"

namespace rtnlinv {

// Kaiser-Bessel interpolation kernel, width 4 grid cells, shape parameter
// chosen for twofold oversampling. Exposed so tests can probe the kernel and
// its continuous Fourier transform directly.
namespace kb {

constexpr int kWidth = 4;

double beta();

// kernel(0) = 1, zero outside |u| <= kWidth/2
double kernel(double u);

// continuous Fourier transform of kernel(), normalized so kernel_ft(0) = 1;
// f is in cycles per grid cell
double kernel_ft(double f);

// integral of kernel() over its support (the unnormalized transform at f = 0)
double kernel_mass();

}  // namespace kb

struct CompressionMatrix {
  int J_virtual = 0;
  int J_physical = 0;
  std::vector<cfloat> m;  // row-major [J_virtual][J_physical]
  double energy_fraction = 1.0;
  bool rank_deficient = false;

  cfloat at(int jv, int jp) const { return m[static_cast<size_t>(jv) * J_physical + jp]; }
};

// Fourier-domain kernel of the trajectory's normal operator on the G grid
struct PsfKernel {
  int G = 0;
  CImage P;
};

// per-channel gridded data (the image-domain adjoint of the measured samples)
struct GriddedData {
  int J = 0;
  int G = 0;
  std::vector<CImage> z;
};

// Sample coordinates of a frame in cycles per pixel, flattened spoke-major.
// delay_samples shifts every readout along its spoke direction (constant
// gradient-delay correction; estimating the delay is out of scope).
std::vector<std::array<double, 2>> frame_coords(const KSpaceFrame& frame,
                                                double delay_samples = 0.0);

// Radial density compensation: ramp |k| with a flat plateau over the central
// grid cell, scaled by the per-sample angular and radial cell sizes.
double dcf_ramp(double kx, double ky, int K, int S, int G);

// Separable roll-off correction for the gridding kernel on the G grid;
// values are real and stored in the real part.
CImage deapodization(int G);

// One-sample kernel operations on a wrapped G-periodic grid. spread_sample
// and interp_sample use identical taps, so they are exact transposes.
void spread_sample(CImage& grid, double kx, double ky, cfloat val);
cfloat interp_sample(const CImage& grid, double kx, double ky);

// true when (r, c) lies in the centered G/2 field-of-view window
bool in_window(int G, int r, int c);
void mask_window(CImage& x);

// Adjoint gridding: per channel, density-compensate, spread with the KB
// kernel, inverse FFT (scaled by G) and divide out the kernel roll-off,
// masked to the field-of-view window.
GriddedData grid_adjoint(const KSpaceFrame& frame, const ReconPlan& plan,
                         double delay_samples = 0.0);

// Exact transpose of grid_adjoint for one channel: mask, divide roll-off,
// forward FFT (scaled by G), interpolate at the sample coordinates, then
// apply the density weights.
std::vector<cfloat> sample_forward(const CImage& x,
                                   const std::vector<std::array<double, 2>>& coords,
                                   int K, int S, const ReconPlan& plan);

// Fourier-domain kernel P such that mask -> FFT -> (.P) -> iFFT -> mask equals
// the density-weighted normal operator of the frame's trajectory on the
// field-of-view window. Built from the exact trajectory response, not by
// gridding, so the equivalence holds to rounding error.
PsfKernel build_psf(const std::vector<double>& angles, int S, const ReconPlan& plan);
PsfKernel build_psf(const KSpaceFrame& frame, const ReconPlan& plan);

// Same construction from explicit sample positions and weights (any
// trajectory, not just radial).
PsfKernel build_psf_coords(const std::vector<std::array<double, 2>>& coords,
                           const std::vector<double>& weights, const ReconPlan& plan);

// in place: x <- mask(iFFT(P . FFT(mask(x)))); two FFTs per call
void toeplitz_apply(CImage& x, const PsfKernel& psf);

// Cache of PSF kernels keyed by the (angle set, S, G) hash. A K-spoke,
// U-turn trajectory revisits the same angle set every U frames, so at most
// U kernels are ever built per plan.
class PsfCache {
 public:
  explicit PsfCache(ReconPlan plan) : plan_(std::move(plan)) {}

  std::shared_ptr<const PsfKernel> get(const std::vector<double>& angles, int S);
  std::shared_ptr<const PsfKernel> get(const KSpaceFrame& frame);
  size_t size() const;
  size_t hits() const;

  bool save(const std::string& path) const;
  bool load(const std::string& path);

  static uint64_t angle_key(const std::vector<double>& angles, int S, int G);

 private:
  ReconPlan plan_;
  mutable std::mutex mu_;
  std::map<uint64_t, std::shared_ptr<const PsfKernel>> entries_;
  size_t hits_ = 0;
};

// Principal-component channel compression calibrated on the first frames.
// Rows of the result are orthonormal; if the data rank falls below
// J_virtual the missing rows are left zero and the matrix is flagged.
CompressionMatrix calibrate_compression(const std::vector<KSpaceFrame>& frames,
                                        int J_virtual);

KSpaceFrame apply_compression(const KSpaceFrame& frame, const CompressionMatrix& cm);

}  // namespace rtnlinv
