#pragma once

#include <array>
#include <cstdint>
#include <vector>

#include "rtnlinv/types.hpp"

namespace rtnlinv {

// Radial interleaved-turn trajectory. Within a frame the K spokes step by
// sigma = 2*pi/K; consecutive frames rotate the whole set by tau = 2*pi/(K*U),
// so U consecutive frames jointly tile k-space uniformly and frames n and
// n + U reuse the same angle set.
struct TrajectorySpec {
  int K = 11;
  int U = 5;
  int samples_per_spoke = 0;  // 2N readout samples spanning [-kmax, +kmax]
  double base_angle = 0.0;
};

struct Ellipse {
  double cx = 0, cy = 0;   // center, field-of-view units (FOV = [-0.5, 0.5]^2)
  double ax = 0.1, ay = 0.1;  // semi-axes, FOV units
  double angle = 0;         // rotation, radians
  cfloat amplitude{1.0f, 0.0f};
};

// Sinusoidal translation of one ellipse: displacement
// amp * sin(2*pi * n / period) applied to its center at frame n.
struct MotionSpec {
  int ellipse_index = -1;  // -1 disables motion
  double amp_x = 0, amp_y = 0;
  double period = 16;
};

struct PhantomSpec {
  std::vector<Ellipse> ellipses;
  MotionSpec motion;
  int J = 1;
  // Per-axis raised-cosine coil envelope (A + B*cos), kept as a finite
  // plane-wave mixture so coil-weighted k-space stays closed-form.
  double coil_env_a = 1.0;
  double coil_env_b = 0.30;
  std::vector<std::array<double, 2>> coil_centers;  // size J (empty for J=1 uniform)
  double noise_sigma = 0.0;  // complex Gaussian std dev added per sample
  uint64_t seed = 0;
  // phase offset applied to the moving ellipse on odd frames (flow encoding)
  double flow_phase = 0.0;
};

struct KSpaceFrame {
  int frame_index = 0;
  int slice_id = 0;
  int J = 0, K = 0, S = 0;
  std::vector<cfloat> samples;       // [J][K][S]
  std::vector<double> spoke_angles;  // [K]

  cfloat& at(int j, int k, int s) {
    return samples[(static_cast<size_t>(j) * K + k) * S + s];
  }
  const cfloat& at(int j, int k, int s) const {
    return samples[(static_cast<size_t>(j) * K + k) * S + s];
  }
};

double spoke_angle(const TrajectorySpec& spec, int n, int k);

// Signed readout radius of sample i on a spoke with S samples, in cycles per
// pixel. Half-integer symmetric: every sample has an exact mirror at -k, which
// keeps point-spread functions exactly real. |k| < 0.5 always.
double readout_radius(int i, int S);

std::array<double, 2> sample_coord(double angle, int i, int S);

// Coil profile at position x (FOV units). J=1 is the uniform profile 1.
cfloat coil_sensitivity(const PhantomSpec& ph, int j, double x, double y);

// Analytic Fourier transform of the frame-n phantom at frequency
// (fx, fy) in cycles per FOV (no coil weighting).
cfloat phantom_ft(const PhantomSpec& ph, int n, double fx, double fy);

// Same, weighted by coil j (evaluated through the plane-wave expansion of the
// coil profile, so it stays exact).
cfloat coil_ft(const PhantomSpec& ph, int j, int n, double fx, double fy);

KSpaceFrame simulate_frame(const PhantomSpec& ph, const TrajectorySpec& spec, int n,
                           int slice_id = 0);

// Desk phantom: nested ellipses plus one moving disk.
PhantomSpec default_phantom(int J, uint64_t seed);

// Coil layout used by default_phantom; exposed for tests.
std::vector<std::array<double, 2>> default_coil_centers(int J);

// Band-limited reference: analytic coil-j k-space sampled on the Cartesian
// N-grid and inverse-transformed. The root-sum-of-squares combination of
// these is the ground truth the reconstructions are scored against.
CImage bandlimited_coil_truth(const PhantomSpec& ph, int j, int n, int N);
CImage bandlimited_truth_rss(const PhantomSpec& ph, int n, int N);

}  // namespace rtnlinv
