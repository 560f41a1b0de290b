#include "rtnlinv/seqsim.hpp"

#include <cmath>
#include <numbers>
#include <random>

#include "rtnlinv/fft.hpp"

namespace rtnlinv {

namespace {

constexpr double kPi = std::numbers::pi;
constexpr double kTwoPi = 2.0 * std::numbers::pi;

double wrap_2pi(double a) {
  a = std::fmod(a, kTwoPi);
  if (a < 0) a += kTwoPi;
  return a;
}

// FT of the unit disk at radius rho (cycles): J1(2*pi*rho)/rho, area pi at DC.
double disc_ft(double rho) {
  if (rho < 1e-9) {
    const double z = kPi * rho;
    return kPi * (1.0 - 0.5 * z * z);
  }
  return std::cyl_bessel_j(1, kTwoPi * rho) / rho;
}

std::array<double, 2> ellipse_center(const PhantomSpec& ph, int idx, int n) {
  const Ellipse& e = ph.ellipses[idx];
  double cx = e.cx, cy = e.cy;
  if (ph.motion.ellipse_index == idx) {
    const double s = std::sin(kTwoPi * n / ph.motion.period);
    cx += ph.motion.amp_x * s;
    cy += ph.motion.amp_y * s;
  }
  return {cx, cy};
}

cfloat ellipse_amplitude(const PhantomSpec& ph, int idx, int n) {
  cfloat amp = ph.ellipses[idx].amplitude;
  // flow encoding: odd frames carry a velocity phase on the moving structure
  if (ph.flow_phase != 0.0 && ph.motion.ellipse_index == idx && (n % 2) == 1) {
    const cfloat rot(static_cast<float>(std::cos(ph.flow_phase)),
                     static_cast<float>(std::sin(ph.flow_phase)));
    amp *= rot;
  }
  return amp;
}

struct CoilTerm {
  double fx, fy;               // cycles per FOV
  std::complex<double> coef;
};

// The raised-cosine envelope (A + B cos(pi(t - mu))) per axis expands into
// three plane waves per axis; the product gives nine terms, all shifted by
// the coil's linear phase. Positive A, B put the magnitude maximum exactly
// at the coil center.
std::array<double, 2> coil_linear_phase(int j, int J) {
  const double a = kTwoPi * j / J + 0.7;
  return {0.35 * std::cos(a), 0.35 * std::sin(a)};
}

double coil_global_phase(int j, int J) { return kTwoPi * j / J + 0.3; }

std::vector<CoilTerm> coil_terms(const PhantomSpec& ph, int j) {
  if (ph.J == 1) return {{0.0, 0.0, {1.0, 0.0}}};
  const auto& mu = ph.coil_centers.at(j);
  const double A = ph.coil_env_a, B = ph.coil_env_b;
  struct Axis {
    double f;
    std::complex<double> c;
  };
  auto axis_terms = [&](double m) {
    return std::array<Axis, 3>{{{0.0, {A, 0.0}},
                                {0.5, 0.5 * B * std::polar(1.0, -kPi * m)},
                                {-0.5, 0.5 * B * std::polar(1.0, kPi * m)}}};
  };
  const auto tx = axis_terms(mu[0]);
  const auto ty = axis_terms(mu[1]);
  const auto g = coil_linear_phase(j, ph.J);
  const std::complex<double> phase = std::polar(1.0, coil_global_phase(j, ph.J));
  std::vector<CoilTerm> terms;
  terms.reserve(9);
  for (const Axis& ax : tx) {
    for (const Axis& ay : ty) {
      terms.push_back({ax.f + g[0], ay.f + g[1], ax.c * ay.c * phase});
    }
  }
  return terms;
}

std::complex<double> phantom_ft_d(const PhantomSpec& ph, int n, double fx, double fy) {
  std::complex<double> acc{0, 0};
  for (size_t i = 0; i < ph.ellipses.size(); ++i) {
    const Ellipse& e = ph.ellipses[i];
    const auto [cx, cy] = ellipse_center(ph, static_cast<int>(i), n);
    const double cosr = std::cos(e.angle), sinr = std::sin(e.angle);
    // project the frequency onto the ellipse axes
    const double v1 = e.ax * (fx * cosr + fy * sinr);
    const double v2 = e.ay * (-fx * sinr + fy * cosr);
    const double rho = std::hypot(v1, v2);
    const std::complex<double> shift = std::polar(1.0, -kTwoPi * (fx * cx + fy * cy));
    const cfloat ampf = ellipse_amplitude(ph, static_cast<int>(i), n);
    acc += std::complex<double>(ampf) * (e.ax * e.ay * disc_ft(rho)) * shift;
  }
  return acc;
}

// splitmix64 over the identifying tuple gives a portable per-(frame, coil) seed
uint64_t mix_seed(uint64_t a, uint64_t b, uint64_t c, uint64_t d) {
  uint64_t x = a * 0x9E3779B97F4A7C15ull + b;
  auto step = [&x]() {
    x += 0x9E3779B97F4A7C15ull;
    uint64_t z = x;
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
    return z ^ (z >> 31);
  };
  step();
  x ^= c * 0xD1B54A32D192ED03ull;
  step();
  x ^= d * 0x8CB92BA72F3D8DD7ull;
  return step();
}

// Hand-rolled Box-Muller so the noise stream is identical on every platform.
class GaussStream {
 public:
  explicit GaussStream(uint64_t seed) : rng_(seed) {}
  double next() {
    if (have_) {
      have_ = false;
      return spare_;
    }
    const double u1 = ((rng_() >> 11) + 1) * 0x1.0p-53;  // (0, 1]
    const double u2 = (rng_() >> 11) * 0x1.0p-53;        // [0, 1)
    const double r = std::sqrt(-2.0 * std::log(u1));
    spare_ = r * std::sin(kTwoPi * u2);
    have_ = true;
    return r * std::cos(kTwoPi * u2);
  }

 private:
  std::mt19937_64 rng_;
  bool have_ = false;
  double spare_ = 0;
};

}  // namespace

double spoke_angle(const TrajectorySpec& spec, int n, int k) {
  const double sigma = kTwoPi / spec.K;
  const double tau = kTwoPi / (static_cast<double>(spec.K) * spec.U);
  return wrap_2pi(k * sigma + (n % spec.U) * tau + spec.base_angle);
}

double readout_radius(int i, int S) { return (2.0 * i + 1.0 - S) / (2.0 * S); }

std::array<double, 2> sample_coord(double angle, int i, int S) {
  const double r = readout_radius(i, S);
  return {r * std::cos(angle), r * std::sin(angle)};
}

cfloat coil_sensitivity(const PhantomSpec& ph, int j, double x, double y) {
  if (ph.J == 1) return cfloat(1.0f, 0.0f);
  const auto& mu = ph.coil_centers.at(j);
  const double ex = ph.coil_env_a + ph.coil_env_b * std::cos(kPi * (x - mu[0]));
  const double ey = ph.coil_env_a + ph.coil_env_b * std::cos(kPi * (y - mu[1]));
  const auto g = coil_linear_phase(j, ph.J);
  const double phase = kTwoPi * (g[0] * x + g[1] * y) + coil_global_phase(j, ph.J);
  const std::complex<double> v = ex * ey * std::polar(1.0, phase);
  return cfloat(static_cast<float>(v.real()), static_cast<float>(v.imag()));
}

cfloat phantom_ft(const PhantomSpec& ph, int n, double fx, double fy) {
  const auto v = phantom_ft_d(ph, n, fx, fy);
  return cfloat(static_cast<float>(v.real()), static_cast<float>(v.imag()));
}

cfloat coil_ft(const PhantomSpec& ph, int j, int n, double fx, double fy) {
  std::complex<double> acc{0, 0};
  for (const CoilTerm& t : coil_terms(ph, j)) {
    acc += t.coef * phantom_ft_d(ph, n, fx - t.fx, fy - t.fy);
  }
  return cfloat(static_cast<float>(acc.real()), static_cast<float>(acc.imag()));
}

KSpaceFrame simulate_frame(const PhantomSpec& ph, const TrajectorySpec& spec, int n,
                           int slice_id) {
  if (n < 0) throw UsageError("simulate_frame: negative frame index");
  if (!std::isfinite(ph.motion.amp_x) || !std::isfinite(ph.motion.amp_y) ||
      !std::isfinite(ph.motion.period) || ph.motion.period == 0) {
    throw DataError("simulate_frame: non-finite motion parameters");
  }
  if (ph.J >= 2 && static_cast<int>(ph.coil_centers.size()) != ph.J) {
    throw UsageError("simulate_frame: coil layout size mismatch");
  }

  KSpaceFrame frame;
  frame.frame_index = n;
  frame.slice_id = slice_id;
  frame.J = ph.J;
  frame.K = spec.K;
  frame.S = spec.samples_per_spoke;
  frame.samples.resize(static_cast<size_t>(ph.J) * spec.K * spec.samples_per_spoke);
  frame.spoke_angles.resize(spec.K);

  const int N = spec.samples_per_spoke / 2;  // image side implied by the readout
  for (int k = 0; k < spec.K; ++k) frame.spoke_angles[k] = spoke_angle(spec, n, k);

  for (int j = 0; j < ph.J; ++j) {
    const auto terms = coil_terms(ph, j);
    for (int k = 0; k < spec.K; ++k) {
      const double ca = std::cos(frame.spoke_angles[k]);
      const double sa = std::sin(frame.spoke_angles[k]);
      for (int i = 0; i < spec.samples_per_spoke; ++i) {
        const double r = readout_radius(i, spec.samples_per_spoke);
        const double fx = r * ca * N;  // cycles per FOV
        const double fy = r * sa * N;
        std::complex<double> acc{0, 0};
        for (const CoilTerm& t : terms) {
          acc += t.coef * phantom_ft_d(ph, n, fx - t.fx, fy - t.fy);
        }
        frame.at(j, k, i) =
            cfloat(static_cast<float>(acc.real()), static_cast<float>(acc.imag()));
      }
    }
    if (ph.noise_sigma > 0) {
      GaussStream g(mix_seed(ph.seed, static_cast<uint64_t>(n),
                             static_cast<uint64_t>(slice_id), static_cast<uint64_t>(j)));
      for (int k = 0; k < spec.K; ++k) {
        for (int i = 0; i < spec.samples_per_spoke; ++i) {
          frame.at(j, k, i) += cfloat(static_cast<float>(ph.noise_sigma * g.next()),
                                      static_cast<float>(ph.noise_sigma * g.next()));
        }
      }
    }
  }
  return frame;
}

std::vector<std::array<double, 2>> default_coil_centers(int J) {
  std::vector<std::array<double, 2>> centers;
  if (J == 1) return centers;
  if (J == 4) {
    // quadrature layout: all sign combinations of (0.25, 0.25)
    centers = {{0.25, 0.25}, {-0.25, 0.25}, {-0.25, -0.25}, {0.25, -0.25}};
    return centers;
  }
  for (int j = 0; j < J; ++j) {
    const double a = kTwoPi * j / J + kPi / 4.0;
    centers.push_back({0.3 * std::cos(a), 0.3 * std::sin(a)});
  }
  return centers;
}

PhantomSpec default_phantom(int J, uint64_t seed) {
  PhantomSpec ph;
  ph.J = J;
  ph.seed = seed;
  ph.coil_centers = default_coil_centers(J);
  ph.ellipses = {
      {0.0, 0.0, 0.46, 0.42, 0.0, cfloat(1.0f, 0.0f)},
      {0.0, 0.0, 0.40, 0.36, 0.1, cfloat(-0.45f, 0.0f)},
      {-0.14, 0.10, 0.14, 0.10, 0.5, cfloat(0.35f, 0.10f)},
      {0.12, -0.14, 0.10, 0.07, -0.3, cfloat(0.30f, 0.0f)},
      {0.05, 0.18, 0.06, 0.06, 0.0, cfloat(0.55f, 0.0f)},
  };
  ph.motion.ellipse_index = 4;
  ph.motion.amp_x = 0.05;
  ph.motion.amp_y = 0.03;
  ph.motion.period = 16;
  return ph;
}

CImage bandlimited_coil_truth(const PhantomSpec& ph, int j, int n, int N) {
  CImage ks(N);
  const int c = dc_index(N);
  for (int p = 0; p < N; ++p) {
    for (int q = 0; q < N; ++q) {
      ks.at(p, q) = coil_ft(ph, j, n, p - c, q - c);
    }
  }
  fft::CtxScope scope(fft::Ctx::other);
  fft::inverse(ks);
  return ks;
}

CImage bandlimited_truth_rss(const PhantomSpec& ph, int n, int N) {
  CImage acc(N);
  for (int j = 0; j < ph.J; ++j) {
    CImage cj = bandlimited_coil_truth(ph, j, n, N);
    for (size_t i = 0; i < acc.v.size(); ++i) {
      acc.v[i] += cfloat(std::norm(cj.v[i]), 0.0f);
    }
  }
  for (cfloat& z : acc.v) z = cfloat(std::sqrt(z.real()), 0.0f);
  return acc;
}

}  // namespace rtnlinv
