#include "rtnlinv/preproc.hpp"

#include <algorithm>
#include <cmath>
#include <complex>
#include <cstdio>
#include <cstring>
#include <numbers>

#include <Eigen/Dense>

#include "rtnlinv/fft.hpp"

namespace rtnlinv {

namespace kb {

namespace {
constexpr double kSigma = 2.0;  // grid oversampling the kernel is tuned for
}

double beta() {
  const double w = kWidth;
  const double t = (w / kSigma) * (kSigma - 0.5);
  return std::numbers::pi * std::sqrt(t * t - 0.8);
}

double kernel(double u) {
  const double half = kWidth / 2.0;
  if (std::abs(u) > half) return 0.0;
  const double t = 1.0 - (u / half) * (u / half);
  const double b = beta();
  return std::cyl_bessel_i(0.0, b * std::sqrt(std::max(t, 0.0))) /
         std::cyl_bessel_i(0.0, b);
}

double kernel_ft(double f) {
  const double b = beta();
  const double z = std::numbers::pi * kWidth * f;
  const double s2 = b * b - z * z;
  double v;
  if (s2 > 1e-12) {
    const double s = std::sqrt(s2);
    v = std::sinh(s) / s;
  } else if (s2 < -1e-12) {
    const double s = std::sqrt(-s2);
    v = std::sin(s) / s;
  } else {
    v = 1.0;
  }
  return v / (std::sinh(b) / b);
}

double kernel_mass() {
  const double b = beta();
  return kWidth / std::cyl_bessel_i(0.0, b) * (std::sinh(b) / b);
}

}  // namespace kb

namespace {

// taps covering the kernel support around a continuous grid coordinate
struct Taps {
  int idx[kb::kWidth];      // wrapped grid indices
  double wgt[kb::kWidth];
};

Taps make_taps(double kg, int G) {
  Taps t;
  const int base = static_cast<int>(std::floor(kg)) - kb::kWidth / 2 + 1;
  for (int i = 0; i < kb::kWidth; ++i) {
    const int cell = base + i;
    t.idx[i] = ((cell % G) + G) % G;
    t.wgt[i] = kb::kernel(cell - kg);
  }
  return t;
}

void check_coord(double kx, double ky) {
  if (!(kx >= -0.5 && kx < 0.5 && ky >= -0.5 && ky < 0.5)) {
    throw DataError("gridding: sample coordinate outside [-0.5, 0.5)");
  }
}

}  // namespace

std::vector<std::array<double, 2>> frame_coords(const KSpaceFrame& frame,
                                                double delay_samples) {
  std::vector<std::array<double, 2>> coords;
  coords.reserve(static_cast<size_t>(frame.K) * frame.S);
  for (int k = 0; k < frame.K; ++k) {
    const double ca = std::cos(frame.spoke_angles[k]);
    const double sa = std::sin(frame.spoke_angles[k]);
    for (int i = 0; i < frame.S; ++i) {
      const double r = readout_radius(i, frame.S) + delay_samples / frame.S;
      coords.push_back({r * ca, r * sa});
    }
  }
  return coords;
}

double dcf_ramp(double kx, double ky, int K, int S, int G) {
  const double plateau = 0.5 / G;
  return std::max(std::hypot(kx, ky), plateau) * (std::numbers::pi / K) * (1.0 / S);
}

CImage deapodization(int G) {
  const int c = dc_index(G);
  // unnormalized kernel transform: dividing by it undoes the full
  // interpolation attenuation, mass factor included
  const double mass = kb::kernel_mass();
  std::vector<double> axis(G);
  for (int r = 0; r < G; ++r) {
    axis[r] = mass * kb::kernel_ft((r - c) / static_cast<double>(G));
  }
  CImage d(G);
  for (int r = 0; r < G; ++r) {
    for (int q = 0; q < G; ++q) {
      d.at(r, q) = cfloat(static_cast<float>(axis[r] * axis[q]), 0.0f);
    }
  }
  return d;
}

void spread_sample(CImage& grid, double kx, double ky, cfloat val) {
  const int G = grid.n;
  const int c = dc_index(G);
  const Taps tx = make_taps(kx * G + c, G);
  const Taps ty = make_taps(ky * G + c, G);
  for (int a = 0; a < kb::kWidth; ++a) {
    for (int b = 0; b < kb::kWidth; ++b) {
      grid.at(tx.idx[a], ty.idx[b]) += val * static_cast<float>(tx.wgt[a] * ty.wgt[b]);
    }
  }
}

cfloat interp_sample(const CImage& grid, double kx, double ky) {
  const int G = grid.n;
  const int c = dc_index(G);
  const Taps tx = make_taps(kx * G + c, G);
  const Taps ty = make_taps(ky * G + c, G);
  std::complex<double> acc{0, 0};
  for (int a = 0; a < kb::kWidth; ++a) {
    for (int b = 0; b < kb::kWidth; ++b) {
      acc += std::complex<double>(grid.at(tx.idx[a], ty.idx[b])) * (tx.wgt[a] * ty.wgt[b]);
    }
  }
  return cfloat(static_cast<float>(acc.real()), static_cast<float>(acc.imag()));
}

bool in_window(int G, int r, int c) {
  const int L = G / 2;
  const int lo = (G - L) / 2;
  return r >= lo && r < lo + L && c >= lo && c < lo + L;
}

void mask_window(CImage& x) {
  const int G = x.n;
  for (int r = 0; r < G; ++r) {
    for (int c = 0; c < G; ++c) {
      if (!in_window(G, r, c)) x.at(r, c) = cfloat(0, 0);
    }
  }
}

GriddedData grid_adjoint(const KSpaceFrame& frame, const ReconPlan& plan,
                         double delay_samples) {
  const int G = plan.G;
  const auto coords = frame_coords(frame, delay_samples);
  for (const auto& kc : coords) check_coord(kc[0], kc[1]);

  std::vector<double> v(coords.size());
  for (size_t s = 0; s < coords.size(); ++s) {
    v[s] = dcf_ramp(coords[s][0], coords[s][1], frame.K, frame.S, G);
  }
  const CImage d = deapodization(G);

  GriddedData out;
  out.J = frame.J;
  out.G = G;
  out.z.reserve(frame.J);
  for (int j = 0; j < frame.J; ++j) {
    CImage g(G);
    size_t s = 0;
    for (int k = 0; k < frame.K; ++k) {
      for (int i = 0; i < frame.S; ++i, ++s) {
        spread_sample(g, coords[s][0], coords[s][1],
                      frame.at(j, k, i) * static_cast<float>(v[s]));
      }
    }
    fft::inverse(g);
    const float scale = static_cast<float>(G);
    for (size_t p = 0; p < g.v.size(); ++p) g.v[p] *= scale / d.v[p].real();
    mask_window(g);
    out.z.push_back(std::move(g));
  }
  return out;
}

std::vector<cfloat> sample_forward(const CImage& x,
                                   const std::vector<std::array<double, 2>>& coords,
                                   int K, int S, const ReconPlan& plan) {
  const int G = plan.G;
  if (x.n != G) throw UsageError("sample_forward: image side does not match plan");
  for (const auto& kc : coords) check_coord(kc[0], kc[1]);

  const CImage d = deapodization(G);
  CImage tmp = x;
  mask_window(tmp);
  const float scale = static_cast<float>(G);
  for (size_t p = 0; p < tmp.v.size(); ++p) tmp.v[p] *= scale / d.v[p].real();
  fft::forward(tmp);

  std::vector<cfloat> out(coords.size());
  for (size_t s = 0; s < coords.size(); ++s) {
    const double v = dcf_ramp(coords[s][0], coords[s][1], K, S, G);
    out[s] = interp_sample(tmp, coords[s][0], coords[s][1]) * static_cast<float>(v);
  }
  return out;
}

PsfKernel build_psf_coords(const std::vector<std::array<double, 2>>& coords,
                           const std::vector<double>& weights, const ReconPlan& plan) {
  const int G = plan.G;
  const int c = dc_index(G);
  if (coords.size() != weights.size()) {
    throw UsageError("build_psf_coords: coordinate/weight count mismatch");
  }

  // accumulate the trajectory response q(d) = sum_s v_s exp(2 pi i k_s . d)
  // exactly, one rank-1 outer product per sample
  std::vector<std::complex<double>> q(static_cast<size_t>(G) * G, {0, 0});
  std::vector<std::complex<double>> ax(G), ay(G);
  for (size_t s = 0; s < coords.size(); ++s) {
    const double kx = coords[s][0], ky = coords[s][1];
    check_coord(kx, ky);
    for (int u = 0; u < G; ++u) {
      ax[u] = std::polar(1.0, 2.0 * std::numbers::pi * kx * (u - c));
      ay[u] = std::polar(weights[s], 2.0 * std::numbers::pi * ky * (u - c));
    }
    for (int u = 0; u < G; ++u) {
      std::complex<double>* row = q.data() + static_cast<size_t>(u) * G;
      const std::complex<double> f = ax[u];
      for (int w = 0; w < G; ++w) row[w] += f * ay[w];
    }
  }

  // The masked operator only ever uses displacements of magnitude below G/2,
  // so the unpaired Nyquist edge (d = -G/2, which has no +G/2 mirror in the
  // array) can be zeroed. That restores exact central symmetry and keeps P
  // real for symmetric sample sets.
  for (int u = 0; u < G; ++u) {
    q[static_cast<size_t>(0) * G + u] = 0;
    q[static_cast<size_t>(u) * G + 0] = 0;
  }

  PsfKernel psf;
  psf.G = G;
  psf.P = CImage(G);
  for (size_t p = 0; p < psf.P.v.size(); ++p) {
    psf.P.v[p] = cfloat(static_cast<float>(q[p].real()), static_cast<float>(q[p].imag()));
  }
  fft::forward(psf.P);
  const float scale = static_cast<float>(G);
  for (cfloat& z : psf.P.v) z *= scale;
  return psf;
}

PsfKernel build_psf(const std::vector<double>& angles, int S, const ReconPlan& plan) {
  const int K = static_cast<int>(angles.size());
  std::vector<std::array<double, 2>> coords;
  std::vector<double> weights;
  coords.reserve(static_cast<size_t>(K) * S);
  weights.reserve(coords.capacity());
  for (int k = 0; k < K; ++k) {
    const double ca = std::cos(angles[k]);
    const double sa = std::sin(angles[k]);
    for (int i = 0; i < S; ++i) {
      const double r = readout_radius(i, S);
      coords.push_back({r * ca, r * sa});
      weights.push_back(dcf_ramp(r * ca, r * sa, K, S, plan.G));
    }
  }
  return build_psf_coords(coords, weights, plan);
}

PsfKernel build_psf(const KSpaceFrame& frame, const ReconPlan& plan) {
  return build_psf(frame.spoke_angles, frame.S, plan);
}

void toeplitz_apply(CImage& x, const PsfKernel& psf) {
  if (x.n != psf.G) throw UsageError("toeplitz_apply: grid mismatch");
  mask_window(x);
  fft::forward(x);
  for (size_t p = 0; p < x.v.size(); ++p) x.v[p] *= psf.P.v[p];
  fft::inverse(x);
  mask_window(x);
}

uint64_t PsfCache::angle_key(const std::vector<double>& angles, int S, int G) {
  uint64_t h = 1469598103934665603ull;
  auto mix = [&h](uint64_t v) {
    for (int b = 0; b < 8; ++b) {
      h ^= (v >> (8 * b)) & 0xFF;
      h *= 1099511628211ull;
    }
  };
  mix(static_cast<uint64_t>(S));
  mix(static_cast<uint64_t>(G));
  for (double a : angles) mix(static_cast<uint64_t>(std::llround(a * 1e9)));
  return h;
}

std::shared_ptr<const PsfKernel> PsfCache::get(const std::vector<double>& angles, int S) {
  const uint64_t key = angle_key(angles, S, plan_.G);
  {
    std::lock_guard<std::mutex> lock(mu_);
    auto it = entries_.find(key);
    if (it != entries_.end()) {
      ++hits_;
      return it->second;
    }
  }
  auto psf = std::make_shared<PsfKernel>(build_psf(angles, S, plan_));
  std::lock_guard<std::mutex> lock(mu_);
  auto [it, inserted] = entries_.emplace(key, std::move(psf));
  if (!inserted) ++hits_;
  return it->second;
}

std::shared_ptr<const PsfKernel> PsfCache::get(const KSpaceFrame& frame) {
  return get(frame.spoke_angles, frame.S);
}

size_t PsfCache::size() const {
  std::lock_guard<std::mutex> lock(mu_);
  return entries_.size();
}

size_t PsfCache::hits() const {
  std::lock_guard<std::mutex> lock(mu_);
  return hits_;
}

bool PsfCache::save(const std::string& path) const {
  std::lock_guard<std::mutex> lock(mu_);
  std::FILE* f = std::fopen(path.c_str(), "wb");
  if (!f) return false;
  const uint32_t magic = 0x43465350u;  // "PSFC"
  const uint32_t version = 1;
  const uint32_t G = static_cast<uint32_t>(plan_.G);
  const uint32_t count = static_cast<uint32_t>(entries_.size());
  bool ok = std::fwrite(&magic, 4, 1, f) == 1 && std::fwrite(&version, 4, 1, f) == 1 &&
            std::fwrite(&G, 4, 1, f) == 1 && std::fwrite(&count, 4, 1, f) == 1;
  for (const auto& [key, psf] : entries_) {
    if (!ok) break;
    ok = std::fwrite(&key, 8, 1, f) == 1 &&
         std::fwrite(psf->P.v.data(), sizeof(cfloat), psf->P.v.size(), f) ==
             psf->P.v.size();
  }
  return std::fclose(f) == 0 && ok;
}

bool PsfCache::load(const std::string& path) {
  std::FILE* f = std::fopen(path.c_str(), "rb");
  if (!f) return false;
  uint32_t magic = 0, version = 0, G = 0, count = 0;
  bool ok = std::fread(&magic, 4, 1, f) == 1 && std::fread(&version, 4, 1, f) == 1 &&
            std::fread(&G, 4, 1, f) == 1 && std::fread(&count, 4, 1, f) == 1 &&
            magic == 0x43465350u && version == 1 && G == static_cast<uint32_t>(plan_.G);
  std::map<uint64_t, std::shared_ptr<const PsfKernel>> loaded;
  for (uint32_t e = 0; ok && e < count; ++e) {
    uint64_t key = 0;
    auto psf = std::make_shared<PsfKernel>();
    psf->G = plan_.G;
    psf->P = CImage(plan_.G);
    ok = std::fread(&key, 8, 1, f) == 1 &&
         std::fread(psf->P.v.data(), sizeof(cfloat), psf->P.v.size(), f) ==
             psf->P.v.size();
    if (ok) loaded.emplace(key, std::move(psf));
  }
  std::fclose(f);
  if (!ok) return false;
  std::lock_guard<std::mutex> lock(mu_);
  for (auto& [key, psf] : loaded) entries_.insert_or_assign(key, std::move(psf));
  return true;
}

CompressionMatrix calibrate_compression(const std::vector<KSpaceFrame>& frames,
                                        int J_virtual) {
  if (frames.empty()) throw UsageError("calibrate_compression: no calibration frames");
  const int J = frames[0].J;
  if (J_virtual < 1 || J_virtual > J) {
    throw UsageError("calibrate_compression: virtual channel count out of range");
  }

  // channel covariance accumulated across every calibration sample
  Eigen::MatrixXcd gram = Eigen::MatrixXcd::Zero(J, J);
  for (const KSpaceFrame& fr : frames) {
    if (fr.J != J) throw DataError("calibrate_compression: channel count varies");
    const size_t per = static_cast<size_t>(fr.K) * fr.S;
    for (size_t s = 0; s < per; ++s) {
      for (int a = 0; a < J; ++a) {
        const std::complex<double> ya(fr.samples[static_cast<size_t>(a) * per + s]);
        for (int b = 0; b <= a; ++b) {
          const std::complex<double> yb(fr.samples[static_cast<size_t>(b) * per + s]);
          gram(a, b) += ya * std::conj(yb);
        }
      }
    }
  }
  for (int a = 0; a < J; ++a) {
    for (int b = a + 1; b < J; ++b) gram(a, b) = std::conj(gram(b, a));
  }

  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXcd> eig(gram);
  const Eigen::VectorXd vals = eig.eigenvalues();  // ascending
  const Eigen::MatrixXcd vecs = eig.eigenvectors();

  double total = 0, kept = 0;
  for (int i = 0; i < J; ++i) total += std::max(vals(i), 0.0);
  const double tol = 1e-10 * std::max(vals(J - 1), 0.0);

  CompressionMatrix cm;
  cm.J_virtual = J_virtual;
  cm.J_physical = J;
  cm.m.assign(static_cast<size_t>(J_virtual) * J, cfloat(0, 0));
  for (int row = 0; row < J_virtual; ++row) {
    const int col = J - 1 - row;  // descending eigenvalue order
    if (vals(col) <= tol) {
      cm.rank_deficient = true;  // leave the row zero
      continue;
    }
    kept += vals(col);
    for (int p = 0; p < J; ++p) {
      const std::complex<double> b = std::conj(vecs(p, col));
      cm.m[static_cast<size_t>(row) * J + p] =
          cfloat(static_cast<float>(b.real()), static_cast<float>(b.imag()));
    }
  }
  cm.energy_fraction = total > 0 ? kept / total : 1.0;
  return cm;
}

KSpaceFrame apply_compression(const KSpaceFrame& frame, const CompressionMatrix& cm) {
  if (frame.J != cm.J_physical) {
    throw DataError("apply_compression: channel count does not match matrix");
  }
  KSpaceFrame out;
  out.frame_index = frame.frame_index;
  out.slice_id = frame.slice_id;
  out.J = cm.J_virtual;
  out.K = frame.K;
  out.S = frame.S;
  out.spoke_angles = frame.spoke_angles;
  const size_t per = static_cast<size_t>(frame.K) * frame.S;
  out.samples.assign(static_cast<size_t>(cm.J_virtual) * per, cfloat(0, 0));
  for (int jv = 0; jv < cm.J_virtual; ++jv) {
    for (size_t s = 0; s < per; ++s) {
      std::complex<double> acc{0, 0};
      for (int jp = 0; jp < cm.J_physical; ++jp) {
        acc += std::complex<double>(cm.at(jv, jp)) *
               std::complex<double>(frame.samples[static_cast<size_t>(jp) * per + s]);
      }
      out.samples[static_cast<size_t>(jv) * per + s] =
          cfloat(static_cast<float>(acc.real()), static_cast<float>(acc.imag()));
    }
  }
  return out;
}

}  // namespace rtnlinv
