#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <Eigen/Dense>
#include <cmath>
#include <complex>
#include <limits>
#include <numbers>
#include <random>
#include <vector>

#include "oracles.hpp"
#include "rtnlinv/fft.hpp"
#include "rtnlinv/nlinv.hpp"
#include "rtnlinv/preproc.hpp"
#include "rtnlinv/seqsim.hpp"

using namespace rtnlinv;

namespace {

ReconPlan raw_plan(int G, int J) {
  ReconPlan plan;
  plan.N = G / 2;
  plan.G = G;
  plan.Gc = G / 4;
  plan.J = J;
  return plan;
}

Estimate random_estimate(const ReconPlan& plan, uint32_t seed) {
  Estimate e;
  e.rho = oracles::random_image(plan.G, seed);
  for (int j = 0; j < plan.J; ++j) {
    e.chat.push_back(oracles::random_image(plan.Gc, seed + 1 + static_cast<uint32_t>(j)));
  }
  return e;
}

PsfKernel radial_psf(const ReconPlan& plan, int K, uint32_t seed) {
  std::mt19937 rng(seed);
  std::uniform_real_distribution<double> u(0.0, 2.0 * std::numbers::pi);
  std::vector<double> angles(static_cast<size_t>(K));
  for (double& a : angles) a = u(rng);
  return build_psf(angles, plan.G, plan);
}

StepCache random_cache(const Estimate& x, const ReconPlan& plan, const PsfKernel& psf,
                       const CImage& winv) {
  return make_step_cache(x, plan, psf, winv, nullptr);
}

bool est_equal(const Estimate& a, const Estimate& b) {
  if (a.rho.n != b.rho.n || a.chat.size() != b.chat.size()) return false;
  for (size_t i = 0; i < a.rho.v.size(); ++i) {
    if (a.rho.v[i] != b.rho.v[i]) return false;
  }
  for (size_t j = 0; j < a.chat.size(); ++j) {
    for (size_t i = 0; i < a.chat[j].v.size(); ++i) {
      if (a.chat[j].v[i] != b.chat[j].v[i]) return false;
    }
  }
  return true;
}

int est_dim(const ReconPlan& plan) {
  return plan.G * plan.G + plan.J * plan.Gc * plan.Gc;
}

Eigen::VectorXcd est_flatten(const Estimate& e) {
  Eigen::VectorXcd v(e.rho.n * e.rho.n +
                     static_cast<Eigen::Index>(e.chat.size()) * e.chat[0].n * e.chat[0].n);
  Eigen::Index i = 0;
  for (const cfloat& z : e.rho.v) v[i++] = std::complex<double>(z);
  for (const CImage& c : e.chat) {
    for (const cfloat& z : c.v) v[i++] = std::complex<double>(z);
  }
  return v;
}

Estimate est_unflatten(const Eigen::VectorXcd& v, const ReconPlan& plan) {
  Estimate e;
  e.rho = CImage(plan.G);
  Eigen::Index i = 0;
  for (cfloat& z : e.rho.v) {
    z = cfloat(static_cast<float>(v[i].real()), static_cast<float>(v[i].imag()));
    ++i;
  }
  for (int j = 0; j < plan.J; ++j) {
    CImage c(plan.Gc);
    for (cfloat& z : c.v) {
      z = cfloat(static_cast<float>(v[i].real()), static_cast<float>(v[i].imag()));
      ++i;
    }
    e.chat.push_back(std::move(c));
  }
  return e;
}

std::vector<KSpaceFrame> phantom_series(int J, int F, int K, int U, int N,
                                        double noise = 0.0, uint64_t seed = 7) {
  PhantomSpec ph = default_phantom(J, seed);
  ph.noise_sigma = noise;
  TrajectorySpec traj;
  traj.K = K;
  traj.U = U;
  traj.samples_per_spoke = 2 * N;
  std::vector<KSpaceFrame> frames;
  for (int n = 0; n < F; ++n) frames.push_back(simulate_frame(ph, traj, n));
  return frames;
}

}  // namespace

TEST_CASE("inverse weights fall off and survive the band edge") {
  const int Gc = 12, G = 48;
  const CImage winv = make_weights_inv(Gc, G);
  const int c = dc_index(Gc);
  CHECK(winv.at(c, c).real() == doctest::Approx(1.0));
  // monotone decay along the axis
  for (int col = c; col < Gc - 1; ++col) {
    CHECK(winv.at(c, col).real() > winv.at(c, col + 1).real());
  }
  // one step off DC is one cycle across the full grid, not the stored patch
  const double expected = 1.0 / std::pow(1.0 + 880.0 / (G * G), 16.0);
  CHECK(winv.at(c, c + 1).real() == doctest::Approx(expected).epsilon(1e-5));
  // the stored corner sits at |k|^2 = 2 (Gc/2G)^2, heavily but finitely damped
  const double k2 = 2.0 * std::pow(double(c) / G, 2.0);
  const double corner = 1.0 / std::pow(1.0 + 880.0 * k2, 16.0);
  CHECK(winv.at(0, 0).real() == doctest::Approx(corner).epsilon(1e-5));
  CHECK(winv.at(0, 0).imag() == 0.0f);

  // with no crop the band edge weight overflows float; its reciprocal must
  // land in the subnormal range, not at zero
  const CImage full = make_weights_inv(16, 16);
  CHECK(full.at(0, 0).real() > 0.0f);
  CHECK(full.at(0, 0).real() < 1e-40f);

  CHECK_THROWS_AS(make_weights_inv(8, 4), UsageError);
}

TEST_CASE("weight solve pair: adjointness, DC response, and composition") {
  const int G = 24, Gc = 6;
  const CImage winv = make_weights_inv(Gc, G);

  SUBCASE("exact adjoints") {
    for (uint32_t t = 0; t < 10; ++t) {
      const CImage a = oracles::random_image(Gc, 900 + t);
      const CImage u = oracles::random_image(G, 950 + t);
      CImage wa = apply_W_inv(a, winv, G);
      CImage whu = apply_W_invH(u, winv, Gc);
      const std::complex<double> lhs = cdot(wa, u);
      const std::complex<double> rhs = cdot(a, whu);
      CHECK(std::abs(lhs - rhs) <= 1e-5 * std::abs(lhs));
    }
  }

  SUBCASE("a DC spike decodes to the constant 1/G") {
    CImage spike(Gc);
    spike.at(dc_index(Gc), dc_index(Gc)) = cfloat(1.0f, 0.0f);
    const CImage img = apply_W_inv(spike, winv, G);
    for (const cfloat& z : img.v) {
      CHECK(std::abs(std::complex<double>(z) - 1.0 / G) < 1e-7);
    }
  }

  SUBCASE("composing the pair squares the weights") {
    const CImage a = oracles::random_image(Gc, 1234);
    const CImage back = apply_W_invH(apply_W_inv(a, winv, G), winv, Gc);
    for (size_t i = 0; i < back.v.size(); ++i) {
      const double w2 = double(winv.v[i].real()) * winv.v[i].real();
      const std::complex<double> want = std::complex<double>(a.v[i]) * w2;
      CHECK(std::abs(std::complex<double>(back.v[i]) - want) <= 1e-6);
    }
  }
}

TEST_CASE("normal operator is self-adjoint and positive") {
  int trials_run = 0;
  for (int G : {16, 32}) {
    for (int J : {1, 3}) {
      ReconPlan plan = raw_plan(G, J);
      const CImage winv = make_weights_inv(plan.Gc, plan.G);
      const PsfKernel psf = radial_psf(plan, 5, static_cast<uint32_t>(G + J));
      const Estimate x = random_estimate(plan, static_cast<uint32_t>(10 * G + J));
      const StepCache sc = random_cache(x, plan, psf, winv);
      for (int t = 0; t < 25; ++t) {
        const uint32_t s = static_cast<uint32_t>(1000 * G + 100 * J + 4 * t);
        const Estimate dx = random_estimate(plan, s);
        const Estimate dy = random_estimate(plan, s + 2000000);
        const Estimate adx = apply_normal(dx, sc);
        const Estimate ady = apply_normal(dy, sc);
        const std::complex<double> lhs = est_dot(adx, dy);
        const std::complex<double> rhs = est_dot(dx, ady);
        CHECK(std::abs(lhs - rhs) <= 1e-4 * std::max(std::abs(lhs), 1e-30));
        const double quad = est_dot(adx, dx).real();
        CHECK(quad >= -1e-4 * est_nrm2sq(dx));
        ++trials_run;
      }
    }
  }
  CHECK(trials_run == 100);
}

TEST_CASE("normal operator output lives on the field-of-view window") {
  ReconPlan plan = raw_plan(16, 2);
  const CImage winv = make_weights_inv(plan.Gc, plan.G);
  const PsfKernel psf = radial_psf(plan, 5, 3);
  const StepCache sc = random_cache(random_estimate(plan, 55), plan, psf, winv);
  const Estimate out = apply_normal(random_estimate(plan, 56), sc);
  for (int r = 0; r < plan.G; ++r) {
    for (int c = 0; c < plan.G; ++c) {
      if (!in_window(plan.G, r, c)) CHECK(out.rho.at(r, c) == cfloat(0.0f, 0.0f));
    }
  }

  Estimate zero = random_estimate(plan, 57);
  est_fill(zero, cfloat(0.0f, 0.0f));
  CHECK(est_nrm2sq(apply_normal(zero, sc)) == 0.0);
}

TEST_CASE("conjugate-gradient solution matches a dense direct solve") {
  ReconPlan plan = raw_plan(16, 2);
  const CImage winv = make_weights_inv(plan.Gc, plan.G);
  const PsfKernel psf = radial_psf(plan, 5, 21);
  const Estimate x = random_estimate(plan, 500);
  const StepCache sc = random_cache(x, plan, psf, winv);
  const float alpha = 0.1f;
  const int D = est_dim(plan);

  Eigen::MatrixXcd A(D, D);
  Estimate basis = initial_estimate(plan);
  for (int col = 0; col < D; ++col) {
    Eigen::VectorXcd e = Eigen::VectorXcd::Zero(D);
    e[col] = 1.0;
    Estimate eb = est_unflatten(e, plan);
    Estimate ab = apply_normal(eb, sc);
    est_axpy(ab, alpha, eb);
    A.col(col) = est_flatten(ab);
  }

  const Estimate rhs = random_estimate(plan, 501);
  const Eigen::VectorXcd b = est_flatten(rhs);
  const Eigen::VectorXcd dense = A.partialPivLu().solve(b);

  const CgResult cg = cg_solve(rhs, sc, alpha, 1e-7f, 400);
  const Eigen::VectorXcd got = est_flatten(cg.x);
  const double rel = (got - dense).norm() / dense.norm();
  CHECK(rel <= 1e-4);
}

TEST_CASE("conjugate-gradient bookkeeping") {
  ReconPlan plan = raw_plan(16, 2);
  const CImage winv = make_weights_inv(plan.Gc, plan.G);
  const PsfKernel psf = radial_psf(plan, 5, 31);
  const StepCache sc = random_cache(random_estimate(plan, 600), plan, psf, winv);

  SUBCASE("a zero right-hand side costs nothing") {
    Estimate rhs = random_estimate(plan, 601);
    est_fill(rhs, cfloat(0.0f, 0.0f));
    fft::reset_counts();
    const CgResult res = cg_solve(rhs, sc, 0.5f, 1e-3f, 50);
    CHECK(res.iters == 0);
    CHECK(res.residuals.empty());
    CHECK(est_nrm2sq(res.x) == 0.0);
    CHECK(fft::count_total() == 0);
  }

  SUBCASE("operator applications equal iterations exactly") {
    const Estimate rhs = random_estimate(plan, 602);
    for (int cap : {1, 3, 7}) {
      fft::reset_counts();
      const CgResult res = cg_solve(rhs, sc, 0.5f, 0.0f, cap);
      CHECK(res.iters == cap);
      CHECK(fft::count_total() == static_cast<uint64_t>(4 * plan.J * cap));
    }
  }

  SUBCASE("residual norms never increase") {
    const Estimate rhs = random_estimate(plan, 603);
    const CgResult res = cg_solve(rhs, sc, 0.05f, 0.0f, 40);
    REQUIRE(res.residuals.size() == 40);
    for (size_t i = 1; i < res.residuals.size(); ++i) {
      CHECK(res.residuals[i] <= res.residuals[i - 1] * (1.0 + 1e-5));
    }
  }

  SUBCASE("the relative tolerance stops the iteration") {
    const Estimate rhs = random_estimate(plan, 604);
    const CgResult res = cg_solve(rhs, sc, 0.5f, 1e-3f, 200);
    CHECK(res.iters < 200);
    const double rhs_norm = std::sqrt(est_nrm2sq(rhs));
    CHECK(res.residuals.back() <= 1e-3 * rhs_norm);
  }

  SUBCASE("an overwhelming damping term reduces the solve to rhs/alpha") {
    const Estimate rhs = random_estimate(plan, 605);
    const float alpha = 1e8f;
    const CgResult res = cg_solve(rhs, sc, alpha, 1e-8f, 50);
    Estimate want = rhs;
    est_scale(want, 1.0 / alpha);
    Estimate diff = res.x;
    est_axpy(diff, -1.0, want);
    CHECK(std::sqrt(est_nrm2sq(diff) / est_nrm2sq(want)) <= 1e-4);
  }

  SUBCASE("non-finite input raises a solver error") {
    Estimate rhs = random_estimate(plan, 606);
    rhs.rho.at(8, 8) = cfloat(std::numeric_limits<float>::quiet_NaN(), 0.0f);
    CHECK_THROWS_AS(cg_solve(rhs, sc, 0.5f, 1e-3f, 50), SolverError);
  }
}

TEST_CASE("a consistent estimate is a fixed point of the update") {
  const auto frames = phantom_series(2, 1, 7, 1, 16);
  ReconPlan plan = make_plan(16, 2);
  plan.newton_steps = 2;
  plan.cg_iter_budget = 6;
  const CImage winv = make_weights_inv(plan.Gc, plan.G);
  const PsfKernel psf = build_psf(frames[0], plan);
  const GriddedData z = grid_adjoint(frames[0], plan);

  // run a couple of real steps to land on a nontrivial estimate
  const Estimate unity = initial_estimate(plan);
  const RegProvider reg0 = [&unity](int) -> const Estimate& { return unity; };
  const FrameResult fr = reconstruct_frame(z, psf, plan, winv, unity, reg0);
  const Estimate x = fr.est;

  // data manufactured from x itself: the update must not move
  const StepCache sc = make_step_cache(x, plan, psf, winv, nullptr);
  GriddedData zx;
  zx.J = plan.J;
  zx.G = plan.G;
  for (int j = 0; j < plan.J; ++j) {
    CImage t(plan.G);
    for (size_t i = 0; i < t.v.size(); ++i) {
      t.v[i] = sc.rho.v[i] * sc.coils[static_cast<size_t>(j)].v[i];
    }
    toeplitz_apply(t, psf);
    zx.z.push_back(std::move(t));
  }

  Estimate moved = x;
  const StepStats st =
      newton_step(moved, x, 0.7f, zx, psf, plan, winv, nullptr, 1e-3f, 50);
  CHECK(st.residual0 == 0.0);
  CHECK(st.cg_iters == 0);
  CHECK(est_equal(moved, x));
}

TEST_CASE("an overwhelming regularizer pins the update to its target") {
  const auto frames = phantom_series(2, 2, 7, 1, 16);
  ReconPlan plan = make_plan(16, 2);
  const CImage winv = make_weights_inv(plan.Gc, plan.G);
  const PsfKernel psf = build_psf(frames[0], plan);
  const GriddedData z = grid_adjoint(frames[0], plan);

  const Estimate unity = initial_estimate(plan);
  Estimate target = random_estimate(plan, 70);
  mask_window(target.rho);
  est_scale(target, 0.1);

  Estimate x = unity;
  newton_step(x, target, 1e8f, z, psf, plan, winv, nullptr, 1e-8f, 60);
  Estimate diff = x;
  est_axpy(diff, -1.0, target);
  CHECK(std::sqrt(est_nrm2sq(diff) / est_nrm2sq(target)) <= 1e-2);
}

TEST_CASE("transform accounting per frame is exact") {
  const auto frames = phantom_series(3, 1, 11, 1, 16);
  ReconPlan plan = make_plan(16, 3);
  plan.newton_steps = 4;
  plan.cg_iter_budget = 12;
  const CImage winv = make_weights_inv(plan.Gc, plan.G);
  const PsfKernel psf = build_psf(frames[0], plan);
  const GriddedData z = grid_adjoint(frames[0], plan);
  const Estimate unity = initial_estimate(plan);
  const RegProvider reg = [&unity](int) -> const Estimate& { return unity; };

  fft::reset_counts();
  const FrameResult fr = reconstruct_frame(z, psf, plan, winv, unity, reg);
  REQUIRE(fr.cg_per_step == std::vector<int>{3, 3, 3, 3});
  // normal-operator pair: 4 transforms per channel per CG iteration
  CHECK(fft::count(fft::Ctx::normal_op) == 4ull * 3 * 12);
  // step setup: 4 per channel per step, plus the final coil decode
  CHECK(fft::count(fft::Ctx::setup) == 4ull * 3 * 4 + 3);
  CHECK(fft::count(fft::Ctx::other) == 0);
}

TEST_CASE("the iteration budget spreads over the steps, front-loaded") {
  const auto frames = phantom_series(2, 1, 11, 1, 16);
  ReconPlan plan = make_plan(16, 2);
  plan.newton_steps = 6;
  plan.cg_iter_budget = 50;
  const CImage winv = make_weights_inv(plan.Gc, plan.G);
  const PsfKernel psf = build_psf(frames[0], plan);
  const GriddedData z = grid_adjoint(frames[0], plan);
  const Estimate unity = initial_estimate(plan);
  const RegProvider reg = [&unity](int) -> const Estimate& { return unity; };

  const FrameResult fr = reconstruct_frame(z, psf, plan, winv, unity, reg);
  CHECK(fr.cg_per_step == std::vector<int>{9, 9, 8, 8, 8, 8});
  CHECK(fr.cg_iters == 50);
}

TEST_CASE("fully sampled phantoms are recovered to a few percent") {
  const int N = 32;
  for (int J : {1, 4}) {
    CAPTURE(J);
    PhantomSpec ph = default_phantom(J, 5);
    TrajectorySpec traj;
    traj.K = 51;  // past the radial Nyquist count for N=32
    traj.U = 1;
    traj.samples_per_spoke = 2 * N;
    const std::vector<KSpaceFrame> frames{simulate_frame(ph, traj, 0)};

    ReconPlan plan = make_plan(N, J);
    SeriesOptions opts;
    const SeriesResult res = reconstruct_series_plain(frames, plan, opts);
    REQUIRE(res.images.size() == 1);
    CHECK(res.images[0].n == N);

    const CImage truth = bandlimited_truth_rss(ph, 0, N);
    const double err = nrmse_scaled(res.images[0], truth);
    CAPTURE(err);
    CHECK(err <= 0.05);
  }
}

TEST_CASE("chaining beats starting from scratch on an undersampled series") {
  const int N = 24, F = 12;
  const auto frames = phantom_series(3, F, 11, 5, N, 1e-3, 9);
  ReconPlan plan = make_plan(N, 3);
  plan.cg_iter_budget = 30;
  PhantomSpec ph = default_phantom(3, 9);

  SeriesOptions chained;
  chained.sched = TemporalSchedule::for_turns(5);
  const SeriesResult with_chain = reconstruct_series_plain(frames, plan, chained);

  SeriesOptions scratch = chained;
  scratch.chain = false;
  const SeriesResult without = reconstruct_series_plain(frames, plan, scratch);

  int wins = 0;
  for (int n = 6; n < F; ++n) {
    const CImage truth = bandlimited_truth_rss(ph, n, N);
    const double err_chain = nrmse_scaled(with_chain.images[static_cast<size_t>(n)], truth);
    const double err_scratch = nrmse_scaled(without.images[static_cast<size_t>(n)], truth);
    CAPTURE(n);
    CAPTURE(err_chain);
    CAPTURE(err_scratch);
    CHECK(err_chain < 0.5);
    if (err_chain <= err_scratch) ++wins;
  }
  CHECK(wins >= 5);  // of 6 scored frames
}

TEST_CASE("data scale does not leak into the output") {
  const int N = 16;
  auto frames = phantom_series(2, 3, 5, 3, N, 0.0, 3);
  ReconPlan plan = make_plan(N, 2);
  plan.newton_steps = 4;
  plan.cg_iter_budget = 12;
  SeriesOptions opts;
  opts.sched = TemporalSchedule::for_turns(3);

  const SeriesResult base = reconstruct_series_plain(frames, plan, opts);

  auto scaled = frames;
  for (KSpaceFrame& f : scaled) {
    for (cfloat& s : f.samples) s *= 3.7f;
  }
  const SeriesResult big = reconstruct_series_plain(scaled, plan, opts);

  CHECK(big.data_scale == doctest::Approx(base.data_scale / 3.7).epsilon(1e-5));
  for (size_t n = 0; n < frames.size(); ++n) {
    // outputs are reported in input units, so the 3.7 must reappear
    CImage unscaled = big.images[n];
    scale(unscaled, cfloat(1.0f / 3.7f, 0.0f));
    CHECK(oracles::rel_err(unscaled, base.images[n]) <= 1e-2);
  }
}

TEST_CASE("a unitary channel rotation leaves the reconstruction unchanged") {
  const int N = 16;
  const auto frames = phantom_series(3, 4, 5, 2, N, 1e-4, 13);
  const CompressionMatrix cm = calibrate_compression(frames, 3);
  REQUIRE_FALSE(cm.rank_deficient);

  ReconPlan plan = make_plan(N, 3);
  plan.newton_steps = 3;
  plan.cg_iter_budget = 9;
  SeriesOptions opts;
  opts.sched = TemporalSchedule::for_turns(2);

  const SeriesResult plainres = reconstruct_series_plain(frames, plan, opts);
  SeriesOptions copts = opts;
  copts.compression = &cm;
  const SeriesResult rotated = reconstruct_series_plain(frames, plan, copts);

  for (size_t n = 0; n < frames.size(); ++n) {
    CHECK(nrmse_scaled(rotated.images[n], plainres.images[n], 1.0) <= 1e-3);
  }
}

TEST_CASE("shape validation") {
  ReconPlan plan = raw_plan(16, 2);
  const CImage winv = make_weights_inv(plan.Gc, plan.G);
  const PsfKernel psf = radial_psf(plan, 3, 2);
  const Estimate unity = initial_estimate(plan);
  const RegProvider reg = [&unity](int) -> const Estimate& { return unity; };

  GriddedData bad;
  bad.J = 3;  // plan says 2
  bad.G = plan.G;
  bad.z.assign(3, CImage(plan.G));
  CHECK_THROWS_AS(reconstruct_frame(bad, psf, plan, winv, unity, reg), UsageError);

  GriddedData z;
  z.J = 2;
  z.G = plan.G;
  z.z.assign(2, CImage(plan.G));
  Estimate small = unity;
  small.chat.pop_back();
  CHECK_THROWS_AS(reconstruct_frame(z, psf, plan, winv, small, reg), UsageError);

  const std::vector<KSpaceFrame> none;
  SeriesOptions opts;
  CHECK_THROWS_AS(reconstruct_series_plain(none, ReconPlan{}, opts), UsageError);

  auto frames = phantom_series(2, 1, 3, 1, 16);
  ReconPlan p2 = make_plan(16, 2);
  SeriesOptions badw;
  badw.A = 0;
  CHECK_THROWS_AS(reconstruct_series_plain(frames, p2, badw), UsageError);
  badw.A = kGroupSizeMax + 1;
  CHECK_THROWS_AS(reconstruct_series_plain(frames, p2, badw), UsageError);
  SeriesOptions badt;
  badt.T = 0;
  CHECK_THROWS_AS(reconstruct_series(frames, p2, badt), UsageError);
}

TEST_CASE("coil-grid cropping hardly changes the image") {
  const int N = 24;
  const auto frames = phantom_series(4, 1, 39, 1, N, 0.0, 17);
  ReconPlan plan = make_plan(N, 4);
  SeriesOptions opts;

  const SeriesResult cropped = reconstruct_series_plain(frames, plan, opts);

  ReconPlan full = plan;
  full.Gc = full.G;  // no coil-grid cropping at all
  const SeriesResult uncropped = reconstruct_series_plain(frames, full, opts);

  const double diff = nrmse_scaled(cropped.images[0], uncropped.images[0]);
  CAPTURE(diff);
  CHECK(diff <= 0.02);
}
