#include "rtnlinv/nlinv.hpp"

#include <algorithm>
#include <cmath>
#include <exception>
#include <map>
#include <memory>
#include <mutex>
#include <thread>

#include "rtnlinv/fft.hpp"

namespace rtnlinv {

namespace {

// centered image-domain crop, DC pixel stays aligned
CImage crop_center(const CImage& x, int N) {
  const int off = dc_index(x.n) - dc_index(N);
  CImage out(N);
  for (int r = 0; r < N; ++r) {
    for (int c = 0; c < N; ++c) out.at(r, c) = x.at(r + off, c + off);
  }
  return out;
}

// Runs per_channel(j) for every channel, fanned out over the worker group in
// contiguous blocks when one is present. Channels write only their own slots,
// so the traversal order never shows in the results.
void for_each_channel(WorkerGroup* workers, int J,
                      const std::function<void(int)>& per_channel) {
  if (workers == nullptr || workers->size() == 1 || J == 1) {
    for (int j = 0; j < J; ++j) per_channel(j);
    return;
  }
  const int A = std::min(workers->size(), J);
  const auto blocks = partition_channels(J, A);
  workers->run([&](int a) {
    if (a >= A) return;  // more workers than channels: the extras idle
    for (int j = blocks[static_cast<size_t>(a)].first;
         j < blocks[static_cast<size_t>(a)].second; ++j) {
      per_channel(j);
    }
  });
}

void check_frame_shapes(const GriddedData& z, const ReconPlan& plan,
                        const Estimate& init) {
  if (z.G != plan.G || static_cast<int>(z.z.size()) != plan.J || z.J != plan.J) {
    throw UsageError("reconstruct_frame: data shape does not match the plan");
  }
  if (init.rho.n != plan.G || static_cast<int>(init.chat.size()) != plan.J ||
      (plan.J > 0 && init.chat[0].n != plan.Gc)) {
    throw UsageError("reconstruct_frame: estimate shape does not match the plan");
  }
}

}  // namespace

Estimate initial_estimate(const ReconPlan& plan) {
  Estimate e;
  e.rho = CImage(plan.G);
  for (int r = 0; r < plan.G; ++r) {
    for (int c = 0; c < plan.G; ++c) {
      if (in_window(plan.G, r, c)) e.rho.at(r, c) = cfloat(1.0f, 0.0f);
    }
  }
  e.chat.assign(static_cast<size_t>(plan.J), CImage(plan.Gc));
  return e;
}

void est_fill(Estimate& e, cfloat v) {
  e.rho.fill(v);
  for (CImage& c : e.chat) c.fill(v);
}

void est_axpy(Estimate& y, double a, const Estimate& x) {
  const float af = static_cast<float>(a);
  axpy(cfloat(af, 0.0f), x.rho, y.rho);
  for (size_t j = 0; j < y.chat.size(); ++j) axpy(cfloat(af, 0.0f), x.chat[j], y.chat[j]);
}

void est_scale(Estimate& e, double a) {
  const float af = static_cast<float>(a);
  scale(e.rho, cfloat(af, 0.0f));
  for (CImage& c : e.chat) scale(c, cfloat(af, 0.0f));
}

std::complex<double> est_dot(const Estimate& a, const Estimate& b) {
  std::complex<double> acc = cdot(a.rho, b.rho);
  for (size_t j = 0; j < a.chat.size(); ++j) acc += cdot(a.chat[j], b.chat[j]);
  return acc;
}

double est_nrm2sq(const Estimate& e) {
  double acc = nrm2sq(e.rho);
  for (const CImage& c : e.chat) acc += nrm2sq(c);
  return acc;
}

CImage make_weights_inv(int Gc, int G) {
  if (Gc < 1 || G < Gc) throw UsageError("make_weights_inv: need 1 <= Gc <= G");
  CImage out(Gc);
  const int c = dc_index(Gc);
  for (int r = 0; r < Gc; ++r) {
    for (int q = 0; q < Gc; ++q) {
      // frequencies are per pixel of the full reconstruction grid; the coil
      // spectrum keeps only the central Gc x Gc patch of that band, so the
      // stored weights cover |k| <= Gc/(2G) out of the full +-0.5
      const double ky = (r - c) / static_cast<double>(G);
      const double kx = (q - c) / static_cast<double>(G);
      const double w = std::pow(1.0 + 880.0 * (kx * kx + ky * ky), 16.0);
      out.at(r, q) = cfloat(static_cast<float>(1.0 / w), 0.0f);
    }
  }
  return out;
}

CImage apply_W_inv(const CImage& chat, const CImage& winv, int G) {
  CImage t(chat.n);
  for (size_t i = 0; i < t.v.size(); ++i) t.v[i] = chat.v[i] * winv.v[i].real();
  CImage out = pad_k(t, G);
  fft::inverse(out);
  return out;
}

CImage apply_W_invH(const CImage& u, const CImage& winv, int Gc) {
  CImage t = u;
  fft::forward(t);
  CImage out = crop_k(t, Gc);
  for (size_t i = 0; i < out.v.size(); ++i) out.v[i] *= winv.v[i].real();
  return out;
}

StepCache make_step_cache(const Estimate& x, const ReconPlan& plan,
                          const PsfKernel& psf, const CImage& winv,
                          WorkerGroup* workers) {
  StepCache sc;
  sc.plan = &plan;
  sc.psf = &psf;
  sc.winv = &winv;
  sc.workers = workers;
  sc.rho = x.rho;
  mask_window(sc.rho);
  sc.coils.assign(static_cast<size_t>(plan.J), CImage());
  for_each_channel(workers, plan.J, [&](int j) {
    sc.coils[static_cast<size_t>(j)] = apply_W_inv(x.chat[static_cast<size_t>(j)], winv, plan.G);
  });
  return sc;
}

Estimate apply_normal(const Estimate& dx, const StepCache& sc) {
  const ReconPlan& plan = *sc.plan;
  const int J = plan.J;
  Estimate out;
  out.chat.assign(static_cast<size_t>(J), CImage());
  std::vector<CImage> contrib(static_cast<size_t>(J));
  for_each_channel(sc.workers, J, [&](int j) {
    const CImage& cj = sc.coils[static_cast<size_t>(j)];
    // t_j = T(c_j*drho + rho*(W^-1 dchat)_j), then one transform back per output
    CImage t = apply_W_inv(dx.chat[static_cast<size_t>(j)], *sc.winv, plan.G);
    for (size_t i = 0; i < t.v.size(); ++i) {
      t.v[i] = cj.v[i] * dx.rho.v[i] + sc.rho.v[i] * t.v[i];
    }
    toeplitz_apply(t, *sc.psf);
    CImage rc(plan.G);
    CImage rt(plan.G);
    for (size_t i = 0; i < t.v.size(); ++i) {
      rc.v[i] = std::conj(cj.v[i]) * t.v[i];
      rt.v[i] = std::conj(sc.rho.v[i]) * t.v[i];
    }
    contrib[static_cast<size_t>(j)] = std::move(rc);
    out.chat[static_cast<size_t>(j)] = apply_W_invH(rt, *sc.winv, plan.Gc);
  });
  out.rho = all_reduce_sum(contrib);
  return out;
}

CgResult cg_solve(const Estimate& rhs, const StepCache& sc, float alpha, float tol,
                  int max_iter) {
  CgResult res;
  res.x = rhs;
  est_fill(res.x, cfloat(0.0f, 0.0f));
  const double rhs_norm = std::sqrt(est_nrm2sq(rhs));
  if (!(std::isfinite(rhs_norm))) throw SolverError("cg_solve: right-hand side is not finite");
  if (max_iter < 1 || rhs_norm == 0.0) return res;

  const auto apply = [&](const Estimate& p) {
    Estimate ap = apply_normal(p, sc);
    est_axpy(ap, alpha, p);
    return ap;
  };

  // Conjugate-residual recurrence: minimizes the residual norm over the
  // Krylov space, so the residual history is non-increasing, and the one
  // operator application per iteration doubles as the priming application.
  Estimate r = rhs;
  Estimate p = r;
  Estimate ar = apply(r);
  Estimate ap = ar;
  double r_ar = est_dot(r, ar).real();
  const double target = static_cast<double>(tol) * rhs_norm;

  for (int it = 1; it <= max_iter; ++it) {
    const double denom = est_nrm2sq(ap);
    if (!std::isfinite(denom) || !std::isfinite(r_ar)) {
      throw SolverError("cg_solve: iteration diverged");
    }
    if (denom <= 0.0 && tol > 0.0f) break;  // residual already exactly zero
    if (denom > 0.0) {
      const double a = r_ar / denom;
      est_axpy(res.x, a, p);
      est_axpy(r, -a, ap);
    }
    // tol = 0 asks for the exact iteration count (budgeted mode), so a dead
    // search direction stops moving x rather than ending the loop early
    const double rn = std::sqrt(est_nrm2sq(r));
    if (!std::isfinite(rn)) throw SolverError("cg_solve: residual is not finite");
    res.residuals.push_back(rn);
    res.iters = it;
    if (tol > 0.0f && (rn == 0.0 || rn <= target)) break;
    if (it == max_iter) break;  // skip the apply that no iteration would use
    Estimate ar_next = apply(r);
    const double r_ar_next = est_dot(r, ar_next).real();
    const double b = (r_ar != 0.0) ? r_ar_next / r_ar : 0.0;
    // p = r + b*p; ap = ar_next + b*ap
    est_scale(p, b);
    est_axpy(p, 1.0, r);
    est_scale(ap, b);
    est_axpy(ap, 1.0, ar_next);
    r_ar = r_ar_next;
  }
  return res;
}

StepStats newton_step(Estimate& x, const Estimate& reg, float alpha,
                      const GriddedData& z, const PsfKernel& psf,
                      const ReconPlan& plan, const CImage& winv,
                      WorkerGroup* workers, float cg_tol, int cg_max_iter) {
  StepStats st;
  StepCache sc;
  Estimate rhs;
  {
    fft::CtxScope scope(fft::Ctx::setup);
    sc = make_step_cache(x, plan, psf, winv, workers);
    rhs.chat.assign(static_cast<size_t>(plan.J), CImage());
    std::vector<CImage> contrib(static_cast<size_t>(plan.J));
    std::vector<double> resid_sq(static_cast<size_t>(plan.J), 0.0);
    for_each_channel(workers, plan.J, [&](int j) {
      const CImage& cj = sc.coils[static_cast<size_t>(j)];
      CImage e(plan.G);
      for (size_t i = 0; i < e.v.size(); ++i) e.v[i] = sc.rho.v[i] * cj.v[i];
      toeplitz_apply(e, psf);
      const CImage& zj = z.z[static_cast<size_t>(j)];
      for (size_t i = 0; i < e.v.size(); ++i) e.v[i] = zj.v[i] - e.v[i];
      resid_sq[static_cast<size_t>(j)] = nrm2sq(e);
      CImage rc(plan.G);
      CImage rt(plan.G);
      for (size_t i = 0; i < e.v.size(); ++i) {
        rc.v[i] = std::conj(cj.v[i]) * e.v[i];
        rt.v[i] = std::conj(sc.rho.v[i]) * e.v[i];
      }
      contrib[static_cast<size_t>(j)] = std::move(rc);
      rhs.chat[static_cast<size_t>(j)] = apply_W_invH(rt, winv, plan.Gc);
    });
    rhs.rho = all_reduce_sum(contrib);
    double rsq = 0;
    for (double v : resid_sq) rsq += v;
    st.residual0 = std::sqrt(rsq);
  }

  // pull toward the (damped) regularization target
  est_axpy(rhs, -static_cast<double>(alpha), x);
  est_axpy(rhs, static_cast<double>(alpha) * plan.prev_damping, reg);

  CgResult cg;
  {
    fft::CtxScope scope(fft::Ctx::normal_op);
    cg = cg_solve(rhs, sc, alpha, cg_tol, cg_max_iter);
  }
  est_axpy(x, 1.0, cg.x);
  st.cg_iters = cg.iters;
  return st;
}

FrameResult reconstruct_frame(const GriddedData& z, const PsfKernel& psf,
                              const ReconPlan& plan, const CImage& winv,
                              const Estimate& init, const RegProvider& reg,
                              WorkerGroup* workers,
                              const std::function<void(int)>& on_step) {
  check_frame_shapes(z, plan, init);
  const auto t0 = std::chrono::steady_clock::now();
  FrameResult out;
  out.est = init;
  float alpha = plan.alpha0;
  const int M = plan.newton_steps;
  int remaining = plan.cg_iter_budget;
  for (int m = 0; m < M; ++m) {
    int cap = plan.cg_max_iter;
    float tol = plan.cg_tol;
    if (plan.cg_iter_budget > 0) {
      // spread what is left of the budget evenly over the remaining steps
      const int steps_left = M - m;
      cap = (remaining + steps_left - 1) / steps_left;
      tol = 0.0f;
    }
    const Estimate& target = reg(m);
    const StepStats st =
        newton_step(out.est, target, alpha, z, psf, plan, winv, workers, tol, cap);
    out.cg_per_step.push_back(st.cg_iters);
    out.cg_iters += st.cg_iters;
    if (plan.cg_iter_budget > 0) remaining -= st.cg_iters;
    alpha = std::max(alpha * plan.alpha_q, plan.alpha_min);
    if (on_step) on_step(m);
  }

  {
    fft::CtxScope scope(fft::Ctx::setup);
    std::vector<double> acc(static_cast<size_t>(plan.G) * plan.G, 0.0);
    for (int j = 0; j < plan.J; ++j) {
      const CImage cj = apply_W_inv(out.est.chat[static_cast<size_t>(j)], winv, plan.G);
      for (size_t i = 0; i < acc.size(); ++i) {
        acc[i] += double(cj.v[i].real()) * cj.v[i].real() +
                  double(cj.v[i].imag()) * cj.v[i].imag();
      }
    }
    CImage combined(plan.G);
    for (size_t i = 0; i < acc.size(); ++i) {
      combined.v[i] = out.est.rho.v[i] * static_cast<float>(std::sqrt(acc[i]));
    }
    out.image = crop_center(combined, plan.N);
  }
  out.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return out;
}

FramePsfProvider::FramePsfProvider(const ReconPlan& plan, double delay_samples)
    : plan_(plan), delay_(delay_samples), cache_(plan) {}

std::shared_ptr<const PsfKernel> FramePsfProvider::get(const KSpaceFrame& frame) {
  if (delay_ == 0.0) return cache_.get(frame);
  const uint64_t key = PsfCache::angle_key(frame.spoke_angles, frame.S, plan_.G);
  std::lock_guard<std::mutex> lock(mu_);
  auto it = delayed_.find(key);
  if (it == delayed_.end()) {
    const auto coords = frame_coords(frame, delay_);
    std::vector<double> weights(coords.size());
    for (size_t i = 0; i < coords.size(); ++i) {
      weights[i] = dcf_ramp(coords[i][0], coords[i][1], frame.K, frame.S, plan_.G);
    }
    auto built = std::make_shared<PsfKernel>(build_psf_coords(coords, weights, plan_));
    it = delayed_.emplace(key, std::move(built)).first;
  }
  return it->second;
}

namespace {

struct PreppedSeries {
  std::vector<GriddedData> z;
  std::vector<std::shared_ptr<const PsfKernel>> psf;
  CImage winv;
  double scale = 1.0;
};

PreppedSeries prep_series(const std::vector<KSpaceFrame>& frames, const ReconPlan& plan,
                          const SeriesOptions& opts) {
  if (frames.empty()) throw UsageError("reconstruct_series: no frames");
  if (opts.A < 1 || opts.A > kGroupSizeMax) {
    throw UsageError("reconstruct_series: workers per thread out of range");
  }
  PreppedSeries ps;
  ps.winv = make_weights_inv(plan.Gc, plan.G);
  FramePsfProvider psf_provider(plan, opts.delay_samples);
  ps.z.reserve(frames.size());
  ps.psf.reserve(frames.size());
  for (const KSpaceFrame& f : frames) {
    const KSpaceFrame* use = &f;
    KSpaceFrame tmp;
    if (opts.compression != nullptr) {
      tmp = apply_compression(f, *opts.compression);
      use = &tmp;
    }
    if (use->J != plan.J) {
      throw UsageError("reconstruct_series: channel count does not match the plan");
    }
    ps.z.push_back(grid_adjoint(*use, plan, opts.delay_samples));
    ps.psf.push_back(psf_provider.get(*use));
  }
  if (opts.normalize) {
    double nsq = 0;
    for (const CImage& img : ps.z[0].z) nsq += nrm2sq(img);
    if (nsq > 0) {
      ps.scale = 100.0 / std::sqrt(nsq);
      const cfloat s(static_cast<float>(ps.scale), 0.0f);
      for (GriddedData& g : ps.z) {
        for (CImage& img : g.z) scale(img, s);
      }
    }
  }
  return ps;
}

void undo_scale(CImage& img, const PreppedSeries& ps, const SeriesOptions& opts) {
  if (opts.normalize && ps.scale != 1.0) {
    scale(img, cfloat(static_cast<float>(1.0 / ps.scale), 0.0f));
  }
}

}  // namespace

SeriesResult reconstruct_series_plain(const std::vector<KSpaceFrame>& frames,
                                      const ReconPlan& plan, const SeriesOptions& opts) {
  PreppedSeries ps = prep_series(frames, plan, opts);
  const int F = static_cast<int>(frames.size());
  const int M = plan.newton_steps;
  SeriesResult res;
  res.data_scale = ps.scale;
  std::unique_ptr<WorkerGroup> wg;
  if (opts.A > 1) wg = std::make_unique<WorkerGroup>(opts.A, opts.worker_timeout);
  const Estimate unity = initial_estimate(plan);
  Estimate prev;
  for (int n = 0; n < F; ++n) {
    const bool chained = opts.chain && n > 0;
    const Estimate& init = chained ? prev : unity;
    const RegProvider reg = [&init](int) -> const Estimate& { return init; };
    FrameResult fr = reconstruct_frame(ps.z[static_cast<size_t>(n)],
                                       *ps.psf[static_cast<size_t>(n)], plan, ps.winv,
                                       init, reg, wg.get());
    undo_scale(fr.image, ps, opts);
    res.images.push_back(std::move(fr.image));
    FrameAudit a;
    a.frame = n;
    a.thread = 0;
    a.workers = opts.A;
    a.init_src = chained ? n - 1 : -1;
    a.reg_final_src = a.init_src;
    a.reg_src.assign(static_cast<size_t>(M), a.init_src);
    res.audit.push_back(std::move(a));
    res.stats.push_back(FrameStats{fr.cg_iters, fr.seconds});
    prev = std::move(fr.est);
  }
  return res;
}

SeriesResult reconstruct_series(const std::vector<KSpaceFrame>& frames,
                                const ReconPlan& plan, const SeriesOptions& opts) {
  if (opts.T < 1) throw UsageError("reconstruct_series: thread count out of range");
  PreppedSeries ps = prep_series(frames, plan, opts);
  const int F = static_cast<int>(frames.size());
  const int T = std::min(opts.T, F);
  const int M = plan.newton_steps;

  SeriesResult res;
  res.data_scale = ps.scale;
  res.images.assign(static_cast<size_t>(F), CImage());
  res.audit.assign(static_cast<size_t>(F), FrameAudit{});
  res.stats.assign(static_cast<size_t>(F), FrameStats{});
  std::vector<Estimate> ests(static_cast<size_t>(F));
  CompletionLedger ledger(F);
  const Estimate unity = initial_estimate(plan);

  std::mutex err_mu;
  std::exception_ptr first_err;

  const auto thread_main = [&](int t) {
    try {
      std::unique_ptr<WorkerGroup> wg;
      if (opts.A > 1) wg = std::make_unique<WorkerGroup>(opts.A, opts.worker_timeout);
      for (int n = t; n < F; n += T) {
        if (ledger.poisoned()) return;
        const bool chained = opts.chain && n > 0;
        // frames inside the strict prefix do not begin until the predecessor
        // has fully finished
        if (chained && n <= opts.sched.l) ledger.wait_complete(n - 1);
        FrameAudit a;
        a.frame = n;
        a.thread = t;
        a.workers = opts.A;
        a.reg_src.assign(static_cast<size_t>(M), -1);
        a.start_seq = ledger.next_seq();
        if (chained) a.init_src = h_choose(n, 0, M, opts.sched, ledger);
        const Estimate init = (a.init_src >= 0) ? ests[static_cast<size_t>(a.init_src)] : unity;
        const RegProvider reg = [&](int m) -> const Estimate& {
          if (!chained) {
            if (m == M - 1) a.reg_final_seq = ledger.next_seq();
            return unity;
          }
          const int src = h_choose(n, m, M, opts.sched, ledger);
          if (m == M - 1) a.reg_final_seq = ledger.next_seq();
          a.reg_src[static_cast<size_t>(m)] = src;
          return ests[static_cast<size_t>(src)];
        };
        FrameResult fr = reconstruct_frame(
            ps.z[static_cast<size_t>(n)], *ps.psf[static_cast<size_t>(n)], plan, ps.winv,
            init, reg, wg.get(), [&](int m) { ledger.mark_step(n, m); });
        a.reg_final_src = chained ? a.reg_src[static_cast<size_t>(M - 1)] : -1;
        undo_scale(fr.image, ps, opts);
        res.images[static_cast<size_t>(n)] = std::move(fr.image);
        res.stats[static_cast<size_t>(n)] = FrameStats{fr.cg_iters, fr.seconds};
        ests[static_cast<size_t>(n)] = std::move(fr.est);
        a.finish_seq = ledger.next_seq();
        res.audit[static_cast<size_t>(n)] = std::move(a);
        ledger.mark_complete(n);
      }
    } catch (...) {
      {
        std::lock_guard<std::mutex> lock(err_mu);
        if (!first_err) first_err = std::current_exception();
      }
      ledger.poison();
    }
  };

  if (T == 1) {
    thread_main(0);
  } else {
    std::vector<std::thread> pool;
    pool.reserve(static_cast<size_t>(T - 1));
    for (int t = 1; t < T; ++t) pool.emplace_back(thread_main, t);
    thread_main(0);
    for (std::thread& th : pool) th.join();
  }
  if (first_err) std::rethrow_exception(first_err);
  return res;
}

double nrmse_scaled(const CImage& got, const CImage& want, double interior_frac) {
  if (got.n != want.n) throw UsageError("nrmse_scaled: size mismatch");
  const int N = got.n;
  const int c = dc_index(N);
  const double rad = interior_frac * N;
  double sgw = 0, sgg = 0, sww = 0;
  for (int r = 0; r < N; ++r) {
    for (int q = 0; q < N; ++q) {
      const double dr = r - c;
      const double dq = q - c;
      if (std::sqrt(dr * dr + dq * dq) > rad) continue;
      const double g = std::abs(std::complex<double>(got.at(r, q)));
      const double w = std::abs(std::complex<double>(want.at(r, q)));
      sgw += g * w;
      sgg += g * g;
      sww += w * w;
    }
  }
  if (sww == 0.0) return sgg == 0.0 ? 0.0 : 1.0;
  const double s = (sgg > 0.0) ? sgw / sgg : 0.0;
  const double err = std::max(s * s * sgg - 2.0 * s * sgw + sww, 0.0);
  return std::sqrt(err / sww);
}

}  // namespace rtnlinv
