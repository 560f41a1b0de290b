#pragma once

#include <functional>
#include <map>
#include <string>
#include <utility>

#include "rtnlinv/types.hpp"

namespace rtnlinv {

// size -> measured runtime of one 2D complex transform of that side length.
struct FftLookupTable {
  std::map<int, double> entries_us;
  std::string machine_key;
  std::string library_key;
  bool resolution_warning = false;
};

// Everything the per-frame solver needs to know about sizes and schedules.
struct ReconPlan {
  int N = 0;        // measured field of view, pixels per side
  double gamma = 1.5;
  int G = 0;        // oversampled grid side, even, G = round(2*gamma*N)
  int Gc = 0;       // cropped coil k-space side, floor(G/4) unless overridden
  int J = 1;        // channels the solver sees
  int newton_steps = 6;
  float alpha0 = 1.0f;
  float alpha_q = 0.5f;    // geometric reduction per Newton step
  float alpha_min = 1e-6f;
  float cg_tol = 1e-3f;    // relative residual stop; 0 disables the stop
  int cg_max_iter = 200;
  int cg_iter_budget = 0;  // total CG iterations across all steps; 0 = off
  float prev_damping = 1.0f;  // scaling on x_prev inside the regularization target
};

std::string default_machine_key();
std::string default_library_key();

// Times one transform per size over [size_lo, size_hi] (all sizes, so the
// table is contiguous), keeping the minimum wall-clock time over `trials`
// runs. Planning and warm-up are excluded from the timed region. now_ns can
// be injected for deterministic tests; it defaults to the steady clock.
FftLookupTable benchmark_fft(int size_lo, int size_hi, int trials,
                             std::function<uint64_t()> now_ns = {});

// argmin of table runtime over even G in [ceil(2*gamma_min*N), floor(2*gamma_max*N)],
// ties resolved toward the smallest G. Returns (G, gamma = G/(2N)).
std::pair<int, double> select_grid(int N, const FftLookupTable& table,
                                   double gamma_min = 1.4, double gamma_max = 2.0);

// Builds a plan from a lookup table when one is supplied, otherwise uses a
// fixed gamma of 1.5 (G forced even either way).
ReconPlan make_plan(int N, int J, const FftLookupTable* table = nullptr,
                    double gamma_min = 1.4, double gamma_max = 2.0);

// Table persistence: `# machine:` / `# library:` comment headers followed by
// one `size<TAB>microseconds` line per entry.
void save_table(const FftLookupTable& table, const std::string& path);
FftLookupTable load_table(const std::string& path);

int coil_grid_side(int G);  // floor(G/4)

// Centered k-space crop/pad. Both keep the DC cell (index side/2) aligned,
// pad_k zero-fills the complement; they are exact adjoints of each other.
CImage crop_k(const CImage& x, int Gc);
CImage pad_k(const CImage& x, int G);

}  // namespace rtnlinv
