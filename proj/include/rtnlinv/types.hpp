#pragma once

#include <complex>
#include <cstdint>
#include <stdexcept>
#include <vector>

namespace rtnlinv {

using cfloat = std::complex<float>;

// Error taxonomy, mapped to CLI exit codes: UsageError -> 2, DataError -> 3,
// SolverError -> 4. DecompFault aborts the affected frame and surfaces as 4.
struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct DataError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct SolverError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct DecompFault : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Square complex image or k-space grid, row-major.
struct CImage {
  int n = 0;
  std::vector<cfloat> v;

  CImage() = default;
  explicit CImage(int side) : n(side), v(static_cast<size_t>(side) * side) {}

  cfloat& at(int r, int c) { return v[static_cast<size_t>(r) * n + c]; }
  const cfloat& at(int r, int c) const { return v[static_cast<size_t>(r) * n + c]; }
  size_t size() const { return v.size(); }
  void fill(cfloat val) { std::fill(v.begin(), v.end(), val); }
};

// Index of the DC cell on a centered grid. Integer division keeps odd sides
// (the cropped coil grid can be odd) on a well-defined center cell.
inline int dc_index(int n) { return n / 2; }

// Vector-space helpers shared by the solver and the tests. Dot products
// accumulate in double so reductions stay stable at float storage precision.
inline std::complex<double> cdot(const CImage& a, const CImage& b) {
  std::complex<double> acc{0.0, 0.0};
  for (size_t i = 0; i < a.v.size(); ++i) {
    acc += std::conj(std::complex<double>(a.v[i])) * std::complex<double>(b.v[i]);
  }
  return acc;
}

inline double nrm2sq(const CImage& a) {
  double acc = 0;
  for (const cfloat& z : a.v) acc += double(z.real()) * z.real() + double(z.imag()) * z.imag();
  return acc;
}

inline void axpy(cfloat alpha, const CImage& x, CImage& y) {
  for (size_t i = 0; i < y.v.size(); ++i) y.v[i] += alpha * x.v[i];
}

inline void scale(CImage& x, cfloat s) {
  for (cfloat& z : x.v) z *= s;
}

}  // namespace rtnlinv
