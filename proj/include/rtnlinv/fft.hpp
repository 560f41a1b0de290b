#pragma once

#include "rtnlinv/types.hpp"

namespace rtnlinv::fft {

// Every transform is booked against the context active on the calling thread,
// so tests can pin down exactly who spent transforms (the normal-operator pair
// has a hard budget of 4 per channel per application).
enum class Ctx { other = 0, normal_op = 1, setup = 2, bench = 3 };

struct CtxScope {
  explicit CtxScope(Ctx c);
  ~CtxScope();
  CtxScope(const CtxScope&) = delete;
  CtxScope& operator=(const CtxScope&) = delete;

 private:
  Ctx prev_;
};

// Centered unitary 2D transforms, in place, on an n x n grid. DC sits at
// index n/2 on both axes (integer division; odd sides work). forward and
// inverse carry a 1/n scale each, so they are exact inverses and exact
// adjoints of one another. Arithmetic runs in double precision behind the
// float interface; the conversion is folded into the two shift passes.
void forward(cfloat* data, int n);
void inverse(cfloat* data, int n);
void forward(CImage& img);
void inverse(CImage& img);

// context currently active on the calling thread (worker pools copy the
// submitting thread's context so accounting survives the fan-out)
Ctx current();

uint64_t count(Ctx c);
uint64_t count_total();
void reset_counts();

}  // namespace rtnlinv::fft
