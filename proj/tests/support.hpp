#pragma once

#include <vector>

#include "qf/numerics/grad_check.hpp"
#include "qf/numerics/kernels.hpp"
#include "qf/numerics/rng.hpp"

namespace qf::testing {

inline DualTensor random_tensor(Shape shape, RngStream& rng, double lo = -1.0, double hi = 1.0) {
  DualTensor t(std::move(shape));
  for (auto& v : t.values()) v = rng.uniform(lo, hi);
  return t;
}

/// Scalar sum(x * W) with fixed random W, so every output entry gets a distinct cotangent.
inline Var probe(const Var& x, std::uint64_t seed = 99) {
  RngStream rng(seed);
  return sum(mul(x, x.tape().constant(random_tensor(x.shape(), rng))));
}

inline std::vector<double> values_of(const Var& v) { return v.value(); }

}  // namespace qf::testing
