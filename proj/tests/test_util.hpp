#pragma once

#include <random>
#include <string>

#include "mvh/array.hpp"
#include "mvh/grad_check.hpp"
#include "mvh/param_store.hpp"

namespace testutil {

inline mvh::Array random_array(mvh::Shape shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  mvh::Array a(std::move(shape));
  for (auto& v : a.values()) v = u(rng);
  return a;
}

// Checks every entry of every parameter (small test problems only).
inline mvh::GradCheckReport check_all(const mvh::LossFn& loss, mvh::ParamStore& store, double tol = 1e-4) {
  mvh::GradCheckOptions opt;
  opt.tolerance = tol;
  opt.max_entries_per_param = 1u << 20;
  return mvh::grad_check(loss, store, opt);
}

}  // namespace testutil
