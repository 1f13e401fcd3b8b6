#pragma once

#include <cstdint>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

#include "mvh/param_store.hpp"
#include "mvh/tape.hpp"

namespace mvh {

class NonDeterministicLoss : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct GradCheckOptions {
  double step = 1e-5;
  double tolerance = 1e-4;
  /// Entries per parameter array compared against central differences; arrays
  /// at or below this size are checked exhaustively.
  std::size_t max_entries_per_param = 6;
  std::uint64_t seed = 0;
  /// Denominator floor for the relative error, as a fraction of max(1, |loss|).
  /// Entries whose gradients sit below it are compared in absolute terms: loss
  /// evaluations carry roundoff near 1e-12 |loss|, so a central difference with
  /// step 1e-5 cannot resolve gradients much smaller than 1e-3 |loss| to 1e-4.
  double floor = 1e-3;
  /// Only check parameters whose name starts with one of these prefixes (all if empty).
  std::vector<std::string> prefixes;
};

struct ParamGradCheck {
  std::string name;
  std::size_t checked = 0;
  double max_rel_error = 0.0;
  double max_abs_grad = 0.0;
};

struct GradCheckReport {
  double loss = 0.0;
  double tolerance = 0.0;
  double max_rel_error = 0.0;
  bool passed = false;
  std::vector<ParamGradCheck> params;

  std::string to_string() const;
};

using LossFn = std::function<Var(Tape&)>;

/// Compares tape gradients of `loss` against central finite differences.
/// The loss is evaluated twice before differencing; differing values throw NonDeterministicLoss.
GradCheckReport grad_check(const LossFn& loss, ParamStore& store, const GradCheckOptions& opt = {});

}  // namespace mvh
