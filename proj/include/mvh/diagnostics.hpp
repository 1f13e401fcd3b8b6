#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "mvh/grad_check.hpp"

namespace mvh {

/// Loss terms the model exposes: "hmap", "hm2d", "nll", "proj2d", "total".
const std::vector<std::string>& loss_term_names();

/// Central-difference check of one loss term through the whole model, on a
/// 2-view block of two T=3 windows from a generated sequence. Parameters get a
/// small random offset first so zero-initialised output layers pass gradient.
GradCheckReport check_model_gradient(const std::string& term, std::uint64_t seed,
                                     std::size_t entries_per_param = 2);

}  // namespace mvh
