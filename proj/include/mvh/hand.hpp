#pragma once

#include <array>
#include <cstddef>

namespace mvh {

constexpr std::size_t kHandJoints = 21;
constexpr std::size_t kHandBones = 20;

// Wrist 0; thumb 1-4, index 5-8, middle 9-12, ring 13-16, pinky 17-20 (tip last).
constexpr std::array<int, kHandJoints> kHandParents = {-1, 0, 1, 2,  3,  0,  5,  6,  7,  0, 9,
                                                       10, 11, 0, 13, 14, 15, 0, 17, 18, 19};

}  // namespace mvh
