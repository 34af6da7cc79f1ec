// SPDX-License-Identifier: Apache-2.0
//
// Finite-difference checks of every differentiable objective on small random
// instances (K <= 3 events, T <= 16 frames, C <= 16 channels).

#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace evigrid {

inline constexpr double kGradcheckTolerance = 1e-4;

struct GradcheckRow {
    std::string name;
    int instances = 0;
    double max_rel_error = 0.0;
    double seconds = 0.0;
    bool passed() const { return max_rel_error < kGradcheckTolerance; }
};

// Rows, in order: consistency, grounding BCE, supervised total, preference.
std::vector<GradcheckRow> run_gradcheck(int instances, uint64_t seed);

}  // namespace evigrid
