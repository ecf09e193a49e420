#pragma once

#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "lcm/tensor.hpp"

namespace lcm {

struct GradCheckEntry {
    std::string name;
    double max_rel_error = 0.0;
    bool ok = true;
};

struct GradCheckReport {
    std::vector<GradCheckEntry> entries;
    double worst = 0.0;
    bool all_ok = true;
};

// Compares tape gradients of a deterministic scalar-valued function against
// central finite differences, per parameter element. The relative error is
// |analytic - numeric| / max(1, |analytic|, |numeric|), so near-zero
// gradients are compared absolutely. Entries above `tolerance` are flagged.
// Throws NumericError when f evaluates to a non-finite value.
GradCheckReport finite_difference_check(
    const std::function<Tensor()>& f,
    const std::vector<std::pair<std::string, Tensor>>& params,
    double step, double tolerance);

}  // namespace lcm
