#pragma once

#include <cstdint>
#include <vector>

#include "lcm/tensor.hpp"

namespace lcm {

// First/second moment estimates, one vector per parameter tensor, in the
// same order as the parameter list the optimizer was built for.
struct AdamState {
    std::int64_t step = 0;
    std::vector<std::vector<double>> m;
    std::vector<std::vector<double>> v;
};

// Adam with bias correction. Defaults: betas (0.9, 0.999), eps 1e-8.
class Adam {
public:
    Adam(double learning_rate, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8);

    // One update over `params`; each tensor's populated gradient accumulator
    // is consumed as-is (the caller clears the tape afterwards).
    void step(std::vector<Tensor>& params);

    double learning_rate() const { return lr_; }
    const AdamState& state() const { return state_; }
    void set_state(AdamState state) { state_ = std::move(state); }

private:
    double lr_, beta1_, beta2_, eps_;
    AdamState state_;
};

}  // namespace lcm
