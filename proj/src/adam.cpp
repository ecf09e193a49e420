#include "lcm/adam.hpp"

#include <cmath>

#include "lcm/errors.hpp"

namespace lcm {

Adam::Adam(double learning_rate, double beta1, double beta2, double eps)
    : lr_(learning_rate), beta1_(beta1), beta2_(beta2), eps_(eps) {
    if (!(learning_rate > 0.0)) {
        throw ConfigError("adam: learning rate must be positive, got " + std::to_string(learning_rate));
    }
    if (beta1 < 0.0 || beta1 >= 1.0 || beta2 < 0.0 || beta2 >= 1.0) {
        throw ConfigError("adam: betas must lie in [0, 1)");
    }
}

void Adam::step(std::vector<Tensor>& params) {
    if (state_.m.empty()) {
        state_.m.resize(params.size());
        state_.v.resize(params.size());
        for (std::size_t i = 0; i < params.size(); ++i) {
            state_.m[i].assign(params[i].size(), 0.0);
            state_.v[i].assign(params[i].size(), 0.0);
        }
    }
    if (state_.m.size() != params.size()) {
        throw ConfigError("adam: parameter list size changed mid-run");
    }
    state_.step += 1;
    const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(state_.step));
    const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(state_.step));
    for (std::size_t i = 0; i < params.size(); ++i) {
        auto data = params[i].raw_data();
        auto grad = params[i].raw_grad();
        auto& m = state_.m[i];
        auto& v = state_.v[i];
        if (m.size() != data.size()) {
            throw ConfigError("adam: parameter shape changed mid-run");
        }
        for (std::size_t j = 0; j < data.size(); ++j) {
            const double g = grad[j];
            m[j] = beta1_ * m[j] + (1.0 - beta1_) * g;
            v[j] = beta2_ * v[j] + (1.0 - beta2_) * g * g;
            const double mhat = m[j] / bc1;
            const double vhat = v[j] / bc2;
            data[j] -= lr_ * mhat / (std::sqrt(vhat) + eps_);
        }
    }
}

}  // namespace lcm
