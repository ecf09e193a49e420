#include "lcm/gradcheck.hpp"

#include <algorithm>
#include <cmath>

#include "lcm/errors.hpp"

namespace lcm {

namespace {

double eval_value(const std::function<Tensor()>& f) {
    NoGradScope no_grad;
    const double v = f().value();
    if (!std::isfinite(v)) {
        throw NumericError("finite_difference_check: function value is not finite");
    }
    return v;
}

}  // namespace

GradCheckReport finite_difference_check(
    const std::function<Tensor()>& f,
    const std::vector<std::pair<std::string, Tensor>>& params,
    double step, double tolerance) {
    if (!(step > 0.0)) {
        throw ConfigError("finite_difference_check: step must be positive");
    }

    // Analytic pass on a fresh tape.
    Tape::active().clear();
    Tensor loss = f();
    if (!std::isfinite(loss.value())) {
        Tape::active().clear();
        throw NumericError("finite_difference_check: function value is not finite");
    }
    Tape::active().backward(loss);
    std::vector<std::vector<double>> analytic;
    analytic.reserve(params.size());
    for (const auto& [name, p] : params) {
        analytic.emplace_back(p.grad().begin(), p.grad().end());
    }
    Tape::active().clear();

    GradCheckReport report;
    for (std::size_t pi = 0; pi < params.size(); ++pi) {
        Tensor param = params[pi].second;
        GradCheckEntry entry;
        entry.name = params[pi].first;
        auto data = param.raw_data();
        for (std::size_t j = 0; j < data.size(); ++j) {
            const double original = data[j];
            data[j] = original + step;
            const double up = eval_value(f);
            data[j] = original - step;
            const double down = eval_value(f);
            data[j] = original;
            const double numeric = (up - down) / (2.0 * step);
            const double a = analytic[pi][j];
            const double rel = std::abs(a - numeric) /
                               std::max({1.0, std::abs(a), std::abs(numeric)});
            entry.max_rel_error = std::max(entry.max_rel_error, rel);
        }
        entry.ok = entry.max_rel_error < tolerance;
        report.worst = std::max(report.worst, entry.max_rel_error);
        report.all_ok = report.all_ok && entry.ok;
        report.entries.push_back(std::move(entry));
    }
    return report;
}

}  // namespace lcm
