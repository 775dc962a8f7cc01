#pragma once

#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <vector>

#include "chi/network.hpp"

namespace chi {

// Epsilon inside the GM log: exact-zero errors occur on synthetic data and
// the bare geometric mean is undefined there.
constexpr double kGmEpsilon = 1e-6;

// Error geometric mean (prod e_i)^(1/n), computed as exp(mean(log(e + eps)))
// for numerical safety. The single-error case is returned directly: that
// keeps GM(e) = e + eps exact, where exp(log(x)) would be off by an ulp and
// break the tight AM-GM bound.
inline double geometric_mean_error(const std::vector<double>& errors) {
    if (errors.empty()) throw std::invalid_argument("geometric_mean_error: empty error list");
    if (errors.size() == 1) return errors[0] + kGmEpsilon;
    double acc = 0.0;
    for (double e : errors) acc += std::log(e + kGmEpsilon);
    return std::exp(acc / double(errors.size()));
}

inline double arithmetic_mean(const std::vector<double>& errors) {
    if (errors.empty()) throw std::invalid_argument("arithmetic_mean: empty error list");
    double acc = 0.0;
    for (double e : errors) acc += e;
    return acc / double(errors.size());
}

struct MetricsReport {
    Task task = Task::kRegression;
    double mae = 0.0;                    // regression: mean over factors
    double gm = 0.0;                     // GM of per-sample mean absolute errors
    double error_rate = 0.0;             // classification
    std::vector<double> mae_per_factor;  // regression
};

}  // namespace chi
