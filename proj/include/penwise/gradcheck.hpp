#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "penwise/error.hpp"
#include "penwise/rng.hpp"
#include "penwise/tensor.hpp"

namespace penwise {

struct GradCheckResult {
    double max_relative_error = 0.0;
    std::string worst_parameter;
    std::size_t worst_index = 0;
    std::size_t coordinates_checked = 0;
};

/// Compares reverse-mode gradients of `loss_fn` against central differences.
/// Error per coordinate is |analytic - numeric| / max(1, |analytic|).
/// With `max_coords` > 0, that many coordinates per parameter are sampled
/// using `seed`; otherwise every coordinate is checked.
inline GradCheckResult grad_check(const std::function<Tensor()>& loss_fn, ParamList params, double h = 1e-5,
                                  std::uint64_t seed = 0, std::size_t max_coords = 0)
{
    if (!(h > 0.0) || h > 1e-3) {
        throw InvalidArgument("grad_check: h must lie in (0, 1e-3]");
    }
    for (auto& [name, t] : params) {
        t.zero_grad();
    }
    Tensor loss = loss_fn();
    if (!std::isfinite(loss.item())) {
        throw NumericFailure("grad_check: loss is not finite");
    }
    loss.backward();

    auto eval = [&]() {
        NoGradGuard guard;
        const double v = loss_fn().item();
        if (!std::isfinite(v)) {
            throw NumericFailure("grad_check: perturbed loss is not finite");
        }
        return v;
    };

    Rng rng(seed);
    GradCheckResult result;
    for (auto& [name, t] : params) {
        std::vector<double> analytic(t.size(), 0.0);
        if (t.has_grad()) {
            std::copy(t.grad().begin(), t.grad().end(), analytic.begin());
        }
        std::vector<std::size_t> coords(t.size());
        for (std::size_t i = 0; i < coords.size(); ++i) {
            coords[i] = i;
        }
        if (max_coords > 0 && coords.size() > max_coords) {
            rng.shuffle(coords);
            coords.resize(max_coords);
        }
        auto values = t.mutable_data();
        for (std::size_t i : coords) {
            const double saved = values[i];
            values[i] = saved + h;
            const double up = eval();
            values[i] = saved - h;
            const double down = eval();
            values[i] = saved;
            const double numeric = (up - down) / (2.0 * h);
            const double err = std::abs(analytic[i] - numeric) / std::max(1.0, std::abs(analytic[i]));
            ++result.coordinates_checked;
            if (err > result.max_relative_error) {
                result.max_relative_error = err;
                result.worst_parameter = name;
                result.worst_index = i;
            }
        }
    }
    return result;
}

}  // namespace penwise
