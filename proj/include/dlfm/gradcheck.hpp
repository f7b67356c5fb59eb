#pragma once

#include "dlfm/tape.hpp"

#include <functional>

namespace dlfm::grad {

/// Scalar function of one input tensor, built on the supplied tape.
using ScalarFn = std::function<Var(Tape&, Var)>;

struct GradCheckResult {
    double max_rel_error = 0.0;
    std::size_t worst_index = 0;
    double analytic = 0.0;
    double numeric = 0.0;
};

/// Fourth-order central-difference check of backward() at x. Relative error per coordinate
/// is |analytic - numeric| / max(|analytic|, |numeric|, 1e-8). Stop-gradient
/// branches are held at their values at x, so only live paths are perturbed.
GradCheckResult check_gradients(const ScalarFn& f, const Tensor& x, double step);

} // namespace dlfm::grad
