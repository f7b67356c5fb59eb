#include "dlfm/gradcheck.hpp"

#include <algorithm>
#include <cmath>

namespace dlfm::grad {

namespace {

double evaluate(const ScalarFn& f, const Tensor& x, const std::vector<Tensor>& frozen)
{
    Tape tape;
    tape.replay_frozen(frozen);
    const double v = f(tape, tape.constant(x)).value().item();
    if (!std::isfinite(v)) throw NumericError("check_gradients: function returned a non-finite value");
    return v;
}

} // namespace

GradCheckResult check_gradients(const ScalarFn& f, const Tensor& x, double step)
{
    if (!(step > 0.0)) throw ValidationError("check_gradients: step must be positive");

    Tape tape;
    tape.record_frozen();
    Var input = tape.leaf(x);
    Var out = f(tape, input);
    if (!std::isfinite(out.value().item()))
        throw NumericError("check_gradients: function returned a non-finite value");
    const Tensor analytic = tape.backward(out).of(input);
    const std::vector<Tensor> frozen = tape.frozen_values();

    GradCheckResult res;
    Tensor probe = x;
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double orig = probe[i];
        auto at = [&](double offset) {
            probe[i] = orig + offset;
            return evaluate(f, probe, frozen);
        };
        // Fourth-order central stencil.
        const double numeric = (8.0 * (at(step) - at(-step)) - (at(2.0 * step) - at(-2.0 * step))) / (12.0 * step);
        probe[i] = orig;
        const double denom = std::max({std::abs(analytic[i]), std::abs(numeric), 1e-8});
        const double err = std::abs(analytic[i] - numeric) / denom;
        if (i == 0 || err > res.max_rel_error) {
            res.max_rel_error = err;
            res.worst_index = i;
            res.analytic = analytic[i];
            res.numeric = numeric;
        }
    }
    return res;
}

} // namespace dlfm::grad
