#include "dlfm/optim.hpp"

#include <cmath>

namespace dlfm {

AdamW::AdamW(const ParamSet& params, AdamWConfig cfg) : cfg_(cfg)
{
    for (std::size_t i = 0; i < params.size(); ++i) {
        m_.emplace_back(params.at(i).shape());
        v_.emplace_back(params.at(i).shape());
    }
}

void AdamW::step(ParamSet& params, const std::vector<Tensor>& grads)
{
    if (grads.size() != params.size()) throw ValidationError("adamw: gradient count mismatch");
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (std::size_t k = 0; k < params.size(); ++k) {
        Tensor& p = params.at(k);
        const Tensor& g = grads[k];
        if (g.size() != p.size()) throw ValidationError("adamw: gradient shape mismatch for " + params.names()[k]);
        Tensor& m = m_[k];
        Tensor& v = v_[k];
        for (std::size_t i = 0; i < p.size(); ++i) {
            m[i] = cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * g[i];
            v[i] = cfg_.beta2 * v[i] + (1.0 - cfg_.beta2) * g[i] * g[i];
            p[i] -= cfg_.lr * cfg_.weight_decay * p[i];
            p[i] -= cfg_.lr * (m[i] / bc1) / (std::sqrt(v[i] / bc2) + cfg_.eps);
        }
    }
    if (!params.all_finite()) throw NumericError("adamw: parameters became non-finite");
}

double clip_grad_norm(std::vector<Tensor>& grads, double max_norm)
{
    double sq = 0.0;
    for (const auto& g : grads)
        for (double v : g.data()) sq += v * v;
    const double norm = std::sqrt(sq);
    if (!std::isfinite(norm)) throw NumericError("gradient norm is not finite");
    if (max_norm > 0.0 && norm > max_norm) {
        const double f = max_norm / norm;
        for (auto& g : grads)
            for (auto& v : g.storage()) v *= f;
    }
    return norm;
}

} // namespace dlfm
