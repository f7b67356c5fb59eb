#pragma once

#include "dlfm/params.hpp"

#include <vector>

namespace dlfm {

struct AdamWConfig {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 1e-2;
};

/// Adam with decoupled weight decay.
class AdamW {
public:
    AdamW(const ParamSet& params, AdamWConfig cfg);

    void step(ParamSet& params, const std::vector<Tensor>& grads);
    long steps() const { return t_; }

private:
    AdamWConfig cfg_;
    std::vector<Tensor> m_, v_;
    long t_ = 0;
};

/// Rescales `grads` in place so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping. max_norm <= 0 disables clipping.
double clip_grad_norm(std::vector<Tensor>& grads, double max_norm);

} // namespace dlfm
