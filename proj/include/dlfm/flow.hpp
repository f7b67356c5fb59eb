#pragma once

#include "dlfm/cohort.hpp"
#include "dlfm/optim.hpp"
#include "dlfm/params.hpp"

#include <functional>
#include <vector>

namespace dlfm::flow {

using grad::Var;

enum class SamplingMode { Temporal, Physical };

struct FlowConfig {
    SamplingMode sampling_mode = SamplingMode::Temporal;
    double dt = 0.01;             ///< Euler step in years
    double sde_sigma = 0.0;       ///< 0 = deterministic ODE
    std::size_t embed_dim = 16;   ///< per time embedding
    double status_noise_std = 1.0;
    bool conditioning_enabled = true;
    std::size_t latent_dim = 64;
    std::size_t hidden = 128;
    std::size_t cond_hidden = 64;
    /// Restart the start/end anchors at every snapshot of a trajectory.
    bool reanchor_segments = false;

    void validate() const;
    std::size_t attribute_width() const { return conditioning_enabled ? 3 : 0; }
    std::size_t condition_width() const { return 3 * embed_dim + attribute_width(); }
    bool operator==(const FlowConfig&) const = default;
};

/// [sin(t w_k), cos(t w_k)] for k < dim/2 with w_k = 10000^(-2k/dim).
Tensor sinusoidal_embed(double t, std::size_t dim);

struct Attributes {
    int sex = 0;
    double baseline_age = 0.0;
    int status = 0;
    static Attributes of(const cohort::PatientRecord& r) { return {r.sex, r.baseline_age, r.status}; }
};

/// Condition for a flow from age t_start to age t_end, currently at age t_current.
/// Embeds years since baseline at the start, the flow time (elapsed years, or the
/// elapsed fraction in physical mode) and years since baseline at the end; then
/// appends sex, baseline age / 100 and status (noisy when training).
Tensor make_condition(const FlowConfig& cfg, const Attributes& attrs, double t_start, double t_current, double t_end,
                      bool training, Rng* rng);

struct VelocityNetParams {
    FlowConfig config;
    ParamSet params;
};

VelocityNetParams init_velocity_net(const FlowConfig& cfg, std::uint64_t seed);

/// Layer-normalizes rows of h, then applies (1 + scale(c)) * h + shift(c) with the
/// generators of `layer`. `c` is the processed condition (B x cond_hidden).
Var adaln_modulate(const BoundParams& p, const std::string& layer, Var h, Var c);

/// B x latent_dim velocities for B x latent_dim states and B x condition_width conditions.
/// With `modulate` off the AdaLN generators are skipped (normalization only).
Var velocity_forward(const BoundParams& p, const FlowConfig& cfg, Var z, Var cond, bool modulate = true);

/// Velocity for one latent; the output has the shape of `z`.
Tensor velocity(const VelocityNetParams& net, const Tensor& z, const Tensor& cond);

struct FMSample {
    Tensor z_t;
    double t = 0.0;   ///< flow time: years in temporal mode, fraction in physical mode
    Tensor v_target;
    double T = 0.0;   ///< t_j - t_i in years
};

FMSample fm_training_sample(const Tensor& z_i, const Tensor& z_j, double t_i, double t_j, SamplingMode mode, Rng& rng);
/// Same, at a given flow time.
FMSample fm_sample_at(const Tensor& z_i, const Tensor& z_j, double t_i, double t_j, SamplingMode mode, double t);

/// Mean over rows of the squared velocity error summed over latent entries.
Var fm_loss(const BoundParams& p, const FlowConfig& cfg, Var z_t, Var cond, const Tensor& v_target);

/// Per-entry mean and a single global scale, fitted on training latents.
struct LatentNormalizer {
    Tensor mean;
    double scale = 1.0;
    Tensor apply(const Tensor& z) const;
    Tensor invert(const Tensor& z) const;
    bool operator==(const LatentNormalizer&) const = default;
};

struct EncodedPatient {
    std::int64_t id = 0;
    Attributes attrs;
    std::vector<double> ages;
    std::vector<Tensor> latents; ///< flattened, length latent_dim
};

LatentNormalizer fit_normalizer(const std::vector<EncodedPatient>& patients);

struct FlowTrainConfig {
    AdamWConfig optimizer{3e-5, 0.9, 0.999, 1e-8, 1e-2};
    std::size_t batch_size = 4;
    int epochs = 40;
    /// Times each ordered pair is visited per epoch (fresh t and status noise each time).
    int samples_per_pair = 4;
    std::uint64_t seed = 0;
};

struct FlowTrainResult {
    VelocityNetParams net;
    std::vector<double> history; ///< mean batch loss per epoch
};

/// Trains on all ordered same-patient pairs of (already normalized) latents.
FlowTrainResult train_flow(const std::vector<EncodedPatient>& patients, const FlowConfig& cfg,
                           const FlowTrainConfig& train, const std::function<void(int, double)>& on_epoch = {});

} // namespace dlfm::flow
