#pragma once

#include "dlfm/flow.hpp"
#include "dlfm/latent.hpp"

#include <functional>
#include <vector>

namespace dlfm::integrate {

/// dz/dt (per year) at state z and age t_current, for a flow anchored at
/// (t_start, t_end).
using VelocityFn = std::function<Tensor(const Tensor& z, double t_start, double t_current, double t_end)>;

struct EulerOptions {
    double dt = 0.01;
    double sde_sigma = 0.0;
    std::uint64_t noise_seed = 0;
    /// Move the start/end anchors to each segment of a multi-snapshot run.
    bool reanchor_segments = false;
};

struct Anchors {
    double start = 0.0;
    double end = 0.0;
};

/// Number of Euler steps from t_i to t_j: ceil((t_j - t_i) / dt), the last one shortened.
std::size_t step_count(double t_i, double t_j, double dt);

/// One Euler segment t_from -> t_to on the grid t_from + k dt. The condition
/// uses the given anchors. Draws SDE noise from `rng` when sde_sigma > 0.
Tensor euler_segment(const VelocityFn& v, Tensor z, double t_from, double t_to, Anchors anchors,
                     const EulerOptions& opt, Rng* rng = nullptr, std::size_t* steps = nullptr);

/// z at t_j, anchors (t_i, t_j).
Tensor euler_integrate(const VelocityFn& v, const Tensor& z, double t_i, double t_j, const EulerOptions& opt);

struct EulerPath {
    std::vector<Tensor> states;       ///< one per snapshot age
    std::vector<std::size_t> steps;   ///< Euler steps per segment
};

/// Integrates once from t0 through strictly increasing snapshot ages on the grid
/// t0 + k dt, anchored at (t0, last age). Each snapshot equals a fresh integration
/// to its age. With reanchor_segments, each segment restarts from the previous
/// snapshot with anchors (previous age, age).
EulerPath euler_path(const VelocityFn& v, const Tensor& z0, double t0, const std::vector<double>& ages,
                     const EulerOptions& opt);

enum class PredictionMode {
    Direct,   ///< decode the predicted latent
    Residual, ///< source image + dec(z_pred) - dec(z_source), clipped to [0, 1]
};

struct ModelBundle {
    latent::AutoencoderParams ae;
    flow::VelocityNetParams flow;
    flow::LatentNormalizer normalizer;
    PredictionMode mode = PredictionMode::Residual;
};

/// Velocity in normalized latent units per year; physical-mode outputs are divided by the span.
VelocityFn model_velocity(const ModelBundle& bundle, const flow::Attributes& attrs);

struct TrajectoryPrediction {
    double source_age = 0.0;
    std::vector<double> query_ages;
    std::vector<Tensor> latents;               ///< predicted latents, autoencoder units, latent shape
    std::vector<cohort::ScanImage> images;
    std::vector<std::size_t> steps;            ///< Euler steps per segment
};

TrajectoryPrediction predict_followup(const ModelBundle& bundle, const cohort::ScanImage& source, double source_age,
                                      const flow::Attributes& attrs, double target_age, std::uint64_t noise_seed = 0);

/// Snapshots at source_age + k * interval for k = 1.. while <= horizon (plus the horizon itself
/// when it is not a multiple of the interval).
TrajectoryPrediction predict_trajectory(const ModelBundle& bundle, const cohort::ScanImage& source, double source_age,
                                        const flow::Attributes& attrs, double horizon_years, double interval_years,
                                        std::uint64_t noise_seed = 0);

} // namespace dlfm::integrate
