#pragma once

#include "dlfm/cohort.hpp"
#include "dlfm/optim.hpp"
#include "dlfm/params.hpp"
#include "dlfm/svd.hpp"

#include <functional>
#include <optional>
#include <string>
#include <vector>

namespace dlfm::latent {

using grad::SvdFactors;
using grad::Var;

struct AutoencoderConfig {
    std::size_t image_size = 32;
    std::size_t latent_rows = 8;
    std::size_t latent_cols = 8;
    std::vector<std::size_t> hidden = {256, 128}; ///< encoder widths; the decoder mirrors them
    double beta_kl = 1e-4;

    std::size_t image_dim() const { return image_size * image_size; }
    std::size_t latent_dim() const { return latent_rows * latent_cols; }
    bool operator==(const AutoencoderConfig&) const = default;
};

struct AutoencoderParams {
    AutoencoderConfig config;
    ParamSet params;
};

AutoencoderParams init_autoencoder(const AutoencoderConfig& config, std::uint64_t seed);

struct LatentSample {
    Tensor z;      ///< rows x cols
    Tensor mean;   ///< rows x cols
    Tensor logvar; ///< rows x cols
    std::optional<SvdFactors> svd;

    /// Thin SVD of z, computed on first use.
    const SvdFactors& factors();
};

/// Evaluation mode when `eps` is null (z = mean); otherwise z = mean + exp(logvar/2) * eps.
LatentSample encode(const AutoencoderParams& ae, const cohort::ScanImage& image, Rng* eps = nullptr);
std::vector<LatentSample> encode_batch(const AutoencoderParams& ae, const std::vector<const cohort::ScanImage*>& images);
cohort::ScanImage decode(const AutoencoderParams& ae, const Tensor& z);

struct EncoderOutput {
    Var mean;   ///< B x latent_dim
    Var logvar; ///< B x latent_dim
};

/// Tape-level networks over row-stacked inputs.
EncoderOutput encoder_forward(const BoundParams& p, const AutoencoderConfig& cfg, Var x);
Var decoder_forward(const BoundParams& p, const AutoencoderConfig& cfg, Var z);

enum class AngularLoss { Arc, Cosine };
enum class MagnitudeLoss { RankPull, Simple };

struct ArcRankConfig {
    double margin = 1.0;
    double lambda_arc = 0.005;
    double lambda_rank = 0.01;
    bool pull_enabled = true;
    bool stop_gradient_earlier = true;
    /// Hinge per singular value instead of on the nuclear norm.
    bool per_component_rank = false;
    AngularLoss angular = AngularLoss::Arc;
    MagnitudeLoss magnitude = MagnitudeLoss::RankPull;

    /// Throws ValidationError on invalid values; returns advisory warnings.
    std::vector<std::string> validate() const;
    bool active() const { return lambda_arc > 0.0 || lambda_rank > 0.0; }
    bool operator==(const ArcRankConfig&) const = default;
};

/// Sum of |U_i - U_j|; U_i is held constant when `freeze_earlier`.
Var arc_loss(Var U_i, Var U_j, bool freeze_earlier = true);

/// max(0, m - gap) + (pull ? |gap| : 0) with gap = sum(S_j) - sum(S_i).
Var rank_pull_loss(Var S_i, Var S_j, double margin, bool pull, bool freeze_earlier = true);

/// 1 - <z_i, z_j> / (|z_i| |z_j|) on flattened latents.
Var cosine_surrogate_loss(Var z_i, Var z_j);

/// max(0, d_j - d_i), as written.
Var simple_rank_loss(Var d_i, Var d_j);

struct ArcRankTerms {
    Var total;
    double angular = 0.0;   ///< unweighted angular term
    double rank = 0.0;      ///< unweighted hinge (or simple) term
    double pull = 0.0;      ///< unweighted pull term
};

/// ArcRank over the time-ordered latents of one patient. Fewer than two
/// latents yield 0 with a tape warning.
ArcRankTerms arcrank_loss(grad::Tape& tape, const std::vector<Var>& latents, const ArcRankConfig& cfg);

struct AETrainConfig {
    AdamWConfig optimizer{};
    std::size_t batch_patients = 2;
    int epochs = 60;
    std::uint64_t seed = 0;
    double grad_clip = 100.0;
    ArcRankConfig arcrank{}; ///< both weights zero disables the term entirely
};

struct AEEpochStats {
    double recon = 0.0;
    double kl = 0.0;
    std::optional<double> arcrank;
    double angular = 0.0;
    double rank = 0.0;
    double pull = 0.0;
    double total = 0.0;
};

struct AETrainResult {
    AutoencoderParams ae;
    std::vector<AEEpochStats> history;
    std::vector<std::string> warnings;
};

using EpochCallback = std::function<void(int epoch, const AEEpochStats&)>;

/// Trains on whole patients: each batch holds `batch_patients` patients with all
/// their visits, and ArcRank is applied per patient to the latent means.
AETrainResult train_autoencoder(const cohort::Cohort& train, const AutoencoderConfig& ae_cfg,
                                const AETrainConfig& cfg, const EpochCallback& on_epoch = {});

/// Batch loss used by training; exposed for gradient checks.
struct AEBatchLoss {
    Var total;
    double recon = 0.0;
    double kl = 0.0;
    std::optional<double> arcrank;
    double angular = 0.0; ///< unweighted per-term means over patients
    double rank = 0.0;
    double pull = 0.0;
};
/// Rows [begin, end) of a batch holding one patient's visits in time order.
struct PatientRows {
    std::int64_t id = 0;
    std::size_t begin = 0;
    std::size_t end = 0;
};

/// `x` is B x D; `eps` is B x latent_dim noise (zeros for the mean path).
/// Per-patient ArcRank terms are averaged in patient-id order.
AEBatchLoss autoencoder_loss(const BoundParams& p, const AutoencoderConfig& cfg, Var x,
                             const std::vector<PatientRows>& groups, const Tensor& eps, const ArcRankConfig& arcrank);

/// Diagnostics on evaluation means.
struct LatentStructure {
    double mean_arc_distance = 0.0;      ///< mean over same-patient pairs i<j of sum|U_i - U_j|
    double adjacent_order_accuracy = 0.0; ///< fraction of adjacent visit pairs with nuclear norm increasing
    std::size_t pairs = 0;
    std::size_t adjacent_pairs = 0;
};
LatentStructure latent_structure(const AutoencoderParams& ae, const cohort::Cohort& cohort);

double nuclear_norm(const Tensor& S);

Tensor image_row(const cohort::ScanImage& image);

} // namespace dlfm::latent
