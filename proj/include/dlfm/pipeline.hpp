#pragma once

#include "dlfm/cohort.hpp"
#include "dlfm/flow.hpp"
#include "dlfm/integrate.hpp"
#include "dlfm/latent.hpp"
#include "dlfm/metrics.hpp"

#include "json.hpp"

#include <array>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

namespace dlfm::cli {

namespace fs = std::filesystem;
using nlohmann::json;

struct ExperimentConfig {
    std::uint64_t seed = 7;
    cohort::CohortConfig cohort{};
    cohort::SplitFractions split{};
    latent::AutoencoderConfig ae{};
    latent::AETrainConfig ae_train{};
    flow::FlowConfig flow{};
    flow::FlowTrainConfig flow_train{};
    integrate::PredictionMode prediction_mode = integrate::PredictionMode::Residual;
    metrics::SensitivityConfig sensitivity{};
    /// Not serialized and not hashed: the same experiment may live anywhere.
    fs::path out_dir = "runs/default";

    /// Fills derived fields (component seeds, image size, latent width) from the rest.
    void resolve();
    /// Throws ValidationError on inconsistent values.
    void validate() const;
};

/// Component seeds derived from the master seed.
std::uint64_t split_seed(std::uint64_t seed);
std::uint64_t ae_seed(std::uint64_t seed);
std::uint64_t flow_seed(std::uint64_t seed);
std::uint64_t sensitivity_seed(std::uint64_t seed);
std::uint64_t predict_noise_seed(std::uint64_t seed);

/// Canonical form with every default materialized.
json to_json(const ExperimentConfig& cfg);
/// Missing keys keep their defaults; unknown keys are a ValidationError.
ExperimentConfig config_from_json(const json& j);
ExperimentConfig load_config(const fs::path& file);
void save_config(const ExperimentConfig& cfg, const fs::path& file);

/// CRC-32 of the canonical JSON, as 8 lowercase hex digits.
std::string config_hash(const ExperimentConfig& cfg);

/// The parts of the config that determine the autoencoder.
json ae_section(const ExperimentConfig& cfg);

inline constexpr int kCheckpointVersion = 1;

struct Checkpoint {
    std::string kind; ///< "ae" or "bundle"
    ExperimentConfig config;
    json provenance = json::object();
    latent::AutoencoderParams ae;
    std::optional<flow::VelocityNetParams> flow;
    std::optional<flow::LatentNormalizer> normalizer;

    integrate::ModelBundle bundle() const;
};

/// "DLFM1", u64 little-endian header length, JSON header, little-endian float64 payload.
std::string encode_checkpoint(const Checkpoint& ck);
Checkpoint decode_checkpoint(const std::string& bytes);
void save_checkpoint(const Checkpoint& ck, const fs::path& file);
Checkpoint load_checkpoint(const fs::path& file);

/// "%.9g"; non-finite values are written as nan/inf.
std::string fmt_num(double v);

/// Mean-centred flattened rows projected on the top two principal axes
/// (zeros for missing axes).
std::vector<std::array<double, 2>> pca_2d(const std::vector<Tensor>& rows);

/// 8-bit binary graymap, values clamped to [0, 1].
std::string encode_pgm(const cohort::ScanImage& im, const std::string& comment);
/// Linear map of the 1st..99th percentile range to [0, 1] (linear interpolation
/// between order statistics). A flat range maps to 0.
cohort::ScanImage percentile_normalize(const cohort::ScanImage& im, double lo_pct = 1.0, double hi_pct = 99.0);

struct PredictRequest {
    std::int64_t patient_id = 0;
    std::size_t visit = 0;
    std::vector<double> ages;        ///< explicit target ages
    std::optional<double> horizon;   ///< with interval: trajectory mode
    double interval = 1.0;
};

struct PredictOutcome {
    std::vector<double> ages;
    std::vector<fs::path> files;
};

struct EvalOutcome {
    std::vector<metrics::MetricReport> reports;
    std::vector<metrics::HorizonStratum> strata;
    metrics::HorizonStratum overall;
    double horizon_spearman = 0.0;
};

/// Run directory layout: cohort/, split.json, config.json, ae.ckpt, bundle.ckpt,
/// history.csv, metrics.csv, summary.json, latents.csv, sensitivity.csv, predict/.
void cmd_gen_data(const ExperimentConfig& cfg, const fs::path& dir);
void cmd_train_ae(const ExperimentConfig& cfg, const fs::path& dir);
void cmd_train_flow(const ExperimentConfig& cfg, const fs::path& dir);
PredictOutcome cmd_predict(const fs::path& dir, const PredictRequest& req);
EvalOutcome cmd_evaluate(const fs::path& dir, bool copy_baseline);
void cmd_export_latents(const fs::path& dir);
std::vector<metrics::SensitivityRow> cmd_sensitivity(const ExperimentConfig& cfg, const fs::path& dir);
/// Full pipeline (gen-data .. evaluate) into dir / name.
EvalOutcome cmd_ablate(const ExperimentConfig& cfg, const fs::path& dir, const std::string& name);

/// Evaluation over all ordered visit pairs of `patients` (copy baseline when `bundle` is null).
EvalOutcome evaluate_pairs(const integrate::ModelBundle* bundle, const cohort::Cohort& patients);

/// Trains the flow on the training patients of an already trained autoencoder.
integrate::ModelBundle fit_flow(const latent::AutoencoderParams& ae, const cohort::Cohort& train,
                                const flow::FlowConfig& fcfg, const flow::FlowTrainConfig& tcfg,
                                integrate::PredictionMode mode, const std::function<void(int, double)>& on_epoch = {});

/// Command-line entry point; returns the process exit code.
int run(int argc, const char* const* argv);

} // namespace dlfm::cli
