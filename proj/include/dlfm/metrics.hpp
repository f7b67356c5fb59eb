#pragma once

#include "dlfm/cohort.hpp"

#include <array>
#include <cstdint>
#include <optional>
#include <span>
#include <vector>

namespace dlfm::metrics {

using cohort::RegionMasks;
using cohort::ScanImage;

inline constexpr double kPsnrCap = 999.0;

struct PsnrResult {
    double db = 0.0;
    bool exact_match = false; ///< MSE was 0; db holds the cap
};

PsnrResult psnr(const ScanImage& a, const ScanImage& b, double max_value = 1.0);

struct SsimConfig {
    std::size_t window = 7;
    double k1 = 0.01;
    double k2 = 0.03;
    double L = 1.0;
};

/// Mean local SSIM over all valid positions of a uniform square window.
double ssim(const ScanImage& a, const ScanImage& b, const SsimConfig& cfg = {});

struct RegionMae {
    std::array<std::optional<double>, cohort::kRegionCount> region; ///< empty when the region is absent
    double mean = 0.0; ///< over present anatomical regions (background excluded)
};

RegionMae region_mae(const ScanImage& gt, const ScanImage& gen, const RegionMasks& masks);

enum class RmaeForm {
    Global,   ///< sum |d_gt - d_gen| / (0.5 (sum |d_gt| + sum |d_gen|))
    PerPixel, ///< mean over pixels of the same ratio (0/0 pixels count 0)
};

/// Score on residual images. 0/0 is 0.
double delta_rmae_residuals(std::span<const double> d_gt, std::span<const double> d_gen, RmaeForm form = RmaeForm::Global);

/// Score for baseline x0, ground truth xT and prediction xT_hat.
double delta_rmae(const ScanImage& x0, const ScanImage& xT, const ScanImage& xT_hat, RmaeForm form = RmaeForm::Global);

enum class SensitivityScenario {
    Opposite,    ///< d_gt ~ N(0, 1) per pixel, d_gen = -d_gt (noiseless score 2)
    Independent, ///< d_gt, d_gen independent N(0, 1)
};

struct SensitivityConfig {
    std::vector<double> sigmas;  ///< empty = default grid
    std::size_t n_pixels = 64;
    std::size_t n_trials = 1000;
    SensitivityScenario scenario = SensitivityScenario::Opposite;
    std::uint64_t seed = 0;
};

struct SensitivityRow {
    double sigma = 0.0;
    double mean = 0.0;
    double std = 0.0;  ///< sample standard deviation over trials
    double bias = 0.0; ///< mean - noiseless value
};

/// 0.00, 0.05, ..., 1.00.
std::vector<double> default_sigma_grid();

/// Monte-Carlo over trials with common random numbers across sigma: trial k
/// draws its residuals and a unit noise field once, and sigma scales the noise.
std::vector<SensitivityRow> sensitivity_table(const SensitivityConfig& cfg);

struct MetricReport {
    std::int64_t patient_id = 0;
    double source_age = 0.0;
    double target_age = 0.0;
    double horizon = 0.0;
    PsnrResult psnr;
    double ssim = 0.0;
    RegionMae region_mae;
    double delta_rmae = 0.0;
};

/// All metrics for one prediction. `masks` belong to the ground-truth scan.
MetricReport evaluate_prediction(const ScanImage& x0, const ScanImage& xT, const ScanImage& xT_hat,
                                 const RegionMasks& masks, std::int64_t patient_id, double source_age,
                                 double target_age);

struct Stat {
    double mean = 0.0;
    double std = 0.0; ///< sample standard deviation, 0 for a single value
    std::size_t count = 0;
};

Stat summarize(const std::vector<double>& values);

struct HorizonStratum {
    long year = 0; ///< rounded horizon
    std::size_t count = 0;
    Stat psnr, ssim, region_mae, delta_rmae;
};

/// Buckets by rounded horizon year, ascending; empty buckets are omitted.
std::vector<HorizonStratum> stratify_by_horizon(const std::vector<MetricReport>& reports);

/// Overall statistics across reports, in the same layout as one stratum.
HorizonStratum summarize_reports(const std::vector<MetricReport>& reports);

/// Spearman rank correlation (average ranks for ties). 0 when either input is constant.
double spearman(const std::vector<double>& x, const std::vector<double>& y);

} // namespace dlfm::metrics
