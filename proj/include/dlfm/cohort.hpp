#pragma once

#include "dlfm/tensor.hpp"

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace dlfm::cohort {

enum class Region : std::size_t { Ventricle = 0, Hippocampus = 1, Cortex = 2, Background = 3 };
inline constexpr std::size_t kRegionCount = 4;
inline constexpr std::array<const char*, kRegionCount> kRegionNames = {"ventricle", "hippocampus", "cortex",
                                                                       "background"};

/// Square grayscale image with pixels in [0, 1], row-major.
struct ScanImage {
    std::size_t width = 0;
    std::size_t height = 0;
    std::vector<double> pixels;

    ScanImage() = default;
    ScanImage(std::size_t w, std::size_t h, double fill = 0.0) : width(w), height(h), pixels(w * h, fill) {}

    std::size_t size() const { return pixels.size(); }
    double& at(std::size_t x, std::size_t y) { return pixels[y * width + x]; }
    double at(std::size_t x, std::size_t y) const { return pixels[y * width + x]; }
    bool operator==(const ScanImage&) const = default;
};

/// One boolean mask per region. Regions are pairwise disjoint and cover the image.
struct RegionMasks {
    std::size_t width = 0;
    std::size_t height = 0;
    std::array<std::vector<std::uint8_t>, kRegionCount> masks;

    const std::vector<std::uint8_t>& mask(Region r) const { return masks[static_cast<std::size_t>(r)]; }
    std::size_t area(Region r) const;
    bool is_partition() const;
    bool operator==(const RegionMasks&) const = default;
};

struct Visit {
    double age = 0.0;
    double severity = 0.0; ///< ground truth; never shown to models
    ScanImage image;
    RegionMasks masks;
    bool operator==(const Visit&) const = default;
};

/// Clinical status codes; the class interval is 3.
inline constexpr int kStatusCN = 0;
inline constexpr int kStatusMCI = 3;
inline constexpr int kStatusAD = 6;

struct PatientRecord {
    std::int64_t id = 0;
    int sex = 0;
    double baseline_age = 0.0;
    int status = kStatusCN;
    double progression_rate = 0.0; ///< severity units per year
    std::uint64_t anatomy_seed = 0;
    std::vector<Visit> visits;
    bool operator==(const PatientRecord&) const = default;
};

struct CohortConfig {
    std::size_t n_patients = 64;
    int min_visits = 4;
    int max_visits = 8;
    double min_baseline_age = 60.0;
    double max_baseline_age = 80.0;
    double span_years = 10.0;   ///< maximum follow-up per patient
    double min_gap_years = 0.5;
    double min_rate = 0.25;
    double max_rate = 0.75;
    double max_baseline_severity = 2.0;
    /// Rate multiplier applied after the midpoint of the follow-up span; 1 = linear.
    double late_rate_factor = 1.0;
    double noise_std = 0.002;
    std::size_t image_size = 32;
    std::uint64_t seed = 7;
    bool operator==(const CohortConfig&) const = default;
};

struct Cohort {
    CohortConfig config;
    std::vector<PatientRecord> patients;

    std::size_t scan_count() const;
    const PatientRecord& patient(std::int64_t id) const;
    bool operator==(const Cohort&) const = default;
};

struct RenderResult {
    ScanImage image;
    RegionMasks masks;
};

/// Deterministic synthetic brain slice. Ventricles grow, hippocampi shrink and
/// the cortical ring thins as severity increases.
RenderResult render_scan(std::uint64_t anatomy_seed, double severity, std::uint64_t noise_seed, double noise_std,
                         std::size_t image_size = 32);

/// Analytic shape parameters behind a rendered scan, in pixels.
struct Geometry {
    double cx = 0.0, cy = 0.0;
    double brain_rx = 0.0, brain_ry = 0.0;
    double cortex_thickness = 0.0;
    double vent_cy = 0.0, vent_a = 0.0, vent_b = 0.0;
    double hip_dx = 0.0, hip_dy = 0.0, hip_r = 0.0;
    double ventricle_area() const;
    double hippocampus_area() const; ///< per blob
};

Geometry scan_geometry(std::uint64_t anatomy_seed, double severity, std::size_t image_size = 32);

Cohort generate_cohort(const CohortConfig& config);

/// Severity at `age` for a patient with baseline severity s0.
double severity_at(const CohortConfig& config, double s0, double rate, double baseline_age, double age);

struct SplitFractions {
    double train = 0.80;
    double val = 0.05;
    double test = 0.15;
};

struct CohortSplit {
    SplitFractions fractions;
    std::uint64_t seed = 0;
    std::vector<std::int64_t> train, val, test;
};

/// Patient-level split. val and test sizes are the rounded fractions; the
/// remainder goes to train.
CohortSplit split_cohort(const Cohort& cohort, SplitFractions fractions, std::uint64_t seed);
Cohort subset(const Cohort& cohort, const std::vector<std::int64_t>& ids);

inline constexpr int kCohortFormatVersion = 1;

/// Writes `dir/cohort.json` and `dir/scans.bin`.
void save_cohort(const Cohort& cohort, const std::filesystem::path& dir);
Cohort load_cohort(const std::filesystem::path& dir);

void save_split(const CohortSplit& split, const std::filesystem::path& file);
CohortSplit load_split(const std::filesystem::path& file);

/// Run-length encoding of a boolean mask: alternating run lengths, starting with a false run.
std::vector<std::uint32_t> rle_encode(const std::vector<std::uint8_t>& mask);
std::vector<std::uint8_t> rle_decode(const std::vector<std::uint32_t>& runs, std::size_t n);

} // namespace dlfm::cohort
