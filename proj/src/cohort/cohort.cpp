#include "dlfm/cohort.hpp"
#include "dlfm/rng.hpp"

#include <algorithm>
#include <cmath>
#include <unordered_set>

namespace dlfm::cohort {

std::size_t Cohort::scan_count() const
{
    std::size_t n = 0;
    for (const auto& p : patients) n += p.visits.size();
    return n;
}

const PatientRecord& Cohort::patient(std::int64_t id) const
{
    for (const auto& p : patients)
        if (p.id == id) return p;
    throw ValidationError("cohort: unknown patient id " + std::to_string(id));
}

double severity_at(const CohortConfig& config, double s0, double rate, double baseline_age, double age)
{
    const double dt = age - baseline_age;
    if (config.late_rate_factor == 1.0) return s0 + rate * dt;
    const double knee = 0.5 * config.span_years;
    if (dt <= knee) return s0 + rate * dt;
    return s0 + rate * knee + rate * config.late_rate_factor * (dt - knee);
}

namespace {

void validate(const CohortConfig& c)
{
    if (c.min_visits < 2 || c.max_visits > 10 || c.min_visits > c.max_visits)
        throw ValidationError("cohort: visit range must satisfy 2 <= min <= max <= 10");
    if (!(c.min_baseline_age <= c.max_baseline_age) || !(c.min_rate <= c.max_rate) || c.min_rate <= 0.0)
        throw ValidationError("cohort: age and rate ranges must be nonempty with positive rates");
    if (!(c.min_gap_years > 0.0) || !(c.span_years > 0.0))
        throw ValidationError("cohort: span and minimum gap must be positive");
    if (static_cast<double>(c.max_visits - 1) * c.min_gap_years > c.span_years)
        throw ValidationError("cohort: max visits times minimum gap exceeds the follow-up span");
    if (c.max_baseline_severity < 0.0) throw ValidationError("cohort: baseline severity bound must be >= 0");
    if (!(c.late_rate_factor > 0.0)) throw ValidationError("cohort: late rate factor must be positive");
    if (c.noise_std < 0.0 || c.noise_std > 0.1) throw ValidationError("cohort: noise_std must lie in [0, 0.1]");
    if (c.image_size < 8) throw ValidationError("cohort: image size must be at least 8");
}

} // namespace

Cohort generate_cohort(const CohortConfig& config)
{
    validate(config);
    Cohort cohort;
    cohort.config = config;
    if (config.n_patients == 0) return cohort;

    Rng rng(config.seed);
    std::vector<double> s0(config.n_patients);
    for (std::size_t k = 0; k < config.n_patients; ++k) {
        PatientRecord p;
        p.id = static_cast<std::int64_t>(k);
        p.sex = static_cast<int>(rng.integer(0, 1));
        p.baseline_age = rng.uniform(config.min_baseline_age, config.max_baseline_age);
        s0[k] = rng.uniform(0.0, config.max_baseline_severity);
        // Faster progressors tend to start sicker.
        const double frac = config.max_baseline_severity > 0.0 ? s0[k] / config.max_baseline_severity : 0.5;
        p.progression_rate = config.min_rate + (config.max_rate - config.min_rate) * (0.5 * rng.uniform() + 0.5 * frac);
        p.anatomy_seed = rng.next();

        const int n_visits = static_cast<int>(rng.integer(config.min_visits, config.max_visits));
        const double min_total = static_cast<double>(n_visits - 1) * config.min_gap_years;
        const double total = std::max(min_total, config.span_years * rng.uniform(0.6, 1.0));
        std::vector<double> w(static_cast<std::size_t>(n_visits - 1));
        double wsum = 0.0;
        for (auto& x : w) wsum += (x = rng.uniform(0.2, 1.0));

        double age = p.baseline_age;
        for (int v = 0; v < n_visits; ++v) {
            if (v > 0)
                age += config.min_gap_years + (total - min_total) * w[static_cast<std::size_t>(v - 1)] / wsum;
            Visit visit;
            visit.age = age;
            visit.severity = severity_at(config, s0[k], p.progression_rate, p.baseline_age, age);
            const auto noise_seed = derive_seed(config.seed, (k << 8) | static_cast<std::uint64_t>(v));
            auto r = render_scan(p.anatomy_seed, visit.severity, noise_seed, config.noise_std, config.image_size);
            visit.image = std::move(r.image);
            visit.masks = std::move(r.masks);
            p.visits.push_back(std::move(visit));
        }
        cohort.patients.push_back(std::move(p));
    }

    std::vector<double> sorted = s0;
    std::sort(sorted.begin(), sorted.end());
    const double q1 = sorted[sorted.size() / 3];
    const double q2 = sorted[2 * sorted.size() / 3];
    for (std::size_t k = 0; k < s0.size(); ++k)
        cohort.patients[k].status = s0[k] < q1 ? kStatusCN : (s0[k] < q2 ? kStatusMCI : kStatusAD);
    return cohort;
}

CohortSplit split_cohort(const Cohort& cohort, SplitFractions fractions, std::uint64_t seed)
{
    const double sum = fractions.train + fractions.val + fractions.test;
    if (std::abs(sum - 1.0) > 1e-9 || fractions.train < 0.0 || fractions.val < 0.0 || fractions.test < 0.0)
        throw ValidationError("split: fractions must be nonnegative and sum to 1");
    const std::size_t n = cohort.patients.size();
    const auto n_val = static_cast<std::size_t>(std::llround(fractions.val * static_cast<double>(n)));
    const auto n_test = static_cast<std::size_t>(std::llround(fractions.test * static_cast<double>(n)));
    if (fractions.test > 0.0 && n_test == 0)
        throw ValidationError("split: too few patients for a nonempty test split");
    if (n_val + n_test > n) throw ValidationError("split: too few patients for the requested fractions");

    std::vector<std::int64_t> ids;
    for (const auto& p : cohort.patients) ids.push_back(p.id);
    std::sort(ids.begin(), ids.end());
    Rng rng(seed);
    rng.shuffle(ids);

    CohortSplit s;
    s.fractions = fractions;
    s.seed = seed;
    s.test.assign(ids.begin(), ids.begin() + static_cast<long>(n_test));
    s.val.assign(ids.begin() + static_cast<long>(n_test), ids.begin() + static_cast<long>(n_test + n_val));
    s.train.assign(ids.begin() + static_cast<long>(n_test + n_val), ids.end());
    for (auto* v : {&s.train, &s.val, &s.test}) std::sort(v->begin(), v->end());
    return s;
}

Cohort subset(const Cohort& cohort, const std::vector<std::int64_t>& ids)
{
    std::unordered_set<std::int64_t> want(ids.begin(), ids.end());
    Cohort out;
    out.config = cohort.config;
    for (const auto& p : cohort.patients)
        if (want.count(p.id)) out.patients.push_back(p);
    if (out.patients.size() != want.size()) throw ValidationError("cohort: subset references unknown patient ids");
    return out;
}

} // namespace dlfm::cohort
