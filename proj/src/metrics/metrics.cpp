#include "dlfm/metrics.hpp"
#include "dlfm/rng.hpp"
#include "dlfm/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>

namespace dlfm::metrics {

namespace {

void same_shape(const ScanImage& a, const ScanImage& b, const char* what)
{
    if (a.width != b.width || a.height != b.height || a.pixels.size() != b.pixels.size())
        throw ValidationError(std::string(what) + ": image shapes differ (" + std::to_string(a.width) + "x" +
                              std::to_string(a.height) + " vs " + std::to_string(b.width) + "x" +
                              std::to_string(b.height) + ")");
}

} // namespace

PsnrResult psnr(const ScanImage& a, const ScanImage& b, double max_value)
{
    same_shape(a, b, "psnr");
    if (a.pixels.empty()) throw ValidationError("psnr: empty images");
    double se = 0.0;
    for (std::size_t k = 0; k < a.pixels.size(); ++k) se += (a.pixels[k] - b.pixels[k]) * (a.pixels[k] - b.pixels[k]);
    const double mse = se / static_cast<double>(a.pixels.size());
    if (mse == 0.0) return {kPsnrCap, true};
    return {std::min(kPsnrCap, 10.0 * std::log10(max_value * max_value / mse)), false};
}

double ssim(const ScanImage& a, const ScanImage& b, const SsimConfig& cfg)
{
    same_shape(a, b, "ssim");
    const std::size_t w = cfg.window;
    if (w == 0 || a.width < w || a.height < w)
        throw ValidationError("ssim: image smaller than the " + std::to_string(w) + "x" + std::to_string(w) + " window");
    const double c1 = (cfg.k1 * cfg.L) * (cfg.k1 * cfg.L);
    const double c2 = (cfg.k2 * cfg.L) * (cfg.k2 * cfg.L);
    const double n = static_cast<double>(w * w);
    double total = 0.0;
    std::size_t count = 0;
    for (std::size_t y0 = 0; y0 + w <= a.height; ++y0)
        for (std::size_t x0 = 0; x0 + w <= a.width; ++x0) {
            double ma = 0.0, mb = 0.0;
            for (std::size_t y = y0; y < y0 + w; ++y)
                for (std::size_t x = x0; x < x0 + w; ++x) {
                    ma += a.at(x, y);
                    mb += b.at(x, y);
                }
            ma /= n;
            mb /= n;
            double va = 0.0, vb = 0.0, cov = 0.0;
            for (std::size_t y = y0; y < y0 + w; ++y)
                for (std::size_t x = x0; x < x0 + w; ++x) {
                    const double da = a.at(x, y) - ma, db = b.at(x, y) - mb;
                    va += da * da;
                    vb += db * db;
                    cov += da * db;
                }
            va /= n;
            vb /= n;
            cov /= n;
            total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            ++count;
        }
    return total / static_cast<double>(count);
}

RegionMae region_mae(const ScanImage& gt, const ScanImage& gen, const RegionMasks& masks)
{
    same_shape(gt, gen, "region_mae");
    if (masks.width != gt.width || masks.height != gt.height) throw ValidationError("region_mae: mask shape differs");
    if (!masks.is_partition()) throw ValidationError("region_mae: masks do not partition the image");
    RegionMae out;
    double sum = 0.0;
    int present = 0;
    for (std::size_t r = 0; r < cohort::kRegionCount; ++r) {
        const auto& m = masks.masks[r];
        double s = 0.0;
        std::size_t n = 0;
        for (std::size_t k = 0; k < m.size(); ++k)
            if (m[k]) {
                s += std::abs(gt.pixels[k] - gen.pixels[k]);
                ++n;
            }
        if (n == 0) continue;
        out.region[r] = s / static_cast<double>(n);
        if (static_cast<cohort::Region>(r) != cohort::Region::Background) {
            sum += *out.region[r];
            ++present;
        }
    }
    out.mean = present ? sum / present : 0.0;
    return out;
}

double delta_rmae_residuals(std::span<const double> d_gt, std::span<const double> d_gen, RmaeForm form)
{
    if (d_gt.size() != d_gen.size()) throw ValidationError("delta_rmae: residual sizes differ");
    if (form == RmaeForm::Global) {
        double num = 0.0, a = 0.0, b = 0.0;
        for (std::size_t k = 0; k < d_gt.size(); ++k) {
            num += std::abs(d_gt[k] - d_gen[k]);
            a += std::abs(d_gt[k]);
            b += std::abs(d_gen[k]);
        }
        const double den = 0.5 * (a + b);
        // Bounded by 2 in exact arithmetic; rounding can overshoot by an ulp.
        return den == 0.0 ? 0.0 : std::min(2.0, num / den);
    }
    if (d_gt.empty()) return 0.0;
    double total = 0.0;
    for (std::size_t k = 0; k < d_gt.size(); ++k) {
        const double den = 0.5 * (std::abs(d_gt[k]) + std::abs(d_gen[k]));
        if (den > 0.0) total += std::min(2.0, std::abs(d_gt[k] - d_gen[k]) / den);
    }
    return total / static_cast<double>(d_gt.size());
}

double delta_rmae(const ScanImage& x0, const ScanImage& xT, const ScanImage& xT_hat, RmaeForm form)
{
    same_shape(x0, xT, "delta_rmae");
    same_shape(x0, xT_hat, "delta_rmae");
    std::vector<double> gt(x0.pixels.size()), gen(x0.pixels.size());
    for (std::size_t k = 0; k < gt.size(); ++k) {
        gt[k] = xT.pixels[k] - x0.pixels[k];
        gen[k] = xT_hat.pixels[k] - x0.pixels[k];
    }
    return delta_rmae_residuals(gt, gen, form);
}

std::vector<double> default_sigma_grid()
{
    std::vector<double> g;
    for (int k = 0; k <= 20; ++k) g.push_back(k / 20.0);
    return g;
}

std::vector<SensitivityRow> sensitivity_table(const SensitivityConfig& cfg)
{
    const std::vector<double> sigmas = cfg.sigmas.empty() ? default_sigma_grid() : cfg.sigmas;
    if (cfg.n_trials < 1) throw ValidationError("sensitivity: n_trials must be >= 1");
    if (cfg.n_pixels < 1) throw ValidationError("sensitivity: n_pixels must be >= 1");
    for (double s : sigmas)
        if (!(s >= 0.0) || !std::isfinite(s)) throw ValidationError("sensitivity: sigma must be finite and >= 0");

    const std::size_t n = cfg.n_pixels, T = cfg.n_trials;
    // scores[s][t]; index sigmas.size() holds the noiseless run.
    std::vector<std::vector<double>> scores(sigmas.size() + 1, std::vector<double>(T));
    std::vector<double> gt(n), gen(n), eps(n), noisy(n);
    for (std::size_t t = 0; t < T; ++t) {
        Rng rng(derive_seed(cfg.seed, t));
        for (std::size_t k = 0; k < n; ++k) gt[k] = rng.normal();
        for (std::size_t k = 0; k < n; ++k)
            gen[k] = cfg.scenario == SensitivityScenario::Opposite ? -gt[k] : rng.normal();
        for (std::size_t k = 0; k < n; ++k) eps[k] = rng.normal();
        for (std::size_t s = 0; s <= sigmas.size(); ++s) {
            const double sigma = s < sigmas.size() ? sigmas[s] : 0.0;
            for (std::size_t k = 0; k < n; ++k) noisy[k] = sigma * eps[k] + gt[k];
            scores[s][t] = delta_rmae_residuals(noisy, gen);
        }
    }
    const double clean = summarize(scores.back()).mean;
    std::vector<SensitivityRow> rows;
    for (std::size_t s = 0; s < sigmas.size(); ++s) {
        const Stat st = summarize(scores[s]);
        rows.push_back({sigmas[s], st.mean, st.std, st.mean - clean});
    }
    return rows;
}

MetricReport evaluate_prediction(const ScanImage& x0, const ScanImage& xT, const ScanImage& xT_hat,
                                 const RegionMasks& masks, std::int64_t patient_id, double source_age,
                                 double target_age)
{
    MetricReport r;
    r.patient_id = patient_id;
    r.source_age = source_age;
    r.target_age = target_age;
    r.horizon = target_age - source_age;
    r.psnr = psnr(xT, xT_hat);
    r.ssim = ssim(xT, xT_hat);
    r.region_mae = region_mae(xT, xT_hat, masks);
    r.delta_rmae = delta_rmae(x0, xT, xT_hat);
    return r;
}

Stat summarize(const std::vector<double>& values)
{
    Stat s;
    s.count = values.size();
    if (values.empty()) return s;
    double sum = 0.0;
    for (double v : values) sum += v;
    s.mean = sum / static_cast<double>(values.size());
    if (values.size() > 1) {
        double ss = 0.0;
        for (double v : values) ss += (v - s.mean) * (v - s.mean);
        s.std = std::sqrt(ss / static_cast<double>(values.size() - 1));
    }
    return s;
}

namespace {

HorizonStratum stratum_of(const std::vector<const MetricReport*>& rs, long year)
{
    std::vector<double> p, s, m, d;
    for (const auto* r : rs) {
        p.push_back(r->psnr.db);
        s.push_back(r->ssim);
        m.push_back(r->region_mae.mean);
        d.push_back(r->delta_rmae);
    }
    return {year, rs.size(), summarize(p), summarize(s), summarize(m), summarize(d)};
}

} // namespace

std::vector<HorizonStratum> stratify_by_horizon(const std::vector<MetricReport>& reports)
{
    std::map<long, std::vector<const MetricReport*>> buckets;
    for (const auto& r : reports) buckets[std::lround(r.horizon)].push_back(&r);
    std::vector<HorizonStratum> out;
    for (const auto& [year, rs] : buckets) out.push_back(stratum_of(rs, year));
    return out;
}

HorizonStratum summarize_reports(const std::vector<MetricReport>& reports)
{
    std::vector<const MetricReport*> all;
    for (const auto& r : reports) all.push_back(&r);
    return stratum_of(all, 0);
}

namespace {

std::vector<double> ranks(const std::vector<double>& v)
{
    std::vector<std::size_t> idx(v.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
    std::vector<double> r(v.size());
    for (std::size_t i = 0; i < idx.size();) {
        std::size_t j = i;
        while (j + 1 < idx.size() && v[idx[j + 1]] == v[idx[i]]) ++j;
        const double avg = 0.5 * static_cast<double>(i + j) + 1.0;
        for (std::size_t k = i; k <= j; ++k) r[idx[k]] = avg;
        i = j + 1;
    }
    return r;
}

} // namespace

double spearman(const std::vector<double>& x, const std::vector<double>& y)
{
    if (x.size() != y.size()) throw ValidationError("spearman: sizes differ");
    if (x.size() < 2) return 0.0;
    const auto rx = ranks(x), ry = ranks(y);
    const double n = static_cast<double>(x.size());
    const double mean = (n + 1.0) / 2.0;
    double sxy = 0.0, sxx = 0.0, syy = 0.0;
    for (std::size_t k = 0; k < x.size(); ++k) {
        sxy += (rx[k] - mean) * (ry[k] - mean);
        sxx += (rx[k] - mean) * (rx[k] - mean);
        syy += (ry[k] - mean) * (ry[k] - mean);
    }
    if (sxx == 0.0 || syy == 0.0) return 0.0;
    return sxy / std::sqrt(sxx * syy);
}

} // namespace dlfm::metrics
