#include "doctest.h"

#include "dlfm/metrics.hpp"
#include "dlfm/rng.hpp"

#include <cmath>
#include <random>

using namespace dlfm;
using namespace dlfm::metrics;

namespace {

ScanImage filled(std::size_t n, double v) { return ScanImage(n, n, v); }

ScanImage random_image(std::size_t n, Rng& rng, double lo = 0.0, double hi = 1.0)
{
    ScanImage im(n, n);
    for (auto& p : im.pixels) p = rng.uniform(lo, hi);
    return im;
}

// Brute-force SSIM for one window position, written out from the definition.
double ssim_window(const ScanImage& a, const ScanImage& b, std::size_t x0, std::size_t y0)
{
    std::vector<double> va, vb;
    for (std::size_t y = y0; y < y0 + 7; ++y)
        for (std::size_t x = x0; x < x0 + 7; ++x) {
            va.push_back(a.at(x, y));
            vb.push_back(b.at(x, y));
        }
    auto mean = [](const std::vector<double>& v) {
        double s = 0.0;
        for (double x : v) s += x;
        return s / static_cast<double>(v.size());
    };
    const double ma = mean(va), mb = mean(vb);
    double sa = 0.0, sb = 0.0, sab = 0.0;
    for (std::size_t k = 0; k < va.size(); ++k) {
        sa += (va[k] - ma) * (va[k] - ma) / 49.0;
        sb += (vb[k] - mb) * (vb[k] - mb) / 49.0;
        sab += (va[k] - ma) * (vb[k] - mb) / 49.0;
    }
    const double c1 = 1e-4, c2 = 9e-4;
    const double l = (2 * ma * mb + c1) / (ma * ma + mb * mb + c1);
    const double cs = (2 * sab + c2) / (sa + sb + c2);
    return l * cs;
}

RegionMasks quadrant_masks(std::size_t n)
{
    RegionMasks m{n, n, {}};
    for (auto& mask : m.masks) mask.assign(n * n, 0);
    for (std::size_t y = 0; y < n; ++y)
        for (std::size_t x = 0; x < n; ++x) {
            const std::size_t r = (y < n / 2 ? 0 : 2) + (x < n / 2 ? 0 : 1);
            m.masks[r][y * n + x] = 1;
        }
    return m;
}

} // namespace

TEST_CASE("psnr: exact match sentinel and formula values")
{
    Rng rng(1);
    ScanImage a = random_image(16, rng);
    auto same = psnr(a, a);
    CHECK(same.exact_match);
    CHECK(same.db == kPsnrCap);

    auto p40 = psnr(filled(8, 0.5), filled(8, 0.51));
    CHECK_FALSE(p40.exact_match);
    CHECK(p40.db == doctest::Approx(40.0).epsilon(1e-9));
    CHECK(psnr(filled(8, 0.2), filled(8, 0.3)).db == doctest::Approx(20.0).epsilon(1e-9));
    CHECK(psnr(filled(8, 0.0), filled(8, 2.0), 2.0).db == doctest::Approx(0.0));
    CHECK_THROWS_AS(psnr(filled(8, 0.0), filled(9, 0.0)), ValidationError);
}

TEST_CASE("ssim: optimum, brute-force oracle, contrast inversion and constant images")
{
    Rng rng(2);
    ScanImage a = random_image(12, rng), b = random_image(12, rng);
    CHECK(ssim(a, a) == 1.0);

    double brute = 0.0;
    for (std::size_t y = 0; y < 6; ++y)
        for (std::size_t x = 0; x < 6; ++x) brute += ssim_window(a, b, x, y);
    CHECK(ssim(a, b) == doctest::Approx(brute / 36.0).epsilon(1e-12));

    ScanImage checker(16, 16);
    for (std::size_t y = 0; y < 16; ++y)
        for (std::size_t x = 0; x < 16; ++x) checker.pixels[y * 16 + x] = (x + y) % 2 ? 0.95 : 0.05;
    ScanImage inv = checker;
    for (auto& p : inv.pixels) p = 1.0 - p;
    CHECK(ssim(checker, inv) < 0.0);

    const double s = ssim(filled(10, 0.3), filled(10, 0.6));
    CHECK(s > 0.0);
    CHECK(s < 1.0);
    // Constant images: the structure term is c2/c2 = 1, the luminance term is all that is left.
    CHECK(s == doctest::Approx((2 * 0.18 + 1e-4) / (0.09 + 0.36 + 1e-4)).epsilon(1e-12));

    CHECK_THROWS_AS(ssim(filled(6, 0.0), filled(6, 0.0)), ValidationError);
    CHECK_THROWS_AS(ssim(filled(8, 0.0), filled(9, 0.0)), ValidationError);
}

TEST_CASE("region_mae: constant residual, confined residual, absent region")
{
    RegionMasks m = quadrant_masks(8);
    ScanImage gt = filled(8, 0.4);
    auto zero = region_mae(gt, gt, m);
    for (const auto& r : zero.region) CHECK(*r == 0.0);
    CHECK(zero.mean == 0.0);

    auto uni = region_mae(gt, filled(8, 0.6), m);
    for (const auto& r : uni.region) CHECK(*r == doctest::Approx(0.2).epsilon(1e-12));
    CHECK(uni.mean == doctest::Approx(0.2).epsilon(1e-12));

    ScanImage gen = gt;
    for (std::size_t k = 0; k < 64; ++k)
        if (m.masks[0][k]) gen.pixels[k] += 0.3;
    auto vent = region_mae(gt, gen, m);
    CHECK(*vent.region[0] == doctest::Approx(0.3));
    CHECK(*vent.region[1] == 0.0);
    CHECK(*vent.region[2] == 0.0);
    CHECK(*vent.region[3] == 0.0);
    CHECK(vent.mean == doctest::Approx(0.1));

    // Merge the hippocampus quadrant into background: absent and excluded.
    RegionMasks m2 = m;
    for (std::size_t k = 0; k < 64; ++k)
        if (m2.masks[1][k]) {
            m2.masks[1][k] = 0;
            m2.masks[3][k] = 1;
        }
    auto absent = region_mae(gt, gen, m2);
    CHECK_FALSE(absent.region[1].has_value());
    CHECK(absent.mean == doctest::Approx(0.15));

    RegionMasks broken = m;
    broken.masks[0][0] = 0;
    CHECK_THROWS_AS(region_mae(gt, gen, broken), ValidationError);
}

TEST_CASE("delta_rmae: endpoint values and hand example")
{
    Rng rng(3);
    ScanImage x0 = random_image(8, rng), xT = random_image(8, rng);
    CHECK(delta_rmae(x0, xT, xT) == 0.0);
    CHECK(delta_rmae(x0, xT, x0) == 2.0);
    CHECK(delta_rmae(x0, x0, x0) == 0.0);

    const std::vector<double> gt = {1.0, -1.0, 0.0}, gen = {0.5, -0.5, 0.0};
    CHECK(delta_rmae_residuals(gt, gen) == doctest::Approx(2.0 / 3.0).epsilon(1e-15));
    CHECK(delta_rmae_residuals(std::vector<double>{0, 0}, std::vector<double>{0, 0}) == 0.0);
    // Per-pixel form: (2/3 + 2/3 + 0) / 3.
    CHECK(delta_rmae_residuals(gt, gen, RmaeForm::PerPixel) == doctest::Approx(4.0 / 9.0).epsilon(1e-15));
    CHECK_THROWS_AS(delta_rmae_residuals(gt, std::vector<double>{1.0}), ValidationError);
    CHECK_THROWS_AS(delta_rmae(x0, filled(9, 0.0), x0), ValidationError);
}

TEST_CASE("delta_rmae: range, scale invariance and symmetry on 10^4 fuzzed pairs")
{
    Rng rng(4);
    for (int k = 0; k < 10000; ++k) {
        const std::size_t n = static_cast<std::size_t>(rng.integer(1, 40));
        std::vector<double> a(n), b(n);
        const int kind = k % 4;
        for (std::size_t i = 0; i < n; ++i) {
            a[i] = rng.normal();
            b[i] = kind == 0 ? -a[i] : kind == 1 ? 0.0 : rng.normal() * std::exp(rng.uniform(-5, 5));
            if (kind == 3 && rng.uniform() < 0.5) a[i] = 0.0;
        }
        const double s = delta_rmae_residuals(a, b);
        CHECK((s >= 0.0 && s <= 2.0));
        CHECK(delta_rmae_residuals(b, a) == s);
        const double c = std::ldexp(1.0, static_cast<int>(rng.integer(-20, 20)));
        std::vector<double> ca(n), cb(n);
        for (std::size_t i = 0; i < n; ++i) {
            ca[i] = c * a[i];
            cb[i] = c * b[i];
        }
        CHECK(delta_rmae_residuals(ca, cb) == s);
        const double g = rng.uniform(0.01, 100.0);
        for (std::size_t i = 0; i < n; ++i) {
            ca[i] = g * a[i];
            cb[i] = g * b[i];
        }
        CHECK(delta_rmae_residuals(ca, cb) == doctest::Approx(s).epsilon(1e-13));
        const double pp = delta_rmae_residuals(a, b, RmaeForm::PerPixel);
        CHECK((pp >= 0.0 && pp <= 2.0));
    }

    // Image level: x0 = 0 makes the residuals the images themselves.
    ScanImage x0 = filled(8, 0.0), xT = random_image(8, rng, -1, 1), xh = random_image(8, rng, -1, 1);
    ScanImage sT = xT, sh = xh;
    for (auto& p : sT.pixels) p *= 0.25;
    for (auto& p : sh.pixels) p *= 0.25;
    CHECK(delta_rmae(x0, sT, sh) == delta_rmae(x0, xT, xh));
}

TEST_CASE("sensitivity_table: anchors and monotone trends on the default grid")
{
    auto rows = sensitivity_table({});
    REQUIRE(rows.size() == 21);
    CHECK(rows[0].sigma == 0.0);
    CHECK(rows[0].mean == 2.0);
    CHECK(rows[0].std == 0.0);
    CHECK(rows[0].bias == 0.0);
    CHECK(rows[20].sigma == 1.0);
    for (std::size_t k = 1; k < rows.size(); ++k) {
        CHECK(rows[k].mean < rows[k - 1].mean);
        CHECK(rows[k].std > rows[k - 1].std);
        CHECK(rows[k].bias == rows[k].mean - 2.0);
    }
    SensitivityConfig c;
    c.seed = 9;
    CHECK(sensitivity_table(c)[5].mean == sensitivity_table(c)[5].mean);
    c.n_trials = 0;
    CHECK_THROWS_AS(sensitivity_table(c), ValidationError);
    c.n_trials = 10;
    c.sigmas = {-0.1};
    CHECK_THROWS_AS(sensitivity_table(c), ValidationError);

    SensitivityConfig ind;
    ind.scenario = SensitivityScenario::Independent;
    ind.sigmas = {0.0, 0.5};
    ind.n_trials = 200;
    auto r = sensitivity_table(ind);
    CHECK(r[0].bias == 0.0);
    CHECK(r[0].std > 0.0);
}

TEST_CASE("sensitivity_table: sigma = 1 agrees with an independent Monte-Carlo oracle")
{
    // Oracle: separate engine and distribution, 20000 trials x 64 pixels.
    std::mt19937_64 eng(20240601);
    std::normal_distribution<double> nd(0.0, 1.0);
    const int trials = 20000, n = 64;
    double s = 0.0, s2 = 0.0;
    for (int t = 0; t < trials; ++t) {
        double num = 0.0, a = 0.0, b = 0.0;
        for (int i = 0; i < n; ++i) {
            const double gt = nd(eng), mis = nd(eng);
            const double gen = -gt;
            num += std::abs(mis + gt - gen);
            a += std::abs(mis + gt);
            b += std::abs(gen);
        }
        const double v = num / (0.5 * (a + b));
        s += v;
        s2 += v * v;
    }
    const double om = s / trials;
    const double osd = std::sqrt(s2 / trials - om * om);

    SensitivityConfig c;
    c.sigmas = {1.0};
    c.n_trials = 20000;
    c.seed = 3;
    auto row = sensitivity_table(c)[0];
    const double se = std::sqrt(osd * osd / trials + row.std * row.std / c.n_trials);
    CHECK(std::abs(row.mean - om) < 4.0 * se);
    CHECK(row.std == doctest::Approx(osd).epsilon(0.05));
}

TEST_CASE("stratify_by_horizon, summarize and spearman")
{
    auto rep = [](double h, double d) {
        MetricReport r;
        r.horizon = h;
        r.delta_rmae = d;
        r.psnr.db = 30.0;
        return r;
    };
    auto one = stratify_by_horizon({rep(1.1, 0.5), rep(0.9, 0.7), rep(1.4, 0.6)});
    REQUIRE(one.size() == 1);
    CHECK(one[0].year == 1);
    CHECK(one[0].count == 3);
    CHECK(one[0].delta_rmae.mean == doctest::Approx(0.6));
    CHECK(one[0].delta_rmae.std == doctest::Approx(0.1));

    auto many = stratify_by_horizon({rep(3.0, 0.9), rep(1.0, 0.5), rep(6.2, 1.1)});
    REQUIRE(many.size() == 3);
    CHECK(many[0].year == 1);
    CHECK(many[1].year == 3);
    CHECK(many[2].year == 6);
    for (const auto& s : many) CHECK(s.delta_rmae.std == 0.0);
    CHECK(stratify_by_horizon({}).empty());
    CHECK(summarize_reports({rep(1, 0.2), rep(2, 0.4)}).delta_rmae.mean == doctest::Approx(0.3));

    CHECK(spearman({1, 2, 3, 4}, {10, 20, 30, 40}) == doctest::Approx(1.0));
    CHECK(spearman({1, 2, 3, 4}, {4, 3, 2, 1}) == doctest::Approx(-1.0));
    CHECK(spearman({1, 2, 3}, {5, 5, 5}) == 0.0);
    // Ties get average ranks: x ranks 1, 2.5, 2.5, 4.
    CHECK(spearman({1, 2, 2, 3}, {1, 2, 3, 4}) == doctest::Approx(0.9486832980505138));
    CHECK_THROWS_AS(spearman({1, 2}, {1}), ValidationError);
}
