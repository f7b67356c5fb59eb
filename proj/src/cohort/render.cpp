#include "dlfm/cohort.hpp"
#include "dlfm/rng.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

namespace dlfm::cohort {

namespace {

constexpr double kVentGrowth = 0.14;
constexpr double kHipDecay = 0.10;
constexpr double kCortexDecay = 0.08;

struct Anatomy {
    double cx, cy, rx, ry, th0;
    double vent_dy, vent_a0, vent_b0;
    double hip_dx, hip_dy, hip_r0;
    double i_bg, i_gm, i_wm, i_csf, i_hip;
};

Anatomy sample_anatomy(std::uint64_t seed, std::size_t size)
{
    Rng rng(derive_seed(seed, 0xA7));
    const double n = static_cast<double>(size);
    Anatomy a{};
    a.cx = n / 2.0 + rng.uniform(-0.75, 0.75);
    a.cy = n / 2.0 + rng.uniform(-0.75, 0.75);
    a.rx = 0.42 * n * rng.uniform(0.95, 1.05);
    a.ry = 0.39 * n * rng.uniform(0.95, 1.05);
    a.th0 = n / 32.0 * rng.uniform(3.0, 3.6);
    a.vent_dy = n / 32.0 * rng.uniform(-1.5, -0.5);
    a.vent_a0 = n / 32.0 * rng.uniform(3.0, 3.8);
    a.vent_b0 = n / 32.0 * rng.uniform(1.8, 2.4);
    a.hip_dx = n / 32.0 * rng.uniform(5.5, 6.5);
    a.hip_dy = n / 32.0 * rng.uniform(4.5, 5.5);
    a.hip_r0 = n / 32.0 * rng.uniform(1.9, 2.3);
    a.i_bg = 0.08;
    a.i_gm = rng.uniform(0.48, 0.54);
    a.i_wm = rng.uniform(0.78, 0.84);
    a.i_csf = 0.18;
    a.i_hip = rng.uniform(0.60, 0.66);
    return a;
}

Geometry make_geometry(const Anatomy& a, double s)
{
    Geometry g;
    g.cx = a.cx;
    g.cy = a.cy;
    g.brain_rx = a.rx;
    g.brain_ry = a.ry;
    g.cortex_thickness = a.th0 * std::exp(-kCortexDecay * s);
    g.vent_cy = a.cy + a.vent_dy;
    g.vent_a = a.vent_a0 * (1.0 + kVentGrowth * s);
    g.vent_b = a.vent_b0 * (1.0 + kVentGrowth * s);
    g.hip_dx = a.hip_dx;
    g.hip_dy = a.hip_dy;
    g.hip_r = a.hip_r0 * std::exp(-kHipDecay * s);
    return g;
}

// Approximate signed distance to an axis-aligned ellipse boundary (negative inside).
double ellipse_sd(double dx, double dy, double a, double b)
{
    const double f = dx * dx / (a * a) + dy * dy / (b * b) - 1.0;
    const double gx = 2.0 * dx / (a * a);
    const double gy = 2.0 * dy / (b * b);
    const double gn = std::sqrt(gx * gx + gy * gy);
    if (gn < 1e-12) return -std::min(a, b);
    return f / gn;
}

double coverage(double sd) { return std::clamp(0.5 - sd, 0.0, 1.0); }

} // namespace

double Geometry::ventricle_area() const { return std::numbers::pi * vent_a * vent_b; }
double Geometry::hippocampus_area() const { return std::numbers::pi * hip_r * hip_r; }

Geometry scan_geometry(std::uint64_t anatomy_seed, double severity, std::size_t image_size)
{
    return make_geometry(sample_anatomy(anatomy_seed, image_size), std::max(severity, 0.0));
}

std::size_t RegionMasks::area(Region r) const
{
    const auto& m = mask(r);
    return static_cast<std::size_t>(std::count(m.begin(), m.end(), std::uint8_t{1}));
}

bool RegionMasks::is_partition() const
{
    const std::size_t n = width * height;
    for (const auto& m : masks)
        if (m.size() != n) return false;
    for (std::size_t i = 0; i < n; ++i) {
        int hits = 0;
        for (const auto& m : masks) hits += m[i] ? 1 : 0;
        if (hits != 1) return false;
    }
    return true;
}

RenderResult render_scan(std::uint64_t anatomy_seed, double severity, std::uint64_t noise_seed, double noise_std,
                         std::size_t image_size)
{
    severity = std::isfinite(severity) ? std::max(severity, 0.0) : 0.0;
    noise_std = std::isfinite(noise_std) ? std::clamp(noise_std, 0.0, 0.1) : 0.0;
    if (image_size < 8) image_size = 8;

    const Anatomy an = sample_anatomy(anatomy_seed, image_size);
    const Geometry g = make_geometry(an, severity);
    const std::size_t n = image_size;

    RenderResult out;
    out.image = ScanImage(n, n, an.i_bg);
    out.masks.width = n;
    out.masks.height = n;
    for (auto& m : out.masks.masks) m.assign(n * n, 0);

    const double hx[2] = {g.cx - g.hip_dx, g.cx + g.hip_dx};
    const double hy = g.cy + g.hip_dy;
    std::vector<std::uint8_t> hip(n * n, 0);
    std::vector<std::uint8_t> vent(n * n, 0);

    for (std::size_t y = 0; y < n; ++y) {
        for (std::size_t x = 0; x < n; ++x) {
            const double px = static_cast<double>(x) + 0.5;
            const double py = static_cast<double>(y) + 0.5;
            const double d_out = ellipse_sd(px - g.cx, py - g.cy, g.brain_rx, g.brain_ry);
            const double d_in = ellipse_sd(px - g.cx, py - g.cy, g.brain_rx - g.cortex_thickness,
                                           g.brain_ry - g.cortex_thickness);
            const double d_vent = ellipse_sd(px - g.cx, py - g.vent_cy, g.vent_a, g.vent_b);
            double d_hip = 1e9;
            for (double c : hx) d_hip = std::min(d_hip, std::hypot(px - c, py - hy) - g.hip_r);

            double v = an.i_bg;
            v += (an.i_gm - v) * coverage(d_out);
            v += (an.i_wm - v) * coverage(d_in);
            v += (an.i_hip - v) * coverage(d_hip);
            v += (an.i_csf - v) * coverage(d_vent);
            out.image.at(x, y) = v;

            const std::size_t i = y * n + x;
            if (d_vent < 0.0) vent[i] = 1;
            if (d_hip < 0.0) hip[i] = 1;
            if (d_out < 0.0 && d_in >= 0.0) out.masks.masks[static_cast<std::size_t>(Region::Cortex)][i] = 1;
        }
    }

    // Each hippocampal blob keeps at least its centre pixel.
    for (double c : hx) {
        const auto x = static_cast<std::size_t>(std::clamp(std::floor(c), 0.0, static_cast<double>(n - 1)));
        const auto y = static_cast<std::size_t>(std::clamp(std::floor(hy), 0.0, static_cast<double>(n - 1)));
        hip[y * n + x] = 1;
    }

    auto& m_vent = out.masks.masks[static_cast<std::size_t>(Region::Ventricle)];
    auto& m_hip = out.masks.masks[static_cast<std::size_t>(Region::Hippocampus)];
    auto& m_ctx = out.masks.masks[static_cast<std::size_t>(Region::Cortex)];
    auto& m_bg = out.masks.masks[static_cast<std::size_t>(Region::Background)];
    for (std::size_t i = 0; i < n * n; ++i) {
        if (vent[i]) {
            m_vent[i] = 1;
            m_ctx[i] = 0;
        } else if (hip[i]) {
            m_hip[i] = 1;
            m_ctx[i] = 0;
        }
        if (!m_vent[i] && !m_hip[i] && !m_ctx[i]) m_bg[i] = 1;
    }

    if (noise_std > 0.0) {
        Rng rng(noise_seed);
        for (auto& p : out.image.pixels) p += noise_std * rng.normal();
    }
    // Stored as float32 on disk, so quantize here to keep round-trips exact.
    for (auto& p : out.image.pixels) p = static_cast<double>(static_cast<float>(std::clamp(p, 0.0, 1.0)));
    return out;
}

} // namespace dlfm::cohort
