#include "dlfm/integrate.hpp"

#include <algorithm>
#include <cmath>

namespace dlfm::integrate {

std::size_t step_count(double t_i, double t_j, double dt)
{
    if (!(dt > 0.0) || !std::isfinite(dt)) throw ValidationError("euler: dt must be positive");
    if (!(t_j > t_i)) throw ValidationError("euler: target age must be after the source age");
    const double n = std::ceil((t_j - t_i) / dt - 1e-9);
    return std::max<std::size_t>(1, static_cast<std::size_t>(n));
}

namespace {

void check_finite(const Tensor& z, std::size_t step)
{
    for (double v : z.storage())
        if (!std::isfinite(v)) throw NumericError("euler: non-finite state at step " + std::to_string(step));
}

// z <- z + h v (+ sigma sqrt(h) xi)
void advance(Tensor& z, const Tensor& v, double h, const EulerOptions& opt, Rng* rng)
{
    if (v.size() != z.size()) throw ValidationError("euler: velocity size does not match the state");
    const double noise = opt.sde_sigma > 0.0 ? opt.sde_sigma * std::sqrt(h) : 0.0;
    if (noise > 0.0 && !rng) throw ValidationError("euler: SDE integration needs an rng");
    for (std::size_t k = 0; k < z.size(); ++k) {
        z[k] += h * v[k];
        if (noise > 0.0) z[k] += noise * rng->normal();
    }
}

} // namespace

Tensor euler_segment(const VelocityFn& v, Tensor z, double t_from, double t_to, Anchors anchors,
                     const EulerOptions& opt, Rng* rng, std::size_t* steps)
{
    if (!(opt.sde_sigma >= 0.0)) throw ValidationError("euler: sde_sigma must be nonnegative");
    const std::size_t n = step_count(t_from, t_to, opt.dt);
    for (std::size_t k = 0; k < n; ++k) {
        const double t = t_from + static_cast<double>(k) * opt.dt;
        const double next = k + 1 == n ? t_to : t_from + static_cast<double>(k + 1) * opt.dt;
        advance(z, v(z, anchors.start, t, anchors.end), next - t, opt, rng);
        check_finite(z, k);
    }
    if (steps) *steps = n;
    return z;
}

Tensor euler_integrate(const VelocityFn& v, const Tensor& z, double t_i, double t_j, const EulerOptions& opt)
{
    Rng rng(opt.noise_seed);
    return euler_segment(v, z, t_i, t_j, {t_i, t_j}, opt, &rng);
}

EulerPath euler_path(const VelocityFn& v, const Tensor& z0, double t0, const std::vector<double>& ages,
                     const EulerOptions& opt)
{
    if (ages.empty()) throw ValidationError("euler: no snapshot ages");
    if (!(opt.sde_sigma >= 0.0)) throw ValidationError("euler: sde_sigma must be nonnegative");
    double prev = t0;
    for (double a : ages) {
        if (!(a > prev)) throw ValidationError("euler: snapshot ages must be increasing and after the source age");
        prev = a;
    }
    step_count(t0, ages.front(), opt.dt); // validates dt

    Rng rng(opt.noise_seed);
    EulerPath path;
    if (opt.reanchor_segments) {
        // Each segment restarts from the previous snapshot with its own anchors.
        Tensor z = z0;
        double t = t0;
        for (double a : ages) {
            std::size_t n = 0;
            z = euler_segment(v, z, t, a, {t, a}, opt, &rng, &n);
            path.states.push_back(z);
            path.steps.push_back(n);
            t = a;
        }
        return path;
    }

    // One pass on the grid t0 + k dt. A snapshot is a shortened step off the
    // current grid state, so it matches a fresh integration to the same age and
    // does not perturb the rest of the path.
    const Anchors anchors{t0, ages.back()};
    Tensor z = z0;
    std::size_t k = 0, done = 0;
    for (double a : ages) {
        const std::size_t n = step_count(t0, a, opt.dt);
        for (; k + 1 < n; ++k) {
            const double t = t0 + static_cast<double>(k) * opt.dt;
            advance(z, v(z, anchors.start, t, anchors.end), t0 + static_cast<double>(k + 1) * opt.dt - t, opt, &rng);
            check_finite(z, k);
        }
        const double t = t0 + static_cast<double>(k) * opt.dt;
        Tensor snap = z;
        advance(snap, v(z, anchors.start, t, anchors.end), a - t, opt, &rng);
        check_finite(snap, k);
        path.states.push_back(std::move(snap));
        path.steps.push_back(n - done);
        done = n;
    }
    return path;
}

VelocityFn model_velocity(const ModelBundle& bundle, const flow::Attributes& attrs)
{
    const auto& cfg = bundle.flow.config;
    return [&bundle, &cfg, attrs](const Tensor& z, double t_start, double t_current, double t_end) {
        Tensor c = flow::make_condition(cfg, attrs, t_start, t_current, t_end, false, nullptr);
        Tensor out = flow::velocity(bundle.flow, z, c);
        if (cfg.sampling_mode == flow::SamplingMode::Physical) {
            const double span = t_end - t_start;
            for (auto& x : out.storage()) x /= span;
        }
        return out;
    };
}

namespace {

EulerOptions options_of(const ModelBundle& b, std::uint64_t seed)
{
    const auto& c = b.flow.config;
    return {c.dt, c.sde_sigma, seed, c.reanchor_segments};
}

Tensor source_latent(const ModelBundle& b, const cohort::ScanImage& source)
{
    if (b.flow.config.latent_dim != b.ae.config.latent_dim())
        throw ValidationError("bundle: flow latent size does not match the autoencoder");
    const Tensor mean = latent::encode(b.ae, source).mean;
    return b.normalizer.apply(mean.reshaped({mean.size()}));
}

TrajectoryPrediction render(const ModelBundle& b, const cohort::ScanImage& source, double source_age,
                            const std::vector<double>& ages, const std::vector<Tensor>& states,
                            std::vector<std::size_t> steps)
{
    const auto& ac = b.ae.config;
    TrajectoryPrediction out;
    out.source_age = source_age;
    out.query_ages = ages;
    out.steps = std::move(steps);
    cohort::ScanImage base;
    if (b.mode == PredictionMode::Residual) base = latent::decode(b.ae, latent::encode(b.ae, source).mean);
    for (const auto& s : states) {
        Tensor z = b.normalizer.invert(s).reshaped({ac.latent_rows, ac.latent_cols});
        cohort::ScanImage img = latent::decode(b.ae, z);
        if (b.mode == PredictionMode::Residual)
            for (std::size_t k = 0; k < img.pixels.size(); ++k)
                img.pixels[k] = std::clamp(source.pixels[k] + (img.pixels[k] - base.pixels[k]), 0.0, 1.0);
        out.latents.push_back(std::move(z));
        out.images.push_back(std::move(img));
    }
    return out;
}

} // namespace

TrajectoryPrediction predict_followup(const ModelBundle& bundle, const cohort::ScanImage& source, double source_age,
                                      const flow::Attributes& attrs, double target_age, std::uint64_t noise_seed)
{
    if (!(target_age > source_age)) throw ValidationError("predict: target age must be after the source age");
    const Tensor z0 = source_latent(bundle, source);
    const EulerOptions opt = options_of(bundle, noise_seed);
    Rng rng(noise_seed);
    std::size_t steps = 0;
    Tensor z = euler_segment(model_velocity(bundle, attrs), z0, source_age, target_age, {source_age, target_age},
                             opt, &rng, &steps);
    return render(bundle, source, source_age, {target_age}, {z}, {steps});
}

TrajectoryPrediction predict_trajectory(const ModelBundle& bundle, const cohort::ScanImage& source, double source_age,
                                        const flow::Attributes& attrs, double horizon_years, double interval_years,
                                        std::uint64_t noise_seed)
{
    if (!(horizon_years > 0.0) || !(interval_years > 0.0))
        throw ValidationError("predict: horizon and interval must be positive");
    std::vector<double> ages;
    const double tol = 1e-9 * interval_years;
    for (std::size_t k = 1;; ++k) {
        const double off = static_cast<double>(k) * interval_years;
        if (off > horizon_years + tol) break;
        ages.push_back(source_age + std::min(off, horizon_years));
    }
    if (ages.empty() || ages.back() < source_age + horizon_years - tol) ages.push_back(source_age + horizon_years);
    const Tensor z0 = source_latent(bundle, source);
    EulerPath path = euler_path(model_velocity(bundle, attrs), z0, source_age, ages, options_of(bundle, noise_seed));
    return render(bundle, source, source_age, ages, path.states, std::move(path.steps));
}

} // namespace dlfm::integrate
