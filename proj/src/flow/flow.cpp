#include "dlfm/flow.hpp"
#include "dlfm/ops.hpp"

#include <cmath>

namespace dlfm::flow {

using namespace dlfm::grad;

void FlowConfig::validate() const
{
    if (!(dt > 0.0) || !std::isfinite(dt)) throw ValidationError("flow: dt must be positive");
    if (!(sde_sigma >= 0.0)) throw ValidationError("flow: sde_sigma must be nonnegative");
    if (embed_dim < 2 || embed_dim % 2 != 0) throw ValidationError("flow: embed_dim must be even and >= 2");
    if (!(status_noise_std >= 0.0)) throw ValidationError("flow: status_noise_std must be nonnegative");
    if (latent_dim == 0 || hidden == 0 || cond_hidden == 0) throw ValidationError("flow: network widths must be positive");
}

Tensor sinusoidal_embed(double t, std::size_t dim)
{
    if (dim < 2 || dim % 2 != 0) throw ValidationError("sinusoidal_embed: dim must be even and >= 2");
    Tensor e({dim});
    for (std::size_t k = 0; k < dim / 2; ++k) {
        const double w = std::pow(10000.0, -2.0 * static_cast<double>(k) / static_cast<double>(dim));
        e[2 * k] = std::sin(t * w);
        e[2 * k + 1] = std::cos(t * w);
    }
    return e;
}

Tensor make_condition(const FlowConfig& cfg, const Attributes& attrs, double t_start, double t_current, double t_end,
                      bool training, Rng* rng)
{
    constexpr double tol = 1e-9;
    if (!(t_start <= t_current + tol) || !(t_current <= t_end + tol))
        throw ValidationError("make_condition: times must satisfy start <= current <= end");
    const double span = t_end - t_start;
    const double elapsed = t_current - t_start;
    const double flow_time =
        cfg.sampling_mode == SamplingMode::Temporal ? elapsed : (span > 0.0 ? elapsed / span : 0.0);

    std::vector<double> c;
    c.reserve(cfg.condition_width());
    for (double t : {t_start - attrs.baseline_age, flow_time, t_end - attrs.baseline_age}) {
        const Tensor e = sinusoidal_embed(t, cfg.embed_dim);
        c.insert(c.end(), e.storage().begin(), e.storage().end());
    }
    if (cfg.conditioning_enabled) {
        double status = attrs.status;
        if (training) {
            if (!rng) throw ValidationError("make_condition: training mode needs an rng");
            status += cfg.status_noise_std * rng->normal();
        }
        c.push_back(static_cast<double>(attrs.sex));
        c.push_back(attrs.baseline_age / 100.0);
        c.push_back(status);
    }
    return Tensor::vector(std::move(c));
}

VelocityNetParams init_velocity_net(const FlowConfig& cfg, std::uint64_t seed)
{
    cfg.validate();
    Rng rng(seed);
    VelocityNetParams net;
    net.config = cfg;
    auto& ps = net.params;
    const std::size_t H = cfg.hidden, Hc = cfg.cond_hidden, L = cfg.latent_dim;
    ps.add("cond.w", glorot(cfg.condition_width(), Hc, rng));
    ps.add("cond.b", Tensor({Hc}));
    ps.add("l0.w", glorot(L, H, rng));
    ps.add("l0.b", Tensor({H}));
    ps.add("l1.w", glorot(H, H, rng));
    ps.add("l1.b", Tensor({H}));
    for (const char* l : {"l0", "l1"}) {
        // Zero generators: modulation starts as the identity.
        ps.add(std::string(l) + ".scale.w", Tensor({Hc, H}));
        ps.add(std::string(l) + ".scale.b", Tensor({H}));
        ps.add(std::string(l) + ".shift.w", Tensor({Hc, H}));
        ps.add(std::string(l) + ".shift.b", Tensor({H}));
    }
    ps.add("out.w", glorot(H, L, rng));
    ps.add("out.b", Tensor({L}));
    return net;
}

Var adaln_modulate(const BoundParams& p, const std::string& layer, Var h, Var c)
{
    if (h.shape().size() != 2 || c.shape().size() != 2 || h.shape()[0] != c.shape()[0])
        throw ValidationError("adaln_modulate: activations and condition must have matching rows");
    Var n = layer_norm_rows(h, 1e-5);
    Var scale = add_scalar(add_rowwise(matmul(c, p[layer + ".scale.w"]), p[layer + ".scale.b"]), 1.0);
    Var shift = add_rowwise(matmul(c, p[layer + ".shift.w"]), p[layer + ".shift.b"]);
    return n * scale + shift;
}

Var velocity_forward(const BoundParams& p, const FlowConfig& cfg, Var z, Var cond, bool modulate)
{
    if (z.shape().size() != 2 || z.shape()[1] != cfg.latent_dim)
        throw ValidationError("velocity: expected B x " + std::to_string(cfg.latent_dim) + " states, got " +
                              shape_str(z.shape()));
    if (cond.shape() != Shape{z.shape()[0], cfg.condition_width()})
        throw ValidationError("velocity: expected B x " + std::to_string(cfg.condition_width()) + " conditions, got " +
                              shape_str(cond.shape()));
    Var c = silu(add_rowwise(matmul(cond, p["cond.w"]), p["cond.b"]));
    Var h = z;
    for (const std::string l : {"l0", "l1"}) {
        h = add_rowwise(matmul(h, p[l + ".w"]), p[l + ".b"]);
        h = modulate ? adaln_modulate(p, l, h, c) : layer_norm_rows(h, 1e-5);
        h = silu(h);
    }
    return add_rowwise(matmul(h, p["out.w"]), p["out.b"]);
}

Tensor velocity(const VelocityNetParams& net, const Tensor& z, const Tensor& cond)
{
    const auto& cfg = net.config;
    if (z.size() != cfg.latent_dim) throw ValidationError("velocity: latent has " + std::to_string(z.size()) +
                                                          " entries, expected " + std::to_string(cfg.latent_dim));
    if (cond.size() != cfg.condition_width()) throw ValidationError("velocity: condition width mismatch");
    Tape tape;
    BoundParams p(tape, net.params, false);
    Var v = velocity_forward(p, cfg, tape.constant(z.reshaped({1, cfg.latent_dim})),
                             tape.constant(cond.reshaped({1, cond.size()})));
    return v.value().reshaped(z.shape());
}

FMSample fm_sample_at(const Tensor& z_i, const Tensor& z_j, double t_i, double t_j, SamplingMode mode, double t)
{
    if (!(t_j > t_i)) throw ValidationError("fm_training_sample: requires t_j > t_i");
    if (z_i.shape() != z_j.shape()) throw ValidationError("fm_training_sample: latent shape mismatch");
    FMSample s;
    s.T = t_j - t_i;
    s.t = t;
    const double frac = mode == SamplingMode::Temporal ? t / s.T : t;
    const double denom = mode == SamplingMode::Temporal ? s.T : 1.0;
    s.z_t = Tensor(z_i.shape());
    s.v_target = Tensor(z_i.shape());
    for (std::size_t k = 0; k < z_i.size(); ++k) {
        s.z_t[k] = (1.0 - frac) * z_i[k] + frac * z_j[k];
        s.v_target[k] = (z_j[k] - z_i[k]) / denom;
    }
    return s;
}

FMSample fm_training_sample(const Tensor& z_i, const Tensor& z_j, double t_i, double t_j, SamplingMode mode, Rng& rng)
{
    if (!(t_j > t_i)) throw ValidationError("fm_training_sample: requires t_j > t_i");
    const double t = mode == SamplingMode::Temporal ? rng.uniform(0.0, t_j - t_i) : rng.uniform();
    return fm_sample_at(z_i, z_j, t_i, t_j, mode, t);
}

Var fm_loss(const BoundParams& p, const FlowConfig& cfg, Var z_t, Var cond, const Tensor& v_target)
{
    const std::size_t B = z_t.shape()[0];
    if (B == 0) throw ValidationError("fm_loss: empty batch");
    if (v_target.shape() != z_t.shape()) throw ValidationError("fm_loss: target shape mismatch");
    Var v = velocity_forward(p, cfg, z_t, cond);
    Var loss = scale(sum(square(v - z_t.tape().constant(v_target))), 1.0 / static_cast<double>(B));
    if (!std::isfinite(loss.value().item())) throw NumericError("fm_loss: non-finite loss");
    return loss;
}

Tensor LatentNormalizer::apply(const Tensor& z) const
{
    if (z.size() != mean.size()) throw ValidationError("normalizer: latent size mismatch");
    Tensor out(z.shape());
    for (std::size_t k = 0; k < z.size(); ++k) out[k] = (z[k] - mean[k]) / scale;
    return out;
}

Tensor LatentNormalizer::invert(const Tensor& z) const
{
    if (z.size() != mean.size()) throw ValidationError("normalizer: latent size mismatch");
    Tensor out(z.shape());
    for (std::size_t k = 0; k < z.size(); ++k) out[k] = z[k] * scale + mean[k];
    return out;
}

LatentNormalizer fit_normalizer(const std::vector<EncodedPatient>& patients)
{
    std::size_t n = 0, L = 0;
    for (const auto& p : patients)
        for (const auto& z : p.latents) {
            if (L == 0) L = z.size();
            if (z.size() != L) throw ValidationError("fit_normalizer: inconsistent latent sizes");
            ++n;
        }
    if (n == 0) throw ValidationError("fit_normalizer: no latents");
    LatentNormalizer norm;
    norm.mean = Tensor({L});
    for (const auto& p : patients)
        for (const auto& z : p.latents)
            for (std::size_t k = 0; k < L; ++k) norm.mean[k] += z[k];
    for (auto& m : norm.mean.storage()) m /= static_cast<double>(n);
    double var = 0.0;
    for (const auto& p : patients)
        for (const auto& z : p.latents)
            for (std::size_t k = 0; k < L; ++k) var += (z[k] - norm.mean[k]) * (z[k] - norm.mean[k]);
    var /= static_cast<double>(n * L);
    norm.scale = var > 0.0 ? std::sqrt(var) : 1.0;
    return norm;
}

FlowTrainResult train_flow(const std::vector<EncodedPatient>& patients, const FlowConfig& cfg,
                           const FlowTrainConfig& train, const std::function<void(int, double)>& on_epoch)
{
    cfg.validate();
    if (train.batch_size == 0 || train.epochs < 0 || train.samples_per_pair < 1)
        throw ValidationError("train_flow: bad batch size, epochs or samples_per_pair");

    struct Pair {
        std::size_t p, i, j;
    };
    std::vector<Pair> pairs;
    for (std::size_t p = 0; p < patients.size(); ++p) {
        const auto& ep = patients[p];
        if (ep.ages.size() != ep.latents.size()) throw ValidationError("train_flow: ages and latents misaligned");
        if (ep.latents.size() < 2)
            throw ValidationError("train_flow: patient " + std::to_string(ep.id) + " has fewer than two visits");
        for (std::size_t i = 0; i < ep.latents.size(); ++i) {
            if (ep.latents[i].size() != cfg.latent_dim) throw ValidationError("train_flow: latent size mismatch");
            for (std::size_t j = i + 1; j < ep.latents.size(); ++j) pairs.push_back({p, i, j});
        }
    }
    if (pairs.empty()) throw ValidationError("train_flow: no valid pairs");

    FlowTrainResult res;
    res.net = init_velocity_net(cfg, derive_seed(train.seed, 1));
    AdamW opt(res.net.params, train.optimizer);
    const std::size_t L = cfg.latent_dim, C = cfg.condition_width();

    for (int epoch = 0; epoch < train.epochs; ++epoch) {
        std::vector<Pair> order;
        for (int r = 0; r < train.samples_per_pair; ++r) order.insert(order.end(), pairs.begin(), pairs.end());
        Rng shuffle_rng(derive_seed(train.seed, 1000 + static_cast<std::uint64_t>(epoch)));
        shuffle_rng.shuffle(order);
        Rng rng(derive_seed(train.seed, 1'000'000 + static_cast<std::uint64_t>(epoch)));

        double loss_sum = 0.0;
        std::size_t batches = 0;
        for (std::size_t b0 = 0; b0 < order.size(); b0 += train.batch_size) {
            const std::size_t B = std::min(train.batch_size, order.size() - b0);
            Tensor Z({B, L}), V({B, L}), Cm({B, C});
            for (std::size_t b = 0; b < B; ++b) {
                const Pair& pr = order[b0 + b];
                const auto& ep = patients[pr.p];
                const double ti = ep.ages[pr.i], tj = ep.ages[pr.j];
                FMSample s = fm_training_sample(ep.latents[pr.i], ep.latents[pr.j], ti, tj, cfg.sampling_mode, rng);
                const double age = cfg.sampling_mode == SamplingMode::Temporal ? ti + s.t : ti + s.t * s.T;
                Tensor c = make_condition(cfg, ep.attrs, ti, std::min(age, tj), tj, true, &rng);
                for (std::size_t k = 0; k < L; ++k) {
                    Z[b * L + k] = s.z_t[k];
                    V[b * L + k] = s.v_target[k];
                }
                for (std::size_t k = 0; k < C; ++k) Cm[b * C + k] = c[k];
            }
            Tape tape;
            BoundParams bp(tape, res.net.params, true);
            Var loss = fm_loss(bp, cfg, tape.constant(std::move(Z)), tape.constant(std::move(Cm)), V);
            auto grads = bp.gradients(tape.backward(loss));
            opt.step(res.net.params, grads);
            loss_sum += loss.value().item();
            ++batches;
        }
        const double mean_loss = loss_sum / static_cast<double>(batches);
        if (!std::isfinite(mean_loss)) throw NumericError("train_flow: loss diverged at epoch " + std::to_string(epoch));
        res.history.push_back(mean_loss);
        if (on_epoch) on_epoch(epoch, mean_loss);
    }
    return res;
}

} // namespace dlfm::flow
