#include "dlfm/latent.hpp"
#include "dlfm/ops.hpp"

#include <algorithm>
#include <cmath>
#include <set>

namespace dlfm::latent {

using namespace dlfm::grad;

AEBatchLoss autoencoder_loss(const BoundParams& p, const AutoencoderConfig& cfg, Var x,
                             const std::vector<PatientRows>& groups, const Tensor& eps, const ArcRankConfig& arcrank)
{
    Tape& tape = x.tape();
    const std::size_t B = x.shape()[0];
    const std::size_t L = cfg.latent_dim();
    if (eps.shape() != Shape{B, L}) throw ValidationError("autoencoder_loss: eps must be B x latent_dim");
    const double invB = 1.0 / static_cast<double>(B);

    auto enc = encoder_forward(p, cfg, x);
    Var z = enc.mean + exp(scale(enc.logvar, 0.5)) * tape.constant(eps);
    Var xhat = decoder_forward(p, cfg, z);
    Var recon = scale(sum(square(xhat - x)), invB);
    Var kl = scale(sum(add_scalar(enc.logvar - square(enc.mean) - exp(enc.logvar), 1.0)), -0.5 * invB);

    AEBatchLoss out;
    out.recon = recon.value().item();
    out.kl = kl.value().item();
    Var total = recon + scale(kl, cfg.beta_kl);

    if (arcrank.active() && !groups.empty()) {
        std::vector<PatientRows> order = groups;
        std::sort(order.begin(), order.end(), [](const auto& a, const auto& b) { return a.id < b.id; });
        Var acc;
        for (const auto& g : order) {
            if (g.end > B || g.begin >= g.end) throw ValidationError("autoencoder_loss: bad patient row range");
            std::vector<Var> lat;
            for (std::size_t r = g.begin; r < g.end; ++r)
                lat.push_back(reshape(slice_rows(enc.mean, r, r + 1), {cfg.latent_rows, cfg.latent_cols}));
            auto terms = arcrank_loss(tape, lat, arcrank);
            out.angular += terms.angular;
            out.rank += terms.rank;
            out.pull += terms.pull;
            acc = acc.valid() ? acc + terms.total : terms.total;
        }
        const double inv = 1.0 / static_cast<double>(order.size());
        out.angular *= inv;
        out.rank *= inv;
        out.pull *= inv;
        Var ar = scale(acc, inv);
        out.arcrank = ar.value().item();
        total = total + ar;
    }
    out.total = total;
    return out;
}

AETrainResult train_autoencoder(const cohort::Cohort& train, const AutoencoderConfig& ae_cfg, const AETrainConfig& cfg,
                                const EpochCallback& on_epoch)
{
    if (train.patients.empty()) throw ValidationError("train_autoencoder: empty training split");
    if (cfg.batch_patients == 0 || cfg.epochs < 0) throw ValidationError("train_autoencoder: bad batch size or epochs");
    if (ae_cfg.image_size != train.config.image_size)
        throw ValidationError("train_autoencoder: image size does not match the cohort");

    AETrainResult res;
    res.warnings = cfg.arcrank.validate();
    res.ae = init_autoencoder(ae_cfg, derive_seed(cfg.seed, 1));
    AdamW opt(res.ae.params, cfg.optimizer);
    std::set<std::string> seen_warnings;

    std::vector<const cohort::PatientRecord*> patients;
    for (const auto& p : train.patients) patients.push_back(&p);
    std::sort(patients.begin(), patients.end(), [](auto* a, auto* b) { return a->id < b->id; });

    const std::size_t D = ae_cfg.image_dim();
    const std::size_t L = ae_cfg.latent_dim();
    std::uint64_t step = 0;
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        auto order = patients;
        Rng shuffle_rng(derive_seed(cfg.seed, 1000 + static_cast<std::uint64_t>(epoch)));
        shuffle_rng.shuffle(order);

        AEEpochStats stats;
        double ar_sum = 0.0;
        std::size_t n_batches = 0;
        for (std::size_t b0 = 0; b0 < order.size(); b0 += cfg.batch_patients) {
            const std::size_t b1 = std::min(order.size(), b0 + cfg.batch_patients);
            std::vector<double> rows;
            std::vector<PatientRows> groups;
            std::size_t r = 0;
            for (std::size_t k = b0; k < b1; ++k) {
                const auto* p = order[k];
                groups.push_back({p->id, r, r + p->visits.size()});
                for (const auto& v : p->visits) rows.insert(rows.end(), v.image.pixels.begin(), v.image.pixels.end());
                r += p->visits.size();
            }
            Rng eps_rng(derive_seed(cfg.seed, 1'000'000 + step));
            Tensor eps({r, L});
            for (auto& e : eps.storage()) e = eps_rng.normal();

            Tape tape;
            BoundParams bp(tape, res.ae.params, true);
            Var x = tape.constant(Tensor({r, D}, std::move(rows)));
            auto loss = autoencoder_loss(bp, ae_cfg, x, groups, eps, cfg.arcrank);
            const double total = loss.total.value().item();
            if (!std::isfinite(total)) throw NumericError("train_autoencoder: loss diverged at epoch " + std::to_string(epoch));
            auto grads = bp.gradients(tape.backward(loss.total));
            clip_grad_norm(grads, cfg.grad_clip);
            opt.step(res.ae.params, grads);
            for (const auto& w : tape.warnings())
                if (seen_warnings.insert(w).second) res.warnings.push_back(w);

            stats.recon += loss.recon;
            stats.kl += loss.kl;
            stats.total += total;
            if (loss.arcrank) ar_sum += *loss.arcrank;
            stats.angular += loss.angular;
            stats.rank += loss.rank;
            stats.pull += loss.pull;
            ++n_batches;
            ++step;
        }
        const double inv = 1.0 / static_cast<double>(n_batches);
        stats.recon *= inv;
        stats.kl *= inv;
        stats.total *= inv;
        stats.angular *= inv;
        stats.rank *= inv;
        stats.pull *= inv;
        if (cfg.arcrank.active()) stats.arcrank = ar_sum * inv;
        res.history.push_back(stats);
        if (on_epoch) on_epoch(epoch, stats);
    }
    return res;
}

LatentStructure latent_structure(const AutoencoderParams& ae, const cohort::Cohort& cohort)
{
    LatentStructure out;
    double arc = 0.0;
    std::size_t ordered = 0;
    for (const auto& p : cohort.patients) {
        std::vector<const cohort::ScanImage*> ims;
        for (const auto& v : p.visits) ims.push_back(&v.image);
        auto lat = encode_batch(ae, ims);
        for (std::size_t i = 0; i < lat.size(); ++i) {
            for (std::size_t j = i + 1; j < lat.size(); ++j) {
                const Tensor& Ui = lat[i].factors().U;
                const Tensor& Uj = lat[j].factors().U;
                double d = 0.0;
                for (std::size_t k = 0; k < Ui.size(); ++k) d += std::abs(Ui[k] - Uj[k]);
                arc += d;
                ++out.pairs;
            }
            if (i + 1 < lat.size()) {
                ++out.adjacent_pairs;
                if (nuclear_norm(lat[i + 1].factors().S) > nuclear_norm(lat[i].factors().S)) ++ordered;
            }
        }
    }
    if (out.pairs) out.mean_arc_distance = arc / static_cast<double>(out.pairs);
    if (out.adjacent_pairs)
        out.adjacent_order_accuracy = static_cast<double>(ordered) / static_cast<double>(out.adjacent_pairs);
    return out;
}

} // namespace dlfm::latent
