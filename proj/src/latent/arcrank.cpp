#include "dlfm/latent.hpp"
#include "dlfm/ops.hpp"

namespace dlfm::latent {

using namespace dlfm::grad;

std::vector<std::string> ArcRankConfig::validate() const
{
    if (!(margin > 0.0)) throw ValidationError("arcrank: margin must be positive");
    if (lambda_arc < 0.0 || lambda_rank < 0.0) throw ValidationError("arcrank: loss weights must be nonnegative");
    std::vector<std::string> warnings;
    if (lambda_arc > 0.01)
        warnings.push_back("arcrank: lambda_arc above 0.01 tends to collapse latent directions");
    return warnings;
}

Var arc_loss(Var U_i, Var U_j, bool freeze_earlier)
{
    if (U_i.shape() != U_j.shape())
        throw ValidationError("arc_loss: shape mismatch " + shape_str(U_i.shape()) + " vs " + shape_str(U_j.shape()));
    Var a = freeze_earlier ? stop_gradient(U_i) : U_i;
    return sum(abs(U_j - a));
}

namespace {

void check_singular_values(const Var& S)
{
    for (double v : S.value().data())
        if (v < 0.0) throw ValidationError("rank_pull_loss: negative singular value");
}

Var hinge(Var gap, double margin) { return relu(add_scalar(neg(gap), margin)); }

} // namespace

Var rank_pull_loss(Var S_i, Var S_j, double margin, bool pull, bool freeze_earlier)
{
    if (S_i.shape() != S_j.shape()) throw ValidationError("rank_pull_loss: length mismatch");
    check_singular_values(S_i);
    check_singular_values(S_j);
    Var a = freeze_earlier ? stop_gradient(S_i) : S_i;
    Var gap = sum(S_j) - sum(a);
    Var loss = hinge(gap, margin);
    return pull ? loss + abs(gap) : loss;
}

Var cosine_surrogate_loss(Var z_i, Var z_j)
{
    if (z_i.value().size() != z_j.value().size()) throw ValidationError("cosine_surrogate_loss: size mismatch");
    Var a = reshape(z_i, {z_i.value().size()});
    Var b = reshape(z_j, {z_j.value().size()});
    double na = 0.0, nb = 0.0;
    for (double v : a.value().data()) na += v * v;
    for (double v : b.value().data()) nb += v * v;
    if (na == 0.0 || nb == 0.0) throw ValidationError("cosine_surrogate_loss: zero-norm latent");
    Var cos = div(sum(a * b), sqrt(sum(square(a))) * sqrt(sum(square(b))));
    return add_scalar(neg(cos), 1.0);
}

Var simple_rank_loss(Var d_i, Var d_j) { return relu(sum(d_j) - sum(d_i)); }

ArcRankTerms arcrank_loss(Tape& tape, const std::vector<Var>& latents, const ArcRankConfig& cfg)
{
    cfg.validate();
    ArcRankTerms out;
    if (latents.size() < 2) {
        tape.warn("arcrank: fewer than two latents, loss defined as 0");
        out.total = tape.constant(Tensor::scalar(0.0));
        return out;
    }
    const bool sg = cfg.stop_gradient_earlier;
    const std::size_t n = latents.size();

    std::vector<SvdVars> f;
    f.reserve(n);
    for (const auto& z : latents) f.push_back(svd(z));
    // Frozen copies for use as the earlier element of a pair.
    std::vector<Var> U0, S0, Z0;
    for (std::size_t k = 0; k + 1 < n; ++k) {
        if (cfg.angular == AngularLoss::Arc) U0.push_back(sg ? stop_gradient(f[k].U) : f[k].U);
        else Z0.push_back(sg ? stop_gradient(latents[k]) : latents[k]);
        S0.push_back(sg ? stop_gradient(f[k].S) : f[k].S);
    }

    std::vector<Var> ang, rank, pull;
    for (std::size_t i = 0; i + 1 < n; ++i) {
        for (std::size_t j = i + 1; j < n; ++j) {
            if (cfg.angular == AngularLoss::Arc) ang.push_back(arc_loss(U0[i], f[j].U, false));
            else ang.push_back(cosine_surrogate_loss(Z0[i], latents[j]));

            if (cfg.magnitude == MagnitudeLoss::Simple) {
                rank.push_back(simple_rank_loss(S0[i], f[j].S));
                continue;
            }
            Var gap = sum(f[j].S) - sum(S0[i]);
            if (cfg.per_component_rank) rank.push_back(sum(relu(add_scalar(neg(f[j].S - S0[i]), cfg.margin))));
            else rank.push_back(relu(add_scalar(neg(gap), cfg.margin)));
            if (cfg.pull_enabled && j == i + 1) pull.push_back(abs(gap));
        }
    }

    auto total_of = [&](const std::vector<Var>& v) -> Var {
        Var acc = v.front();
        for (std::size_t k = 1; k < v.size(); ++k) acc = acc + v[k];
        return acc;
    };
    Var A = total_of(ang);
    Var R = total_of(rank);
    out.angular = A.value().item();
    out.rank = R.value().item();
    Var mag = R;
    if (!pull.empty()) {
        Var P = total_of(pull);
        out.pull = P.value().item();
        mag = R + P;
    }
    out.total = scale(A, cfg.lambda_arc) + scale(mag, cfg.lambda_rank);
    return out;
}

} // namespace dlfm::latent
