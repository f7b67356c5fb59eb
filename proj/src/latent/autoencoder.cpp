#include "dlfm/latent.hpp"
#include "dlfm/ops.hpp"

#include <cmath>

namespace dlfm::latent {

using namespace dlfm::grad;

namespace {

std::string wname(const char* net, std::size_t i) { return std::string(net) + ".w" + std::to_string(i); }
std::string bname(const char* net, std::size_t i) { return std::string(net) + ".b" + std::to_string(i); }

Var dense(const BoundParams& p, const std::string& w, const std::string& b, Var x)
{
    return add_rowwise(matmul(x, p[w]), p[b]);
}

void check_config(const AutoencoderConfig& c)
{
    if (c.image_size == 0 || c.latent_rows == 0 || c.latent_cols == 0 || c.hidden.empty())
        throw ValidationError("autoencoder: sizes must be positive and at least one hidden layer is required");
    for (auto h : c.hidden)
        if (h == 0) throw ValidationError("autoencoder: hidden widths must be positive");
    if (c.beta_kl < 0.0) throw ValidationError("autoencoder: beta_kl must be nonnegative");
}

} // namespace

const SvdFactors& LatentSample::factors()
{
    if (!svd) svd = svd_thin(z);
    return *svd;
}

Tensor image_row(const cohort::ScanImage& image) { return Tensor({1, image.size()}, image.pixels); }

AutoencoderParams init_autoencoder(const AutoencoderConfig& config, std::uint64_t seed)
{
    check_config(config);
    Rng rng(seed);
    AutoencoderParams ae;
    ae.config = config;
    auto& ps = ae.params;

    std::size_t in = config.image_dim();
    for (std::size_t i = 0; i < config.hidden.size(); ++i) {
        ps.add(wname("enc", i), glorot(in, config.hidden[i], rng));
        ps.add(bname("enc", i), Tensor({config.hidden[i]}));
        in = config.hidden[i];
    }
    ps.add("enc.mean.w", glorot(in, config.latent_dim(), rng));
    ps.add("enc.mean.b", Tensor({config.latent_dim()}));
    ps.add("enc.logvar.w", glorot(in, config.latent_dim(), rng));
    ps.add("enc.logvar.b", Tensor({config.latent_dim()}));

    in = config.latent_dim();
    const std::size_t n = config.hidden.size();
    for (std::size_t i = 0; i < n; ++i) {
        const std::size_t out = config.hidden[n - 1 - i];
        ps.add(wname("dec", i), glorot(in, out, rng));
        ps.add(bname("dec", i), Tensor({out}));
        in = out;
    }
    ps.add(wname("dec", n), glorot(in, config.image_dim(), rng));
    ps.add(bname("dec", n), Tensor({config.image_dim()}));
    return ae;
}

EncoderOutput encoder_forward(const BoundParams& p, const AutoencoderConfig& cfg, Var x)
{
    if (x.shape().size() != 2 || x.shape()[1] != cfg.image_dim())
        throw ValidationError("encode: expected B x " + std::to_string(cfg.image_dim()) + " input, got " +
                              shape_str(x.shape()));
    Var h = x;
    for (std::size_t i = 0; i < cfg.hidden.size(); ++i) h = silu(dense(p, wname("enc", i), bname("enc", i), h));
    return {dense(p, "enc.mean.w", "enc.mean.b", h), dense(p, "enc.logvar.w", "enc.logvar.b", h)};
}

Var decoder_forward(const BoundParams& p, const AutoencoderConfig& cfg, Var z)
{
    if (z.shape().size() != 2 || z.shape()[1] != cfg.latent_dim())
        throw ValidationError("decode: expected B x " + std::to_string(cfg.latent_dim()) + " latent, got " +
                              shape_str(z.shape()));
    const std::size_t n = cfg.hidden.size();
    Var h = z;
    for (std::size_t i = 0; i < n; ++i) h = silu(dense(p, wname("dec", i), bname("dec", i), h));
    return sigmoid(dense(p, wname("dec", n), bname("dec", n), h));
}

std::vector<LatentSample> encode_batch(const AutoencoderParams& ae, const std::vector<const cohort::ScanImage*>& images)
{
    const auto& cfg = ae.config;
    std::vector<LatentSample> out;
    if (images.empty()) return out;
    std::vector<double> rows;
    rows.reserve(images.size() * cfg.image_dim());
    for (const auto* im : images) {
        if (im->width != cfg.image_size || im->height != cfg.image_size)
            throw ValidationError("encode: image size does not match the autoencoder");
        rows.insert(rows.end(), im->pixels.begin(), im->pixels.end());
    }
    Tape tape;
    BoundParams p(tape, ae.params, false);
    auto enc = encoder_forward(p, cfg, tape.constant(Tensor({images.size(), cfg.image_dim()}, std::move(rows))));
    const Tensor& m = enc.mean.value();
    const Tensor& lv = enc.logvar.value();
    const std::size_t L = cfg.latent_dim();
    for (std::size_t b = 0; b < images.size(); ++b) {
        LatentSample s;
        s.mean = Tensor({cfg.latent_rows, cfg.latent_cols});
        s.logvar = Tensor({cfg.latent_rows, cfg.latent_cols});
        for (std::size_t k = 0; k < L; ++k) {
            s.mean[k] = m[b * L + k];
            s.logvar[k] = lv[b * L + k];
        }
        s.z = s.mean;
        out.push_back(std::move(s));
    }
    return out;
}

LatentSample encode(const AutoencoderParams& ae, const cohort::ScanImage& image, Rng* eps)
{
    LatentSample s = std::move(encode_batch(ae, {&image}).front());
    if (eps) {
        for (std::size_t k = 0; k < s.z.size(); ++k) s.z[k] = s.mean[k] + std::exp(0.5 * s.logvar[k]) * eps->normal();
        if (!s.z.all_finite()) throw NumericError("encode: sampled latent is not finite");
    }
    return s;
}

cohort::ScanImage decode(const AutoencoderParams& ae, const Tensor& z)
{
    const auto& cfg = ae.config;
    if (z.shape() != Shape{cfg.latent_rows, cfg.latent_cols})
        throw ValidationError("decode: expected latent of shape " + shape_str({cfg.latent_rows, cfg.latent_cols}) +
                              ", got " + shape_str(z.shape()));
    Tape tape;
    BoundParams p(tape, ae.params, false);
    Var x = decoder_forward(p, cfg, tape.constant(z.reshaped({1, cfg.latent_dim()})));
    cohort::ScanImage img(cfg.image_size, cfg.image_size);
    img.pixels = x.value().storage();
    return img;
}

double nuclear_norm(const Tensor& S)
{
    double s = 0.0;
    for (double v : S.data()) s += v;
    return s;
}

} // namespace dlfm::latent
