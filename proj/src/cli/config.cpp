#include "dlfm/pipeline.hpp"
#include "io.hpp"

#include <zlib.h>

#include <bit>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <set>

namespace dlfm::cli {

static_assert(std::endian::native == std::endian::little, "checkpoint payload IO assumes a little-endian host");

std::uint64_t split_seed(std::uint64_t seed) { return derive_seed(seed, 1); }
std::uint64_t ae_seed(std::uint64_t seed) { return derive_seed(seed, 2); }
std::uint64_t flow_seed(std::uint64_t seed) { return derive_seed(seed, 3); }
std::uint64_t sensitivity_seed(std::uint64_t seed) { return derive_seed(seed, 4); }
std::uint64_t predict_noise_seed(std::uint64_t seed) { return derive_seed(seed, 5); }

void ExperimentConfig::resolve()
{
    cohort.seed = seed;
    ae.image_size = cohort.image_size;
    ae_train.seed = ae_seed(seed);
    flow.latent_dim = ae.latent_dim();
    flow_train.seed = flow_seed(seed);
    sensitivity.seed = sensitivity_seed(seed);
}

void ExperimentConfig::validate() const
{
    auto fail = [](const std::string& m) { throw ValidationError("config: " + m); };
    // Cohort ranges are checked by the generator.
    for (double f : {split.train, split.val, split.test})
        if (!(f >= 0.0 && f <= 1.0)) fail("split fractions must lie in [0, 1]");
    if (std::abs(split.train + split.val + split.test - 1.0) > 1e-9) fail("split fractions must sum to 1");

    if (ae.latent_rows == 0 || ae.latent_cols == 0) fail("autoencoder latent shape must be nonzero");
    if (ae.hidden.empty()) fail("autoencoder.hidden must list at least one width");
    for (auto h : ae.hidden)
        if (h == 0) fail("autoencoder.hidden widths must be positive");
    if (!(ae.beta_kl >= 0.0)) fail("autoencoder.beta_kl must be >= 0");
    if (ae.image_size != cohort.image_size || flow.latent_dim != ae.latent_dim()) fail("derived fields are stale; call resolve()");

    if (!(ae_train.optimizer.lr > 0.0) || !(flow_train.optimizer.lr > 0.0)) fail("learning rates must be positive");
    if (ae_train.batch_patients == 0 || flow_train.batch_size == 0) fail("batch sizes must be positive");
    if (ae_train.epochs < 0 || flow_train.epochs < 0) fail("epochs must be >= 0");
    if (flow_train.samples_per_pair < 1) fail("flow_train.samples_per_pair must be >= 1");
    ae_train.arcrank.validate();
    flow.validate();
    if (sensitivity.n_trials < 1 || sensitivity.n_pixels < 1) fail("sensitivity trials and pixels must be >= 1");
}

namespace {

const char* mode_name(flow::SamplingMode m) { return m == flow::SamplingMode::Temporal ? "temporal" : "physical"; }
const char* mode_name(integrate::PredictionMode m)
{
    return m == integrate::PredictionMode::Residual ? "residual" : "direct";
}
const char* mode_name(latent::AngularLoss m) { return m == latent::AngularLoss::Arc ? "arc" : "cosine"; }
const char* mode_name(latent::MagnitudeLoss m) { return m == latent::MagnitudeLoss::RankPull ? "rank_pull" : "simple"; }
const char* mode_name(metrics::SensitivityScenario m)
{
    return m == metrics::SensitivityScenario::Opposite ? "opposite" : "independent";
}

template <class E>
E parse_mode(const std::string& key, const std::string& s, std::initializer_list<E> options)
{
    std::string valid;
    for (E e : options) {
        if (s == mode_name(e)) return e;
        valid += std::string(valid.empty() ? "" : ", ") + mode_name(e);
    }
    throw ValidationError("config: " + key + " must be one of " + valid + ", got '" + s + "'");
}

json optimizer_json(const AdamWConfig& o)
{
    return {{"lr", o.lr}, {"beta1", o.beta1}, {"beta2", o.beta2}, {"eps", o.eps}, {"weight_decay", o.weight_decay}};
}

// Reads keys of one JSON object and rejects the ones nobody asked for.
class Section {
public:
    Section(const json& j, std::string where) : j_(j), where_(std::move(where))
    {
        if (!j_.is_object()) throw ValidationError("config: " + where_ + " must be an object");
    }

    template <class T>
    void get(const char* key, T& out)
    {
        seen_.insert(key);
        if (!j_.contains(key)) return;
        try {
            out = j_.at(key).get<T>();
        } catch (const json::exception&) {
            throw ValidationError("config: " + path(key) + " has the wrong type");
        }
    }

    template <class E>
    void get_mode(const char* key, E& out, std::initializer_list<E> options)
    {
        std::string s = mode_name(out);
        get(key, s);
        out = parse_mode(path(key), s, options);
    }

    void optimizer(const char* key, AdamWConfig& o)
    {
        seen_.insert(key);
        if (!j_.contains(key)) return;
        Section s(j_.at(key), path(key));
        s.get("lr", o.lr);
        s.get("beta1", o.beta1);
        s.get("beta2", o.beta2);
        s.get("eps", o.eps);
        s.get("weight_decay", o.weight_decay);
        s.finish();
    }

    std::optional<Section> sub(const char* key)
    {
        seen_.insert(key);
        if (!j_.contains(key)) return std::nullopt;
        return Section(j_.at(key), path(key));
    }

    void finish() const
    {
        for (const auto& item : j_.items())
            if (!seen_.count(item.key())) throw ValidationError("config: unknown key " + path(item.key()));
    }

private:
    std::string path(const std::string& key) const { return where_.empty() ? key : where_ + "." + key; }
    const json& j_;
    std::string where_;
    std::set<std::string> seen_;
};

} // namespace

json to_json(const ExperimentConfig& cfg)
{
    const auto& c = cfg.cohort;
    const auto& ar = cfg.ae_train.arcrank;
    const auto& f = cfg.flow;
    const auto& s = cfg.sensitivity;
    json j;
    j["seed"] = cfg.seed;
    j["cohort"] = {{"n_patients", c.n_patients},
                   {"min_visits", c.min_visits},
                   {"max_visits", c.max_visits},
                   {"min_baseline_age", c.min_baseline_age},
                   {"max_baseline_age", c.max_baseline_age},
                   {"span_years", c.span_years},
                   {"min_gap_years", c.min_gap_years},
                   {"min_rate", c.min_rate},
                   {"max_rate", c.max_rate},
                   {"max_baseline_severity", c.max_baseline_severity},
                   {"late_rate_factor", c.late_rate_factor},
                   {"noise_std", c.noise_std},
                   {"image_size", c.image_size}};
    j["split"] = {{"train", cfg.split.train}, {"val", cfg.split.val}, {"test", cfg.split.test}};
    j["autoencoder"] = {{"latent_rows", cfg.ae.latent_rows},
                        {"latent_cols", cfg.ae.latent_cols},
                        {"hidden", cfg.ae.hidden},
                        {"beta_kl", cfg.ae.beta_kl}};
    j["ae_train"] = {{"optimizer", optimizer_json(cfg.ae_train.optimizer)},
                     {"batch_patients", cfg.ae_train.batch_patients},
                     {"epochs", cfg.ae_train.epochs},
                     {"grad_clip", cfg.ae_train.grad_clip}};
    j["arcrank"] = {{"margin", ar.margin},
                    {"lambda_arc", ar.lambda_arc},
                    {"lambda_rank", ar.lambda_rank},
                    {"pull_enabled", ar.pull_enabled},
                    {"stop_gradient_earlier", ar.stop_gradient_earlier},
                    {"per_component_rank", ar.per_component_rank},
                    {"angular", mode_name(ar.angular)},
                    {"magnitude", mode_name(ar.magnitude)}};
    j["flow"] = {{"sampling_mode", mode_name(f.sampling_mode)},
                 {"dt", f.dt},
                 {"sde_sigma", f.sde_sigma},
                 {"embed_dim", f.embed_dim},
                 {"status_noise_std", f.status_noise_std},
                 {"conditioning_enabled", f.conditioning_enabled},
                 {"hidden", f.hidden},
                 {"cond_hidden", f.cond_hidden},
                 {"reanchor_segments", f.reanchor_segments}};
    j["flow_train"] = {{"optimizer", optimizer_json(cfg.flow_train.optimizer)},
                       {"batch_size", cfg.flow_train.batch_size},
                       {"epochs", cfg.flow_train.epochs},
                       {"samples_per_pair", cfg.flow_train.samples_per_pair}};
    j["prediction_mode"] = mode_name(cfg.prediction_mode);
    j["sensitivity"] = {{"sigmas", s.sigmas},
                        {"n_pixels", s.n_pixels},
                        {"n_trials", s.n_trials},
                        {"scenario", mode_name(s.scenario)}};
    return j;
}

ExperimentConfig config_from_json(const json& j)
{
    ExperimentConfig cfg;
    Section top(j, "");
    top.get("seed", cfg.seed);
    std::string out = cfg.out_dir.string();
    top.get("out_dir", out);
    cfg.out_dir = out;
    if (auto s = top.sub("cohort")) {
        auto& c = cfg.cohort;
        s->get("n_patients", c.n_patients);
        s->get("min_visits", c.min_visits);
        s->get("max_visits", c.max_visits);
        s->get("min_baseline_age", c.min_baseline_age);
        s->get("max_baseline_age", c.max_baseline_age);
        s->get("span_years", c.span_years);
        s->get("min_gap_years", c.min_gap_years);
        s->get("min_rate", c.min_rate);
        s->get("max_rate", c.max_rate);
        s->get("max_baseline_severity", c.max_baseline_severity);
        s->get("late_rate_factor", c.late_rate_factor);
        s->get("noise_std", c.noise_std);
        s->get("image_size", c.image_size);
        s->finish();
    }
    if (auto s = top.sub("split")) {
        s->get("train", cfg.split.train);
        s->get("val", cfg.split.val);
        s->get("test", cfg.split.test);
        s->finish();
    }
    if (auto s = top.sub("autoencoder")) {
        s->get("latent_rows", cfg.ae.latent_rows);
        s->get("latent_cols", cfg.ae.latent_cols);
        s->get("hidden", cfg.ae.hidden);
        s->get("beta_kl", cfg.ae.beta_kl);
        s->finish();
    }
    if (auto s = top.sub("ae_train")) {
        s->optimizer("optimizer", cfg.ae_train.optimizer);
        s->get("batch_patients", cfg.ae_train.batch_patients);
        s->get("epochs", cfg.ae_train.epochs);
        s->get("grad_clip", cfg.ae_train.grad_clip);
        s->finish();
    }
    if (auto s = top.sub("arcrank")) {
        auto& ar = cfg.ae_train.arcrank;
        s->get("margin", ar.margin);
        s->get("lambda_arc", ar.lambda_arc);
        s->get("lambda_rank", ar.lambda_rank);
        s->get("pull_enabled", ar.pull_enabled);
        s->get("stop_gradient_earlier", ar.stop_gradient_earlier);
        s->get("per_component_rank", ar.per_component_rank);
        s->get_mode("angular", ar.angular, {latent::AngularLoss::Arc, latent::AngularLoss::Cosine});
        s->get_mode("magnitude", ar.magnitude, {latent::MagnitudeLoss::RankPull, latent::MagnitudeLoss::Simple});
        s->finish();
    }
    if (auto s = top.sub("flow")) {
        auto& f = cfg.flow;
        s->get_mode("sampling_mode", f.sampling_mode, {flow::SamplingMode::Temporal, flow::SamplingMode::Physical});
        s->get("dt", f.dt);
        s->get("sde_sigma", f.sde_sigma);
        s->get("embed_dim", f.embed_dim);
        s->get("status_noise_std", f.status_noise_std);
        s->get("conditioning_enabled", f.conditioning_enabled);
        s->get("hidden", f.hidden);
        s->get("cond_hidden", f.cond_hidden);
        s->get("reanchor_segments", f.reanchor_segments);
        s->finish();
    }
    if (auto s = top.sub("flow_train")) {
        s->optimizer("optimizer", cfg.flow_train.optimizer);
        s->get("batch_size", cfg.flow_train.batch_size);
        s->get("epochs", cfg.flow_train.epochs);
        s->get("samples_per_pair", cfg.flow_train.samples_per_pair);
        s->finish();
    }
    top.get_mode("prediction_mode", cfg.prediction_mode,
                 {integrate::PredictionMode::Residual, integrate::PredictionMode::Direct});
    if (auto s = top.sub("sensitivity")) {
        auto& sc = cfg.sensitivity;
        s->get("sigmas", sc.sigmas);
        s->get("n_pixels", sc.n_pixels);
        s->get("n_trials", sc.n_trials);
        s->get_mode("scenario", sc.scenario,
                    {metrics::SensitivityScenario::Opposite, metrics::SensitivityScenario::Independent});
        s->finish();
    }
    top.finish();
    cfg.resolve();
    cfg.validate();
    return cfg;
}


ExperimentConfig load_config(const fs::path& file)
{
    json j;
    try {
        j = json::parse(read_bytes(file));
    } catch (const json::parse_error& e) {
        throw ValidationError("config " + file.string() + ": " + e.what());
    }
    return config_from_json(j);
}

void save_config(const ExperimentConfig& cfg, const fs::path& file) { write_bytes(file, to_json(cfg).dump(2) + "\n"); }

std::string config_hash(const ExperimentConfig& cfg)
{
    const std::string s = to_json(cfg).dump();
    uLong crc = crc32(0L, Z_NULL, 0);
    crc = crc32(crc, reinterpret_cast<const Bytef*>(s.data()), static_cast<uInt>(s.size()));
    char buf[9];
    std::snprintf(buf, sizeof buf, "%08lx", static_cast<unsigned long>(crc));
    return buf;
}

json ae_section(const ExperimentConfig& cfg)
{
    const json j = to_json(cfg);
    return {{"seed", j["seed"]},
            {"cohort", j["cohort"]},
            {"split", j["split"]},
            {"autoencoder", j["autoencoder"]},
            {"ae_train", j["ae_train"]},
            {"arcrank", j["arcrank"]}};
}

// ---- checkpoints ----

namespace {

constexpr char kMagic[5] = {'D', 'L', 'F', 'M', '1'};

void append_tensors(json& index, std::string& payload, const ParamSet& ps, const std::string& prefix)
{
    for (std::size_t i = 0; i < ps.size(); ++i) {
        const Tensor& t = ps.at(i);
        index.push_back({{"name", prefix + ps.names()[i]}, {"shape", t.shape()}, {"offset", payload.size()}});
        const auto* p = reinterpret_cast<const char*>(t.storage().data());
        payload.append(p, t.size() * sizeof(double));
    }
}

// Fills `layout` (freshly initialized, so names and shapes are known) from the payload.
void read_tensors(ParamSet& layout, const std::string& prefix, const std::map<std::string, Tensor>& found)
{
    for (std::size_t i = 0; i < layout.size(); ++i) {
        const std::string name = prefix + layout.names()[i];
        auto it = found.find(name);
        if (it == found.end()) throw IoError("checkpoint: missing tensor " + name);
        if (it->second.shape() != layout.at(i).shape())
            throw IoError("checkpoint: tensor " + name + " has shape " + shape_str(it->second.shape()) + ", expected " +
                          shape_str(layout.at(i).shape()));
        layout.at(i) = it->second;
    }
}

} // namespace

integrate::ModelBundle Checkpoint::bundle() const
{
    if (!flow || !normalizer) throw ValidationError("checkpoint of kind '" + kind + "' holds no flow model");
    return {ae, *flow, *normalizer, config.prediction_mode};
}

std::string encode_checkpoint(const Checkpoint& ck)
{
    json tensors = json::array();
    std::string payload;
    append_tensors(tensors, payload, ck.ae.params, "ae/");
    if (ck.flow) append_tensors(tensors, payload, ck.flow->params, "flow/");
    json header{{"format_version", kCheckpointVersion},
                {"kind", ck.kind},
                {"config", to_json(ck.config)},
                {"config_hash", config_hash(ck.config)},
                {"provenance", ck.provenance},
                {"tensors", tensors}};
    if (ck.normalizer) {
        ParamSet norm;
        norm.add("mean", ck.normalizer->mean);
        append_tensors(header["tensors"], payload, norm, "norm/");
        header["normalizer"] = {{"scale", ck.normalizer->scale}};
    }
    const std::string h = header.dump(1);
    std::string out(kMagic, sizeof kMagic);
    const std::uint64_t len = h.size();
    out.append(reinterpret_cast<const char*>(&len), sizeof len);
    out += h;
    out += payload;
    return out;
}

Checkpoint decode_checkpoint(const std::string& bytes)
{
    const std::size_t pre = sizeof kMagic + sizeof(std::uint64_t);
    if (bytes.size() < pre || std::memcmp(bytes.data(), kMagic, sizeof kMagic) != 0)
        throw IoError("checkpoint: bad magic (not a DLFM1 file)");
    std::uint64_t len = 0;
    std::memcpy(&len, bytes.data() + sizeof kMagic, sizeof len);
    if (len > bytes.size() - pre) throw IoError("checkpoint: truncated header");

    json header;
    try {
        header = json::parse(bytes.substr(pre, len));
    } catch (const json::parse_error& e) {
        throw IoError(std::string("checkpoint: unreadable header: ") + e.what());
    }
    Checkpoint ck;
    std::map<std::string, Tensor> found;
    try {
        const int version = header.at("format_version").get<int>();
        if (version != kCheckpointVersion)
            throw IoError("checkpoint: unsupported format_version " + std::to_string(version));
        ck.kind = header.at("kind").get<std::string>();
        if (ck.kind != "ae" && ck.kind != "bundle") throw IoError("checkpoint: unknown kind '" + ck.kind + "'");
        ck.config = config_from_json(header.at("config"));
        const auto stored = header.at("config_hash").get<std::string>();
        if (stored != config_hash(ck.config))
            throw IoError("checkpoint: config hash " + stored + " does not match the embedded config");
        ck.provenance = header.at("provenance");

        const std::string payload = bytes.substr(pre + len);
        std::size_t expected = 0;
        for (const auto& t : header.at("tensors")) {
            const auto name = t.at("name").get<std::string>();
            const auto shape = t.at("shape").get<Shape>();
            const auto offset = t.at("offset").get<std::size_t>();
            if (offset != expected) throw IoError("checkpoint: tensor " + name + " is not contiguous");
            std::size_t n = 1;
            for (auto d : shape) n *= d;
            if (offset + n * sizeof(double) > payload.size()) throw IoError("checkpoint: tensor " + name + " is truncated");
            std::vector<double> data(n);
            std::memcpy(data.data(), payload.data() + offset, n * sizeof(double));
            found.emplace(name, Tensor(shape, std::move(data)));
            expected = offset + n * sizeof(double);
        }
        if (expected != payload.size()) throw IoError("checkpoint: trailing bytes after the last tensor");

        ck.ae = latent::init_autoencoder(ck.config.ae, 0);
        read_tensors(ck.ae.params, "ae/", found);
        if (ck.kind == "bundle") {
            ck.flow = flow::init_velocity_net(ck.config.flow, 0);
            read_tensors(ck.flow->params, "flow/", found);
            flow::LatentNormalizer norm;
            auto it = found.find("norm/mean");
            if (it == found.end()) throw IoError("checkpoint: missing tensor norm/mean");
            norm.mean = it->second;
            norm.scale = header.at("normalizer").at("scale").get<double>();
            ck.normalizer = norm;
        }
    } catch (const json::exception& e) {
        throw IoError(std::string("checkpoint: malformed header: ") + e.what());
    } catch (const ValidationError& e) {
        throw IoError(std::string("checkpoint: ") + e.what());
    }
    return ck;
}

void save_checkpoint(const Checkpoint& ck, const fs::path& file) { write_bytes(file, encode_checkpoint(ck)); }

Checkpoint load_checkpoint(const fs::path& file)
{
    try {
        return decode_checkpoint(read_bytes(file));
    } catch (const IoError& e) {
        throw IoError(file.string() + ": " + e.what());
    }
}

} // namespace dlfm::cli
