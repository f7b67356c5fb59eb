#include "dlfm/pipeline.hpp"
#include "io.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <iostream>
#include <map>

namespace dlfm::cli {

namespace {

// Progress goes to stderr; only logs carry wall-clock time.
void log(const std::string& msg)
{
    static const auto t0 = std::chrono::steady_clock::now();
    const double s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    std::fprintf(stderr, "[delta-lfm %7.1fs] %s\n", s, msg.c_str());
}

std::string join_row(const std::vector<std::string>& cells)
{
    std::string out;
    for (std::size_t i = 0; i < cells.size(); ++i) {
        if (i) out += ',';
        out += cells[i];
    }
    return out + "\n";
}

struct RunData {
    cohort::Cohort cohort;
    cohort::CohortSplit split;
};

RunData load_run(const fs::path& dir)
{
    if (!fs::exists(dir / "cohort" / "cohort.json"))
        throw IoError("no cohort in " + dir.string() + " (run gen-data first)");
    return {cohort::load_cohort(dir / "cohort"), cohort::load_split(dir / "split.json")};
}

void check_run_matches(const RunData& run, const ExperimentConfig& cfg, const fs::path& dir)
{
    if (!(run.cohort.config == cfg.cohort))
        throw ValidationError("the cohort in " + dir.string() + " was generated with a different configuration");
    if (run.split.seed != split_seed(cfg.seed) || run.split.fractions.train != cfg.split.train ||
        run.split.fractions.val != cfg.split.val || run.split.fractions.test != cfg.split.test)
        throw ValidationError("split.json in " + dir.string() + " does not match the configuration");
}

std::vector<flow::EncodedPatient> encode_patients(const latent::AutoencoderParams& ae, const cohort::Cohort& c)
{
    std::vector<flow::EncodedPatient> out;
    for (const auto& p : c.patients) {
        flow::EncodedPatient e;
        e.id = p.id;
        e.attrs = flow::Attributes::of(p);
        for (const auto& v : p.visits) {
            e.ages.push_back(v.age);
            const Tensor m = latent::encode(ae, v.image).mean;
            e.latents.push_back(m.reshaped({m.size()}));
        }
        out.push_back(std::move(e));
    }
    return out;
}

std::vector<const cohort::PatientRecord*> by_id(const cohort::Cohort& c)
{
    std::vector<const cohort::PatientRecord*> v;
    for (const auto& p : c.patients) v.push_back(&p);
    std::sort(v.begin(), v.end(), [](auto* a, auto* b) { return a->id < b->id; });
    return v;
}

std::string opt_num(const std::optional<double>& v) { return v ? fmt_num(*v) : std::string(); }

json stat_json(const metrics::Stat& s) { return {{"mean", s.mean}, {"std", s.std}, {"count", s.count}}; }

json stratum_json(const metrics::HorizonStratum& s)
{
    return {{"horizon_years", s.year},
            {"count", s.count},
            {"psnr", stat_json(s.psnr)},
            {"ssim", stat_json(s.ssim)},
            {"region_mae", stat_json(s.region_mae)},
            {"delta_rmae", stat_json(s.delta_rmae)}};
}

std::string age_tag(double age)
{
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.3f", age);
    return buf;
}

void write_pgm(const fs::path& p, const cohort::ScanImage& im, const std::string& what, const std::string& hash,
               PredictOutcome& out)
{
    write_bytes(p, encode_pgm(im, what + " config_hash=" + hash));
    out.files.push_back(p);
}

cohort::ScanImage abs_diff(const cohort::ScanImage& a, const cohort::ScanImage& b)
{
    cohort::ScanImage d(a.width, a.height);
    for (std::size_t k = 0; k < d.pixels.size(); ++k) d.pixels[k] = std::abs(a.pixels[k] - b.pixels[k]);
    return d;
}

Checkpoint load_bundle(const fs::path& dir)
{
    const fs::path p = dir / "bundle.ckpt";
    if (!fs::exists(p)) throw IoError("no bundle.ckpt in " + dir.string() + " (run train-flow first)");
    return load_checkpoint(p);
}

} // namespace

std::string fmt_num(double v)
{
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.9g", v);
    return buf;
}

std::vector<std::array<double, 2>> pca_2d(const std::vector<Tensor>& rows)
{
    std::vector<std::array<double, 2>> out(rows.size(), {0.0, 0.0});
    if (rows.size() < 2) return out;
    const std::size_t n = rows.size(), d = rows[0].size();
    if (d == 0) return out;
    Tensor x({n, d});
    for (std::size_t i = 0; i < n; ++i) {
        if (rows[i].size() != d) throw ValidationError("pca_2d: rows differ in length");
        for (std::size_t k = 0; k < d; ++k) x.at(i, k) = rows[i][k];
    }
    for (std::size_t k = 0; k < d; ++k) {
        double m = 0.0;
        for (std::size_t i = 0; i < n; ++i) m += x.at(i, k);
        m /= static_cast<double>(n);
        for (std::size_t i = 0; i < n; ++i) x.at(i, k) -= m;
    }
    bool all_zero = true;
    for (double v : x.storage()) all_zero = all_zero && v == 0.0;
    if (all_zero) return out;
    const auto f = grad::svd_thin(x);
    const std::size_t k = std::min<std::size_t>(2, f.S.size());
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t c = 0; c < k; ++c) out[i][c] = f.U.at(i, c) * f.S[c];
    return out;
}

std::string encode_pgm(const cohort::ScanImage& im, const std::string& comment)
{
    std::string out = "P5\n# " + comment + "\n" + std::to_string(im.width) + " " + std::to_string(im.height) + "\n255\n";
    for (double v : im.pixels) {
        const double c = std::isfinite(v) ? std::clamp(v, 0.0, 1.0) : 0.0;
        out.push_back(static_cast<char>(static_cast<unsigned char>(std::lround(c * 255.0))));
    }
    return out;
}

cohort::ScanImage percentile_normalize(const cohort::ScanImage& im, double lo_pct, double hi_pct)
{
    cohort::ScanImage out(im.width, im.height);
    if (im.pixels.empty()) return out;
    std::vector<double> s = im.pixels;
    std::sort(s.begin(), s.end());
    auto pct = [&](double p) {
        const double pos = p / 100.0 * static_cast<double>(s.size() - 1);
        const auto i = static_cast<std::size_t>(std::floor(pos));
        const std::size_t j = std::min(i + 1, s.size() - 1);
        return s[i] + (pos - static_cast<double>(i)) * (s[j] - s[i]);
    };
    const double lo = pct(lo_pct), hi = pct(hi_pct);
    if (!(hi > lo)) return out;
    for (std::size_t k = 0; k < im.pixels.size(); ++k)
        out.pixels[k] = std::clamp((im.pixels[k] - lo) / (hi - lo), 0.0, 1.0);
    return out;
}

void cmd_gen_data(const ExperimentConfig& cfg, const fs::path& dir)
{
    cfg.validate();
    const auto c = cohort::generate_cohort(cfg.cohort);
    cohort::save_cohort(c, dir / "cohort");
    const auto split = cohort::split_cohort(c, cfg.split, split_seed(cfg.seed));
    const json j{{"fractions", {split.fractions.train, split.fractions.val, split.fractions.test}},
                 {"seed", split.seed},
                 {"train", split.train},
                 {"val", split.val},
                 {"test", split.test},
                 {"config_hash", config_hash(cfg)}};
    write_bytes(dir / "split.json", j.dump(1) + "\n");
    save_config(cfg, dir / "config.json");
    log("gen-data: " + std::to_string(c.patients.size()) + " patients, " + std::to_string(c.scan_count()) +
        " scans -> " + dir.string());
}

void cmd_train_ae(const ExperimentConfig& cfg, const fs::path& dir)
{
    cfg.validate();
    const RunData run = load_run(dir);
    check_run_matches(run, cfg, dir);
    const auto train = cohort::subset(run.cohort, run.split.train);
    log("train-ae: " + std::to_string(train.patients.size()) + " training patients, " +
        std::to_string(cfg.ae_train.epochs) + " epochs");
    auto res = latent::train_autoencoder(train, cfg.ae, cfg.ae_train, [](int e, const latent::AEEpochStats& s) {
        if (e % 10 == 9 || e == 0) log("  ae epoch " + std::to_string(e + 1) + " total " + fmt_num(s.total));
    });
    for (const auto& w : res.warnings) log("  warning: " + w);

    Checkpoint ck;
    ck.kind = "ae";
    ck.config = cfg;
    ck.ae = std::move(res.ae);
    ck.provenance = {{"seed", cfg.seed}, {"ae_epochs", cfg.ae_train.epochs}};
    save_checkpoint(ck, dir / "ae.ckpt");

    const std::string hash = config_hash(cfg);
    std::string csv = join_row({"stage", "epoch", "recon", "kl", "arc", "rank", "pull", "fm", "total", "config_hash"});
    for (std::size_t e = 0; e < res.history.size(); ++e) {
        const auto& s = res.history[e];
        csv += join_row({"ae", std::to_string(e + 1), fmt_num(s.recon), fmt_num(s.kl), fmt_num(s.angular),
                         fmt_num(s.rank), fmt_num(s.pull), "", fmt_num(s.total), hash});
    }
    write_bytes(dir / "history.csv", csv);
    log("train-ae: wrote " + (dir / "ae.ckpt").string());
}

integrate::ModelBundle fit_flow(const latent::AutoencoderParams& ae, const cohort::Cohort& train,
                                const flow::FlowConfig& fcfg, const flow::FlowTrainConfig& tcfg,
                                integrate::PredictionMode mode, const std::function<void(int, double)>& on_epoch)
{
    auto encoded = encode_patients(ae, train);
    const auto norm = flow::fit_normalizer(encoded);
    for (auto& p : encoded)
        for (auto& z : p.latents) z = norm.apply(z);
    auto res = flow::train_flow(encoded, fcfg, tcfg, on_epoch);
    return {ae, std::move(res.net), norm, mode};
}

void cmd_train_flow(const ExperimentConfig& cfg, const fs::path& dir)
{
    cfg.validate();
    const fs::path ae_path = dir / "ae.ckpt";
    if (!fs::exists(ae_path)) throw IoError("no ae.ckpt in " + dir.string() + " (run train-ae first)");
    const Checkpoint ae_ck = load_checkpoint(ae_path);
    if (ae_section(ae_ck.config) != ae_section(cfg))
        throw ValidationError("ae.ckpt was trained with a different configuration; rerun train-ae");
    const RunData run = load_run(dir);
    check_run_matches(run, cfg, dir);
    const auto train = cohort::subset(run.cohort, run.split.train);

    std::vector<double> history;
    log("train-flow: " + std::to_string(cfg.flow_train.epochs) + " epochs");
    auto bundle = fit_flow(ae_ck.ae, train, cfg.flow, cfg.flow_train, cfg.prediction_mode, [&](int e, double loss) {
        history.push_back(loss);
        if (e % 10 == 9 || e == 0) log("  flow epoch " + std::to_string(e + 1) + " fm " + fmt_num(loss));
    });

    Checkpoint ck;
    ck.kind = "bundle";
    ck.config = cfg;
    ck.ae = bundle.ae;
    ck.flow = bundle.flow;
    ck.normalizer = bundle.normalizer;
    ck.provenance = {{"seed", cfg.seed},
                     {"ae_epochs", cfg.ae_train.epochs},
                     {"flow_epochs", cfg.flow_train.epochs},
                     {"ae_config_hash", config_hash(ae_ck.config)}};
    save_checkpoint(ck, dir / "bundle.ckpt");

    // Keep the autoencoder rows of an existing history and replace the flow rows.
    std::string csv = join_row({"stage", "epoch", "recon", "kl", "arc", "rank", "pull", "fm", "total", "config_hash"});
    if (fs::exists(dir / "history.csv")) {
        std::istringstream in(read_bytes(dir / "history.csv"));
        std::string line;
        while (std::getline(in, line))
            if (line.rfind("ae,", 0) == 0) csv += line + "\n";
    }
    const std::string hash = config_hash(cfg);
    for (std::size_t e = 0; e < history.size(); ++e)
        csv += join_row({"flow", std::to_string(e + 1), "", "", "", "", "", fmt_num(history[e]), fmt_num(history[e]), hash});
    write_bytes(dir / "history.csv", csv);
    log("train-flow: wrote " + (dir / "bundle.ckpt").string());
}

EvalOutcome evaluate_pairs(const integrate::ModelBundle* bundle, const cohort::Cohort& patients)
{
    EvalOutcome out;
    for (const auto* p : by_id(patients)) {
        const auto attrs = flow::Attributes::of(*p);
        for (std::size_t i = 0; i < p->visits.size(); ++i)
            for (std::size_t j = i + 1; j < p->visits.size(); ++j) {
                const auto& src = p->visits[i];
                const auto& tgt = p->visits[j];
                if (!(tgt.age > src.age)) continue;
                const cohort::ScanImage pred =
                    bundle ? integrate::predict_followup(*bundle, src.image, src.age, attrs, tgt.age).images[0] : src.image;
                out.reports.push_back(
                    metrics::evaluate_prediction(src.image, tgt.image, pred, tgt.masks, p->id, src.age, tgt.age));
            }
    }
    out.strata = metrics::stratify_by_horizon(out.reports);
    out.overall = metrics::summarize_reports(out.reports);
    std::vector<double> h, d;
    for (const auto& s : out.strata) {
        h.push_back(static_cast<double>(s.year));
        d.push_back(s.delta_rmae.mean);
    }
    out.horizon_spearman = metrics::spearman(h, d);
    return out;
}

EvalOutcome cmd_evaluate(const fs::path& dir, bool copy_baseline)
{
    const Checkpoint ck = load_bundle(dir);
    const RunData run = load_run(dir);
    check_run_matches(run, ck.config, dir);
    if (run.split.test.empty()) throw ValidationError("evaluate: the test split is empty");
    const auto test = cohort::subset(run.cohort, run.split.test);
    const auto bundle = ck.bundle();
    EvalOutcome res = evaluate_pairs(copy_baseline ? nullptr : &bundle, test);
    if (res.reports.empty()) throw ValidationError("evaluate: no evaluable visit pairs in the test split");

    const std::string hash = config_hash(ck.config);
    std::string csv = join_row({"patient_id", "source_age", "target_age", "horizon", "psnr", "psnr_exact_match", "ssim",
                                "mae_ventricle", "mae_hippocampus", "mae_cortex", "mae_background", "mae_mean",
                                "delta_rmae", "config_hash"});
    for (const auto& r : res.reports) {
        const auto& m = r.region_mae.region;
        csv += join_row({std::to_string(r.patient_id), fmt_num(r.source_age), fmt_num(r.target_age),
                         fmt_num(r.horizon), fmt_num(r.psnr.db), r.psnr.exact_match ? "1" : "0", fmt_num(r.ssim),
                         opt_num(m[0]), opt_num(m[1]), opt_num(m[2]), opt_num(m[3]), fmt_num(r.region_mae.mean),
                         fmt_num(r.delta_rmae), hash});
    }
    json strata = json::array();
    for (const auto& s : res.strata) strata.push_back(stratum_json(s));
    const json summary{{"config_hash", hash},
                       {"predictor", copy_baseline ? "copy-baseline" : "delta-lfm"},
                       {"pairs", res.reports.size()},
                       {"overall", stratum_json(res.overall)},
                       {"strata", strata},
                       {"horizon_spearman", res.horizon_spearman}};
    const std::string suffix = copy_baseline ? "_copy" : "";
    write_bytes(dir / ("metrics" + suffix + ".csv"), csv);
    write_bytes(dir / ("summary" + suffix + ".json"), summary.dump(2) + "\n");
    log("evaluate: " + std::to_string(res.reports.size()) + " pairs, delta-rmae " + fmt_num(res.overall.delta_rmae.mean) +
        " +- " + fmt_num(res.overall.delta_rmae.std));
    return res;
}

PredictOutcome cmd_predict(const fs::path& dir, const PredictRequest& req)
{
    const Checkpoint ck = load_bundle(dir);
    const RunData run = load_run(dir);
    check_run_matches(run, ck.config, dir);
    const auto& p = run.cohort.patient(req.patient_id);
    if (req.visit >= p.visits.size())
        throw ValidationError("predict: patient " + std::to_string(p.id) + " has " + std::to_string(p.visits.size()) +
                              " visits; --visit " + std::to_string(req.visit) + " is out of range");
    const auto& src = p.visits[req.visit];
    const auto bundle = ck.bundle();
    const auto attrs = flow::Attributes::of(p);
    const std::uint64_t noise = predict_noise_seed(ck.config.seed);

    integrate::TrajectoryPrediction pred;
    if (req.horizon) {
        pred = integrate::predict_trajectory(bundle, src.image, src.age, attrs, *req.horizon, req.interval, noise);
    } else {
        std::vector<double> ages = req.ages;
        if (ages.empty())
            for (std::size_t j = req.visit + 1; j < p.visits.size(); ++j) ages.push_back(p.visits[j].age);
        if (ages.empty()) throw ValidationError("predict: no later visit to predict; pass --ages or --horizon");
        for (double a : ages)
            if (!(a > src.age))
                throw ValidationError("predict: target age " + fmt_num(a) + " is not after the source age " +
                                      fmt_num(src.age));
        pred.source_age = src.age;
        for (double a : ages) {
            auto one = integrate::predict_followup(bundle, src.image, src.age, attrs, a, noise);
            pred.query_ages.push_back(a);
            pred.latents.push_back(one.latents[0]);
            pred.images.push_back(one.images[0]);
            pred.steps.push_back(one.steps[0]);
        }
    }

    const std::string hash = config_hash(ck.config);
    fs::path out_dir = dir / "predict" / ("patient_" + std::to_string(p.id) + "_visit_" + std::to_string(req.visit));
    if (req.horizon) out_dir /= "trajectory_" + fmt_num(*req.horizon) + "y_every_" + fmt_num(req.interval) + "y";
    PredictOutcome out;
    out.ages = pred.query_ages;
    write_pgm(out_dir / "source.pgm", src.image, "source age " + age_tag(src.age), hash, out);
    for (std::size_t k = 0; k < pred.images.size(); ++k) {
        const double age = pred.query_ages[k];
        const std::string tag = age_tag(age);
        const auto& im = pred.images[k];
        write_pgm(out_dir / ("pred_" + tag + ".pgm"), im, "prediction age " + tag, hash, out);
        write_pgm(out_dir / ("progression_" + tag + ".pgm"), percentile_normalize(abs_diff(im, src.image)),
                  "|prediction - source| p1-p99", hash, out);
        for (const auto& v : p.visits)
            if (std::abs(v.age - age) < 1e-9) {
                write_pgm(out_dir / ("truth_" + tag + ".pgm"), v.image, "ground truth age " + tag, hash, out);
                write_pgm(out_dir / ("residual_" + tag + ".pgm"), percentile_normalize(abs_diff(im, v.image)),
                          "|prediction - truth| p1-p99", hash, out);
            }
    }
    log("predict: " + std::to_string(pred.images.size()) + " predictions -> " + out_dir.string());
    return out;
}

void cmd_export_latents(const fs::path& dir)
{
    const fs::path bundle_path = dir / "bundle.ckpt";
    const fs::path ae_path = dir / "ae.ckpt";
    if (!fs::exists(bundle_path) && !fs::exists(ae_path))
        throw IoError("no checkpoint in " + dir.string() + " (run train-ae first)");
    const Checkpoint ck = load_checkpoint(fs::exists(bundle_path) ? bundle_path : ae_path);
    const RunData run = load_run(dir);
    check_run_matches(run, ck.config, dir);

    std::map<std::int64_t, std::string> split_of;
    for (auto id : run.split.train) split_of[id] = "train";
    for (auto id : run.split.val) split_of[id] = "val";
    for (auto id : run.split.test) split_of[id] = "test";

    struct Row {
        const cohort::PatientRecord* p;
        double age;
        double nuc;
        Tensor U;
    };
    std::vector<Row> rows;
    std::vector<Tensor> flat;
    for (const auto* p : by_id(run.cohort))
        for (const auto& v : p->visits) {
            auto s = latent::encode(ck.ae, v.image);
            const auto& f = s.factors();
            rows.push_back({p, v.age, latent::nuclear_norm(f.S), f.U});
            flat.push_back(s.mean.reshaped({s.mean.size()}));
        }
    const auto pcs = pca_2d(flat);

    std::vector<std::string> header = {"patient_id", "age", "status", "split", "nuclear_norm"};
    const std::size_t nu = rows.empty() ? 0 : rows[0].U.size();
    for (std::size_t k = 0; k < nu; ++k) header.push_back("u_" + std::to_string(k));
    header.insert(header.end(), {"pca_1", "pca_2", "config_hash"});
    const std::string hash = config_hash(ck.config);
    std::string csv = join_row(header);
    for (std::size_t i = 0; i < rows.size(); ++i) {
        const auto& r = rows[i];
        std::vector<std::string> cells = {std::to_string(r.p->id), fmt_num(r.age), std::to_string(r.p->status),
                                          split_of.count(r.p->id) ? split_of[r.p->id] : "none", fmt_num(r.nuc)};
        for (double u : r.U.storage()) cells.push_back(fmt_num(u));
        cells.insert(cells.end(), {fmt_num(pcs[i][0]), fmt_num(pcs[i][1]), hash});
        csv += join_row(cells);
    }
    write_bytes(dir / "latents.csv", csv);
    log("export-latents: " + std::to_string(rows.size()) + " scans -> " + (dir / "latents.csv").string());
}

std::vector<metrics::SensitivityRow> cmd_sensitivity(const ExperimentConfig& cfg, const fs::path& dir)
{
    cfg.validate();
    const auto rows = metrics::sensitivity_table(cfg.sensitivity);
    const std::string hash = config_hash(cfg);
    std::string csv = join_row({"sigma", "mean", "std", "bias", "config_hash"});
    for (const auto& r : rows) csv += join_row({fmt_num(r.sigma), fmt_num(r.mean), fmt_num(r.std), fmt_num(r.bias), hash});
    write_bytes(dir / "sensitivity.csv", csv);
    log("sensitivity: " + std::to_string(rows.size()) + " rows -> " + (dir / "sensitivity.csv").string());
    return rows;
}

EvalOutcome cmd_ablate(const ExperimentConfig& cfg, const fs::path& dir, const std::string& name)
{
    const fs::path sub = dir / name;
    log("ablate: " + name + " -> " + sub.string());
    cmd_gen_data(cfg, sub);
    cmd_train_ae(cfg, sub);
    cmd_train_flow(cfg, sub);
    return cmd_evaluate(sub, false);
}

} // namespace dlfm::cli
