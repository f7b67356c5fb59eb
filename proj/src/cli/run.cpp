#include "dlfm/pipeline.hpp"

#include "CLI11.hpp"

#include <iostream>

namespace dlfm::cli {

namespace {

struct Options {
    std::string config;
    std::optional<std::uint64_t> seed;
    std::string out;
    bool no_arc = false, no_rank = false, cosine = false, simple_rank = false;
    std::string fm_sampling;
};

ExperimentConfig resolve_config(const Options& o, const fs::path& out)
{
    ExperimentConfig cfg;
    if (!o.config.empty())
        cfg = load_config(o.config);
    else if (fs::exists(out / "config.json"))
        cfg = load_config(out / "config.json");
    if (o.seed) cfg.seed = *o.seed;
    auto& ar = cfg.ae_train.arcrank;
    if (o.no_arc) ar.lambda_arc = 0.0;
    if (o.no_rank) ar.lambda_rank = 0.0;
    if (o.cosine) ar.angular = latent::AngularLoss::Cosine;
    if (o.simple_rank) ar.magnitude = latent::MagnitudeLoss::Simple;
    if (o.fm_sampling == "physical") cfg.flow.sampling_mode = flow::SamplingMode::Physical;
    if (o.fm_sampling == "temporal") cfg.flow.sampling_mode = flow::SamplingMode::Temporal;
    cfg.resolve();
    cfg.validate();
    return cfg;
}

std::string ablation_name(const Options& o)
{
    std::string n;
    auto add = [&](const char* s) { n += (n.empty() ? "" : "_") + std::string(s); };
    if (o.no_arc) add("no-arc");
    if (o.no_rank) add("no-rank");
    if (o.cosine) add("cosine");
    if (o.simple_rank) add("simple-rank");
    if (!o.fm_sampling.empty()) add(o.fm_sampling == "physical" ? "fm-physical" : "fm-temporal");
    return "ablate-" + (n.empty() ? std::string("baseline") : n);
}

} // namespace

int run(int argc, const char* const* argv)
{
    CLI::App app{"Synthetic longitudinal latent flow-matching pipeline", "delta-lfm"};
    app.require_subcommand(1);
    Options o;
    app.add_option("--config", o.config, "experiment config (JSON); defaults to OUT/config.json when present");
    app.add_option("--seed", o.seed, "master seed");
    app.add_option("--out", o.out, "run directory")->default_str("runs/default");

    auto ablation_flags = [&](CLI::App* s) {
        s->add_flag("--no-arc", o.no_arc, "disable the angular (Arc) term");
        s->add_flag("--no-rank", o.no_rank, "disable the Rank/Pull term");
        s->add_flag("--cosine", o.cosine, "cosine surrogate instead of Arc");
        s->add_flag("--simple-rank", o.simple_rank, "simple magnitude hinge instead of Rank+Pull");
        s->add_option("--fm-sampling", o.fm_sampling, "flow time sampling")
            ->check(CLI::IsMember({"physical", "temporal"}));
    };

    auto* gen = app.add_subcommand("gen-data", "generate the synthetic cohort and split");
    auto* tae = app.add_subcommand("train-ae", "train the autoencoder");
    auto* tfl = app.add_subcommand("train-flow", "train the latent velocity field");
    auto* pre = app.add_subcommand("predict", "predict follow-up scans for one visit");
    auto* eva = app.add_subcommand("evaluate", "score all visit pairs of the test split");
    auto* exl = app.add_subcommand("export-latents", "write latents.csv with a PCA projection");
    auto* sen = app.add_subcommand("sensitivity", "noise sensitivity table of the change score");
    auto* abl = app.add_subcommand("ablate", "run the full pipeline into a subdirectory");
    for (auto* s : {gen, tae, tfl, pre, eva, exl, sen, abl}) s->fallthrough();
    for (auto* s : {gen, tae, tfl, abl}) ablation_flags(s);

    PredictRequest req;
    std::int64_t patient = -1;
    std::size_t visit = 0;
    double horizon = 0.0;
    pre->add_option("--patient", patient, "patient id")->required();
    pre->add_option("--visit", visit, "source visit index (0-based)");
    pre->add_option("--ages", req.ages, "target ages")->delimiter(',');
    auto* hopt = pre->add_option("--horizon", horizon, "trajectory horizon in years");
    pre->add_option("--interval", req.interval, "trajectory interval in years")->needs(hopt);
    hopt->excludes("--ages");

    bool copy_baseline = false;
    eva->add_flag("--copy-baseline", copy_baseline, "score the copy baseline instead of the model");

    std::optional<std::size_t> trials, pixels;
    std::vector<double> sigmas;
    sen->add_option("--trials", trials, "Monte-Carlo trials");
    sen->add_option("--pixels", pixels, "pixels per residual image");
    sen->add_option("--sigmas", sigmas, "noise levels")->delimiter(',');

    std::string abl_name;
    abl->add_option("--name", abl_name, "subdirectory name");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 1;
    }

    try {
        const fs::path out = o.out.empty() ? fs::path("runs/default") : fs::path(o.out);
        if (gen->parsed()) {
            cmd_gen_data(resolve_config(o, out), out);
        } else if (tae->parsed()) {
            cmd_train_ae(resolve_config(o, out), out);
        } else if (tfl->parsed()) {
            cmd_train_flow(resolve_config(o, out), out);
        } else if (pre->parsed()) {
            req.patient_id = patient;
            req.visit = visit;
            if (*hopt) req.horizon = horizon;
            cmd_predict(out, req);
        } else if (eva->parsed()) {
            const auto r = cmd_evaluate(out, copy_baseline);
            std::cout << "pairs " << r.reports.size() << " delta_rmae " << fmt_num(r.overall.delta_rmae.mean) << " +- "
                      << fmt_num(r.overall.delta_rmae.std) << " psnr " << fmt_num(r.overall.psnr.mean) << " ssim "
                      << fmt_num(r.overall.ssim.mean) << " region_mae " << fmt_num(r.overall.region_mae.mean) << "\n";
        } else if (exl->parsed()) {
            cmd_export_latents(out);
        } else if (sen->parsed()) {
            ExperimentConfig cfg = resolve_config(o, out);
            if (trials) cfg.sensitivity.n_trials = *trials;
            if (pixels) cfg.sensitivity.n_pixels = *pixels;
            if (!sigmas.empty()) cfg.sensitivity.sigmas = sigmas;
            for (const auto& r : cmd_sensitivity(cfg, out))
                std::cout << fmt_num(r.sigma) << " " << fmt_num(r.mean) << " " << fmt_num(r.std) << " "
                          << fmt_num(r.bias) << "\n";
        } else if (abl->parsed()) {
            const auto r = cmd_ablate(resolve_config(o, out), out, abl_name.empty() ? ablation_name(o) : abl_name);
            std::cout << "delta_rmae " << fmt_num(r.overall.delta_rmae.mean) << " +- "
                      << fmt_num(r.overall.delta_rmae.std) << "\n";
        }
    } catch (const IoError& e) {
        std::cerr << "delta-lfm: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "delta-lfm: " << e.what() << "\n";
        return 1;
    }
    return 0;
}

} // namespace dlfm::cli
