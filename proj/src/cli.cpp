#include "mpsynth/cli.hpp"

#include "mpsynth/errviz.hpp"
#include "mpsynth/gradcheck.hpp"
#include "mpsynth/tensor_io.hpp"
#include "mpsynth/trainer.hpp"

#include <CLI11.hpp>

#include <cmath>
#include <cstdio>
#include <iostream>
#include <sstream>

namespace mpsynth {

namespace fs = std::filesystem;

namespace {

constexpr int kGradcheckFailed = 3;

RgbImage grayscale_image(const Tensor& t)
{
    const std::size_t h = t.dim(t.rank() - 2), w = t.dim(t.rank() - 1);
    if (t.size() != h * w)
        throw ContractError("expected a single image plane, got " + shape_string(t.shape()));
    RgbImage img{h, w, std::vector<std::uint8_t>(3 * h * w)};
    for (std::size_t i = 0; i < h * w; ++i) {
        const auto v = static_cast<std::uint8_t>(std::clamp(std::floor(255.0 * t[i] + 0.5), 0.0, 255.0));
        img.pixels[3 * i] = img.pixels[3 * i + 1] = img.pixels[3 * i + 2] = v;
    }
    return img;
}

CaseRecord read_case_dir(const fs::path& dir, const NetConfig& net)
{
    if (!fs::is_directory(dir))
        throw IoError("case directory '" + dir.string() + "' does not exist");
    CaseRecord c;
    c.id = dir.filename().string();
    for (const auto& name : net.param_order) {
        const Tensor t = read_tensor(dir / (name + ".mpt"));
        if (name == "p1")
            c.p1 = t;
        else if (name == "p2")
            c.p2 = t;
        else
            c.p3 = t;
    }
    if (fs::exists(dir / "y.mpt"))
        c.y = read_tensor(dir / "y.mpt");
    return c;
}

std::vector<std::uint64_t> parse_seeds(const std::string& text)
{
    std::vector<std::uint64_t> seeds;
    std::stringstream ss(text);
    std::string item;
    while (std::getline(ss, item, ',')) {
        try {
            std::size_t used = 0;
            seeds.push_back(std::stoull(item, &used));
            if (used != item.size())
                throw std::invalid_argument(item);
        } catch (const std::exception&) {
            throw ConfigError("--seeds expects comma-separated integers, got '" + text + "'");
        }
    }
    if (seeds.empty())
        throw ConfigError("--seeds is empty");
    return seeds;
}

} // namespace

int dispatch(const std::vector<std::string>& args, std::ostream& out, std::ostream& err)
{
    CLI::App app{"Multi-parameter image synthesis toolkit", "mpsynth"};
    app.require_subcommand(1);

    // gen-data
    auto* gen = app.add_subcommand("gen-data", "Generate a synthetic phantom dataset");
    std::string gen_out;
    std::size_t gen_cases = 200, gen_size = 32;
    std::uint64_t gen_seed = 0;
    double gen_split = 0.8;
    gen->add_option("--out", gen_out, "Output directory")->required();
    gen->add_option("--cases", gen_cases, "Number of cases (>= 5)")->capture_default_str();
    gen->add_option("--size", gen_size, "Image side, a multiple of 16")->capture_default_str();
    gen->add_option("--seed", gen_seed, "Dataset seed")->capture_default_str();
    gen->add_option("--split", gen_split, "Train fraction")->capture_default_str();

    // train
    auto* tr = app.add_subcommand("train", "Train a model on a dataset");
    std::string tr_config, tr_data, tr_out;
    bool tr_quiet = false;
    tr->add_option("--config", tr_config, "config.json (defaults when omitted)");
    tr->add_option("--data", tr_data, "Dataset directory or manifest.json")->required();
    tr->add_option("--out", tr_out, "Run directory")->required();
    tr->add_flag("--quiet", tr_quiet, "No per-epoch progress on stderr");

    // synth
    auto* sy = app.add_subcommand("synth", "Synthesize the target image for one case");
    std::string sy_ckpt, sy_case, sy_png, sy_tensor;
    sy->add_option("--ckpt", sy_ckpt, "Checkpoint directory")->required();
    sy->add_option("--case-dir", sy_case, "Directory holding p1.mpt, p2.mpt, p3.mpt")->required();
    sy->add_option("--out-png", sy_png, "Grayscale PNG of the synthesis");
    sy->add_option("--out-tensor", sy_tensor, "MPT1 tensor of the synthesis");

    // eval
    auto* ev = app.add_subcommand("eval", "Evaluate a checkpoint on the test split");
    std::string ev_ckpt, ev_data, ev_report, ev_peak = "observed", ev_split = "test";
    bool ev_identity = false;
    ev->add_option("--ckpt", ev_ckpt, "Checkpoint directory");
    ev->add_option("--data", ev_data, "Dataset directory or manifest.json")->required();
    ev->add_option("--report", ev_report, "metrics.csv output path")->required();
    ev->add_flag("--identity", ev_identity, "Score the targets against themselves (no checkpoint)");
    ev->add_option("--peak", ev_peak, "PSNR peak: observed or data-range")
        ->check(CLI::IsMember({"observed", "data-range"}))
        ->capture_default_str();
    ev->add_option("--split", ev_split, "Split to evaluate")->check(CLI::IsMember({"train", "test"}))->capture_default_str();

    // errmap
    auto* em = app.add_subcommand("errmap", "Render an absolute-error color map");
    std::string em_pred, em_truth, em_out;
    double em_max = kDefaultMaxDisplay;
    em->add_option("--pred", em_pred, "Predicted image (MPT1)")->required();
    em->add_option("--truth", em_truth, "Reference image (MPT1)")->required();
    em->add_option("--out", em_out, "PNG output path")->required();
    em->add_option("--max-display", em_max, "Error mapped to full red")->capture_default_str();

    // gradcheck
    auto* gc = app.add_subcommand("gradcheck", "Finite-difference gradient checks");
    std::string gc_scope = "op";
    std::optional<double> gc_tol;
    std::uint64_t gc_seed = 1;
    double gc_eps = 1e-3;
    gc->add_option("--scope", gc_scope, "op, block or full")
        ->check(CLI::IsMember({"op", "block", "full"}))
        ->capture_default_str();
    gc->add_option("--tol", gc_tol, "Relative error tolerance (1e-4, or 1e-3 for full)");
    gc->add_option("--eps", gc_eps, "Central difference step")->capture_default_str();
    gc->add_option("--seed", gc_seed, "Probe seed")->capture_default_str();

    // ablate
    auto* ab = app.add_subcommand("ablate", "Ablation study over variants or input counts");
    std::string ab_config, ab_data, ab_out, ab_seeds = "0,1,2", ab_study = "variants";
    bool ab_quiet = false;
    ab->add_option("--config", ab_config, "Base config.json (defaults when omitted)");
    ab->add_option("--data", ab_data, "Dataset directory or manifest.json")->required();
    ab->add_option("--seeds", ab_seeds, "Comma-separated seeds")->capture_default_str();
    ab->add_option("--out", ab_out, "Output directory")->required();
    ab->add_option("--study", ab_study, "variants or inputs")
        ->check(CLI::IsMember({"variants", "inputs"}))
        ->capture_default_str();
    ab->add_flag("--quiet", ab_quiet, "No progress on stderr");

    std::vector<std::string> reversed(args.rbegin(), args.rend());
    if (!reversed.empty())
        reversed.pop_back(); // program name
    try {
        app.parse(reversed);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e, out, err);
        return code == 0 ? 0 : 1;
    }

    try {
        const LogFn progress = [&err](const std::string& s) { err << s << std::endl; };
        if (*gen) {
            const auto m = build_dataset(gen_out, gen_cases, gen_size, gen_seed, gen_split);
            out << "wrote " << m.cases.size() << " cases (" << m.entries(Split::train).size() << " train, "
                << m.entries(Split::test).size() << " test) to " << gen_out << "\n";
        } else if (*tr) {
            const TrainConfig cfg = tr_config.empty() ? TrainConfig{} : load_config(tr_config);
            const auto m = load_manifest(tr_data);
            const auto r = train(cfg, m, tr_out, tr_quiet ? LogFn{} : progress);
            out << "trained " << r.log.size() << " steps into " << tr_out << "\n";
            if (r.test_metrics)
                out << "test ssim " << r.test_metrics->mean.ssim << " nmse " << r.test_metrics->mean.nmse << "\n";
        } else if (*sy) {
            if (sy_png.empty() && sy_tensor.empty())
                throw ConfigError("synth needs --out-png or --out-tensor");
            const ModelCheckpoint ck = checkpoint_load(sy_ckpt);
            const CaseRecord c = read_case_dir(sy_case, ck.config.net);
            const Tensor y = synthesize(ck.generator, ck.config.net, {c}).front();
            if (!sy_tensor.empty())
                write_tensor(sy_tensor, y);
            if (!sy_png.empty())
                write_png(sy_png, grayscale_image(y));
        } else if (*ev) {
            if (ev_ckpt.empty() == !ev_identity)
                throw ConfigError("eval needs exactly one of --ckpt or --identity");
            const auto m = load_manifest(ev_data);
            const auto cases = load_split(m, ev_split == "test" ? Split::test : Split::train);
            if (cases.empty())
                throw ConfigError("dataset has no " + ev_split + " cases");
            std::vector<Tensor> synth;
            if (ev_identity) {
                for (const auto& c : cases)
                    synth.push_back(c.y);
            } else {
                const ModelCheckpoint ck = checkpoint_load(ev_ckpt);
                synth = synthesize(ck.generator, ck.config.net, cases);
            }
            std::vector<EvalPair> pairs;
            for (std::size_t i = 0; i < cases.size(); ++i)
                pairs.push_back({cases[i].id, cases[i].y, synth[i]});
            PerceptualNet net;
            const auto report = evaluate_pairs(pairs, net, LossWeights{}.alpha,
                                               ev_peak == "observed" ? PsnrPeak::observed_max : PsnrPeak::data_range);
            write_metrics_csv(ev_report, report);
            out << "mean ssim " << report.mean.ssim << " nmse " << report.mean.nmse << " over " << report.rows.size()
                << " cases\n";
        } else if (*em) {
            write_png(em_out, error_map(read_tensor(em_truth), read_tensor(em_pred), em_max));
        } else if (*gc) {
            const GradScope scope = parse_grad_scope(gc_scope);
            GradCheckOptions opt;
            opt.tol = gc_tol.value_or(scope == GradScope::full ? 1e-3 : 1e-4);
            opt.eps = gc_eps;
            opt.seed = gc_seed;
            bool ok = true;
            for (const auto& r : run_gradcheck(scope, opt)) {
                char line[256];
                std::snprintf(line, sizeof line, "%-40s %s max_rel_error=%.3e probes=%zu discarded=%zu\n",
                              r.op.c_str(), r.pass ? "PASS" : "FAIL", r.max_rel_error, r.probe_count, r.discarded);
                out << line;
                ok = ok && r.pass;
            }
            if (!ok)
                return kGradcheckFailed;
        } else if (*ab) {
            const TrainConfig cfg = ab_config.empty() ? TrainConfig{} : load_config(ab_config);
            const auto m = load_manifest(ab_data);
            const auto seeds = parse_seeds(ab_seeds);
            const auto rows = ab_study == "variants" ? run_ablation(cfg, m, seeds, ab_out, ab_quiet ? LogFn{} : progress)
                                                     : run_input_study(cfg, m, seeds, ab_out, ab_quiet ? LogFn{} : progress);
            for (const auto& r : rows)
                out << r.label << " seed " << r.seed << " ssim " << r.mean.ssim << "\n";
        }
    } catch (const Error& e) {
        err << "error: " << e.what() << "\n";
        return e.exit_code();
    } catch (const std::exception& e) {
        err << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}

int dispatch(int argc, const char* const* argv)
{
    return dispatch(std::vector<std::string>(argv, argv + argc), std::cout, std::cerr);
}

} // namespace mpsynth
