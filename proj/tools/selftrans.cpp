#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "selftrans/codec.hpp"
#include "selftrans/config.hpp"
#include "selftrans/datasets.hpp"
#include "selftrans/errors.hpp"
#include "selftrans/evaluate.hpp"
#include "selftrans/metrics.hpp"
#include "selftrans/sampler.hpp"
#include "selftrans/trainer.hpp"

namespace fs = std::filesystem;
using namespace st;

namespace {

enum ExitCode { kOk = 0, kOther = 1, kConfig = 2, kNumeric = 3, kIo = 4 };

struct Common {
    std::string config_path;
    std::vector<std::string> overrides;
    bool quiet = false;

    RunConfig load() const {
        if (config_path.empty()) return parse_config_text("", overrides);
        return parse_config(config_path, overrides);
    }
};

void add_common(CLI::App* cmd, Common& c) {
    cmd->add_option("--config", c.config_path, "TOML run config");
    cmd->add_option("--set", c.overrides, "Override a config key (key=value), repeatable");
    cmd->add_flag("--quiet", c.quiet, "Suppress progress output");
}

void log(const Common& c, const std::string& msg) {
    if (!c.quiet) std::fprintf(stderr, "%s\n", msg.c_str());
}

int cmd_gen_data(const Common& c, const std::string& out) {
    const RunConfig cfg = c.load();
    const fs::path dir = out.empty() ? fs::path(cfg.output_dir) / "data" : fs::path(out);
    const ImageSet set = load_images(cfg);
    write_image_folder(set, dir);
    log(c, "wrote " + std::to_string(set.count) + " images to " + dir.string());
    return kOk;
}

int cmd_train_codec(const Common& c) {
    const RunConfig cfg = c.load();
    const fs::path dir = cfg.codec_path();
    if (dir.has_parent_path()) fs::create_directories(dir.parent_path());
    std::ofstream csv(dir.string() + ".log.csv");
    csv << "step,total,recon,kl\n";
    const int64_t every = std::max<int64_t>(1, cfg.codec.steps / 20);
    const double mae = build_codec(cfg, [&](const CodecStepLog& s) {
        csv << s.step << ',' << s.total << ',' << s.recon << ',' << s.kl << '\n';
        if ((s.step + 1) % every == 0)
            log(c, "[codec] step " + std::to_string(s.step + 1) + " recon " + std::to_string(s.recon) + " kl " +
                       std::to_string(s.kl));
    });
    log(c, "codec saved to " + dir.string() + " (reconstruction MAE " + std::to_string(mae) + ")");
    return kOk;
}

int cmd_train_embedder(const Common& c) {
    const RunConfig cfg = c.load();
    const double accuracy = build_embedder(cfg);
    log(c, "embedder saved to " + cfg.embedder_path().string() + " (held-out accuracy " + std::to_string(accuracy) +
               ")");
    return kOk;
}

int cmd_train(const Common& c, TrainMode mode, const std::string& run_dir, std::optional<int64_t> halt_after,
              bool no_resume) {
    const RunConfig cfg = c.load();
    const LatentDataset data = load_latent_dataset(cfg);
    TrainOptions opts;
    opts.halt_after_step = halt_after;
    opts.resume = !no_resume;
    opts.verbose = !c.quiet;
    const fs::path dir = run_dir.empty() ? default_run_dir(cfg, mode) : fs::path(run_dir);
    const TrainSummary s = train(mode, cfg, data, dir, opts);
    log(c, std::string(mode_name(mode)) + ": " + std::to_string(s.steps_done) + "/" +
               std::to_string(s.schedule.total_steps) + " steps" + (s.halted ? " (halted)" : "") + ", checkpoint " +
               s.checkpoint.string());
    if (mode == TrainMode::Stage2) log(c, "teacher digest " + s.teacher_digest_after + " (unchanged)");
    return kOk;
}

int cmd_sample(const Common& c, const std::string& checkpoint, const std::string& label, int64_t count,
               const std::string& out, std::optional<uint64_t> seed) {
    const RunConfig cfg = c.load();
    const fs::path ckpt = checkpoint.empty() ? default_run_dir(cfg, TrainMode::Stage2) / "checkpoint" : fs::path(checkpoint);
    if (!fs::exists(ckpt / "manifest.json")) throw IoError("missing model checkpoint: " + ckpt.string());
    const auto archive = CheckpointArchive::load(ckpt);
    const Backbone model = load_backbone(archive, true);
    const auto codec_archive = CheckpointArchive::load(cfg.codec_path());
    const LatentCodec codec = LatentCodec::from_archive(codec_archive);
    const LatentStats stats = latent_stats_from_archive(codec_archive);
    SampleRequest req;
    for (int64_t i = 0; i < count; ++i) {
        if (label == "all")
            req.labels.push_back(ConditionLabel::of(i % model.config().num_classes));
        else if (label == "null")
            req.labels.push_back(ConditionLabel::null());
        else {
            int64_t k = -1;
            try {
                k = std::stoll(label);
            } catch (const std::exception&) {
                throw ConfigError("--label: expected a class index, 'null' or 'all'");
            }
            if (k < 0 || k >= model.config().num_classes) throw ConfigError("--label: out of range");
            req.labels.push_back(ConditionLabel::of(k));
        }
    }
    req.num_steps = cfg.sample.num_steps;
    req.cfg_scale = cfg.sample.cfg_scale;
    req.seed = seed.value_or(cfg.seed);
    const Tensor images = sample_images(model, codec, stats, req);
    const fs::path path = out.empty() ? fs::path(cfg.output_dir) / "samples.png" : fs::path(out);
    write_sample_grid(path, images, req, config_hash(cfg));
    log(c, "wrote " + path.string());
    return kOk;
}

int cmd_eval(const Common& c, const std::string& checkpoint, const std::string& out, std::optional<int64_t> budget) {
    const RunConfig cfg = c.load();
    const fs::path ckpt = checkpoint.empty() ? default_run_dir(cfg, TrainMode::Stage2) / "checkpoint" : fs::path(checkpoint);
    const Evaluator evaluator(cfg);
    const MetricsReport report = evaluator.evaluate(ckpt, budget);
    const fs::path path = out.empty() ? ckpt.parent_path() / "metrics.txt" : fs::path(out);
    report.save(path);
    std::cout << report.to_text();
    return kOk;
}

int cmd_ablate(const Common& c, const std::string& grid_path, const std::string& out) {
    const RunConfig cfg = c.load();
    const GridSpec grid = parse_grid_file(grid_path);
    const fs::path dir = out.empty() ? fs::path(cfg.output_dir) / "ablate" : fs::path(out);
    std::optional<LatentDataset> data;
    std::optional<Evaluator> evaluator;
    if (!grid.empty()) {
        data.emplace(load_latent_dataset(cfg));
        evaluator.emplace(cfg);
    }
    const CellRunner runner = grid.empty() ? CellRunner{} : default_cell_runner(*data, *evaluator, !c.quiet);
    const auto rows = run_ablation_grid(cfg, grid, dir, runner);
    std::cout << format_grid_report(rows);
    return kOk;
}

std::vector<double> parse_list(const std::string& s) {
    std::vector<double> out;
    std::stringstream ss(s);
    for (std::string item; std::getline(ss, item, ',');)
        if (!item.empty()) out.push_back(std::stod(item));
    return out;
}

int cmd_visualize(const Common& c, const std::string& checkpoint, const std::string& layers_arg,
                  const std::string& ts_arg, int64_t count, const std::string& out) {
    const RunConfig cfg = c.load();
    const fs::path ckpt = checkpoint.empty() ? default_run_dir(cfg, TrainMode::Stage1) / "checkpoint" : fs::path(checkpoint);
    if (!fs::exists(ckpt / "manifest.json")) throw IoError("missing model checkpoint: " + ckpt.string());
    const auto archive = CheckpointArchive::load(ckpt);
    const Backbone model = load_backbone(archive, true);
    std::set<int> layers;
    if (layers_arg.empty()) {
        const LayerPair lp = cfg.guidance.layers(model.config().depth);
        layers = {lp.guided, lp.guiding};
    } else {
        for (double l : parse_list(layers_arg)) layers.insert(static_cast<int>(l));
    }
    const std::vector<double> ts = parse_list(ts_arg);
    if (ts.empty()) throw ConfigError("--t: at least one time value is required");

    const auto codec_archive = CheckpointArchive::load(cfg.codec_path());
    const LatentCodec codec = LatentCodec::from_archive(codec_archive);
    const LatentStats stats = latent_stats_from_archive(codec_archive);
    const ImageSet held = heldout_images(cfg, count);
    std::vector<int64_t> all;
    for (int64_t i = 0; i < held.count; ++i) all.push_back(i);
    Tensor z;
    {
        NoGradGuard no_grad;
        z = stats.standardize(codec.encode(held.batch(all), 0, true).mean);
    }
    const auto cond = labels_from_indices(held.labels);
    const fs::path dir = out.empty() ? ckpt.parent_path() / "panels" : fs::path(out);
    const auto files = metrics::export_feature_panel(model, layers, ts, z, cond, cfg.seed, dir);
    log(c, "wrote " + std::to_string(files.size()) + " panels to " + dir.string());

    const guidance::GuideTeacher teacher = guidance::GuideTeacher::load(archive);
    const int guiding = cfg.guidance.layers(model.config().depth).guiding;
    const Separability sep =
        separability_probe(teacher, z, held.labels, guiding, cfg.eval.feature_t, cfg.guidance.omega, cfg.seed);
    std::cout << "silhouette_fc=" << sep.silhouette_fc << "\nsilhouette_fg=" << sep.silhouette_fg
              << "\nlayer=" << guiding << "\nt=" << cfg.eval.feature_t << "\nomega=" << cfg.guidance.omega << "\n";
    return kOk;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Two-stage self-guided diffusion transformer training on desk-scale data"};
    app.require_subcommand(1);
    Common common;

    std::string out, checkpoint, run_dir, grid, label = "all", layers, ts = "0.5,0.7";
    bool baseline = false, no_resume = false;
    std::optional<int64_t> halt_after, budget;
    std::optional<uint64_t> seed;
    int64_t count = 16;

    auto* gen = app.add_subcommand("gen-data", "Materialize the dataset as PNGs plus manifest");
    add_common(gen, common);
    gen->add_option("--out", out, "Output directory (default <output_dir>/data)");

    auto* codec = app.add_subcommand("train-codec", "Train the latent codec and its latent statistics");
    add_common(codec, common);

    auto* emb = app.add_subcommand("train-embedder", "Train the evaluation embedder");
    add_common(emb, common);

    auto* guide = app.add_subcommand("train-guide", "Stage 1: train the guiding model with VAE alignment");
    add_common(guide, common);
    guide->add_option("--run-dir", run_dir, "Run directory (default <output_dir>/guide)");
    guide->add_option("--halt-after", halt_after, "Stop with a checkpoint after this many steps");
    guide->add_flag("--no-resume", no_resume, "Ignore an existing checkpoint");

    auto* tr = app.add_subcommand("train", "Stage 2 self-guided training, or the plain baseline");
    add_common(tr, common);
    tr->add_flag("--baseline", baseline, "Train the baseline with the diffusion loss only");
    tr->add_option("--run-dir", run_dir, "Run directory (default <output_dir>/student or /baseline)");
    tr->add_option("--halt-after", halt_after, "Stop with a checkpoint after this many steps");
    tr->add_flag("--no-resume", no_resume, "Ignore an existing checkpoint");

    auto* smp = app.add_subcommand("sample", "Generate an image grid from a checkpoint");
    add_common(smp, common);
    smp->add_option("--checkpoint", checkpoint, "Model checkpoint directory");
    smp->add_option("--label", label, "Class index, 'null', or 'all' (cycle classes)");
    smp->add_option("--count", count, "Number of images");
    smp->add_option("--seed", seed, "Sampling seed (default: config seed)");
    smp->add_option("--out", out, "Output PNG path");

    auto* ev = app.add_subcommand("eval", "FID-desk, IS analog and silhouette for a checkpoint");
    add_common(ev, common);
    ev->add_option("--checkpoint", checkpoint, "Model checkpoint directory");
    ev->add_option("--num-samples", budget, "Sample budget (default eval.num_samples)");
    ev->add_option("--out", out, "Report path");

    auto* abl = app.add_subcommand("ablate", "Run a Stage 2 ablation grid");
    add_common(abl, common);
    abl->add_option("--grid", grid, "TOML file with a [grid] table")->required();
    abl->add_option("--out", out, "Grid directory (default <output_dir>/ablate)");

    auto* vis = app.add_subcommand("visualize", "PCA feature panels and class separability");
    add_common(vis, common);
    vis->add_option("--checkpoint", checkpoint, "Model checkpoint directory (default: guide)");
    vis->add_option("--layers", layers, "Comma-separated 1-based layers (default: guided,guiding)");
    vis->add_option("--t", ts, "Comma-separated time values");
    vis->add_option("--count", count, "Held-out images per panel");
    vis->add_option("--out", out, "Panel directory");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? kOk : kConfig;
    }

    try {
        if (*gen) return cmd_gen_data(common, out);
        if (*codec) return cmd_train_codec(common);
        if (*emb) return cmd_train_embedder(common);
        if (*guide) return cmd_train(common, TrainMode::Stage1, run_dir, halt_after, no_resume);
        if (*tr) return cmd_train(common, baseline ? TrainMode::Baseline : TrainMode::Stage2, run_dir, halt_after, no_resume);
        if (*smp) return cmd_sample(common, checkpoint, label, count, out, seed);
        if (*ev) return cmd_eval(common, checkpoint, out, budget);
        if (*abl) return cmd_ablate(common, grid, out);
        if (*vis) return cmd_visualize(common, checkpoint, layers, ts, count, out);
    } catch (const ConfigError& e) {
        std::fprintf(stderr, "config error: %s\n", e.what());
        return kConfig;
    } catch (const NumericError& e) {
        std::fprintf(stderr, "numeric error: %s\n", e.what());
        return kNumeric;
    } catch (const IoError& e) {
        std::fprintf(stderr, "I/O error: %s\n", e.what());
        return kIo;
    } catch (const std::filesystem::filesystem_error& e) {
        std::fprintf(stderr, "I/O error: %s\n", e.what());
        return kIo;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return kOther;
    }
    return kOther;
}
