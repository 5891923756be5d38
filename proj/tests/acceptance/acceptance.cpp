// Runs every acceptance criterion and prints one PASS/FAIL line per criterion.
// Criteria 6-8 train the full-size models and only run with --long.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "gradient_oracle.hpp"
#include "selftrans/checkpoint.hpp"
#include "selftrans/errors.hpp"
#include "selftrans/evaluate.hpp"
#include "selftrans/hash.hpp"
#include "selftrans/metrics.hpp"
#include "selftrans/trainer.hpp"
#include "trainer_fixture.hpp"

namespace fs = std::filesystem;
using namespace st;
using namespace st::testing;

namespace {

struct Outcome {
    bool pass = false;
    std::string detail;
};

struct Criterion {
    int id;
    std::string name;
    bool long_running;
    std::function<Outcome()> run;
};

std::string num(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.6g", v);
    return buf;
}

fs::path g_workdir;
std::vector<std::string> g_long_overrides;

fs::path workdir(const std::string& name) {
    const fs::path dir = g_workdir / name;
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir;
}

/// Shared model for the trainer criteria: depth 4, D = 32 on 4-class 4x8x8 latents.
RunConfig trainer_config(const fs::path& dir) {
    RunConfig c = tiny_config(dir, 4, 32);
    c.dataset.num_classes = 4;
    c.guidance.guided_layer = 2;
    c.guidance.guiding_layer = 3;
    c.train.batch_size = 16;
    c.train.checkpoint_every = 500;
    c.validate();
    return c;
}

LatentDataset trainer_data() { return synthetic_latents(32, 4, 2024); }

std::string file_sha256(const fs::path& path) {
    const std::string bytes = read_file(path);
    return sha256_hex(bytes.data(), bytes.size());
}

// ---- fast criteria --------------------------------------------------------------

Outcome feature_cfg_identities() {
    ModelConfig m;
    m.depth = 4;
    m.hidden_dim = 32;
    m.heads = 2;
    m.latent_size = 8;
    m.num_classes = 4;
    m.freq_dim = 32;
    Backbone model(m, 1);
    randomize_params(model.parameters(), 2);
    const guidance::GuideTeacher teacher(std::move(model));
    double worst = 0.0;
    for (uint64_t trial = 0; trial < 4; ++trial) {
        const Tensor z = random_tensor({3, 4, 8, 8}, derive_seed(3, trial));
        const Tensor eps = random_tensor({3, 4, 8, 8}, derive_seed(4, trial));
        const auto t = flow::sample_timesteps(3, derive_seed(5, trial));
        const auto state = flow::forward_interpolate(z, eps, t);
        const auto cond = labels_from_indices(std::vector<int64_t>{0, 3, static_cast<int64_t>(trial % 4)});
        const std::vector<ConditionLabel> nulls(3, ConditionLabel::null());
        for (int layer = 1; layer <= 4; ++layer) {
            const Tensor f_c = teacher.features(state, cond, layer);
            const Tensor f_u = teacher.features(state, nulls, layer);
            const Tensor g1 = guidance::extract_guided_feature(teacher, state, cond, layer, 1.0);
            const Tensor g0 = guidance::extract_guided_feature(teacher, state, cond, layer, 0.0);
            for (int64_t i = 0; i < f_c.numel(); ++i) {
                worst = std::max(worst, static_cast<double>(std::abs(g1.data()[i] - f_c.data()[i])));
                worst = std::max(worst, static_cast<double>(std::abs(g0.data()[i] - f_u.data()[i])));
            }
        }
    }
    return {worst < 1e-6, "max |f_g - f_c| (w=1), |f_g - f_u| (w=0) = " + num(worst)};
}

Outcome gradient_oracle() {
    const auto checks = micro_model_gradient_check(1234);
    Outcome o{true, ""};
    for (const auto& c : checks) {
        o.pass = o.pass && c.checked == 20 && c.max_relative_error < 1e-2;
        o.detail += c.loss + " " + num(c.max_relative_error) + " (" + std::to_string(c.checked) + " params); ";
    }
    return o;
}

Eigen::MatrixXd gaussian_draws(int64_t n, int d, uint64_t seed, const Eigen::VectorXd& mean) {
    Rng rng(seed);
    Eigen::MatrixXd x(n, d);
    for (int64_t i = 0; i < n; ++i)
        for (int j = 0; j < d; ++j) x(i, j) = mean(j) + rng.normal();
    return x;
}

Outcome analytic_fid() {
    Eigen::VectorXd m = Eigen::VectorXd::Zero(8);
    m(0) = 1.0;
    m(3) = -1.0;
    m(5) = std::sqrt(2.0);  // |m|^2 = 4
    const auto a = metrics::fit_stats(gaussian_draws(10000, 8, 31, Eigen::VectorXd::Zero(8)));
    const auto b = metrics::fit_stats(gaussian_draws(10000, 8, 32, m));
    const double fid = metrics::frechet_distance(a, b);
    return {std::abs(fid - 4.0) <= 0.02 * 4.0, "FID = " + num(fid) + " (expected 4 +- 2%)"};
}

struct Stage2Run {
    std::vector<StepInfo> steps;
    TrainSummary summary;
    std::string teacher_file_before, teacher_file_after;
    std::string teacher_params_before, teacher_params_after;
};

const Stage2Run& early_stop_run() {
    static std::optional<Stage2Run> run;
    if (run) return *run;
    const fs::path dir = workdir("early_stop");
    RunConfig c = trainer_config(dir);
    c.train.total_steps = 2000;
    c.guidance.stop_step = 1000;
    c.guidance.teacher_steps = 300;
    c.validate();
    const auto data = trainer_data();
    train_teacher(c, data);

    Stage2Run r;
    r.teacher_file_before = file_sha256(c.guide_path() / "tensors.bin");
    r.teacher_params_before = guidance::GuideTeacher::load(CheckpointArchive::load(c.guide_path())).digest();
    TrainOptions opts;
    opts.on_step = [&](const StepInfo& s) { r.steps.push_back(s); };
    r.summary = train(TrainMode::Stage2, c, data, dir / "student", opts);
    r.teacher_file_after = file_sha256(c.guide_path() / "tensors.bin");
    r.teacher_params_after = guidance::GuideTeacher::load(CheckpointArchive::load(c.guide_path())).digest();
    run = std::move(r);
    return *run;
}

Outcome early_stop_exactness() {
    const Stage2Run& r = early_stop_run();
    const auto rows = LossTrace::load(r.summary.trace).records();
    int64_t bad = 0, before = 0, after = 0;
    if (rows.size() != 2000 || r.steps.size() != 2000) return {false, "expected 2000 rows, got " + std::to_string(rows.size())};
    for (std::size_t i = 0; i < rows.size(); ++i) {
        const auto& row = rows[i];
        const auto& step = r.steps[i];
        if (row.step < 1000) {
            ++before;
            if (row.lambda_effective != 0.5 || step.record.lambda_effective != 0.5) ++bad;
        } else {
            ++after;
            if (row.lambda_effective != 0.0 || row.l_guide != 0.0 || step.total_loss != step.record.l_diff) ++bad;
        }
    }
    return {bad == 0, std::to_string(before) + " guided rows, " + std::to_string(after) +
                          " unguided rows with total == l_diff; violations: " + std::to_string(bad)};
}

Outcome frozen_teacher() {
    const Stage2Run& r = early_stop_run();
    const bool same = r.teacher_params_before == r.teacher_params_after &&
                      r.teacher_file_before == r.teacher_file_after &&
                      r.summary.teacher_digest_before == r.summary.teacher_digest_after &&
                      r.summary.teacher_digest_before == r.teacher_params_before;
    return {same, "sha256 " + r.teacher_params_before.substr(0, 16) + "... before and " +
                      r.teacher_params_after.substr(0, 16) + "... after " + std::to_string(r.summary.steps_done) +
                      " steps"};
}

Outcome determinism() {
    const fs::path dir = workdir("determinism");
    RunConfig c = trainer_config(dir);
    c.train.total_steps = 100;
    c.guidance.stop_step = 50;
    const auto data = trainer_data();
    train(TrainMode::Baseline, c, data, dir / "a");
    train(TrainMode::Baseline, c, data, dir / "b");
    const std::string a = read_file(dir / "a" / "trace.csv"), b = read_file(dir / "b" / "trace.csv");
    const auto rows = LossTrace::load(dir / "a" / "trace.csv").records().size();
    return {a == b && rows == 100, std::to_string(rows) + " rows; traces " + (a == b ? "byte-identical" : "differ")};
}

Outcome resume() {
    const fs::path dir = workdir("resume");
    RunConfig c = trainer_config(dir);
    c.train.total_steps = 100;
    c.guidance.stop_step = 50;
    c.guidance.teacher_steps = 100;
    c.train.checkpoint_every = 1000;
    const auto data = trainer_data();
    train_teacher(c, data);
    double worst = 0.0;
    bool ok = true;
    std::string detail;
    for (TrainMode mode : {TrainMode::Baseline, TrainMode::Stage2}) {
        const std::string name = mode_name(mode);
        train(mode, c, data, dir / (name + "_full"));
        TrainOptions halt;
        halt.halt_after_step = 37;
        train(mode, c, data, dir / (name + "_split"), halt);
        train(mode, c, data, dir / (name + "_split"));
        const auto a = LossTrace::load(dir / (name + "_full") / "trace.csv").records();
        const auto b = LossTrace::load(dir / (name + "_split") / "trace.csv").records();
        ok = ok && a.size() == 100 && b.size() == 100;
        for (std::size_t i = 0; i < std::min(a.size(), b.size()); ++i) {
            ok = ok && a[i].step == b[i].step && a[i].lambda_effective == b[i].lambda_effective;
            worst = std::max({worst, std::abs(a[i].l_diff - b[i].l_diff), std::abs(a[i].l_guide - b[i].l_guide)});
        }
    }
    return {ok && worst <= 1e-6, "interrupted at step 37 of 100 (baseline and stage2); max record deviation " + num(worst)};
}

Outcome stop_zero_equals_baseline() {
    const fs::path dir = workdir("stop_zero");
    RunConfig c = trainer_config(dir);
    c.train.total_steps = 100;
    c.guidance.stop_step = 0;
    c.guidance.teacher_steps = 100;
    const auto data = trainer_data();
    train_teacher(c, data);
    train(TrainMode::Baseline, c, data, dir / "baseline");
    train(TrainMode::Stage2, c, data, dir / "student");
    const bool same = read_file(dir / "baseline" / "trace.csv") == read_file(dir / "student" / "trace.csv");
    const bool weights = CheckpointArchive::load(dir / "baseline" / "checkpoint").digest("ema") ==
                         CheckpointArchive::load(dir / "student" / "checkpoint").digest("ema");
    return {same && weights, std::string("traces ") + (same ? "byte-identical" : "differ") + ", EMA weights " +
                                 (weights ? "identical" : "differ")};
}

// ---- long criteria ----------------------------------------------------------------

struct SeedResult {
    uint64_t seed = 0;
    double fid_baseline = 0.0, fid_stage2 = 0.0;
    double sil_fc = 0.0, sil_fg = 0.0;
    double fid_omega1 = 0.0, fid_omega30 = 0.0;
};

/// Reference setup: 8-class 32x32 shapes, depth 12, D = 256, batch 64,
/// Stage-1 teacher at 5k steps, 20k student steps, three seeds.
RunConfig long_config(uint64_t seed) {
    RunConfig c = parse_config(fs::path(SELFTRANS_SOURCE_DIR) / "configs" / "reference.toml");
    std::vector<std::string> o = {"output_dir=" + (g_workdir / "long").string(),
                                  "train.total_steps=20000",
                                  "guidance.teacher_steps=5000",
                                  "codec.checkpoint=" + (g_workdir / "long" / "codec").string(),
                                  "eval.embedder=" + (g_workdir / "long" / "embedder").string()};
    o.insert(o.end(), g_long_overrides.begin(), g_long_overrides.end());
    nlohmann::json tree = nlohmann::json::parse(config_to_json(c).dump());
    apply_overrides(tree, o);
    c = run_config_from_tree(tree);
    c.seed = seed;
    c.output_dir = (fs::path(c.output_dir) / ("seed" + std::to_string(seed))).string();
    c.validate();
    return c;
}

const std::vector<SeedResult>& long_results() {
    static std::optional<std::vector<SeedResult>> results;
    if (results) return *results;
    const RunConfig shared = long_config(0);
    if (!fs::exists(shared.codec_path() / "manifest.json")) {
        std::fprintf(stderr, "[long] training codec\n");
        std::fprintf(stderr, "[long] codec reconstruction MAE %.4f\n", build_codec(shared));
    }
    if (!fs::exists(shared.embedder_path() / "manifest.json")) {
        std::fprintf(stderr, "[long] training embedder\n");
        std::fprintf(stderr, "[long] embedder held-out accuracy %.4f\n", build_embedder(shared));
    }
    const LatentDataset data = load_latent_dataset(shared);

    std::vector<SeedResult> out;
    for (uint64_t seed : {0u, 1u, 2u}) {
        const RunConfig c = long_config(seed);
        SeedResult r;
        r.seed = seed;
        TrainOptions verbose;
        verbose.verbose = true;
        std::fprintf(stderr, "[long] seed %llu: Stage 1 teacher\n", static_cast<unsigned long long>(seed));
        train(TrainMode::Stage1, c, data, default_run_dir(c, TrainMode::Stage1), verbose);
        const Evaluator evaluator(c);

        const auto teacher = guidance::GuideTeacher::load(CheckpointArchive::load(c.guide_path()));
        const LayerPair layers = c.guidance.layers(c.model.depth);
        const Separability sep = separability_probe(teacher, evaluator.heldout_latents(), evaluator.heldout_labels(),
                                                    layers.guiding, 0.4, 30.0, derive_seed(seed, 7));
        r.sil_fc = sep.silhouette_fc;
        r.sil_fg = sep.silhouette_fg;

        std::fprintf(stderr, "[long] seed %llu: baseline\n", static_cast<unsigned long long>(seed));
        const auto base = train(TrainMode::Baseline, c, data, default_run_dir(c, TrainMode::Baseline), verbose);
        r.fid_baseline = evaluator.evaluate(base.checkpoint).number("fid_desk");
        std::fprintf(stderr, "[long] seed %llu: stage 2\n", static_cast<unsigned long long>(seed));
        const auto student = train(TrainMode::Stage2, c, data, default_run_dir(c, TrainMode::Stage2), verbose);
        r.fid_stage2 = evaluator.evaluate(student.checkpoint).number("fid_desk");

        GridSpec grid;
        grid.omega = {1.0, 30.0};
        grid.seeds = {seed};
        const auto rows = run_ablation_grid(c, grid, fs::path(c.output_dir) / "ablate",
                                            default_cell_runner(data, evaluator, true));
        for (const auto& row : rows) {
            if (row.status != "done") throw NumericError("ablation cell " + row.key + " failed: " + row.error);
            (row.omega == "1" ? r.fid_omega1 : r.fid_omega30) = row.fid;
        }
        std::fprintf(stderr,
                     "[long] seed %llu: fid baseline %.4f stage2 %.4f | silhouette f_c %.4f f_g %.4f | grid w=1 %.4f "
                     "w=30 %.4f\n",
                     static_cast<unsigned long long>(seed), r.fid_baseline, r.fid_stage2, r.sil_fc, r.sil_fg,
                     r.fid_omega1, r.fid_omega30);
        out.push_back(r);
    }
    results = std::move(out);
    return *results;
}

Outcome directional_acceleration() {
    const auto& rs = long_results();
    int wins = 0;
    std::vector<double> improvement;
    std::string detail;
    for (const auto& r : rs) {
        wins += r.fid_stage2 < r.fid_baseline;
        improvement.push_back((r.fid_baseline - r.fid_stage2) / r.fid_baseline);
        detail += "seed " + std::to_string(r.seed) + ": " + num(r.fid_stage2) + " vs " + num(r.fid_baseline) + "; ";
    }
    std::sort(improvement.begin(), improvement.end());
    const double median = improvement[improvement.size() / 2];
    return {wins >= 2 && median >= 0.10, detail + "wins " + std::to_string(wins) + "/3, median improvement " + num(median)};
}

Outcome separability_direction() {
    int wins = 0;
    std::string detail;
    for (const auto& r : long_results()) {
        wins += r.sil_fg > r.sil_fc;
        detail += "seed " + std::to_string(r.seed) + ": f_g " + num(r.sil_fg) + " vs f_c " + num(r.sil_fc) + "; ";
    }
    return {wins >= 2, detail + "wins " + std::to_string(wins) + "/3"};
}

Outcome ablation_direction() {
    int wins = 0;
    std::string detail;
    for (const auto& r : long_results()) {
        wins += r.fid_omega30 < r.fid_omega1;
        detail += "seed " + std::to_string(r.seed) + ": w=30 " + num(r.fid_omega30) + " vs w=1 " + num(r.fid_omega1) + "; ";
    }
    return {wins >= 2, detail + "wins " + std::to_string(wins) + "/3"};
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Acceptance criteria"};
    bool run_long = false;
    std::vector<int> only;
    std::string dir = (fs::temp_directory_path() / "selftrans_acceptance").string();
    app.add_flag("--long", run_long, "Also run criteria 6-8 (full-size training runs)");
    app.add_option("--only", only, "Run only these criterion numbers");
    app.add_option("--workdir", dir, "Scratch directory; the long runs resume from it");
    app.add_option("--long-set", g_long_overrides, "Override a key of the long-run setup (key=value)");
    CLI11_PARSE(app, argc, argv);
    g_workdir = dir;
    fs::create_directories(g_workdir);

    const std::vector<Criterion> criteria = {
        {1, "feature-CFG identities", false, feature_cfg_identities},
        {2, "gradient oracle", false, gradient_oracle},
        {3, "analytic FID", false, analytic_fid},
        {4, "early-stop exactness", false, early_stop_exactness},
        {5, "frozen-teacher invariance", false, frozen_teacher},
        {6, "directional acceleration", true, directional_acceleration},
        {7, "separability direction", true, separability_direction},
        {8, "ablation direction", true, ablation_direction},
        {9, "determinism regression", false, determinism},
        {10, "checkpoint/resume", false, resume},
        {11, "stage2(stop_step=0) == baseline", false, stop_zero_equals_baseline},
    };
    if (run_long && !g_long_overrides.empty())
        std::printf("NOTE long-run setup overridden; criteria 6-8 below do not use the reference setup\n");
    std::fflush(stdout);

    int failed = 0;
    for (const auto& c : criteria) {
        if (!only.empty() && std::find(only.begin(), only.end(), c.id) == only.end()) continue;
        if (c.long_running && !run_long) {
            std::printf("SKIP %2d %s: full-size training runs; pass --long\n", c.id, c.name.c_str());
            continue;
        }
        const auto t0 = std::chrono::steady_clock::now();
        Outcome o;
        try {
            o = c.run();
        } catch (const std::exception& e) {
            o = {false, std::string("error: ") + e.what()};
        }
        const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        std::printf("%s %2d %s: %s [%.1f s]\n", o.pass ? "PASS" : "FAIL", c.id, c.name.c_str(), o.detail.c_str(), secs);
        std::fflush(stdout);
        failed += !o.pass;
    }
    return failed == 0 ? 0 : 1;
}
