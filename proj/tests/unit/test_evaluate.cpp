#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include "selftrans/errors.hpp"
#include "selftrans/evaluate.hpp"
#include "test_support.hpp"
#include "trainer_fixture.hpp"

using namespace st;
using namespace st::testing;
namespace fs = std::filesystem;

namespace {

/// Fake cell runner: FID depends only on omega and seed; counts invocations.
struct FakeRunner {
    int calls = 0;
    double fail_omega = -1.0;

    MetricsReport operator()(const RunConfig& c, const fs::path&) {
        ++calls;
        if (c.guidance.omega == fail_omega) throw NumericError("non-finite loss at step 3");
        MetricsReport r;
        r.set("fid_desk", 100.0 - c.guidance.omega + static_cast<double>(c.seed));
        r.set("silhouette", c.guidance.omega / 100.0);
        return r;
    }
};

CellRunner wrap(FakeRunner& f) {
    return [&f](const RunConfig& c, const fs::path& d) { return f(c, d); };
}

RunConfig grid_base(const fs::path& dir) {
    RunConfig c = tiny_config(dir, 12, 16);
    c.guidance.guided_layer = 0;
    c.guidance.guiding_layer = 0;
    return c;
}

}  // namespace

TEST(MetricsReport, RoundTripPreservesOrder) {
    const auto dir = scratch_dir("report");
    MetricsReport r;
    r.set("fid_desk", 12.5);
    r.set("kind", std::string("stage2"));
    r.set("steps", int64_t{2000});
    r.set("fid_desk", 11.25);
    EXPECT_EQ(r.to_text(), "fid_desk=11.25\nkind=stage2\nsteps=2000\n");
    r.save(dir / "m.txt");
    const auto back = MetricsReport::load(dir / "m.txt");
    EXPECT_EQ(back.entries(), r.entries());
    EXPECT_DOUBLE_EQ(back.number("fid_desk"), 11.25);
    EXPECT_FALSE(back.get("missing"));
    EXPECT_THROW(back.number("missing"), IoError);
    EXPECT_THROW(r.set("a=b", 1.0), Error);
    std::ofstream(dir / "bad.txt") << "no equals sign\n";
    EXPECT_THROW(MetricsReport::load(dir / "bad.txt"), IoError);
}

TEST(Grid, ParsesTable) {
    const auto g = parse_grid(parse_toml(R"(
[grid]
omega = [1.0, 30]
lambda_guide = [0.5]
layer_pair = ["8->6", "10->4"]
guide_checkpoint = ["a/ckpt"]
seeds = [0, 1, 2]
)"));
    EXPECT_EQ(g.omega, (std::vector<double>{1.0, 30.0}));
    ASSERT_EQ(g.layer_pairs.size(), 2u);
    EXPECT_EQ(g.layer_pairs[0].guiding, 8);
    EXPECT_EQ(g.layer_pairs[0].guided, 6);
    EXPECT_EQ(g.layer_pairs[1].guided, 4);
    EXPECT_EQ(g.seeds, (std::vector<uint64_t>{0, 1, 2}));
    EXPECT_TRUE(parse_grid(parse_toml("")).empty());
    EXPECT_THROW(parse_grid(parse_toml("[grid]\nlayer_pair = [\"8-6\"]\n")), ConfigError);
    EXPECT_THROW(parse_grid(parse_toml("[grid]\nomega = [\"x\"]\n")), ConfigError);
    EXPECT_THROW(parse_grid(parse_toml("[grid]\nbogus = [1]\n")), ConfigError);
    EXPECT_THROW(parse_grid(parse_toml("[grid]\nomega = 1\n")), ConfigError);
}

TEST(Grid, ShippedGridFileParses) {
    const auto g = parse_grid_file(fs::path(SELFTRANS_SOURCE_DIR) / "configs" / "grid.toml");
    EXPECT_FALSE(g.empty());
    EXPECT_THROW(parse_grid_file("/nonexistent/grid.toml"), IoError);
}

TEST(Grid, EmptyGridWritesHeaderOnly) {
    const auto dir = scratch_dir("grid_empty");
    FakeRunner fake;
    const auto rows = run_ablation_grid(grid_base(dir), GridSpec{}, dir / "g", wrap(fake));
    EXPECT_TRUE(rows.empty());
    EXPECT_EQ(fake.calls, 0);
    const std::string header = format_grid_report({});
    EXPECT_EQ(read_file(dir / "g" / "report.tsv"), header);
    EXPECT_EQ(std::count(header.begin(), header.end(), '\n'), 1);
}

TEST(Grid, SortsByFidAndResumes) {
    const auto dir = scratch_dir("grid_resume");
    GridSpec g;
    g.omega = {1.0, 30.0, 10.0};
    g.seeds = {0, 1};
    FakeRunner fake;
    const auto rows = run_ablation_grid(grid_base(dir), g, dir / "g", wrap(fake));
    EXPECT_EQ(fake.calls, 6);
    ASSERT_EQ(rows.size(), 6u);
    for (std::size_t i = 1; i < rows.size(); ++i) EXPECT_LE(rows[i - 1].fid, rows[i].fid);
    EXPECT_EQ(rows.front().omega, "30");
    EXPECT_EQ(rows.front().seed, 0u);
    const std::string report = read_file(dir / "g" / "report.tsv");

    FakeRunner again;
    const auto rerun = run_ablation_grid(grid_base(dir), g, dir / "g", wrap(again));
    EXPECT_EQ(again.calls, 0);
    EXPECT_EQ(read_file(dir / "g" / "report.tsv"), report);
    ASSERT_EQ(rerun.size(), rows.size());
    for (std::size_t i = 0; i < rows.size(); ++i) EXPECT_EQ(rerun[i].key, rows[i].key);
}

TEST(Grid, FailedCellsAreRecordedAndRetried) {
    const auto dir = scratch_dir("grid_failed");
    GridSpec g;
    g.omega = {1.0, 30.0};
    g.layer_pairs = {{4, 8}, {6, 13}};  // the second pair exceeds depth 12
    FakeRunner fake;
    fake.fail_omega = 1.0;
    const auto rows = run_ablation_grid(grid_base(dir), g, dir / "g", wrap(fake));
    ASSERT_EQ(rows.size(), 4u);
    EXPECT_EQ(fake.calls, 2);  // invalid cells never reach the runner
    EXPECT_EQ(rows[0].status, "done");
    EXPECT_EQ(rows[0].omega, "30");
    EXPECT_EQ(rows[0].layer_pair, "8->4");
    for (std::size_t i = 1; i < rows.size(); ++i) EXPECT_EQ(rows[i].status, "failed");
    const std::string report = read_file(dir / "g" / "report.tsv");
    EXPECT_NE(report.find("failed: non-finite loss at step 3"), std::string::npos);
    EXPECT_NE(report.find("guidance.guiding_layer"), std::string::npos);

    FakeRunner retry;
    run_ablation_grid(grid_base(dir), g, dir / "g", wrap(retry));
    EXPECT_EQ(retry.calls, 1);  // invalid cells fail validation again without reaching the runner
}

TEST(Separability, OmegaOneMatchesConditional) {
    const RunConfig c = tiny_config("unused", 3, 16);
    Backbone model(c.model_config(), 3);
    randomize_params(model.parameters(), 4, -0.3f, 0.3f);
    CheckpointArchive a;
    a.kind = "stage1";
    a.config["model"] = to_json(model.config());
    a.put_params("model", model.parameters());
    const auto teacher = guidance::GuideTeacher::load(a);
    const auto data = synthetic_latents(6, 2, 9);
    const auto s1 = separability_probe(teacher, data.mean, data.labels, 2, 0.4, 1.0, 5);
    EXPECT_EQ(s1.silhouette_fc, s1.silhouette_fg);
    EXPECT_GE(s1.silhouette_fc, -1.0);
    EXPECT_LE(s1.silhouette_fc, 1.0);
    const auto s30 = separability_probe(teacher, data.mean, data.labels, 2, 0.4, 30.0, 5);
    EXPECT_EQ(s30.silhouette_fc, s1.silhouette_fc);
    EXPECT_NE(s30.silhouette_fg, s1.silhouette_fg);
    EXPECT_THROW(separability_probe(teacher, data.mean, std::vector<int64_t>{0, 1}, 2, 0.4, 1.0, 5), ShapeError);
}

TEST(Evaluator, ReportsMetricsDeterministically) {
    const auto dir = scratch_dir("evaluator");
    RunConfig c = tiny_config(dir);
    c.eval.num_samples = 12;
    c.eval.silhouette_batch = 8;
    c.sample.num_steps = 2;
    c.sample.batch_size = 5;
    c.eval.embedder_feature_dim = 4;
    const LatentCodec codec(c.codec_config(), 1);
    const LatentStats stats = compute_latent_stats(codec, load_images(c));
    const metrics::Embedder embedder({c.dataset.image_size, c.dataset.num_classes, 4, 8}, 2);
    const Evaluator ev(c, codec, stats, embedder, 0.75);
    EXPECT_EQ(ev.heldout_latents().dim(0), 8);
    EXPECT_EQ(ev.real_stats().count, 12);

    const auto data = synthetic_latents(8, 2, 1);
    const auto summary = train(TrainMode::Baseline, c, data, dir / "run");
    const auto r1 = ev.evaluate(summary.checkpoint);
    const auto r2 = ev.evaluate(summary.checkpoint);
    EXPECT_EQ(r1.to_text(), r2.to_text());
    EXPECT_GE(r1.number("fid_desk"), 0.0);
    EXPECT_GE(r1.number("is_analog"), 1.0 - 1e-9);
    EXPECT_LE(r1.number("is_analog"), 2.0 + 1e-9);
    EXPECT_EQ(r1.number("silhouette_layer"), 2.0);
    EXPECT_EQ(r1.number("embedder_accuracy"), 0.75);
    EXPECT_EQ(*r1.get("weights"), "ema");
    EXPECT_EQ(r1.number("student_steps"), 20.0);
    EXPECT_THROW(ev.evaluate(dir / "missing"), IoError);

    RunConfig wrong = c;
    wrong.dataset.num_classes = 3;
    EXPECT_THROW(Evaluator(wrong, codec, stats, embedder, 0.75), ConfigError);
}

TEST(Grid, CellsResolveArtifactsAgainstBaseOutput) {
    const auto dir = scratch_dir("grid_paths");
    GridSpec g;
    g.omega = {1.0};
    g.guide_checkpoints = {"/elsewhere/guide"};
    std::vector<RunConfig> seen;
    const CellRunner runner = [&](const RunConfig& c, const fs::path&) {
        seen.push_back(c);
        MetricsReport r;
        r.set("fid_desk", 1.0);
        r.set("silhouette", 0.0);
        return r;
    };
    const RunConfig base = grid_base(dir);
    run_ablation_grid(base, GridSpec{{2.0}, {}, {}, {}, {}}, dir / "a", runner);
    run_ablation_grid(base, g, dir / "b", runner);
    ASSERT_EQ(seen.size(), 2u);
    EXPECT_EQ(seen[0].guide_path(), base.guide_path());
    EXPECT_EQ(seen[0].codec_path(), base.codec_path());
    EXPECT_EQ(seen[0].embedder_path(), base.embedder_path());
    EXPECT_EQ(seen[0].output_dir, (dir / "a" / "cell000_s11").string());
    EXPECT_EQ(seen[1].guide_path(), fs::path("/elsewhere/guide"));
}

namespace {

fs::path fixture(const std::string& name) { return fs::path(SELFTRANS_SOURCE_DIR) / "tests" / "fixtures" / name; }

Tensor all_images(const ImageSet& set) {
    std::vector<int64_t> idx(static_cast<std::size_t>(set.count));
    for (int64_t i = 0; i < set.count; ++i) idx[static_cast<std::size_t>(i)] = i;
    return set.batch(idx);
}

}  // namespace

TEST(Fixtures, RealDataSelfDistanceFloor) {
    RunConfig c;
    c.dataset.samples_per_class = 1250;
    const auto embedder = metrics::Embedder::from_archive(CheckpointArchive::load(fixture("embedder")));
    const auto [a, b] = split_per_class(load_images(c), 0.5);
    ASSERT_EQ(a.count, 5000);
    ASSERT_EQ(b.count, 5000);
    const double fid = metrics::frechet_distance(metrics::fit_stats(embedder.features(all_images(a))),
                                                 metrics::fit_stats(embedder.features(all_images(b))));
    EXPECT_LT(fid, 0.5);
    RecordProperty("fid_desk", std::to_string(fid));
}

TEST(Fixtures, DefaultCodecReconstructionThreshold) {
    const RunConfig c;
    const auto archive = CheckpointArchive::load(fixture("codec"));
    const LatentCodec codec = LatentCodec::from_archive(archive);
    EXPECT_EQ(codec.config(), c.codec_config());
    const double mae = reconstruction_mae(codec, load_images(c));
    EXPECT_LE(mae, 0.08);
    EXPECT_NEAR(mae, archive.meta["reconstruction_mae"].get<double>(), 1e-6);
    RecordProperty("reconstruction_mae", std::to_string(mae));
}
