#include "selftrans/evaluate.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "selftrans/errors.hpp"
#include "selftrans/flow.hpp"
#include "selftrans/ops.hpp"
#include "selftrans/rng.hpp"
#include "selftrans/sampler.hpp"

namespace st {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr uint64_t kEvalSampleStream = 101;
constexpr uint64_t kEvalProbeStream = 102;
constexpr uint64_t kEvalRealStream = 103;

std::string fmt(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.9g", v);
    return buf;
}

Eigen::MatrixXd mean_pool(const Tensor& tokens) {
    NoGradGuard no_grad;
    return metrics::to_matrix(ops::mean_tokens(tokens));
}

CheckpointArchive load_required(const fs::path& path, const std::string& what) {
    if (!fs::exists(path / "manifest.json")) throw IoError("missing " + what + " checkpoint: " + path.string());
    return CheckpointArchive::load(path);
}

}  // namespace

// ---- MetricsReport ------------------------------------------------------------

void MetricsReport::set(const std::string& key, const std::string& value) {
    if (key.find_first_of("=\n") != std::string::npos || value.find('\n') != std::string::npos)
        throw ShapeError("metrics report: invalid entry '" + key + "'");
    for (auto& [k, v] : entries_)
        if (k == key) {
            v = value;
            return;
        }
    entries_.emplace_back(key, value);
}

void MetricsReport::set(const std::string& key, double value) { set(key, fmt(value)); }
void MetricsReport::set(const std::string& key, int64_t value) { set(key, std::to_string(value)); }

std::optional<std::string> MetricsReport::get(const std::string& key) const {
    for (const auto& [k, v] : entries_)
        if (k == key) return v;
    return std::nullopt;
}

double MetricsReport::number(const std::string& key) const {
    const auto v = get(key);
    if (!v) throw IoError("metrics report: missing key '" + key + "'");
    return std::stod(*v);
}

std::string MetricsReport::to_text() const {
    std::string out;
    for (const auto& [k, v] : entries_) out += k + "=" + v + "\n";
    return out;
}

void MetricsReport::save(const fs::path& path) const {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream out(path);
    if (!out) throw IoError("cannot write report " + path.string());
    out << to_text();
}

MetricsReport MetricsReport::load(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot read report " + path.string());
    MetricsReport r;
    for (std::string line; std::getline(in, line);) {
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos) throw IoError("malformed report line in " + path.string() + ": " + line);
        r.set(line.substr(0, eq), line.substr(eq + 1));
    }
    return r;
}

// ---- probes -------------------------------------------------------------------

Eigen::MatrixXd pooled_features(const Backbone& model, const Tensor& z, std::span<const ConditionLabel> cond, int layer,
                                double t, uint64_t seed) {
    NoGradGuard no_grad;
    const std::vector<float> ts(static_cast<std::size_t>(z.dim(0)), static_cast<float>(t));
    const auto state = flow::forward_interpolate(z, flow::sample_noise(z.shape(), seed), ts);
    return mean_pool(model.forward(state.x_t, ts, cond, {layer}).taps.at(layer));
}

Separability separability_probe(const guidance::GuideTeacher& teacher, const Tensor& z,
                                std::span<const int64_t> labels, int layer, double t, double omega, uint64_t seed) {
    if (static_cast<int64_t>(labels.size()) != z.dim(0)) throw ShapeError("separability_probe: label count mismatch");
    const std::vector<float> ts(labels.size(), static_cast<float>(t));
    const auto state = flow::forward_interpolate(z, flow::sample_noise(z.shape(), seed), ts);
    const auto cond = labels_from_indices(labels);
    const Tensor f_c = teacher.features(state, cond, layer);
    const Tensor f_g = guidance::extract_guided_feature(teacher, state, cond, layer, omega);
    return {metrics::silhouette_score(mean_pool(f_c), labels), metrics::silhouette_score(mean_pool(f_g), labels)};
}

// ---- Evaluator ----------------------------------------------------------------

Evaluator::Evaluator(const RunConfig& config)
    : Evaluator(config, LatentCodec::from_archive(load_required(config.codec_path(), "codec")),
                latent_stats_from_archive(load_required(config.codec_path(), "codec")),
                metrics::Embedder::from_archive(load_required(config.embedder_path(), "embedder")),
                load_required(config.embedder_path(), "embedder").meta.value("heldout_accuracy", 0.0)) {}

Evaluator::Evaluator(const RunConfig& config, LatentCodec codec, LatentStats stats, metrics::Embedder embedder,
                     double embedder_accuracy)
    : config_(config),
      codec_(std::move(codec)),
      stats_(std::move(stats)),
      embedder_(std::move(embedder)),
      embedder_accuracy_(embedder_accuracy) {
    prepare();
}

void Evaluator::prepare() {
    if (embedder_.config().num_classes != config_.dataset.num_classes ||
        embedder_.config().image_size != config_.dataset.image_size)
        throw ConfigError("eval.embedder: embedder does not match the dataset");
    const ImageSet real = load_images(config_);
    const auto order = permutation(real.count, derive_seed(config_.seed, kEvalRealStream));
    const int64_t take = std::min(real.count, config_.eval.num_samples);
    const std::vector<int64_t> idx(order.begin(), order.begin() + take);
    real_stats_ = metrics::fit_stats(embedder_.features(real.batch(idx)));

    const ImageSet held = heldout_images(config_, config_.eval.silhouette_batch);
    const Posterior post = [&] {
        NoGradGuard no_grad;
        std::vector<int64_t> all(static_cast<std::size_t>(held.count));
        for (int64_t i = 0; i < held.count; ++i) all[static_cast<std::size_t>(i)] = i;
        return codec_.encode(held.batch(all), 0, true);
    }();
    heldout_z_ = stats_.standardize(post.mean);
    heldout_labels_ = held.labels;
}

MetricsReport Evaluator::evaluate(const fs::path& checkpoint, std::optional<int64_t> num_samples) const {
    const auto archive = load_required(checkpoint, "model");
    const Backbone model = load_backbone(archive, true);
    MetricsReport r = evaluate_model(model, num_samples.value_or(config_.eval.num_samples));
    r.set("checkpoint", checkpoint.string());
    r.set("weights", archive.has_prefix("ema") ? std::string("ema") : std::string("model"));
    r.set("kind", archive.kind);
    r.set("student_steps", archive.step);
    r.set("total_steps_incl_teacher", archive.step + archive.meta.value("teacher_steps", int64_t{0}));
    return r;
}

MetricsReport Evaluator::evaluate_model(const Backbone& model, int64_t num_samples) const {
    if (num_samples < 2) throw ConfigError("eval.num_samples: must be >= 2");
    const ModelConfig& mc = model.config();
    if (mc.num_classes != config_.dataset.num_classes) throw ConfigError("model.num_classes: does not match dataset");
    const int64_t batch = config_.sample.batch_size;
    Eigen::MatrixXd feats(num_samples, embedder_.config().feature_dim);
    Eigen::MatrixXd probs(num_samples, mc.num_classes);
    for (int64_t start = 0, b = 0; start < num_samples; start += batch, ++b) {
        SampleRequest req;
        const int64_t n = std::min(batch, num_samples - start);
        for (int64_t i = 0; i < n; ++i) req.labels.push_back(ConditionLabel::of((start + i) % mc.num_classes));
        req.num_steps = config_.sample.num_steps;
        req.cfg_scale = config_.sample.cfg_scale;
        req.seed = derive_seed(config_.seed, kEvalSampleStream, static_cast<uint64_t>(b));
        const Tensor images = sample_images(model, codec_, stats_, req);
        feats.middleRows(start, n) = embedder_.features(images);
        probs.middleRows(start, n) = embedder_.probabilities(images);
    }
    const int layer = config_.guidance.layers(mc.depth).guiding;
    const auto cond = labels_from_indices(heldout_labels_);
    const double sil = metrics::silhouette_score(
        pooled_features(model, heldout_z_, cond, layer, config_.eval.feature_t,
                        derive_seed(config_.seed, kEvalProbeStream)),
        heldout_labels_);

    MetricsReport r;
    r.set("fid_desk", metrics::frechet_distance(real_stats_, metrics::fit_stats(feats)));
    r.set("is_analog", metrics::inception_score_analog(probs));
    r.set("silhouette", sil);
    r.set("silhouette_layer", int64_t{layer});
    r.set("silhouette_t", config_.eval.feature_t);
    r.set("num_samples", num_samples);
    r.set("sample_steps", int64_t{config_.sample.num_steps});
    r.set("cfg_scale", config_.sample.cfg_scale);
    r.set("embedder_accuracy", embedder_accuracy_);
    r.set("real_samples", real_stats_.count);
    r.set("config_hash", config_hash(config_));
    return r;
}

double build_embedder(const RunConfig& config) {
    const auto [train_set, heldout] = split_per_class(load_images(config), 0.9);
    metrics::EmbedderConfig ec;
    ec.image_size = config.dataset.image_size;
    ec.num_classes = config.dataset.num_classes;
    ec.feature_dim = config.eval.embedder_feature_dim;
    metrics::EmbedderTrainOptions opts;
    opts.steps = config.eval.embedder_steps;
    opts.batch_size = config.eval.embedder_batch_size;
    opts.lr = config.eval.embedder_lr;
    opts.seed = config.seed;
    const auto result = metrics::train_embedder(train_set, heldout, ec, opts);
    result.embedder.to_archive(result.heldout_accuracy).save(config.embedder_path());
    return result.heldout_accuracy;
}

// ---- ablation grid ------------------------------------------------------------

bool GridSpec::empty() const {
    return omega.empty() && lambda_guide.empty() && layer_pairs.empty() && guide_checkpoints.empty() && seeds.empty();
}

GridSpec parse_grid(const json& tree) {
    GridSpec g;
    if (!tree.contains("grid")) return g;
    const json& grid = tree.at("grid");
    if (!grid.is_object()) throw ConfigError("grid: must be a table");
    auto array = [](const json& v, const std::string& key) -> const json& {
        if (!v.is_array()) throw ConfigError("grid." + key + ": expected an array");
        return v;
    };
    for (const auto& [key, value] : grid.items()) {
        const json& arr = array(value, key);
        for (const auto& v : arr) {
            if (key == "omega" || key == "lambda_guide") {
                if (!v.is_number()) throw ConfigError("grid." + key + ": expected numbers");
                (key == "omega" ? g.omega : g.lambda_guide).push_back(v.get<double>());
            } else if (key == "layer_pair") {
                if (!v.is_string()) throw ConfigError("grid.layer_pair: expected strings like \"8->6\"");
                const std::string s = v.get<std::string>();
                const auto arrow = s.find("->");
                try {
                    if (arrow == std::string::npos) throw std::invalid_argument(s);
                    g.layer_pairs.push_back({std::stoi(s.substr(arrow + 2)), std::stoi(s.substr(0, arrow))});
                } catch (const std::exception&) {
                    throw ConfigError("grid.layer_pair: cannot parse '" + s + "'");
                }
            } else if (key == "guide_checkpoint") {
                if (!v.is_string()) throw ConfigError("grid.guide_checkpoint: expected strings");
                g.guide_checkpoints.push_back(v.get<std::string>());
            } else if (key == "seeds") {
                if (!v.is_number_integer() || v.get<int64_t>() < 0) throw ConfigError("grid.seeds: expected integers >= 0");
                g.seeds.push_back(v.get<uint64_t>());
            } else {
                throw ConfigError("grid." + key + ": unknown key");
            }
        }
    }
    return g;
}

GridSpec parse_grid_file(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot read grid " + path.string());
    std::stringstream ss;
    ss << in.rdbuf();
    return parse_grid(parse_toml(ss.str()));
}

std::string format_grid_report(const std::vector<GridRow>& rows) {
    std::string out = "cell\tseed\tomega\tlambda_guide\tlayer_pair\tguide_checkpoint\tfid_desk\tsilhouette\tstatus\n";
    for (const auto& r : rows) {
        const bool ok = r.status == "done";
        out += r.key + "\t" + std::to_string(r.seed) + "\t" + r.omega + "\t" + r.lambda_guide + "\t" + r.layer_pair + "\t" +
               r.guide_checkpoint + "\t" + (ok ? fmt(r.fid) : "-") + "\t" + (ok ? fmt(r.silhouette) : "-") + "\t" +
               (ok ? r.status : r.status + ": " + r.error) + "\n";
    }
    return out;
}

std::vector<GridRow> run_ablation_grid(const RunConfig& base, const GridSpec& grid, const fs::path& dir,
                                       const CellRunner& runner) {
    fs::create_directories(dir);
    const fs::path manifest_path = dir / "grid.json";
    json manifest = json::object();
    if (fs::exists(manifest_path)) {
        std::ifstream in(manifest_path);
        try {
            in >> manifest;
        } catch (const json::exception& e) {
            throw IoError("malformed grid manifest " + manifest_path.string() + ": " + e.what());
        }
    }
    auto save_manifest = [&] {
        const fs::path tmp = manifest_path.string() + ".tmp";
        {
            std::ofstream out(tmp);
            if (!out) throw IoError("cannot write " + tmp.string());
            out << manifest.dump(2) << '\n';
        }
        fs::rename(tmp, manifest_path);
    };

    std::vector<GridRow> rows;
    if (!grid.empty()) {
        const std::vector<std::optional<double>> omegas = grid.omega.empty()
            ? std::vector<std::optional<double>>{std::nullopt}
            : std::vector<std::optional<double>>(grid.omega.begin(), grid.omega.end());
        const std::vector<std::optional<double>> lambdas = grid.lambda_guide.empty()
            ? std::vector<std::optional<double>>{std::nullopt}
            : std::vector<std::optional<double>>(grid.lambda_guide.begin(), grid.lambda_guide.end());
        const std::vector<std::optional<LayerPair>> pairs = grid.layer_pairs.empty()
            ? std::vector<std::optional<LayerPair>>{std::nullopt}
            : std::vector<std::optional<LayerPair>>(grid.layer_pairs.begin(), grid.layer_pairs.end());
        const std::vector<std::optional<std::string>> guides = grid.guide_checkpoints.empty()
            ? std::vector<std::optional<std::string>>{std::nullopt}
            : std::vector<std::optional<std::string>>(grid.guide_checkpoints.begin(), grid.guide_checkpoints.end());
        const std::vector<uint64_t> seeds = grid.seeds.empty() ? std::vector<uint64_t>{base.seed} : grid.seeds;

        int cell = 0;
        for (const auto& om : omegas)
            for (const auto& lg : lambdas)
                for (const auto& lp : pairs)
                    for (const auto& gc : guides) {
                        char cell_id[32];
                        std::snprintf(cell_id, sizeof(cell_id), "cell%03d", cell++);
                        for (uint64_t seed : seeds) {
                            RunConfig c = base;
                            c.seed = seed;
                            if (om) c.guidance.omega = *om;
                            if (lg) c.guidance.lambda_guide = *lg;
                            if (lp) {
                                c.guidance.guided_layer = lp->guided;
                                c.guidance.guiding_layer = lp->guiding;
                            }
                            if (gc) c.guidance.guide_checkpoint = *gc;
                            GridRow row;
                            row.key = std::string(cell_id) + "_s" + std::to_string(seed);
                            row.seed = seed;
                            row.omega = fmt(c.guidance.omega);
                            row.lambda_guide = fmt(c.guidance.lambda_guide);
                            row.layer_pair = lp ? std::to_string(lp->guiding) + "->" + std::to_string(lp->guided)
                                                : std::string("default");
                            row.guide_checkpoint = c.guide_path().string();

                            if (manifest.contains(row.key) && manifest[row.key].value("status", "") == "done") {
                                row.status = "done";
                                row.fid = manifest[row.key].at("fid_desk").get<double>();
                                row.silhouette = manifest[row.key].at("silhouette").get<double>();
                                rows.push_back(row);
                                continue;
                            }
                            try {
                                // Artifacts resolve against the base output_dir, not the cell's.
                                c.guidance.guide_checkpoint = row.guide_checkpoint;
                                c.codec.checkpoint = base.codec_path().string();
                                c.eval.embedder = base.embedder_path().string();
                                c.output_dir = (dir / row.key).string();
                                c.validate();
                                const MetricsReport rep = runner(c, dir / row.key);
                                row.fid = rep.number("fid_desk");
                                row.silhouette = rep.number("silhouette");
                                row.status = "done";
                            } catch (const Error& e) {
                                row.status = "failed";
                                row.error = e.what();
                            }
                            manifest[row.key] = {{"status", row.status},     {"fid_desk", row.fid},
                                                 {"silhouette", row.silhouette}, {"omega", row.omega},
                                                 {"lambda_guide", row.lambda_guide}, {"layer_pair", row.layer_pair},
                                                 {"guide_checkpoint", row.guide_checkpoint}, {"error", row.error}};
                            save_manifest();
                            rows.push_back(row);
                        }
                    }
    }
    std::stable_sort(rows.begin(), rows.end(), [](const GridRow& a, const GridRow& b) {
        const bool da = a.status == "done", db = b.status == "done";
        if (da != db) return da;
        return da && a.fid < b.fid;
    });
    std::ofstream out(dir / "report.tsv");
    if (!out) throw IoError("cannot write " + (dir / "report.tsv").string());
    out << format_grid_report(rows);
    if (!fs::exists(manifest_path)) save_manifest();
    return rows;
}

CellRunner default_cell_runner(const LatentDataset& data, const Evaluator& evaluator, bool verbose) {
    return [&data, &evaluator, verbose](const RunConfig& c, const fs::path& cell_dir) {
        TrainOptions opts;
        opts.verbose = verbose;
        const TrainSummary s = train(TrainMode::Stage2, c, data, cell_dir, opts);
        MetricsReport rep = evaluator.evaluate(s.checkpoint);
        rep.save(cell_dir / "metrics.txt");
        return rep;
    };
}

}  // namespace st
