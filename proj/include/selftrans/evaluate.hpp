#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "selftrans/config.hpp"
#include "selftrans/guidance.hpp"
#include "selftrans/metrics.hpp"
#include "selftrans/trainer.hpp"

namespace st {

/// Ordered key=value metrics file, one entry per line.
class MetricsReport {
public:
    void set(const std::string& key, const std::string& value);
    void set(const std::string& key, double value);
    void set(const std::string& key, int64_t value);
    std::optional<std::string> get(const std::string& key) const;
    double number(const std::string& key) const;

    std::string to_text() const;
    void save(const std::filesystem::path& path) const;
    static MetricsReport load(const std::filesystem::path& path);

    const std::vector<std::pair<std::string, std::string>>& entries() const { return entries_; }

private:
    std::vector<std::pair<std::string, std::string>> entries_;
};

/// Token-mean-pooled features of `layer` on a latent batch noised to time t.
Eigen::MatrixXd pooled_features(const Backbone& model, const Tensor& z, std::span<const ConditionLabel> cond, int layer,
                                double t, uint64_t seed);

struct Separability {
    double silhouette_fc = 0.0;
    double silhouette_fg = 0.0;
};

/// Silhouette of the teacher's conditional features f_c and of the guided
/// features f_g = feature_cfg(f_u, f_c, omega) at `layer`, token-mean-pooled.
Separability separability_probe(const guidance::GuideTeacher& teacher, const Tensor& z,
                                std::span<const int64_t> labels, int layer, double t, double omega, uint64_t seed);

/// Shared artifacts for evaluating checkpoints: codec, embedder, real-image
/// feature statistics and a held-out latent batch.
class Evaluator {
public:
    /// Loads the codec and embedder checkpoints named by the config.
    explicit Evaluator(const RunConfig& config);
    Evaluator(const RunConfig& config, LatentCodec codec, LatentStats stats, metrics::Embedder embedder,
              double embedder_accuracy);

    /// Samples `num_samples` images from the checkpoint's EMA weights and
    /// reports FID-desk, the IS analog and guiding-layer silhouette.
    MetricsReport evaluate(const std::filesystem::path& checkpoint, std::optional<int64_t> num_samples = {}) const;
    MetricsReport evaluate_model(const Backbone& model, int64_t num_samples) const;

    const metrics::FeatureStats& real_stats() const { return real_stats_; }
    const Tensor& heldout_latents() const { return heldout_z_; }
    const std::vector<int64_t>& heldout_labels() const { return heldout_labels_; }
    const LatentCodec& codec() const { return codec_; }
    const LatentStats& stats() const { return stats_; }

private:
    void prepare();

    RunConfig config_;
    LatentCodec codec_;
    LatentStats stats_;
    metrics::Embedder embedder_;
    double embedder_accuracy_ = 0.0;
    metrics::FeatureStats real_stats_;
    Tensor heldout_z_;
    std::vector<int64_t> heldout_labels_;
};

/// Trains the embedder on 90% of each class and writes it to embedder_path().
/// Returns the held-out accuracy.
double build_embedder(const RunConfig& config);

struct GridSpec {
    std::vector<double> omega;
    std::vector<double> lambda_guide;
    std::vector<LayerPair> layer_pairs;
    std::vector<std::string> guide_checkpoints;
    std::vector<uint64_t> seeds;

    bool empty() const;
};

/// Reads a [grid] table: omega, lambda_guide, layer_pair ("m->n": guiding
/// layer m guides layer n), guide_checkpoint and seeds arrays.
GridSpec parse_grid(const nlohmann::json& tree);
GridSpec parse_grid_file(const std::filesystem::path& path);

struct GridRow {
    std::string key;  // cell id plus seed
    uint64_t seed = 0;
    std::string omega, lambda_guide, layer_pair, guide_checkpoint;
    std::string status;  // "done" or "failed"
    double fid = 0.0;
    double silhouette = 0.0;
    std::string error;
};

/// Trains and evaluates one cell; the default trains Stage 2 and evaluates.
using CellRunner = std::function<MetricsReport(const RunConfig& cell_config, const std::filesystem::path& cell_dir)>;

/// Runs every (cell, seed), skipping rows already marked done in
/// `<dir>/grid.json`. Invalid cells become failed rows. Writes
/// `<dir>/report.tsv` sorted by FID-desk (failed rows last) and returns it.
std::vector<GridRow> run_ablation_grid(const RunConfig& base, const GridSpec& grid, const std::filesystem::path& dir,
                                       const CellRunner& runner);

CellRunner default_cell_runner(const LatentDataset& data, const Evaluator& evaluator, bool verbose);

std::string format_grid_report(const std::vector<GridRow>& rows);

}  // namespace st
