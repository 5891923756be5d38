#pragma once

#include <cstdint>
#include <filesystem>
#include <set>
#include <span>
#include <vector>

#include <Eigen/Dense>

#include "selftrans/backbone.hpp"
#include "selftrans/checkpoint.hpp"
#include "selftrans/nn.hpp"
#include "selftrans/tensor.hpp"

namespace st {

struct ImageSet;

namespace metrics {

/// Row-major [N, d] tensor -> double matrix.
Eigen::MatrixXd to_matrix(const Tensor& features);

struct FeatureStats {
    Eigen::VectorXd mean;
    Eigen::MatrixXd cov;
    int64_t count = 0;
};

/// Sample mean and unbiased covariance of the rows.
FeatureStats fit_stats(const Eigen::MatrixXd& features);

/// |mu_a - mu_b|^2 + Tr(S_a + S_b - 2 (S_a S_b)^{1/2}).
double frechet_distance(const FeatureStats& a, const FeatureStats& b);

/// exp(mean_i KL(p_i || p_bar)) over softmax rows.
double inception_score_analog(const Eigen::MatrixXd& probs);

/// Mean silhouette coefficient with Euclidean distances.
double silhouette_score(const Eigen::MatrixXd& features, std::span<const int64_t> labels);

struct Pca {
    Eigen::MatrixXd projected;   // [N, k]
    Eigen::VectorXd explained;   // variance ratio per component, [k]
    Eigen::MatrixXd components;  // [d, k], orthonormal columns
};

/// Top-k principal components; each component's largest-magnitude loading is
/// made positive.
Pca pca_project(const Eigen::MatrixXd& features, int k);

struct EmbedderConfig {
    int image_size = 32;
    int num_classes = 8;
    int feature_dim = 64;
    int base_channels = 16;
};

/// Small convolutional classifier whose penultimate activations stand in for
/// Inception features.
class Embedder {
public:
    Embedder(const EmbedderConfig& config, uint64_t seed);

    struct Output {
        Tensor features;  // [B, feature_dim]
        Tensor logits;    // [B, K]
    };
    Output forward(const Tensor& images) const;

    /// Batched no-grad passes over a whole image tensor [N, 3, S, S].
    Eigen::MatrixXd features(const Tensor& images, int64_t batch_size = 256) const;
    Eigen::MatrixXd probabilities(const Tensor& images, int64_t batch_size = 256) const;

    ParamList parameters() const;
    const EmbedderConfig& config() const { return config_; }

    CheckpointArchive to_archive(double heldout_accuracy) const;
    static Embedder from_archive(const CheckpointArchive& archive);

private:
    EmbedderConfig config_;
    Conv2d c1_, c2_, c3_;
    Linear fc_, head_;
};

struct EmbedderTrainOptions {
    int64_t steps = 1500;
    int64_t batch_size = 64;
    double lr = 1e-3;
    uint64_t seed = 0;
};

struct EmbedderTrainResult {
    Embedder embedder;
    double heldout_accuracy;
};

EmbedderTrainResult train_embedder(const ImageSet& train, const ImageSet& heldout, const EmbedderConfig& config,
                                   const EmbedderTrainOptions& options);

double classification_accuracy(const Embedder& embedder, const ImageSet& data);

/// For each (layer, t): taps the backbone on a fixed batch of latents noised
/// with `seed`, maps the top-3 PCA components of all tokens to RGB and writes
/// `<out_dir>/layer<L>_t<t>.png`. Always writes `<out_dir>/manifest.json`.
std::vector<std::filesystem::path> export_feature_panel(const Backbone& model, const std::set<int>& layers,
                                                        std::span<const double> t_values, const Tensor& latents,
                                                        std::span<const ConditionLabel> cond, uint64_t seed,
                                                        const std::filesystem::path& out_dir);

}  // namespace metrics
}  // namespace st
