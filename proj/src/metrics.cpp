#include "selftrans/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>

#include <json.hpp>

#include "selftrans/datasets.hpp"
#include "selftrans/errors.hpp"
#include "selftrans/flow.hpp"
#include "selftrans/image_io.hpp"
#include "selftrans/ops.hpp"
#include "selftrans/optim.hpp"
#include "selftrans/rng.hpp"

namespace st::metrics {

namespace fs = std::filesystem;

namespace {

constexpr double kPsdTolerance = 1e-6;
constexpr uint64_t kEmbedderInitStream = 0xE3BED;

// Symmetric PSD square root; eigenvalues in [-tol, 0) are clamped to zero.
Eigen::MatrixXd psd_sqrt(const Eigen::MatrixXd& m, const char* what) {
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(0.5 * (m + m.transpose()));
    Eigen::VectorXd ev = es.eigenvalues();
    for (Eigen::Index i = 0; i < ev.size(); ++i) {
        if (ev(i) < -kPsdTolerance)
            throw NumericError(std::string("frechet_distance: ") + what + " is not positive semi-definite (eigenvalue " +
                               std::to_string(ev(i)) + ")");
        ev(i) = std::sqrt(std::max(ev(i), 0.0));
    }
    return es.eigenvectors() * ev.asDiagonal() * es.eigenvectors().transpose();
}

}  // namespace

Eigen::MatrixXd to_matrix(const Tensor& features) {
    if (features.rank() != 2) throw ShapeError("to_matrix: expected [N, d], got " + shape_str(features.shape()));
    Eigen::MatrixXd m(features.dim(0), features.dim(1));
    const auto d = features.data();
    for (Eigen::Index i = 0; i < m.rows(); ++i)
        for (Eigen::Index j = 0; j < m.cols(); ++j) m(i, j) = d[static_cast<std::size_t>(i * m.cols() + j)];
    return m;
}

FeatureStats fit_stats(const Eigen::MatrixXd& features) {
    if (features.rows() < 2) throw ShapeError("fit_stats: need at least 2 samples, got " + std::to_string(features.rows()));
    FeatureStats s;
    s.count = features.rows();
    s.mean = features.colwise().mean().transpose();
    const Eigen::MatrixXd centered = features.rowwise() - s.mean.transpose();
    s.cov = (centered.transpose() * centered) / static_cast<double>(features.rows() - 1);
    return s;
}

double frechet_distance(const FeatureStats& a, const FeatureStats& b) {
    if (a.mean.size() != b.mean.size() || a.cov.rows() != a.mean.size() || b.cov.rows() != b.mean.size())
        throw ShapeError("frechet_distance: dimension mismatch (" + std::to_string(a.mean.size()) + " vs " +
                         std::to_string(b.mean.size()) + ")");
    const Eigen::MatrixXd sa = psd_sqrt(a.cov, "first covariance");
    psd_sqrt(b.cov, "second covariance");
    // Tr((S_a S_b)^{1/2}) = Tr((S_a^{1/2} S_b S_a^{1/2})^{1/2}), which is symmetric PSD.
    const Eigen::MatrixXd inner = sa * b.cov * sa;
    const Eigen::MatrixXd root = psd_sqrt(inner, "covariance product");
    const double value = (a.mean - b.mean).squaredNorm() + a.cov.trace() + b.cov.trace() - 2.0 * root.trace();
    return std::max(value, 0.0);
}

double inception_score_analog(const Eigen::MatrixXd& probs) {
    if (probs.rows() < 1 || probs.cols() < 1) throw ShapeError("inception_score_analog: empty table");
    for (Eigen::Index i = 0; i < probs.rows(); ++i) {
        if ((probs.row(i).array() < 0.0).any() || !probs.row(i).allFinite())
            throw NumericError("inception_score_analog: row " + std::to_string(i) + " has invalid probabilities");
        if (std::abs(probs.row(i).sum() - 1.0) > 1e-5)
            throw NumericError("inception_score_analog: row " + std::to_string(i) + " does not sum to 1");
    }
    const Eigen::RowVectorXd marginal = probs.colwise().mean();
    double kl_sum = 0.0;
    for (Eigen::Index i = 0; i < probs.rows(); ++i)
        for (Eigen::Index k = 0; k < probs.cols(); ++k) {
            const double p = probs(i, k);
            if (p > 0.0) kl_sum += p * (std::log(p) - std::log(marginal(k)));
        }
    return std::exp(kl_sum / static_cast<double>(probs.rows()));
}

double silhouette_score(const Eigen::MatrixXd& features, std::span<const int64_t> labels) {
    const Eigen::Index n = features.rows();
    if (static_cast<std::size_t>(n) != labels.size()) throw ShapeError("silhouette_score: label count mismatch");
    std::vector<int64_t> classes(labels.begin(), labels.end());
    std::sort(classes.begin(), classes.end());
    classes.erase(std::unique(classes.begin(), classes.end()), classes.end());
    if (classes.size() < 2) throw ShapeError("silhouette_score: need at least 2 labels");
    std::vector<std::size_t> cluster(static_cast<std::size_t>(n));
    std::vector<int64_t> sizes(classes.size(), 0);
    for (Eigen::Index i = 0; i < n; ++i) {
        cluster[static_cast<std::size_t>(i)] = static_cast<std::size_t>(
            std::lower_bound(classes.begin(), classes.end(), labels[static_cast<std::size_t>(i)]) - classes.begin());
        ++sizes[cluster[static_cast<std::size_t>(i)]];
    }
    for (std::size_t c = 0; c < classes.size(); ++c)
        if (sizes[c] < 2) throw ShapeError("silhouette_score: label " + std::to_string(classes[c]) + " is a singleton");

    double total = 0.0;
    std::vector<double> dist_sum(classes.size());
    for (Eigen::Index i = 0; i < n; ++i) {
        std::fill(dist_sum.begin(), dist_sum.end(), 0.0);
        for (Eigen::Index j = 0; j < n; ++j)
            if (j != i) dist_sum[cluster[static_cast<std::size_t>(j)]] += (features.row(i) - features.row(j)).norm();
        const std::size_t own = cluster[static_cast<std::size_t>(i)];
        const double a = dist_sum[own] / static_cast<double>(sizes[own] - 1);
        double b = std::numeric_limits<double>::infinity();
        for (std::size_t c = 0; c < classes.size(); ++c)
            if (c != own) b = std::min(b, dist_sum[c] / static_cast<double>(sizes[c]));
        const double denom = std::max(a, b);
        total += denom > 0.0 ? (b - a) / denom : 0.0;
    }
    return total / static_cast<double>(n);
}

Pca pca_project(const Eigen::MatrixXd& features, int k) {
    const Eigen::Index n = features.rows(), d = features.cols();
    if (k < 1 || k > std::min(n, d))
        throw ShapeError("pca_project: k=" + std::to_string(k) + " outside [1, " + std::to_string(std::min(n, d)) + "]");
    const Eigen::RowVectorXd mean = features.colwise().mean();
    const Eigen::MatrixXd centered = features.rowwise() - mean;
    const Eigen::MatrixXd cov = (centered.transpose() * centered) / static_cast<double>(std::max<Eigen::Index>(n - 1, 1));
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(cov);
    const Eigen::VectorXd ev = es.eigenvalues().cwiseMax(0.0);  // ascending
    const double total = ev.sum();
    Pca out;
    out.components.resize(d, k);
    out.explained.resize(k);
    for (int c = 0; c < k; ++c) {
        const Eigen::Index src = d - 1 - c;
        Eigen::VectorXd v = es.eigenvectors().col(src);
        Eigen::Index arg = 0;
        v.cwiseAbs().maxCoeff(&arg);
        if (v(arg) < 0.0) v = -v;
        out.components.col(c) = v;
        out.explained(c) = total > 0.0 ? ev(src) / total : 0.0;
    }
    out.projected = centered * out.components;
    return out;
}

Embedder::Embedder(const EmbedderConfig& config, uint64_t seed) : config_(config) {
    if (config_.image_size < 4 || config_.num_classes < 2 || config_.feature_dim < 1 || config_.base_channels < 1)
        throw ConfigError("embedder: invalid configuration");
    Rng rng(seed);
    const int64_t c = config_.base_channels;
    c1_ = Conv2d(3, c, 3, 1, 1, rng);
    c2_ = Conv2d(c, 2 * c, 3, 2, 1, rng);
    c3_ = Conv2d(2 * c, 4 * c, 3, 2, 1, rng);
    fc_ = Linear(4 * c, config_.feature_dim, rng);
    head_ = Linear(config_.feature_dim, config_.num_classes, rng);
}

Embedder::Output Embedder::forward(const Tensor& images) const {
    if (images.rank() != 4 || images.dim(1) != 3 || images.dim(2) != config_.image_size ||
        images.dim(3) != config_.image_size)
        throw ShapeError("embedder: images " + shape_str(images.shape()) + " do not match image_size " +
                         std::to_string(config_.image_size));
    Tensor h = ops::silu(c1_(images));
    h = ops::silu(c2_(h));
    h = ops::silu(c3_(h));
    Tensor f = ops::silu(fc_(ops::global_avg_pool(h)));
    return {f, head_(f)};
}

namespace {

template <typename Fn>
Eigen::MatrixXd batched_rows(const Tensor& images, int64_t batch_size, int64_t width, Fn&& fn) {
    NoGradGuard no_grad;
    const int64_t n = images.dim(0), per = images.numel() / std::max<int64_t>(n, 1);
    Eigen::MatrixXd out(n, width);
    for (int64_t start = 0; start < n; start += batch_size) {
        const int64_t b = std::min(batch_size, n - start);
        std::vector<float> chunk(images.data().begin() + start * per, images.data().begin() + (start + b) * per);
        Shape shape = images.shape();
        shape[0] = b;
        const Tensor rows = fn(Tensor::from(shape, std::move(chunk)));
        out.middleRows(start, b) = to_matrix(rows);
    }
    return out;
}

}  // namespace

Eigen::MatrixXd Embedder::features(const Tensor& images, int64_t batch_size) const {
    return batched_rows(images, batch_size, config_.feature_dim, [&](const Tensor& x) { return forward(x).features; });
}

Eigen::MatrixXd Embedder::probabilities(const Tensor& images, int64_t batch_size) const {
    Eigen::MatrixXd p = batched_rows(images, batch_size, config_.num_classes,
                                     [&](const Tensor& x) { return ops::softmax(forward(x).logits); });
    // Float softmax rows can miss 1 by a few ulps; renormalize in double.
    for (Eigen::Index i = 0; i < p.rows(); ++i) p.row(i) /= p.row(i).sum();
    return p;
}

ParamList Embedder::parameters() const {
    ParamList out;
    c1_.collect("c1", out);
    c2_.collect("c2", out);
    c3_.collect("c3", out);
    fc_.collect("fc", out);
    head_.collect("head", out);
    return out;
}

CheckpointArchive Embedder::to_archive(double heldout_accuracy) const {
    CheckpointArchive a;
    a.kind = "embedder";
    a.config["embedder"] = {{"image_size", config_.image_size},
                            {"num_classes", config_.num_classes},
                            {"feature_dim", config_.feature_dim},
                            {"base_channels", config_.base_channels}};
    a.meta["heldout_accuracy"] = heldout_accuracy;
    a.put_params("embedder", parameters());
    return a;
}

Embedder Embedder::from_archive(const CheckpointArchive& archive) {
    if (archive.kind != "embedder" || !archive.config.contains("embedder"))
        throw IoError("embedder checkpoint: wrong kind '" + archive.kind + "'");
    const auto& j = archive.config["embedder"];
    EmbedderConfig c;
    c.image_size = j.at("image_size").get<int>();
    c.num_classes = j.at("num_classes").get<int>();
    c.feature_dim = j.at("feature_dim").get<int>();
    c.base_channels = j.at("base_channels").get<int>();
    Embedder e(c, 0);
    ParamList params = e.parameters();
    archive.load_params("embedder", params);
    return e;
}

double classification_accuracy(const Embedder& embedder, const ImageSet& data) {
    std::vector<int64_t> all(static_cast<std::size_t>(data.count));
    for (int64_t i = 0; i < data.count; ++i) all[static_cast<std::size_t>(i)] = i;
    const Eigen::MatrixXd p = embedder.probabilities(data.batch(all));
    int64_t correct = 0;
    for (Eigen::Index i = 0; i < p.rows(); ++i) {
        Eigen::Index arg = 0;
        p.row(i).maxCoeff(&arg);
        correct += (arg == data.labels[static_cast<std::size_t>(i)]);
    }
    return static_cast<double>(correct) / static_cast<double>(std::max<int64_t>(data.count, 1));
}

EmbedderTrainResult train_embedder(const ImageSet& train, const ImageSet& heldout, const EmbedderConfig& config,
                                   const EmbedderTrainOptions& options) {
    if (train.count == 0) throw ShapeError("train_embedder: empty training set");
    if (train.num_classes != config.num_classes) throw ConfigError("embedder.num_classes: does not match dataset");
    Embedder emb(config, derive_seed(options.seed, kEmbedderInitStream));
    AdamOptions adam;
    adam.lr = options.lr;
    AdamW opt(emb.parameters(), adam);
    for (int64_t step = 0; step < options.steps; ++step) {
        const auto idx = batch_indices(train.count, options.batch_size, options.seed, step);
        Tensor loss = ops::cross_entropy(emb.forward(train.batch(idx)).logits, train.batch_labels(idx));
        if (!std::isfinite(loss.item()))
            throw NumericError("train_embedder: non-finite loss at step " + std::to_string(step));
        loss.backward();
        opt.step();
    }
    const double acc = heldout.count > 0 ? classification_accuracy(emb, heldout) : 0.0;
    return {std::move(emb), acc};
}

std::vector<fs::path> export_feature_panel(const Backbone& model, const std::set<int>& layers,
                                           std::span<const double> t_values, const Tensor& latents,
                                           std::span<const ConditionLabel> cond, uint64_t seed,
                                           const fs::path& out_dir) {
    const int depth = model.config().depth;
    for (int l : layers)
        if (l < 1 || l > depth)
            throw ShapeError("export_feature_panel: layer " + std::to_string(l) + " outside [1, " +
                             std::to_string(depth) + "]");
    for (double t : t_values)
        if (!(t >= 0.0 && t <= 1.0)) throw ShapeError("export_feature_panel: t values must lie in [0, 1]");
    std::error_code ec;
    fs::create_directories(out_dir, ec);
    if (ec) throw IoError("cannot create " + out_dir.string() + ": " + ec.message());

    constexpr int kCell = 8;
    constexpr int kColumns = 8;
    const int grid = model.config().grid_size();
    const int64_t batch = latents.dim(0);
    const Tensor eps = flow::sample_noise(latents.shape(), seed);
    nlohmann::json panels = nlohmann::json::array();
    std::vector<fs::path> written;
    NoGradGuard no_grad;
    for (double t : t_values) {
        const std::vector<float> ts(static_cast<std::size_t>(batch), static_cast<float>(t));
        const auto state = flow::forward_interpolate(latents, eps, ts);
        const auto out = layers.empty() ? Backbone::Output{} : model.forward(state.x_t, ts, cond, layers);
        for (int layer : layers) {
            const Tensor& f = out.taps.at(layer);
            const int64_t tokens = f.dim(1), dim = f.dim(2);
            const Pca pca = pca_project(to_matrix(f.reshape({batch * tokens, dim})), 3);
            Eigen::MatrixXd rgb = pca.projected;
            for (int c = 0; c < 3; ++c) {
                const double lo = rgb.col(c).minCoeff(), hi = rgb.col(c).maxCoeff();
                const double span = hi - lo > 0.0 ? hi - lo : 1.0;
                rgb.col(c) = ((rgb.col(c).array() - lo) / span * 255.0).matrix();
            }
            const int cols = static_cast<int>(std::min<int64_t>(kColumns, batch));
            const int rows = static_cast<int>((batch + cols - 1) / cols);
            const int tile = grid * kCell;
            RgbImage img{cols * tile, rows * tile, std::vector<uint8_t>(std::size_t(cols) * tile * rows * tile * 3, 0)};
            for (int64_t b = 0; b < batch; ++b)
                for (int64_t tok = 0; tok < tokens; ++tok) {
                    const int gx = static_cast<int>(b % cols) * tile + static_cast<int>(tok % grid) * kCell;
                    const int gy = static_cast<int>(b / cols) * tile + static_cast<int>(tok / grid) * kCell;
                    for (int y = 0; y < kCell; ++y)
                        for (int x = 0; x < kCell; ++x)
                            for (int c = 0; c < 3; ++c)
                                img.rgb[(std::size_t(gy + y) * img.width + gx + x) * 3 + c] =
                                    static_cast<uint8_t>(std::lround(rgb(b * tokens + tok, c)));
                }
            char name[64];
            std::snprintf(name, sizeof(name), "layer%02d_t%.2f.png", layer, t);
            write_png(out_dir / name, img);
            written.push_back(out_dir / name);
            panels.push_back({{"file", name},
                              {"layer", layer},
                              {"t", t},
                              {"explained_variance", {pca.explained(0), pca.explained(1), pca.explained(2)}}});
        }
    }
    std::ofstream manifest(out_dir / "manifest.json");
    if (!manifest) throw IoError("cannot write " + (out_dir / "manifest.json").string());
    manifest << nlohmann::json{{"seed", seed}, {"panels", panels}}.dump(2) << '\n';
    return written;
}

}  // namespace st::metrics
