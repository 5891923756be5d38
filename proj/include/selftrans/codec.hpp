#pragma once

#include <cstdint>
#include <functional>
#include <vector>

#include <json.hpp>

#include "selftrans/checkpoint.hpp"
#include "selftrans/nn.hpp"
#include "selftrans/tensor.hpp"

namespace st {

struct ImageSet;

struct CodecConfig {
    int image_size = 32;
    int image_channels = 3;
    int downsample_factor = 4;
    int latent_channels = 4;
    double kl_weight = 1e-5;
    int base_channels = 32;

    void validate() const;
    int latent_size() const { return image_size / downsample_factor; }
    bool operator==(const CodecConfig&) const = default;
};

nlohmann::json to_json(const CodecConfig& c);
CodecConfig codec_config_from_json(const nlohmann::json& j);

/// Per-channel standardization statistics of the sampled latents.
struct LatentStats {
    std::vector<float> mean;
    std::vector<float> std;

    Tensor standardize(const Tensor& z) const;
    Tensor destandardize(const Tensor& z) const;
};

struct Posterior {
    Tensor mean;      // [B, C_z, H_z, W_z]
    Tensor logvar;    // same shape
    Tensor z_sample;  // mean + exp(logvar / 2) * eta, or mean in deterministic mode
};

struct CodecLosses {
    Tensor total;
    Tensor recon;
    Tensor kl;
};

/// mean + exp(0.5 * logvar) * eta with eta ~ N(0, I) drawn from Rng(seed).
Tensor reparameterize(const Tensor& mean, const Tensor& logvar, uint64_t seed);

/// recon: mean squared error; kl: 0.5 * mean(exp(lv) + mu^2 - 1 - lv);
/// total: recon + beta * kl (exactly recon when beta = 0).
CodecLosses codec_loss(const Tensor& images, const Tensor& mean, const Tensor& logvar, const Tensor& recon,
                       double kl_weight);

/// Small convolutional VAE: stride-2 convolutions down to the latent grid and
/// nearest upsampling + convolutions back, tanh output.
class LatentCodec {
public:
    LatentCodec(const CodecConfig& config, uint64_t seed);

    /// `deterministic` returns the posterior mean as z_sample.
    Posterior encode(const Tensor& images, uint64_t seed, bool deterministic = false) const;
    Tensor decode(const Tensor& z) const;

    ParamList parameters() const;
    const CodecConfig& config() const { return config_; }

    CheckpointArchive to_archive(const LatentStats* stats = nullptr) const;
    static LatentCodec from_archive(const CheckpointArchive& archive);

private:
    CodecConfig config_;
    std::vector<Conv2d> enc_;
    Conv2d enc_out_;
    Conv2d dec_in_;
    std::vector<Conv2d> dec_;
    Conv2d dec_out_;
};

LatentStats latent_stats_from_archive(const CheckpointArchive& archive);
void put_latent_stats(CheckpointArchive& archive, const LatentStats& stats);

struct CodecTrainOptions {
    int64_t steps = 2000;
    int64_t batch_size = 32;
    double lr = 1e-3;
    uint64_t seed = 0;
};

struct CodecStepLog {
    int64_t step;
    double total;
    double recon;
    double kl;
};

struct CodecTrainResult {
    LatentCodec codec;
    std::vector<CodecStepLog> log;
};

/// Throws ShapeError on an empty dataset and NumericError (with the step) when
/// a loss turns non-finite.
CodecTrainResult train_codec(const ImageSet& data, const CodecConfig& config, const CodecTrainOptions& options,
                             const std::function<void(const CodecStepLog&)>& on_step = {});

/// Per-channel mean/std of posterior samples z over the whole set.
LatentStats compute_latent_stats(const LatentCodec& codec, const ImageSet& data, int64_t batch_size = 64);

/// Posterior means and log-variances for every image, batch by batch.
std::pair<Tensor, Tensor> encode_dataset(const LatentCodec& codec, const ImageSet& data, int64_t batch_size = 64);

/// Mean absolute error of decode(encode(x).mean) over the set.
double reconstruction_mae(const LatentCodec& codec, const ImageSet& data, int64_t batch_size = 64);

}  // namespace st
