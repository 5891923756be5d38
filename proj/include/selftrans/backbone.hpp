#pragma once

#include <cstdint>
#include <map>
#include <set>
#include <span>
#include <vector>

#include <json.hpp>

#include "selftrans/nn.hpp"
#include "selftrans/tensor.hpp"

namespace st {

struct ModelConfig {
    int depth = 12;
    int hidden_dim = 256;
    int heads = 4;
    int patch_size = 2;
    int latent_channels = 4;
    int latent_size = 8;
    int num_classes = 8;
    double cond_dropout_prob = 0.1;
    int mlp_ratio = 4;
    int freq_dim = 256;

    /// Throws ConfigError naming the violated field.
    void validate() const;
    int grid_size() const { return latent_size / patch_size; }
    int num_tokens() const { return grid_size() * grid_size(); }
    int patch_dim() const { return patch_size * patch_size * latent_channels; }

    bool operator==(const ModelConfig&) const = default;
};

/// A class index in [0, K) or the null condition used for CFG.
class ConditionLabel {
public:
    static ConditionLabel null() { return ConditionLabel(-1); }
    static ConditionLabel of(int64_t class_index);

    bool is_null() const { return value_ < 0; }
    int64_t class_index() const;
    /// Row in the embedding table: the class index, or K for null.
    int64_t table_row(int num_classes) const;

    bool operator==(const ConditionLabel&) const = default;

private:
    explicit ConditionLabel(int64_t v) : value_(v) {}
    int64_t value_;
};

std::vector<ConditionLabel> labels_from_indices(std::span<const int64_t> indices);
std::vector<ConditionLabel> null_labels(std::size_t count);

/// Each label independently becomes null with probability `prob`.
std::vector<ConditionLabel> apply_condition_dropout(std::span<const ConditionLabel> cond, double prob,
                                                    uint64_t seed);

struct LayerPair {
    int guided;   // student layer receiving supervision
    int guiding;  // teacher layer providing it
};

/// (floor(n/2), floor(2n/3)) for a depth-n backbone.
LayerPair default_layer_pair(int depth);

/// [B, C, H, W] -> [B, (H/p)(W/p), p*p*C]; token order is row-major over the
/// patch grid, features are ordered (patch row, patch col, channel).
Tensor patchify(const Tensor& x, int patch_size);
/// Inverse of patchify.
Tensor unpatchify(const Tensor& tokens, int patch_size, int channels, int height, int width);

/// Fixed 2-D sin-cos position table [grid*grid, dim].
Tensor sincos_position_table(int dim, int grid);
/// Sinusoidal timestep features [B, dim].
Tensor timestep_features(std::span<const float> t, int dim);

/// DiT-style transformer over latent patches with adaLN-zero class/timestep
/// conditioning. Feature taps expose the residual stream after a block.
class Backbone {
public:
    struct Output {
        Tensor velocity;            // [B, C, H, W]
        std::map<int, Tensor> taps;  // block index (1-based) -> [B, N, D]
    };

    Backbone(const ModelConfig& config, uint64_t seed);

    /// `tap_layers` are 1-based block indices in [1, depth].
    Output forward(const Tensor& x_t, std::span<const float> t, std::span<const ConditionLabel> cond,
                   const std::set<int>& tap_layers = {}) const;

    /// Embedding-table row for the label: [D].
    Tensor embed_condition(ConditionLabel label) const;

    ParamList parameters() const;
    const ModelConfig& config() const { return config_; }
    void freeze();

private:
    struct Block {
        Linear adaln, qkv, proj, fc1, fc2;
    };

    Tensor attention(const Tensor& h, const Block& blk) const;

    ModelConfig config_;
    Linear x_embed_;
    Linear t_fc1_, t_fc2_;
    Tensor y_table_;
    std::vector<Block> blocks_;
    Linear final_adaln_, final_linear_;
    Tensor pos_table_;
};

nlohmann::json to_json(const ModelConfig& c);
/// Missing keys keep their defaults; the result is validated.
ModelConfig model_config_from_json(const nlohmann::json& j);

}  // namespace st
