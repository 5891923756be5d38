#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "selftrans/backbone.hpp"
#include "selftrans/codec.hpp"
#include "selftrans/datasets.hpp"
#include "selftrans/guidance.hpp"
#include "selftrans/optim.hpp"

namespace st {

/// Parses the TOML subset used by run configs: [tables], [dotted.tables],
/// dotted keys, strings, integers, floats, booleans and arrays of those.
/// Tables become JSON objects. Throws ConfigError with the line number.
nlohmann::json parse_toml(const std::string& text);

/// Parses a single TOML value; bare words that are not valid TOML values are
/// taken as strings so `--set dataset.kind=shapes` works unquoted.
nlohmann::json parse_toml_value_lenient(const std::string& text);

struct DatasetSettings {
    std::string kind = "shapes";  // "shapes" or "folder"
    std::string path;             // folder datasets only
    int image_size = 32;
    int num_classes = 8;
    int samples_per_class = 1000;
    uint64_t seed = 0;

    ShapesSpec shapes_spec() const { return {image_size, num_classes, samples_per_class, seed}; }
    bool operator==(const DatasetSettings&) const = default;
};

struct CodecSettings {
    int downsample_factor = 4;
    int latent_channels = 4;
    double kl_weight = 1e-5;
    int base_channels = 32;
    int64_t steps = 2000;
    int64_t batch_size = 32;
    double lr = 1e-3;
    std::string checkpoint;  // empty = <output_dir>/codec

    bool operator==(const CodecSettings&) const = default;
};

struct ModelSettings {
    int depth = 12;
    int hidden_dim = 256;
    int heads = 4;
    int patch_size = 2;
    int mlp_ratio = 4;
    int freq_dim = 256;
    double cond_dropout_prob = 0.1;

    bool operator==(const ModelSettings&) const = default;
};

struct TrainSettings {
    std::optional<int64_t> total_steps;  // unset: total_epochs converted to steps
    double total_epochs = 80.0;
    int64_t batch_size = 64;
    double ema_decay = 0.9999;
    int64_t checkpoint_every = 1000;
    int64_t log_every = 100;

    bool operator==(const TrainSettings&) const = default;
};

struct SampleSettings {
    int num_steps = 50;
    double cfg_scale = 4.0;
    int64_t batch_size = 64;

    bool operator==(const SampleSettings&) const = default;
};

struct EvalSettings {
    int64_t num_samples = 10000;
    double feature_t = 0.4;
    int64_t silhouette_batch = 256;
    std::string embedder;  // empty = <output_dir>/embedder
    int64_t embedder_steps = 1500;
    int64_t embedder_batch_size = 64;
    double embedder_lr = 1e-3;
    int embedder_feature_dim = 64;

    bool operator==(const EvalSettings&) const = default;
};

struct RunConfig {
    std::string output_dir = "runs/default";
    uint64_t seed = 0;
    bool deterministic = true;
    DatasetSettings dataset;
    CodecSettings codec;
    ModelSettings model;
    guidance::GuidanceConfig guidance;
    AdamOptions optimizer;
    TrainSettings train;
    SampleSettings sample;
    EvalSettings eval;

    /// Range and cross-field checks; errors name the key.
    void validate() const;

    ModelConfig model_config() const;
    CodecConfig codec_config() const;
    CodecTrainOptions codec_train_options() const;

    std::filesystem::path codec_path() const;
    std::filesystem::path guide_path() const;
    std::filesystem::path embedder_path() const;

    bool operator==(const RunConfig&) const = default;
};

/// Strict conversion from a parsed tree: unknown keys and type mismatches are
/// ConfigErrors naming the dotted key.
RunConfig run_config_from_tree(const nlohmann::json& tree);

/// Applies `key=value` overrides (dotted keys) to a parsed tree.
void apply_overrides(nlohmann::json& tree, const std::vector<std::string>& overrides);

RunConfig parse_config_text(const std::string& text, const std::vector<std::string>& overrides = {});
/// Throws IoError when the file cannot be read.
RunConfig parse_config(const std::filesystem::path& path, const std::vector<std::string>& overrides = {});

/// Full TOML rendering of every setting; optional fields appear only when set.
std::string serialize_config(const RunConfig& config);
nlohmann::json config_to_json(const RunConfig& config);
/// SHA-256 of the serialized config.
std::string config_hash(const RunConfig& config);

}  // namespace st
