#include "selftrans/backbone.hpp"

#include <cmath>
#include <string>

#include "selftrans/errors.hpp"
#include "selftrans/ops.hpp"
#include "selftrans/rng.hpp"

namespace st {

void ModelConfig::validate() const {
    auto fail = [](const std::string& key, const std::string& why) {
        throw ConfigError("model." + key + ": " + why);
    };
    if (depth < 2) fail("depth", "must be >= 2");
    if (hidden_dim < 4 || hidden_dim % 4 != 0) fail("hidden_dim", "must be a positive multiple of 4");
    if (heads < 1 || hidden_dim % heads != 0) fail("heads", "must divide hidden_dim");
    if (patch_size < 1) fail("patch_size", "must be >= 1");
    if (latent_channels < 1) fail("latent_channels", "must be >= 1");
    if (latent_size < 1 || latent_size % patch_size != 0) fail("latent_size", "must be divisible by patch_size");
    if (num_classes < 1) fail("num_classes", "must be >= 1");
    if (!(cond_dropout_prob >= 0.0 && cond_dropout_prob <= 1.0)) fail("cond_dropout_prob", "must be in [0, 1]");
    if (mlp_ratio < 1) fail("mlp_ratio", "must be >= 1");
    if (freq_dim < 2 || freq_dim % 2 != 0) fail("freq_dim", "must be a positive even number");
}

ConditionLabel ConditionLabel::of(int64_t class_index) {
    if (class_index < 0) throw ShapeError("class index must be non-negative");
    return ConditionLabel(class_index);
}

int64_t ConditionLabel::class_index() const {
    if (is_null()) throw ShapeError("null label has no class index");
    return value_;
}

int64_t ConditionLabel::table_row(int num_classes) const {
    if (is_null()) return num_classes;
    if (value_ >= num_classes)
        throw ShapeError("class index " + std::to_string(value_) + " >= num_classes " + std::to_string(num_classes));
    return value_;
}

std::vector<ConditionLabel> labels_from_indices(std::span<const int64_t> indices) {
    std::vector<ConditionLabel> out;
    out.reserve(indices.size());
    for (auto i : indices) out.push_back(ConditionLabel::of(i));
    return out;
}

std::vector<ConditionLabel> null_labels(std::size_t count) {
    return std::vector<ConditionLabel>(count, ConditionLabel::null());
}

std::vector<ConditionLabel> apply_condition_dropout(std::span<const ConditionLabel> cond, double prob,
                                                    uint64_t seed) {
    if (!(prob >= 0.0 && prob <= 1.0)) throw ConfigError("condition dropout probability outside [0, 1]");
    std::vector<ConditionLabel> out(cond.begin(), cond.end());
    Rng rng(seed);
    for (auto& c : out)
        if (rng.uniform() < prob) c = ConditionLabel::null();
    return out;
}

LayerPair default_layer_pair(int depth) {
    if (depth < 3) throw ConfigError("default_layer_pair: depth must be >= 3");
    return {depth / 2, (2 * depth) / 3};
}

Tensor patchify(const Tensor& x, int p) {
    if (x.rank() != 4) throw ShapeError("patchify: expected [B, C, H, W]");
    const int64_t b = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
    if (h % p != 0 || w % p != 0) throw ShapeError("patchify: spatial size not divisible by patch size");
    const int64_t gh = h / p, gw = w / p;
    std::vector<int64_t> idx;
    idx.reserve(static_cast<std::size_t>(x.numel()));
    for (int64_t n = 0; n < b; ++n)
        for (int64_t gy = 0; gy < gh; ++gy)
            for (int64_t gx = 0; gx < gw; ++gx)
                for (int64_t py = 0; py < p; ++py)
                    for (int64_t px = 0; px < p; ++px)
                        for (int64_t ch = 0; ch < c; ++ch)
                            idx.push_back(((n * c + ch) * h + gy * p + py) * w + gx * p + px);
    return ops::gather(x, std::move(idx), {b, gh * gw, int64_t{p} * p * c});
}

Tensor unpatchify(const Tensor& tokens, int p, int c, int h, int w) {
    if (tokens.rank() != 3) throw ShapeError("unpatchify: expected [B, N, p*p*C]");
    const int64_t gh = h / p, gw = w / p;
    if (tokens.dim(1) != gh * gw || tokens.dim(2) != int64_t{p} * p * c)
        throw ShapeError("unpatchify: token shape " + shape_str(tokens.shape()) + " does not match latent");
    const int64_t b = tokens.dim(0);
    const int64_t feat = int64_t{p} * p * c;
    std::vector<int64_t> idx;
    idx.reserve(static_cast<std::size_t>(tokens.numel()));
    for (int64_t n = 0; n < b; ++n)
        for (int64_t ch = 0; ch < c; ++ch)
            for (int64_t y = 0; y < h; ++y)
                for (int64_t x = 0; x < w; ++x) {
                    const int64_t tok = (y / p) * gw + x / p;
                    const int64_t f = ((y % p) * p + x % p) * c + ch;
                    idx.push_back((n * gh * gw + tok) * feat + f);
                }
    return ops::gather(tokens, std::move(idx), {b, c, h, w});
}

Tensor sincos_position_table(int dim, int grid) {
    const int quarter = dim / 4;
    std::vector<float> table(static_cast<std::size_t>(grid) * grid * dim);
    for (int gy = 0; gy < grid; ++gy)
        for (int gx = 0; gx < grid; ++gx) {
            float* row = table.data() + (static_cast<std::size_t>(gy) * grid + gx) * dim;
            // First half encodes the column coordinate, second half the row.
            const double coords[2] = {static_cast<double>(gx), static_cast<double>(gy)};
            for (int half = 0; half < 2; ++half)
                for (int i = 0; i < quarter; ++i) {
                    const double omega = 1.0 / std::pow(10000.0, static_cast<double>(i) / quarter);
                    const double arg = coords[half] * omega;
                    row[half * 2 * quarter + i] = static_cast<float>(std::sin(arg));
                    row[half * 2 * quarter + quarter + i] = static_cast<float>(std::cos(arg));
                }
        }
    return Tensor::from({int64_t{grid} * grid, dim}, std::move(table));
}

Tensor timestep_features(std::span<const float> t, int dim) {
    const int half = dim / 2;
    std::vector<float> out(t.size() * static_cast<std::size_t>(dim));
    for (std::size_t b = 0; b < t.size(); ++b) {
        const double scaled = 1000.0 * t[b];
        for (int i = 0; i < half; ++i) {
            const double freq = std::exp(-std::log(10000.0) * i / half);
            out[b * dim + i] = static_cast<float>(std::cos(scaled * freq));
            out[b * dim + half + i] = static_cast<float>(std::sin(scaled * freq));
        }
    }
    return Tensor::from({static_cast<int64_t>(t.size()), dim}, std::move(out));
}

Backbone::Backbone(const ModelConfig& config, uint64_t seed) : config_(config) {
    config_.validate();
    Rng rng(seed);
    const int64_t d = config_.hidden_dim;
    x_embed_ = Linear(config_.patch_dim(), d, rng);
    t_fc1_ = Linear(config_.freq_dim, d, rng);
    t_fc2_ = Linear(d, d, rng);
    init_normal(t_fc1_.weight, 0.02f, rng);
    init_normal(t_fc2_.weight, 0.02f, rng);
    y_table_ = make_param({config_.num_classes + 1, d});
    init_normal(y_table_, 0.02f, rng);
    blocks_.reserve(static_cast<std::size_t>(config_.depth));
    for (int i = 0; i < config_.depth; ++i) {
        Block blk{Linear(d, 6 * d, rng), Linear(d, 3 * d, rng), Linear(d, d, rng),
                  Linear(d, d * config_.mlp_ratio, rng), Linear(d * config_.mlp_ratio, d, rng)};
        blk.adaln.zero_init();
        blocks_.push_back(std::move(blk));
    }
    final_adaln_ = Linear(d, 2 * d, rng);
    final_adaln_.zero_init();
    final_linear_ = Linear(d, config_.patch_dim(), rng);
    final_linear_.zero_init();
    pos_table_ = sincos_position_table(static_cast<int>(d), config_.grid_size());
}

ParamList Backbone::parameters() const {
    ParamList out;
    x_embed_.collect("x_embed", out);
    t_fc1_.collect("t_embed.fc1", out);
    t_fc2_.collect("t_embed.fc2", out);
    out.push_back({"y_table", y_table_});
    for (std::size_t i = 0; i < blocks_.size(); ++i) {
        const std::string p = "blocks." + std::to_string(i);
        blocks_[i].adaln.collect(p + ".adaln", out);
        blocks_[i].qkv.collect(p + ".qkv", out);
        blocks_[i].proj.collect(p + ".proj", out);
        blocks_[i].fc1.collect(p + ".fc1", out);
        blocks_[i].fc2.collect(p + ".fc2", out);
    }
    final_adaln_.collect("final.adaln", out);
    final_linear_.collect("final.linear", out);
    return out;
}

void Backbone::freeze() {
    for (auto& p : parameters()) p.tensor.freeze();
}

Tensor Backbone::embed_condition(ConditionLabel label) const {
    const auto row = label.table_row(config_.num_classes);
    return ops::embedding(y_table_, {row}).reshape({config_.hidden_dim});
}

Tensor Backbone::attention(const Tensor& h, const Block& blk) const {
    const int64_t b = h.dim(0), n = h.dim(1), d = h.dim(2);
    const int64_t heads = config_.heads, dh = d / heads;
    Tensor qkv = blk.qkv(h);  // [B, N, 3D]
    auto split = [&](int64_t which) {
        std::vector<int64_t> idx;
        idx.reserve(static_cast<std::size_t>(b * n * d));
        for (int64_t bb = 0; bb < b; ++bb)
            for (int64_t hh = 0; hh < heads; ++hh)
                for (int64_t i = 0; i < n; ++i)
                    for (int64_t e = 0; e < dh; ++e) idx.push_back((bb * n + i) * 3 * d + which * d + hh * dh + e);
        return ops::gather(qkv, std::move(idx), {b * heads, n, dh});
    };
    Tensor q = split(0), k = split(1), v = split(2);
    Tensor scores = ops::scale(ops::bmm(q, k, false, true), 1.0f / std::sqrt(static_cast<float>(dh)));
    Tensor attn = ops::bmm(ops::softmax(scores), v);  // [B*H, N, dh]
    std::vector<int64_t> idx;
    idx.reserve(static_cast<std::size_t>(b * n * d));
    for (int64_t bb = 0; bb < b; ++bb)
        for (int64_t i = 0; i < n; ++i)
            for (int64_t hh = 0; hh < heads; ++hh)
                for (int64_t e = 0; e < dh; ++e) idx.push_back(((bb * heads + hh) * n + i) * dh + e);
    return blk.proj(ops::gather(attn, std::move(idx), {b, n, d}));
}

Backbone::Output Backbone::forward(const Tensor& x_t, std::span<const float> t, std::span<const ConditionLabel> cond,
                                   const std::set<int>& tap_layers) const {
    const auto& cfg = config_;
    const Shape expected{x_t.rank() == 4 ? x_t.dim(0) : -1, cfg.latent_channels, cfg.latent_size, cfg.latent_size};
    if (x_t.shape() != expected)
        throw ShapeError("backbone: input " + shape_str(x_t.shape()) + " does not match model latent shape");
    const int64_t b = x_t.dim(0);
    if (static_cast<int64_t>(t.size()) != b || static_cast<int64_t>(cond.size()) != b)
        throw ShapeError("backbone: batch size mismatch between x_t, t and cond");
    for (int layer : tap_layers)
        if (layer < 1 || layer > cfg.depth)
            throw ShapeError("backbone: tap layer " + std::to_string(layer) + " outside [1, " +
                             std::to_string(cfg.depth) + "]");

    const int64_t d = cfg.hidden_dim;
    Tensor h = ops::add_broadcast(x_embed_(patchify(x_t, cfg.patch_size)), pos_table_);

    Tensor temb = t_fc2_(ops::silu(t_fc1_(timestep_features(t, cfg.freq_dim))));
    std::vector<int64_t> rows;
    rows.reserve(cond.size());
    for (const auto& c : cond) rows.push_back(c.table_row(cfg.num_classes));
    Tensor c_act = ops::silu(ops::add(temb, ops::embedding(y_table_, rows)));

    Output out;
    for (int i = 0; i < cfg.depth; ++i) {
        const Block& blk = blocks_[static_cast<std::size_t>(i)];
        Tensor mod = blk.adaln(c_act);  // [B, 6D]
        auto chunk = [&](int k) { return ops::slice_last(mod, k * d, d); };
        Tensor a = attention(ops::modulate(ops::layer_norm(h), chunk(0), chunk(1)), blk);
        h = ops::gated_add(h, chunk(2), a);
        Tensor m = blk.fc2(ops::gelu(blk.fc1(ops::modulate(ops::layer_norm(h), chunk(3), chunk(4)))));
        h = ops::gated_add(h, chunk(5), m);
        if (tap_layers.count(i + 1)) out.taps.emplace(i + 1, h);
    }
    Tensor fmod = final_adaln_(c_act);
    Tensor y = final_linear_(ops::modulate(ops::layer_norm(h), ops::slice_last(fmod, 0, d), ops::slice_last(fmod, d, d)));
    out.velocity = unpatchify(y, cfg.patch_size, cfg.latent_channels, cfg.latent_size, cfg.latent_size);
    return out;
}

nlohmann::json to_json(const ModelConfig& c) {
    return {{"depth", c.depth},
            {"hidden_dim", c.hidden_dim},
            {"heads", c.heads},
            {"patch_size", c.patch_size},
            {"latent_channels", c.latent_channels},
            {"latent_size", c.latent_size},
            {"num_classes", c.num_classes},
            {"cond_dropout_prob", c.cond_dropout_prob},
            {"mlp_ratio", c.mlp_ratio},
            {"freq_dim", c.freq_dim}};
}

ModelConfig model_config_from_json(const nlohmann::json& j) {
    ModelConfig c;
    try {
        c.depth = j.value("depth", c.depth);
        c.hidden_dim = j.value("hidden_dim", c.hidden_dim);
        c.heads = j.value("heads", c.heads);
        c.patch_size = j.value("patch_size", c.patch_size);
        c.latent_channels = j.value("latent_channels", c.latent_channels);
        c.latent_size = j.value("latent_size", c.latent_size);
        c.num_classes = j.value("num_classes", c.num_classes);
        c.cond_dropout_prob = j.value("cond_dropout_prob", c.cond_dropout_prob);
        c.mlp_ratio = j.value("mlp_ratio", c.mlp_ratio);
        c.freq_dim = j.value("freq_dim", c.freq_dim);
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("model config: ") + e.what());
    }
    c.validate();
    return c;
}

}  // namespace st
