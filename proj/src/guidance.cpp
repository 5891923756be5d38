#include "selftrans/guidance.hpp"

#include "selftrans/errors.hpp"
#include "selftrans/ops.hpp"
#include "selftrans/rng.hpp"

namespace st::guidance {

ProjectionHead::ProjectionHead(int64_t in_dim, int64_t hidden_dim, int64_t out_dim, uint64_t seed) {
    Rng rng(seed);
    fc1_ = Linear(in_dim, hidden_dim, rng);
    fc2_ = Linear(hidden_dim, hidden_dim, rng);
    fc3_ = Linear(hidden_dim, out_dim, rng);
}

Tensor ProjectionHead::operator()(const Tensor& tokens) const {
    if (tokens.rank() < 1 || tokens.shape().back() != in_dim())
        throw ShapeError("projection head: input " + shape_str(tokens.shape()) + ", expected last dim " +
                         std::to_string(in_dim()));
    return fc3_(ops::silu(fc2_(ops::silu(fc1_(tokens)))));
}

ParamList ProjectionHead::parameters() const {
    ParamList out;
    fc1_.collect("fc1", out);
    fc2_.collect("fc2", out);
    fc3_.collect("fc3", out);
    return out;
}

LayerPair GuidanceConfig::layers(int depth) const {
    LayerPair out{guided_layer, guiding_layer};
    if (!guided_layer || !guiding_layer) {
        const LayerPair def = default_layer_pair(depth);
        if (!guided_layer) out.guided = def.guided;
        if (!guiding_layer) out.guiding = def.guiding;
    }
    if (out.guided < 1 || out.guided > depth)
        throw ConfigError("guidance.guided_layer: " + std::to_string(out.guided) + " outside [1, " +
                          std::to_string(depth) + "]");
    if (out.guiding < 1 || out.guiding > depth)
        throw ConfigError("guidance.guiding_layer: " + std::to_string(out.guiding) + " outside [1, " +
                          std::to_string(depth) + "]");
    return out;
}

Tensor vae_align_loss_projected(const Tensor& projected, const Tensor& z, int patch_size) {
    if (z.rank() != 4 || projected.rank() != 3 || projected.dim(0) != z.dim(0))
        throw ShapeError("vae_align_loss: expected projected [B, N, F] and z [B, C, H, W]");
    const auto c = static_cast<int>(z.dim(1)), h = static_cast<int>(z.dim(2)), w = static_cast<int>(z.dim(3));
    if (h % patch_size || w % patch_size) throw ShapeError("vae_align_loss: latent not divisible by patch size");
    const int64_t patches = int64_t{h / patch_size} * (w / patch_size);
    if (projected.dim(1) != patches)
        throw ShapeError("vae_align_loss: " + std::to_string(projected.dim(1)) + " tokens vs " +
                         std::to_string(patches) + " latent patches");
    if (projected.dim(2) != int64_t{patch_size} * patch_size * c)
        throw ShapeError("vae_align_loss: projection width does not match p*p*C");
    return ops::mse(unpatchify(projected, patch_size, c, h, w), z.detach());
}

Tensor vae_align_loss(const Tensor& f_n, const ProjectionHead& head, const Tensor& z, int patch_size) {
    return vae_align_loss_projected(head(f_n), z, patch_size);
}

Tensor guide_loss_projected(const Tensor& projected, const Tensor& f_g) {
    if (projected.shape() != f_g.shape())
        throw ShapeError("guide_loss: projected " + shape_str(projected.shape()) + " vs guided feature " +
                         shape_str(f_g.shape()));
    return ops::mse(projected, f_g.detach());
}

Tensor guide_loss(const Tensor& f_n, const ProjectionHead& head, const Tensor& f_g) {
    return guide_loss_projected(head(f_n), f_g);
}

Tensor combined_loss(const Tensor& l_diff, const Tensor& l_guide, double lambda, bool active) {
    if (!active) return l_diff;
    return ops::weighted_sum(l_diff, 1.0f, l_guide, static_cast<float>(lambda));
}

Tensor feature_cfg(const Tensor& f_u, const Tensor& f_c, double omega) {
    const auto w = static_cast<float>(omega);
    return ops::weighted_sum(f_c, w, f_u, 1.0f - w);
}

GuideTeacher::GuideTeacher(Backbone model, bool from_ema) : model_(std::move(model)), from_ema_(from_ema) {
    model_.freeze();
}

GuideTeacher GuideTeacher::load(const CheckpointArchive& archive) {
    if (!archive.config.contains("model")) throw IoError("guide checkpoint: manifest has no model config");
    const ModelConfig cfg = model_config_from_json(archive.config["model"]);
    Backbone model(cfg, 0);
    ParamList params = model.parameters();
    const bool ema = archive.has_prefix("ema");
    archive.load_params(ema ? "ema" : "model", params);
    return GuideTeacher(std::move(model), ema);
}

bool GuideTeacher::frozen() const {
    for (const auto& p : model_.parameters())
        if (!p.tensor.frozen()) return false;
    return true;
}

Tensor GuideTeacher::features(const flow::NoisyState& state, std::span<const ConditionLabel> cond, int layer) const {
    if (!frozen()) throw FrozenTensorError("guide teacher is not frozen");
    NoGradGuard no_grad;
    auto out = model_.forward(state.x_t, state.t, cond, {layer});
    return out.taps.at(layer);
}

void GuideTeacher::assign(const std::string& name, const Tensor&) {
    throw FrozenTensorError("guide teacher is frozen; refusing to modify '" + name + "'");
}

Tensor extract_guided_feature(const GuideTeacher& teacher, const flow::NoisyState& state,
                              std::span<const ConditionLabel> cond, int layer, double omega) {
    for (const auto& c : cond)
        if (c.is_null()) throw ShapeError("extract_guided_feature: teacher needs real class labels");
    const Tensor f_c = teacher.features(state, cond, layer);
    const auto nulls = null_labels(cond.size());
    const Tensor f_u = teacher.features(state, nulls, layer);
    NoGradGuard no_grad;
    return feature_cfg(f_u, f_c, omega);
}

}  // namespace st::guidance
