#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>

#include "selftrans/backbone.hpp"
#include "selftrans/checkpoint.hpp"
#include "selftrans/flow.hpp"
#include "selftrans/nn.hpp"

namespace st::guidance {

/// Three affine layers with SiLU between them, applied per token.
class ProjectionHead {
public:
    ProjectionHead(int64_t in_dim, int64_t hidden_dim, int64_t out_dim, uint64_t seed);

    Tensor operator()(const Tensor& tokens) const;
    ParamList parameters() const;
    int64_t in_dim() const { return fc1_.in_features(); }
    int64_t out_dim() const { return fc3_.out_features(); }

private:
    Linear fc1_, fc2_, fc3_;
};

struct GuidanceConfig {
    double omega = 30.0;
    double lambda_guide = 0.5;
    double lambda_align = 0.5;
    int guided_layer = 0;   // 0 = default_layer_pair(depth).guided
    int guiding_layer = 0;  // 0 = default_layer_pair(depth).guiding
    std::optional<int64_t> stop_step;  // unset: stop_epochs converted to steps
    double stop_epochs = 20.0;
    std::optional<int64_t> teacher_steps;  // unset: teacher_epochs converted to steps
    double teacher_epochs = 40.0;
    int head_hidden = 0;  // 0 = model hidden_dim
    std::string guide_checkpoint;  // empty = <output_dir>/guide/checkpoint

    /// Resolves 0-valued layers against the backbone depth and range-checks.
    LayerPair layers(int depth) const;
    bool operator==(const GuidanceConfig&) const = default;
};

/// Squared error between projected tokens (reassembled into the latent grid)
/// and the latent z. `projected` is [B, N, p*p*C].
Tensor vae_align_loss_projected(const Tensor& projected, const Tensor& z, int patch_size);
Tensor vae_align_loss(const Tensor& f_n, const ProjectionHead& head, const Tensor& z, int patch_size);

Tensor guide_loss_projected(const Tensor& projected, const Tensor& f_g);
Tensor guide_loss(const Tensor& f_n, const ProjectionHead& head, const Tensor& f_g);

/// active: l_diff + lambda * l_guide; inactive: l_diff itself.
Tensor combined_loss(const Tensor& l_diff, const Tensor& l_guide, double lambda, bool active);

inline bool guidance_active(int64_t step, int64_t stop_step) { return step < stop_step; }

/// f_u + omega * (f_c - f_u), evaluated as omega * f_c + (1 - omega) * f_u so
/// that omega = 1 and omega = 0 reproduce f_c and f_u exactly.
Tensor feature_cfg(const Tensor& f_u, const Tensor& f_c, double omega);

/// Frozen backbone used as the Stage-2 teacher.
class GuideTeacher {
public:
    /// Uses the `ema.*` tensors when present, `model.*` otherwise.
    static GuideTeacher load(const CheckpointArchive& archive);
    explicit GuideTeacher(Backbone model, bool from_ema = false);

    const Backbone& model() const { return model_; }
    bool uses_ema() const { return from_ema_; }
    bool frozen() const;

    /// Post-block features of `layer` with gradient recording disabled.
    Tensor features(const flow::NoisyState& state, std::span<const ConditionLabel> cond, int layer) const;

    /// Always throws FrozenTensorError.
    void assign(const std::string& name, const Tensor& value);

    std::string digest() const { return params_digest(model_.parameters()); }

private:
    Backbone model_;
    bool from_ema_;
};

/// Runs the teacher on the same x_t with the true labels and with all-null
/// labels, taps `layer` in both and combines them with feature_cfg.
Tensor extract_guided_feature(const GuideTeacher& teacher, const flow::NoisyState& state,
                              std::span<const ConditionLabel> cond, int layer, double omega);

}  // namespace st::guidance
