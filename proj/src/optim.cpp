#include "selftrans/optim.hpp"

#include <cmath>

#include "selftrans/errors.hpp"

namespace st {

AdamW::AdamW(ParamList params, AdamOptions options) : params_(std::move(params)), opt_(options) {
    for (const auto& p : params_) {
        if (p.tensor.frozen()) throw FrozenTensorError("optimizer given frozen tensor '" + p.name + "'");
        m_.push_back({p.name, Tensor::zeros(p.tensor.shape())});
        v_.push_back({p.name, Tensor::zeros(p.tensor.shape())});
    }
}

void AdamW::step() {
    ++t_;
    const double bc1 = 1.0 - std::pow(opt_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(opt_.beta2, static_cast<double>(t_));
    const auto b1 = static_cast<float>(opt_.beta1);
    const auto b2 = static_cast<float>(opt_.beta2);
    const auto step_size = static_cast<float>(opt_.lr / bc1);
    const auto inv_sqrt_bc2 = static_cast<float>(1.0 / std::sqrt(bc2));
    const auto decay = static_cast<float>(1.0 - opt_.lr * opt_.weight_decay);
    const auto eps = static_cast<float>(opt_.eps);
    for (std::size_t i = 0; i < params_.size(); ++i) {
        Tensor& p = params_[i].tensor;
        if (!p.has_grad()) continue;
        auto w = p.mutable_data();
        auto g = p.grad();
        auto m = m_[i].tensor.mutable_data();
        auto v = v_[i].tensor.mutable_data();
        for (std::size_t k = 0; k < w.size(); ++k) {
            m[k] = b1 * m[k] + (1.0f - b1) * g[k];
            v[k] = b2 * v[k] + (1.0f - b2) * g[k] * g[k];
            if (opt_.weight_decay != 0.0) w[k] *= decay;
            w[k] -= step_size * m[k] / (std::sqrt(v[k]) * inv_sqrt_bc2 + eps);
        }
        p.zero_grad();
    }
}

void AdamW::zero_grad() {
    for (auto& p : params_) p.tensor.zero_grad();
}

void AdamW::save_state(CheckpointArchive& archive, const std::string& prefix) const {
    archive.put_params(prefix + ".m", m_);
    archive.put_params(prefix + ".v", v_);
    archive.meta[prefix + ".t"] = t_;
}

void AdamW::load_state(const CheckpointArchive& archive, const std::string& prefix) {
    archive.load_params(prefix + ".m", m_);
    archive.load_params(prefix + ".v", v_);
    if (!archive.meta.contains(prefix + ".t")) throw IoError("checkpoint: missing optimizer step counter");
    t_ = archive.meta[prefix + ".t"].get<int64_t>();
}

void ema_update(ParamList& ema, const ParamList& raw, double decay) {
    if (!(decay >= 0.0 && decay <= 1.0)) throw ConfigError("ema decay must be in [0, 1]");
    if (ema.size() != raw.size()) throw ShapeError("ema_update: parameter trees differ in size");
    const auto keep = static_cast<float>(decay);
    const auto take = static_cast<float>(1.0 - decay);
    for (std::size_t i = 0; i < ema.size(); ++i) {
        if (ema[i].name != raw[i].name || ema[i].tensor.shape() != raw[i].tensor.shape())
            throw ShapeError("ema_update: parameter mismatch at '" + ema[i].name + "'");
        auto e = ema[i].tensor.mutable_data();
        auto r = raw[i].tensor.data();
        for (std::size_t k = 0; k < e.size(); ++k) e[k] = keep * e[k] + take * r[k];
    }
}

}  // namespace st
