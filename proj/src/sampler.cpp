#include "selftrans/sampler.hpp"

#include <cmath>
#include <fstream>

#include <json.hpp>

#include "selftrans/errors.hpp"
#include "selftrans/flow.hpp"
#include "selftrans/image_io.hpp"
#include "selftrans/ops.hpp"

namespace st {

VelocityField backbone_field(const Backbone& model) {
    return [&model](const Tensor& x, float t, std::span<const ConditionLabel> cond) {
        NoGradGuard no_grad;
        const std::vector<float> ts(static_cast<std::size_t>(x.dim(0)), t);
        return model.forward(x, ts, cond).velocity;
    };
}

void SampleRequest::validate() const {
    if (labels.empty()) throw ConfigError("sample.batch_size: must be >= 1");
    if (num_steps < 1) throw ConfigError("sample.num_steps: must be >= 1");
    if (!(cfg_scale >= 0.0) || !std::isfinite(cfg_scale)) throw ConfigError("sample.cfg_scale: must be finite and >= 0");
}

SampleRequest make_request(ConditionLabel label, int64_t batch, int num_steps, double cfg_scale, uint64_t seed) {
    SampleRequest r;
    r.labels.assign(static_cast<std::size_t>(std::max<int64_t>(batch, 0)), label);
    r.num_steps = num_steps;
    r.cfg_scale = cfg_scale;
    r.seed = seed;
    return r;
}

Tensor cfg_combine(const Tensor& v_u, const Tensor& v_c, double omega) {
    check_same_shape(v_u, v_c, "cfg_combine");
    const auto w = static_cast<float>(omega);
    return ops::weighted_sum(v_c, w, v_u, 1.0f - w);
}

Tensor euler_sample(const VelocityField& field, const Shape& sample_shape, const SampleRequest& req) {
    req.validate();
    NoGradGuard no_grad;
    Shape shape{static_cast<int64_t>(req.labels.size())};
    shape.insert(shape.end(), sample_shape.begin(), sample_shape.end());
    Tensor x = flow::sample_noise(shape, req.seed);
    const auto nulls = null_labels(req.labels.size());
    const float dt = 1.0f / static_cast<float>(req.num_steps);
    for (int k = 0; k < req.num_steps; ++k) {
        const float t = 1.0f - static_cast<float>(k) / static_cast<float>(req.num_steps);
        Tensor v = field(x, t, req.labels);
        if (req.cfg_scale != 1.0) v = cfg_combine(field(x, t, nulls), v, req.cfg_scale);
        if (v.shape() != x.shape())
            throw ShapeError("euler_sample: field returned " + shape_str(v.shape()) + " for state " +
                             shape_str(x.shape()));
        x = ops::weighted_sum(x, 1.0f, v, -dt);
        for (float value : x.data())
            if (!std::isfinite(value)) throw NumericError("euler_sample: non-finite state at step " + std::to_string(k));
    }
    return x;
}

Tensor sample_images(const Backbone& model, const LatentCodec& codec, const LatentStats& stats,
                     const SampleRequest& req) {
    const ModelConfig& m = model.config();
    const CodecConfig& c = codec.config();
    if (m.latent_channels != c.latent_channels || m.latent_size != c.latent_size())
        throw ConfigError("model.latent_size: model latent " + std::to_string(m.latent_channels) + "x" +
                          std::to_string(m.latent_size) + " does not match codec latent " +
                          std::to_string(c.latent_channels) + "x" + std::to_string(c.latent_size()));
    if (static_cast<int>(stats.mean.size()) != c.latent_channels)
        throw ConfigError("latent stats do not match codec.latent_channels");
    const Tensor z = euler_sample(backbone_field(model), {m.latent_channels, m.latent_size, m.latent_size}, req);
    NoGradGuard no_grad;
    return codec.decode(stats.destandardize(z));
}

void write_sample_grid(const std::filesystem::path& path, const Tensor& images, const SampleRequest& req,
                       const std::string& config_hash, int columns) {
    if (images.rank() != 4 || images.dim(1) != 3 || images.dim(2) != images.dim(3))
        throw ShapeError("write_sample_grid: expected [B, 3, S, S], got " + shape_str(images.shape()));
    write_png(path, tile_images(images.values(), images.dim(0), static_cast<int>(images.dim(2)), columns));
    nlohmann::json labels = nlohmann::json::array();
    for (const auto& l : req.labels) labels.push_back(l.is_null() ? nlohmann::json(nullptr) : nlohmann::json(l.class_index()));
    const nlohmann::json manifest = {{"seed", req.seed},         {"num_steps", req.num_steps},
                                     {"cfg_scale", req.cfg_scale}, {"config_hash", config_hash},
                                     {"columns", columns},         {"labels", labels}};
    std::ofstream out(path.string() + ".json");
    if (!out) throw IoError("cannot write " + path.string() + ".json");
    out << manifest.dump(2) << '\n';
}

}  // namespace st
