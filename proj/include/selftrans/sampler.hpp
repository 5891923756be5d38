#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "selftrans/backbone.hpp"
#include "selftrans/codec.hpp"
#include "selftrans/tensor.hpp"

namespace st {

/// v(x, t, cond) for a batch sharing one time value.
using VelocityField = std::function<Tensor(const Tensor& x, float t, std::span<const ConditionLabel> cond)>;

/// Wraps a backbone; evaluation runs without gradient tracking.
VelocityField backbone_field(const Backbone& model);

struct SampleRequest {
    std::vector<ConditionLabel> labels;  // one per sample; batch size = labels.size()
    int num_steps = 50;
    double cfg_scale = 4.0;
    uint64_t seed = 0;

    void validate() const;
};

/// Same label repeated `batch` times.
SampleRequest make_request(ConditionLabel label, int64_t batch, int num_steps, double cfg_scale, uint64_t seed);

/// omega * v_c + (1 - omega) * v_u, i.e. v_u + omega * (v_c - v_u) with exact
/// endpoints at omega = 0 and omega = 1.
Tensor cfg_combine(const Tensor& v_u, const Tensor& v_c, double omega);

/// Euler integration of dx/dt = v from t = 1 (standard normal noise drawn from
/// the request seed) down to t = 0 with N uniform steps: t_k = 1 - k/N,
/// x <- x - v(x, t_k) / N. At omega = 1 the unconditional pass is skipped.
Tensor euler_sample(const VelocityField& field, const Shape& sample_shape, const SampleRequest& req);

/// euler_sample with the backbone, then de-standardize and decode.
Tensor sample_images(const Backbone& model, const LatentCodec& codec, const LatentStats& stats,
                     const SampleRequest& req);

/// Writes a PNG grid (row-major, `columns` per row) and `<path>.json` with the
/// seed, config hash and labels.
void write_sample_grid(const std::filesystem::path& path, const Tensor& images, const SampleRequest& req,
                       const std::string& config_hash, int columns = 8);

}  // namespace st
