#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "selftrans/tensor.hpp"

// Linear interpolant between data (t = 0) and noise (t = 1):
//   x_t = (1 - t) * z + t * eps,   v = d x_t / dt = eps - z.
namespace st::flow {

struct NoisyState {
    Tensor x_t;            // [B, C, H, W]
    std::vector<float> t;  // [B], each in [0, 1]
};

/// i.i.d. uniform draws on [0, 1); deterministic in the seed.
std::vector<float> sample_timesteps(int64_t batch_size, uint64_t seed);

/// Standard-normal tensor of the given shape, deterministic in the seed.
Tensor sample_noise(const Shape& shape, uint64_t seed);

NoisyState forward_interpolate(const Tensor& z, const Tensor& eps, std::span<const float> t);

Tensor velocity_target(const Tensor& z, const Tensor& eps);

/// Mean squared error; throws NumericError on non-finite inputs.
Tensor diffusion_loss(const Tensor& v_pred, const Tensor& v_target);

}  // namespace st::flow
