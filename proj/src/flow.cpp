#include "selftrans/flow.hpp"

#include "selftrans/errors.hpp"
#include "selftrans/ops.hpp"
#include "selftrans/rng.hpp"

namespace st::flow {

std::vector<float> sample_timesteps(int64_t batch_size, uint64_t seed) {
    if (batch_size <= 0) throw ShapeError("sample_timesteps: empty batch");
    Rng rng(seed);
    std::vector<float> t(static_cast<std::size_t>(batch_size));
    for (auto& v : t) v = static_cast<float>(rng.uniform());
    return t;
}

Tensor sample_noise(const Shape& shape, uint64_t seed) {
    Rng rng(seed);
    return Tensor::from(shape, rng.normal_vector(static_cast<std::size_t>(shape_numel(shape))));
}

NoisyState forward_interpolate(const Tensor& z, const Tensor& eps, std::span<const float> t) {
    check_same_shape(z, eps, "forward_interpolate");
    if (z.rank() < 1 || z.dim(0) != static_cast<int64_t>(t.size()))
        throw ShapeError("forward_interpolate: timestep count does not match batch");
    for (float ti : t)
        if (!(ti >= 0.0f && ti <= 1.0f)) throw ShapeError("forward_interpolate: t outside [0, 1]");
    const int64_t per = z.numel() / z.dim(0);
    const auto& zv = z.values();
    const auto& ev = eps.values();
    std::vector<float> out(zv.size());
    for (int64_t b = 0; b < z.dim(0); ++b) {
        const float tb = t[static_cast<std::size_t>(b)];
        const float keep = 1.0f - tb;
        for (int64_t i = 0; i < per; ++i) {
            const auto k = static_cast<std::size_t>(b * per + i);
            out[k] = keep * zv[k] + tb * ev[k];
        }
    }
    return {Tensor::from(z.shape(), std::move(out)), std::vector<float>(t.begin(), t.end())};
}

Tensor velocity_target(const Tensor& z, const Tensor& eps) {
    check_same_shape(z, eps, "velocity_target");
    return ops::sub(eps.detach(), z.detach());
}

Tensor diffusion_loss(const Tensor& v_pred, const Tensor& v_target) {
    check_same_shape(v_pred, v_target, "diffusion_loss");
    check_finite(v_pred, "diffusion_loss(v_pred)");
    check_finite(v_target, "diffusion_loss(v_target)");
    return ops::mse(v_pred, v_target);
}

}  // namespace st::flow
