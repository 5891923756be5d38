#include "selftrans/nn.hpp"

#include <algorithm>
#include <cmath>

#include "selftrans/errors.hpp"
#include "selftrans/ops.hpp"

namespace st {

Tensor make_param(Shape shape) { return Tensor::zeros(std::move(shape), true); }

void init_xavier_uniform(Tensor& w, Rng& rng) {
    if (w.rank() < 2) throw ShapeError("xavier init needs rank >= 2");
    int64_t receptive = 1;
    for (int64_t i = 2; i < w.rank(); ++i) receptive *= w.dim(static_cast<int>(i));
    const double fan_in = static_cast<double>(w.dim(1) * receptive);
    const double fan_out = static_cast<double>(w.dim(0) * receptive);
    const double bound = std::sqrt(6.0 / (fan_in + fan_out));
    for (auto& v : w.mutable_data()) v = static_cast<float>(rng.uniform(-bound, bound));
}

void init_normal(Tensor& w, float stddev, Rng& rng) {
    for (auto& v : w.mutable_data()) v = static_cast<float>(stddev * rng.normal());
}

void init_uniform(Tensor& w, float lo, float hi, Rng& rng) {
    for (auto& v : w.mutable_data()) v = static_cast<float>(rng.uniform(lo, hi));
}

void fill(Tensor& w, float value) {
    auto d = w.mutable_data();
    std::fill(d.begin(), d.end(), value);
}

ParamList clone_params(const ParamList& params) {
    ParamList out;
    out.reserve(params.size());
    for (const auto& p : params) out.push_back({p.name, p.tensor.clone()});
    return out;
}

void copy_params(const ParamList& src, ParamList& dst) {
    if (src.size() != dst.size()) throw ShapeError("parameter lists differ in length");
    for (std::size_t i = 0; i < src.size(); ++i) {
        if (src[i].name != dst[i].name || src[i].tensor.shape() != dst[i].tensor.shape())
            throw ShapeError("parameter mismatch at '" + src[i].name + "' vs '" + dst[i].name + "'");
        auto d = dst[i].tensor.mutable_data();
        std::copy(src[i].tensor.data().begin(), src[i].tensor.data().end(), d.begin());
    }
}

int64_t count_params(const ParamList& params) {
    int64_t n = 0;
    for (const auto& p : params) n += p.tensor.numel();
    return n;
}

Linear::Linear(int64_t in, int64_t out, Rng& rng, bool bias_enabled) {
    weight = make_param({out, in});
    init_xavier_uniform(weight, rng);
    if (bias_enabled) bias = make_param({out});
}

Tensor Linear::operator()(const Tensor& x) const { return ops::linear(x, weight, bias); }

void Linear::zero_init() {
    fill(weight, 0.0f);
    if (bias.defined()) fill(bias, 0.0f);
}

void Linear::collect(const std::string& prefix, ParamList& out) const {
    out.push_back({prefix + ".weight", weight});
    if (bias.defined()) out.push_back({prefix + ".bias", bias});
}

Conv2d::Conv2d(int64_t in, int64_t out, int kernel, int stride_, int padding_, Rng& rng)
    : stride(stride_), padding(padding_) {
    weight = make_param({out, in, kernel, kernel});
    init_xavier_uniform(weight, rng);
    bias = make_param({out});
}

Tensor Conv2d::operator()(const Tensor& x) const { return ops::conv2d(x, weight, bias, stride, padding); }

void Conv2d::collect(const std::string& prefix, ParamList& out) const {
    out.push_back({prefix + ".weight", weight});
    out.push_back({prefix + ".bias", bias});
}

}  // namespace st
