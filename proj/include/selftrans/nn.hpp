#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "selftrans/rng.hpp"
#include "selftrans/tensor.hpp"

namespace st {

struct NamedTensor {
    std::string name;
    Tensor tensor;
};

/// Ordered list of parameter handles. Handles share storage with the module
/// that produced them.
using ParamList = std::vector<NamedTensor>;

Tensor make_param(Shape shape);
void init_xavier_uniform(Tensor& w, Rng& rng);
void init_normal(Tensor& w, float stddev, Rng& rng);
void init_uniform(Tensor& w, float lo, float hi, Rng& rng);
void fill(Tensor& w, float value);

/// Deep copy of a parameter list (same names, fresh storage).
ParamList clone_params(const ParamList& params);
/// Copies values from `src` into `dst` by position; names and shapes must match.
void copy_params(const ParamList& src, ParamList& dst);
int64_t count_params(const ParamList& params);

class Linear {
public:
    Linear() = default;
    Linear(int64_t in, int64_t out, Rng& rng, bool bias = true);

    Tensor operator()(const Tensor& x) const;
    void zero_init();
    void collect(const std::string& prefix, ParamList& out) const;

    int64_t in_features() const { return weight.dim(1); }
    int64_t out_features() const { return weight.dim(0); }

    Tensor weight;
    Tensor bias;
};

class Conv2d {
public:
    Conv2d() = default;
    Conv2d(int64_t in, int64_t out, int kernel, int stride, int padding, Rng& rng);

    Tensor operator()(const Tensor& x) const;
    void collect(const std::string& prefix, ParamList& out) const;

    Tensor weight;
    Tensor bias;
    int stride = 1;
    int padding = 0;
};

}  // namespace st
