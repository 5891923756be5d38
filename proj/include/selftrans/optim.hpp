#pragma once

#include <cstdint>
#include <string>

#include "selftrans/checkpoint.hpp"
#include "selftrans/nn.hpp"

namespace st {

struct AdamOptions {
    double lr = 1e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.0;

    bool operator==(const AdamOptions&) const = default;
};

/// Adam with decoupled weight decay.
class AdamW {
public:
    AdamW(ParamList params, AdamOptions options);

    /// Applies one update from the accumulated gradients, then clears them.
    void step();
    void zero_grad();

    int64_t steps_taken() const { return t_; }
    const ParamList& params() const { return params_; }

    void save_state(CheckpointArchive& archive, const std::string& prefix) const;
    void load_state(const CheckpointArchive& archive, const std::string& prefix);

private:
    ParamList params_;
    AdamOptions opt_;
    ParamList m_, v_;
    int64_t t_ = 0;
};

/// ema <- decay * ema + (1 - decay) * raw, element-wise. Throws ShapeError
/// when the two lists differ in names or shapes.
void ema_update(ParamList& ema, const ParamList& raw, double decay);

}  // namespace st
