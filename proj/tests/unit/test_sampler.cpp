#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include <json.hpp>

#include "selftrans/errors.hpp"
#include "selftrans/flow.hpp"
#include "selftrans/ops.hpp"
#include "selftrans/sampler.hpp"
#include "test_support.hpp"

using namespace st;
using st::testing::random_tensor;
using st::testing::randomize_params;

namespace {

const Shape kSample{2, 3, 3};

SampleRequest request(int64_t batch, int steps, double cfg, uint64_t seed) {
    return make_request(ConditionLabel::of(1), batch, steps, cfg, seed);
}

Tensor full_like(const Tensor& like, float v) { return Tensor::full(like.shape(), v); }

ModelConfig tiny_model() {
    ModelConfig c;
    c.depth = 2;
    c.hidden_dim = 16;
    c.heads = 2;
    c.patch_size = 2;
    c.latent_channels = 4;
    c.latent_size = 8;
    c.num_classes = 4;
    c.mlp_ratio = 2;
    c.freq_dim = 8;
    return c;
}

CodecConfig tiny_codec() {
    CodecConfig c;
    c.base_channels = 4;
    return c;
}

}  // namespace

TEST(CfgCombine, Examples) {
    const auto v_u = random_tensor({2, 3}, 1, -5, 5);
    const auto v_c = random_tensor({2, 3}, 2, -5, 5);
    EXPECT_EQ(cfg_combine(v_u, v_c, 1.0).values(), v_c.values());
    EXPECT_EQ(cfg_combine(v_u, v_c, 0.0).values(), v_u.values());
    EXPECT_EQ(cfg_combine(Tensor::from({1}, {0.0f}), Tensor::from({1}, {1.0f}), 4.0).item(), 4.0f);
    EXPECT_THROW(cfg_combine(v_u, Tensor::zeros({3, 2}), 2.0), ShapeError);
}

TEST(EulerSample, ConstantInitialNoiseFieldIntegratesToZero) {
    for (int steps : {1, 7, 50}) {
        auto req = request(3, steps, 4.0, 11);
        Shape full{3, 2, 3, 3};
        const Tensor eps0 = flow::sample_noise(full, 11);
        const VelocityField field = [&](const Tensor&, float, std::span<const ConditionLabel>) { return eps0; };
        const auto x = euler_sample(field, kSample, req);
        for (float v : x.values()) EXPECT_NEAR(v, 0.0f, 2e-5f) << steps;
    }
}

TEST(EulerSample, GuidanceScaleOneMatchesConditionalTrajectory) {
    int null_calls = 0;
    const VelocityField field = [&](const Tensor& x, float t, std::span<const ConditionLabel> cond) {
        if (cond[0].is_null()) ++null_calls;
        std::vector<float> v(x.values());
        for (auto& e : v) e = std::sin(e) * t + (cond[0].is_null() ? 0.5f : -0.25f);
        return Tensor::from(x.shape(), v);
    };
    const auto req = request(2, 9, 1.0, 5);
    const auto got = euler_sample(field, kSample, req);
    EXPECT_EQ(null_calls, 0);

    // Hand-written conditional-only Euler loop.
    Tensor x = flow::sample_noise({2, 2, 3, 3}, 5);
    for (int k = 0; k < 9; ++k) {
        const float t = 1.0f - static_cast<float>(k) / 9.0f;
        x = ops::weighted_sum(x, 1.0f, field(x, t, req.labels), -1.0f / 9.0f);
    }
    EXPECT_EQ(got.values(), x.values());

    const auto guided = euler_sample(field, kSample, request(2, 9, 4.0, 5));
    EXPECT_EQ(null_calls, 9);
    EXPECT_NE(guided.values(), got.values());
}

TEST(EulerSample, LinearInTimeFieldDiscretizationError) {
    // v = a + b t. Euler with N steps ends at x1 - a - b (N + 1) / (2N):
    // N = 1 and N = 2 differ by -b/4.
    const float a = 0.3f, b = 2.0f;
    const VelocityField field = [&](const Tensor& x, float t, std::span<const ConditionLabel>) {
        return full_like(x, a + b * t);
    };
    const auto x1 = euler_sample(field, kSample, request(1, 1, 1.0, 3));
    const auto x2 = euler_sample(field, kSample, request(1, 2, 1.0, 3));
    const Tensor start = flow::sample_noise({1, 2, 3, 3}, 3);
    for (int64_t i = 0; i < x1.numel(); ++i) {
        EXPECT_NEAR(x1.data()[i] - x2.data()[i], -b / 4.0f, 1e-6f);
        EXPECT_NEAR(x1.data()[i], start.data()[i] - a - b, 1e-6f);
        EXPECT_NEAR(x2.data()[i], start.data()[i] - a - 0.75f * b, 1e-6f);
    }
}

TEST(EulerSample, ErrorHalvesWithStepsOnExponentialField) {
    // dx/dt = -x integrated from t = 1 to 0 gives x(0) = e * x(1).
    const VelocityField field = [](const Tensor& x, float, std::span<const ConditionLabel>) {
        return ops::scale(x, -1.0f);
    };
    const Tensor start = flow::sample_noise({1, 2, 3, 3}, 8);
    auto error = [&](int steps) {
        const auto x = euler_sample(field, kSample, request(1, steps, 1.0, 8));
        double e = 0.0;
        for (int64_t i = 0; i < x.numel(); ++i) e = std::max(e, std::abs(x.data()[i] - std::exp(1.0) * start.data()[i]));
        return e;
    };
    double prev = error(8);
    for (int steps : {16, 32, 64}) {
        const double e = error(steps);
        EXPECT_NEAR(prev / e, 2.0, 0.4) << steps;
        prev = e;
    }
}

TEST(EulerSample, NonFiniteStateAborts) {
    const VelocityField field = [](const Tensor& x, float t, std::span<const ConditionLabel>) {
        return full_like(x, t < 0.7f ? NAN : 0.0f);
    };
    try {
        euler_sample(field, kSample, request(1, 10, 1.0, 1));
        FAIL();
    } catch (const NumericError& e) {
        EXPECT_NE(std::string(e.what()).find("step 4"), std::string::npos) << e.what();
    }
}

TEST(EulerSample, RequestValidation) {
    const VelocityField field = [](const Tensor& x, float, std::span<const ConditionLabel>) { return x; };
    EXPECT_THROW(euler_sample(field, kSample, request(1, 0, 1.0, 1)), ConfigError);
    EXPECT_THROW(euler_sample(field, kSample, request(0, 4, 1.0, 1)), ConfigError);
    EXPECT_THROW(euler_sample(field, kSample, request(1, 4, NAN, 1)), ConfigError);
}

TEST(SampleImages, DeterministicShapesAndNullEquivalence) {
    Backbone model(tiny_model(), 1);
    randomize_params(model.parameters(), 2, -0.2f, 0.2f);
    const LatentCodec codec(tiny_codec(), 3);
    const LatentStats stats{{0.1f, -0.2f, 0.0f, 0.3f}, {1.5f, 0.5f, 1.0f, 2.0f}};

    const auto req = request(16, 3, 4.0, 21);
    const auto a = sample_images(model, codec, stats, req);
    const auto b = sample_images(model, codec, stats, req);
    EXPECT_EQ(a.shape(), (Shape{16, 3, 32, 32}));
    EXPECT_EQ(a.values(), b.values());
    for (float v : a.values()) {
        EXPECT_GE(v, -1.0f);
        EXPECT_LE(v, 1.0f);
    }

    // Null labels with scale 1 are plain unconditional generation.
    auto null_req = make_request(ConditionLabel::null(), 4, 3, 1.0, 22);
    const auto uncond = sample_images(model, codec, stats, null_req);
    const VelocityField uncond_field = [&](const Tensor& x, float t, std::span<const ConditionLabel>) {
        NoGradGuard guard;
        const std::vector<float> ts(static_cast<std::size_t>(x.dim(0)), t);
        const auto nulls = null_labels(static_cast<std::size_t>(x.dim(0)));
        return model.forward(x, ts, nulls).velocity;
    };
    auto any_req = null_req;
    any_req.labels.assign(4, ConditionLabel::of(2));
    const auto z = euler_sample(uncond_field, {4, 8, 8}, any_req);
    NoGradGuard guard;
    EXPECT_EQ(uncond.values(), codec.decode(stats.destandardize(z)).values());
}

TEST(SampleImages, CodecMismatch) {
    auto cfg = tiny_model();
    cfg.latent_channels = 3;
    const Backbone model(cfg, 1);
    const LatentCodec codec(tiny_codec(), 3);
    const LatentStats stats{{0, 0, 0, 0}, {1, 1, 1, 1}};
    EXPECT_THROW(sample_images(model, codec, stats, request(1, 1, 1.0, 0)), ConfigError);
}

TEST(SampleGrid, WritesPngAndSidecar) {
    const auto dir = std::filesystem::temp_directory_path() / "selftrans_test_grid";
    std::filesystem::remove_all(dir);
    std::filesystem::create_directories(dir);
    auto req = request(3, 5, 4.0, 99);
    req.labels[2] = ConditionLabel::null();
    write_sample_grid(dir / "grid.png", random_tensor({3, 3, 8, 8}, 4), req, "abc123", 2);
    ASSERT_TRUE(std::filesystem::exists(dir / "grid.png"));
    std::ifstream in(dir / "grid.png.json");
    const auto j = nlohmann::json::parse(in);
    EXPECT_EQ(j["seed"], 99);
    EXPECT_EQ(j["config_hash"], "abc123");
    EXPECT_EQ(j["labels"], nlohmann::json::parse("[1, 1, null]"));
    std::filesystem::remove_all(dir);
}
