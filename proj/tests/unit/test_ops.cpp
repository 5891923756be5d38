#include <gtest/gtest.h>

#include <memory>

#include "selftrans/errors.hpp"
#include "selftrans/ops.hpp"
#include "test_support.hpp"

using namespace st;
using st::testing::central_difference;
using st::testing::random_tensor;
using st::testing::relative_error;

namespace {

using OpFn = std::function<Tensor(const std::vector<Tensor>&)>;

// Projects the op output on fixed random weights so every output element
// contributes to the scalar being differentiated.
void expect_gradients_match(std::vector<Tensor> inputs, const OpFn& op, uint64_t seed = 11) {
    Tensor probe;
    {
        NoGradGuard guard;
        probe = random_tensor(op(inputs).shape(), seed);
    }
    auto scalar = [&]() {
        NoGradGuard guard;
        const Tensor out = op(inputs);
        double s = 0.0;
        for (int64_t i = 0; i < out.numel(); ++i) s += static_cast<double>(out.data()[i]) * probe.data()[i];
        return s;
    };
    for (auto& in : inputs) in.zero_grad();
    Tensor loss = ops::sum(ops::mul(op(inputs), probe));
    loss.backward();
    for (auto& in : inputs) {
        if (!in.requires_grad()) continue;
        const std::vector<float> analytic(in.grad().begin(), in.grad().end());
        for (std::size_t i = 0; i < analytic.size(); i += std::max<std::size_t>(1, analytic.size() / 23)) {
            const double numeric = central_difference(in, i, scalar, 1e-2f);
            EXPECT_LT(relative_error(analytic[i], numeric, 1e-2), 2e-2)
                << "element " << i << " analytic " << analytic[i] << " numeric " << numeric;
        }
    }
}

}  // namespace

TEST(Ops, ElementwiseGradients) {
    auto a = random_tensor({3, 4}, 1, -1, 1, true);
    auto b = random_tensor({3, 4}, 2, -1, 1, true);
    expect_gradients_match({a, b}, [](const auto& x) { return ops::mul(ops::add(x[0], x[1]), x[1]); });
    expect_gradients_match({a, b}, [](const auto& x) { return ops::weighted_sum(x[0], 0.3f, x[1], -2.0f); });
    expect_gradients_match({a}, [](const auto& x) { return ops::exp(x[0]); });
    expect_gradients_match({a}, [](const auto& x) { return ops::silu(x[0]); });
    expect_gradients_match({a}, [](const auto& x) { return ops::gelu(x[0]); });
    expect_gradients_match({a}, [](const auto& x) { return ops::tanh(x[0]); });
    expect_gradients_match({a}, [](const auto& x) { return ops::softmax(ops::scale(x[0], 3.0f)); });
    expect_gradients_match({a}, [](const auto& x) { return ops::layer_norm(x[0]); });
}

TEST(Ops, LinearAndBmmGradients) {
    auto x = random_tensor({2, 3, 5}, 3, -1, 1, true);
    auto w = random_tensor({4, 5}, 4, -1, 1, true);
    auto b = random_tensor({4}, 5, -1, 1, true);
    expect_gradients_match({x, w, b}, [](const auto& v) { return ops::linear(v[0], v[1], v[2]); });

    auto p = random_tensor({2, 3, 4}, 6, -1, 1, true);
    auto q = random_tensor({2, 4, 5}, 7, -1, 1, true);
    auto qt = random_tensor({2, 5, 4}, 8, -1, 1, true);
    auto pt = random_tensor({2, 4, 3}, 9, -1, 1, true);
    expect_gradients_match({p, q}, [](const auto& v) { return ops::bmm(v[0], v[1]); });
    expect_gradients_match({p, qt}, [](const auto& v) { return ops::bmm(v[0], v[1], false, true); });
    expect_gradients_match({pt, q}, [](const auto& v) { return ops::bmm(v[0], v[1], true, false); });
    expect_gradients_match({pt, qt}, [](const auto& v) { return ops::bmm(v[0], v[1], true, true); });
}

TEST(Ops, ModulationGradients) {
    auto x = random_tensor({2, 3, 4}, 10, -1, 1, true);
    auto y = random_tensor({2, 3, 4}, 11, -1, 1, true);
    auto s = random_tensor({2, 4}, 12, -1, 1, true);
    auto g = random_tensor({2, 4}, 13, -1, 1, true);
    auto row = random_tensor({3, 4}, 14, -1, 1, true);
    expect_gradients_match({x, s, g}, [](const auto& v) { return ops::modulate(v[0], v[1], v[2]); });
    expect_gradients_match({x, g, y}, [](const auto& v) { return ops::gated_add(v[0], v[1], v[2]); });
    expect_gradients_match({x, row}, [](const auto& v) { return ops::add_broadcast(v[0], v[1]); });
    expect_gradients_match({x}, [](const auto& v) { return ops::mean_tokens(v[0]); });
    expect_gradients_match({x}, [](const auto& v) { return ops::slice_last(v[0], 1, 2); });
}

TEST(Ops, ConvolutionGradients) {
    auto x = random_tensor({2, 2, 5, 5}, 15, -1, 1, true);
    auto w = random_tensor({3, 2, 3, 3}, 16, -1, 1, true);
    auto b = random_tensor({3}, 17, -1, 1, true);
    expect_gradients_match({x, w, b}, [](const auto& v) { return ops::conv2d(v[0], v[1], v[2], 1, 1); });
    expect_gradients_match({x, w, b}, [](const auto& v) { return ops::conv2d(v[0], v[1], v[2], 2, 1); });
    expect_gradients_match({x}, [](const auto& v) { return ops::upsample_nearest2x(v[0]); });
    expect_gradients_match({x}, [](const auto& v) { return ops::global_avg_pool(v[0]); });
}

TEST(Ops, LossGradients) {
    auto a = random_tensor({3, 4}, 18, -1, 1, true);
    auto b = random_tensor({3, 4}, 19, -1, 1, true);
    expect_gradients_match({a, b}, [](const auto& v) { return ops::mse(v[0], v[1]); });
    expect_gradients_match({a}, [](const auto& v) { return ops::cross_entropy(v[0], {0, 3, 1}); });
    expect_gradients_match({a}, [](const auto& v) { return ops::mean(v[0]); });
}

TEST(Ops, ConvMatchesDirectSum) {
    auto x = random_tensor({1, 2, 4, 4}, 20);
    auto w = random_tensor({1, 2, 3, 3}, 21);
    Tensor y = ops::conv2d(x, w, Tensor(), 2, 1);
    ASSERT_EQ(y.shape(), (Shape{1, 1, 2, 2}));
    for (int oy = 0; oy < 2; ++oy)
        for (int ox = 0; ox < 2; ++ox) {
            double s = 0.0;
            for (int c = 0; c < 2; ++c)
                for (int ky = 0; ky < 3; ++ky)
                    for (int kx = 0; kx < 3; ++kx) {
                        const int iy = oy * 2 - 1 + ky, ix = ox * 2 - 1 + kx;
                        if (iy < 0 || iy >= 4 || ix < 0 || ix >= 4) continue;
                        s += x.data()[(c * 4 + iy) * 4 + ix] * w.data()[(c * 3 + ky) * 3 + kx];
                    }
            EXPECT_NEAR(y.data()[oy * 2 + ox], s, 1e-5);
        }
}

TEST(Ops, ShapeErrors) {
    auto a = Tensor::zeros({2, 3});
    auto b = Tensor::zeros({3, 2});
    EXPECT_THROW(ops::add(a, b), ShapeError);
    EXPECT_THROW(ops::mse(a, b), ShapeError);
    EXPECT_THROW(ops::linear(a, Tensor::zeros({4, 2}), Tensor()), ShapeError);
    EXPECT_THROW(ops::cross_entropy(a, {0, 5}), ShapeError);
}

TEST(Ops, NoGradSkipsGraph) {
    auto a = random_tensor({2, 2}, 22, -1, 1, true);
    NoGradGuard guard;
    Tensor y = ops::exp(a);
    EXPECT_FALSE(y.requires_grad());
}

TEST(Ops, FrozenTensorsRejectWritesAndGradients) {
    auto a = random_tensor({2, 2}, 23, -1, 1, true);
    a.freeze();
    EXPECT_THROW(a.mutable_data(), FrozenTensorError);
    auto b = random_tensor({2, 2}, 24, -1, 1, true);
    Tensor loss = ops::sum(ops::mul(a, b));
    loss.backward();
    EXPECT_FALSE(a.has_grad());
    EXPECT_TRUE(b.has_grad());
}

// Vectorized reductions must not depend on where the heap places a buffer.
TEST(Ops, GradientsIndependentOfBufferAlignment) {
    auto run = [](std::size_t pad) {
        std::vector<std::unique_ptr<char[]>> shims;
        auto x = random_tensor({2, 3, 12, 12}, 1);
        auto w = random_tensor({5, 3, 3, 3}, 2, -1, 1, true);
        auto b = random_tensor({5}, 3, -1, 1, true);
        auto lw = random_tensor({7, 5 * 144}, 4, -1, 1, true);
        auto lb = random_tensor({7}, 5, -1, 1, true);
        shims.emplace_back(new char[16 * pad + 8]);
        const auto h = ops::silu(ops::conv2d(x, w, b, 1, 1));
        shims.emplace_back(new char[16 * pad + 8]);
        const auto y = ops::linear(h.reshape({2, 5 * 144}), lw, lb);
        shims.emplace_back(new char[16 * pad + 8]);
        ops::sum(ops::mul(y, y)).backward();
        std::vector<float> grads;
        for (const auto* t : {&w, &b, &lw, &lb}) grads.insert(grads.end(), t->grad().begin(), t->grad().end());
        return grads;
    };
    const auto reference = run(0);
    for (std::size_t pad = 1; pad < 16; ++pad) EXPECT_EQ(run(pad), reference) << pad;
}
