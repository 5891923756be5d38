#include <gtest/gtest.h>

#include <cmath>

#include "selftrans/codec.hpp"
#include "selftrans/datasets.hpp"
#include "selftrans/errors.hpp"
#include "test_support.hpp"

using namespace st;
using st::testing::random_tensor;

namespace {

CodecConfig small_codec() {
    CodecConfig c;
    c.base_channels = 8;
    return c;
}

}  // namespace

TEST(Codec, LatentShape) {
    const LatentCodec codec(small_codec(), 1);
    const auto x = random_tensor({3, 3, 32, 32}, 2);
    const auto p = codec.encode(x, 5);
    EXPECT_EQ(p.mean.shape(), (Shape{3, 4, 8, 8}));
    EXPECT_EQ(p.logvar.shape(), p.mean.shape());
    EXPECT_EQ(p.z_sample.shape(), p.mean.shape());
    EXPECT_EQ(codec.decode(p.mean).shape(), x.shape());
    EXPECT_THROW(codec.encode(random_tensor({1, 3, 16, 16}, 3), 0), ShapeError);
    EXPECT_THROW(codec.decode(Tensor::zeros({1, 4, 4, 4})), ShapeError);
}

TEST(Codec, DeterministicModeReturnsMean) {
    const LatentCodec codec(small_codec(), 1);
    const auto p = codec.encode(random_tensor({2, 3, 32, 32}, 4), 9, true);
    EXPECT_EQ(p.z_sample.values(), p.mean.values());
}

TEST(Codec, ReparameterizationIdentity) {
    const auto mean = random_tensor({2, 4, 8, 8}, 5);
    const auto z = reparameterize(mean, Tensor::zeros(mean.shape()), 77);
    Rng rng(77);
    const auto eta = rng.normal_vector(static_cast<std::size_t>(mean.numel()));
    for (int64_t i = 0; i < mean.numel(); ++i)
        EXPECT_NEAR(z.data()[i] - mean.data()[i], eta[static_cast<std::size_t>(i)], 1e-6);

    const LatentCodec codec(small_codec(), 1);
    const auto p = codec.encode(random_tensor({1, 3, 32, 32}, 6), 13);
    EXPECT_EQ(p.z_sample.values(), reparameterize(p.mean, p.logvar, 13).values());
}

TEST(Codec, DecodeRange) {
    const LatentCodec codec(small_codec(), 2);
    const auto img = codec.decode(Tensor::zeros({1, 4, 8, 8}));
    for (float v : img.values()) {
        EXPECT_TRUE(std::isfinite(v));
        EXPECT_GE(v, -1.0f);
        EXPECT_LE(v, 1.0f);
    }
}

TEST(Codec, BatchIndependence) {
    const LatentCodec codec(small_codec(), 3);
    const auto z = random_tensor({1, 4, 8, 8}, 7);
    std::vector<float> twice(z.values());
    twice.insert(twice.end(), z.values().begin(), z.values().end());
    const auto one = codec.decode(z);
    const auto two = codec.decode(Tensor::from({2, 4, 8, 8}, twice));
    const auto n = static_cast<std::size_t>(one.numel());
    for (std::size_t i = 0; i < n; ++i) {
        EXPECT_EQ(two.values()[i], one.values()[i]);
        EXPECT_EQ(two.values()[n + i], one.values()[i]);
    }
}

TEST(CodecLoss, ClosedForms) {
    const auto images = random_tensor({2, 3, 4, 4}, 8);
    const auto zeros = Tensor::zeros({2, 4, 2, 2});
    auto l = codec_loss(images, zeros, zeros, images, 1e-5);
    EXPECT_EQ(l.kl.item(), 0.0f);
    EXPECT_EQ(l.recon.item(), 0.0f);
    l = codec_loss(images, Tensor::full({2, 4, 2, 2}, 1.0f), zeros, images, 1.0);
    EXPECT_FLOAT_EQ(l.kl.item(), 0.5f);
}

TEST(CodecLoss, KlNonNegativeAndZeroOnlyAtPrior) {
    for (uint64_t s = 0; s < 20; ++s) {
        const auto mean = random_tensor({1, 2, 3, 3}, 10 + s, -2, 2);
        const auto logvar = random_tensor({1, 2, 3, 3}, 50 + s, -2, 2);
        const auto img = random_tensor({1, 3, 2, 2}, 90 + s);
        EXPECT_GT(codec_loss(img, mean, logvar, img, 1.0).kl.item(), 0.0f);
    }
}

TEST(CodecLoss, ZeroBetaIsPureReconstruction) {
    const auto images = random_tensor({2, 3, 4, 4}, 11);
    const auto recon = random_tensor({2, 3, 4, 4}, 12);
    const auto mean = random_tensor({2, 4, 2, 2}, 13);
    const auto logvar = random_tensor({2, 4, 2, 2}, 14);
    const auto l = codec_loss(images, mean, logvar, recon, 0.0);
    EXPECT_EQ(l.total.item(), l.recon.item());
    // Hand-rolled oracle for both terms.
    double recon_sum = 0.0, kl_sum = 0.0;
    for (int64_t i = 0; i < images.numel(); ++i) {
        const double d = double(recon.data()[i]) - images.data()[i];
        recon_sum += d * d;
    }
    for (int64_t i = 0; i < mean.numel(); ++i) {
        const double mu = mean.data()[i], lv = logvar.data()[i];
        kl_sum += 0.5 * (std::exp(lv) + mu * mu - 1.0 - lv);
    }
    EXPECT_NEAR(l.recon.item(), recon_sum / images.numel(), 1e-6);
    const auto l2 = codec_loss(images, mean, logvar, recon, 0.25);
    EXPECT_NEAR(l2.kl.item(), kl_sum / mean.numel(), 1e-5);
    EXPECT_NEAR(l2.total.item(), recon_sum / images.numel() + 0.25 * kl_sum / mean.numel(), 1e-5);
}

TEST(CodecTrain, OverfitsSingleImage) {
    ShapesSpec spec;
    spec.num_classes = 2;
    spec.samples_per_class = 1;
    const auto all = generate_shapes(spec);
    const std::vector<int64_t> first{0};
    const auto one = all.subset(first);
    CodecTrainOptions opt;
    opt.steps = 500;
    opt.batch_size = 1;
    opt.lr = 2e-3;
    const auto result = train_codec(one, small_codec(), opt);
    ASSERT_EQ(result.log.size(), 500u);
    EXPECT_LT(result.log.back().recon, result.log.front().recon);
    EXPECT_LT(result.log.back().recon, 0.5 * result.log.front().recon);
}

TEST(CodecTrain, DeterministicAndErrors) {
    ShapesSpec spec;
    spec.num_classes = 2;
    spec.samples_per_class = 4;
    const auto data = generate_shapes(spec);
    CodecTrainOptions opt;
    opt.steps = 5;
    opt.batch_size = 4;
    const auto a = train_codec(data, small_codec(), opt);
    const auto b = train_codec(data, small_codec(), opt);
    EXPECT_EQ(a.log.back().total, b.log.back().total);
    EXPECT_EQ(params_digest(a.codec.parameters()), params_digest(b.codec.parameters()));

    ImageSet empty;
    empty.size = 32;
    EXPECT_THROW(train_codec(empty, small_codec(), opt), ShapeError);
    opt.lr = 1e9;
    opt.steps = 50;
    EXPECT_THROW(train_codec(data, small_codec(), opt), NumericError);
}

TEST(Codec, ArchiveRoundTrip) {
    const LatentCodec codec(small_codec(), 4);
    LatentStats stats{{0.1f, 0.2f, 0.3f, 0.4f}, {1.0f, 2.0f, 3.0f, 4.0f}};
    const auto archive = codec.to_archive(&stats);
    const auto back = LatentCodec::from_archive(archive);
    EXPECT_EQ(back.config(), codec.config());
    EXPECT_EQ(params_digest(back.parameters()), params_digest(codec.parameters()));
    const auto s = latent_stats_from_archive(archive);
    EXPECT_EQ(s.mean, stats.mean);
    EXPECT_EQ(s.std, stats.std);
    const auto z = random_tensor({2, 4, 1, 1}, 5);
    const auto round = stats.destandardize(stats.standardize(z));
    for (int64_t i = 0; i < z.numel(); ++i) EXPECT_NEAR(round.data()[i], z.data()[i], 1e-6);
    EXPECT_NEAR(stats.standardize(Tensor::full({1, 4, 1, 1}, 0.5f)).data()[3], (0.5f - 0.4f) / 4.0f, 1e-7);
}

TEST(CodecConfigValidation, Constraints) {
    CodecConfig c;
    c.image_size = 30;
    EXPECT_THROW(c.validate(), ConfigError);
    c = CodecConfig{};
    c.kl_weight = -1.0;
    EXPECT_THROW(c.validate(), ConfigError);
    c = CodecConfig{};
    c.downsample_factor = 3;
    EXPECT_THROW(c.validate(), ConfigError);
}
