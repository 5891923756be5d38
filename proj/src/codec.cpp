#include "selftrans/codec.hpp"

#include <cmath>
#include <string>

#include "selftrans/datasets.hpp"
#include "selftrans/errors.hpp"
#include "selftrans/ops.hpp"
#include "selftrans/optim.hpp"
#include "selftrans/rng.hpp"

namespace st {

namespace {

constexpr uint64_t kCodecInitStream = 0xC0DEC;
constexpr uint64_t kCodecNoiseStream = 0xC0DEC + 1;

int log2_exact(int v) {
    int n = 0;
    while ((1 << n) < v) ++n;
    return (1 << n) == v ? n : -1;
}

Tensor channel_slice(const Tensor& x, int64_t start, int64_t count) {
    const int64_t b = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
    std::vector<int64_t> idx;
    idx.reserve(static_cast<std::size_t>(b * count * hw));
    for (int64_t n = 0; n < b; ++n)
        for (int64_t ch = start; ch < start + count; ++ch)
            for (int64_t i = 0; i < hw; ++i) idx.push_back((n * c + ch) * hw + i);
    return ops::gather(x, std::move(idx), {b, count, x.dim(2), x.dim(3)});
}

Tensor per_channel_affine(const Tensor& z, const std::vector<float>& mul, const std::vector<float>& add) {
    if (z.rank() != 4 || z.dim(1) != static_cast<int64_t>(mul.size()))
        throw ShapeError("latent stats: channel count mismatch for " + shape_str(z.shape()));
    const int64_t b = z.dim(0), c = z.dim(1), hw = z.dim(2) * z.dim(3);
    std::vector<float> out(z.values());
    for (int64_t n = 0; n < b; ++n)
        for (int64_t ch = 0; ch < c; ++ch)
            for (int64_t i = 0; i < hw; ++i) {
                auto& v = out[static_cast<std::size_t>((n * c + ch) * hw + i)];
                v = v * mul[static_cast<std::size_t>(ch)] + add[static_cast<std::size_t>(ch)];
            }
    return Tensor::from(z.shape(), std::move(out));
}

}  // namespace

void CodecConfig::validate() const {
    auto fail = [](const std::string& key, const std::string& why) { throw ConfigError("codec." + key + ": " + why); };
    if (image_size < 1) fail("image_size", "must be positive");
    if (image_channels != 3) fail("image_channels", "only RGB (3) is supported");
    if (downsample_factor < 1 || log2_exact(downsample_factor) < 0) fail("downsample_factor", "must be a power of two");
    if (image_size % downsample_factor != 0) fail("image_size", "must be divisible by downsample_factor");
    if (latent_channels < 1) fail("latent_channels", "must be >= 1");
    if (!(kl_weight >= 0.0) || !std::isfinite(kl_weight)) fail("kl_weight", "must be finite and >= 0");
    if (base_channels < 1) fail("base_channels", "must be >= 1");
}

nlohmann::json to_json(const CodecConfig& c) {
    return {{"image_size", c.image_size},         {"image_channels", c.image_channels},
            {"downsample_factor", c.downsample_factor}, {"latent_channels", c.latent_channels},
            {"kl_weight", c.kl_weight},           {"base_channels", c.base_channels}};
}

CodecConfig codec_config_from_json(const nlohmann::json& j) {
    CodecConfig c;
    try {
        c.image_size = j.value("image_size", c.image_size);
        c.image_channels = j.value("image_channels", c.image_channels);
        c.downsample_factor = j.value("downsample_factor", c.downsample_factor);
        c.latent_channels = j.value("latent_channels", c.latent_channels);
        c.kl_weight = j.value("kl_weight", c.kl_weight);
        c.base_channels = j.value("base_channels", c.base_channels);
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("codec config: ") + e.what());
    }
    c.validate();
    return c;
}

Tensor LatentStats::standardize(const Tensor& z) const {
    std::vector<float> mul(mean.size()), add(mean.size());
    for (std::size_t c = 0; c < mean.size(); ++c) {
        mul[c] = 1.0f / std[c];
        add[c] = -mean[c] / std[c];
    }
    return per_channel_affine(z, mul, add);
}

Tensor LatentStats::destandardize(const Tensor& z) const { return per_channel_affine(z, std, mean); }

Tensor reparameterize(const Tensor& mean, const Tensor& logvar, uint64_t seed) {
    check_same_shape(mean, logvar, "reparameterize");
    Rng rng(seed);
    Tensor eta = Tensor::from(mean.shape(), rng.normal_vector(static_cast<std::size_t>(mean.numel())));
    return ops::add(mean, ops::mul(ops::exp(ops::scale(logvar, 0.5f)), eta));
}

CodecLosses codec_loss(const Tensor& images, const Tensor& mean, const Tensor& logvar, const Tensor& recon,
                       double kl_weight) {
    check_same_shape(images, recon, "codec_loss");
    check_same_shape(mean, logvar, "codec_loss");
    for (const Tensor* t : {&images, &mean, &logvar, &recon}) check_finite(*t, "codec_loss");
    Tensor recon_term = ops::mse(recon, images);
    Tensor inner = ops::sub(ops::add(ops::exp(logvar), ops::mul(mean, mean)), logvar);
    Tensor kl = ops::scale(ops::sub(ops::mean(inner), Tensor::scalar(1.0f)), 0.5f);
    if (kl_weight == 0.0) return {recon_term, recon_term, kl};
    return {ops::weighted_sum(recon_term, 1.0f, kl, static_cast<float>(kl_weight)), recon_term, kl};
}

LatentCodec::LatentCodec(const CodecConfig& config, uint64_t seed) : config_(config) {
    config_.validate();
    Rng rng(seed);
    const int levels = log2_exact(config_.downsample_factor);
    const int64_t c = config_.base_channels;
    const int64_t wide = 2 * c;
    enc_.emplace_back(config_.image_channels, c, 3, 1, 1, rng);
    int64_t ch = c;
    for (int l = 0; l < levels; ++l) {
        enc_.emplace_back(ch, wide, 3, 2, 1, rng);
        ch = wide;
    }
    enc_out_ = Conv2d(ch, 2 * config_.latent_channels, 3, 1, 1, rng);
    dec_in_ = Conv2d(config_.latent_channels, wide, 3, 1, 1, rng);
    ch = wide;
    for (int l = 0; l < levels; ++l) {
        const int64_t next = (l + 1 == levels) ? c : wide;
        dec_.emplace_back(ch, next, 3, 1, 1, rng);
        ch = next;
    }
    dec_out_ = Conv2d(ch, config_.image_channels, 3, 1, 1, rng);
}

Posterior LatentCodec::encode(const Tensor& images, uint64_t seed, bool deterministic) const {
    const Shape want{images.rank() == 4 ? images.dim(0) : -1, config_.image_channels, config_.image_size,
                     config_.image_size};
    if (images.shape() != want) throw ShapeError("encode: images " + shape_str(images.shape()) + " do not match codec");
    check_finite(images, "encode");
    Tensor h = images;
    for (const auto& conv : enc_) h = ops::silu(conv(h));
    h = enc_out_(h);
    Posterior p;
    p.mean = channel_slice(h, 0, config_.latent_channels);
    p.logvar = channel_slice(h, config_.latent_channels, config_.latent_channels);
    p.z_sample = deterministic ? p.mean : reparameterize(p.mean, p.logvar, seed);
    return p;
}

Tensor LatentCodec::decode(const Tensor& z) const {
    const int ls = config_.latent_size();
    const Shape want{z.rank() == 4 ? z.dim(0) : -1, config_.latent_channels, ls, ls};
    if (z.shape() != want) throw ShapeError("decode: latent " + shape_str(z.shape()) + " does not match codec");
    Tensor h = ops::silu(dec_in_(z));
    for (const auto& conv : dec_) h = ops::silu(conv(ops::upsample_nearest2x(h)));
    return ops::tanh(dec_out_(h));
}

ParamList LatentCodec::parameters() const {
    ParamList out;
    for (std::size_t i = 0; i < enc_.size(); ++i) enc_[i].collect("enc." + std::to_string(i), out);
    enc_out_.collect("enc.out", out);
    dec_in_.collect("dec.in", out);
    for (std::size_t i = 0; i < dec_.size(); ++i) dec_[i].collect("dec." + std::to_string(i), out);
    dec_out_.collect("dec.out", out);
    return out;
}

CheckpointArchive LatentCodec::to_archive(const LatentStats* stats) const {
    CheckpointArchive a;
    a.kind = "codec";
    a.config["codec"] = to_json(config_);
    a.put_params("codec", parameters());
    if (stats) put_latent_stats(a, *stats);
    return a;
}

LatentCodec LatentCodec::from_archive(const CheckpointArchive& archive) {
    if (!archive.config.contains("codec")) throw IoError("codec checkpoint: manifest has no codec config");
    LatentCodec codec(codec_config_from_json(archive.config["codec"]), 0);
    ParamList params = codec.parameters();
    archive.load_params("codec", params);
    return codec;
}

LatentStats latent_stats_from_archive(const CheckpointArchive& archive) {
    LatentStats s;
    const Tensor m = archive.get("latent_stats.mean");
    const Tensor d = archive.get("latent_stats.std");
    s.mean.assign(m.data().begin(), m.data().end());
    s.std.assign(d.data().begin(), d.data().end());
    if (s.mean.size() != s.std.size()) throw IoError("latent stats: mean/std length mismatch");
    return s;
}

void put_latent_stats(CheckpointArchive& archive, const LatentStats& stats) {
    const auto c = static_cast<int64_t>(stats.mean.size());
    archive.put("latent_stats.mean", Tensor::from({c}, stats.mean));
    archive.put("latent_stats.std", Tensor::from({c}, stats.std));
}

CodecTrainResult train_codec(const ImageSet& data, const CodecConfig& config, const CodecTrainOptions& options,
                             const std::function<void(const CodecStepLog&)>& on_step) {
    if (data.count == 0) throw ShapeError("train_codec: empty dataset");
    if (data.size != config.image_size || data.channels != config.image_channels)
        throw ConfigError("train_codec: dataset images do not match codec.image_size");
    CodecTrainResult result{LatentCodec(config, derive_seed(options.seed, kCodecInitStream)), {}};
    AdamOptions adam;
    adam.lr = options.lr;
    AdamW opt(result.codec.parameters(), adam);
    for (int64_t step = 0; step < options.steps; ++step) {
        const auto idx = batch_indices(data.count, options.batch_size, options.seed, step);
        const Tensor images = data.batch(idx);
        const Posterior post = result.codec.encode(images, derive_seed(options.seed, kCodecNoiseStream, step));
        const Tensor recon = result.codec.decode(post.z_sample);
        CodecLosses losses = codec_loss(images, post.mean, post.logvar, recon, config.kl_weight);
        const CodecStepLog rec{step, losses.total.item(), losses.recon.item(), losses.kl.item()};
        if (!std::isfinite(rec.total))
            throw NumericError("train_codec: non-finite loss at step " + std::to_string(step));
        losses.total.backward();
        opt.step();
        result.log.push_back(rec);
        if (on_step) on_step(rec);
    }
    return result;
}

std::pair<Tensor, Tensor> encode_dataset(const LatentCodec& codec, const ImageSet& data, int64_t batch_size) {
    NoGradGuard no_grad;
    const int ls = codec.config().latent_size();
    const int64_t cz = codec.config().latent_channels;
    const int64_t per = cz * ls * ls;
    std::vector<float> means(static_cast<std::size_t>(data.count * per));
    std::vector<float> logvars(means.size());
    for (int64_t start = 0; start < data.count; start += batch_size) {
        std::vector<int64_t> idx;
        for (int64_t i = start; i < std::min(data.count, start + batch_size); ++i) idx.push_back(i);
        const Posterior p = codec.encode(data.batch(idx), 0, true);
        std::copy(p.mean.data().begin(), p.mean.data().end(), means.begin() + start * per);
        std::copy(p.logvar.data().begin(), p.logvar.data().end(), logvars.begin() + start * per);
    }
    const Shape shape{data.count, cz, ls, ls};
    return {Tensor::from(shape, std::move(means)), Tensor::from(shape, std::move(logvars))};
}

LatentStats compute_latent_stats(const LatentCodec& codec, const ImageSet& data, int64_t batch_size) {
    const auto [means, logvars] = encode_dataset(codec, data, batch_size);
    const int64_t n = means.dim(0), c = means.dim(1), hw = means.dim(2) * means.dim(3);
    LatentStats s;
    for (int64_t ch = 0; ch < c; ++ch) {
        double sum = 0.0, sq = 0.0, noise = 0.0;
        for (int64_t b = 0; b < n; ++b)
            for (int64_t i = 0; i < hw; ++i) {
                const auto k = static_cast<std::size_t>((b * c + ch) * hw + i);
                const double v = means.data()[k];
                sum += v;
                sq += v * v;
                noise += std::exp(static_cast<double>(logvars.data()[k]));
            }
        const double cnt = static_cast<double>(n * hw);
        const double mu = sum / cnt;
        // Variance of the sampled latents: spread of the means plus the mean posterior variance.
        const double var = std::max(sq / cnt - mu * mu, 0.0) + noise / cnt;
        s.mean.push_back(static_cast<float>(mu));
        s.std.push_back(static_cast<float>(std::max(std::sqrt(var), 1e-6)));
    }
    return s;
}

double reconstruction_mae(const LatentCodec& codec, const ImageSet& data, int64_t batch_size) {
    NoGradGuard no_grad;
    double total = 0.0;
    for (int64_t start = 0; start < data.count; start += batch_size) {
        std::vector<int64_t> idx;
        for (int64_t i = start; i < std::min(data.count, start + batch_size); ++i) idx.push_back(i);
        const Tensor images = data.batch(idx);
        const Tensor recon = codec.decode(codec.encode(images, 0, true).mean);
        for (int64_t i = 0; i < images.numel(); ++i) total += std::abs(images.data()[i] - recon.data()[i]);
    }
    return total / static_cast<double>(data.count * data.image_numel());
}

}  // namespace st
