#include "selftrans/trainer.hpp"

#include <fcntl.h>
#include <unistd.h>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "selftrans/errors.hpp"
#include "selftrans/flow.hpp"
#include "selftrans/hash.hpp"
#include "selftrans/guidance.hpp"
#include "selftrans/ops.hpp"
#include "selftrans/optim.hpp"
#include "selftrans/rng.hpp"

namespace st {

namespace fs = std::filesystem;

namespace {

// Independent random streams keyed by (seed, stream, step).
constexpr uint64_t kModelInitStream = 1;
constexpr uint64_t kHeadInitStream = 2;
constexpr uint64_t kLatentStream = 3;
constexpr uint64_t kTimeStream = 4;
constexpr uint64_t kNoiseStream = 5;
constexpr uint64_t kDropoutStream = 6;
constexpr uint64_t kHeldoutStream = 7;

Tensor gather_rows(const Tensor& all, const std::vector<int64_t>& idx) {
    const int64_t per = all.numel() / all.dim(0);
    std::vector<float> out(idx.size() * static_cast<std::size_t>(per));
    const auto src = all.data();
    for (std::size_t k = 0; k < idx.size(); ++k)
        std::copy_n(src.begin() + idx[k] * per, per, out.begin() + static_cast<std::ptrdiff_t>(k) * per);
    Shape shape = all.shape();
    shape[0] = static_cast<int64_t>(idx.size());
    return Tensor::from(shape, std::move(out));
}

double parse_double(const std::string& s, const fs::path& path) {
    try {
        std::size_t used = 0;
        const double v = std::stod(s, &used);
        if (used == s.size()) return v;
    } catch (const std::exception&) {
    }
    throw IoError("malformed trace value '" + s + "' in " + path.string());
}

}  // namespace

// ---- LossTrace ----------------------------------------------------------------

void LossTrace::append(const TraceRecord& rec) {
    if (!records_.empty() && rec.step <= records_.back().step)
        throw ShapeError("loss trace: step " + std::to_string(rec.step) + " does not follow " +
                         std::to_string(records_.back().step));
    records_.push_back(rec);
}

void LossTrace::truncate_from(int64_t step) {
    while (!records_.empty() && records_.back().step >= step) records_.pop_back();
}

std::string LossTrace::format_row(const TraceRecord& r) {
    char buf[256];
    std::snprintf(buf, sizeof(buf), "%lld,%.9g,%.9g,%.9g,%.9g", static_cast<long long>(r.step), r.l_diff, r.l_guide,
                  r.lambda_effective, r.iter_rate);
    return buf;
}

void LossTrace::save(const fs::path& path) const {
    std::ofstream out(path);
    if (!out) throw IoError("cannot write trace " + path.string());
    out << kHeader << '\n';
    for (const auto& r : records_) out << format_row(r) << '\n';
    if (!out) throw IoError("trace write failed: " + path.string());
}

LossTrace LossTrace::load(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot read trace " + path.string());
    std::string line;
    if (!std::getline(in, line) || line != kHeader) throw IoError("trace " + path.string() + " has an unexpected header");
    LossTrace trace;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        std::vector<std::string> cols;
        std::stringstream ss(line);
        for (std::string c; std::getline(ss, c, ',');) cols.push_back(c);
        if (cols.size() != 5) throw IoError("trace " + path.string() + ": malformed row '" + line + "'");
        TraceRecord r;
        r.step = static_cast<int64_t>(parse_double(cols[0], path));
        r.l_diff = parse_double(cols[1], path);
        r.l_guide = parse_double(cols[2], path);
        r.lambda_effective = parse_double(cols[3], path);
        r.iter_rate = parse_double(cols[4], path);
        trace.append(r);
    }
    return trace;
}

// ---- data -----------------------------------------------------------------------

ImageSet load_images(const RunConfig& config) {
    if (config.dataset.kind == "shapes") return generate_shapes(config.dataset.shapes_spec());
    ImageSet set = load_image_folder(config.dataset.path, config.dataset.image_size);
    if (set.num_classes != config.dataset.num_classes)
        throw ConfigError("dataset.num_classes: folder has " + std::to_string(set.num_classes) + " classes, config says " +
                          std::to_string(config.dataset.num_classes));
    return set;
}

ImageSet heldout_images(const RunConfig& config, int64_t count) {
    if (count < 1) throw ConfigError("held-out batch size must be >= 1");
    if (config.dataset.kind == "shapes") {
        ShapesSpec spec = config.dataset.shapes_spec();
        spec.seed = derive_seed(spec.seed, kHeldoutStream);
        spec.samples_per_class = static_cast<int>((count + spec.num_classes - 1) / spec.num_classes);
        ImageSet set = generate_shapes(spec);
        std::vector<int64_t> idx;
        for (int64_t i = 0; i < count; ++i) idx.push_back(i);
        return set.subset(idx);
    }
    const ImageSet all = load_images(config);
    std::vector<int64_t> idx;
    const int64_t take = std::min(count, all.count);
    for (int64_t i = 0; i < take; ++i) idx.push_back(i * all.count / take);
    return all.subset(idx);
}

LatentDataset encode_latent_dataset(const LatentCodec& codec, const LatentStats& stats, const ImageSet& images) {
    LatentDataset d;
    std::tie(d.mean, d.logvar) = encode_dataset(codec, images);
    d.labels = images.labels;
    d.stats = stats;
    d.num_classes = images.num_classes;
    return d;
}

CheckpointArchive latent_cache_archive(const LatentDataset& data, const std::string& codec_digest,
                                       const std::string& images_digest) {
    CheckpointArchive a;
    a.kind = "latents";
    a.meta["codec_digest"] = codec_digest;
    a.meta["images_digest"] = images_digest;
    a.meta["num_classes"] = data.num_classes;
    a.meta["count"] = data.count();
    a.put("mean", data.mean);
    a.put("logvar", data.logvar);
    std::vector<float> labels(data.labels.begin(), data.labels.end());
    a.put("labels", Tensor::from({data.count()}, std::move(labels)));
    put_latent_stats(a, data.stats);
    return a;
}

LatentDataset latent_dataset_from_archive(const CheckpointArchive& archive) {
    if (archive.kind != "latents") throw IoError("latent cache: archive kind is '" + archive.kind + "'");
    LatentDataset d;
    d.mean = archive.get("mean");
    d.logvar = archive.get("logvar");
    const Tensor labels = archive.get("labels");
    for (float v : labels.data()) d.labels.push_back(static_cast<int64_t>(v));
    d.stats = latent_stats_from_archive(archive);
    d.num_classes = archive.meta.value("num_classes", 0);
    if (d.mean.rank() != 4 || d.mean.shape() != d.logvar.shape() || d.mean.dim(0) != d.count())
        throw IoError("latent cache: inconsistent tensor shapes");
    return d;
}

fs::path latent_cache_path(const RunConfig& config) { return fs::path(config.codec_path().string() + "_latents"); }

LatentDataset load_latent_dataset(const RunConfig& config) {
    const fs::path path = config.codec_path();
    if (!fs::exists(path / "manifest.json")) throw IoError("missing codec checkpoint: " + path.string());
    const auto archive = CheckpointArchive::load(path);
    const LatentCodec codec = LatentCodec::from_archive(archive);
    if (!(codec.config() == config.codec_config()))
        throw ConfigError("codec: checkpoint " + path.string() + " was trained with a different codec config");
    const ImageSet images = load_images(config);
    Sha256 h;
    h.update(images.pixels.data(), images.pixels.size() * sizeof(float));
    h.update(images.labels.data(), images.labels.size() * sizeof(int64_t));
    const std::string images_digest = h.hex_digest();
    const std::string codec_digest = archive.digest();

    const fs::path cache = latent_cache_path(config);
    if (fs::exists(cache / "manifest.json")) {
        const auto cached = CheckpointArchive::load(cache);
        if (cached.meta.value("codec_digest", "") == codec_digest &&
            cached.meta.value("images_digest", "") == images_digest)
            return latent_dataset_from_archive(cached);
    }
    LatentDataset d = encode_latent_dataset(codec, latent_stats_from_archive(archive), images);
    latent_cache_archive(d, codec_digest, images_digest).save(cache);
    return d;
}

double build_codec(const RunConfig& config, const std::function<void(const CodecStepLog&)>& on_step) {
    const ImageSet images = load_images(config);
    auto result = train_codec(images, config.codec_config(), config.codec_train_options(), on_step);
    const LatentStats stats = compute_latent_stats(result.codec, images);
    CheckpointArchive a = result.codec.to_archive(&stats);
    a.step = config.codec.steps;
    const double mae = reconstruction_mae(result.codec, images);
    a.meta["reconstruction_mae"] = mae;
    a.save(config.codec_path());
    return mae;
}

// ---- schedule -----------------------------------------------------------------

const char* mode_name(TrainMode mode) {
    switch (mode) {
    case TrainMode::Baseline: return "baseline";
    case TrainMode::Stage1: return "stage1";
    case TrainMode::Stage2: return "stage2";
    }
    return "?";
}

StepSchedule resolve_schedule(const RunConfig& config, TrainMode mode, int64_t dataset_size) {
    StepSchedule s;
    s.steps_per_epoch = steps_per_epoch(dataset_size, config.train.batch_size);
    auto epochs_to_steps = [&](double epochs) {
        return static_cast<int64_t>(std::ceil(epochs * static_cast<double>(s.steps_per_epoch) - 1e-9));
    };
    if (mode == TrainMode::Stage1) {
        s.total_steps = config.guidance.teacher_steps.value_or(epochs_to_steps(config.guidance.teacher_epochs));
    } else {
        s.total_steps = config.train.total_steps.value_or(epochs_to_steps(config.train.total_epochs));
    }
    if (s.total_steps < 1) throw ConfigError("train.total_steps: resolves to " + std::to_string(s.total_steps));
    if (mode == TrainMode::Stage2) {
        if (config.guidance.stop_step) {
            if (*config.guidance.stop_step > s.total_steps)
                throw ConfigError("guidance.stop_step: " + std::to_string(*config.guidance.stop_step) +
                                  " exceeds total steps " + std::to_string(s.total_steps));
            s.stop_step = *config.guidance.stop_step;
        } else {
            s.stop_step = std::min(epochs_to_steps(config.guidance.stop_epochs), s.total_steps);
        }
    }
    return s;
}

fs::path default_run_dir(const RunConfig& config, TrainMode mode) {
    switch (mode) {
    case TrainMode::Baseline: return fs::path(config.output_dir) / "baseline";
    case TrainMode::Stage1: return fs::path(config.output_dir) / "guide";
    case TrainMode::Stage2: return fs::path(config.output_dir) / "student";
    }
    return config.output_dir;
}

// ---- lock -----------------------------------------------------------------------

RunLock::RunLock(const fs::path& run_dir) : path_(run_dir / "run.lock") {
    std::error_code ec;
    fs::create_directories(run_dir, ec);
    if (ec) throw IoError("cannot create run directory " + run_dir.string() + ": " + ec.message());
    const int fd = ::open(path_.c_str(), O_CREAT | O_EXCL | O_WRONLY, 0644);
    if (fd < 0)
        throw IoError("run directory " + run_dir.string() + " is locked by another run (remove " + path_.string() +
                      " if that run is dead)");
    const std::string pid = std::to_string(::getpid()) + "\n";
    [[maybe_unused]] auto n = ::write(fd, pid.data(), pid.size());
    ::close(fd);
}

RunLock::~RunLock() {
    std::error_code ec;
    fs::remove(path_, ec);
}

// ---- training -------------------------------------------------------------------

Backbone load_backbone(const CheckpointArchive& archive, bool prefer_ema) {
    if (!archive.config.contains("model")) throw IoError("checkpoint: manifest has no model config");
    Backbone model(model_config_from_json(archive.config["model"]), 0);
    ParamList params = model.parameters();
    archive.load_params(prefer_ema && archive.has_prefix("ema") ? "ema" : "model", params);
    return model;
}

namespace {

bool params_finite(const ParamList& params) {
    for (const auto& p : params)
        for (float v : p.tensor.data())
            if (!std::isfinite(v)) return false;
    return true;
}

class Run {
public:
    Run(TrainMode mode, const RunConfig& cfg, const LatentDataset& data, const fs::path& run_dir,
        const TrainOptions& options)
        : mode_(mode),
          cfg_(cfg),
          data_(data),
          run_dir_(run_dir),
          options_(options),
          model_cfg_(cfg.model_config()),
          layers_(cfg.guidance.layers(model_cfg_.depth)),
          schedule_(resolve_schedule(cfg, mode, data.count())),
          model_(model_cfg_, derive_seed(cfg.seed, kModelInitStream)),
          ema_(clone_params(model_.parameters())) {
        check_data();
        if (mode_ == TrainMode::Stage2) load_teacher();
        if (mode_ != TrainMode::Baseline) {
            const int64_t out_dim = mode_ == TrainMode::Stage1 ? model_cfg_.patch_dim()
                                                               : teacher_->model().config().hidden_dim;
            const int64_t hidden = cfg_.guidance.head_hidden ? cfg_.guidance.head_hidden : model_cfg_.hidden_dim;
            head_.emplace(model_cfg_.hidden_dim, hidden, out_dim, derive_seed(cfg.seed, kHeadInitStream));
            head_opt_.emplace(head_->parameters(), cfg_.optimizer);
        }
        model_opt_.emplace(model_.parameters(), cfg_.optimizer);
    }

    TrainSummary execute() {
        RunLock lock(run_dir_);
        TrainSummary summary;
        summary.schedule = schedule_;
        summary.checkpoint = run_dir_ / "checkpoint";
        summary.trace = run_dir_ / "trace.csv";
        if (teacher_) summary.teacher_digest_before = teacher_->digest();

        int64_t step = 0;
        if (options_.resume && fs::exists(summary.checkpoint / "manifest.json")) step = restore(summary.checkpoint);
        trace_.truncate_from(step);
        trace_.save(summary.trace);
        summary.start_step = step;

        std::ofstream trace_out(summary.trace, std::ios::app);
        if (!trace_out) throw IoError("cannot append to " + summary.trace.string());
        for (; step < schedule_.total_steps; ++step) {
            if (options_.halt_after_step && step >= *options_.halt_after_step) {
                save(summary.checkpoint, step);
                summary.halted = true;
                break;
            }
            const StepInfo info = train_step(step, summary.checkpoint);
            trace_.append(info.record);
            trace_out << LossTrace::format_row(info.record) << '\n' << std::flush;
            if (options_.on_step) options_.on_step(info);
            if (options_.verbose && ((step + 1) % cfg_.train.log_every == 0 || step + 1 == schedule_.total_steps))
                std::fprintf(stderr, "[%s] step %lld/%lld l_diff %.5f l_guide %.5f lambda %.3g %.2f it/s\n",
                             mode_name(mode_), static_cast<long long>(step + 1),
                             static_cast<long long>(schedule_.total_steps), info.record.l_diff, info.record.l_guide,
                             info.record.lambda_effective, last_rate_);
            if ((step + 1) % cfg_.train.checkpoint_every == 0 || step + 1 == schedule_.total_steps)
                save(summary.checkpoint, step + 1);
        }
        summary.steps_done = step;
        if (teacher_) {
            summary.teacher_digest_after = teacher_->digest();
            if (summary.teacher_digest_after != summary.teacher_digest_before)
                throw FrozenTensorError("teacher weights changed during training");
        }
        return summary;
    }

private:
    void check_data() const {
        if (data_.count() == 0) throw ShapeError("train: empty latent dataset");
        const Shape want{data_.count(), model_cfg_.latent_channels, model_cfg_.latent_size, model_cfg_.latent_size};
        if (data_.mean.shape() != want || data_.logvar.shape() != want)
            throw ConfigError("model.latent_size: latents " + shape_str(data_.mean.shape()) + " do not match " +
                              shape_str(want));
        if (data_.num_classes != model_cfg_.num_classes)
            throw ConfigError("dataset.num_classes: latent dataset has " + std::to_string(data_.num_classes));
    }

    void load_teacher() {
        const fs::path path = cfg_.guide_path();
        if (!fs::exists(path / "manifest.json")) throw IoError("missing guiding checkpoint: " + path.string());
        const auto archive = CheckpointArchive::load(path);
        teacher_.emplace(guidance::GuideTeacher::load(archive));
        teacher_step_ = archive.step;
        const ModelConfig& t = teacher_->model().config();
        if (t.latent_channels != model_cfg_.latent_channels || t.latent_size != model_cfg_.latent_size ||
            t.patch_size != model_cfg_.patch_size || t.num_classes != model_cfg_.num_classes)
            throw ConfigError("guidance.guide_checkpoint: teacher architecture is incompatible with the student");
        if (layers_.guiding > t.depth)
            throw ConfigError("guidance.guiding_layer: " + std::to_string(layers_.guiding) + " exceeds teacher depth " +
                              std::to_string(t.depth));
    }

    bool aux_active(int64_t step) const {
        switch (mode_) {
        case TrainMode::Baseline: return false;
        case TrainMode::Stage1: return cfg_.guidance.lambda_align > 0.0;
        case TrainMode::Stage2:
            return guidance::guidance_active(step, schedule_.stop_step) && cfg_.guidance.lambda_guide > 0.0;
        }
        return false;
    }

    StepInfo train_step(int64_t step, const fs::path& checkpoint) {
        const auto t0 = std::chrono::steady_clock::now();
        const uint64_t seed = cfg_.seed;
        const auto s = static_cast<uint64_t>(step);
        const auto idx = batch_indices(data_.count(), cfg_.train.batch_size, seed, step);
        const auto b = static_cast<int64_t>(idx.size());

        const Tensor z_raw = reparameterize(gather_rows(data_.mean, idx), gather_rows(data_.logvar, idx),
                                            derive_seed(seed, kLatentStream, s));
        const Tensor z = data_.stats.standardize(z_raw);
        const auto t = flow::sample_timesteps(b, derive_seed(seed, kTimeStream, s));
        const Tensor eps = flow::sample_noise(z.shape(), derive_seed(seed, kNoiseStream, s));
        const flow::NoisyState state = flow::forward_interpolate(z, eps, t);
        std::vector<int64_t> label_idx;
        for (auto i : idx) label_idx.push_back(data_.labels[static_cast<std::size_t>(i)]);
        const auto labels = labels_from_indices(label_idx);
        const auto cond =
            apply_condition_dropout(labels, model_cfg_.cond_dropout_prob, derive_seed(seed, kDropoutStream, s));

        const bool active = aux_active(step);
        const auto out = model_.forward(state.x_t, t, cond, active ? std::set<int>{layers_.guided} : std::set<int>{});
        const Tensor l_diff = flow::diffusion_loss(out.velocity, flow::velocity_target(z, eps));
        Tensor total = l_diff;
        TraceRecord rec;
        rec.step = step;
        if (active) {
            Tensor aux;
            if (mode_ == TrainMode::Stage1) {
                aux = guidance::vae_align_loss(out.taps.at(layers_.guided), *head_, z, model_cfg_.patch_size);
                rec.lambda_effective = cfg_.guidance.lambda_align;
            } else {
                const Tensor f_g =
                    guidance::extract_guided_feature(*teacher_, state, labels, layers_.guiding, cfg_.guidance.omega);
                aux = guidance::guide_loss(out.taps.at(layers_.guided), *head_, f_g);
                rec.lambda_effective = cfg_.guidance.lambda_guide;
            }
            total = guidance::combined_loss(l_diff, aux, rec.lambda_effective, true);
            rec.l_guide = aux.item();
        }
        rec.l_diff = l_diff.item();
        const double total_value = total.item();
        if (!std::isfinite(total_value)) {
            // The weights entering this step came out of a finite-loss step;
            // keep them unless the update itself already overflowed.
            std::string kept = "no checkpoint written";
            if (params_finite(model_.parameters()) && params_finite(ema_)) {
                save(checkpoint, step);
                kept = "last good checkpoint (step " + std::to_string(step) + ") saved to " + checkpoint.string();
            } else if (fs::exists(checkpoint / "manifest.json")) {
                kept = "weights are non-finite; previous checkpoint left at " + checkpoint.string();
            }
            throw NumericError("non-finite loss at step " + std::to_string(step) + "; " + kept);
        }
        total.backward();
        model_opt_->step();
        if (active) head_opt_->step();
        const double warm = (1.0 + static_cast<double>(step)) / (10.0 + static_cast<double>(step));
        ema_update(ema_, model_.parameters(), std::min(cfg_.train.ema_decay, warm));

        const double elapsed = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        last_rate_ = elapsed > 0.0 ? 1.0 / elapsed : 0.0;
        rec.iter_rate = cfg_.deterministic ? 0.0 : last_rate_;
        return {rec, total_value};
    }

    void save(const fs::path& dir, int64_t step) const {
        CheckpointArchive a;
        a.kind = mode_name(mode_);
        a.step = step;
        a.config["model"] = to_json(model_cfg_);
        a.config["run"] = config_to_json(cfg_);
        a.config["config_hash"] = config_hash(cfg_);
        a.meta["mode"] = mode_name(mode_);
        a.meta["steps_per_epoch"] = schedule_.steps_per_epoch;
        a.meta["total_steps"] = schedule_.total_steps;
        a.meta["student_steps"] = step;
        a.meta["teacher_steps"] = teacher_step_;
        a.meta["total_steps_incl_teacher"] = step + teacher_step_;
        a.meta["guided_layer"] = layers_.guided;
        a.meta["guiding_layer"] = layers_.guiding;
        if (mode_ == TrainMode::Stage2) {
            a.meta["stop_step"] = schedule_.stop_step;
            a.meta["teacher_digest"] = teacher_->digest();
            a.meta["teacher_from_ema"] = teacher_->uses_ema();
        }
        a.put_params("model", model_.parameters());
        a.put_params("ema", ema_);
        model_opt_->save_state(a, "opt.model");
        if (head_) {
            a.put_params("head", head_->parameters());
            head_opt_->save_state(a, "opt.head");
        }
        a.save(dir);
    }

    int64_t restore(const fs::path& dir) {
        const auto a = CheckpointArchive::load(dir);
        if (a.kind != mode_name(mode_))
            throw ConfigError("run directory " + run_dir_.string() + " holds a '" + a.kind + "' checkpoint, not '" +
                              mode_name(mode_) + "'");
        if (a.config.value("config_hash", std::string()) != config_hash(cfg_))
            throw ConfigError("run directory " + run_dir_.string() +
                              " holds a checkpoint written with a different config; use a fresh output_dir");
        ParamList params = model_.parameters();
        a.load_params("model", params);
        a.load_params("ema", ema_);
        model_opt_->load_state(a, "opt.model");
        if (head_) {
            ParamList hp = head_->parameters();
            a.load_params("head", hp);
            head_opt_->load_state(a, "opt.head");
        }
        const fs::path trace_path = run_dir_ / "trace.csv";
        if (fs::exists(trace_path)) trace_ = LossTrace::load(trace_path);
        return a.step;
    }

    TrainMode mode_;
    const RunConfig& cfg_;
    const LatentDataset& data_;
    fs::path run_dir_;
    TrainOptions options_;
    ModelConfig model_cfg_;
    LayerPair layers_;
    StepSchedule schedule_;
    Backbone model_;
    ParamList ema_;
    std::optional<guidance::GuideTeacher> teacher_;
    int64_t teacher_step_ = 0;
    std::optional<guidance::ProjectionHead> head_;
    std::optional<AdamW> model_opt_, head_opt_;
    LossTrace trace_;
    double last_rate_ = 0.0;
};

}  // namespace

TrainSummary train(TrainMode mode, const RunConfig& config, const LatentDataset& data, const fs::path& run_dir,
                   const TrainOptions& options) {
    config.validate();
    Run run(mode, config, data, run_dir, options);
    return run.execute();
}

}  // namespace st
