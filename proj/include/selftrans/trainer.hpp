#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "selftrans/backbone.hpp"
#include "selftrans/codec.hpp"
#include "selftrans/config.hpp"
#include "selftrans/tensor.hpp"

namespace st {

struct TraceRecord {
    int64_t step = 0;
    double l_diff = 0.0;
    double l_guide = 0.0;
    double lambda_effective = 0.0;
    double iter_rate = 0.0;
};

/// Append-only loss log with strictly increasing steps, stored as CSV.
class LossTrace {
public:
    static constexpr const char* kHeader = "step,l_diff,l_guide,lambda_effective,iter_rate";

    void append(const TraceRecord& rec);
    const std::vector<TraceRecord>& records() const { return records_; }
    /// Keeps only rows with step < `step`.
    void truncate_from(int64_t step);

    static std::string format_row(const TraceRecord& rec);
    void save(const std::filesystem::path& path) const;
    static LossTrace load(const std::filesystem::path& path);

private:
    std::vector<TraceRecord> records_;
};

/// Codec posteriors of every training image plus the standardization stats.
struct LatentDataset {
    Tensor mean;    // [N, C, H, W]
    Tensor logvar;  // [N, C, H, W]
    std::vector<int64_t> labels;
    LatentStats stats;
    int num_classes = 0;

    int64_t count() const { return static_cast<int64_t>(labels.size()); }
};

/// Generated shapes or a loaded image folder, per the dataset settings.
ImageSet load_images(const RunConfig& config);
/// Images not used for training: a differently seeded shapes draw, or an
/// evenly spaced subset of a folder dataset.
ImageSet heldout_images(const RunConfig& config, int64_t count);

LatentDataset encode_latent_dataset(const LatentCodec& codec, const LatentStats& stats, const ImageSet& images);
/// Precomputed-latent cache: posteriors, labels and standardization stats,
/// tagged with the codec digest and a hash of the encoded images.
CheckpointArchive latent_cache_archive(const LatentDataset& data, const std::string& codec_digest,
                                       const std::string& images_digest);
LatentDataset latent_dataset_from_archive(const CheckpointArchive& archive);
std::filesystem::path latent_cache_path(const RunConfig& config);

/// Loads the images and the codec checkpoint and returns the encoded
/// training set, reusing the latent cache when its tags still match.
LatentDataset load_latent_dataset(const RunConfig& config);

/// Trains the codec on the configured images, computes the latent statistics
/// and writes the archive to codec_path(). Returns the reconstruction MAE.
double build_codec(const RunConfig& config, const std::function<void(const CodecStepLog&)>& on_step = {});

enum class TrainMode { Baseline, Stage1, Stage2 };
const char* mode_name(TrainMode mode);

struct StepSchedule {
    int64_t steps_per_epoch = 0;
    int64_t total_steps = 0;
    int64_t stop_step = 0;  // Stage 2 only
};

/// Epoch-denominated settings become ceil(epochs * steps_per_epoch) steps.
StepSchedule resolve_schedule(const RunConfig& config, TrainMode mode, int64_t dataset_size);

struct StepInfo {
    TraceRecord record;
    double total_loss = 0.0;
};

struct TrainOptions {
    /// Stop (with a checkpoint) once this many steps are done, as if interrupted.
    std::optional<int64_t> halt_after_step;
    bool resume = true;
    std::function<void(const StepInfo&)> on_step;
    bool verbose = false;
};

struct TrainSummary {
    StepSchedule schedule;
    int64_t start_step = 0;
    int64_t steps_done = 0;
    bool halted = false;
    std::filesystem::path checkpoint;
    std::filesystem::path trace;
    std::string teacher_digest_before;  // Stage 2 only
    std::string teacher_digest_after;
};

/// Exclusive ownership of a run directory via an O_EXCL lock file.
class RunLock {
public:
    explicit RunLock(const std::filesystem::path& run_dir);
    ~RunLock();
    RunLock(const RunLock&) = delete;
    RunLock& operator=(const RunLock&) = delete;

private:
    std::filesystem::path path_;
};

/// Trains one arm into `run_dir` (checkpoint/ and trace.csv). Resumes from an
/// existing checkpoint written with the same config. A non-finite loss saves
/// the pre-step weights as the checkpoint and throws NumericError.
TrainSummary train(TrainMode mode, const RunConfig& config, const LatentDataset& data,
                   const std::filesystem::path& run_dir, const TrainOptions& options = {});

std::filesystem::path default_run_dir(const RunConfig& config, TrainMode mode);

/// Raw (`model.*`) or EMA (`ema.*`) weights of a training checkpoint.
Backbone load_backbone(const CheckpointArchive& archive, bool prefer_ema);

}  // namespace st
