#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "selftrans/tensor.hpp"

namespace st {

/// Labeled images stored as [count, channels, size, size] floats in [-1, 1].
struct ImageSet {
    int64_t count = 0;
    int channels = 3;
    int size = 0;
    int num_classes = 0;
    std::vector<float> pixels;
    std::vector<int64_t> labels;
    std::vector<std::string> sources;  // file path or synthetic id per sample

    int64_t image_numel() const { return int64_t{channels} * size * size; }
    Tensor batch(std::span<const int64_t> indices) const;
    std::vector<int64_t> batch_labels(std::span<const int64_t> indices) const;
    ImageSet subset(std::span<const int64_t> indices) const;
};

/// Number of shape types times number of hues.
inline constexpr int kMaxShapeClasses = 16;

struct ShapesSpec {
    int image_size = 32;
    int num_classes = 8;
    int samples_per_class = 100;
    uint64_t seed = 0;

    void validate() const;
};

/// Anti-aliased filled shapes (circle, square, triangle, cross) in four hues
/// on noisy backgrounds. Class k is shape k % 4 in hue k / 4. Sample i has
/// class i % K.
ImageSet generate_shapes(const ShapesSpec& spec);

/// One subdirectory per class (sorted by name -> class index), PNG files
/// inside (sorted). Images are resized so the short side equals `size`, then
/// center-cropped.
ImageSet load_image_folder(const std::filesystem::path& root, int size);

/// Writes `root/<class>/<index>.png` plus `root/manifest.json` listing every
/// sample's path, label and SHA-256.
void write_image_folder(const ImageSet& set, const std::filesystem::path& root);

/// Splits into (first, second) halves of each class, preserving order.
std::pair<ImageSet, ImageSet> split_per_class(const ImageSet& set, double first_fraction);

int64_t steps_per_epoch(int64_t dataset_size, int64_t batch_size);

/// Sample indices for a training step. The epoch order is
/// permutation(seed ^ epoch); the last batch of an epoch may be short.
std::vector<int64_t> batch_indices(int64_t dataset_size, int64_t batch_size, uint64_t seed, int64_t step);

}  // namespace st
