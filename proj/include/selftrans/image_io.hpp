#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

namespace st {

struct RgbImage {
    int width = 0;
    int height = 0;
    std::vector<uint8_t> rgb;  // row-major, interleaved
};

/// Reads 8/16-bit gray, gray+alpha, RGB or RGBA PNGs as 8-bit RGB. Throws
/// IoError naming the path on failure.
RgbImage read_png(const std::filesystem::path& path);
void write_png(const std::filesystem::path& path, const RgbImage& image);

/// Planar float [3, H, W] in [-1, 1] <-> interleaved 8-bit.
RgbImage to_rgb8(const float* planar, int width, int height);
std::vector<float> from_rgb8(const RgbImage& image);

/// Bilinear resize of an 8-bit RGB image.
RgbImage resize_bilinear(const RgbImage& image, int width, int height);
RgbImage center_crop(const RgbImage& image, int width, int height);

/// Tiles [B, 3, S, S] images into a grid with `columns` per row.
RgbImage tile_images(const std::vector<float>& planar, int64_t count, int size, int columns);

}  // namespace st
