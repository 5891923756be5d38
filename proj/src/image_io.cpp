#include "selftrans/image_io.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <memory>

#include "selftrans/errors.hpp"

namespace st {

namespace fs = std::filesystem;

namespace {

struct FileCloser {
    void operator()(std::FILE* f) const { std::fclose(f); }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

[[noreturn]] void png_error_fn(png_structp png, png_const_charp msg) {
    auto* where = static_cast<std::string*>(png_get_error_ptr(png));
    if (where) *where = msg;
    png_longjmp(png, 1);
}

void png_warning_fn(png_structp, png_const_charp) {}

}  // namespace

RgbImage read_png(const fs::path& path) {
    FilePtr fp(std::fopen(path.c_str(), "rb"));
    if (!fp) throw IoError("cannot open image " + path.string());
    unsigned char sig[8];
    if (std::fread(sig, 1, 8, fp.get()) != 8 || png_sig_cmp(sig, 0, 8))
        throw IoError("not a PNG file: " + path.string());

    std::string err;
    png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, &err, png_error_fn, png_warning_fn);
    png_infop info = png ? png_create_info_struct(png) : nullptr;
    if (!info) {
        png_destroy_read_struct(&png, nullptr, nullptr);
        throw IoError("libpng init failed for " + path.string());
    }
    RgbImage img;
    std::vector<png_bytep> rows;
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw IoError("cannot decode " + path.string() + ": " + err);
    }
    png_init_io(png, fp.get());
    png_set_sig_bytes(png, 8);
    png_read_info(png, info);
    png_set_expand(png);
    png_set_strip_16(png);
    png_set_strip_alpha(png);
    png_set_gray_to_rgb(png);
    png_set_interlace_handling(png);
    png_read_update_info(png, info);
    img.width = static_cast<int>(png_get_image_width(png, info));
    img.height = static_cast<int>(png_get_image_height(png, info));
    if (png_get_rowbytes(png, info) != static_cast<std::size_t>(img.width) * 3) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw IoError("unsupported PNG layout in " + path.string());
    }
    img.rgb.resize(static_cast<std::size_t>(img.width) * img.height * 3);
    rows.resize(static_cast<std::size_t>(img.height));
    for (int y = 0; y < img.height; ++y) rows[static_cast<std::size_t>(y)] = img.rgb.data() + std::size_t(y) * img.width * 3;
    png_read_image(png, rows.data());
    png_read_end(png, nullptr);
    png_destroy_read_struct(&png, &info, nullptr);
    return img;
}

void write_png(const fs::path& path, const RgbImage& image) {
    if (image.width <= 0 || image.height <= 0 ||
        image.rgb.size() != static_cast<std::size_t>(image.width) * image.height * 3)
        throw ShapeError("write_png: buffer does not match " + std::to_string(image.width) + "x" +
                         std::to_string(image.height));
    if (path.has_parent_path()) {
        std::error_code ec;
        fs::create_directories(path.parent_path(), ec);
    }
    FilePtr fp(std::fopen(path.c_str(), "wb"));
    if (!fp) throw IoError("cannot write image " + path.string());
    std::string err;
    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, &err, png_error_fn, png_warning_fn);
    png_infop info = png ? png_create_info_struct(png) : nullptr;
    if (!info) {
        png_destroy_write_struct(&png, nullptr);
        throw IoError("libpng init failed for " + path.string());
    }
    std::vector<png_bytep> rows(static_cast<std::size_t>(image.height));
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_write_struct(&png, &info);
        throw IoError("cannot encode " + path.string() + ": " + err);
    }
    png_init_io(png, fp.get());
    png_set_IHDR(png, info, static_cast<png_uint_32>(image.width), static_cast<png_uint_32>(image.height), 8,
                 PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    for (int y = 0; y < image.height; ++y)
        rows[static_cast<std::size_t>(y)] = const_cast<png_bytep>(image.rgb.data()) + std::size_t(y) * image.width * 3;
    png_write_image(png, rows.data());
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
}

RgbImage to_rgb8(const float* planar, int width, int height) {
    RgbImage img{width, height, std::vector<uint8_t>(static_cast<std::size_t>(width) * height * 3)};
    const std::size_t plane = static_cast<std::size_t>(width) * height;
    for (std::size_t i = 0; i < plane; ++i)
        for (std::size_t c = 0; c < 3; ++c) {
            const float v = std::clamp((planar[c * plane + i] + 1.0f) * 127.5f, 0.0f, 255.0f);
            img.rgb[i * 3 + c] = static_cast<uint8_t>(std::lround(v));
        }
    return img;
}

std::vector<float> from_rgb8(const RgbImage& image) {
    const std::size_t plane = static_cast<std::size_t>(image.width) * image.height;
    std::vector<float> out(plane * 3);
    for (std::size_t i = 0; i < plane; ++i)
        for (std::size_t c = 0; c < 3; ++c) out[c * plane + i] = image.rgb[i * 3 + c] / 127.5f - 1.0f;
    return out;
}

RgbImage resize_bilinear(const RgbImage& image, int width, int height) {
    if (width <= 0 || height <= 0) throw ShapeError("resize_bilinear: target size must be positive");
    RgbImage out{width, height, std::vector<uint8_t>(static_cast<std::size_t>(width) * height * 3)};
    const double sx = static_cast<double>(image.width) / width;
    const double sy = static_cast<double>(image.height) / height;
    auto px = [&](int x, int y, int c) {
        x = std::clamp(x, 0, image.width - 1);
        y = std::clamp(y, 0, image.height - 1);
        return static_cast<double>(image.rgb[(static_cast<std::size_t>(y) * image.width + x) * 3 + c]);
    };
    for (int y = 0; y < height; ++y) {
        const double fy = (y + 0.5) * sy - 0.5;
        const int y0 = static_cast<int>(std::floor(fy));
        const double wy = fy - y0;
        for (int x = 0; x < width; ++x) {
            const double fx = (x + 0.5) * sx - 0.5;
            const int x0 = static_cast<int>(std::floor(fx));
            const double wx = fx - x0;
            for (int c = 0; c < 3; ++c) {
                const double v = (1 - wy) * ((1 - wx) * px(x0, y0, c) + wx * px(x0 + 1, y0, c)) +
                                 wy * ((1 - wx) * px(x0, y0 + 1, c) + wx * px(x0 + 1, y0 + 1, c));
                out.rgb[(static_cast<std::size_t>(y) * width + x) * 3 + c] =
                    static_cast<uint8_t>(std::clamp(std::lround(v), 0L, 255L));
            }
        }
    }
    return out;
}

RgbImage center_crop(const RgbImage& image, int width, int height) {
    if (width > image.width || height > image.height) throw ShapeError("center_crop: crop larger than image");
    const int ox = (image.width - width) / 2, oy = (image.height - height) / 2;
    RgbImage out{width, height, std::vector<uint8_t>(static_cast<std::size_t>(width) * height * 3)};
    for (int y = 0; y < height; ++y)
        std::copy_n(image.rgb.begin() + (static_cast<std::ptrdiff_t>(y + oy) * image.width + ox) * 3, width * 3,
                    out.rgb.begin() + static_cast<std::ptrdiff_t>(y) * width * 3);
    return out;
}

RgbImage tile_images(const std::vector<float>& planar, int64_t count, int size, int columns) {
    if (count <= 0 || columns <= 0) throw ShapeError("tile_images: need at least one image and column");
    const std::size_t per = std::size_t(3) * size * size;
    if (planar.size() != per * static_cast<std::size_t>(count)) throw ShapeError("tile_images: buffer size mismatch");
    const int cols = static_cast<int>(std::min<int64_t>(columns, count));
    const int rows = static_cast<int>((count + cols - 1) / cols);
    RgbImage grid{cols * size, rows * size, std::vector<uint8_t>(std::size_t(cols) * size * rows * size * 3, 0)};
    for (int64_t i = 0; i < count; ++i) {
        const RgbImage tile = to_rgb8(planar.data() + per * static_cast<std::size_t>(i), size, size);
        const int gx = static_cast<int>(i % cols) * size, gy = static_cast<int>(i / cols) * size;
        for (int y = 0; y < size; ++y)
            std::copy_n(tile.rgb.begin() + std::ptrdiff_t(y) * size * 3, size * 3,
                        grid.rgb.begin() + (std::ptrdiff_t(gy + y) * grid.width + gx) * 3);
    }
    return grid;
}

}  // namespace st
