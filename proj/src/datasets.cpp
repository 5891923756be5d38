#include "selftrans/datasets.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>

#include <json.hpp>

#include "selftrans/errors.hpp"
#include "selftrans/hash.hpp"
#include "selftrans/image_io.hpp"
#include "selftrans/rng.hpp"

namespace st {

namespace fs = std::filesystem;

namespace {

constexpr uint64_t kShapesStream = 0x5A4E5;
constexpr int kSupersample = 4;

struct Rgb {
    double r, g, b;
};

// Red, green, blue, yellow in [0, 1].
constexpr Rgb kHues[4] = {{0.90, 0.15, 0.15}, {0.15, 0.80, 0.20}, {0.20, 0.30, 0.95}, {0.95, 0.85, 0.10}};

bool inside(int shape, double u, double v, double r) {
    switch (shape) {
    case 0:
        return u * u + v * v <= r * r;
    case 1:
        return std::abs(u) <= 0.8 * r && std::abs(v) <= 0.8 * r;
    case 2: {
        const double s3 = std::numbers::sqrt3;
        return v >= -0.5 * r && s3 * u + v <= r && -s3 * u + v <= r;
    }
    default: {
        const double arm = 0.3 * r;
        return (std::abs(u) <= arm && std::abs(v) <= r) || (std::abs(v) <= arm && std::abs(u) <= r);
    }
    }
}

void render_shape(float* out, int size, int label, uint64_t seed) {
    Rng rng(seed);
    const int shape = label % 4;
    const Rgb hue = kHues[label / 4];
    const double bg[3] = {rng.uniform(0.05, 0.40), rng.uniform(0.05, 0.40), rng.uniform(0.05, 0.40)};
    const double jitter[3] = {rng.uniform(-0.05, 0.05), rng.uniform(-0.05, 0.05), rng.uniform(-0.05, 0.05)};
    const double fg[3] = {hue.r + jitter[0], hue.g + jitter[1], hue.b + jitter[2]};
    const double cx = rng.uniform(0.35, 0.65) * size;
    const double cy = rng.uniform(0.35, 0.65) * size;
    const double radius = rng.uniform(0.22, 0.34) * size;
    const double theta = rng.uniform(0.0, 2.0 * std::numbers::pi);
    const double ct = std::cos(theta), sn = std::sin(theta);
    const std::size_t plane = static_cast<std::size_t>(size) * size;

    for (int y = 0; y < size; ++y)
        for (int x = 0; x < size; ++x) {
            int hits = 0;
            for (int sy = 0; sy < kSupersample; ++sy)
                for (int sx = 0; sx < kSupersample; ++sx) {
                    const double px = x + (sx + 0.5) / kSupersample - cx;
                    const double py = y + (sy + 0.5) / kSupersample - cy;
                    // Image y grows downward; flip so shapes point "up" at theta = 0.
                    const double u = ct * px + sn * py;
                    const double v = sn * px - ct * py;
                    hits += inside(shape, u, v, radius);
                }
            const double a = static_cast<double>(hits) / (kSupersample * kSupersample);
            const std::size_t i = static_cast<std::size_t>(y) * size + x;
            for (int c = 0; c < 3; ++c) {
                const double noisy_bg = bg[c] + 0.05 * rng.normal();
                const double v = std::clamp((1.0 - a) * noisy_bg + a * fg[c], 0.0, 1.0);
                out[c * plane + i] = static_cast<float>(2.0 * v - 1.0);
            }
        }
}

std::vector<fs::path> sorted_entries(const fs::path& dir, bool directories) {
    std::vector<fs::path> out;
    std::error_code ec;
    for (fs::directory_iterator it(dir, ec), end; !ec && it != end; it.increment(ec)) {
        if (directories && it->is_directory()) out.push_back(it->path());
        if (!directories && it->is_regular_file()) {
            std::string ext = it->path().extension().string();
            std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char ch) { return std::tolower(ch); });
            if (ext == ".png") out.push_back(it->path());
        }
    }
    if (ec) throw IoError("cannot list directory " + dir.string() + ": " + ec.message());
    std::sort(out.begin(), out.end());
    return out;
}

std::string file_sha256(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot read " + path.string());
    Sha256 h;
    char buf[1 << 16];
    while (in.read(buf, sizeof(buf)) || in.gcount() > 0) h.update(buf, static_cast<std::size_t>(in.gcount()));
    return h.hex_digest();
}

}  // namespace

Tensor ImageSet::batch(std::span<const int64_t> indices) const {
    const int64_t per = image_numel();
    std::vector<float> out(indices.size() * static_cast<std::size_t>(per));
    for (std::size_t k = 0; k < indices.size(); ++k) {
        const int64_t i = indices[k];
        if (i < 0 || i >= count) throw ShapeError("ImageSet::batch: index " + std::to_string(i) + " out of range");
        std::copy_n(pixels.begin() + i * per, per, out.begin() + static_cast<std::ptrdiff_t>(k) * per);
    }
    return Tensor::from({static_cast<int64_t>(indices.size()), channels, size, size}, std::move(out));
}

std::vector<int64_t> ImageSet::batch_labels(std::span<const int64_t> indices) const {
    std::vector<int64_t> out;
    out.reserve(indices.size());
    for (auto i : indices) out.push_back(labels.at(static_cast<std::size_t>(i)));
    return out;
}

ImageSet ImageSet::subset(std::span<const int64_t> indices) const {
    ImageSet s;
    s.count = static_cast<int64_t>(indices.size());
    s.channels = channels;
    s.size = size;
    s.num_classes = num_classes;
    s.pixels = batch(indices).values();
    s.labels = batch_labels(indices);
    for (auto i : indices) s.sources.push_back(sources.empty() ? std::string() : sources[static_cast<std::size_t>(i)]);
    return s;
}

void ShapesSpec::validate() const {
    if (num_classes < 2) throw ConfigError("dataset.num_classes: must be >= 2");
    if (num_classes > kMaxShapeClasses)
        throw ConfigError("dataset.num_classes: " + std::to_string(num_classes) + " exceeds the " +
                          std::to_string(kMaxShapeClasses) + " shape/hue combinations");
    if (image_size < 16) throw ConfigError("dataset.image_size: must be >= 16");
    if (samples_per_class < 1) throw ConfigError("dataset.samples_per_class: must be >= 1");
}

ImageSet generate_shapes(const ShapesSpec& spec) {
    spec.validate();
    ImageSet set;
    set.count = int64_t{spec.num_classes} * spec.samples_per_class;
    set.channels = 3;
    set.size = spec.image_size;
    set.num_classes = spec.num_classes;
    set.pixels.resize(static_cast<std::size_t>(set.count * set.image_numel()));
    for (int64_t i = 0; i < set.count; ++i) {
        const int label = static_cast<int>(i % spec.num_classes);
        render_shape(set.pixels.data() + i * set.image_numel(), spec.image_size, label,
                     derive_seed(spec.seed, kShapesStream, static_cast<uint64_t>(i)));
        set.labels.push_back(label);
        set.sources.push_back("shapes:" + std::to_string(spec.seed) + ":" + std::to_string(i));
    }
    return set;
}

ImageSet load_image_folder(const fs::path& root, int size) {
    if (size < 1) throw ConfigError("dataset.image_size: must be positive");
    if (!fs::is_directory(root)) throw IoError("image folder not found: " + root.string());
    const auto class_dirs = sorted_entries(root, true);
    if (class_dirs.empty()) throw IoError("image folder has no class directories: " + root.string());
    ImageSet set;
    set.channels = 3;
    set.size = size;
    set.num_classes = static_cast<int>(class_dirs.size());
    for (std::size_t label = 0; label < class_dirs.size(); ++label) {
        const auto files = sorted_entries(class_dirs[label], false);
        if (files.empty()) throw IoError("empty class directory: " + class_dirs[label].string());
        for (const auto& f : files) {
            RgbImage img = read_png(f);
            const int short_side = std::min(img.width, img.height);
            if (short_side != size) {
                const double s = static_cast<double>(size) / short_side;
                img = resize_bilinear(img, std::max(size, static_cast<int>(std::lround(img.width * s))),
                                      std::max(size, static_cast<int>(std::lround(img.height * s))));
            }
            img = center_crop(img, size, size);
            const auto planar = from_rgb8(img);
            set.pixels.insert(set.pixels.end(), planar.begin(), planar.end());
            set.labels.push_back(static_cast<int64_t>(label));
            set.sources.push_back(f.string());
            ++set.count;
        }
    }
    return set;
}

void write_image_folder(const ImageSet& set, const fs::path& root) {
    std::error_code ec;
    fs::create_directories(root, ec);
    if (ec) throw IoError("cannot create " + root.string() + ": " + ec.message());
    const int width = std::max(2, static_cast<int>(std::to_string(std::max(set.num_classes - 1, 0)).size()));
    nlohmann::json samples = nlohmann::json::array();
    for (int64_t i = 0; i < set.count; ++i) {
        std::string cls = std::to_string(set.labels[static_cast<std::size_t>(i)]);
        cls.insert(0, static_cast<std::size_t>(std::max(0, width - static_cast<int>(cls.size()))), '0');
        const fs::path rel = fs::path("class_" + cls) / (std::to_string(i) + ".png");
        write_png(root / rel, to_rgb8(set.pixels.data() + i * set.image_numel(), set.size, set.size));
        samples.push_back(
            {{"path", rel.string()}, {"label", set.labels[static_cast<std::size_t>(i)]}, {"sha256", file_sha256(root / rel)}});
    }
    const nlohmann::json manifest = {{"count", set.count},
                                     {"num_classes", set.num_classes},
                                     {"image_size", set.size},
                                     {"samples", std::move(samples)}};
    std::ofstream out(root / "manifest.json");
    if (!out) throw IoError("cannot write " + (root / "manifest.json").string());
    out << manifest.dump(2) << '\n';
}

std::pair<ImageSet, ImageSet> split_per_class(const ImageSet& set, double first_fraction) {
    std::vector<std::vector<int64_t>> by_class(static_cast<std::size_t>(set.num_classes));
    for (int64_t i = 0; i < set.count; ++i) by_class.at(static_cast<std::size_t>(set.labels[static_cast<std::size_t>(i)])).push_back(i);
    std::vector<int64_t> first, second;
    for (const auto& members : by_class) {
        const auto cut = static_cast<std::size_t>(std::floor(first_fraction * static_cast<double>(members.size())));
        first.insert(first.end(), members.begin(), members.begin() + static_cast<std::ptrdiff_t>(cut));
        second.insert(second.end(), members.begin() + static_cast<std::ptrdiff_t>(cut), members.end());
    }
    std::sort(first.begin(), first.end());
    std::sort(second.begin(), second.end());
    return {set.subset(first), set.subset(second)};
}

int64_t steps_per_epoch(int64_t dataset_size, int64_t batch_size) {
    if (dataset_size <= 0 || batch_size <= 0) throw ConfigError("steps_per_epoch: dataset and batch must be positive");
    return (dataset_size + batch_size - 1) / batch_size;
}

std::vector<int64_t> batch_indices(int64_t dataset_size, int64_t batch_size, uint64_t seed, int64_t step) {
    const int64_t spe = steps_per_epoch(dataset_size, batch_size);
    const int64_t epoch = step / spe;
    const int64_t k = step % spe;
    const auto order = permutation(dataset_size, seed ^ static_cast<uint64_t>(epoch));
    const int64_t begin = k * batch_size, end = std::min(dataset_size, begin + batch_size);
    return {order.begin() + begin, order.begin() + end};
}

}  // namespace st
