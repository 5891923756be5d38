#include "selftrans/checkpoint.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

#include "selftrans/errors.hpp"
#include "selftrans/hash.hpp"

namespace st {

namespace fs = std::filesystem;

static_assert(std::endian::native == std::endian::little, "tensors.bin is written in native little-endian order");

namespace {

void hash_tensor(Sha256& h, const std::string& name, const Shape& shape, std::span<const float> values) {
    h.update(name);
    h.update("\0", 1);
    for (auto d : shape) h.update(&d, sizeof(d));
    h.update(values.data(), values.size() * sizeof(float));
}

}  // namespace

void CheckpointArchive::put(const std::string& name, const Tensor& t) {
    Record rec{name, t.shape(), std::vector<float>(t.data().begin(), t.data().end())};
    if (auto it = index_.find(name); it != index_.end()) {
        records_[it->second] = std::move(rec);
    } else {
        index_.emplace(name, records_.size());
        records_.push_back(std::move(rec));
    }
}

void CheckpointArchive::put_params(const std::string& prefix, const ParamList& params) {
    for (const auto& p : params) put(prefix + "." + p.name, p.tensor);
}

bool CheckpointArchive::has(const std::string& name) const { return index_.count(name) > 0; }

bool CheckpointArchive::has_prefix(const std::string& prefix) const {
    const std::string p = prefix + ".";
    return std::any_of(records_.begin(), records_.end(), [&](const Record& r) { return r.name.rfind(p, 0) == 0; });
}

Tensor CheckpointArchive::get(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw IoError("checkpoint: missing tensor '" + name + "'");
    const auto& r = records_[it->second];
    return Tensor::from(r.shape, r.values);
}

void CheckpointArchive::load_params(const std::string& prefix, ParamList& params) const {
    for (auto& p : params) {
        const std::string name = prefix + "." + p.name;
        auto it = index_.find(name);
        if (it == index_.end()) throw IoError("checkpoint: missing tensor '" + name + "'");
        const auto& r = records_[it->second];
        if (r.shape != p.tensor.shape())
            throw IoError("checkpoint: tensor '" + name + "' has shape " + shape_str(r.shape) + ", expected " +
                          shape_str(p.tensor.shape()));
        auto dst = p.tensor.mutable_data();
        std::copy(r.values.begin(), r.values.end(), dst.begin());
    }
}

std::vector<std::string> CheckpointArchive::names() const {
    std::vector<std::string> out;
    out.reserve(records_.size());
    for (const auto& r : records_) out.push_back(r.name);
    return out;
}

std::string CheckpointArchive::digest(const std::string& prefix) const {
    Sha256 h;
    for (const auto& r : records_)
        if (prefix.empty() || r.name.rfind(prefix + ".", 0) == 0) hash_tensor(h, r.name, r.shape, r.values);
    return h.hex_digest();
}

void CheckpointArchive::save(const fs::path& dir) const {
    nlohmann::json manifest;
    manifest["format_version"] = kFormatVersion;
    manifest["kind"] = kind;
    manifest["step"] = step;
    manifest["config"] = config;
    manifest["meta"] = meta;
    manifest["tensors"] = nlohmann::json::array();

    const fs::path tmp = dir.string() + ".tmp";
    std::error_code ec;
    fs::remove_all(tmp, ec);
    fs::create_directories(tmp, ec);
    if (ec) throw IoError("checkpoint: cannot create " + tmp.string() + ": " + ec.message());
    {
        std::ofstream bin(tmp / "tensors.bin", std::ios::binary);
        if (!bin) throw IoError("checkpoint: cannot write " + (tmp / "tensors.bin").string());
        uint64_t offset = 0;
        for (const auto& r : records_) {
            const uint64_t nbytes = r.values.size() * sizeof(float);
            bin.write(reinterpret_cast<const char*>(r.values.data()), static_cast<std::streamsize>(nbytes));
            manifest["tensors"].push_back({{"name", r.name},
                                           {"dtype", "f32"},
                                           {"shape", r.shape},
                                           {"offset", offset},
                                           {"nbytes", nbytes},
                                           {"sha256", sha256_hex(r.values.data(), nbytes)}});
            offset += nbytes;
        }
        if (!bin) throw IoError("checkpoint: write failed for " + (tmp / "tensors.bin").string());
    }
    {
        std::ofstream js(tmp / "manifest.json");
        if (!js) throw IoError("checkpoint: cannot write manifest in " + tmp.string());
        js << manifest.dump(2) << '\n';
        if (!js) throw IoError("checkpoint: manifest write failed in " + tmp.string());
    }
    fs::remove_all(dir, ec);
    fs::rename(tmp, dir, ec);
    if (ec) throw IoError("checkpoint: cannot move archive into " + dir.string() + ": " + ec.message());
}

CheckpointArchive CheckpointArchive::load(const fs::path& dir) {
    const fs::path manifest_path = dir / "manifest.json";
    std::ifstream js(manifest_path);
    if (!js) throw IoError("checkpoint: cannot open " + manifest_path.string());
    nlohmann::json manifest;
    try {
        js >> manifest;
    } catch (const nlohmann::json::exception& e) {
        throw IoError("checkpoint: malformed manifest " + manifest_path.string() + ": " + e.what());
    }
    if (!manifest.contains("format_version"))
        throw IoError("checkpoint: manifest lacks format_version in " + manifest_path.string());
    if (manifest["format_version"].get<int>() != kFormatVersion)
        throw IoError("checkpoint: unsupported format_version in " + manifest_path.string());

    std::ifstream bin(dir / "tensors.bin", std::ios::binary);
    if (!bin) throw IoError("checkpoint: cannot open " + (dir / "tensors.bin").string());
    std::vector<char> blob((std::istreambuf_iterator<char>(bin)), std::istreambuf_iterator<char>());

    CheckpointArchive a;
    a.kind = manifest.value("kind", "");
    a.step = manifest.value("step", int64_t{0});
    a.config = manifest.value("config", nlohmann::json::object());
    a.meta = manifest.value("meta", nlohmann::json::object());
    try {
        for (const auto& e : manifest.at("tensors")) {
            const auto name = e.at("name").get<std::string>();
            if (e.at("dtype").get<std::string>() != "f32")
                throw IoError("checkpoint: tensor '" + name + "' has unsupported dtype");
            const auto shape = e.at("shape").get<Shape>();
            const auto offset = e.at("offset").get<uint64_t>();
            const auto nbytes = e.at("nbytes").get<uint64_t>();
            if (nbytes != static_cast<uint64_t>(shape_numel(shape)) * sizeof(float) || offset + nbytes > blob.size())
                throw IoError("checkpoint: tensor '" + name + "' does not resolve inside tensors.bin");
            if (sha256_hex(blob.data() + offset, nbytes) != e.at("sha256").get<std::string>())
                throw IoError("checkpoint: checksum mismatch for tensor '" + name + "'");
            std::vector<float> values(static_cast<std::size_t>(nbytes / sizeof(float)));
            std::memcpy(values.data(), blob.data() + offset, nbytes);
            a.index_.emplace(name, a.records_.size());
            a.records_.push_back({name, shape, std::move(values)});
        }
    } catch (const nlohmann::json::exception& e) {
        throw IoError("checkpoint: malformed tensor index in " + manifest_path.string() + ": " + e.what());
    }
    return a;
}

std::string params_digest(const ParamList& params) {
    Sha256 h;
    for (const auto& p : params) hash_tensor(h, p.name, p.tensor.shape(), p.tensor.data());
    return h.hex_digest();
}

}  // namespace st
