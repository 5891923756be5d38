#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "selftrans/nn.hpp"
#include "selftrans/tensor.hpp"

namespace st {

/// Named-tensor archive persisted as a directory holding `manifest.json` and
/// `tensors.bin` (little-endian f32, one record per tensor, SHA-256 each).
class CheckpointArchive {
public:
    static constexpr int kFormatVersion = 1;

    std::string kind;
    int64_t step = 0;
    nlohmann::json config = nlohmann::json::object();
    nlohmann::json meta = nlohmann::json::object();

    /// Stores a copy of the tensor's values. Replaces an existing entry.
    void put(const std::string& name, const Tensor& t);
    void put_params(const std::string& prefix, const ParamList& params);

    bool has(const std::string& name) const;
    bool has_prefix(const std::string& prefix) const;
    /// Throws IoError naming the tensor when absent.
    Tensor get(const std::string& name) const;
    /// Copies `prefix.<name>` into each parameter; missing names and shape
    /// mismatches raise IoError naming the tensor.
    void load_params(const std::string& prefix, ParamList& params) const;

    std::vector<std::string> names() const;
    /// Digest over names, shapes and values of the tensors under `prefix`.
    std::string digest(const std::string& prefix = "") const;

    /// Writes into a sibling temp directory and then swaps it in, so an
    /// existing archive at `dir` survives a failed save.
    void save(const std::filesystem::path& dir) const;
    static CheckpointArchive load(const std::filesystem::path& dir);

private:
    struct Record {
        std::string name;
        Shape shape;
        std::vector<float> values;
    };
    std::vector<Record> records_;
    std::map<std::string, std::size_t> index_;
};

/// Hash of a live parameter list (names, shapes, values).
std::string params_digest(const ParamList& params);

}  // namespace st
