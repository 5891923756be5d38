#pragma once

#include <cstddef>
#include <memory>
#include <span>
#include <string>

namespace st {

/// Incremental SHA-256 (OpenSSL EVP backed).
class Sha256 {
public:
    Sha256();
    ~Sha256();
    Sha256(const Sha256&) = delete;
    Sha256& operator=(const Sha256&) = delete;

    void update(const void* data, std::size_t size);
    void update(std::string_view s) { update(s.data(), s.size()); }
    /// Lower-case hex digest; the object must not be updated afterwards.
    std::string hex_digest();

private:
    struct Impl;
    std::unique_ptr<Impl> impl_;
};

std::string sha256_hex(const void* data, std::size_t size);

}  // namespace st
