#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <string_view>

namespace ikd {

/// Incremental 64-bit FNV-1a.
class Fnv1a {
public:
    void update(std::span<const std::uint8_t> bytes);
    void update(const void* data, std::size_t size);
    void update(std::string_view text) { update(text.data(), text.size()); }
    std::uint64_t value() const { return state_; }

private:
    std::uint64_t state_ = 0xcbf29ce484222325ULL;
};

std::uint64_t fnv1a(std::string_view bytes);

/// 16 lowercase hex digits.
std::string hex64(std::uint64_t value);
/// Inverse of hex64; throws on malformed input.
std::uint64_t parse_hex64(std::string_view text);

}  // namespace ikd
