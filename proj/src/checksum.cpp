#include "ikd/checksum.hpp"

#include <charconv>
#include <cstdio>
#include <stdexcept>

namespace ikd {

void Fnv1a::update(std::span<const std::uint8_t> bytes) {
    for (std::uint8_t b : bytes) {
        state_ ^= b;
        state_ *= 0x100000001b3ULL;
    }
}

void Fnv1a::update(const void* data, std::size_t size) {
    update(std::span<const std::uint8_t>(static_cast<const std::uint8_t*>(data), size));
}

std::uint64_t fnv1a(std::string_view bytes) {
    Fnv1a h;
    h.update(bytes);
    return h.value();
}

std::string hex64(std::uint64_t value) {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(value));
    return buf;
}

std::uint64_t parse_hex64(std::string_view text) {
    std::uint64_t v = 0;
    auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), v, 16);
    if (ec != std::errc{} || ptr != text.data() + text.size() || text.size() != 16) {
        throw std::invalid_argument("malformed 64-bit hex checksum '" + std::string(text) + "'");
    }
    return v;
}

}  // namespace ikd
