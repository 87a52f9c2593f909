#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <string_view>

namespace ikd::io {

static_assert(std::endian::native == std::endian::little, "binary formats assume a little-endian host");

/// Thrown for malformed, truncated, or checksum-failing files.
class CorruptFile : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class ByteWriter {
public:
    template <typename T>
    void put(T value) {
        static_assert(std::is_trivially_copyable_v<T>);
        buf_.append(reinterpret_cast<const char*>(&value), sizeof(T));
    }
    void put_bytes(const void* data, std::size_t n) { buf_.append(static_cast<const char*>(data), n); }
    void put_string(std::string_view s) {
        put<std::uint32_t>(static_cast<std::uint32_t>(s.size()));
        buf_.append(s);
    }
    const std::string& bytes() const { return buf_; }
    std::string take() { return std::move(buf_); }

private:
    std::string buf_;
};

class ByteReader {
public:
    ByteReader(std::string_view bytes, std::string what) : bytes_(bytes), what_(std::move(what)) {}

    template <typename T>
    T get() {
        static_assert(std::is_trivially_copyable_v<T>);
        T value;
        std::memcpy(&value, take(sizeof(T)), sizeof(T));
        return value;
    }
    const char* take(std::size_t n) {
        if (bytes_.size() - pos_ < n) {
            throw CorruptFile(what_ + ": truncated at byte " + std::to_string(pos_));
        }
        const char* p = bytes_.data() + pos_;
        pos_ += n;
        return p;
    }
    std::string get_string(std::size_t max_len = 4096) {
        const auto n = get<std::uint32_t>();
        if (n > max_len) throw CorruptFile(what_ + ": implausible string length " + std::to_string(n));
        return std::string(take(n), n);
    }
    std::size_t position() const { return pos_; }
    std::size_t remaining() const { return bytes_.size() - pos_; }
    const std::string& what() const { return what_; }

private:
    std::string_view bytes_;
    std::size_t pos_ = 0;
    std::string what_;
};

std::string read_file(const std::filesystem::path& path);
/// Writes through a temporary sibling and renames into place.
void write_file_atomic(const std::filesystem::path& path, std::string_view bytes);

}  // namespace ikd::io
