#pragma once

#include "ikd/tensor.hpp"

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

namespace ikd::data {

struct ImageGeometry {
    Index channels = 1;
    Index height = 28;
    Index width = 28;

    Index pixels() const { return channels * height * width; }
    Shape chw() const { return {channels, height, width}; }
    bool operator==(const ImageGeometry&) const = default;
};

/// image is [C,H,W] with values in [0,1]; label in [0,K).
struct LabeledSample {
    Tensor image;
    Index label = 0;
};

/// 8-bit image set with 16-bit labels, as stored on disk.
class Dataset {
public:
    Dataset(ImageGeometry geometry, Index classes);

    void add(std::span<const std::uint8_t> pixels, std::uint16_t label);

    Index size() const { return static_cast<Index>(labels_.size()); }
    const ImageGeometry& geometry() const { return geometry_; }
    Index classes() const { return classes_; }

    std::span<const std::uint8_t> pixels(Index i) const;
    std::uint16_t label(Index i) const { return labels_.at(static_cast<std::size_t>(i)); }

    /// Dequantized to [0,1].
    LabeledSample sample(Index i) const;
    std::vector<LabeledSample> samples() const;

    /// Samples in the given order.
    Dataset subset(std::span<const Index> indices) const;

private:
    ImageGeometry geometry_;
    Index classes_;
    std::vector<std::uint8_t> pixels_;
    std::vector<std::uint16_t> labels_;
};

/// Versioned little-endian file:
///   "IKDD" | u32 version | u32 count | u32 C | u32 H | u32 W | u32 K
///   count x (u16 label, C*H*W u8 pixels)
///   u64 FNV-1a of every preceding byte
inline constexpr std::uint32_t kDatasetVersion = 1;

std::string encode_dataset(const Dataset& dataset);
Dataset decode_dataset(std::string_view bytes, const std::string& what = "dataset");
void write_dataset(const Dataset& dataset, const std::filesystem::path& path);
Dataset read_dataset(const std::filesystem::path& path);

/// Quantizes a [0,1] image to 8 bits (round to nearest).
std::vector<std::uint8_t> quantize(const Tensor& image);
Tensor dequantize(std::span<const std::uint8_t> pixels, const Shape& shape);

/// Procedural stroke-glyph images. Each class is a fixed set of line
/// strokes drawn from the prototype seed; samples jitter, shift, thicken,
/// and add background noise. Train and test sets share prototypes and
/// differ in sample_seed.
struct SyntheticSpec {
    Index size = 28;
    Index classes = 10;
    Index strokes = 3;
    std::uint64_t prototype_seed = 1;
    double noise = 0.06;
    Index max_shift = 2;
    double intensity_min = 0.25;
    double intensity_max = 0.5;
    double background_max = 0.15;
    /// Each image is finally scaled by an exposure drawn from [exposure_min, 1].
    double exposure_min = 0.125;
};

Dataset make_synthetic(const SyntheticSpec& spec, Index per_class, std::uint64_t sample_seed);

}  // namespace ikd::data
