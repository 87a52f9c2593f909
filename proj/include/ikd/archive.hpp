#pragma once

#include "ikd/dataset.hpp"
#include "ikd/transfer.hpp"

#include <json.hpp>

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace ikd::archive {

/// Adversarial images for one (surrogate, method), stored as 8-bit pixels.
/// Surrogate and method travel in the file name and sidecar, not the binary.
struct AdversarialArchive {
    std::string surrogate;
    std::string method;
    std::uint64_t config_hash = 0;
    data::ImageGeometry geometry;
    std::vector<std::uint16_t> labels;
    std::vector<std::vector<std::uint8_t>> pixels;
    /// Empty for a successful attack.
    std::vector<std::string> failures;
    eval::DiversityStat diversity;

    Index size() const { return static_cast<Index>(labels.size()); }
};

/// Little-endian:
///   "IKDA" | u32 version | u64 config hash
///   u32 count | u32 C | u32 H | u32 W
///   count x (u16 label, u8 status, string failure, C*H*W u8 pixels)
///   f64 cosine sum | u64 pairs | u64 excluded
///   u64 FNV-1a of every preceding byte
inline constexpr std::uint32_t kArchiveVersion = 1;

AdversarialArchive from_set(const eval::AdversarialSet& set, std::span<const data::LabeledSample> samples,
                            std::uint64_t config_hash);
/// Dequantized images; failed samples keep their stored (benign) pixels.
eval::AdversarialSet to_set(const AdversarialArchive& archive, const eval::MethodSpec& method);

std::string encode(const AdversarialArchive& archive);
/// Surrogate and method are left empty.
AdversarialArchive decode(std::string_view bytes, const std::string& what = "archive");

/// Per-sample metadata: label, status, failure, L-inf distance to the benign image.
nlohmann::json sidecar(const AdversarialArchive& archive, std::span<const data::LabeledSample> samples);

/// Slack added to epsilon when checking stored 8-bit images.
inline constexpr double kQuantizationSlack = 1.0 / 255.0;

struct BudgetScan {
    double max_linf = 0.0;
    Index violations = 0;
};

/// Compares every stored image against its benign counterpart.
BudgetScan scan_budget(const AdversarialArchive& archive, std::span<const data::LabeledSample> samples,
                       double epsilon);

/// File stem for a (surrogate, method label) pair.
std::string archive_stem(const std::string& surrogate, const std::string& method_label);

}  // namespace ikd::archive
