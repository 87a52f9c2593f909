#include "ikd/archive.hpp"

#include "ikd/binary_io.hpp"
#include "ikd/checksum.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace ikd::archive {

namespace {

data::ImageGeometry geometry_of(const Shape& chw) {
    if (chw.size() != 3) throw std::invalid_argument("archive: images must be [C,H,W], got " + ikd::to_string(chw));
    return {chw[0], chw[1], chw[2]};
}

double linf(std::span<const std::uint8_t> adv, const Tensor& benign) {
    double worst = 0.0;
    for (std::size_t i = 0; i < adv.size(); ++i) {
        worst = std::max(worst, std::abs(adv[i] / 255.0 - benign.raw()[i]));
    }
    return worst;
}

void check_pairing(const AdversarialArchive& a, std::span<const data::LabeledSample> samples) {
    if (static_cast<std::size_t>(a.size()) != samples.size()) {
        throw std::invalid_argument("archive " + archive_stem(a.surrogate, a.method) + " holds " +
                                    std::to_string(a.size()) + " samples, expected " + std::to_string(samples.size()));
    }
    for (std::size_t i = 0; i < samples.size(); ++i) {
        if (a.labels[i] != samples[i].label) {
            throw std::invalid_argument("archive " + archive_stem(a.surrogate, a.method) + ": sample " +
                                        std::to_string(i) + " label differs from the dataset");
        }
    }
}

}  // namespace

AdversarialArchive from_set(const eval::AdversarialSet& set, std::span<const data::LabeledSample> samples,
                            std::uint64_t config_hash) {
    if (set.images.size() != samples.size() || samples.empty()) {
        throw std::invalid_argument("archive: adversarial set and samples differ in size");
    }
    AdversarialArchive a;
    a.surrogate = set.surrogate;
    a.method = set.method.label();
    a.config_hash = config_hash;
    a.geometry = geometry_of(samples.front().image.shape());
    a.failures = set.failures;
    a.diversity = set.diversity;
    for (std::size_t i = 0; i < samples.size(); ++i) {
        a.labels.push_back(static_cast<std::uint16_t>(samples[i].label));
        a.pixels.push_back(data::quantize(set.images[i]));
    }
    return a;
}

eval::AdversarialSet to_set(const AdversarialArchive& archive, const eval::MethodSpec& method) {
    if (method.label() != archive.method) {
        throw std::invalid_argument("archive holds method " + archive.method + ", requested " + method.label());
    }
    eval::AdversarialSet set{archive.surrogate, method, {}, archive.failures, archive.diversity, {}};
    for (const auto& px : archive.pixels) set.images.push_back(data::dequantize(px, archive.geometry.chw()));
    return set;
}

std::string encode(const AdversarialArchive& a) {
    const auto n = a.labels.size();
    if (a.pixels.size() != n || a.failures.size() != n) throw std::invalid_argument("archive: ragged sample arrays");
    io::ByteWriter w;
    w.put_bytes("IKDA", 4);
    w.put<std::uint32_t>(kArchiveVersion);
    w.put<std::uint64_t>(a.config_hash);
    w.put<std::uint32_t>(static_cast<std::uint32_t>(n));
    w.put<std::uint32_t>(static_cast<std::uint32_t>(a.geometry.channels));
    w.put<std::uint32_t>(static_cast<std::uint32_t>(a.geometry.height));
    w.put<std::uint32_t>(static_cast<std::uint32_t>(a.geometry.width));
    for (std::size_t i = 0; i < n; ++i) {
        if (a.pixels[i].size() != static_cast<std::size_t>(a.geometry.pixels())) {
            throw std::invalid_argument("archive: sample " + std::to_string(i) + " has the wrong pixel count");
        }
        w.put<std::uint16_t>(a.labels[i]);
        w.put<std::uint8_t>(a.failures[i].empty() ? 0 : 1);
        w.put_string(a.failures[i]);
        w.put_bytes(a.pixels[i].data(), a.pixels[i].size());
    }
    w.put<double>(a.diversity.cosine_sum);
    w.put<std::uint64_t>(static_cast<std::uint64_t>(a.diversity.pairs));
    w.put<std::uint64_t>(static_cast<std::uint64_t>(a.diversity.excluded));
    w.put<std::uint64_t>(fnv1a(w.bytes()));
    return w.take();
}

AdversarialArchive decode(std::string_view bytes, const std::string& what) {
    if (bytes.size() < 12) throw io::CorruptFile(what + ": too short");
    if (fnv1a(bytes.substr(0, bytes.size() - 8)) != io::ByteReader(bytes.substr(bytes.size() - 8), what).get<std::uint64_t>()) {
        throw io::CorruptFile(what + ": checksum mismatch");
    }
    io::ByteReader r(bytes.substr(0, bytes.size() - 8), what);
    if (std::string_view(r.take(4), 4) != "IKDA") throw io::CorruptFile(what + ": bad magic");
    const auto version = r.get<std::uint32_t>();
    if (version != kArchiveVersion) throw io::CorruptFile(what + ": unknown format version " + std::to_string(version));
    AdversarialArchive a;
    a.config_hash = r.get<std::uint64_t>();
    const auto count = r.get<std::uint32_t>();
    a.geometry.channels = r.get<std::uint32_t>();
    a.geometry.height = r.get<std::uint32_t>();
    a.geometry.width = r.get<std::uint32_t>();
    if (a.geometry.pixels() <= 0 || a.geometry.pixels() > (1 << 24)) throw io::CorruptFile(what + ": implausible geometry");
    const auto px = static_cast<std::size_t>(a.geometry.pixels());
    for (std::uint32_t i = 0; i < count; ++i) {
        a.labels.push_back(r.get<std::uint16_t>());
        const auto status = r.get<std::uint8_t>();
        auto failure = r.get_string(1 << 16);
        if (status > 1 || (status == 1) == failure.empty()) {
            throw io::CorruptFile(what + ": sample " + std::to_string(i) + " has an inconsistent status");
        }
        a.failures.push_back(std::move(failure));
        const auto* p = reinterpret_cast<const std::uint8_t*>(r.take(px));
        a.pixels.emplace_back(p, p + px);
    }
    a.diversity.cosine_sum = r.get<double>();
    a.diversity.pairs = static_cast<Index>(r.get<std::uint64_t>());
    a.diversity.excluded = static_cast<Index>(r.get<std::uint64_t>());
    if (r.remaining() != 0) throw io::CorruptFile(what + ": trailing bytes");
    return a;
}

nlohmann::json sidecar(const AdversarialArchive& a, std::span<const data::LabeledSample> samples) {
    check_pairing(a, samples);
    nlohmann::json items = nlohmann::json::array();
    Index failed = 0;
    for (std::size_t i = 0; i < samples.size(); ++i) {
        const bool ok = a.failures[i].empty();
        if (!ok) ++failed;
        items.push_back({{"index", i},
                         {"label", a.labels[i]},
                         {"status", ok ? "ok" : "failed"},
                         {"failure", ok ? nlohmann::json() : nlohmann::json(a.failures[i])},
                         {"linf", linf(a.pixels[i], samples[i].image)}});
    }
    return {{"surrogate", a.surrogate},
            {"method", a.method},
            {"config_hash", hex64(a.config_hash)},
            {"count", a.size()},
            {"failed", failed},
            {"geometry", {a.geometry.channels, a.geometry.height, a.geometry.width}},
            {"diversity",
             {{"mean_cosine", a.diversity.mean()}, {"pairs", a.diversity.pairs}, {"excluded", a.diversity.excluded}}},
            {"samples", items}};
}

BudgetScan scan_budget(const AdversarialArchive& a, std::span<const data::LabeledSample> samples, double epsilon) {
    check_pairing(a, samples);
    BudgetScan s;
    for (std::size_t i = 0; i < samples.size(); ++i) {
        const double d = linf(a.pixels[i], samples[i].image);
        s.max_linf = std::max(s.max_linf, d);
        if (d > epsilon + kQuantizationSlack + 1e-12) ++s.violations;
    }
    return s;
}

std::string archive_stem(const std::string& surrogate, const std::string& method_label) {
    return surrogate + "__" + method_label;
}

}  // namespace ikd::archive
