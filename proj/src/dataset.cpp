#include "ikd/dataset.hpp"

#include "ikd/binary_io.hpp"
#include "ikd/checksum.hpp"
#include "ikd/random.hpp"

#include <algorithm>
#include <array>
#include <cmath>

namespace ikd::data {

Dataset::Dataset(ImageGeometry geometry, Index classes) : geometry_(geometry), classes_(classes) {
    if (geometry.channels < 1 || geometry.height < 1 || geometry.width < 1) {
        throw std::invalid_argument("dataset geometry must be positive");
    }
    if (classes < 1 || classes > 65535) throw std::invalid_argument("dataset class count out of range");
}

void Dataset::add(std::span<const std::uint8_t> pixels, std::uint16_t label) {
    if (static_cast<Index>(pixels.size()) != geometry_.pixels()) {
        throw std::invalid_argument("sample has " + std::to_string(pixels.size()) + " pixels, expected " +
                                    std::to_string(geometry_.pixels()));
    }
    if (label >= classes_) {
        throw std::invalid_argument("label " + std::to_string(label) + " >= class count " +
                                    std::to_string(classes_));
    }
    pixels_.insert(pixels_.end(), pixels.begin(), pixels.end());
    labels_.push_back(label);
}

std::span<const std::uint8_t> Dataset::pixels(Index i) const {
    if (i < 0 || i >= size()) throw std::out_of_range("dataset index " + std::to_string(i));
    const auto n = static_cast<std::size_t>(geometry_.pixels());
    return {pixels_.data() + static_cast<std::size_t>(i) * n, n};
}

LabeledSample Dataset::sample(Index i) const {
    return {dequantize(pixels(i), geometry_.chw()), label(i)};
}

std::vector<LabeledSample> Dataset::samples() const {
    std::vector<LabeledSample> out;
    out.reserve(labels_.size());
    for (Index i = 0; i < size(); ++i) out.push_back(sample(i));
    return out;
}

Dataset Dataset::subset(std::span<const Index> indices) const {
    Dataset out(geometry_, classes_);
    for (Index i : indices) out.add(pixels(i), label(i));
    return out;
}

std::vector<std::uint8_t> quantize(const Tensor& image) {
    std::vector<std::uint8_t> out(static_cast<std::size_t>(image.size()));
    for (Index i = 0; i < image.size(); ++i) {
        const double v = std::clamp(image[i], 0.0, 1.0);
        out[static_cast<std::size_t>(i)] = static_cast<std::uint8_t>(std::lround(v * 255.0));
    }
    return out;
}

Tensor dequantize(std::span<const std::uint8_t> pixels, const Shape& shape) {
    Tensor t(shape);
    if (t.size() != static_cast<Index>(pixels.size())) {
        throw std::invalid_argument("dequantize: pixel count does not match shape " + to_string(shape));
    }
    for (Index i = 0; i < t.size(); ++i) t[i] = pixels[static_cast<std::size_t>(i)] / 255.0;
    return t;
}

std::string encode_dataset(const Dataset& dataset) {
    const auto& g = dataset.geometry();
    io::ByteWriter w;
    w.put_bytes("IKDD", 4);
    w.put<std::uint32_t>(kDatasetVersion);
    w.put<std::uint32_t>(static_cast<std::uint32_t>(dataset.size()));
    w.put<std::uint32_t>(static_cast<std::uint32_t>(g.channels));
    w.put<std::uint32_t>(static_cast<std::uint32_t>(g.height));
    w.put<std::uint32_t>(static_cast<std::uint32_t>(g.width));
    w.put<std::uint32_t>(static_cast<std::uint32_t>(dataset.classes()));
    for (Index i = 0; i < dataset.size(); ++i) {
        w.put<std::uint16_t>(dataset.label(i));
        auto px = dataset.pixels(i);
        w.put_bytes(px.data(), px.size());
    }
    w.put<std::uint64_t>(fnv1a(w.bytes()));
    return w.take();
}

Dataset decode_dataset(std::string_view bytes, const std::string& what) {
    io::ByteReader r(bytes, what);
    if (std::string_view(r.take(4), 4) != "IKDD") throw io::CorruptFile(what + ": bad magic");
    const auto version = r.get<std::uint32_t>();
    if (version != kDatasetVersion) {
        throw io::CorruptFile(what + ": unknown format version " + std::to_string(version));
    }
    const auto count = r.get<std::uint32_t>();
    ImageGeometry g;
    g.channels = r.get<std::uint32_t>();
    g.height = r.get<std::uint32_t>();
    g.width = r.get<std::uint32_t>();
    const auto classes = r.get<std::uint32_t>();
    if (g.channels == 0 || g.height == 0 || g.width == 0 || g.pixels() > (1 << 24) || classes == 0 ||
        classes > 65535) {
        throw io::CorruptFile(what + ": implausible header");
    }
    const auto record = 2 + static_cast<std::size_t>(g.pixels());
    if (r.remaining() != static_cast<std::size_t>(count) * record + 8) {
        throw io::CorruptFile(what + ": header count " + std::to_string(count) +
                              " does not match file length (truncated or padded)");
    }
    const std::uint64_t expected = fnv1a(bytes.substr(0, bytes.size() - 8));
    Dataset ds(g, classes);
    for (std::uint32_t i = 0; i < count; ++i) {
        const auto label = r.get<std::uint16_t>();
        if (label >= classes) {
            throw io::CorruptFile(what + ": sample " + std::to_string(i) + " label " + std::to_string(label) +
                                  " >= " + std::to_string(classes));
        }
        const auto* px = reinterpret_cast<const std::uint8_t*>(r.take(static_cast<std::size_t>(g.pixels())));
        ds.add({px, static_cast<std::size_t>(g.pixels())}, label);
    }
    if (r.get<std::uint64_t>() != expected) throw io::CorruptFile(what + ": checksum mismatch");
    return ds;
}

void write_dataset(const Dataset& dataset, const std::filesystem::path& path) {
    io::write_file_atomic(path, encode_dataset(dataset));
}

Dataset read_dataset(const std::filesystem::path& path) {
    return decode_dataset(io::read_file(path), path.string());
}

namespace {

struct Stroke {
    double x0, y0, x1, y1;
};

double segment_distance_sq(double px, double py, const Stroke& s) {
    const double dx = s.x1 - s.x0, dy = s.y1 - s.y0;
    const double len2 = dx * dx + dy * dy;
    double t = len2 > 0.0 ? ((px - s.x0) * dx + (py - s.y0) * dy) / len2 : 0.0;
    t = std::clamp(t, 0.0, 1.0);
    const double ex = s.x0 + t * dx - px, ey = s.y0 + t * dy - py;
    return ex * ex + ey * ey;
}

Stroke draw_stroke(Rng& rng, const SyntheticSpec& spec) {
    const double lo = 0.2 * static_cast<double>(spec.size);
    const double hi = 0.8 * static_cast<double>(spec.size);
    Stroke st{};
    // Reject very short strokes so every class has visible structure.
    do {
        st = {rng.uniform(lo, hi), rng.uniform(lo, hi), rng.uniform(lo, hi), rng.uniform(lo, hi)};
    } while (std::hypot(st.x1 - st.x0, st.y1 - st.y0) < 0.3 * static_cast<double>(spec.size));
    return st;
}

std::vector<Stroke> prototype(const SyntheticSpec& spec, Index cls) {
    Rng rng(derive_seed(spec.prototype_seed, {static_cast<std::uint64_t>(cls)}));
    std::vector<Stroke> strokes;
    for (Index s = 0; s < spec.strokes; ++s) strokes.push_back(draw_stroke(rng, spec));
    return strokes;
}

}  // namespace

Dataset make_synthetic(const SyntheticSpec& spec, Index per_class, std::uint64_t sample_seed) {
    if (spec.size < 8 || spec.classes < 2 || spec.strokes < 1 || per_class < 1 || !(spec.exposure_min > 0.0) ||
        spec.exposure_min > 1.0 || spec.intensity_min > spec.intensity_max) {
        throw std::invalid_argument("synthetic dataset spec out of range");
    }
    std::vector<std::vector<Stroke>> protos;
    for (Index c = 0; c < spec.classes; ++c) protos.push_back(prototype(spec, c));

    const Index n = spec.size;
    const double unit = static_cast<double>(n) / 28.0;
    Dataset ds({1, n, n}, spec.classes);
    std::vector<std::uint8_t> px(static_cast<std::size_t>(n * n));
    for (Index i = 0; i < per_class * spec.classes; ++i) {
        const Index cls = i % spec.classes;
        Rng rng(derive_seed(sample_seed, {static_cast<std::uint64_t>(i)}));
        const double sx = static_cast<double>(rng.uniform_int(-spec.max_shift, spec.max_shift)) * unit;
        const double sy = static_cast<double>(rng.uniform_int(-spec.max_shift, spec.max_shift)) * unit;
        const double intensity = rng.uniform(spec.intensity_min, spec.intensity_max);
        const double width = rng.uniform(0.9, 1.4) * unit;
        const double background = rng.uniform(0.05, spec.background_max);
        const double exposure = rng.uniform(spec.exposure_min, 1.0);
        std::vector<Stroke> strokes = protos[static_cast<std::size_t>(cls)];
        for (auto& s : strokes) {
            s.x0 += sx + 0.8 * unit * rng.normal();
            s.y0 += sy + 0.8 * unit * rng.normal();
            s.x1 += sx + 0.8 * unit * rng.normal();
            s.y1 += sy + 0.8 * unit * rng.normal();
        }
        const double inv2w2 = 1.0 / (2.0 * width * width);
        for (Index y = 0; y < n; ++y) {
            for (Index x = 0; x < n; ++x) {
                double ink = 0.0;
                for (const auto& s : strokes) {
                    const double d2 = segment_distance_sq(static_cast<double>(x), static_cast<double>(y), s);
                    ink = std::max(ink, std::exp(-d2 * inv2w2));
                }
                const double v = background + intensity * ink + spec.noise * rng.normal();
                px[static_cast<std::size_t>(y * n + x)] =
                    static_cast<std::uint8_t>(std::lround(exposure * std::clamp(v, 0.0, 1.0) * 255.0));
            }
        }
        ds.add(px, static_cast<std::uint16_t>(cls));
    }
    return ds;
}

}  // namespace ikd::data
