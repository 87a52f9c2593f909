#pragma once

#include <cstdint>
#include <initializer_list>
#include <random>

namespace ikd {

/// Mixes a base seed with a sequence of counters into an independent
/// stream key (splitmix64 finalizer applied per component).
std::uint64_t derive_seed(std::uint64_t base, std::initializer_list<std::uint64_t> counters);

/// Seeded generator with platform-independent conversions.
///
/// std::mt19937_64 output is fully specified by the standard; the
/// standard distributions are not, so uniform/normal draws are done here.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : engine_(seed) {}

    std::uint64_t next() { return engine_(); }
    /// Uniform in [0, 1) with 53 random bits.
    double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }
    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
    /// Uniform integer in [lo, hi].
    std::int64_t uniform_int(std::int64_t lo, std::int64_t hi);
    /// Standard normal (Box-Muller, one draw per call).
    double normal();

private:
    std::mt19937_64 engine_;
};

}  // namespace ikd
