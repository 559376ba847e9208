#pragma once

#include <cstddef>
#include <cmath>
#include <cstdint>
#include <random>

namespace ctrldiff {

// splitmix64 finalizer, used to derive independent sub-stream seeds.
constexpr uint64_t mix_seed(uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

constexpr uint64_t derive_seed(uint64_t seed, uint64_t stream) {
    return mix_seed(seed ^ mix_seed(stream + 0x632be59bd9b4e019ULL));
}

// Deterministic 64-bit generator. All real-valued draws are built from raw
// 64-bit words so results do not depend on the standard library's
// distribution implementations.
class Rng {
public:
    explicit Rng(uint64_t seed = 0) : engine_(mix_seed(seed)) {}

    uint64_t next_u64() { return engine_(); }

    // 53-bit uniform in [0, 1).
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    // 53-bit uniform in the open interval (0, 1); never returns 0 or 1.
    double uniform_open() { return (static_cast<double>(next_u64() >> 11) + 0.5) * 0x1.0p-53; }

    // Unbiased integer in [0, n).
    size_t below(size_t n) {
        if (n <= 1) {
            return 0;
        }
        const uint64_t bound = static_cast<uint64_t>(n);
        const uint64_t limit = UINT64_MAX - (UINT64_MAX % bound);
        uint64_t x = next_u64();
        while (x >= limit) {
            x = next_u64();
        }
        return static_cast<size_t>(x % bound);
    }

    double normal() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        const double u1 = uniform_open();
        const double u2 = uniform();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double angle = 6.283185307179586476925286766559 * u2;
        spare_ = r * std::sin(angle);
        has_spare_ = true;
        return r * std::cos(angle);
    }

    Rng fork(uint64_t stream) { return Rng(derive_seed(next_u64(), stream)); }

private:
    std::mt19937_64 engine_;
    double spare_ = 0.0;
    bool has_spare_ = false;
};

}  // namespace ctrldiff
