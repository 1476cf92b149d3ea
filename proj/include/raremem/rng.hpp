#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <stdexcept>

namespace raremem {

// splitmix64 step; used for seeding and for deriving independent substreams.
inline uint64_t splitmix64(uint64_t& state) {
    uint64_t z = (state += 0x9e3779b97f4a7c15ULL);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

// Deterministic substream derivation: mixes a base seed with stream tags.
inline uint64_t derive_seed(uint64_t seed, uint64_t tag) {
    uint64_t s = seed ^ (0x9e3779b97f4a7c15ULL * (tag + 1));
    return splitmix64(s);
}

inline uint64_t derive_seed(uint64_t seed, uint64_t tag_a, uint64_t tag_b) {
    return derive_seed(derive_seed(seed, tag_a), tag_b);
}

// xoshiro256** with hand-rolled distributions. Everything downstream of a
// seed must be byte-reproducible across platforms, so no std::*_distribution
// (those are implementation-defined).
class Rng {
public:
    Rng() : Rng(0) {}

    explicit Rng(uint64_t seed) {
        uint64_t sm = seed;
        for (auto& word : state_) word = splitmix64(sm);
    }

    uint64_t next_u64() {
        const uint64_t result = rotl(state_[1] * 5, 7) * 9;
        const uint64_t t = state_[1] << 17;
        state_[2] ^= state_[0];
        state_[3] ^= state_[1];
        state_[1] ^= state_[2];
        state_[0] ^= state_[3];
        state_[2] ^= t;
        state_[3] = rotl(state_[3], 45);
        return result;
    }

    // Unbiased integer in [0, n) via rejection.
    uint64_t uniform_below(uint64_t n) {
        if (n == 0) throw std::invalid_argument("Rng::uniform_below: n == 0");
        const uint64_t zone = (UINT64_MAX / n) * n;
        uint64_t x;
        do {
            x = next_u64();
        } while (x >= zone);
        return x % n;
    }

    // Inclusive range [lo, hi].
    int64_t uniform_int(int64_t lo, int64_t hi) {
        return lo + static_cast<int64_t>(
                        uniform_below(static_cast<uint64_t>(hi - lo) + 1));
    }

    // Uniform in [0, 1) with 53 random bits.
    double uniform01() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    // Standard normal via Box-Muller. The sine partner is discarded so the
    // generator state stays a pure function of the draw count.
    double gaussian() {
        double u1;
        do {
            u1 = uniform01();
        } while (u1 <= 0.0);
        const double u2 = uniform01();
        const double r = std::sqrt(-2.0 * std::log(u1));
        return r * std::cos(2.0 * M_PI * u2);
    }

    std::array<uint64_t, 4> state() const { return state_; }
    void set_state(const std::array<uint64_t, 4>& s) { state_ = s; }

    bool operator==(const Rng& other) const { return state_ == other.state_; }

private:
    static uint64_t rotl(uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }

    std::array<uint64_t, 4> state_{};
};

}  // namespace raremem
