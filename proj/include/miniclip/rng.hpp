#pragma once

#include <cmath>
#include <cstdint>

namespace miniclip {

// splitmix64; used both as a generator step and to mix stream keys.
inline uint64_t splitmix64(uint64_t& state) {
    uint64_t z = (state += 0x9e3779b97f4a7c15ULL);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

// Counter-based generator (xoshiro256** seeded via splitmix64). Self-contained
// so that sequences are identical across standard libraries and platforms.
class Rng {
  public:
    explicit Rng(uint64_t seed = 0) {
        uint64_t sm = seed;
        for (auto& s : s_) s = splitmix64(sm);
    }

    uint64_t next_u64() {
        const uint64_t result = rotl(s_[1] * 5, 7) * 9;
        const uint64_t t = s_[1] << 17;
        s_[2] ^= s_[0];
        s_[3] ^= s_[1];
        s_[1] ^= s_[2];
        s_[0] ^= s_[3];
        s_[2] ^= t;
        s_[3] = rotl(s_[3], 45);
        return result;
    }

    // Uniform in [0, 1).
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Uniform integer in [0, n); n must be > 0.
    int64_t below(int64_t n) { return static_cast<int64_t>(uniform() * static_cast<double>(n)); }

    bool bernoulli(double p) { return uniform() < p; }

    // Marsaglia polar method, one value per call (the pair partner is dropped
    // to keep the draw count predictable).
    double normal() {
        while (true) {
            const double u = uniform(-1.0, 1.0);
            const double v = uniform(-1.0, 1.0);
            const double s = u * u + v * v;
            if (s > 0.0 && s < 1.0) return u * std::sqrt(-2.0 * std::log(s) / s);
        }
    }

    // In-place Fisher-Yates shuffle of indices[0..n).
    template <class Vec>
    void shuffle(Vec& v) {
        for (int64_t i = static_cast<int64_t>(v.size()) - 1; i > 0; --i) {
            const int64_t j = below(i + 1);
            std::swap(v[i], v[j]);
        }
    }

  private:
    static uint64_t rotl(uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }
    uint64_t s_[4];
};

// Independent substream for (seed, a, b, c, d). Sample augmentation derives
// one stream per (run seed, epoch, sample, view/purpose) so results do not
// depend on evaluation order or on which views get materialized.
inline Rng derive_rng(uint64_t seed, uint64_t a, uint64_t b = 0, uint64_t c = 0, uint64_t d = 0) {
    uint64_t st = seed;
    uint64_t k = splitmix64(st);
    st ^= a * 0x9e3779b97f4a7c15ULL + k;
    k ^= splitmix64(st);
    st ^= b * 0xc2b2ae3d27d4eb4fULL + splitmix64(st);
    st ^= c * 0x165667b19e3779f9ULL + splitmix64(st);
    st ^= d * 0x27d4eb2f165667c5ULL + splitmix64(st);
    return Rng(splitmix64(st) ^ k);
}

}  // namespace miniclip
