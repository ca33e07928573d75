#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

namespace gdoc {

// SplitMix64 generator. All randomness in the project goes through this class
// so that corpora, initializations and episode draws are reproducible
// bit-for-bit across platforms. Constants are from Steele et al.'s SplitMix64;
// they are part of the on-disk corpus format contract.
class Rng {
  public:
    explicit Rng(uint64_t seed) : state_(seed) {}

    uint64_t next_u64() {
        uint64_t z = (state_ += 0x9e3779b97f4a7c15ULL);
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        return z ^ (z >> 31);
    }

    // Uniform in [0,1) with a 24-bit mantissa: exact on every IEEE platform.
    float uniform_float() {
        return static_cast<float>(next_u64() >> 40) * (1.0f / 16777216.0f);
    }

    // Uniform in [0,1) with a 53-bit mantissa.
    double uniform_double() {
        return static_cast<double>(next_u64() >> 11) * (1.0 / 9007199254740992.0);
    }

    // Box-Muller. Consumes two draws per pair; no state cached so the stream
    // position is a pure function of call count.
    double normal() {
        double u1 = uniform_double();
        double u2 = uniform_double();
        if (u1 < 1e-300) u1 = 1e-300;
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
    }

    // Uniform integer in [0, n).
    uint64_t below(uint64_t n) {
        // modulo bias is < 2^-40 for desk-scale n; acceptable for data synthesis
        return next_u64() % n;
    }

    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (size_t i = v.size(); i > 1; --i) {
            size_t j = static_cast<size_t>(below(i));
            std::swap(v[i - 1], v[j]);
        }
    }

    // Derive an independent stream, e.g. per epoch or per episode.
    Rng fork(uint64_t salt) {
        Rng r(state_ ^ (0x632be59bd9b4e019ULL * (salt + 1)));
        r.next_u64();
        return r;
    }

    uint64_t state() const { return state_; }
    void set_state(uint64_t s) { state_ = s; }

  private:
    uint64_t state_;
};

// FNV-1a, used for file and config digests.
inline uint64_t fnv1a(const void* bytes, size_t n, uint64_t h = 0xcbf29ce484222325ULL) {
    const unsigned char* p = static_cast<const unsigned char*>(bytes);
    for (size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ULL;
    }
    return h;
}

}  // namespace gdoc
