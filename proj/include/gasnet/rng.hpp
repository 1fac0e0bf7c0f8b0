#pragma once

// Counter-based random numbers. Every draw is a pure function of
// (seed, stream, counter), so data loading, augmentation and phantom
// generation stay reproducible regardless of evaluation order or
// threading. No global state anywhere.

#include <cmath>
#include <cstdint>

namespace gasnet::rng {

inline uint64_t splitmix64(uint64_t x) {
    x += 0x9e3779b97f4a7c15ull;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
    return x ^ (x >> 31);
}

inline uint64_t hash3(uint64_t seed, uint64_t stream, uint64_t counter) {
    uint64_t h = splitmix64(seed ^ 0xa0761d6478bd642full);
    h = splitmix64(h ^ stream);
    return splitmix64(h ^ counter);
}

// [0, 1)
inline double uniform(uint64_t seed, uint64_t stream, uint64_t counter) {
    return static_cast<double>(hash3(seed, stream, counter) >> 11) * 0x1.0p-53;
}

// uniform integer in [lo, hi] inclusive
inline int64_t uniform_int(uint64_t seed, uint64_t stream, uint64_t counter,
                           int64_t lo, int64_t hi) {
    const uint64_t span = static_cast<uint64_t>(hi - lo + 1);
    return lo + static_cast<int64_t>(hash3(seed, stream, counter) % span);
}

// standard normal via Box-Muller; one value per counter
inline double normal(uint64_t seed, uint64_t stream, uint64_t counter) {
    const double u1 = 1.0 - uniform(seed, stream, counter * 2);      // (0, 1]
    const double u2 = uniform(seed, stream, counter * 2 + 1);
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
}

// Sequential convenience wrapper around the counter API.
class Stream {
public:
    Stream(uint64_t seed, uint64_t stream) : seed_(seed), stream_(stream) {}

    uint64_t next_u64() { return hash3(seed_, stream_, ctr_++); }
    double next_uniform() { return uniform(seed_, stream_, ctr_++); }
    double next_normal() { return normal(seed_, stream_, ctr_++); }
    int64_t next_int(int64_t lo, int64_t hi) {
        return uniform_int(seed_, stream_, ctr_++, lo, hi);
    }

private:
    uint64_t seed_, stream_;
    uint64_t ctr_ = 0;
};

// Well-known stream ids.
enum : uint64_t {
    kStreamInitS = 0x11,
    kStreamInitG = 0x12,
    kStreamInitD = 0x13,
    kStreamSample = 0x21,
    kStreamAugment = 0x22,
    kStreamSynthPair = 0x23,
    kStreamPhantom = 0x31,
};

}  // namespace gasnet::rng
