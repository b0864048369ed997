#pragma once

#include <cstdint>
#include <random>
#include <string>

namespace hamr {

inline uint64_t splitmix64(uint64_t x) {
    x += 0x9e3779b97f4a7c15ull;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
    return x ^ (x >> 31);
}

inline uint64_t fnv1a(const std::string& s) {
    uint64_t h = 0xcbf29ce484222325ull;
    for (unsigned char ch : s) {
        h ^= ch;
        h *= 0x100000001b3ull;
    }
    return h;
}

/// Named sub-stream derivation: the same (seed, name) pair always yields the
/// same generator, independent of what else was drawn before.
inline uint64_t derive_seed(uint64_t seed, const std::string& name) {
    return splitmix64(seed ^ fnv1a(name));
}

inline std::mt19937_64 make_rng(uint64_t seed, const std::string& name) {
    return std::mt19937_64(derive_seed(seed, name));
}

}  // namespace hamr
