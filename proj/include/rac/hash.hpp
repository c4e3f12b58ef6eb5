#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <string_view>

namespace rac {

constexpr uint64_t kFnvOffset = 14695981039346656037ull;
constexpr uint64_t kFnvPrime = 1099511628211ull;

constexpr uint64_t fnv1a64(std::string_view s) {
    uint64_t h = kFnvOffset;
    for (unsigned char c : s) {
        h ^= c;
        h *= kFnvPrime;
    }
    return h;
}

inline uint64_t fnv1a64_bytes(const void* data, size_t n) {
    uint64_t h = kFnvOffset;
    const auto* p = static_cast<const unsigned char*>(data);
    for (size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= kFnvPrime;
    }
    return h;
}

constexpr uint64_t splitmix64(uint64_t x) {
    x += 0x9e3779b97f4a7c15ull;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
    return x ^ (x >> 31);
}

// Seed derivation scheme used everywhere: every pipeline stage draws its seed
// from the single run seed and a stage tag; per-record seeds mix in the record
// index. splitmix64 decorrelates nearby inputs.
constexpr uint64_t derive_seed(uint64_t root, std::string_view tag) {
    return splitmix64(root ^ fnv1a64(tag));
}

constexpr uint64_t derive_seed(uint64_t root, uint64_t salt) {
    return splitmix64(root ^ salt);
}

std::string to_hex(uint64_t v);

}  // namespace rac
