#pragma once

#include <cstdint>
#include <string>
#include <string_view>

namespace tfids {

// FNV-1a 64-bit. Used for content/lineage hashes in output artifacts,
// not for anything security sensitive.
inline std::uint64_t fnv1a64(std::string_view bytes) {
    std::uint64_t h = 1469598103934665603ULL;
    for (unsigned char c : bytes) {
        h ^= static_cast<std::uint64_t>(c);
        h *= 1099511628211ULL;
    }
    return h;
}

inline std::string hash_hex(std::uint64_t h) {
    static const char* digits = "0123456789abcdef";
    std::string out(16, '0');
    for (int i = 15; i >= 0; --i) {
        out[static_cast<size_t>(i)] = digits[h & 0xF];
        h >>= 4;
    }
    return out;
}

inline std::string content_hash(std::string_view bytes) {
    return "fnv1a:" + hash_hex(fnv1a64(bytes));
}

} // namespace tfids
