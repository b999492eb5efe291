#include "fedsac/common.hpp"

namespace fedsac {

namespace {

std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

std::uint64_t fnv1a(std::string_view s) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char ch : s) {
        h ^= ch;
        h *= 0x100000001b3ULL;
    }
    return h;
}

}  // namespace

std::uint64_t derive_seed(std::uint64_t parent, std::string_view label,
                          std::uint64_t a, std::uint64_t b, std::uint64_t c) {
    std::uint64_t h = splitmix64(parent ^ fnv1a(label));
    h = splitmix64(h ^ a);
    h = splitmix64(h ^ (b * 0x632be59bd9b4e019ULL));
    h = splitmix64(h ^ (c * 0x8cb92ba72f3d8dd7ULL));
    return h;
}

}  // namespace fedsac
