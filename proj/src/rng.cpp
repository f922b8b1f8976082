#include "dakit/rng.hpp"

#include <cmath>
#include <numbers>

namespace dakit {

namespace {
constexpr std::uint64_t golden_gamma = 0x9e3779b97f4a7c15ULL;
}

// SplitMix64 finalizer: a bijective avalanche mix of a 64-bit word.
std::uint64_t mix64(std::uint64_t x) noexcept {
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

// FNV-1a, folded through the mixer so short tags spread over all bits.
std::uint64_t hash_tag(std::string_view tag) noexcept {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : tag) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return mix64(h);
}

RngStream::RngStream(std::uint64_t seed, std::uint64_t stream_id)
    : seed_(seed), stream_id_(stream_id), key_(mix64(mix64(seed) ^ (stream_id * golden_gamma + 0x632be59bd9b4e019ULL))) {}

std::uint64_t RngStream::next_u64() {
    const std::uint64_t c = counter_++;
    return mix64(key_ + (c + 1) * golden_gamma);
}

double RngStream::uniform() {
    // 53 random bits, shifted by half an ulp so 0 and 1 are never returned.
    return (static_cast<double>(next_u64() >> 11) + 0.5) * 0x1.0p-53;
}

double RngStream::normal() {
    // Box-Muller with both uniforms consumed per draw, so the draw count maps
    // one-to-one onto normals and no state is cached between calls.
    const double u1 = uniform();
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

Vector RngStream::normal_vector(Eigen::Index n) {
    Vector z(n);
    for (Eigen::Index i = 0; i < n; ++i) z(i) = normal();
    return z;
}

std::uint64_t RngStream::below(std::uint64_t n) {
    if (n <= 1) return 0;
    // Rejection sampling removes modulo bias.
    const std::uint64_t limit = ~std::uint64_t{0} - (~std::uint64_t{0} % n);
    std::uint64_t x;
    do {
        x = next_u64();
    } while (x >= limit);
    return x % n;
}

RngStream RngStream::derive(std::string_view tag, std::uint64_t a, std::uint64_t b) const {
    std::uint64_t id = mix64(stream_id_ ^ hash_tag(tag));
    id = mix64(id + (a + 1) * golden_gamma);
    id = mix64(id ^ ((b + 1) * 0xd1b54a32d192ed03ULL));
    return RngStream(seed_, id);
}

RngStream RngStream::derive(std::uint64_t a, std::uint64_t b) const { return derive("", a, b); }

}  // namespace dakit
