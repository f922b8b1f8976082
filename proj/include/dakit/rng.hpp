#pragma once

#include "dakit/linalg.hpp"

#include <cstdint>
#include <string_view>

namespace dakit {

// Counter-based random stream. Draw i of a stream is a pure function of
// (seed, stream_id, i), so streams can be split ahead of time and consumed in
// any order or on any thread without changing the numbers they produce.
class RngStream {
public:
    RngStream() = default;
    RngStream(std::uint64_t seed, std::uint64_t stream_id = 0);

    std::uint64_t seed() const noexcept { return seed_; }
    std::uint64_t stream_id() const noexcept { return stream_id_; }
    std::uint64_t draws() const noexcept { return counter_; }

    std::uint64_t next_u64();
    // Uniform on the open interval (0, 1).
    double uniform();
    double normal();
    Vector normal_vector(Eigen::Index n);
    // Uniform integer in [0, n).
    std::uint64_t below(std::uint64_t n);

    // Child stream identified by a label and up to two indices, e.g.
    // derive("enkf", step, member). Children of distinct arguments are
    // independent; deriving does not advance the parent.
    RngStream derive(std::string_view tag, std::uint64_t a = 0, std::uint64_t b = 0) const;
    RngStream derive(std::uint64_t a, std::uint64_t b = 0) const;

private:
    std::uint64_t seed_ = 0;
    std::uint64_t stream_id_ = 0;
    std::uint64_t key_ = 0;
    std::uint64_t counter_ = 0;
};

std::uint64_t hash_tag(std::string_view tag) noexcept;
std::uint64_t mix64(std::uint64_t x) noexcept;

}  // namespace dakit
