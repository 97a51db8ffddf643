#pragma once

#include <cstdint>
#include <initializer_list>
#include <random>
#include <vector>

namespace atp {

using Rng = std::mt19937_64;

/// Stream tags keep the random streams of independent stages apart even
/// when they share the run seed.
namespace stream {
inline constexpr std::uint64_t model_init = 1;
inline constexpr std::uint64_t population = 2;
inline constexpr std::uint64_t client_data = 3;
inline constexpr std::uint64_t pretrain_cohort = 4;
inline constexpr std::uint64_t pretrain_shuffle = 5;
inline constexpr std::uint64_t atp_cohort = 6;
inline constexpr std::uint64_t atp_shuffle = 7;
inline constexpr std::uint64_t analysis = 8;
inline constexpr std::uint64_t split = 9;
}  // namespace stream

/// Engine seeded from (seed, stream tag, extra ids). Same inputs always give
/// the same sequence; any differing component gives an unrelated one.
inline Rng make_rng(std::uint64_t seed, std::uint64_t tag, std::initializer_list<std::uint64_t> ids = {}) {
    std::vector<std::uint32_t> words;
    auto push = [&words](std::uint64_t v) {
        words.push_back(static_cast<std::uint32_t>(v));
        words.push_back(static_cast<std::uint32_t>(v >> 32));
    };
    push(seed);
    push(tag);
    for (auto id : ids) push(id);
    std::seed_seq seq(words.begin(), words.end());
    return Rng(seq);
}

}  // namespace atp
