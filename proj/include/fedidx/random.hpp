#pragma once

#include <cstdint>
#include <initializer_list>
#include <random>

namespace fedidx {

using Rng = std::mt19937_64;

// Mixes a base seed with stream tags so that every consumer of randomness
// (client, round, purpose) gets an independent, reproducible generator.
std::uint64_t derive_seed(std::uint64_t base, std::initializer_list<std::uint64_t> tags);

inline Rng make_rng(std::uint64_t base, std::initializer_list<std::uint64_t> tags) {
  return Rng(derive_seed(base, tags));
}

// Stream tags.
namespace stream {
inline constexpr std::uint64_t kLabelEmbeddings = 0x4c41424cULL;
inline constexpr std::uint64_t kClassMix = 0x4d495843ULL;
inline constexpr std::uint64_t kSamples = 0x53414d50ULL;
inline constexpr std::uint64_t kPartition = 0x50415254ULL;
inline constexpr std::uint64_t kInit = 0x494e4954ULL;
inline constexpr std::uint64_t kPool = 0x504f4f4cULL;
inline constexpr std::uint64_t kShuffle = 0x53485546ULL;
inline constexpr std::uint64_t kSelect = 0x53454c45ULL;
inline constexpr std::uint64_t kLocal = 0x4c4f434cULL;
}  // namespace stream

}  // namespace fedidx
