#pragma once

#include <cstdint>
#include <random>

namespace vcmoe {

//! SplitMix64 finaliser; used to derive independent per-task seeds.
inline std::uint64_t mix_seed(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

//! Seed for work item `index` of stream `stream` under a master seed. The
//! result depends only on its arguments, never on scheduling.
inline std::uint64_t derive_seed(std::uint64_t master, std::uint64_t stream, std::uint64_t index) {
  return mix_seed(mix_seed(mix_seed(master) ^ stream) ^ index);
}

inline std::mt19937_64 make_rng(std::uint64_t master, std::uint64_t stream, std::uint64_t index) {
  return std::mt19937_64(derive_seed(master, stream, index));
}

}  // namespace vcmoe
