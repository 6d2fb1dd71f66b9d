#pragma once

#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <random>
#include <string_view>
#include <vector>

namespace ftss {

using Rng = std::mt19937_64;

namespace detail {

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

}  // namespace detail

// Seed for an independent stream keyed by (master seed, ids...). Stable
// across platforms and thread counts.
inline std::uint64_t stream_seed(std::uint64_t master, std::initializer_list<std::uint64_t> ids) {
  std::uint64_t h = detail::splitmix64(master);
  for (std::uint64_t id : ids) h = detail::splitmix64(h ^ detail::splitmix64(id + 0x632be59bd9b4e019ULL));
  return h;
}

// FNV-1a, for turning a short tag into a stream id.
inline std::uint64_t tag_id(std::string_view tag) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (char c : tag) {
    h ^= static_cast<unsigned char>(c);
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline Rng make_stream(std::uint64_t master, std::initializer_list<std::uint64_t> ids) {
  return Rng(stream_seed(master, ids));
}

// Uniform draw in [0, n). Avoids std::uniform_int_distribution so sequences
// do not depend on the standard library in use.
inline std::size_t uniform_index(Rng& rng, std::size_t n) {
  const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
  std::uint64_t r;
  do r = rng(); while (r >= limit);
  return static_cast<std::size_t>(r % n);
}

// Uniform double in [0, 1) from the top 53 bits.
inline double uniform01(Rng& rng) { return double(rng() >> 11) * 0x1.0p-53; }

template <typename V>
void shuffle(std::vector<V>& v, Rng& rng) {
  for (std::size_t i = v.size(); i > 1; --i) std::swap(v[i - 1], v[uniform_index(rng, i)]);
}

}  // namespace ftss
