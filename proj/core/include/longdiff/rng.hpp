#pragma once

#include <cstdint>
#include <initializer_list>

namespace longdiff {

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ull;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
  return x ^ (x >> 31);
}

/// Deterministic child seed for (master, coordinates...). Used so that every random
/// draw is addressed by its logical position rather than by consumption order.
inline std::uint64_t derive_seed(std::uint64_t master, std::initializer_list<std::uint64_t> coords) {
  std::uint64_t h = splitmix64(master);
  for (const auto c : coords) {
    h = splitmix64(h ^ splitmix64(c + 0x632BE59BD9B4E019ull));
  }
  return h;
}

}  // namespace longdiff
