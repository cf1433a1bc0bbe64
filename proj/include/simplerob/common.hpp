#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <stdexcept>
#include <string>
#include <string_view>

namespace simplerob {

// Precondition violated by a caller (bad range, bad config value, ...).
class PreconditionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// splitmix64 finalizer.
std::uint64_t mix64(std::uint64_t x);

// Stable 64-bit FNV-1a over bytes.
std::uint64_t fnv1a(std::string_view bytes);

// Derived RNG seeds. Stable across platforms and runs.
std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t index);
std::uint64_t derive_seed(std::uint64_t seed, std::string_view purpose);

// Runs fn(i) for i in [0, n) on up to `jobs` threads. Work items must write
// to disjoint outputs; the first exception (lowest index) is rethrown.
void parallel_for(std::size_t n, std::size_t jobs,
                  const std::function<void(std::size_t)>& fn);

}  // namespace simplerob
