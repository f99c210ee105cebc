#pragma once

#include <cmath>
#include <cstdint>
#include <sstream>
#include <stdexcept>
#include <string>

namespace apnet {

// All contract violations surface as apnet::Error with a readable message.
class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

namespace detail {
template <typename... Args>
std::string format_msg(Args&&... args) {
  std::ostringstream os;
  (os << ... << args);
  return os.str();
}
}  // namespace detail

#define APNET_REQUIRE(cond, ...)                                   \
  do {                                                             \
    if (!(cond)) throw ::apnet::Error(::apnet::detail::format_msg(__VA_ARGS__)); \
  } while (0)

// Deterministic RNG: std::mt19937_64 is bit-exact across platforms, but the
// standard distributions are not, so the value conversions live here.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : s_(split(seed)) {}

  std::uint64_t next_u64() {
    // xorshift* keeps the state small and the stream reproducible.
    std::uint64_t x = s_;
    x ^= x >> 12;
    x ^= x << 25;
    x ^= x >> 27;
    s_ = x;
    return x * 0x2545F4914F6CDD1DULL;
  }

  // uniform in [0, 1)
  double uniform() { return double(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // uniform integer in [0, n)
  std::uint64_t uniform_index(std::uint64_t n) {
    return n == 0 ? 0 : next_u64() % n;
  }

  double normal(double mean = 0.0, double stddev = 1.0) {
    // Box-Muller, one value per call (the twin is discarded for simplicity).
    double u1 = 0.0;
    do { u1 = uniform(); } while (u1 <= 0.0);
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    return mean + stddev * r * std::cos(6.283185307179586477 * u2);
  }

  bool bernoulli(double p) { return uniform() < p; }

  // Derive an independent stream, e.g. per sample or per epoch.
  Rng fork(std::uint64_t stream) const { return Rng(s_ ^ split(stream)); }

 private:
  static std::uint64_t split(std::uint64_t x) {
    // splitmix64 finalizer; spreads low-entropy seeds over the state space.
    x += 0x9E3779B97F4A7C15ULL;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
    x = x ^ (x >> 31);
    return x == 0 ? 0x853C49E6748FEA9BULL : x;
  }

  std::uint64_t s_;
};

}  // namespace apnet
