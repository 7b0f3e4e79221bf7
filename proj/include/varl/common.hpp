#pragma once

#include <cstdint>
#include <cmath>
#include <algorithm>
#include <limits>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace varl {

// ---------------------------------------------------------------------------
// Errors. Each one names the contract it guards; callers that can recover
// catch the specific type, the CLI maps them to exit codes.
// ---------------------------------------------------------------------------

struct ShapeMismatchError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct NotAPrefixError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct UnknownStateError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct TooLargeError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct OutOfBoundsError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct NonFiniteError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// ---------------------------------------------------------------------------
// Deterministic RNG. All randomness flows from a run seed through named
// streams so any artifact can be reproduced from its recorded seed alone.
// Draws use explicit bit manipulation instead of std::*_distribution, whose
// output is implementation-defined.
// ---------------------------------------------------------------------------

using Rng = std::mt19937_64;

// splitmix64 finalizer; combines seed material into independent stream seeds.
inline uint64_t mix64(uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

inline uint64_t mix64(uint64_t a, uint64_t b) { return mix64(mix64(a) ^ b); }

inline uint64_t mix64(uint64_t a, uint64_t b, uint64_t c) {
  return mix64(mix64(a, b) ^ c);
}

inline uint64_t mix64(uint64_t a, uint64_t b, uint64_t c, uint64_t d) {
  return mix64(mix64(a, b, c) ^ d);
}

inline Rng make_rng(uint64_t seed, uint64_t stream = 0) {
  return Rng(mix64(seed, stream));
}

// uniform in [0,1) with 53 random bits
inline double uniform01(Rng& rng) {
  return static_cast<double>(rng() >> 11) * 0x1.0p-53;
}

// uniform in [lo,hi)
inline double uniform_in(Rng& rng, double lo, double hi) {
  return lo + (hi - lo) * uniform01(rng);
}

// standard normal via Box-Muller (first branch only; stateless)
inline double normal01(Rng& rng) {
  double u1 = uniform01(rng);
  double u2 = uniform01(rng);
  if (u1 <= 0) u1 = std::numeric_limits<double>::min();
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586477 * u2);
}

// draw an index from a probability vector (assumed normalized)
inline int categorical(Rng& rng, std::span<const double> probs) {
  double u = uniform01(rng);
  double acc = 0.0;
  for (size_t i = 0; i < probs.size(); ++i) {
    acc += probs[i];
    if (u < acc) return static_cast<int>(i);
  }
  return static_cast<int>(probs.size()) - 1;
}

inline int uniform_int(Rng& rng, int lo, int hi) {  // inclusive bounds
  const uint64_t span = static_cast<uint64_t>(hi - lo) + 1;
  return lo + static_cast<int>(rng() % span);
}

// ---------------------------------------------------------------------------
// Numerics
// ---------------------------------------------------------------------------

// Practical -inf for log-domain work: representable, survives arithmetic.
inline constexpr double kLogZero = -1e30;

inline double logsumexp(std::span<const double> xs) {
  double mx = -std::numeric_limits<double>::infinity();
  for (double x : xs) mx = std::max(mx, x);
  if (!std::isfinite(mx)) return mx;
  double s = 0.0;
  for (double x : xs) s += std::exp(x - mx);
  return mx + std::log(s);
}

inline double log_mean_exp(std::span<const double> xs) {
  return logsumexp(xs) - std::log(static_cast<double>(xs.size()));
}

inline std::vector<double> softmax(std::span<const double> logits) {
  double mx = *std::max_element(logits.begin(), logits.end());
  std::vector<double> p(logits.size());
  double z = 0.0;
  for (size_t i = 0; i < logits.size(); ++i) {
    p[i] = std::exp(logits[i] - mx);
    z += p[i];
  }
  for (double& x : p) x /= z;
  return p;
}

inline std::vector<double> log_softmax(std::span<const double> logits) {
  double mx = *std::max_element(logits.begin(), logits.end());
  double z = 0.0;
  for (double x : logits) z += std::exp(x - mx);
  const double lz = mx + std::log(z);
  std::vector<double> out(logits.size());
  for (size_t i = 0; i < logits.size(); ++i) out[i] = logits[i] - lz;
  return out;
}

// exact KL between two categorical distributions (natural log)
inline double categorical_kl(std::span<const double> p,
                             std::span<const double> q) {
  double kl = 0.0;
  for (size_t i = 0; i < p.size(); ++i) {
    if (p[i] > 0.0) kl += p[i] * (std::log(p[i]) - std::log(q[i]));
  }
  return kl;
}

}  // namespace varl
