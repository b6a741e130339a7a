#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <string_view>

namespace dynrep {

using Mat = Eigen::MatrixXd;
using Vec = Eigen::VectorXd;
using Rng = std::mt19937_64;

/// Raised on precondition violations (bad shapes, non-finite inputs, invalid specs).
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// splitmix64 finalizer; used to derive independent RNG streams.
constexpr std::uint64_t mix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

/// Stream seed keyed by (base, a, b). Streams never depend on scheduler state.
constexpr std::uint64_t stream_seed(std::uint64_t base, std::uint64_t a, std::uint64_t b = 0) {
  return mix64(mix64(mix64(base) ^ (a * 0xd1b54a32d192ed03ULL)) ^ (b * 0x8cb92ba72f3d8dd7ULL));
}

inline Rng make_rng(std::uint64_t base, std::uint64_t a = 0, std::uint64_t b = 0) {
  return Rng(stream_seed(base, a, b));
}

/// Draws a child seed from a parent stream.
inline std::uint64_t fork_seed(Rng& rng) { return mix64(rng()); }

inline double standard_normal(Rng& rng) {
  std::normal_distribution<double> n(0.0, 1.0);
  return n(rng);
}

inline double uniform01(Rng& rng) {
  return std::uniform_real_distribution<double>(0.0, 1.0)(rng);
}

inline Mat gaussian_matrix(Eigen::Index rows, Eigen::Index cols, Rng& rng, double scale = 1.0) {
  Mat m(rows, cols);
  for (Eigen::Index j = 0; j < cols; ++j)
    for (Eigen::Index i = 0; i < rows; ++i) m(i, j) = scale * standard_normal(rng);
  return m;
}

inline Vec gaussian_vector(Eigen::Index n, Rng& rng, double scale = 1.0) {
  Vec v(n);
  for (Eigen::Index i = 0; i < n; ++i) v(i) = scale * standard_normal(rng);
  return v;
}

/// Uniform sample on the unit sphere S^{n-1}.
inline Vec unit_sphere_sample(Eigen::Index n, Rng& rng) {
  Vec v;
  double norm = 0.0;
  do {
    v = gaussian_vector(n, rng);
    norm = v.norm();
  } while (norm < 1e-12);
  return v / norm;
}

/// Uniform sample in the closed ball of the given radius.
inline Vec uniform_ball_sample(Eigen::Index n, double radius, Rng& rng) {
  const double r = radius * std::pow(uniform01(rng), 1.0 / static_cast<double>(n));
  return r * unit_sphere_sample(n, rng);
}

/// Stable 64-bit FNV-1a digest.
constexpr std::uint64_t fnv1a64(std::string_view s, std::uint64_t h = 0xcbf29ce484222325ULL) {
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::string hex64(std::uint64_t v);

inline bool all_finite(const Mat& m) { return m.allFinite(); }

}  // namespace dynrep
