#pragma once

#include <Eigen/Dense>

#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <stdexcept>
#include <string>

namespace roughflow {

template <int D>
using Vec = Eigen::Matrix<double, D, 1>;

template <int D>
using Mat = Eigen::Matrix<double, D, D>;

/// Second derivatives of a vector field: hess[k](i, j) = d^2 f^k / dx_i dx_j.
template <int D>
using Hess = std::array<Mat<D>, D>;

template <int D>
Hess<D> zero_hess() {
  Hess<D> h;
  for (auto& m : h) m.setZero();
  return h;
}

enum class ErrorKind {
  InvalidArgument,
  NonFinite,
  SingularJacobian,
  OutOfChart,
  NoConvergence,
  Resolution,
  UnboundedDivergence,
  MissingHessian,
  ConfigParse,
  UnknownScenario,
  Io,
};

inline const char* to_string(ErrorKind k) {
  switch (k) {
    case ErrorKind::InvalidArgument: return "invalid-argument";
    case ErrorKind::NonFinite: return "nonfinite-state";
    case ErrorKind::SingularJacobian: return "singular-jacobian";
    case ErrorKind::OutOfChart: return "out-of-chart";
    case ErrorKind::NoConvergence: return "no-convergence";
    case ErrorKind::Resolution: return "resolution";
    case ErrorKind::UnboundedDivergence: return "unbounded-divergence";
    case ErrorKind::MissingHessian: return "missing-hessian";
    case ErrorKind::ConfigParse: return "config-parse";
    case ErrorKind::UnknownScenario: return "unknown-scenario";
    case ErrorKind::Io: return "io";
  }
  return "unknown";
}

/// Single exception type for the library; callers branch on kind().
class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what)
      : std::runtime_error(std::string(to_string(kind)) + ": " + what), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

inline void require(bool cond, ErrorKind kind, const std::string& what) {
  if (!cond) throw Error(kind, what);
}

template <int D>
bool all_finite(const Vec<D>& v) {
  return v.allFinite();
}

/// Counter-based stream: every draw is a pure function of its key, so draws can
/// be regenerated in any order.
inline std::uint64_t splitmix64(std::uint64_t z) {
  z += 0x9e3779b97f4a7c15ULL;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

inline std::uint64_t hash_key(std::uint64_t seed, std::uint64_t a, std::uint64_t b, std::uint64_t c) {
  std::uint64_t h = splitmix64(seed);
  h = splitmix64(h ^ a);
  h = splitmix64(h ^ b);
  return splitmix64(h ^ c);
}

/// Uniform in (0, 1), never exactly 0 or 1.
inline double hash_uniform(std::uint64_t key) {
  return (static_cast<double>(key >> 11) + 0.5) * 0x1.0p-53;
}

/// Standard normal via Box-Muller on two derived uniforms.
inline double hash_normal(std::uint64_t seed, std::uint64_t a, std::uint64_t b, std::uint64_t c) {
  const std::uint64_t k = hash_key(seed, a, b, c);
  const double u1 = hash_uniform(k);
  const double u2 = hash_uniform(splitmix64(k ^ 0x5851f42d4c957f2dULL));
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
}

/// Volume of the unit ball in R^d.
inline double unit_ball_volume(int d) {
  return std::pow(M_PI, 0.5 * d) / std::tgamma(0.5 * d + 1.0);
}

/// Divergence of K = J^{-1} column-wise: (div K)_i = sum_j d_j K_{ji},
/// given J and its spatial derivatives dJ[a](b, c) = d_c J_{ab}.
template <int D>
Vec<D> inverse_divergence(const Mat<D>& K, const Hess<D>& dJ) {
  // d_j K = -K (d_j J) K
  Vec<D> out = Vec<D>::Zero();
  for (int j = 0; j < D; ++j) {
    Mat<D> djJ;
    for (int a = 0; a < D; ++a)
      for (int b = 0; b < D; ++b) djJ(a, b) = dJ[a](b, j);
    const Mat<D> djK = -K * djJ * K;
    for (int i = 0; i < D; ++i) out(i) += djK(j, i);
  }
  return out;
}

}  // namespace roughflow
