#pragma once

#include "roughflow/fields.hpp"

#include <optional>
#include <string>
#include <vector>

namespace roughflow {

/// A^k(x) = a_k + b_k tanh(x_k).
template <int D>
SmoothVectorField<D> tanh_saturated(const Vec<D>& a, const Vec<D>& b) {
  SmoothVectorField<D> f(
      "tanh-saturated",
      {{"a", std::vector<double>(a.data(), a.data() + D)}, {"b", std::vector<double>(b.data(), b.data() + D)}},
      Regularity::CInfty,
      BoundConsts{(a.cwiseAbs() + b.cwiseAbs()).norm(), b.cwiseAbs().maxCoeff(), 0.77 * b.cwiseAbs().maxCoeff(),
                  2.0 * b.cwiseAbs().maxCoeff()},
      true, [a, b](const Vec<D>& x, int order, FieldJet<D>& j) {
        for (int k = 0; k < D; ++k) {
          const double t = std::tanh(x(k));
          const double s2 = 1.0 - t * t;
          j.value(k) = a(k) + b(k) * t;
          if (order >= 1) j.jacobian(k, k) = b(k) * s2;
          if (order >= 2) j.hessian[k](k, k) = -2.0 * b(k) * s2 * t;
        }
      });
  f.divergence_bound = b.cwiseAbs().sum();
  return f;
}

/// Smooth drift of the nonlinear scenario: (-tanh x1 + c sin x2, -tanh x2 - c sin x1).
inline SmoothVectorField<2> tanh_rotation_drift(double c) {
  SmoothVectorField<2> f("tanh-rotation", {{"c", c}}, Regularity::CInfty, BoundConsts{std::sqrt(2.0) * (1 + c), 1 + c, 1 + c, 2 + c},
                         true, [c](const Vec<2>& x, int order, FieldJet<2>& j) {
                           const double t1 = std::tanh(x(0)), t2 = std::tanh(x(1));
                           const double s1 = 1 - t1 * t1, s2 = 1 - t2 * t2;
                           j.value << -t1 + c * std::sin(x(1)), -t2 - c * std::sin(x(0));
                           if (order >= 1) j.jacobian << -s1, c * std::cos(x(1)), -c * std::cos(x(0)), -s2;
                           if (order >= 2) {
                             j.hessian[0] << 2 * s1 * t1, 0, 0, -c * std::sin(x(1));
                             j.hessian[1] << c * std::sin(x(0)), 0, 0, 2 * s2 * t2;
                           }
                         });
  f.divergence_bound = 2.0;
  return f;
}

/// (-sign x2, sign x1) on closed quadrants, sign(0) = +1.
inline RoughDrift<2> rotation_bv_drift() {
  auto piece = [](bool right, bool upper) {
    Vec<2> v(upper ? -1.0 : 1.0, right ? 1.0 : -1.0);
    return DriftPiece<2>{[right, upper](const Vec<2>& x) { return (x(0) >= 0) == right && (x(1) >= 0) == upper; },
                         [v](const Vec<2>&) { return v; }, [](const Vec<2>&) { return Mat<2>::Zero().eval(); }};
  };
  RoughDrift<2> d("rotation-bv", nlohmann::json::object(),
                  {piece(true, true), piece(false, true), piece(false, false), piece(true, false)},
                  [](const Vec<2>&) { return 0.0; }, Growth{std::sqrt(2.0), 0.5}, DriftClass::BVloc);
  d.divergence_sup = 0.0;
  return d;
}

/// a |x|^(-1/2) (-x2, x1): divergence free, gradient ~ |x|^(-1/2), so |grad| log(2 + |grad|) is locally integrable.
inline RoughDrift<2> sobolev_log_drift(double a) {
  Mat<2> rot;
  rot << 0, -1, 1, 0;
  DriftPiece<2> off{[](const Vec<2>& x) { return x.squaredNorm() > 0.0; },
                    [a, rot](const Vec<2>& x) { return (a / std::sqrt(x.norm()) * (rot * x)).eval(); },
                    [a, rot](const Vec<2>& x) {
                      const double r = x.norm();
                      const double f = a / std::sqrt(r);
                      const double fr = -0.5 * a * std::pow(r, -1.5);
                      return (f * rot + (fr / r) * (rot * x) * x.transpose()).eval();
                    }};
  DriftPiece<2> origin{[](const Vec<2>&) { return true; }, [](const Vec<2>&) { return Vec<2>::Zero().eval(); }, {}};
  RoughDrift<2> d("sobolev-log", {{"a", a}}, {off, origin}, [](const Vec<2>&) { return 0.0; }, Growth{a, 0.5},
                  DriftClass::SobolevW11loc);
  d.divergence_sup = 0.0;
  return d;
}

/// Named d = 2 scenario: diffusion fields A_1..A_m and a smooth or rough drift.
struct Scenario {
  std::string name;
  int m = 0;
  std::vector<SmoothVectorField<2>> diffusion;
  std::optional<SmoothVectorField<2>> smooth_drift;
  std::optional<RoughDrift<2>> rough_drift;
  int default_mollify = 8;
  bool divergence_free = false;
  std::optional<Mat<2>> linear_B;  // drift is B x
  Vec<2> sigma = Vec<2>::Zero();   // constant diffusion direction when additive

  bool additive() const {
    for (const auto& f : diffusion)
      if (!f.is_constant()) return false;
    return true;
  }

  bool rough() const { return rough_drift.has_value(); }

  /// The drift actually integrated: the smooth drift itself, or the mollified rough drift at level n.
  SmoothVectorField<2> drift(int n = 0, const MollifierSpec<2>& spec = {}) const {
    if (smooth_drift) return *smooth_drift;
    return mollify_drift(*rough_drift, n > 0 ? n : default_mollify, spec);
  }

  Growth growth() const {
    if (rough_drift) return rough_drift->growth();
    return Growth{};
  }
};

inline const std::vector<std::string>& scenario_names() {
  static const std::vector<std::string> names{"zero",          "additive-linear", "ode-only",
                                              "smooth-nonlinear", "rotation-bv",  "sobolev-log"};
  return names;
}

inline Scenario make_scenario(const std::string& name) {
  Scenario s;
  s.name = name;
  if (name == "zero") {
    s.m = 1;
    s.diffusion = {constant_field<2>(Vec<2>::Zero())};
    s.smooth_drift = zero_field<2>();
    s.divergence_free = true;
  } else if (name == "additive-linear") {
    s.m = 1;
    s.sigma = Vec<2>(0.5, 0.0);
    s.diffusion = {constant_field<2>(s.sigma)};
    Mat<2> B;
    B << -0.5, -1.0, 1.0, -0.5;
    s.linear_B = B;
    s.smooth_drift = linear_field<2>(B);
  } else if (name == "ode-only") {
    s.m = 0;
    Mat<2> B = -Mat<2>::Identity();
    s.linear_B = B;
    s.smooth_drift = linear_field<2>(B);
  } else if (name == "smooth-nonlinear") {
    s.m = 1;
    s.diffusion = {tanh_saturated<2>(Vec<2>(0.6, 0.0), Vec<2>(0.3, 0.3))};
    s.smooth_drift = tanh_rotation_drift(0.5);
  } else if (name == "rotation-bv") {
    s.m = 1;
    s.sigma = Vec<2>(0.5, 0.0);
    s.diffusion = {constant_field<2>(s.sigma)};
    s.rough_drift = rotation_bv_drift();
    s.divergence_free = true;
  } else if (name == "sobolev-log") {
    s.m = 1;
    s.sigma = Vec<2>(0.25, 0.0);
    s.diffusion = {constant_field<2>(s.sigma)};
    s.rough_drift = sobolev_log_drift(0.5);
    s.divergence_free = true;
  } else {
    throw Error(ErrorKind::UnknownScenario, "no scenario named '" + name + "'");
  }
  return s;
}

}  // namespace roughflow
