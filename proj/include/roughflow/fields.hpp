#pragma once

#include "roughflow/core.hpp"

#include <boost/math/quadrature/gauss_kronrod.hpp>
#include <json.hpp>

#include <functional>
#include <limits>
#include <memory>
#include <optional>
#include <string>
#include <utility>
#include <vector>

namespace roughflow {

enum class Regularity { Cb3plus, CInfty };

inline const char* to_string(Regularity r) { return r == Regularity::Cb3plus ? "Cb3plus" : "CInfty"; }

/// Sup-norm bounds of a field and its first three derivative orders; infinity when unbounded.
struct BoundConsts {
  double value = std::numeric_limits<double>::infinity();
  double first = std::numeric_limits<double>::infinity();
  double second = std::numeric_limits<double>::infinity();
  double third = std::numeric_limits<double>::infinity();
};

template <int D>
struct FieldJet {
  Vec<D> value = Vec<D>::Zero();
  Mat<D> jacobian = Mat<D>::Zero();
  Hess<D> hessian = zero_hess<D>();
};

/// Closed-form smooth field. The jet function fills value, plus jacobian when
/// order >= 1 and hessian when order >= 2.
template <int D>
class SmoothVectorField {
 public:
  using JetFn = std::function<void(const Vec<D>&, int, FieldJet<D>&)>;

  SmoothVectorField() : SmoothVectorField("zero", nlohmann::json::object(), Regularity::CInfty,
                                          BoundConsts{0, 0, 0, 0}, true, [](const Vec<D>&, int, FieldJet<D>&) {}) {
    constant_ = true;
    zero_ = true;
    divergence_bound = 0.0;
  }

  SmoothVectorField(std::string name, nlohmann::json params, Regularity reg, BoundConsts bounds, bool has_hessian,
                    JetFn fn)
      : name_(std::move(name)),
        params_(std::move(params)),
        regularity_(reg),
        bounds_(bounds),
        has_hessian_(has_hessian),
        fn_(std::move(fn)) {}

  FieldJet<D> jet(const Vec<D>& x, int order) const {
    if (order >= 2 && !has_hessian_) throw Error(ErrorKind::MissingHessian, "field '" + name_ + "' has no hessian");
    FieldJet<D> j;
    fn_(x, order, j);
    return j;
  }

  Vec<D> value(const Vec<D>& x) const { return jet(x, 0).value; }
  Mat<D> jacobian(const Vec<D>& x) const { return jet(x, 1).jacobian; }
  Hess<D> hessian(const Vec<D>& x) const { return jet(x, 2).hessian; }
  double divergence(const Vec<D>& x) const { return jacobian(x).trace(); }

  const std::string& name() const { return name_; }
  const nlohmann::json& params() const { return params_; }
  Regularity regularity() const { return regularity_; }
  const BoundConsts& bounds() const { return bounds_; }
  bool has_hessian() const { return has_hessian_; }
  bool is_constant() const { return constant_; }
  bool is_zero() const { return zero_; }

  SmoothVectorField& mark_constant(bool zero = false) {
    constant_ = true;
    zero_ = zero;
    return *this;
  }

  nlohmann::json descriptor() const { return {{"name", name_}, {"dim", D}, {"params", params_}}; }

  SmoothVectorField negated() const {
    JetFn inner = fn_;
    SmoothVectorField out("-" + name_, params_, regularity_, bounds_, has_hessian_,
                          [inner](const Vec<D>& x, int order, FieldJet<D>& j) {
                            inner(x, order, j);
                            j.value = -j.value;
                            j.jacobian = -j.jacobian;
                            for (auto& h : j.hessian) h = -h;
                          });
    out.constant_ = constant_;
    out.zero_ = zero_;
    out.divergence_bound = divergence_bound;
    return out;
  }

  /// Global sup of |div| when known.
  std::optional<double> divergence_bound;

 private:
  std::string name_;
  nlohmann::json params_;
  Regularity regularity_;
  BoundConsts bounds_;
  bool has_hessian_;
  bool constant_ = false;
  bool zero_ = false;
  JetFn fn_;
};

template <int D>
SmoothVectorField<D> zero_field() {
  return SmoothVectorField<D>();
}

template <int D>
SmoothVectorField<D> constant_field(const Vec<D>& c) {
  SmoothVectorField<D> f("constant", {{"c", std::vector<double>(c.data(), c.data() + D)}}, Regularity::CInfty,
                         BoundConsts{c.norm(), 0, 0, 0}, true,
                         [c](const Vec<D>&, int, FieldJet<D>& j) { j.value = c; });
  f.mark_constant(c.isZero(0.0));
  f.divergence_bound = 0.0;
  return f;
}

/// A(x) = B x + c.
template <int D>
SmoothVectorField<D> linear_field(const Mat<D>& B, const Vec<D>& c = Vec<D>::Zero()) {
  std::vector<double> flat(B.data(), B.data() + D * D);
  SmoothVectorField<D> f("linear", {{"B_colmajor", flat}, {"c", std::vector<double>(c.data(), c.data() + D)}},
                         Regularity::CInfty, BoundConsts{std::numeric_limits<double>::infinity(), B.norm(), 0, 0}, true,
                         [B, c](const Vec<D>& x, int order, FieldJet<D>& j) {
                           j.value = B * x + c;
                           if (order >= 1) j.jacobian = B;
                         });
  f.divergence_bound = std::abs(B.trace());
  return f;
}

enum class DriftClass { Smooth, SobolevW11loc, BVloc };

inline const char* to_string(DriftClass c) {
  switch (c) {
    case DriftClass::Smooth: return "Smooth";
    case DriftClass::SobolevW11loc: return "SobolevW11loc";
    case DriftClass::BVloc: return "BVloc";
  }
  return "?";
}

template <int D>
struct DriftPiece {
  std::function<bool(const Vec<D>&)> region;
  std::function<Vec<D>(const Vec<D>&)> value;
  std::function<Mat<D>(const Vec<D>&)> jacobian;  // empty where the piece has no classical derivative
};

/// |A(x)| <= C (1 + |x|^(1 - eps0)).
struct Growth {
  double C = 0.0;
  double eps0 = 0.5;
};

/// Drift defined off a null set by closed-form pieces on predicate regions.
template <int D>
class RoughDrift {
 public:
  RoughDrift(std::string name, nlohmann::json params, std::vector<DriftPiece<D>> pieces,
             std::function<double(const Vec<D>&)> divergence_density, Growth growth, DriftClass cls)
      : name_(std::move(name)),
        params_(std::move(params)),
        pieces_(std::move(pieces)),
        div_(std::move(divergence_density)),
        growth_(growth),
        class_(cls) {}

  const DriftPiece<D>& piece_at(const Vec<D>& x) const {
    for (const auto& p : pieces_)
      if (p.region(x)) return p;
    throw Error(ErrorKind::InvalidArgument, "drift '" + name_ + "' undefined at query point");
  }

  Vec<D> value(const Vec<D>& x) const { return piece_at(x).value(x); }

  std::optional<Mat<D>> jacobian(const Vec<D>& x) const {
    const auto& p = piece_at(x);
    if (!p.jacobian) return std::nullopt;
    return p.jacobian(x);
  }

  double divergence_density(const Vec<D>& x) const { return div_(x); }

  const std::string& name() const { return name_; }
  const nlohmann::json& params() const { return params_; }
  const Growth& growth() const { return growth_; }
  void set_growth(Growth g) { growth_ = g; }
  DriftClass drift_class() const { return class_; }
  nlohmann::json descriptor() const { return {{"name", name_}, {"dim", D}, {"params", params_}}; }

  /// Caller-supplied global bound on |div|; absent when only locally bounded.
  std::optional<double> divergence_sup;

 private:
  std::string name_;
  nlohmann::json params_;
  std::vector<DriftPiece<D>> pieces_;
  std::function<double(const Vec<D>&)> div_;
  Growth growth_;
  DriftClass class_;
};

/// Bump kernel on the unit ball and radial cutoff equal to 1 on B(1), 0 off B(2).
template <int D>
struct MollifierSpec {
  int quadrature_points_per_axis = 17;
  double kernel_support = 1.0;

  static double bump(double r2) { return r2 < 1.0 ? std::exp(-1.0 / (1.0 - r2)) : 0.0; }

  /// Integral of the unnormalized bump over R^D by a radial Gauss-Kronrod rule.
  static double bump_mass() {
    static const double mass = [] {
      using boost::math::quadrature::gauss_kronrod;
      auto radial = [](double r) { return std::pow(r, D - 1) * bump(r * r); };
      const double sphere = D * unit_ball_volume(D);
      return sphere * gauss_kronrod<double, 61>::integrate(radial, 0.0, 1.0, 15, 1e-14);
    }();
    return mass;
  }

  static double kernel(const Vec<D>& z) { return bump(z.squaredNorm()) / bump_mass(); }

  static Vec<D> kernel_gradient(const Vec<D>& z) {
    const double r2 = z.squaredNorm();
    if (r2 >= 1.0) return Vec<D>::Zero();
    const double q = 1.0 - r2;
    return bump(r2) / bump_mass() * (-2.0 / (q * q)) * z;
  }

  static double cutoff_profile(double r) {
    if (r <= 1.0) return 1.0;
    if (r >= 2.0) return 0.0;
    const double a = std::exp(-1.0 / (2.0 - r));
    const double b = std::exp(-1.0 / (r - 1.0));
    return a / (a + b);
  }

  static double cutoff_profile_derivative(double r) {
    if (r <= 1.0 || r >= 2.0) return 0.0;
    const double u = 2.0 - r, v = r - 1.0;
    const double fu = std::exp(-1.0 / u), fv = std::exp(-1.0 / v);
    const double dfu = fu / (u * u), dfv = fv / (v * v);
    return -(dfu * fv + fu * dfv) / ((fu + fv) * (fu + fv));
  }

  static double cutoff(const Vec<D>& x) { return cutoff_profile(x.norm()); }

  /// sup |grad cutoff|, by dense sampling of the radial profile.
  static double cutoff_gradient_sup() {
    static const double sup = [] {
      double s = 0.0;
      const int n = 200000;
      for (int i = 1; i < n; ++i) s = std::max(s, std::abs(cutoff_profile_derivative(1.0 + double(i) / n)));
      return s;
    }();
    return sup;
  }
};

namespace detail {

template <int D>
struct MollifierNodes {
  std::vector<Vec<D>> z;
  std::vector<double> w;
  std::vector<Vec<D>> gw;
};

template <int D>
MollifierNodes<D> mollifier_nodes(int q) {
  MollifierNodes<D> nodes;
  const double cell = 2.0 / q;
  const double vol = std::pow(cell, D);
  std::array<int, D> idx{};
  double wsum = 0.0;
  while (true) {
    Vec<D> z;
    for (int a = 0; a < D; ++a) z(a) = -1.0 + cell * (idx[a] + 0.5);
    if (z.squaredNorm() < 1.0) {
      nodes.z.push_back(z);
      nodes.w.push_back(MollifierSpec<D>::kernel(z) * vol);
      nodes.gw.push_back(MollifierSpec<D>::kernel_gradient(z) * vol);
      wsum += nodes.w.back();
    }
    int a = D - 1;
    while (a >= 0 && ++idx[a] == q) idx[a--] = 0;
    if (a < 0) break;
  }
  // discrete weights renormalized so constants are reproduced exactly
  for (auto& w : nodes.w) w /= wsum;
  for (auto& g : nodes.gw) g /= wsum;
  return nodes;
}

}  // namespace detail

/// A0^n = cutoff(x / n) * (A0 * chi_n), chi_n of radius 1/n, by tensor midpoint quadrature.
template <int D>
SmoothVectorField<D> mollify_drift(const RoughDrift<D>& drift, int n, const MollifierSpec<D>& spec = {}) {
  require(n >= 1, ErrorKind::InvalidArgument, "mollification level must be >= 1");
  require(spec.kernel_support <= 1.0, ErrorKind::InvalidArgument, "kernel support exceeds the unit-ball contract");
  require(spec.quadrature_points_per_axis >= 1, ErrorKind::InvalidArgument, "quadrature points must be positive");
  auto nodes = std::make_shared<const detail::MollifierNodes<D>>(detail::mollifier_nodes<D>(spec.quadrature_points_per_axis));
  auto src = std::make_shared<const RoughDrift<D>>(drift);
  const double nn = n;
  auto fn = [nodes, src, nn](const Vec<D>& x, int order, FieldJet<D>& j) {
    const double r = x.norm() / nn;
    if (r >= 2.0) return;
    Vec<D> conv = Vec<D>::Zero();
    Mat<D> dconv = Mat<D>::Zero();
    const std::size_t nq = nodes->z.size();
    for (std::size_t q = 0; q < nq; ++q) {
      const Vec<D> a = src->value(x - nodes->z[q] / nn);
      conv += nodes->w[q] * a;
      if (order >= 1) dconv += nn * a * nodes->gw[q].transpose();
    }
    const double cut = MollifierSpec<D>::cutoff_profile(r);
    j.value = cut * conv;
    if (order >= 1) {
      j.jacobian = cut * dconv;
      if (r > 1.0) {
        const Vec<D> gcut = MollifierSpec<D>::cutoff_profile_derivative(r) / (nn * nn * r) * x;
        j.jacobian += conv * gcut.transpose();
      }
    }
  };
  SmoothVectorField<D> out("mollified:" + drift.name(),
                           {{"n", n}, {"quadrature_points_per_axis", spec.quadrature_points_per_axis},
                            {"drift", drift.descriptor()}},
                           Regularity::CInfty, BoundConsts{}, false, fn);
  if (drift.divergence_sup)
    out.divergence_bound = 3.0 * drift.growth().C * MollifierSpec<D>::cutoff_gradient_sup() + *drift.divergence_sup;
  return out;
}

/// Uniform bound 3 C |grad cutoff|_inf + |div A0|_inf on div of every mollified drift.
template <int D>
double mollified_divergence_bound(const RoughDrift<D>& drift, const MollifierSpec<D>& = {}) {
  if (!drift.divergence_sup)
    throw Error(ErrorKind::UnboundedDivergence, "drift '" + drift.name() + "' has no global divergence bound");
  return 3.0 * drift.growth().C * MollifierSpec<D>::cutoff_gradient_sup() + *drift.divergence_sup;
}

struct GrowthReport {
  double max_ratio = 0.0;
  double C = 0.0;
  double eps0 = 0.0;
  bool within = true;
  nlohmann::json to_json() const { return {{"max_ratio", max_ratio}, {"C", C}, {"eps0", eps0}, {"within", within}}; }
};

/// Uniform sample in B(radius) keyed by (seed, i).
template <int D>
Vec<D> sample_ball(std::uint64_t seed, std::uint64_t i, double radius) {
  Vec<D> g;
  for (int a = 0; a < D; ++a) g(a) = hash_normal(seed, 0xba11, i, a);
  const double u = hash_uniform(hash_key(seed, 0xba12, i, 0));
  const double nrm = g.norm();
  if (nrm == 0.0) return Vec<D>::Zero();
  return g / nrm * radius * std::pow(u, 1.0 / D);
}

/// Max over samples in B(radius) of |f(x)| / (1 + |x|^(1 - eps0)). Violations are reported, never thrown.
template <int D, class F>
GrowthReport growth_report(const F& field, double C, double eps0, int sample_count, double radius,
                           std::uint64_t seed = 1) {
  require(sample_count >= 1, ErrorKind::InvalidArgument, "sample_count must be >= 1");
  GrowthReport rep;
  rep.C = C;
  rep.eps0 = eps0;
  for (int i = 0; i < sample_count; ++i) {
    const Vec<D> x = sample_ball<D>(seed, i, radius);
    const double ratio = field(x).norm() / (1.0 + std::pow(x.norm(), 1.0 - eps0));
    rep.max_ratio = std::max(rep.max_ratio, ratio);
  }
  rep.within = rep.max_ratio <= C;
  return rep;
}

}  // namespace roughflow
