#pragma once

#include "roughflow/flow_analysis.hpp"

#include <cmath>
#include <functional>
#include <optional>
#include <string>
#include <vector>

namespace roughflow {

/// a (1 - |x - c|^2 / r^2)^3 on B(c, r), zero outside.
template <int D>
struct TestFunction {
  Vec<D> center = Vec<D>::Zero();
  double radius = 1.0;
  double amplitude = 1.0;

  double s_of(const Vec<D>& x) const { return (x - center).squaredNorm() / (radius * radius); }

  double value(const Vec<D>& x) const {
    const double s = s_of(x);
    if (s >= 1.0) return 0.0;
    const double q = 1.0 - s;
    return amplitude * q * q * q;
  }

  Vec<D> gradient(const Vec<D>& x) const {
    const double s = s_of(x);
    if (s >= 1.0) return Vec<D>::Zero();
    const double q = 1.0 - s;
    return amplitude * (-3.0 * q * q) * (2.0 / (radius * radius)) * (x - center);
  }

  Mat<D> hessian(const Vec<D>& x) const {
    const double s = s_of(x);
    if (s >= 1.0) return Mat<D>::Zero();
    const double q = 1.0 - s;
    const Vec<D> ds = (2.0 / (radius * radius)) * (x - center);
    return amplitude * (6.0 * q * ds * ds.transpose() - 3.0 * q * q * (2.0 / (radius * radius)) * Mat<D>::Identity());
  }

  /// L2 norm: |a| (|B_r| (d/2) B(d/2, 7))^{1/2}.
  double l2_norm() const {
    const double half = 0.5 * D;
    const double ball = std::pow(M_PI, half) / std::tgamma(half + 1.0) * std::pow(radius, D);
    return std::abs(amplitude) * std::sqrt(ball * half * std::beta(half, 7.0));
  }

  nlohmann::json to_json() const {
    return {{"center", std::vector<double>(center.data(), center.data() + D)}, {"radius", radius}, {"amplitude", amplitude}};
  }
};

/// Initial datum with an optional constant part c, so that (theta - c, g) is what gets integrated.
template <int D>
struct InitialDatum {
  std::string name;
  std::function<double(const Vec<D>&)> value;
  double constant = 0.0;
  double tolerance_scale = 1.0;  // looser tolerance for discontinuous data
};

template <int D>
InitialDatum<D> datum_constant(double c) {
  return {"constant", [c](const Vec<D>&) { return c; }, c, 1.0};
}

template <int D>
InitialDatum<D> datum_bump(const TestFunction<D>& b) {
  return {"bump", [b](const Vec<D>& x) { return b.value(x); }, 0.0, 1.0};
}

template <int D>
InitialDatum<D> datum_quadratic() {
  return {"quadratic", [](const Vec<D>& x) { return 1.0 + x.squaredNorm(); }, 0.0, 1.0};
}

template <int D>
InitialDatum<D> datum_indicator(const Vec<D>& c, double r) {
  return {"indicator", [c, r](const Vec<D>& x) { return (x - c).norm() < r ? 1.0 : 0.0; }, 0.0, 4.0};
}

/// theta(t, x) = theta0(X_t^{-1}(x)) with X_t^{-1} from the inverse flow on the time-t reversal.
template <int D>
std::vector<double> representation_solution(const InitialDatum<D>& theta0, const BrownianPath& path, std::size_t k,
                                            const std::vector<SmoothVectorField<D>>& fields,
                                            const SmoothVectorField<D>& drift, const std::vector<Vec<D>>& xs,
                                            const TensorGrid<D>& chart_nodes) {
  std::vector<double> out(xs.size());
  if (k == 0) {
    for (std::size_t i = 0; i < xs.size(); ++i) out[i] = theta0.value(xs[i]);
    return out;
  }
  const auto inv = inverse_flow<D>(truncate(path, k), fields, drift, xs, chart_nodes);
  for (std::size_t i = 0; i < xs.size(); ++i) out[i] = theta0.value(inv.X_T[i]);
  return out;
}

/// Cell midpoints of a cube of half width `half` around `center`, n per axis.
template <int D>
TensorGrid<D> midpoint_grid(const Vec<D>& center, double half, int n) {
  TensorGrid<D> g;
  g.spacing = Vec<D>::Constant(2.0 * half / n);
  g.lower = center - Vec<D>::Constant(half) + 0.5 * g.spacing;
  for (int a = 0; a < D; ++a) g.counts[a] = n;
  return g;
}

/// Midpoint grid around the test support, grown until no boundary cell centre has hits(z) true.
/// hits(z) should report whether the trajectory from z enters the test support at a stored time; the
/// hit set is assumed connected and to contain the support, as it does for a flow started at the identity.
template <int D, class Hits>
TensorGrid<D> covering_grid(const TestFunction<D>& f, double spacing, const Hits& hits, double max_half = 64.0) {
  require(spacing > 0.0, ErrorKind::InvalidArgument, "grid spacing must be positive");
  for (double half = f.radius + 1.0; half <= max_half * std::max(1.0, f.radius); half *= 1.5) {
    const int n = static_cast<int>(std::ceil(2.0 * half / spacing));
    const auto g = midpoint_grid<D>(f.center, 0.5 * n * spacing, n);
    bool clear = true;
    for (std::size_t i = 0; i < g.size() && clear; ++i) {
      const auto idx = g.unflat(i);
      bool edge = false;
      for (int a = 0; a < D; ++a) edge = edge || idx[a] == 0 || idx[a] == n - 1;
      if (edge && hits(g.node(i))) clear = false;
    }
    if (clear) return g;
  }
  throw Error(ErrorKind::Resolution, "trajectories reach the test support from beyond the largest covering grid");
}

/// Covering grid for the Lagrangian weak residual: grows over trajectories of the full flow.
template <int D>
TensorGrid<D> weak_residual_grid(const InitialDatum<D>& theta0, const TestFunction<D>& phi, const BrownianPath& path,
                                 const std::vector<SmoothVectorField<D>>& fields, const SmoothVectorField<D>& drift,
                                 double spacing) {
  return covering_grid<D>(phi, spacing, [&](const Vec<D>& z) {
    if (theta0.value(z) == theta0.constant) return false;
    for (const auto& x : direct_flow<D>(z, path, fields, drift).states)
      if (phi.s_of(x) < 1.0) return true;
    return false;
  });
}

struct WeakResidual {
  std::vector<double> times;
  std::vector<double> ito;            // left-point stochastic sums plus the correction term
  std::vector<double> stratonovich;   // midpoint stochastic sums
  double normalization = 1.0;
  double final_ito() const { return ito.back() / normalization; }
  double final_stratonovich() const { return stratonovich.back() / normalization; }
};

/// Both sides of the weak transport identity, tested against phi, with the inner products
/// (theta(s) - c, g) = int (theta0(z) - c) g(X_s(z)) det DX_s(z) dz over the initial grid z.
template <int D>
WeakResidual ito_weak_residual(const InitialDatum<D>& theta0, const TestFunction<D>& phi, const BrownianPath& path,
                               const std::vector<SmoothVectorField<D>>& fields, const SmoothVectorField<D>& drift,
                               const TensorGrid<D>& zgrid) {
  for (const auto& f : fields)
    require(f.is_constant() || f.has_hessian(), ErrorKind::MissingHessian,
            "weak transport residual needs second derivatives of '" + f.name() + "'");
  const std::size_t n = path.steps();
  const int m = path.m();
  std::vector<double> I_phi(n + 1, 0.0), I_corr(n + 1, 0.0), I_drift(n + 1, 0.0);
  std::vector<std::vector<double>> I_noise(m, std::vector<double>(n + 1, 0.0));
  double theta_sq = 0.0;
  for (std::size_t zi = 0; zi < zgrid.size(); ++zi) {
    const Vec<D> z = zgrid.node(zi);
    const double w = zgrid.cell_volume();
    const double a = theta0.value(z) - theta0.constant;
    theta_sq += theta0.value(z) * theta0.value(z) * w;
    if (a == 0.0) continue;
    const auto tr = direct_flow<D>(z, path, fields, drift);
    for (std::size_t k = 0; k <= n; ++k) {
      const Vec<D>& x = tr.states[k];
      if (phi.s_of(x) >= 1.0) continue;
      const double c = a * w * std::abs(tr.dets[k]);
      const double pv = phi.value(x);
      const Vec<D> pg = phi.gradient(x);
      const Mat<D> ph = phi.hessian(x);
      I_phi[k] += c * pv;
      for (int i = 0; i < m; ++i) {
        const auto& A = fields[i];
        const FieldJet<D> j = A.jet(x, A.is_constant() ? 0 : 2);
        const double divA = j.jacobian.trace();
        // g = div(phi A) = <grad phi, A> + phi div A
        const double g = pg.dot(j.value) + pv * divA;
        // grad g = H phi A + (grad A)^T grad phi + div A grad phi + phi grad(div A)
        Vec<D> grad_divA = Vec<D>::Zero();
        for (int b = 0; b < D; ++b)
          for (int l = 0; l < D; ++l) grad_divA(l) += j.hessian[b](b, l);
        const Vec<D> grad_g = ph * j.value + j.jacobian.transpose() * pg + divA * pg + pv * grad_divA;
        I_noise[i][k] += c * g;
        I_corr[k] += c * 0.5 * (grad_g.dot(j.value) + g * divA);
      }
      if (!drift.is_zero()) {
        const FieldJet<D> j0 = drift.jet(x, 1);
        I_drift[k] += c * (pg.dot(j0.value) + pv * j0.jacobian.trace());
      }
    }
  }
  WeakResidual r;
  r.normalization = std::sqrt(theta_sq) * phi.l2_norm();
  double ito = 0.0, strat = 0.0, dt = 0.0;
  r.times.push_back(0.0);
  r.ito.push_back(0.0);
  r.stratonovich.push_back(0.0);
  const double h = path.h();
  for (std::size_t k = 0; k < n; ++k) {
    for (int i = 0; i < m; ++i) {
      ito += I_noise[i][k] * path.dw(k, i);
      strat += 0.5 * (I_noise[i][k] + I_noise[i][k + 1]) * path.dw(k, i);
    }
    dt += 0.5 * h * (I_drift[k] + I_drift[k + 1]);
    ito += 0.5 * h * (I_corr[k] + I_corr[k + 1]);
    const double lhs = I_phi[k + 1] - I_phi[0];
    r.times.push_back((k + 1) * h);
    r.ito.push_back(std::abs(lhs - ito - dt));
    r.stratonovich.push_back(std::abs(lhs - strat - dt));
  }
  return r;
}

/// (theta(T), phi) two ways: Eulerian quadrature of theta0(X_T^{-1}(x)) phi(x) over the support of
/// phi, and the Lagrangian form over the initial grid.
template <int D>
std::pair<double, double> eulerian_lagrangian_pair(const InitialDatum<D>& theta0, const TestFunction<D>& phi,
                                                   const BrownianPath& path,
                                                   const std::vector<SmoothVectorField<D>>& fields,
                                                   const SmoothVectorField<D>& drift, const TensorGrid<D>& zgrid,
                                                   int xs_per_axis, const TensorGrid<D>& chart_nodes) {
  const auto xg = midpoint_grid<D>(phi.center, phi.radius, xs_per_axis);
  std::vector<Vec<D>> xs;
  for (std::size_t i = 0; i < xg.size(); ++i)
    if (phi.s_of(xg.node(i)) < 1.0) xs.push_back(xg.node(i));
  const auto th = representation_solution<D>(theta0, path, path.steps(), fields, drift, xs, chart_nodes);
  double eul = 0.0;
  for (std::size_t i = 0; i < xs.size(); ++i) eul += th[i] * phi.value(xs[i]) * xg.cell_volume();
  double lag = 0.0;
  for (std::size_t zi = 0; zi < zgrid.size(); ++zi) {
    const Vec<D> z = zgrid.node(zi);
    const double a = theta0.value(z);
    if (a == 0.0) continue;
    const auto e = flow_endpoint<D>(z, path, fields, &drift, path.steps());
    lag += a * phi.value(e.x) * std::abs(e.J.determinant()) * zgrid.cell_volume();
  }
  return {eul, lag};
}

struct RandomTransportResidual {
  std::vector<double> times;
  std::vector<double> residual;
  double normalization = 1.0;
  double final_normalized() const { return residual.back() / normalization; }
};

/// u_t = theta_t(phi_t) against psi: (u_t - c, psi) = int (theta0(z) - c) psi(Y_t(z)) rho_t(z) dz and the
/// drift term int (theta0 - c)(<grad psi, A~0> + psi div A~0)(Y_s(z)) rho_s(z) dz, trapezoid in s.
template <int D>
RandomTransportResidual random_transport_check(const InitialDatum<D>& theta0, const TestFunction<D>& psi,
                                               DiffusionFrame<D>& frame, const SmoothVectorField<D>& drift,
                                               const TensorGrid<D>& zgrid) {
  std::vector<Vec<D>> zs;
  std::vector<double> a;
  double theta_sq = 0.0;
  for (std::size_t zi = 0; zi < zgrid.size(); ++zi) {
    const double v = theta0.value(zgrid.node(zi));
    theta_sq += v * v * zgrid.cell_volume();
    if (v - theta0.constant == 0.0) continue;
    zs.push_back(zgrid.node(zi));
    a.push_back((v - theta0.constant) * zgrid.cell_volume());
  }
  std::vector<double> I_psi, I_div;
  auto observe = [&](std::size_t, const DiffusionFrame<D>& fr, const std::vector<Vec<D>>& Y,
                     const std::vector<double>& lr) {
    double ip = 0.0, id = 0.0;
    for (std::size_t p = 0; p < Y.size(); ++p) {
      if (psi.s_of(Y[p]) >= 1.0) continue;
      const double c = a[p] * std::exp(lr[p]);
      const auto tv = transformed_from_sample(fr.sample(Y[p], 0.0), drift, true);
      ip += c * psi.value(Y[p]);
      id += c * (psi.gradient(Y[p]).dot(tv.value) + psi.value(Y[p]) * tv.divergence);
    }
    I_psi.push_back(ip);
    I_div.push_back(id);
  };
  if (!zs.empty()) lagrangian_flow<D>(zs, std::vector<double>(zs.size(), 1.0), frame, drift, {}, observe);
  RandomTransportResidual r;
  r.normalization = std::sqrt(theta_sq) * psi.l2_norm();
  const double h = frame.path().h();
  const std::size_t n = frame.path().steps();
  r.times.push_back(0.0);
  r.residual.push_back(0.0);
  double integral = 0.0;
  for (std::size_t k = 0; k < n; ++k) {
    r.times.push_back((k + 1) * h);
    if (zs.empty()) {
      r.residual.push_back(0.0);
      continue;
    }
    integral += 0.5 * h * (I_div[k] + I_div[k + 1]);
    r.residual.push_back(std::abs(I_psi[k + 1] - I_psi[0] - integral));
  }
  return r;
}

struct DensityEvolutionReport {
  double two_way_relative_error = 0.0;  // rho~ by the explicit density vs by |det K|
  double residual = 0.0;                // weak form, normalized
  nlohmann::json to_json() const {
    return {{"two_way_relative_error", two_way_relative_error}, {"residual", residual}};
  }
};

/// Diffusion-only continuity equation against psi at the final time. rho~_T on a midpoint grid over
/// supp psi is computed as 1 / rho_T(phi_T^{-1}(x)) with rho_T = exp(sum div A_i(phi_s) o dw) and
/// cross-checked against |det K_T(phi_T^{-1}(x))|; the stochastic integral uses the push-forward form
/// (rho~_s, A_i . grad psi) = int (A_i . grad psi)(phi_s(z)) dz with midpoint sums over a covering z grid.
template <int D>
DensityEvolutionReport density_evolution_check(const BrownianPath& path, const std::vector<SmoothVectorField<D>>& fields,
                                               const TestFunction<D>& psi, int xs_per_axis, double z_spacing,
                                               const DiffusionSnapshot<D>& snap) {
  DensityEvolutionReport rep;
  const std::size_t n = path.steps();
  const auto xg = midpoint_grid<D>(psi.center, psi.radius, xs_per_axis);
  double lhs = 0.0, support = 0.0;
  for (std::size_t i = 0; i < xg.size(); ++i) {
    const Vec<D> x = xg.node(i);
    if (psi.s_of(x) >= 1.0) continue;
    const Vec<D> z = fields.empty() ? x : invert_point<D>(snap, path, fields, x).x;
    const auto tr = diffusion_flow<D>(z, path, fields);
    double log_rho = 0.0;
    for (std::size_t k = 0; k < n; ++k) {
      const Vec<D> mid = 0.5 * (tr.states[k] + tr.states[k + 1]);
      for (std::size_t j = 0; j < fields.size(); ++j)
        if (!fields[j].is_constant()) log_rho += fields[j].divergence(mid) * path.dw(k, static_cast<int>(j));
    }
    const double rt_explicit = std::exp(-log_rho);
    const double rt_liouville = std::abs(1.0 / tr.dets.back());
    rep.two_way_relative_error = std::max(rep.two_way_relative_error, std::abs(rt_explicit / rt_liouville - 1.0));
    lhs += (rt_explicit - 1.0) * psi.value(x) * xg.cell_volume();
    support += xg.cell_volume();
  }
  // stochastic side; the constant part of rho~_0 = 1 cancels against the divergence form
  const auto zgrid = covering_grid<D>(psi, z_spacing, [&](const Vec<D>& z) {
    for (const auto& y : diffusion_flow<D>(z, path, fields).states)
      if (psi.s_of(y) < 1.0) return true;
    return false;
  });
  double rhs = 0.0;
  for (std::size_t zi = 0; zi < zgrid.size(); ++zi) {
    const auto tr = diffusion_flow<D>(zgrid.node(zi), path, fields);
    auto g = [&](std::size_t k, std::size_t j) {
      const Vec<D>& y = tr.states[k];
      if (psi.s_of(y) >= 1.0) return 0.0;
      return fields[j].value(y).dot(psi.gradient(y));
    };
    for (std::size_t k = 0; k < n; ++k)
      for (std::size_t j = 0; j < fields.size(); ++j)
        rhs += 0.5 * (g(k, j) + g(k + 1, j)) * path.dw(k, static_cast<int>(j)) * zgrid.cell_volume();
  }
  rep.residual = std::abs(lhs - rhs) / (psi.l2_norm() * std::sqrt(support));
  return rep;
}

}  // namespace roughflow
