#pragma once

#include "roughflow/brownian.hpp"
#include "roughflow/fields.hpp"
#include "roughflow/grid.hpp"

#include <limits>
#include <optional>
#include <vector>

namespace roughflow {

/// Point together with its first and (optionally) second variation.
/// H[a](b, c) = d^2 x^a / dx0_b dx0_c = d_c J_{ab}.
template <int D>
struct FlowState {
  Vec<D> x = Vec<D>::Zero();
  Mat<D> J = Mat<D>::Identity();
  Hess<D> H = zero_hess<D>();

  static FlowState at(const Vec<D>& x0) {
    FlowState s;
    s.x = x0;
    return s;
  }
};

namespace detail {

// acc += c * (A, grad A J, second variation of A) evaluated at s.
template <int D>
void accumulate(const SmoothVectorField<D>& f, const FlowState<D>& s, int order, double c, FlowState<D>& acc) {
  if (f.is_zero() || c == 0.0) return;
  const int need = f.is_constant() ? 0 : order;
  const FieldJet<D> j = f.jet(s.x, need);
  acc.x += c * j.value;
  if (need >= 1) acc.J += c * (j.jacobian * s.J);
  if (need >= 2) {
    for (int a = 0; a < D; ++a) {
      Mat<D> t = s.J.transpose() * j.hessian[a] * s.J;
      for (int k = 0; k < D; ++k) t += j.jacobian(a, k) * s.H[k];
      acc.H[a] += c * t;
    }
  }
}

template <int D>
FlowState<D> increment(const std::vector<SmoothVectorField<D>>& fields, const double* dw,
                       const SmoothVectorField<D>* drift, double h, const FlowState<D>& s, int order) {
  FlowState<D> g;
  g.J.setZero();
  for (std::size_t i = 0; i < fields.size(); ++i) accumulate(fields[i], s, order, dw[i], g);
  if (drift) accumulate(*drift, s, order, h, g);
  return g;
}

template <int D>
void axpy(FlowState<D>& y, double c, const FlowState<D>& g, int order) {
  y.x += c * g.x;
  if (order >= 1) y.J += c * g.J;
  if (order >= 2)
    for (int a = 0; a < D; ++a) y.H[a] += c * g.H[a];
}

template <int D>
bool finite(const FlowState<D>& s, int order) {
  if (!s.x.allFinite()) return false;
  if (order >= 1 && !s.J.allFinite()) return false;
  if (order >= 2)
    for (const auto& h : s.H)
      if (!h.allFinite()) return false;
  return true;
}

}  // namespace detail

/// One Stratonovich Heun step for x (order 0), x and J (order 1), or x, J and H (order 2).
/// `drift` may be null.
template <int D>
FlowState<D> heun_step(const FlowState<D>& s, const std::vector<SmoothVectorField<D>>& fields, const double* dw,
                       const SmoothVectorField<D>* drift, double h, int order = 1) {
  const FlowState<D> g0 = detail::increment(fields, dw, drift, h, s, order);
  FlowState<D> pred = s;
  detail::axpy(pred, 1.0, g0, order);
  const FlowState<D> g1 = detail::increment(fields, dw, drift, h, pred, order);
  FlowState<D> out = s;
  detail::axpy(out, 0.5, g0, order);
  detail::axpy(out, 0.5, g1, order);
  if (!detail::finite(out, order)) throw Error(ErrorKind::NonFinite, "heun step produced a non-finite state");
  return out;
}

template <int D>
struct FlowTrajectory {
  std::vector<double> times;
  std::vector<std::size_t> steps;
  std::vector<Vec<D>> states;
  std::vector<Mat<D>> jacobians;
  std::vector<Mat<D>> inverses;
  std::vector<double> dets;

  const Vec<D>& final_state() const { return states.back(); }
  const Mat<D>& final_jacobian() const { return jacobians.back(); }
};

struct FlowOptions {
  std::size_t stride = 1;      // store every stride-th step (the final step is always stored)
  std::size_t stop = 0;        // integrate up to this step; 0 means the whole path
  double det_floor = 1e-12;
};

namespace detail {

template <int D>
void record(FlowTrajectory<D>& tr, std::size_t k, double h, const FlowState<D>& s) {
  tr.times.push_back(k * h);
  tr.steps.push_back(k);
  tr.states.push_back(s.x);
  tr.jacobians.push_back(s.J);
  tr.inverses.push_back(s.J.inverse());
  tr.dets.push_back(s.J.determinant());
}

template <int D>
FlowTrajectory<D> integrate(const Vec<D>& x, const BrownianPath& path, const std::vector<SmoothVectorField<D>>& fields,
                            const SmoothVectorField<D>* drift, const FlowOptions& opt) {
  require(static_cast<int>(fields.size()) == path.m(), ErrorKind::InvalidArgument,
          "number of diffusion fields differs from path dimension");
  require(opt.stride >= 1, ErrorKind::InvalidArgument, "stride must be >= 1");
  const std::size_t n = opt.stop ? opt.stop : path.steps();
  require(n <= path.steps(), ErrorKind::InvalidArgument, "stop beyond path end");
  const SmoothVectorField<D>* dr = (drift && !drift->is_zero()) ? drift : nullptr;
  FlowTrajectory<D> tr;
  FlowState<D> s = FlowState<D>::at(x);
  record(tr, 0, path.h(), s);
  const double* inc = path.increments().data();
  for (std::size_t k = 0; k < n; ++k) {
    s = heun_step(s, fields, inc + k * path.m(), dr, path.h(), 1);
    const double det = s.J.determinant();
    if (!(std::abs(det) >= opt.det_floor))
      throw Error(ErrorKind::SingularJacobian, "|det J| fell below floor; reduce h");
    if ((k + 1) % opt.stride == 0 || k + 1 == n) record(tr, k + 1, path.h(), s);
  }
  return tr;
}

}  // namespace detail

/// Trajectory of the drift-free flow phi_t(x) with J_t, K_t = J_t^{-1}, det J_t.
template <int D>
FlowTrajectory<D> diffusion_flow(const Vec<D>& x, const BrownianPath& path,
                                 const std::vector<SmoothVectorField<D>>& fields, const FlowOptions& opt = {}) {
  return detail::integrate<D>(x, path, fields, nullptr, opt);
}

/// Full SDE with a smooth drift, same scheme.
template <int D>
FlowTrajectory<D> direct_flow(const Vec<D>& x, const BrownianPath& path, const std::vector<SmoothVectorField<D>>& fields,
                              const SmoothVectorField<D>& drift, const FlowOptions& opt = {}) {
  return detail::integrate<D>(x, path, fields, &drift, opt);
}

/// Endpoint (x, J) at step `stop` without storing the trajectory.
template <int D>
FlowState<D> flow_endpoint(const Vec<D>& x, const BrownianPath& path, const std::vector<SmoothVectorField<D>>& fields,
                           const SmoothVectorField<D>* drift, std::size_t stop, int order = 1) {
  const SmoothVectorField<D>* dr = (drift && !drift->is_zero()) ? drift : nullptr;
  FlowState<D> s = FlowState<D>::at(x);
  const double* inc = path.increments().data();
  for (std::size_t k = 0; k < stop; ++k) s = heun_step(s, fields, inc + k * path.m(), dr, path.h(), order);
  return s;
}

template <int D>
struct InversionResult {
  Vec<D> x = Vec<D>::Zero();
  double residual = 0.0;
  int iterations = 0;
};

/// Damped Newton for f(x) = y. `forward` returns (f(x), Df(x)).
template <int D, class Forward>
InversionResult<D> newton_invert(const Forward& forward, const Vec<D>& y, const Vec<D>& x0, double tol = 1e-8,
                                 int max_iter = 50) {
  InversionResult<D> r;
  r.x = x0;
  auto [fx, Jx] = forward(r.x);
  r.residual = (fx - y).norm();
  for (int it = 0; it < max_iter && r.residual > tol; ++it) {
    r.iterations = it + 1;
    const Vec<D> step = Jx.partialPivLu().solve(y - fx);
    double lambda = 1.0;
    bool accepted = false;
    for (int bt = 0; bt < 30; ++bt) {
      const Vec<D> xt = r.x + lambda * step;
      auto [ft, Jt] = forward(xt);
      const double res = (ft - y).norm();
      if (std::isfinite(res) && res < r.residual) {
        r.x = xt;
        fx = ft;
        Jx = Jt;
        r.residual = res;
        accepted = true;
        break;
      }
      lambda *= 0.5;
    }
    if (!accepted) break;
  }
  if (!(r.residual <= tol))
    throw Error(ErrorKind::NoConvergence, "newton inversion stalled at residual " + std::to_string(r.residual));
  return r;
}

/// Images of a node grid under phi at one step, used to seed inversions.
template <int D>
struct DiffusionSnapshot {
  TensorGrid<D> grid;
  std::size_t step = 0;
  std::vector<Vec<D>> image;
  std::vector<Mat<D>> K;
  double max_jacobian_norm = 0.0;
};

template <int D>
DiffusionSnapshot<D> diffusion_snapshot(const TensorGrid<D>& grid, const BrownianPath& path,
                                        const std::vector<SmoothVectorField<D>>& fields, std::size_t step) {
  DiffusionSnapshot<D> s;
  s.grid = grid;
  s.step = step;
  s.image.resize(grid.size());
  s.K.resize(grid.size());
  for (std::size_t i = 0; i < grid.size(); ++i) {
    const FlowState<D> e = flow_endpoint<D>(grid.node(i), path, fields, nullptr, step);
    s.image[i] = e.x;
    s.K[i] = e.J.inverse();
    s.max_jacobian_norm = std::max(s.max_jacobian_norm, e.J.norm());
  }
  return s;
}

/// Nearest image node; out-of-chart when y is farther than one cell image from every node.
template <int D>
std::size_t nearest_preimage(const std::vector<Vec<D>>& image, const TensorGrid<D>& grid, double max_jac,
                             const Vec<D>& y) {
  std::size_t best = 0;
  double bd = std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < image.size(); ++i) {
    const double d = (image[i] - y).squaredNorm();
    if (d < bd) {
      bd = d;
      best = i;
    }
  }
  const double reach = grid.spacing.norm() * std::max(1.0, max_jac);
  if (std::sqrt(bd) > reach) throw Error(ErrorKind::OutOfChart, "point lies outside the stored image grid");
  return best;
}

/// phi_t^{-1}(y) by Newton with exact re-integration of the forward map from the nearest stored preimage.
template <int D>
InversionResult<D> invert_point(const DiffusionSnapshot<D>& snap, const BrownianPath& path,
                                const std::vector<SmoothVectorField<D>>& fields, const Vec<D>& y, double tol = 1e-8) {
  const std::size_t i = nearest_preimage(snap.image, snap.grid, snap.max_jacobian_norm, y);
  auto forward = [&](const Vec<D>& x) {
    const FlowState<D> e = flow_endpoint<D>(x, path, fields, nullptr, snap.step);
    return std::make_pair(e.x, e.J);
  };
  return newton_invert<D>(forward, y, snap.grid.node(i), tol);
}

}  // namespace roughflow
