#pragma once

#include "roughflow/frame.hpp"

#include <functional>
#include <optional>
#include <vector>

namespace roughflow {

// ---------------------------------------------------------------------------
// Transformed drift K_t A0(phi_t) and its divergence

template <int D>
struct TransformedValue {
  Vec<D> value = Vec<D>::Zero();
  double divergence = 0.0;
};

/// From a frame sample: value K A0(phi), divergence <div K, A0(phi)> + div A0(phi).
template <int D>
TransformedValue<D> transformed_from_sample(const FrameSample<D>& s, const SmoothVectorField<D>& drift, bool with_div) {
  TransformedValue<D> out;
  if (drift.is_zero()) return out;
  const FieldJet<D> j = drift.jet(s.phi, with_div ? 1 : 0);
  out.value = s.K * j.value;
  if (with_div) out.divergence = s.divK().dot(j.value) + j.jacobian.trace();
  return out;
}

template <int D>
Vec<D> transformed_drift(const DiffusionFrame<D>& frame, double theta, const Vec<D>& x,
                         const SmoothVectorField<D>& drift) {
  return transformed_from_sample(frame.sample(x, theta), drift, false).value;
}

template <int D>
double transformed_divergence(const DiffusionFrame<D>& frame, double theta, const Vec<D>& x,
                              const SmoothVectorField<D>& drift) {
  return transformed_from_sample(frame.sample(x, theta), drift, true).divergence;
}

/// Jacobian of K A0(phi): sum_c d_b K_{ac} A_c + (K grad A0(phi) J)_{ab}.
template <int D>
Mat<D> transformed_jacobian(const FrameSample<D>& s, const SmoothVectorField<D>& drift) {
  if (drift.is_zero()) return Mat<D>::Zero();
  const FieldJet<D> j = drift.jet(s.phi, 1);
  Mat<D> out = s.K * j.jacobian * s.J;
  for (int b = 0; b < D; ++b) {
    Mat<D> dbJ;
    for (int a = 0; a < D; ++a)
      for (int c = 0; c < D; ++c) dbJ(a, c) = s.dJ[a](c, b);
    out.col(b) += -s.K * dbJ * s.K * j.value;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Calculus identities on a fixed diffeomorphism

template <int D>
struct Diffeo {
  std::function<Vec<D>(const Vec<D>&)> map;
  std::function<Mat<D>(const Vec<D>&)> jacobian;
};

/// phi(x) = x + eps sin(x) componentwise.
template <int D>
Diffeo<D> sine_diffeo(double eps) {
  Diffeo<D> d;
  d.map = [eps](const Vec<D>& x) { return Vec<D>(x + eps * x.array().sin().matrix()); };
  d.jacobian = [eps](const Vec<D>& x) {
    Mat<D> J = Mat<D>::Zero();
    for (int a = 0; a < D; ++a) J(a, a) = 1.0 + eps * std::cos(x(a));
    return J;
  };
  return d;
}

template <int D>
Diffeo<D> linear_diffeo(const Mat<D>& A, const Vec<D>& c = Vec<D>::Zero()) {
  return {[A, c](const Vec<D>& x) { return Vec<D>(A * x + c); }, [A](const Vec<D>&) { return A; }};
}

struct IdentityResidual {
  double max_residual = 0.0;
  std::size_t points = 0;
  nlohmann::json to_json() const { return {{"max_residual", max_residual}, {"points", points}}; }
};

namespace detail {

template <int D, class F>
auto central_partial(const F& f, const Vec<D>& x, int l, double step) {
  Vec<D> xp = x, xm = x;
  xp(l) += step;
  xm(l) -= step;
  return ((f(xp) - f(xm)) / (2.0 * step)).eval();
}

template <int D>
double central_partial_scalar(const std::function<double(const Vec<D>&)>& f, const Vec<D>& x, int l, double step) {
  Vec<D> xp = x, xm = x;
  xp(l) += step;
  xm(l) -= step;
  return (f(xp) - f(xm)) / (2.0 * step);
}

}  // namespace detail

/// max over points of the largest entry of FD grad(b o phi) - (grad b)(phi) J_phi.
template <int D>
IdentityResidual check_bv_chain_rule(const SmoothVectorField<D>& b, const Diffeo<D>& phi,
                                     const std::vector<Vec<D>>& points, double step = 1e-4) {
  IdentityResidual r;
  auto comp = [&](const Vec<D>& x) { return b.value(phi.map(x)); };
  for (const auto& x : points) {
    Mat<D> fd;
    for (int l = 0; l < D; ++l) fd.col(l) = detail::central_partial<D>(comp, x, l, step);
    const Mat<D> exact = b.jacobian(phi.map(x)) * phi.jacobian(x);
    r.max_residual = std::max(r.max_residual, (fd - exact).cwiseAbs().maxCoeff());
    ++r.points;
  }
  return r;
}

struct DetIdentityReport {
  IdentityResidual lemma;  // grad det J = -det J J^T div(K)
  IdentityResidual jacobi; // d_l det J = det J sum K_{ji} d_l J_{ij}
  nlohmann::json to_json() const { return {{"det_gradient", lemma.to_json()}, {"jacobi", jacobi.to_json()}}; }
};

/// Both sides of each identity with central differences for the outer derivatives.
template <int D>
DetIdentityReport check_det_gradient_identity(const Diffeo<D>& phi, const std::vector<Vec<D>>& points,
                                              double step = 1e-4) {
  DetIdentityReport rep;
  const std::function<double(const Vec<D>&)> det = [&](const Vec<D>& x) {
    const double d = phi.jacobian(x).determinant();
    if (!(std::abs(d) >= 1e-12)) throw Error(ErrorKind::SingularJacobian, "det J below 1e-12");
    return d;
  };
  auto K = [&](const Vec<D>& x) { return Mat<D>(phi.jacobian(x).inverse()); };
  for (const auto& x : points) {
    const Mat<D> J = phi.jacobian(x);
    const Mat<D> Kx = J.inverse();
    const double dx = det(x);
    Vec<D> grad_det, divK = Vec<D>::Zero();
    for (int l = 0; l < D; ++l) {
      grad_det(l) = detail::central_partial_scalar<D>(det, x, l, step);
      const Mat<D> dK = detail::central_partial<D>(K, x, l, step);
      for (int i = 0; i < D; ++i) divK(i) += dK(l, i);
    }
    const Vec<D> lemma_rhs = -dx * J.transpose() * divK;
    rep.lemma.max_residual = std::max(rep.lemma.max_residual, (grad_det - lemma_rhs).cwiseAbs().maxCoeff());
    for (int l = 0; l < D; ++l) {
      const Mat<D> dJ = detail::central_partial<D>(phi.jacobian, x, l, step);
      const double rhs = dx * (Kx.transpose().cwiseProduct(dJ)).sum();
      rep.jacobi.max_residual = std::max(rep.jacobi.max_residual, std::abs(grad_det(l) - rhs));
    }
    ++rep.lemma.points;
    ++rep.jacobi.points;
  }
  return rep;
}

// ---------------------------------------------------------------------------
// Random ODE flow Y_t and its densities

/// Per-point trajectories Y_t(x) and log rho_t(x) at the stored steps.
template <int D>
struct FlowField {
  std::vector<Vec<D>> points;
  std::vector<double> weights;
  std::optional<TensorGrid<D>> grid;  // set when points are the nodes of this grid in flat order
  double h = 0.0;
  std::vector<std::size_t> steps;
  std::vector<double> times;
  std::vector<std::vector<Vec<D>>> Y;          // [stored time][point]
  std::vector<std::vector<double>> log_rho;    // [stored time][point]

  std::size_t size() const { return points.size(); }
  std::size_t final_index() const { return steps.size() - 1; }
  /// Stored index of step k; invalid-argument when k was not stored.
  std::size_t index_of_step(std::size_t k) const {
    for (std::size_t i = 0; i < steps.size(); ++i)
      if (steps[i] == k) return i;
    throw Error(ErrorKind::InvalidArgument, "step " + std::to_string(k) + " was not stored");
  }
};

/// Nodes of `grid` with cell-volume weights inside B(radius) and zero weight outside.
template <int D>
std::vector<double> ball_weights(const TensorGrid<D>& grid, double radius) {
  std::vector<double> w(grid.size(), 0.0);
  for (std::size_t i = 0; i < grid.size(); ++i)
    if (grid.node(i).norm() <= radius) w[i] = grid.cell_volume();
  return w;
}

struct LagrangianOptions {
  std::size_t stride = 1;
  std::size_t stop = 0;  // 0: whole path
};

template <int D>
using StepObserver = std::function<void(std::size_t k, const DiffusionFrame<D>& frame, const std::vector<Vec<D>>& Y,
                                        const std::vector<double>& log_rho)>;

/// RK4 for dY = K_t A0(phi_t(Y)) dt on the path's grid, in lockstep with the frame, with
/// log rho accumulated by the trapezoid rule. The observer sees (k, frame at slices k, k+1, Y_k, log rho_k)
/// before each step and once more at the final step.
template <int D>
FlowField<D> lagrangian_flow(const std::vector<Vec<D>>& points, std::vector<double> weights, DiffusionFrame<D>& frame,
                             const SmoothVectorField<D>& drift, const LagrangianOptions& opt = {},
                             const StepObserver<D>& observer = {}) {
  require(opt.stride >= 1, ErrorKind::InvalidArgument, "stride must be >= 1");
  require(weights.size() == points.size(), ErrorKind::InvalidArgument, "one weight per point");
  const BrownianPath& path = frame.path();
  const std::size_t n = opt.stop ? opt.stop : path.steps();
  require(n <= path.steps(), ErrorKind::InvalidArgument, "stop beyond path end");
  const double h = path.h();
  FlowField<D> out;
  out.points = points;
  out.weights = std::move(weights);
  out.h = h;
  frame.reset();

  std::vector<Vec<D>> Y = points;
  std::vector<double> lr(points.size(), 0.0), div_start(points.size(), 0.0);
  const bool moving = !drift.is_zero();
  auto record = [&](std::size_t k) {
    out.steps.push_back(k);
    out.times.push_back(k * h);
    out.Y.push_back(Y);
    out.log_rho.push_back(lr);
  };
  if (moving)
    for (std::size_t p = 0; p < Y.size(); ++p) div_start[p] = transformed_divergence<D>(frame, 0.0, Y[p], drift);
  record(0);
  for (std::size_t k = 0; k < n; ++k) {
    if (observer) observer(k, frame, Y, lr);
    if (moving) {
      for (std::size_t p = 0; p < Y.size(); ++p) {
        const Vec<D> y = Y[p];
        const Vec<D> k1 = transformed_drift<D>(frame, 0.0, y, drift);
        const Vec<D> k2 = transformed_drift<D>(frame, 0.5, y + 0.5 * h * k1, drift);
        const Vec<D> k3 = transformed_drift<D>(frame, 0.5, y + 0.5 * h * k2, drift);
        const Vec<D> k4 = transformed_drift<D>(frame, 1.0, y + h * k3, drift);
        Y[p] = y + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
        if (!Y[p].allFinite()) throw Error(ErrorKind::NonFinite, "random ODE produced a non-finite state");
        const double div_end = transformed_divergence<D>(frame, 1.0, Y[p], drift);
        lr[p] += 0.5 * h * (div_start[p] + div_end);
        div_start[p] = div_end;
      }
    }
    frame.advance();
    if ((k + 1) % opt.stride == 0 || k + 1 == n) record(k + 1);
  }
  if (observer) observer(n, frame, Y, lr);
  return out;
}

/// Lagrangian flow over all nodes of `grid`, weights restricted to B(radius).
template <int D>
FlowField<D> lagrangian_flow_grid(const TensorGrid<D>& grid, double radius, DiffusionFrame<D>& frame,
                             const SmoothVectorField<D>& drift, const LagrangianOptions& opt = {},
                             const StepObserver<D>& observer = {}) {
  std::vector<Vec<D>> pts(grid.size());
  for (std::size_t i = 0; i < grid.size(); ++i) pts[i] = grid.node(i);
  FlowField<D> f = lagrangian_flow<D>(pts, ball_weights(grid, radius), frame, drift, opt, observer);
  f.grid = grid;
  return f;
}

/// Y_t^{-1}(y) by Newton on the cubic interpolant of Y_t over the initial grid.
template <int D>
InversionResult<D> invert_flow_field(const FlowField<D>& f, std::size_t ti, const Vec<D>& y, double tol = 1e-10) {
  require(f.grid.has_value(), ErrorKind::InvalidArgument, "flow field has no initial grid");
  const auto& Yt = f.Y[ti];
  double max_jac = 1.0;
  const std::size_t i = nearest_preimage<D>(Yt, *f.grid, 4.0 * max_jac, y);
  auto forward = [&](const Vec<D>& x) {
    const CubicStencil<D> st(*f.grid, x);
    return std::make_pair(st.value(Yt), st.jacobian(Yt));
  };
  return newton_invert<D>(forward, y, f.points[i], tol);
}

/// rho~_t(y) = exp(-log rho_t(Y_t^{-1}(y))).
template <int D>
double forward_density(const FlowField<D>& f, std::size_t ti, const Vec<D>& y) {
  const auto inv = invert_flow_field(f, ti, y);
  const CubicStencil<D> st(*f.grid, inv.x);
  return std::exp(-st.value(f.log_rho[ti]));
}

/// X_t(x) = phi_t(Y_t(x)) at every stored time, phi re-integrated from Y_t(x) on the stored increments.
template <int D>
std::vector<std::vector<Vec<D>>> compose(const FlowField<D>& Y, const BrownianPath& path,
                                         const std::vector<SmoothVectorField<D>>& fields) {
  std::vector<std::vector<Vec<D>>> X(Y.steps.size(), std::vector<Vec<D>>(Y.size()));
  for (std::size_t ti = 0; ti < Y.steps.size(); ++ti)
    for (std::size_t p = 0; p < Y.size(); ++p)
      X[ti][p] = flow_endpoint<D>(Y.Y[ti][p], path, fields, nullptr, Y.steps[ti], 0).x;
  return X;
}

/// Endpoint-only variant of compose.
template <int D>
std::vector<Vec<D>> compose_final(const FlowField<D>& Y, const BrownianPath& path,
                                  const std::vector<SmoothVectorField<D>>& fields) {
  std::vector<Vec<D>> X(Y.size());
  const std::size_t ti = Y.final_index();
  for (std::size_t p = 0; p < Y.size(); ++p)
    X[p] = flow_endpoint<D>(Y.Y[ti][p], path, fields, nullptr, Y.steps[ti], 0).x;
  return X;
}

}  // namespace roughflow
