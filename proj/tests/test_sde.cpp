#include "roughflow/catalog.hpp"
#include "roughflow/sde.hpp"

#include <gtest/gtest.h>
#include <unsupported/Eigen/MatrixFunctions>

#include <cmath>

using namespace roughflow;

namespace {

// X_T = e^{BT} x + sum_k e^{B(T - t_k - h/2)} sigma dw_k on the given increments.
Vec<2> variation_of_constants(const Mat<2>& B, const Vec<2>& sigma, const Vec<2>& x, const BrownianPath& p) {
  const double T = p.T(), h = p.h();
  Vec<2> out = (B * T).exp() * x;
  const Mat<2> step_back = (-B * h).exp();
  Mat<2> E = (B * (T - 0.5 * h)).exp();
  for (std::size_t k = 0; k < p.steps(); ++k) {
    out += E * sigma * p.dw(k, 0);
    E = E * step_back;
  }
  return out;
}

double fit_slope(const std::vector<double>& x, const std::vector<double>& y) {
  double mx = 0, my = 0;
  for (std::size_t i = 0; i < x.size(); ++i) mx += x[i], my += y[i];
  mx /= x.size();
  my /= y.size();
  double sxy = 0, sxx = 0;
  for (std::size_t i = 0; i < x.size(); ++i) sxy += (x[i] - mx) * (y[i] - my), sxx += (x[i] - mx) * (x[i] - mx);
  return sxy / sxx;
}

}  // namespace

TEST(HeunStep, FrozenDynamics) {
  const std::vector<SmoothVectorField<2>> fields{zero_field<2>()};
  const double dw[1] = {0.3};
  FlowState<2> s = FlowState<2>::at(Vec<2>(1.0, -2.0));
  s.J << 1, 2, 3, 4;
  const auto z = zero_field<2>();
  const auto out = heun_step(s, fields, dw, &z, 0.1);
  EXPECT_EQ(out.x, s.x);
  EXPECT_EQ(out.J, s.J);
}

TEST(HeunStep, AdditiveNoiseIsExact) {
  const std::vector<SmoothVectorField<1>> fields{constant_field<1>(Vec<1>(0.7))};
  const double dw[1] = {-0.45};
  FlowState<1> s = FlowState<1>::at(Vec<1>(2.0));
  const auto out = heun_step<1>(s, fields, dw, nullptr, 0.01);
  EXPECT_EQ(out.x(0), 2.0 + 0.7 * -0.45);
  EXPECT_EQ(out.J(0, 0), 1.0);
}

TEST(HeunStep, GeometricNoiseMatchesTaylorOracle) {
  const std::vector<SmoothVectorField<1>> fields{linear_field<1>(Mat<1>::Identity())};
  for (double w : {0.1, 0.05, 0.025}) {
    const double dw[1] = {w};
    const auto out = heun_step<1>(FlowState<1>::at(Vec<1>(1.5)), fields, dw, nullptr, 0.01);
    EXPECT_NEAR(out.x(0), 1.5 * (1 + w + w * w / 2), 1e-15);
    EXPECT_NEAR(out.x(0), 1.5 * std::exp(w), 1.5 * w * w * w / 6 * 1.1);
  }
}

TEST(HeunStep, NonFiniteStateIsSignalled) {
  const std::vector<SmoothVectorField<1>> fields{constant_field<1>(Vec<1>(INFINITY))};
  const double dw[1] = {0.1};
  try {
    heun_step<1>(FlowState<1>::at(Vec<1>(0.0)), fields, dw, nullptr, 0.01);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::NonFinite);
  }
}

TEST(DiffusionFlow, AdditiveNoiseClosedForm) {
  const Vec<2> sigma(0.5, 0.0);
  const std::vector<SmoothVectorField<2>> fields{constant_field<2>(sigma)};
  const auto p = sample_path(3, 1, 1.0, 1.0 / 64);
  const auto w = p.cumulative(0);
  const Vec<2> x(0.2, -0.4);
  const auto tr = diffusion_flow<2>(x, p, fields);
  for (std::size_t k = 0; k < tr.states.size(); ++k) {
    EXPECT_NEAR((tr.states[k] - (x + sigma * w[k])).norm(), 0.0, 1e-14);
    EXPECT_EQ(tr.jacobians[k], Mat<2>::Identity());
    EXPECT_EQ(tr.dets[k], 1.0);
  }
}

TEST(DiffusionFlow, NoNoiseIsIdentity) {
  const auto p = sample_path(3, 0, 1.0, 0.125);
  const Vec<2> x(1.0, 2.0);
  const auto tr = diffusion_flow<2>(x, p, {});
  for (const auto& s : tr.states) EXPECT_EQ(s, x);
}

TEST(DiffusionFlow, InitialValuesAndStride) {
  const auto s = make_scenario("smooth-nonlinear");
  const auto p = sample_path(5, 1, 1.0, 1.0 / 100);
  FlowOptions opt;
  opt.stride = 30;
  const auto tr = diffusion_flow<2>(Vec<2>(0.1, 0.2), p, s.diffusion, opt);
  EXPECT_EQ(tr.jacobians.front(), Mat<2>::Identity());
  EXPECT_EQ(tr.inverses.front(), Mat<2>::Identity());
  EXPECT_EQ(tr.dets.front(), 1.0);
  EXPECT_EQ(tr.steps, (std::vector<std::size_t>{0, 30, 60, 90, 100}));
}

TEST(DiffusionFlow, LiouvilleIdentityOneDimensional) {
  // det J_t against exp of a trapezoid Stratonovich sum of div A along the same trajectory
  const std::vector<SmoothVectorField<1>> fields{tanh_saturated<1>(Vec<1>(0.2), Vec<1>(0.8))};
  auto base = sample_path(12, 1, 1.0, 1.0 / 64);
  std::vector<double> errs, hs;
  for (int level = 0; level < 4; ++level) {
    const auto p = refine_times(base, level);
    const auto tr = diffusion_flow<1>(Vec<1>(0.3), p, fields);
    double log_det = 0.0;
    for (std::size_t k = 0; k < p.steps(); ++k)
      log_det += 0.5 * (fields[0].divergence(tr.states[k]) + fields[0].divergence(tr.states[k + 1])) * p.dw(k, 0);
    const double err = std::abs(tr.dets.back() / std::exp(log_det) - 1.0);
    errs.push_back(err);
    hs.push_back(p.h());
    EXPECT_LE(err, 2.0 * p.h());
  }
}

TEST(DiffusionFlow, SingularJacobianIsSignalled) {
  // Heun factor 1 + z + z^2/2 vanishes at z = -1 +- i
  Mat<2> B;
  B << -1, -1, 1, -1;
  const auto p = sample_path(1, 0, 1.0, 1.0);
  try {
    direct_flow<2>(Vec<2>(1, 1), p, {}, linear_field<2>(B));
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::SingularJacobian);
  }
}

TEST(DiffusionFlow, InversionResidualAndDetSignOnCatalog) {
  for (const auto& name : scenario_names()) {
    const auto s = make_scenario(name);
    const auto p = sample_path(31, s.m, 1.0, 1.0 / 256);
    const auto drift = s.drift();
    for (int i = 0; i < 5; ++i) {
      const auto tr = direct_flow<2>(sample_ball<2>(8, i, 1.0), p, s.diffusion, drift);
      for (std::size_t k = 0; k < tr.states.size(); ++k) {
        EXPECT_LE((tr.jacobians[k] * tr.inverses[k] - Mat<2>::Identity()).norm(), 1e-8) << name;
        EXPECT_GT(tr.dets[k], 0.0) << name;
      }
    }
  }
}

TEST(DirectFlow, ZeroDriftEqualsDiffusionFlowBitwise) {
  const auto s = make_scenario("smooth-nonlinear");
  const auto p = sample_path(2, 1, 1.0, 1.0 / 128);
  const Vec<2> x(0.4, -0.1);
  const auto a = diffusion_flow<2>(x, p, s.diffusion);
  const auto b = direct_flow<2>(x, p, s.diffusion, zero_field<2>());
  EXPECT_EQ(a.states, b.states);
  EXPECT_EQ(a.jacobians, b.jacobians);
}

TEST(DirectFlow, AdditiveLinearMatchesVariationOfConstants) {
  const auto s = make_scenario("additive-linear");
  const auto p = sample_path(6, 1, 1.0, 1.0 / 256);
  const Vec<2> x(0.5, 0.25);
  const auto tr = direct_flow<2>(x, p, s.diffusion, *s.smooth_drift);
  const Vec<2> oracle = variation_of_constants(*s.linear_B, s.sigma, x, p);
  EXPECT_LE((tr.final_state() - oracle).norm(), p.h());
}

TEST(DirectFlow, StrongOrderOnBridgeRefinedPaths) {
  const auto s = make_scenario("additive-linear");
  const Vec<2> x(0.5, 0.25);
  std::vector<double> lh, le;
  std::vector<double> err(5, 0.0);
  const int paths = 8;
  for (int j = 0; j < paths; ++j) {
    const auto base = sample_path(40 + j, 1, 1.0, 1.0 / 64);
    const auto fine = refine_times(base, 8);
    const Vec<2> truth = variation_of_constants(*s.linear_B, s.sigma, x, fine);
    for (int level = 0; level < 5; ++level) {
      const auto p = refine_times(base, level);
      err[level] += (direct_flow<2>(x, p, s.diffusion, *s.smooth_drift).final_state() - truth).norm() / paths;
    }
  }
  for (int level = 0; level < 5; ++level) {
    lh.push_back(std::log(1.0 / 64 / (1 << level)));
    le.push_back(std::log(err[level]));
  }
  EXPECT_GE(fit_slope(lh, le), 0.8);
}

TEST(DirectFlow, ReversedDynamicsReturnToStart) {
  const auto s = make_scenario("smooth-nonlinear");
  const auto base = sample_path(14, 1, 1.0, 1.0 / 64);
  const Vec<2> x(0.3, -0.2);
  std::vector<SmoothVectorField<2>> backward;
  for (const auto& f : s.diffusion) backward.push_back(f.negated());
  double prev = INFINITY;
  for (int level = 0; level < 4; ++level) {
    const auto p = refine_times(base, level);
    const Vec<2> xT = direct_flow<2>(x, p, s.diffusion, *s.smooth_drift).final_state();
    const Vec<2> back = direct_flow<2>(xT, reverse(p), backward, s.smooth_drift->negated()).final_state();
    const double e = (back - x).norm();
    EXPECT_LT(e, prev);
    prev = e;
  }
  EXPECT_LE(prev, 1e-2);
}

TEST(InvertPoint, TimeZeroReturnsInput) {
  const auto s = make_scenario("smooth-nonlinear");
  const auto p = sample_path(1, 1, 1.0, 1.0 / 64);
  const auto snap = diffusion_snapshot(TensorGrid<2>::cube(2.0, 11), p, s.diffusion, 0);
  const Vec<2> y(0.33, -0.71);
  EXPECT_LE((invert_point(snap, p, s.diffusion, y).x - y).norm(), 1e-8);
}

TEST(InvertPoint, AdditiveNoiseExplicitInverse) {
  const auto s = make_scenario("additive-linear");
  const auto p = sample_path(2, 1, 1.0, 1.0 / 64);
  const double wT = p.cumulative(0).back();
  const auto snap = diffusion_snapshot(TensorGrid<2>::cube(2.0, 11), p, s.diffusion, p.steps());
  const Vec<2> y(0.2, 0.4);
  EXPECT_LE((invert_point(snap, p, s.diffusion, y).x - (y - s.sigma * wT)).norm(), 1e-12);
}

TEST(InvertPoint, NonlinearForwardResidual) {
  const auto s = make_scenario("smooth-nonlinear");
  const auto p = sample_path(3, 1, 1.0, 1.0 / 128);
  const auto snap = diffusion_snapshot(TensorGrid<2>::cube(2.0, 21), p, s.diffusion, p.steps());
  for (int i = 0; i < 100; ++i) {
    const Vec<2> x0 = sample_ball<2>(61, i, 1.5);
    const Vec<2> y = flow_endpoint<2>(x0, p, s.diffusion, nullptr, p.steps()).x;
    const auto r = invert_point(snap, p, s.diffusion, y);
    const Vec<2> back = flow_endpoint<2>(r.x, p, s.diffusion, nullptr, p.steps()).x;
    EXPECT_LE((back - y).norm(), 1e-8);
    EXPECT_LE((r.x - x0).norm(), 1e-6);
  }
}

TEST(InvertPoint, OutsideImageIsOutOfChart) {
  const auto s = make_scenario("smooth-nonlinear");
  const auto p = sample_path(3, 1, 1.0, 1.0 / 64);
  const auto snap = diffusion_snapshot(TensorGrid<2>::cube(1.0, 5), p, s.diffusion, p.steps());
  try {
    invert_point(snap, p, s.diffusion, Vec<2>(40.0, 40.0));
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::OutOfChart);
  }
}
