#include "roughflow/catalog.hpp"
#include "roughflow/decomposition.hpp"

#include <gtest/gtest.h>
#include <unsupported/Eigen/MatrixFunctions>

#include <cmath>

using namespace roughflow;

namespace {

TensorGrid<2> chart_box(double half, double spacing) {
  return TensorGrid<2>::box(Vec<2>::Constant(-half), Vec<2>::Constant(half), spacing);
}

std::vector<Vec<2>> disc_samples(std::uint64_t seed, int n, double radius) {
  std::vector<Vec<2>> out;
  for (int i = 0; i < n; ++i) out.push_back(sample_ball<2>(seed, i, radius));
  return out;
}

Mat<2> rotation() {
  Mat<2> B;
  B << 0, -1, 1, 0;
  return B;
}

}  // namespace

TEST(TransformedDrift, ZeroDriftVanishes) {
  const auto s = make_scenario("smooth-nonlinear");
  const auto p = sample_path(1, 1, 1.0, 1.0 / 16);
  GridChart<2> chart(p, s.diffusion, chart_box(2.0, 0.1));
  chart.advance();
  EXPECT_EQ(transformed_drift<2>(chart, 0.5, Vec<2>(0.3, 0.1), zero_field<2>()), Vec<2>::Zero());
  EXPECT_EQ(transformed_divergence<2>(chart, 0.5, Vec<2>(0.3, 0.1), zero_field<2>()), 0.0);
}

TEST(TransformedDrift, NoNoiseIsTheDriftItself) {
  const auto p = sample_path(1, 0, 1.0, 1.0 / 16);
  AdditiveFrame<2> frame(p, {});
  const auto A = tanh_rotation_drift(0.5);
  for (int k = 0; k < 5; ++k) frame.advance();
  for (const auto& x : disc_samples(3, 20, 2.0)) EXPECT_EQ(transformed_drift<2>(frame, 0.0, x, A), A.value(x));
}

TEST(TransformedDrift, AdditiveLinearSubstitution) {
  const auto s = make_scenario("additive-linear");
  const auto p = sample_path(2, 1, 1.0, 1.0 / 32);
  const auto w = p.cumulative(0);
  AdditiveFrame<2> frame(p, s.diffusion);
  for (std::size_t k = 0; k < 7; ++k) frame.advance();
  const Vec<2> x(0.4, -0.3);
  const Vec<2> oracle = *s.linear_B * (x + s.sigma * w[7]);
  EXPECT_LE((transformed_drift<2>(frame, 0.0, x, *s.smooth_drift) - oracle).norm(), 1e-14);
}

TEST(TransformedDivergence, AdditiveRotationIsDivergenceFree) {
  const auto s = make_scenario("additive-linear");
  const auto p = sample_path(2, 1, 1.0, 1.0 / 32);
  AdditiveFrame<2> frame(p, s.diffusion);
  const auto A = linear_field<2>(rotation());
  for (std::size_t k = 0; k < 9; ++k) frame.advance();
  for (const auto& x : disc_samples(5, 10, 1.0)) EXPECT_EQ(transformed_divergence<2>(frame, 0.5, x, A), 0.0);
}

TEST(TransformedDivergence, FormulaMatchesCentralDifferences) {
  const auto s = make_scenario("smooth-nonlinear");
  const auto p = sample_path(4, 1, 1.0, 1.0 / 64);
  GridChart<2> chart(p, s.diffusion, chart_box(2.5, 0.05));
  for (std::size_t k = 0; k < 40; ++k) chart.advance();
  const auto& A = *s.smooth_drift;
  const double step = 1e-4;
  for (const auto& x : disc_samples(6, 100, 1.5)) {
    double fd = 0.0;
    for (int l = 0; l < 2; ++l) {
      Vec<2> xp = x, xm = x;
      xp(l) += step;
      xm(l) -= step;
      fd += (transformed_drift<2>(chart, 0.0, xp, A)(l) - transformed_drift<2>(chart, 0.0, xm, A)(l)) / (2 * step);
    }
    EXPECT_LE(std::abs(transformed_divergence<2>(chart, 0.0, x, A) - fd), 5e-3);
  }
}

TEST(TransformedDrift, JacobianMatchesCentralDifferences) {
  const auto s = make_scenario("smooth-nonlinear");
  const auto p = sample_path(4, 1, 1.0, 1.0 / 64);
  GridChart<2> chart(p, s.diffusion, chart_box(2.5, 0.05));
  for (std::size_t k = 0; k < 30; ++k) chart.advance();
  const auto& A = *s.smooth_drift;
  for (const auto& x : disc_samples(7, 20, 1.5)) {
    Mat<2> fd;
    for (int l = 0; l < 2; ++l) {
      Vec<2> xp = x, xm = x;
      xp(l) += 1e-4;
      xm(l) -= 1e-4;
      fd.col(l) = (transformed_drift<2>(chart, 0.0, xp, A) - transformed_drift<2>(chart, 0.0, xm, A)) / 2e-4;
    }
    EXPECT_LE((transformed_jacobian<2>(chart.sample(x, 0.0), A) - fd).norm(), 5e-3);
  }
}

TEST(GridChart, MatchesReintegrationOffNodes) {
  const auto s = make_scenario("smooth-nonlinear");
  const auto p = sample_path(8, 1, 1.0, 1.0 / 64);
  GridChart<2> chart(p, s.diffusion, chart_box(2.5, 0.05));
  const std::size_t k = 50;
  for (std::size_t j = 0; j < k; ++j) chart.advance();
  for (const auto& x : disc_samples(9, 30, 1.8)) {
    const FlowState<2> e = flow_endpoint<2>(x, p, s.diffusion, nullptr, k, 2);
    const FrameSample<2> fs = chart.sample(x, 0.0);
    EXPECT_LE((fs.phi - e.x).norm(), 1e-6);
    EXPECT_LE((fs.J - e.J).norm(), 1e-5);
    EXPECT_LE((fs.divK() - inverse_divergence<2>(e.J.inverse(), e.H)).norm(), 1e-3);
  }
}

TEST(GridChart, OutsideNodeBoxIsOutOfChart) {
  const auto s = make_scenario("smooth-nonlinear");
  const auto p = sample_path(8, 1, 1.0, 1.0 / 8);
  GridChart<2> chart(p, s.diffusion, chart_box(1.0, 0.25));
  try {
    chart.sample(Vec<2>(3.0, 0.0), 0.0);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::OutOfChart);
  }
}

TEST(ChainRule, ConstantFieldBothSidesZero) {
  const auto r = check_bv_chain_rule<2>(constant_field<2>(Vec<2>(1, 2)), sine_diffeo<2>(0.1), disc_samples(1, 50, 2));
  EXPECT_LE(r.max_residual, 1e-12);
}

TEST(ChainRule, IdentityMapLeavesOnlyDifferencingError) {
  const Diffeo<2> id = linear_diffeo<2>(Mat<2>::Identity());
  const auto r = check_bv_chain_rule<2>(tanh_rotation_drift(0.5), id, disc_samples(2, 50, 2));
  EXPECT_LE(r.max_residual, 1e-6);
}

TEST(ChainRule, SineMapAnalyticOracle) {
  const SmoothVectorField<2> b("test", {}, Regularity::CInfty, BoundConsts{}, false,
                               [](const Vec<2>& x, int order, FieldJet<2>& j) {
                                 j.value = Vec<2>(x(1) * x(1), x(0));
                                 if (order >= 1) j.jacobian << 0, 2 * x(1), 1, 0;
                               });
  const auto r = check_bv_chain_rule<2>(b, sine_diffeo<2>(0.1), disc_samples(3, 200, 2));
  EXPECT_LE(r.max_residual, 1e-5);
}

TEST(ChainRule, ConventionIsRightMultiplication) {
  // a non-symmetric linear map distinguishes (grad b)(phi) J from J (grad b)(phi)
  Mat<2> A;
  A << 1, 2, 0, 1;
  Mat<2> Bm;
  Bm << 0, 1, 3, 0;
  const auto r = check_bv_chain_rule<2>(linear_field<2>(Bm), linear_diffeo<2>(A), {Vec<2>(0.3, 0.2)});
  EXPECT_LE(r.max_residual, 1e-9);
  EXPECT_GT((Bm * A - A * Bm).norm(), 1.0);
}

TEST(DetGradient, IdentityMap) {
  const auto r = check_det_gradient_identity<2>(linear_diffeo<2>(Mat<2>::Identity()), disc_samples(1, 20, 2));
  EXPECT_EQ(r.lemma.max_residual, 0.0);
  EXPECT_EQ(r.jacobi.max_residual, 0.0);
}

TEST(DetGradient, LinearMapHasZeroSides) {
  Mat<2> A;
  A << 2, 1, -0.5, 1.5;
  const auto r = check_det_gradient_identity<2>(linear_diffeo<2>(A), disc_samples(1, 20, 2));
  EXPECT_LE(r.lemma.max_residual, 1e-10);
  EXPECT_LE(r.jacobi.max_residual, 1e-10);
}

TEST(DetGradient, SineMapOnGrid) {
  const auto g = TensorGrid<2>::cube(2.0, 21);
  std::vector<Vec<2>> pts;
  for (std::size_t i = 0; i < g.size(); ++i)
    if (g.node(i).norm() <= 2.0) pts.push_back(g.node(i));
  const auto r = check_det_gradient_identity<2>(sine_diffeo<2>(0.1), pts);
  EXPECT_LE(r.lemma.max_residual, 1e-4);
  EXPECT_LE(r.jacobi.max_residual, 1e-4);
}

TEST(DetGradient, SingularMapIsSignalled) {
  EXPECT_THROW(check_det_gradient_identity<2>(linear_diffeo<2>(Mat<2>::Zero()), {Vec<2>(0, 0)}), Error);
}

TEST(LagrangianFlow, ZeroDriftKeepsPoints) {
  const auto s = make_scenario("smooth-nonlinear");
  const auto p = sample_path(1, 1, 1.0, 1.0 / 16);
  GridChart<2> chart(p, s.diffusion, chart_box(2.0, 0.1));
  const auto f = lagrangian_flow_grid<2>(TensorGrid<2>::cube(1.0, 5), 1.0, chart, zero_field<2>());
  for (std::size_t ti = 0; ti < f.steps.size(); ++ti)
    for (std::size_t i = 0; i < f.size(); ++i) {
      EXPECT_EQ(f.Y[ti][i], f.points[i]);
      EXPECT_EQ(f.log_rho[ti][i], 0.0);
    }
}

TEST(LagrangianFlow, LinearOdeClosedForm) {
  const auto p = sample_path(1, 0, 1.0, 1.0 / 64);
  AdditiveFrame<2> frame(p, {});
  LagrangianOptions opt;
  opt.stride = 16;
  const auto f = lagrangian_flow_grid<2>(TensorGrid<2>::cube(1.0, 5), 1.0, frame, linear_field<2>(-Mat<2>::Identity()), opt);
  for (std::size_t ti = 0; ti < f.steps.size(); ++ti) {
    const double t = f.times[ti];
    for (std::size_t i = 0; i < f.size(); ++i) {
      EXPECT_LE((f.Y[ti][i] - f.points[i] * std::exp(-t)).norm(), 1e-9);
      EXPECT_NEAR(std::exp(f.log_rho[ti][i]), std::exp(-2 * t), 1e-12);
    }
  }
}

TEST(LagrangianFlow, AdditiveLinearIntegratingFactor) {
  // Y_t = X_t - sigma w_t with X_t by variation of constants on the same increments
  const auto s = make_scenario("additive-linear");
  const Mat<2> B = *s.linear_B;
  const Vec<2> x(0.5, -0.25);
  double prev = INFINITY;
  const auto base = sample_path(17, 1, 1.0, 1.0 / 64);
  for (int level = 0; level < 3; ++level) {
    const auto p = refine_times(base, level);
    AdditiveFrame<2> frame(p, s.diffusion);
    const auto f = lagrangian_flow<2>({x}, {1.0}, frame, *s.smooth_drift);
    const double h = p.h();
    Vec<2> X = (B * 1.0).exp() * x;
    Mat<2> E = (B * (1.0 - 0.5 * h)).exp();
    const Mat<2> back = (-B * h).exp();
    for (std::size_t k = 0; k < p.steps(); ++k, E = E * back) X += E * s.sigma * p.dw(k, 0);
    const Vec<2> oracle = X - s.sigma * p.cumulative(0).back();
    const double err = (f.Y.back()[0] - oracle).norm();
    EXPECT_LE(err, h);
    EXPECT_LT(err, prev);
    prev = err;
  }
}

TEST(LagrangianFlow, LogRhoReconstructsDivergenceIntegral) {
  const auto s = make_scenario("smooth-nonlinear");
  const auto p = sample_path(3, 1, 1.0, 1.0 / 64);
  GridChart<2> chart(p, s.diffusion, chart_box(3.0, 0.05));
  // independent trapezoid of the observed divergence along the stored trajectory
  std::vector<double> divs;
  const auto f = lagrangian_flow<2>({Vec<2>(0.2, 0.4)}, {1.0}, chart, *s.smooth_drift, {},
                                    [&](std::size_t, const DiffusionFrame<2>& fr, const std::vector<Vec<2>>& Y, const std::vector<double>&) {
                                      divs.push_back(transformed_divergence<2>(fr, 0.0, Y[0], *s.smooth_drift));
                                    });
  ASSERT_EQ(divs.size(), p.steps() + 1);
  double lr = 0.0;
  for (std::size_t k = 0; k < p.steps(); ++k) lr += 0.5 * p.h() * (divs[k] + divs[k + 1]);
  // the final observer call samples slice 0 after the last advance, which holds t_N
  EXPECT_NEAR(f.log_rho.back()[0], lr, 1e-12);
  EXPECT_GT(std::exp(f.log_rho.back()[0]), 0.0);
}

TEST(ForwardDensity, DivergenceFreeIsOne) {
  const auto p = sample_path(3, 0, 1.0, 1.0 / 32);
  AdditiveFrame<2> frame(p, {});
  const auto f = lagrangian_flow_grid<2>(TensorGrid<2>::cube(1.0, 11), 1.0, frame, linear_field<2>(rotation()));
  EXPECT_NEAR(forward_density(f, f.final_index(), Vec<2>(0.1, 0.2)), 1.0, 1e-12);
}

TEST(ForwardDensity, ContractingOdeIsExpDt) {
  const auto p = sample_path(3, 0, 1.0, 1.0 / 32);
  AdditiveFrame<2> frame(p, {});
  const auto f = lagrangian_flow_grid<2>(TensorGrid<2>::cube(1.0, 11), 1.0, frame, linear_field<2>(-Mat<2>::Identity()));
  EXPECT_NEAR(forward_density(f, f.final_index(), Vec<2>(0.1, 0.2)), std::exp(2.0), 1e-9);
}

TEST(ForwardDensity, ReciprocalAtGridPoints) {
  const auto s = make_scenario("smooth-nonlinear");
  const auto p = sample_path(5, 1, 1.0, 1.0 / 32);
  GridChart<2> chart(p, s.diffusion, chart_box(3.5, 0.1));
  const auto f = lagrangian_flow_grid<2>(TensorGrid<2>::cube(1.0, 9), 1.0, chart, *s.smooth_drift);
  const std::size_t T = f.final_index();
  for (std::size_t i = 0; i < f.size(); ++i)
    EXPECT_NEAR(forward_density(f, T, f.Y[T][i]) * std::exp(f.log_rho[T][i]), 1.0, 1e-6);
}

TEST(Compose, ZeroDriftIsDiffusionFlow) {
  const auto s = make_scenario("smooth-nonlinear");
  const auto p = sample_path(5, 1, 1.0, 1.0 / 32);
  GridChart<2> chart(p, s.diffusion, chart_box(2.0, 0.2));
  const auto f = lagrangian_flow_grid<2>(TensorGrid<2>::cube(1.0, 4), 1.0, chart, zero_field<2>());
  const auto X = compose_final(f, p, s.diffusion);
  for (std::size_t i = 0; i < f.size(); ++i)
    EXPECT_EQ(X[i], diffusion_flow<2>(f.points[i], p, s.diffusion).final_state());
}

TEST(Compose, NoNoiseIsY) {
  const auto s = make_scenario("ode-only");
  const auto p = sample_path(5, 0, 1.0, 1.0 / 32);
  AdditiveFrame<2> frame(p, {});
  const auto f = lagrangian_flow_grid<2>(TensorGrid<2>::cube(1.0, 4), 1.0, frame, *s.smooth_drift);
  const auto X = compose(f, p, s.diffusion);
  for (std::size_t ti = 0; ti < X.size(); ++ti)
    for (std::size_t i = 0; i < f.size(); ++i) EXPECT_EQ(X[ti][i], f.Y[ti][i]);
}

TEST(Compose, SmoothScenarioMatchesDirectFlowWithOrder) {
  const auto s = make_scenario("smooth-nonlinear");
  const auto base = sample_path(21, 1, 1.0, 1.0 / 64);
  const auto g = TensorGrid<2>::cube(1.0, 5);
  std::vector<double> gaps;
  for (int level = 0; level < 3; ++level) {
    const auto p = refine_times(base, level);
    GridChart<2> chart(p, s.diffusion, chart_box(3.5, 0.05));
    const auto f = lagrangian_flow_grid<2>(g, 1.0, chart, *s.smooth_drift);
    const auto X = compose_final(f, p, s.diffusion);
    double gap = 0.0;
    for (std::size_t i = 0; i < f.size(); ++i)
      gap = std::max(gap, (X[i] - direct_flow<2>(f.points[i], p, s.diffusion, *s.smooth_drift).final_state()).norm());
    EXPECT_LE(gap, 2.0 * p.h());
    gaps.push_back(gap);
  }
  EXPECT_GE(std::log2(gaps[0] / gaps[2]) / 2.0, 0.8);
}
