#include "roughflow/transport.hpp"

#include <gtest/gtest.h>

#include <cmath>

using namespace roughflow;

namespace {

TensorGrid<2> chart_box(double half, double spacing) {
  return TensorGrid<2>::box(Vec<2>::Constant(-half), Vec<2>::Constant(half), spacing);
}

TestFunction<2> unit_bump(double cx = 0.0, double cy = 0.0, double r = 1.0) {
  TestFunction<2> b;
  b.center = Vec<2>(cx, cy);
  b.radius = r;
  return b;
}

struct EnsembleResidual {
  double ito = 0.0;
  double strat = 0.0;
  double ito_se = 0.0;
  double strat_se = 0.0;
};

EnsembleResidual ensemble(const Scenario& s, const InitialDatum<2>& th, const TestFunction<2>& phi, int paths,
                          double h, int refine, const TensorGrid<2>& zg) {
  std::vector<double> a, b;
  for (int j = 0; j < paths; ++j) {
    const auto p = refine_times(sample_path(100 + j, s.m, 1.0, h), refine);
    const auto r = ito_weak_residual<2>(th, phi, p, s.diffusion, *s.smooth_drift, zg);
    a.push_back(r.final_ito());
    b.push_back(r.final_stratonovich());
  }
  auto mean = [](const std::vector<double>& v) {
    double m = 0.0;
    for (double x : v) m += x;
    return m / v.size();
  };
  auto se = [&](const std::vector<double>& v) {
    const double m = mean(v);
    double q = 0.0;
    for (double x : v) q += (x - m) * (x - m);
    return std::sqrt(q / (v.size() - 1) / v.size());
  };
  return {mean(a), mean(b), se(a), se(b)};
}

}  // namespace

TEST(TestFunction, VanishesOutsideSupport) {
  const auto b = unit_bump(0.2, -0.1, 0.7);
  for (const Vec<2>& x : {Vec<2>(0.9, -0.1), Vec<2>(2.0, 2.0), Vec<2>(0.2, 0.6)}) {
    EXPECT_EQ(b.value(x), 0.0);
    EXPECT_EQ(b.gradient(x).norm(), 0.0);
    EXPECT_EQ(b.hessian(x).norm(), 0.0);
  }
}

TEST(TestFunction, DerivativesMatchFiniteDifferences) {
  TestFunction<2> b = unit_bump(0.1, 0.2, 0.9);
  b.amplitude = 1.7;
  const double e = 1e-5;
  for (const Vec<2>& x : {Vec<2>(0.3, 0.1), Vec<2>(-0.4, 0.5), Vec<2>(0.0, -0.3)}) {
    const Vec<2> g = b.gradient(x);
    const Mat<2> H = b.hessian(x);
    for (int a = 0; a < 2; ++a) {
      const Vec<2> d = e * Vec<2>::Unit(a);
      const double fd = (b.value(x + d) - b.value(x - d)) / (2 * e);
      EXPECT_LE(std::abs(fd - g(a)), 1e-6 * std::max(1.0, std::abs(g(a))));
      const Vec<2> fdg = (b.gradient(x + d) - b.gradient(x - d)) / (2 * e);
      EXPECT_LE((fdg - H.col(a)).norm(), 1e-6 * std::max(1.0, H.norm()));
    }
  }
}

TEST(TestFunction, L2NormMatchesQuadrature) {
  TestFunction<2> b = unit_bump(0.3, 0.0, 0.8);
  b.amplitude = -2.0;
  const auto g = midpoint_grid<2>(b.center, b.radius, 400);
  double s = 0.0;
  for (std::size_t i = 0; i < g.size(); ++i) s += std::pow(b.value(g.node(i)), 2) * g.cell_volume();
  EXPECT_NEAR(std::sqrt(s) / b.l2_norm(), 1.0, 1e-4);

  TestFunction<1> c;
  c.radius = 0.5;
  const auto g1 = midpoint_grid<1>(c.center, c.radius, 4000);
  double s1 = 0.0;
  for (std::size_t i = 0; i < g1.size(); ++i) s1 += std::pow(c.value(g1.node(i)), 2) * g1.cell_volume();
  EXPECT_NEAR(std::sqrt(s1) / c.l2_norm(), 1.0, 1e-6);
}

TEST(Representation, ConstantIsTransportedExactly) {
  const auto s = make_scenario("smooth-nonlinear");
  const auto p = sample_path(3, 1, 0.5, 1.0 / 64);
  const std::vector<Vec<2>> xs{Vec<2>(0.1, 0.2), Vec<2>(-0.7, 0.4), Vec<2>(1.2, -0.3)};
  for (std::size_t k : {std::size_t{0}, std::size_t{10}, p.steps()})
    for (double v : representation_solution<2>(datum_constant<2>(2.5), p, k, s.diffusion, *s.smooth_drift, xs,
                                               chart_box(3.0, 0.1)))
      EXPECT_EQ(v, 2.5);
}

TEST(Representation, AdditiveNoiseShiftsTheDatum) {
  const auto s = make_scenario("additive-linear");
  const auto p = sample_path(4, 1, 1.0, 1.0 / 64);
  const auto th = datum_quadratic<2>();
  const std::vector<Vec<2>> xs{Vec<2>(0.1, 0.2), Vec<2>(-0.7, 0.4)};
  const std::size_t k = 40;
  const double wt = p.cumulative(0)[k];
  const auto v = representation_solution<2>(th, p, k, s.diffusion, zero_field<2>(), xs, chart_box(1.0, 0.5));
  for (std::size_t i = 0; i < xs.size(); ++i) EXPECT_NEAR(v[i], th.value(xs[i] - s.sigma * wt), 1e-12);
}

TEST(Representation, ContractingOdeInverse) {
  const auto s = make_scenario("ode-only");
  const auto p = sample_path(4, 0, 1.0, 1.0 / 256);
  const auto th = datum_quadratic<2>();
  const std::vector<Vec<2>> xs{Vec<2>(0.1, 0.2), Vec<2>(-0.3, 0.25)};
  const auto v = representation_solution<2>(th, p, p.steps(), s.diffusion, *s.smooth_drift, xs, chart_box(1.0, 0.5));
  for (std::size_t i = 0; i < xs.size(); ++i) EXPECT_NEAR(v[i], th.value(xs[i] * std::exp(1.0)), 1e-3);
}

TEST(Representation, RangeStaysInsideInitialRange) {
  const auto s = make_scenario("smooth-nonlinear");
  const auto p = sample_path(5, 1, 0.5, 1.0 / 64);
  const auto th = datum_bump<2>(unit_bump(0.2, 0.0, 0.9));
  const auto g = TensorGrid<2>::cube(1.0, 9);
  std::vector<Vec<2>> xs;
  for (std::size_t i = 0; i < g.size(); ++i) xs.push_back(g.node(i));
  for (double v : representation_solution<2>(th, p, p.steps(), s.diffusion, *s.smooth_drift, xs, chart_box(3.0, 0.1))) {
    EXPECT_GE(v, 0.0);
    EXPECT_LE(v, 1.0);
  }
}

TEST(WeakResidual, NoDynamicsIsExactlyZero) {
  const auto s = make_scenario("zero");
  const auto p = sample_path(1, 1, 1.0, 1.0 / 32);
  const auto r = ito_weak_residual<2>(datum_bump<2>(unit_bump(0.1, 0.0, 0.8)), unit_bump(), p, s.diffusion,
                                      zero_field<2>(), midpoint_grid<2>(Vec<2>::Zero(), 1.5, 33));
  for (double v : r.ito) EXPECT_EQ(v, 0.0);
  for (double v : r.stratonovich) EXPECT_EQ(v, 0.0);
}

TEST(WeakResidual, ConstantDatumIsExactlyZero) {
  for (const char* name : {"additive-linear", "ode-only", "smooth-nonlinear"}) {
    const auto s = make_scenario(name);
    const auto p = sample_path(2, s.m, 1.0, 1.0 / 32);
    const auto r = ito_weak_residual<2>(datum_constant<2>(1.0), unit_bump(), p, s.diffusion, *s.smooth_drift,
                                        midpoint_grid<2>(Vec<2>::Zero(), 2.0, 33));
    EXPECT_EQ(r.final_ito(), 0.0) << name;
    EXPECT_EQ(r.final_stratonovich(), 0.0) << name;
  }
}

TEST(WeakResidual, MissingHessianIsReported) {
  const auto s = make_scenario("additive-linear");
  SmoothVectorField<2> f("no-hessian", {}, Regularity::CInfty, {}, false,
                         [](const Vec<2>& x, int, FieldJet<2>& j) { j.value = x; j.jacobian.setIdentity(); });
  const auto p = sample_path(2, 1, 1.0, 1.0 / 32);
  try {
    ito_weak_residual<2>(datum_bump<2>(unit_bump()), unit_bump(), p, {f}, zero_field<2>(),
                         midpoint_grid<2>(Vec<2>::Zero(), 1.0, 9));
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::MissingHessian);
  }
}

TEST(WeakResidual, DeterministicDriftHalvesUnderRefinement) {
  const auto s = make_scenario("ode-only");
  const auto th = datum_bump<2>(unit_bump(0.3, 0.1, 1.2));
  const auto phi = unit_bump(0.1, 0.0, 0.7);
  double prev = INFINITY;
  for (int level = 0; level < 3; ++level) {
    const auto p = sample_path(1, 0, 1.0, 1.0 / (16 << level));
    const auto r = ito_weak_residual<2>(th, phi, p, s.diffusion, *s.smooth_drift,
                                        midpoint_grid<2>(Vec<2>(0.3, 0.1), 1.2, 33 << level));
    EXPECT_LE(r.final_ito(), 5e-2);
    EXPECT_EQ(r.final_ito(), r.final_stratonovich());
    EXPECT_LE(r.final_ito(), 0.5 * prev);
    prev = r.final_ito();
  }
}

TEST(WeakResidual, AdditiveNoiseEnsembleMeanAndRefinement) {
  const auto s = make_scenario("additive-linear");
  const auto th = datum_bump<2>(unit_bump(0.0, 0.0, 1.0));
  const auto phi = unit_bump(0.2, 0.0, 0.8);
  const auto coarse = ensemble(s, th, phi, 8, 1.0 / 128, 0, midpoint_grid<2>(Vec<2>::Zero(), 1.0, 33));
  const auto fine = ensemble(s, th, phi, 8, 1.0 / 128, 3, midpoint_grid<2>(Vec<2>::Zero(), 1.0, 65));
  EXPECT_LE(coarse.ito, 5e-2);
  EXPECT_LE(fine.ito, 0.5 * coarse.ito);
  // both discretizations converge to the same identity
  EXPECT_LE(std::abs(coarse.ito - coarse.strat), 3.0 * std::hypot(coarse.ito_se, coarse.strat_se) + coarse.ito);
  EXPECT_LE(fine.strat, coarse.strat);
}

TEST(WeakResidual, EulerianAndLagrangianInnerProductsAgree) {
  const auto s = make_scenario("additive-linear");
  const auto p = sample_path(7, 1, 1.0, 1.0 / 128);
  const auto th = datum_bump<2>(unit_bump(0.0, 0.0, 1.0));
  const auto phi = unit_bump(0.2, 0.0, 0.8);
  const auto [eul, lag] = eulerian_lagrangian_pair<2>(th, phi, p, s.diffusion, *s.smooth_drift,
                                                      midpoint_grid<2>(Vec<2>::Zero(), 1.0, 65), 33, chart_box(1.0, 0.5));
  EXPECT_LE(std::abs(eul - lag), 1e-2 * th.value(Vec<2>::Zero()) * phi.l2_norm());
}

TEST(RandomTransport, NoDynamicsIsExactlyZero) {
  const auto s = make_scenario("zero");
  const auto p = sample_path(1, 1, 1.0, 1.0 / 32);
  AdditiveFrame<2> frame(p, s.diffusion);
  const auto r = random_transport_check<2>(datum_bump<2>(unit_bump()), unit_bump(0.1, 0.1, 0.5), frame, zero_field<2>(),
                                           midpoint_grid<2>(Vec<2>::Zero(), 1.0, 17));
  for (double v : r.residual) EXPECT_EQ(v, 0.0);
}

TEST(RandomTransport, ConstantDatumIsExactlyZero) {
  const auto s = make_scenario("additive-linear");
  const auto p = sample_path(1, 1, 1.0, 1.0 / 32);
  AdditiveFrame<2> frame(p, s.diffusion);
  const auto r = random_transport_check<2>(datum_constant<2>(3.0), unit_bump(), frame, *s.smooth_drift,
                                           midpoint_grid<2>(Vec<2>::Zero(), 2.0, 17));
  EXPECT_EQ(r.final_normalized(), 0.0);
}

TEST(RandomTransport, ResidualSmallAndHalving) {
  for (const char* name : {"ode-only", "additive-linear"}) {
    const auto s = make_scenario(name);
    const auto th = datum_bump<2>(unit_bump(0.0, 0.0, 1.0));
    const auto psi = unit_bump(0.1, 0.0, 0.8);
    const auto base = sample_path(3, s.m, 1.0, 1.0 / 32);
    double prev = INFINITY;
    for (int level = 0; level < 3; ++level) {
      AdditiveFrame<2> frame(refine_times(base, level), s.diffusion);
      const auto r = random_transport_check<2>(th, psi, frame, *s.smooth_drift,
                                               midpoint_grid<2>(Vec<2>::Zero(), 1.0, 33 << level));
      EXPECT_LE(r.final_normalized(), 5e-2) << name;
      EXPECT_LE(r.final_normalized(), 0.5 * prev) << name;
      prev = r.final_normalized();
    }
  }
}

TEST(CoveringGrid, GrowsUntilBoundaryIsClear) {
  const auto psi = unit_bump(0.5, 0.0, 0.5);
  const Vec<2> shift(3.0, 0.0);
  // a translation flow z + t shift, sampled at 31 times
  const auto g = covering_grid<2>(psi, 0.1, [&](const Vec<2>& z) {
    for (int k = 0; k <= 30; ++k)
      if (psi.s_of(z + (k / 30.0) * shift) < 1.0) return true;
    return false;
  });
  // every z whose shifted image meets the support is strictly inside the grid
  EXPECT_LE(g.lower(0) + 0.5 * g.spacing(0), psi.center(0) - shift(0) - psi.radius);
  EXPECT_NEAR(g.spacing(0), 0.1, 1e-12);
}

TEST(DensityEvolution, DivergenceFreeGivesUnitDensity) {
  // constant fields: rho~ = 1 exactly; the stochastic side is a midpoint quadrature of int grad psi = 0
  const auto s = make_scenario("additive-linear");
  const auto base = sample_path(2, 1, 1.0, 1.0 / 64);
  std::vector<double> res;
  for (int level = 0; level < 3; ++level) {
    const auto p = refine_times(base, 2 * level);
    const auto snap = diffusion_snapshot(TensorGrid<2>::cube(5.0, 21), p, s.diffusion, p.steps());
    const auto r = density_evolution_check<2>(p, s.diffusion, unit_bump(), 17 << level, 0.15 / (1 << level), snap);
    EXPECT_EQ(r.two_way_relative_error, 0.0);
    EXPECT_LE(r.residual, 1e-3);
    res.push_back(r.residual);
  }
  EXPECT_LE(res[1], 0.5 * res[0]);
  EXPECT_LE(res[2], 0.5 * res[0]);
}

TEST(DensityEvolution, OneDimensionalTwoWayAgreement) {
  const std::vector<SmoothVectorField<1>> fields{tanh_saturated<1>(Vec<1>(0.8), Vec<1>(0.7))};
  TestFunction<1> psi;
  psi.radius = 0.8;
  for (int j = 0; j < 4; ++j) {
    const auto base = sample_path(6 + j, 1, 1.0, 1.0 / 32);
    for (int level = 0; level < 3; ++level) {
      const auto p = refine_times(base, 2 * level);
      const auto snap = diffusion_snapshot(TensorGrid<1>::cube(6.0, 241), p, fields, p.steps());
      const auto r = density_evolution_check<1>(p, fields, psi, 64 << level, 0.01 / (1 << level), snap);
      EXPECT_LE(r.two_way_relative_error, 2.0 * p.h());
      EXPECT_LE(r.residual, 5e-2);
    }
  }
}

TEST(DensityEvolution, SmoothScenarioEnsembleResidualDecreases) {
  const auto s = make_scenario("smooth-nonlinear");
  double prev = INFINITY;
  for (int level = 0; level < 3; ++level) {
    double mean = 0.0;
    for (int j = 0; j < 8; ++j) {
      const auto p = refine_times(sample_path(20 + j, 1, 1.0, 1.0 / 32), 2 * level);
      const auto snap = diffusion_snapshot(TensorGrid<2>::cube(5.0, 101), p, s.diffusion, p.steps());
      const auto r = density_evolution_check<2>(p, s.diffusion, unit_bump(0.1, 0.0, 0.9), 17, 0.15, snap);
      EXPECT_LE(r.two_way_relative_error, 4.0 * p.h());
      mean += r.residual / 8;
    }
    EXPECT_LE(mean, 5e-2);
    EXPECT_LE(mean, 0.5 * prev);
    prev = mean;
  }
}
