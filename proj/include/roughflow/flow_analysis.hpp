#pragma once

#include "roughflow/catalog.hpp"
#include "roughflow/decomposition.hpp"

#include <algorithm>
#include <functional>
#include <map>
#include <numeric>
#include <sstream>
#include <tuple>

namespace roughflow {

// ---------------------------------------------------------------------------
// Quasi-invariance density of X_t = phi_t(Y_t)

template <int D>
struct PushForward {
  double density = 0.0;
  Vec<D> preimage = Vec<D>::Zero();  // X_t^{-1}(y)
};

/// rho~_t(phi_t^{-1}(y)) |det K_t(phi_t^{-1}(y))| with phi_t^{-1} by re-integration Newton.
template <int D>
PushForward<D> quasi_invariance_density(const FlowField<D>& Y, std::size_t ti, const DiffusionSnapshot<D>& snap,
                                        const BrownianPath& path, const std::vector<SmoothVectorField<D>>& fields,
                                        const Vec<D>& y) {
  require(snap.step == Y.steps[ti], ErrorKind::InvalidArgument, "snapshot and flow field at different steps");
  const Vec<D> z = fields.empty() ? y : invert_point<D>(snap, path, fields, y).x;
  const double detK = fields.empty() ? 1.0 : 1.0 / flow_endpoint<D>(z, path, fields, nullptr, snap.step).J.determinant();
  const auto inv = invert_flow_field(Y, ti, z);
  const CubicStencil<D> st(*Y.grid, inv.x);
  return {std::exp(-st.value(Y.log_rho[ti])) * std::abs(detK), inv.x};
}

struct HistogramReport {
  int bins_per_axis = 0;
  double l1_discrepancy = 0.0;  // sum |hist - formula| / sum formula
  double histogram_mass = 0.0;
  double formula_mass = 0.0;
  nlohmann::json to_json() const {
    return {{"bins_per_axis", bins_per_axis},
            {"l1_discrepancy", l1_discrepancy},
            {"histogram_mass", histogram_mass},
            {"formula_mass", formula_mass}};
  }
};

/// Histogram of the weighted sample images against the bin integrals of `density_in_ball`, which
/// returns the push-forward density times the indicator that the preimage lies in the sampled ball.
template <int D, class F>
HistogramReport histogram_check(const std::vector<Vec<D>>& images, const std::vector<double>& weights,
                                const F& density_in_ball, int bins, int sub) {
  Vec<D> lo = Vec<D>::Constant(std::numeric_limits<double>::infinity()), hi = -lo;
  for (std::size_t i = 0; i < images.size(); ++i)
    if (weights[i] > 0) {
      lo = lo.cwiseMin(images[i]);
      hi = hi.cwiseMax(images[i]);
    }
  const Vec<D> width = (hi - lo) / bins;
  int total = 1;
  for (int a = 0; a < D; ++a) total *= bins;
  std::vector<double> hist(total, 0.0), form(total, 0.0);
  auto bin_of = [&](const Vec<D>& y) {
    int flat = 0;
    for (int a = 0; a < D; ++a) {
      const int b = std::clamp(static_cast<int>(std::floor((y(a) - lo(a)) / width(a))), 0, bins - 1);
      flat = flat * bins + b;
    }
    return flat;
  };
  for (std::size_t i = 0; i < images.size(); ++i)
    if (weights[i] > 0) hist[bin_of(images[i])] += weights[i];
  const TensorGrid<D> fine = [&] {
    TensorGrid<D> g;
    g.spacing = width / sub;
    g.lower = lo + 0.5 * g.spacing;
    for (int a = 0; a < D; ++a) g.counts[a] = bins * sub;
    return g;
  }();
  for (std::size_t i = 0; i < fine.size(); ++i) {
    const Vec<D> y = fine.node(i);
    form[bin_of(y)] += density_in_ball(y) * fine.cell_volume();
  }
  HistogramReport r;
  r.bins_per_axis = bins;
  double diff = 0.0;
  for (int b = 0; b < total; ++b) {
    diff += std::abs(hist[b] - form[b]);
    r.histogram_mass += hist[b];
    r.formula_mass += form[b];
  }
  r.l1_discrepancy = diff / r.formula_mass;
  return r;
}

// ---------------------------------------------------------------------------
// Time-reversed inverse flow

/// Fields driving the inverse flow on the reversed path: every diffusion field negated, drift negated.
template <int D>
std::vector<SmoothVectorField<D>> reversed_fields(const std::vector<SmoothVectorField<D>>& fields) {
  std::vector<SmoothVectorField<D>> out;
  for (const auto& f : fields) out.push_back(f.negated());
  return out;
}

template <int D>
struct InverseFlow {
  BrownianPath path;  // reversed
  std::vector<SmoothVectorField<D>> fields;
  FlowField<D> Y;
  std::vector<Vec<D>> X_T;  // X^_T(y) for every input point
};

/// Inverse flow by the decomposition pipeline on the reversed path; the points are the y's to invert.
template <int D>
InverseFlow<D> inverse_flow(const BrownianPath& path, const std::vector<SmoothVectorField<D>>& fields,
                            const SmoothVectorField<D>& drift, const std::vector<Vec<D>>& points,
                            const TensorGrid<D>& chart_nodes) {
  InverseFlow<D> inv;
  inv.path = reverse(path);
  inv.fields = reversed_fields(fields);
  auto frame = make_frame<D>(inv.path, inv.fields, chart_nodes);
  LagrangianOptions opt;
  opt.stride = inv.path.steps();
  inv.Y = lagrangian_flow<D>(points, std::vector<double>(points.size(), 1.0), *frame, drift.negated(), opt);
  inv.X_T = compose_final(inv.Y, inv.path, inv.fields);
  return inv;
}

struct RoundtripReport {
  double h = 0.0;
  double median_error = 0.0;
  double max_error = 0.0;
  nlohmann::json to_json() const { return {{"h", h}, {"median_error", median_error}, {"max_error", max_error}}; }
};

inline double median(std::vector<double> v) {
  if (v.empty()) return 0.0;
  const std::size_t m = v.size() / 2;
  std::nth_element(v.begin(), v.begin() + m, v.end());
  const double hi = v[m];
  if (v.size() % 2) return hi;
  return 0.5 * (hi + *std::max_element(v.begin(), v.begin() + m));
}

/// |X^_T(X_T(x)) - x| with the forward map from direct integration.
template <int D>
RoundtripReport roundtrip(const BrownianPath& path, const std::vector<SmoothVectorField<D>>& fields,
                          const SmoothVectorField<D>& drift, const std::vector<Vec<D>>& points,
                          const TensorGrid<D>& chart_nodes) {
  std::vector<Vec<D>> fwd(points.size());
  for (std::size_t i = 0; i < points.size(); ++i)
    fwd[i] = flow_endpoint<D>(points[i], path, fields, &drift, path.steps(), 0).x;
  const auto inv = inverse_flow<D>(path, fields, drift, fwd, chart_nodes);
  std::vector<double> err(points.size());
  for (std::size_t i = 0; i < points.size(); ++i) err[i] = (inv.X_T[i] - points[i]).norm();
  RoundtripReport r;
  r.h = path.h();
  r.median_error = median(err);
  r.max_error = *std::max_element(err.begin(), err.end());
  return r;
}

// ---------------------------------------------------------------------------
// sigma_T

/// exp(sum_i int div A_i(X) o dw^i + int div A0(X) dt): midpoint Stratonovich sums, trapezoid in t.
/// The trajectory must be stored at every step.
template <int D>
double sigma_density(const FlowTrajectory<D>& X, const BrownianPath& path,
                     const std::vector<SmoothVectorField<D>>& fields, const SmoothVectorField<D>& drift) {
  require(X.states.size() == path.steps() + 1, ErrorKind::InvalidArgument, "sigma needs every step stored");
  double s = 0.0;
  for (std::size_t k = 0; k < path.steps(); ++k) {
    const Vec<D> mid = 0.5 * (X.states[k] + X.states[k + 1]);
    for (std::size_t i = 0; i < fields.size(); ++i)
      if (!fields[i].is_constant()) s += fields[i].divergence(mid) * path.dw(k, static_cast<int>(i));
    if (!drift.is_zero())
      s += 0.5 * path.h() * (drift.divergence(X.states[k]) + drift.divergence(X.states[k + 1]));
  }
  return std::exp(s);
}

// ---------------------------------------------------------------------------
// Stability under mollification

struct StabilityConfig {
  std::vector<int> levels{4, 8, 16, 32};
  int reference = 64;
  int paths = 32;
  std::uint64_t seed_base = 1;
  double T = 1.0;
  double h = 1.0 / 128;
  double radius = 1.0;
  int grid_points = 17;
  std::vector<double> p_list{2.0};
  MollifierSpec<2> spec{};
  double chart_half_width = 3.0;
  double chart_spacing = 0.05;
};

struct StabilityReport {
  std::string scenario;
  std::vector<int> levels;
  int reference = 0;
  std::vector<std::vector<double>> per_path;  // [path][level] D_n
  std::map<double, std::vector<std::vector<double>>> per_path_p;
  std::vector<double> D1, D1_se;
  std::map<double, std::vector<double>> Dp, Dp_se;
  bool monotone = false;
  bool halved = false;
  std::map<double, bool> monotone_p, halved_p;

  nlohmann::json to_json() const {
    nlohmann::json dp = nlohmann::json::object(), dpse = nlohmann::json::object(), mp = nlohmann::json::object(),
                   hp = nlohmann::json::object();
    for (const auto& [p, v] : Dp) dp[detail_key(p)] = v;
    for (const auto& [p, v] : Dp_se) dpse[detail_key(p)] = v;
    for (const auto& [p, v] : monotone_p) mp[detail_key(p)] = v;
    for (const auto& [p, v] : halved_p) hp[detail_key(p)] = v;
    return {{"scenario", scenario}, {"levels", levels}, {"reference", reference}, {"D1", D1},
            {"D1_standard_error", D1_se}, {"Dp", dp}, {"Dp_standard_error", dpse}, {"monotone", monotone},
            {"last_at_most_half_first", halved}, {"monotone_p", mp}, {"last_at_most_half_first_p", hp},
            {"thresholds_note", "monotone within 3 standard errors of paired differences; ratio 0.5 is an engineering choice"}};
  }

  static std::string detail_key(double p) {
    std::ostringstream os;
    os << p;
    return os.str();
  }
};

namespace detail {

inline double mean_of(const std::vector<double>& v) { return std::accumulate(v.begin(), v.end(), 0.0) / v.size(); }

inline double standard_error(const std::vector<double>& v) {
  if (v.size() < 2) return 0.0;
  const double m = mean_of(v);
  double s = 0.0;
  for (double x : v) s += (x - m) * (x - m);
  return std::sqrt(s / (v.size() - 1) / v.size());
}

// Monotone within 3 standard errors of paired differences, and last <= 0.5 first.
inline std::pair<bool, bool> stability_flags(const std::vector<std::vector<double>>& per_path, std::size_t levels) {
  bool mono = true;
  for (std::size_t l = 0; l + 1 < levels; ++l) {
    std::vector<double> diff;
    for (const auto& row : per_path) diff.push_back(row[l + 1] - row[l]);
    if (mean_of(diff) > 3.0 * standard_error(diff)) mono = false;
  }
  std::vector<double> first, last;
  for (const auto& row : per_path) {
    first.push_back(row.front());
    last.push_back(row[levels - 1]);
  }
  return {mono, mean_of(last) <= 0.5 * mean_of(first)};
}

}  // namespace detail

/// X_t at every stored step of Y.
template <int D>
std::vector<std::vector<Vec<D>>> composed_states(const FlowField<D>& Y, const BrownianPath& path,
                                                 const std::vector<SmoothVectorField<D>>& fields) {
  bool additive = true;
  for (const auto& f : fields) additive = additive && f.is_constant();
  if (!additive) return compose(Y, path, fields);
  std::vector<std::vector<Vec<D>>> X(Y.steps.size(), std::vector<Vec<D>>(Y.size()));
  Vec<D> shift = Vec<D>::Zero();
  std::size_t at = 0;
  for (std::size_t ti = 0; ti < Y.steps.size(); ++ti) {
    for (; at < Y.steps[ti]; ++at)
      for (std::size_t i = 0; i < fields.size(); ++i)
        shift += fields[i].value(Vec<D>::Zero()) * path.dw(at, static_cast<int>(i));
    for (std::size_t p = 0; p < Y.size(); ++p) X[ti][p] = Y.Y[ti][p] + shift;
  }
  return X;
}

/// D_n = sum_x w_x sup_t |X^n_t(x) - X^ref_t(x)| per path and level; L^p variants.
inline StabilityReport stability_experiment(const Scenario& sc, const StabilityConfig& cfg,
                                            const std::function<SmoothVectorField<2>(int)>& drift_at_level = {}) {
  require(std::is_sorted(cfg.levels.begin(), cfg.levels.end()), ErrorKind::InvalidArgument, "levels must ascend");
  require(!cfg.levels.empty() && cfg.paths >= 2, ErrorKind::InvalidArgument, "need levels and at least two paths");
  StabilityReport rep;
  rep.scenario = sc.name;
  rep.levels = cfg.levels;
  rep.reference = cfg.reference;
  const auto grid = TensorGrid<2>::cube(cfg.radius, cfg.grid_points);
  std::vector<Vec<2>> pts;
  std::vector<double> w;
  for (std::size_t i = 0; i < grid.size(); ++i)
    if (grid.node(i).norm() <= cfg.radius) {
      pts.push_back(grid.node(i));
      w.push_back(grid.cell_volume());
    }
  const auto chart = TensorGrid<2>::box(Vec<2>::Constant(-cfg.chart_half_width), Vec<2>::Constant(cfg.chart_half_width),
                                        cfg.chart_spacing);
  auto drift_for = [&](int n) { return drift_at_level ? drift_at_level(n) : sc.drift(n, cfg.spec); };
  auto run = [&](const BrownianPath& path, int n) {
    auto frame = make_frame<2>(path, sc.diffusion, chart);
    const auto Y = lagrangian_flow<2>(pts, w, *frame, drift_for(n));
    return composed_states(Y, path, sc.diffusion);
  };
  for (int j = 0; j < cfg.paths; ++j) {
    const auto path = sample_path(cfg.seed_base + j, sc.m, cfg.T, cfg.h);
    const auto ref = run(path, cfg.reference);
    std::vector<double> row;
    std::map<double, std::vector<double>> row_p;
    for (int n : cfg.levels) {
      const auto X = run(path, n);
      double d1 = 0.0;
      std::map<double, double> dp;
      for (std::size_t p = 0; p < pts.size(); ++p) {
        double sup = 0.0;
        for (std::size_t ti = 0; ti < X.size(); ++ti) sup = std::max(sup, (X[ti][p] - ref[ti][p]).norm());
        d1 += w[p] * sup;
        for (double q : cfg.p_list) dp[q] += w[p] * std::pow(sup, q);
      }
      row.push_back(d1);
      for (double q : cfg.p_list) row_p[q].push_back(std::pow(dp[q], 1.0 / q));
    }
    rep.per_path.push_back(row);
    for (double q : cfg.p_list) rep.per_path_p[q].push_back(row_p[q]);
  }
  const std::size_t L = cfg.levels.size();
  auto column = [&](const std::vector<std::vector<double>>& rows, std::size_t l) {
    std::vector<double> c;
    for (const auto& r : rows) c.push_back(r[l]);
    return c;
  };
  for (std::size_t l = 0; l < L; ++l) {
    rep.D1.push_back(detail::mean_of(column(rep.per_path, l)));
    rep.D1_se.push_back(detail::standard_error(column(rep.per_path, l)));
    for (double q : cfg.p_list) {
      rep.Dp[q].push_back(detail::mean_of(column(rep.per_path_p[q], l)));
      rep.Dp_se[q].push_back(detail::standard_error(column(rep.per_path_p[q], l)));
    }
  }
  std::tie(rep.monotone, rep.halved) = detail::stability_flags(rep.per_path, L);
  for (double q : cfg.p_list) std::tie(rep.monotone_p[q], rep.halved_p[q]) = detail::stability_flags(rep.per_path_p[q], L);
  return rep;
}

// ---------------------------------------------------------------------------
// Growth diagnostics

struct GrowthDiagnostics {
  double alpha = 1.0, beta = 1.0, eps1 = 0.5;
  double F = 0.0, G = 0.0, Phi = 0.0;
  std::vector<double> F_paths, G_paths, Phi_paths;
  double F_q90 = 0.0, G_q90 = 0.0, Phi_q90 = 0.0;
  bool finite = true;

  nlohmann::json to_json() const {
    return {{"alpha", alpha}, {"beta", beta}, {"eps1", eps1}, {"F", F}, {"G", G}, {"Phi_T", Phi},
            {"F_q90", F_q90}, {"G_q90", G_q90}, {"Phi_T_q90", Phi_q90}, {"finite", finite}};
  }
};

inline double quantile(std::vector<double> v, double q) {
  if (v.empty()) return 0.0;
  std::sort(v.begin(), v.end());
  const std::size_t i = std::min(v.size() - 1, static_cast<std::size_t>(std::floor(q * (v.size() - 1) + 0.5)));
  return v[i];
}

/// Maxima of |phi_t(x)|/(1+|x|^alpha), |K_t(x)|/(1+|x|^beta), |K_t A0(phi_t)(x)|/(1+|x|^(1-eps1))
/// over stored times, sampled x in B(radius) and paths.
inline GrowthDiagnostics growth_diagnostics(const Scenario& sc, const SmoothVectorField<2>& drift, int paths,
                                            int points, double radius, double alpha, double beta, double eps1,
                                            double T, double h, std::uint64_t seed_base, std::size_t stride = 8) {
  GrowthDiagnostics g;
  g.alpha = alpha;
  g.beta = beta;
  g.eps1 = eps1;
  FlowOptions opt;
  opt.stride = stride;
  for (int j = 0; j < paths; ++j) {
    const auto path = sample_path(seed_base + j, sc.m, T, h);
    double F = 0.0, G = 0.0, P = 0.0;
    for (int i = 0; i < points; ++i) {
      const Vec<2> x = sample_ball<2>(seed_base + j, i, radius);
      const auto tr = diffusion_flow<2>(x, path, sc.diffusion, opt);
      const double r = x.norm();
      for (std::size_t k = 0; k < tr.states.size(); ++k) {
        F = std::max(F, tr.states[k].norm() / (1.0 + std::pow(r, alpha)));
        G = std::max(G, tr.inverses[k].norm() / (1.0 + std::pow(r, beta)));
        P = std::max(P, (tr.inverses[k] * drift.value(tr.states[k])).norm() / (1.0 + std::pow(r, 1.0 - eps1)));
      }
    }
    g.F_paths.push_back(F);
    g.G_paths.push_back(G);
    g.Phi_paths.push_back(P);
    g.F = std::max(g.F, F);
    g.G = std::max(g.G, G);
    g.Phi = std::max(g.Phi, P);
  }
  g.F_q90 = quantile(g.F_paths, 0.9);
  g.G_q90 = quantile(g.G_paths, 0.9);
  g.Phi_q90 = quantile(g.Phi_paths, 0.9);
  g.finite = std::isfinite(g.F) && std::isfinite(g.G) && std::isfinite(g.Phi);
  return g;
}

}  // namespace roughflow
