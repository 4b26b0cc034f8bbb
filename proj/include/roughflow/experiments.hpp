#pragma once

#include "roughflow/flow_analysis.hpp"
#include "roughflow/maximal.hpp"
#include "roughflow/transport.hpp"

#include <unsupported/Eigen/MatrixFunctions>

#include <cstdio>
#include <fstream>
#include <map>
#include <set>
#include <string>
#include <vector>

namespace roughflow {

// ---------------------------------------------------------------------------
// Tables and outcomes

struct CsvTable {
  std::string name;  // file name inside the output directory
  std::vector<std::string> columns;
  std::vector<std::vector<std::string>> rows;

  template <class... T>
  void add(const T&... cells) {
    rows.push_back({cell(cells)...});
  }

  static std::string cell(const std::string& s) { return s; }
  static std::string cell(const char* s) { return s; }
  static std::string cell(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
  }
  static std::string cell(bool v) { return v ? "1" : "0"; }
  template <class I>
  static std::enable_if_t<std::is_integral_v<I>, std::string> cell(I v) {
    return std::to_string(v);
  }

  void write(std::ostream& os) const {
    for (std::size_t c = 0; c < columns.size(); ++c) os << (c ? "," : "") << columns[c];
    os << '\n';
    for (const auto& r : rows) {
      for (std::size_t c = 0; c < r.size(); ++c) os << (c ? "," : "") << r[c];
      os << '\n';
    }
  }
};

/// What a command produced: a result document, named invariants, detail tables.
struct Outcome {
  nlohmann::json result = nlohmann::json::object();
  std::map<std::string, bool> invariants;
  std::vector<CsvTable> tables;

  bool ok() const {
    for (const auto& [name, pass] : invariants)
      if (!pass) return false;
    return true;
  }
};

// ---------------------------------------------------------------------------
// Strict config reading

namespace detail {

/// Reads keys off a JSON object, records them, and rejects leftovers.
class ConfigReader {
 public:
  ConfigReader(const nlohmann::json& j, std::string where) : j_(j), where_(std::move(where)) {
    if (!j_.is_object()) fail("expected an object");
  }

  template <class T>
  void get(const char* key, T& out) {
    seen_.insert(key);
    if (!j_.contains(key)) return;
    try {
      out = j_.at(key).get<T>();
    } catch (const nlohmann::json::exception&) {
      fail(std::string("bad value for '") + key + "'");
    }
  }

  /// Sub-object, or an empty object when absent.
  nlohmann::json section(const char* key) {
    seen_.insert(key);
    if (!j_.contains(key)) return nlohmann::json::object();
    return j_.at(key);
  }

  void finish() const {
    for (const auto& [k, v] : j_.items())
      if (!seen_.count(k)) fail("unknown key '" + k + "'");
  }

  [[noreturn]] void fail(const std::string& what) const { throw Error(ErrorKind::ConfigParse, where_ + ": " + what); }

 private:
  const nlohmann::json& j_;
  std::string where_;
  std::set<std::string> seen_;
};

inline void check(bool cond, const std::string& what) {
  if (!cond) throw Error(ErrorKind::ConfigParse, what);
}

inline bool integral_ratio(double T, double h) {
  const double n = T / h;
  return h > 0.0 && T > 0.0 && std::abs(n - std::round(n)) <= 1e-9 * std::max(1.0, n);
}

inline TensorGrid<2> chart_box(double half, double spacing) {
  return TensorGrid<2>::box(Vec<2>::Constant(-half), Vec<2>::Constant(half), spacing);
}

inline std::vector<Vec<2>> ball_nodes(double R, int points) {
  const auto g = TensorGrid<2>::cube(R, points);
  std::vector<Vec<2>> out;
  for (std::size_t i = 0; i < g.size(); ++i)
    if (g.node(i).norm() <= R) out.push_back(g.node(i));
  return out;
}

inline double slope(const std::vector<double>& x, const std::vector<double>& y) {
  const double mx = mean_of(x), my = mean_of(y);
  double sxy = 0.0, sxx = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxy += (x[i] - mx) * (y[i] - my);
    sxx += (x[i] - mx) * (x[i] - mx);
  }
  return sxy / sxx;
}

// Strictly decreasing, with values at roundoff level counting as converged.
inline bool decreasing(const std::vector<double>& v, double floor = 1e-13) {
  for (std::size_t i = 1; i < v.size(); ++i)
    if (!(v[i] < v[i - 1] || v[i] <= floor)) return false;
  return true;
}

// Each entry at most `ratio` times the previous, or at roundoff level.
inline bool halving(const std::vector<double>& v, double ratio = 0.5, double floor = 1e-13) {
  for (std::size_t i = 1; i < v.size(); ++i)
    if (!(v[i] <= ratio * v[i - 1] || v[i] <= floor)) return false;
  return true;
}

inline Vec<2> vec2(const std::vector<double>& v, const char* what) {
  check(v.size() == 2, std::string(what) + " must have two components");
  return Vec<2>(v[0], v[1]);
}

}  // namespace detail

/// X_T = e^{BT} x + sum_k e^{B(T - t_k - h/2)} sigma dw_k for dX = B X dt + sigma dw.
inline Vec<2> linear_additive_endpoint(const Mat<2>& B, const Vec<2>& sigma, const Vec<2>& x, const BrownianPath& p) {
  const double T = p.T(), h = p.h();
  Vec<2> out = (B * T).exp() * x;
  if (p.m() == 0) return out;
  const Mat<2> step_back = (-B * h).exp();
  Mat<2> E = (B * (T - 0.5 * h)).exp();
  for (std::size_t k = 0; k < p.steps(); ++k) {
    out += E * sigma * p.dw(k, 0);
    E = E * step_back;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Scenario configuration

struct ScenarioConfig {
  std::string scenario = "additive-linear";
  std::vector<std::string> scenarios;  // invert / transport: several scenarios at once
  double T = 1.0;
  double h = 1.0 / 1024;  // finest step
  int refinements = 4;    // coarse step is h * 2^refinements
  double R = 1.0;
  int grid_points = 17;
  std::uint64_t seed_base = 1;
  int paths = 32;
  std::vector<int> levels{4, 8, 16, 32};
  int reference = 64;
  std::vector<double> p{2.0};
  double chart_half_width = 3.5;
  double chart_spacing = 0.05;
  std::string output_dir;
  std::string calibration_file;

  struct Density {
    double h = 1.0 / 32;
    double grid_half_width = 1.3;
    int grid_points = 161;
    int samples = 10;
    double sample_radius = 0.8;
    int bins = 8;
    int sub = 4;
    double snapshot_spacing = 0.1;
  } density;

  struct Transport {
    double h = 1.0 / 128;
    int grid_points = 33;
    int refine = 3;
    std::vector<double> datum_center{0.0, 0.0};
    double datum_radius = 1.0;
    std::vector<double> test_center{0.2, 0.0};
    double test_radius = 0.8;
  } transport;

  struct Identities {
    double eps = 0.1;
    double half_width = 2.0;
    int grid_points = 21;
    double step = 1e-4;
    double liouville_h = 1.0 / 4096;
  } identities;

  CalibrationConfig calibration;
  LipschitzConfig lipschitz;

  static ScenarioConfig from_json(const nlohmann::json& j) {
    ScenarioConfig c;
    detail::ConfigReader r(j, "config");
    r.get("scenario", c.scenario);
    r.get("scenarios", c.scenarios);
    r.get("T", c.T);
    r.get("h", c.h);
    r.get("refinements", c.refinements);
    r.get("R", c.R);
    r.get("grid_points", c.grid_points);
    r.get("seed_base", c.seed_base);
    r.get("paths", c.paths);
    r.get("levels", c.levels);
    r.get("reference", c.reference);
    r.get("p", c.p);
    r.get("output_dir", c.output_dir);
    r.get("calibration_file", c.calibration_file);
    {
      const auto s = r.section("chart");
      detail::ConfigReader q(s, "chart");
      q.get("half_width", c.chart_half_width);
      q.get("spacing", c.chart_spacing);
      q.finish();
    }
    {
      const auto s = r.section("density");
      detail::ConfigReader q(s, "density");
      auto& d = c.density;
      q.get("h", d.h);
      q.get("grid_half_width", d.grid_half_width);
      q.get("grid_points", d.grid_points);
      q.get("samples", d.samples);
      q.get("sample_radius", d.sample_radius);
      q.get("bins", d.bins);
      q.get("sub", d.sub);
      q.get("snapshot_spacing", d.snapshot_spacing);
      q.finish();
    }
    {
      const auto s = r.section("transport");
      detail::ConfigReader q(s, "transport");
      auto& t = c.transport;
      q.get("h", t.h);
      q.get("grid_points", t.grid_points);
      q.get("refine", t.refine);
      q.get("datum_center", t.datum_center);
      q.get("datum_radius", t.datum_radius);
      q.get("test_center", t.test_center);
      q.get("test_radius", t.test_radius);
      q.finish();
    }
    {
      const auto s = r.section("identities");
      detail::ConfigReader q(s, "identities");
      auto& t = c.identities;
      q.get("eps", t.eps);
      q.get("half_width", t.half_width);
      q.get("grid_points", t.grid_points);
      q.get("step", t.step);
      q.get("liouville_h", t.liouville_h);
      q.finish();
    }
    {
      const auto s = r.section("calibration");
      detail::ConfigReader q(s, "calibration");
      auto& t = c.calibration;
      q.get("catalog_size", t.catalog_size);
      q.get("grid_half_width", t.grid_half_width);
      q.get("grid_points", t.grid_points);
      q.get("rho", t.rho);
      q.get("R", t.R);
      q.get("radii", t.radii);
      q.get("alphas", t.alphas);
      q.get("safety", t.safety);
      q.finish();
    }
    {
      const auto s = r.section("lipschitz");
      detail::ConfigReader q(s, "lipschitz");
      auto& t = c.lipschitz;
      q.get("eps_fraction", t.eps_fraction);
      q.get("grid_points", t.grid_points);
      q.get("stride", t.stride);
      q.get("mollify_level", t.mollify_level);
      q.get("quadrature_points", t.quadrature_points);
      q.get("gradient_spacing", t.gradient_spacing);
      q.get("radii", t.radii);
      q.finish();
    }
    r.finish();
    c.validate();
    return c;
  }

  void validate() const {
    using detail::check;
    check(detail::integral_ratio(T, h), "T/h must be a positive integer");
    check(refinements >= 0 && refinements <= 12, "refinements must be in [0, 12]");
    check(R > 0.0 && grid_points >= 2, "need R > 0 and at least 2 grid points");
    check(paths >= 1, "paths must be >= 1");
    check(!levels.empty() && std::is_sorted(levels.begin(), levels.end()) &&
              std::adjacent_find(levels.begin(), levels.end()) == levels.end() && levels.front() >= 1,
          "levels must be positive and strictly ascending");
    check(reference > levels.back(), "reference level must exceed every level");
    for (double q : p) check(q >= 1.0, "p exponents must be >= 1");
    check(chart_spacing > 0.0 && chart_half_width > R, "chart must cover B(R)");
    check(detail::integral_ratio(T, density.h), "T/density.h must be a positive integer");
    check(density.grid_half_width >= R, "density grid must cover B(R)");
    check(density.grid_points >= 2 && density.bins >= 1 && density.sub >= 1 && density.samples >= 1,
          "density grid, bins and samples must be positive");
    check(detail::integral_ratio(T, transport.h), "T/transport.h must be a positive integer");
    check(transport.grid_points >= 3 && transport.refine >= 0, "transport grid and refine out of range");
    check(transport.datum_radius > 0.0 && transport.test_radius > 0.0, "transport radii must be positive");
    detail::vec2(transport.datum_center, "transport.datum_center");
    detail::vec2(transport.test_center, "transport.test_center");
    check(identities.grid_points >= 2 && identities.step > 0.0, "identities grid and step must be positive");
    check(detail::integral_ratio(T, identities.liouville_h), "T/identities.liouville_h must be a positive integer");
    check(calibration.catalog_size >= 1 && calibration.grid_points >= 3, "calibration catalog and grid too small");
    check(calibration.grid_half_width >= calibration.rho + calibration.R, "calibration grid must cover B(rho + R)");
    check(lipschitz.grid_points >= 3 && lipschitz.stride >= 1, "lipschitz grid and stride out of range");
    check(lipschitz.eps_fraction > 0.0 && lipschitz.eps_fraction < 1.0, "lipschitz eps_fraction must lie in (0, 1)");
  }

  nlohmann::json to_json() const {
    return {{"scenario", scenario},
            {"scenarios", scenarios},
            {"T", T},
            {"h", h},
            {"refinements", refinements},
            {"R", R},
            {"grid_points", grid_points},
            {"seed_base", seed_base},
            {"paths", paths},
            {"levels", levels},
            {"reference", reference},
            {"p", p},
            {"chart", {{"half_width", chart_half_width}, {"spacing", chart_spacing}}},
            {"density",
             {{"h", density.h},
              {"grid_half_width", density.grid_half_width},
              {"grid_points", density.grid_points},
              {"samples", density.samples},
              {"sample_radius", density.sample_radius},
              {"bins", density.bins},
              {"sub", density.sub},
              {"snapshot_spacing", density.snapshot_spacing}}},
            {"transport",
             {{"h", transport.h},
              {"grid_points", transport.grid_points},
              {"refine", transport.refine},
              {"datum_center", transport.datum_center},
              {"datum_radius", transport.datum_radius},
              {"test_center", transport.test_center},
              {"test_radius", transport.test_radius}}},
            {"identities",
             {{"eps", identities.eps},
              {"half_width", identities.half_width},
              {"grid_points", identities.grid_points},
              {"step", identities.step},
              {"liouville_h", identities.liouville_h}}},
            {"calibration", calibration.to_json()},
            {"lipschitz", lipschitz.to_json()}};
  }
};

/// The versioned summary document; everything in it is deterministic given the config.
inline nlohmann::json summary_json(const std::string& command, const ScenarioConfig& cfg, const Outcome& o) {
  std::vector<std::string> files;
  for (const auto& t : o.tables) files.push_back(t.name);
  return {{"schema_version", 1}, {"command", command},      {"config", cfg.to_json()}, {"result", o.result},
          {"invariants", o.invariants}, {"ok", o.ok()}, {"files", files}};
}

inline ScenarioConfig read_config_file(const std::string& file) {
  std::ifstream is(file);
  if (!is) throw Error(ErrorKind::ConfigParse, "cannot open config " + file);
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(is);
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::ConfigParse, file + ": " + e.what());
  }
  return ScenarioConfig::from_json(j);
}

// ---------------------------------------------------------------------------
// simulate

/// Decomposition X = phi(Y) against the direct solver and, for linear additive scenarios, the closed form;
/// then the push-forward density on one path.
inline Outcome run_simulate(const ScenarioConfig& cfg) {
  const Scenario sc = make_scenario(cfg.scenario);
  const SmoothVectorField<2> drift = sc.drift();
  const auto pts = detail::ball_nodes(cfg.R, cfg.grid_points);
  const auto chart = detail::chart_box(cfg.chart_half_width, cfg.chart_spacing);
  const double h_coarse = cfg.h * std::pow(2.0, cfg.refinements);
  require(detail::integral_ratio(cfg.T, h_coarse), ErrorKind::ConfigParse, "T / (h 2^refinements) must be an integer");
  const int L = cfg.refinements + 1;
  const bool closed_form = sc.linear_B.has_value() && sc.additive() && sc.m <= 1;

  Outcome out;
  CsvTable levels{"levels.csv", {"path_seed", "level", "h", "compose_gap", "closed_form_error"}, {}};
  CsvTable flow{"flow_field.csv", {"t", "x_1", "x_2", "Y_1", "Y_2", "rho"}, {}};
  std::vector<std::vector<double>> gap(L), cf(L);
  bool identity_ok = true;
  for (int j = 0; j < cfg.paths; ++j) {
    const std::uint64_t seed = cfg.seed_base + j;
    const auto base = sample_path(seed, sc.m, cfg.T, h_coarse);
    const auto truth_path = refine_times(base, cfg.refinements + 4);
    for (int l = 0; l < L; ++l) {
      const auto path = refine_times(base, l);
      auto frame = make_frame<2>(path, sc.diffusion, chart);
      LagrangianOptions opt;
      opt.stride = std::max<std::size_t>(1, path.steps() / 32);
      const auto Y = lagrangian_flow<2>(pts, std::vector<double>(pts.size(), 1.0), *frame, drift, opt);
      const auto X = composed_states(Y, path, sc.diffusion);
      double g = 0.0, e = 0.0;
      for (std::size_t i = 0; i < pts.size(); ++i) {
        const Vec<2> direct = direct_flow<2>(pts[i], path, sc.diffusion, drift).final_state();
        g = std::max(g, (X.back()[i] - direct).norm());
        if (closed_form)
          e = std::max(e, (X.back()[i] - linear_additive_endpoint(*sc.linear_B, sc.sigma, pts[i], truth_path)).norm());
        if (sc.name == "zero")
          for (const auto& Xt : X) identity_ok = identity_ok && Xt[i] == pts[i];
      }
      gap[l].push_back(g);
      cf[l].push_back(e);
      levels.add(seed, l, path.h(), g, e);
      if (j == 0 && l == L - 1)
        for (std::size_t ti = 0; ti < Y.steps.size(); ++ti)
          for (std::size_t i = 0; i < pts.size(); ++i)
            flow.add(Y.times[ti], pts[i](0), pts[i](1), Y.Y[ti][i](0), Y.Y[ti][i](1), std::exp(Y.log_rho[ti][i]));
    }
  }
  std::vector<double> hs, gap_mean, cf_mean, log_h, log_cf;
  for (int l = 0; l < L; ++l) {
    hs.push_back(h_coarse / std::pow(2.0, l));
    gap_mean.push_back(detail::mean_of(gap[l]));
    cf_mean.push_back(detail::mean_of(cf[l]));
    log_h.push_back(std::log(hs.back()));
    log_cf.push_back(std::log(std::max(cf_mean.back(), 1e-300)));
  }
  double gap_max = 0.0;
  for (const auto& g : gap) gap_max = std::max(gap_max, *std::max_element(g.begin(), g.end()));
  out.result["h"] = hs;
  out.result["compose_gap_mean"] = gap_mean;
  out.result["compose_gap_max"] = gap_max;
  out.invariants["compose_gap_at_most_1e-2"] = gap_max <= 1e-2;
  // mollified drifts have level-dependent derivatives, so halving is only asserted for smooth drifts
  if (L >= 2 && !sc.rough()) out.invariants["compose_gap_halves"] = detail::halving(gap_mean);
  if (closed_form) {
    const double order = L >= 2 ? detail::slope(log_h, log_cf) : 0.0;
    out.result["closed_form_error_mean"] = cf_mean;
    out.result["strong_order"] = order;
    out.invariants["closed_form_error_at_most_5e-3"] = cf_mean.back() <= 5e-3;
    if (L >= 3) out.invariants["strong_order_at_least_0.8"] = order >= 0.8;
  }
  if (sc.name == "zero") out.invariants["identity_flow"] = identity_ok;

  // push-forward density on the first path
  const auto& dc = cfg.density;
  const auto path = sample_path(cfg.seed_base, sc.m, cfg.T, dc.h);
  auto frame = make_frame<2>(path, sc.diffusion, chart);
  const auto grid = TensorGrid<2>::cube(dc.grid_half_width, dc.grid_points);
  LagrangianOptions opt;
  opt.stride = path.steps();
  const auto Y = lagrangian_flow_grid<2>(grid, cfg.R, *frame, drift, opt);
  const double snap_half = std::min(cfg.chart_half_width, dc.grid_half_width + 2.0);
  const auto snap = diffusion_snapshot(detail::chart_box(snap_half, dc.snapshot_spacing), path, sc.diffusion, path.steps());
  CsvTable dens{"density.csv", {"y_1", "y_2", "density", "expected"}, {}};
  const bool linear = sc.linear_B.has_value() && sc.additive();
  if (sc.divergence_free || linear) {
    const double expected = linear ? std::exp(-sc.linear_B->trace() * cfg.T) : 1.0;
    double worst = 0.0;
    for (int i = 0; i < dc.samples; ++i) {
      // images of sampled preimages, so every y lies in the image of the flow grid
      const Vec<2> x = sample_ball<2>(cfg.seed_base, i, dc.sample_radius);
      const Vec<2> y = flow_endpoint<2>(x, path, sc.diffusion, &drift, path.steps(), 0).x;
      const double d = quasi_invariance_density(Y, Y.final_index(), snap, path, sc.diffusion, y).density;
      worst = std::max(worst, std::abs(d - expected));
      dens.add(y(0), y(1), d, expected);
    }
    out.result["density_expected"] = expected;
    out.result["density_max_error"] = worst;
    if (linear && !sc.divergence_free)
      out.invariants["density_matches_exp_dt_within_1e-3"] = worst <= 1e-3;
    else
      out.invariants["density_is_one_within_1e-2"] = worst <= 1e-2;
  } else {
    const auto X = compose_final(Y, path, sc.diffusion);
    auto q = [&](const Vec<2>& y) {
      try {
        const auto pf = quasi_invariance_density(Y, Y.final_index(), snap, path, sc.diffusion, y);
        return pf.preimage.norm() <= cfg.R ? pf.density : 0.0;
      } catch (const Error& e) {
        if (e.kind() == ErrorKind::OutOfChart) return 0.0;  // outside the image of the sampled box
        throw;
      }
    };
    const auto rep = histogram_check<2>(X, Y.weights, q, dc.bins, dc.sub);
    out.result["histogram"] = rep.to_json();
    out.invariants["histogram_l1_at_most_0.1"] = rep.l1_discrepancy <= 0.1;
  }
  out.tables = {levels, flow, dens};
  return out;
}

// ---------------------------------------------------------------------------
// stability

inline Outcome run_stability(const ScenarioConfig& cfg) {
  const Scenario sc = make_scenario(cfg.scenario);
  StabilityConfig sc_cfg;
  sc_cfg.levels = cfg.levels;
  sc_cfg.reference = cfg.reference;
  sc_cfg.paths = cfg.paths;
  sc_cfg.seed_base = cfg.seed_base;
  sc_cfg.T = cfg.T;
  sc_cfg.h = cfg.h;
  sc_cfg.radius = cfg.R;
  sc_cfg.grid_points = cfg.grid_points;
  sc_cfg.p_list = cfg.p;
  sc_cfg.chart_half_width = cfg.chart_half_width;
  sc_cfg.chart_spacing = cfg.chart_spacing;
  require(sc.rough(), ErrorKind::InvalidArgument, "stability needs a scenario with a rough drift");
  const auto rep = stability_experiment(sc, sc_cfg);
  Outcome out;
  out.result = rep.to_json();
  out.invariants["monotone_p1"] = rep.monotone;
  out.invariants["last_at_most_half_first_p1"] = rep.halved;
  for (double q : cfg.p) {
    const std::string k = StabilityReport::detail_key(q);
    out.invariants["monotone_p" + k] = rep.monotone_p.at(q);
    out.invariants["last_at_most_half_first_p" + k] = rep.halved_p.at(q);
  }
  CsvTable t{"per_path.csv", {"path_seed", "level", "p", "D"}, {}};
  for (std::size_t j = 0; j < rep.per_path.size(); ++j)
    for (std::size_t l = 0; l < cfg.levels.size(); ++l) {
      t.add(cfg.seed_base + j, cfg.levels[l], 1.0, rep.per_path[j][l]);
      for (double q : cfg.p) t.add(cfg.seed_base + j, cfg.levels[l], q, rep.per_path_p.at(q)[j][l]);
    }
  out.tables = {t};
  return out;
}

// ---------------------------------------------------------------------------
// invert

inline Outcome run_invert(const ScenarioConfig& cfg) {
  const std::vector<std::string> names = cfg.scenarios.empty() ? scenario_names() : cfg.scenarios;
  std::vector<Scenario> scs;
  for (const auto& n : names) scs.push_back(make_scenario(n));
  const double h_coarse = cfg.h * std::pow(2.0, cfg.refinements);
  require(detail::integral_ratio(cfg.T, h_coarse), ErrorKind::ConfigParse, "T / (h 2^refinements) must be an integer");
  const auto pts = detail::ball_nodes(cfg.R, cfg.grid_points);
  const auto chart = detail::chart_box(cfg.chart_half_width, cfg.chart_spacing);
  Outcome out;
  CsvTable t{"roundtrip.csv", {"scenario", "path_seed", "level", "h", "median_error", "max_error"}, {}};
  CsvTable s{"sigma.csv", {"scenario", "path_seed", "x_1", "x_2", "sigma_T"}, {}};
  for (const auto& sc : scs) {
    const auto drift = sc.drift();
    std::vector<double> med;
    for (int l = 0; l <= cfg.refinements; ++l) {
      std::vector<double> errs;
      for (int j = 0; j < cfg.paths; ++j) {
        const auto path = refine_times(sample_path(cfg.seed_base + j, sc.m, cfg.T, h_coarse), l);
        std::vector<Vec<2>> fwd(pts.size());
        for (std::size_t i = 0; i < pts.size(); ++i)
          fwd[i] = flow_endpoint<2>(pts[i], path, sc.diffusion, &drift, path.steps(), 0).x;
        const auto inv = inverse_flow<2>(path, sc.diffusion, drift, fwd, chart);
        std::vector<double> e;
        for (std::size_t i = 0; i < pts.size(); ++i) e.push_back((inv.X_T[i] - pts[i]).norm());
        t.add(sc.name, cfg.seed_base + j, l, path.h(), median(e), *std::max_element(e.begin(), e.end()));
        errs.insert(errs.end(), e.begin(), e.end());
      }
      med.push_back(median(errs));
    }
    nlohmann::json r = {{"median_error", med}};
    out.invariants[sc.name + ".median_at_most_1e-2"] = med.back() <= 1e-2;
    out.invariants[sc.name + ".median_decreasing"] = detail::decreasing(med);
    if (sc.divergence_free) {
      double worst = 0.0;
      for (int j = 0; j < cfg.paths; ++j) {
        const auto path = sample_path(cfg.seed_base + j, sc.m, cfg.T, cfg.h);
        for (const auto& x : pts) {
          const double sig = sigma_density(direct_flow<2>(x, path, sc.diffusion, drift), path, sc.diffusion, drift);
          worst = std::max(worst, std::abs(sig - 1.0));
          s.add(sc.name, cfg.seed_base + j, x(0), x(1), sig);
        }
      }
      r["sigma_max_deviation"] = worst;
      out.invariants[sc.name + ".sigma_is_one_within_1e-2"] = worst <= 1e-2;
    }
    out.result[sc.name] = r;
  }
  out.tables = {t, s};
  return out;
}

// ---------------------------------------------------------------------------
// transport

namespace detail {

inline TestFunction<2> bump(const std::vector<double>& c, double r) {
  TestFunction<2> b;
  b.center = vec2(c, "bump center");
  b.radius = r;
  return b;
}

}  // namespace detail

inline Outcome run_transport(const ScenarioConfig& cfg) {
  const std::vector<std::string> names =
      cfg.scenarios.empty() ? std::vector<std::string>{"additive-linear", "ode-only"} : cfg.scenarios;
  const auto& tc = cfg.transport;
  const auto theta_bump = detail::bump(tc.datum_center, tc.datum_radius);
  const auto theta = datum_bump<2>(theta_bump);
  const auto psi = detail::bump(tc.test_center, tc.test_radius);
  const int fine_points = 2 * tc.grid_points - 1;
  const auto zc = midpoint_grid<2>(theta_bump.center, tc.datum_radius, tc.grid_points);
  const auto zf = midpoint_grid<2>(theta_bump.center, tc.datum_radius, fine_points);
  Outcome out;
  CsvTable t{"residuals.csv", {"scenario", "path_seed", "level", "t", "residual_weak_form", "residual_random_transport"}, {}};
  for (const auto& name : names) {
    const Scenario sc = make_scenario(name);
    require(sc.additive() && sc.smooth_drift.has_value(), ErrorKind::InvalidArgument,
            "transport residuals need constant diffusion fields and a smooth drift");
    const auto& drift = *sc.smooth_drift;
    std::vector<double> weak[2], rand[2], dens[2];
    double constant_weak = 0.0, constant_rand = 0.0;
    for (int j = 0; j < cfg.paths; ++j) {
      const std::uint64_t seed = cfg.seed_base + j;
      const auto base = sample_path(seed, sc.m, cfg.T, tc.h);
      for (int l = 0; l < 2; ++l) {
        const auto path = refine_times(base, l ? tc.refine : 0);
        const auto& zg = l ? zf : zc;
        const auto w = ito_weak_residual<2>(theta, psi, path, sc.diffusion, drift, zg);
        AdditiveFrame<2> frame(path, sc.diffusion);
        const auto r = random_transport_check<2>(theta, psi, frame, drift, zg);
        weak[l].push_back(w.final_ito());
        rand[l].push_back(r.final_normalized());
        // both series share the time grid of the path
        const std::size_t every = std::max<std::size_t>(1, (w.times.size() - 1) / 32);
        for (std::size_t k = 0; k < w.times.size(); k += every)
          t.add(name, seed, l, w.times[k], w.ito[k] / w.normalization, r.residual[k] / r.normalization);
        if (sc.m > 0) {
          const auto snap = diffusion_snapshot(TensorGrid<2>::cube(5.0, 21), path, sc.diffusion, path.steps());
          const int xs = l ? 2 * 17 - 1 : 17;
          const double dz = l ? 0.075 : 0.15;
          dens[l].push_back(density_evolution_check<2>(path, sc.diffusion, psi, xs, dz, snap).residual);
        }
        if (l == 0) {
          const auto cw = ito_weak_residual<2>(datum_constant<2>(1.0), psi, path, sc.diffusion, drift, zg);
          AdditiveFrame<2> f2(path, sc.diffusion);
          const auto cr = random_transport_check<2>(datum_constant<2>(1.0), psi, f2, drift, zg);
          constant_weak = std::max({constant_weak, cw.final_ito(), cw.final_stratonovich()});
          constant_rand = std::max(constant_rand, cr.final_normalized());
        }
      }
    }
    using detail::mean_of;
    nlohmann::json r = {{"weak_form", {mean_of(weak[0]), mean_of(weak[1])}},
                        {"random_transport", {mean_of(rand[0]), mean_of(rand[1])}},
                        {"constant_datum_weak_form", constant_weak},
                        {"constant_datum_random_transport", constant_rand}};
    out.invariants[name + ".weak_form_at_most_5e-2"] = mean_of(weak[0]) <= 5e-2;
    out.invariants[name + ".weak_form_halves"] = mean_of(weak[1]) <= 0.5 * mean_of(weak[0]);
    out.invariants[name + ".random_transport_at_most_5e-2"] = mean_of(rand[0]) <= 5e-2;
    out.invariants[name + ".random_transport_halves"] = mean_of(rand[1]) <= 0.5 * mean_of(rand[0]);
    out.invariants[name + ".constant_datum_exactly_zero"] = constant_weak == 0.0 && constant_rand == 0.0;
    if (sc.m > 0) {
      r["density_evolution"] = {mean_of(dens[0]), mean_of(dens[1])};
      out.invariants[name + ".density_evolution_at_most_5e-2"] = mean_of(dens[0]) <= 5e-2;
      out.invariants[name + ".density_evolution_halves"] = detail::halving({mean_of(dens[0]), mean_of(dens[1])});
    }
    out.result[name] = r;
  }
  out.result["grid_points"] = {tc.grid_points, fine_points};
  out.result["h"] = {tc.h, tc.h / std::pow(2.0, tc.refine)};
  out.tables = {t};
  return out;
}

// ---------------------------------------------------------------------------
// identities

inline Outcome run_identities(const ScenarioConfig& cfg) {
  const auto& ic = cfg.identities;
  const auto phi = sine_diffeo<2>(ic.eps);
  const auto g = TensorGrid<2>::cube(ic.half_width, ic.grid_points);
  std::vector<Vec<2>> pts;
  for (std::size_t i = 0; i < g.size(); ++i) pts.push_back(g.node(i));
  const Scenario sc = make_scenario("smooth-nonlinear");
  const auto chain = check_bv_chain_rule<2>(*sc.smooth_drift, phi, pts, ic.step);
  const auto det = check_det_gradient_identity<2>(phi, pts, ic.step);

  // det J_T of the diffusion flow started on the snapshot image against exp of the Stratonovich divergence integral
  const auto path = sample_path(cfg.seed_base, sc.m, cfg.T, ic.liouville_h);
  IdentityResidual liou;
  for (const auto& x : pts) {
    const auto tr = diffusion_flow<2>(phi.map(x), path, sc.diffusion);
    double log_det = 0.0;
    for (std::size_t k = 0; k < path.steps(); ++k)
      for (int i = 0; i < sc.m; ++i)
        log_det += 0.5 * (sc.diffusion[i].divergence(tr.states[k]) + sc.diffusion[i].divergence(tr.states[k + 1])) *
                   path.dw(k, i);
    liou.max_residual = std::max(liou.max_residual, std::abs(tr.dets.back() / std::exp(log_det) - 1.0));
    ++liou.points;
  }
  Outcome out;
  out.result = {{"chain_rule", chain.to_json()},
                {"det_gradient", det.lemma.to_json()},
                {"jacobi", det.jacobi.to_json()},
                {"liouville", liou.to_json()}};
  out.invariants["chain_rule_at_most_1e-3"] = chain.max_residual <= 1e-3;
  out.invariants["det_gradient_at_most_1e-3"] = det.lemma.max_residual <= 1e-3;
  out.invariants["jacobi_at_most_1e-3"] = det.jacobi.max_residual <= 1e-3;
  out.invariants["liouville_at_most_1e-3"] = liou.max_residual <= 1e-3;
  CsvTable t{"identities.csv", {"identity", "points", "max_residual"}, {}};
  t.add("chain_rule", chain.points, chain.max_residual);
  t.add("det_gradient", det.lemma.points, det.lemma.max_residual);
  t.add("jacobi", det.jacobi.points, det.jacobi.max_residual);
  t.add("liouville", liou.points, liou.max_residual);
  out.tables = {t};
  return out;
}

// ---------------------------------------------------------------------------
// calibrate

struct CalibrationRun {
  Calibration calibration;
  Outcome outcome;
};

/// Two disjoint random catalogs (seeds s and s + 1); the first fixes the constants, the second checks stability.
inline CalibrationRun run_calibrate(const ScenarioConfig& cfg) {
  CalibrationConfig cc = cfg.calibration;
  cc.seed = cfg.seed_base;
  const auto a = calibrate_catalog(cc, cc.seed);
  const auto b = calibrate_catalog(cc, cc.seed + 1);
  Calibration cal;
  cal.Cd = cc.safety * a.max_weak;
  cal.Clog = cc.safety * a.max_log;
  cal.Cd_rho = 0.0;
  cal.Ctilde = covering_ratio(2);
  cal.provenance = {{"method", "max implied constant over a random piecewise-constant catalog times safety"},
                    {"config", cc.to_json()},
                    {"catalog_max_weak", a.max_weak},
                    {"catalog_max_log", a.max_log},
                    {"C_d_rho_note", "zero additive constant; the log estimate holds on the catalog without it"},
                    {"C_tilde_note", "closed-form covering ratio for |x - y| = r"}};
  const double ratio_weak = a.max_weak / b.max_weak;
  const double ratio_log = a.max_log / b.max_log;

  const auto g = TensorGrid<2>::cube(cc.grid_half_width, cc.grid_points);
  const auto lin = ScalarGrid<2>::sample(g, [](const Vec<2>& x) { return 2.0 * x(0) - x(1); });
  const auto lin_grad = ScalarGrid<2>::sample(g, [](const Vec<2>&) { return std::sqrt(5.0); });
  const auto nrm = ScalarGrid<2>::sample(g, [](const Vec<2>& x) { return x.norm(); });
  const auto nrm_grad = ScalarGrid<2>::sample(g, [](const Vec<2>& x) { return x.norm() > 0.0 ? 1.0 : 0.0; });
  const auto pl = pointwise_sobolev_check(lin, lin_grad, cc.R, cc.rho, 10000, cc.seed, cc.radii);
  const auto pn = pointwise_sobolev_check(nrm, nrm_grad, cc.R, cc.rho, 10000, cc.seed, cc.radii);

  CalibrationRun run;
  run.calibration = cal;
  Outcome& out = run.outcome;
  out.result = {{"calibration", cal.to_json()},
                {"catalog_b_max_weak", b.max_weak},
                {"catalog_b_max_log", b.max_log},
                {"ratio_weak", ratio_weak},
                {"ratio_log", ratio_log},
                {"pointwise_linear", pl.to_json()},
                {"pointwise_norm", pn.to_json()}};
  out.invariants["weak_ratio_in_range"] = ratio_weak >= 0.67 && ratio_weak <= 1.5;
  out.invariants["log_ratio_in_range"] = ratio_log >= 0.67 && ratio_log <= 1.5;
  out.invariants["pointwise_linear_at_most_C_d"] = pl.max_ratio <= cal.Cd;
  out.invariants["pointwise_norm_at_most_C_d"] = pn.max_ratio <= cal.Cd;
  CsvTable t{"catalog.csv", {"catalog_seed", "index", "weak_implied", "log_ratio"}, {}};
  for (std::size_t i = 0; i < a.weak.size(); ++i) t.add(cc.seed, i, a.weak[i], a.log[i]);
  for (std::size_t i = 0; i < b.weak.size(); ++i) t.add(cc.seed + 1, i, b.weak[i], b.log[i]);
  out.tables = {t};
  return run;
}

// ---------------------------------------------------------------------------
// lipschitz

inline Outcome run_lipschitz(const ScenarioConfig& cfg, const Calibration& cal) {
  const Scenario sc = make_scenario(cfg.scenario);
  LipschitzConfig lc = cfg.lipschitz;
  lc.R = cfg.R;
  lc.T = cfg.T;
  lc.h = cfg.h;
  lc.seed = cfg.seed_base;
  const auto ex = lipschitz_experiment(sc, lc, cal);
  Outcome out;
  out.result = ex.to_json();
  out.result["calibration"] = cal.to_json();
  out.invariants["excluded_measure_at_most_eps_plus_cell"] = ex.set.measure_ok;
  out.invariants["lipschitz_on_E_within_bound"] = ex.set.lip_ok;
  out.invariants["sup_Q_bound"] = ex.set.q_bound_ok;
  out.invariants["difference_quotients_stabilize"] = ex.diff.stable_ok;
  out.invariants["composed_lipschitz_within_product"] = ex.diff.lip_ok;
  const auto g = TensorGrid<2>::cube(3.1 * lc.R, lc.grid_points);
  CsvTable mask{"mask.csv", {"x_1", "x_2", "in_ball", "in_E"}, {}};
  for (std::size_t i = 0; i < g.size(); ++i)
    if (g.node(i).norm() <= lc.R) mask.add(g.node(i)(0), g.node(i)(1), true, static_cast<bool>(ex.set.E[i]));
  CsvTable lip{"lipschitz_per_time.csv", {"index", "empirical_lip"}, {}};
  for (std::size_t j = 0; j < ex.set.lip_per_time.size(); ++j) lip.add(j, ex.set.lip_per_time[j]);
  out.tables = {mask, lip};
  return out;
}

}  // namespace roughflow
