#pragma once

#include "roughflow/catalog.hpp"
#include "roughflow/decomposition.hpp"

#include <boost/math/special_functions/beta.hpp>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <numeric>
#include <string>
#include <type_traits>
#include <vector>

#ifndef ROUGHFLOW_CALIBRATION_FILE
#define ROUGHFLOW_CALIBRATION_FILE "config/calibration.json"
#endif

namespace roughflow {

/// Sampled scalar function on a tensor grid. NaN marks nodes that were not computed.
template <int D>
struct ScalarGrid {
  TensorGrid<D> grid;
  std::vector<double> values;

  ScalarGrid() = default;
  ScalarGrid(const TensorGrid<D>& g, double fill = 0.0) : grid(g), values(g.size(), fill) {}

  template <class F>
  static ScalarGrid sample(const TensorGrid<D>& g, const F& f) {
    ScalarGrid s(g);
    for (std::size_t i = 0; i < g.size(); ++i) s.values[i] = f(g.node(i));
    return s;
  }

  /// Multilinear interpolation; NaN when a corner is NaN, out-of-chart outside the grid.
  double interpolate(const Vec<D>& x) const {
    std::array<int, D> base{};
    double u[D];
    for (int a = 0; a < D; ++a) {
      const double s = (x(a) - grid.lower(a)) / grid.spacing(a);
      if (!(s >= 0.0 && s <= grid.counts[a] - 1.0)) throw Error(ErrorKind::OutOfChart, "point outside scalar grid");
      base[a] = std::min(static_cast<int>(std::floor(s)), grid.counts[a] - 2);
      u[a] = s - base[a];
    }
    double acc = 0.0;
    for (int c = 0; c < (1 << D); ++c) {
      std::array<int, D> idx = base;
      double w = 1.0;
      for (int a = 0; a < D; ++a) {
        const int bit = (c >> a) & 1;
        idx[a] += bit;
        w *= bit ? u[a] : 1.0 - u[a];
      }
      if (w != 0.0) acc += w * values[grid.flat(idx)];
    }
    return acc;
  }
};

/// Raster: "RFGR", u32 d, u32 counts[d], f64 lower[d], f64 spacing[d], f64 values.
template <int D>
void write_raster(const ScalarGrid<D>& f, const std::string& file) {
  std::ofstream os(file, std::ios::binary);
  if (!os) throw Error(ErrorKind::Io, "cannot open " + file);
  os.write("RFGR", 4);
  detail::put_le<std::uint32_t>(os, D);
  for (int a = 0; a < D; ++a) detail::put_le<std::uint32_t>(os, static_cast<std::uint32_t>(f.grid.counts[a]));
  for (int a = 0; a < D; ++a) detail::put_le<double>(os, f.grid.lower(a));
  for (int a = 0; a < D; ++a) detail::put_le<double>(os, f.grid.spacing(a));
  for (double v : f.values) detail::put_le<double>(os, v);
}

template <int D>
ScalarGrid<D> read_raster(const std::string& file) {
  std::ifstream is(file, std::ios::binary);
  if (!is) throw Error(ErrorKind::Io, "cannot open " + file);
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, "RFGR", 4) != 0) throw Error(ErrorKind::Io, "bad magic in " + file);
  if (detail::get_le<std::uint32_t>(is) != D) throw Error(ErrorKind::Io, "raster dimension mismatch");
  TensorGrid<D> g;
  for (int a = 0; a < D; ++a) g.counts[a] = static_cast<int>(detail::get_le<std::uint32_t>(is));
  for (int a = 0; a < D; ++a) g.lower(a) = detail::get_le<double>(is);
  for (int a = 0; a < D; ++a) g.spacing(a) = detail::get_le<double>(is);
  ScalarGrid<D> f(g);
  for (auto& v : f.values) v = detail::get_le<double>(is);
  return f;
}

template <int D>
void write_grid_csv(const ScalarGrid<D>& f, std::ostream& os) {
  for (int a = 0; a < D; ++a) os << "x" << a + 1 << ",";
  os << "value\n";
  os.precision(17);
  for (std::size_t i = 0; i < f.values.size(); ++i) {
    const Vec<D> x = f.grid.node(i);
    for (int a = 0; a < D; ++a) os << x(a) << ",";
    os << f.values[i] << "\n";
  }
}

/// Grid offsets of the largest ball sorted by distance; counts[j] offsets lie within radii[j].
template <int D>
struct BallLadder {
  std::vector<double> radii;
  std::vector<std::array<int, D>> offsets;
  std::vector<double> distance;
  std::vector<std::size_t> counts;
  std::array<int, D> reach{};

  BallLadder(const TensorGrid<D>& g, std::vector<double> r) : radii(std::move(r)) {
    require(!radii.empty() && std::is_sorted(radii.begin(), radii.end()) && radii.front() > 0.0,
            ErrorKind::InvalidArgument, "radius ladder must be positive and ascending");
    const double rmax = radii.back() * (1.0 + 1e-12);
    for (int a = 0; a < D; ++a) reach[a] = static_cast<int>(std::floor(rmax / g.spacing(a)));
    std::array<int, D> o{};
    for (int a = 0; a < D; ++a) o[a] = -reach[a];
    std::vector<std::pair<double, std::array<int, D>>> all;
    while (true) {
      double d2 = 0.0;
      for (int a = 0; a < D; ++a) d2 += std::pow(o[a] * g.spacing(a), 2);
      if (d2 <= rmax * rmax) all.push_back({std::sqrt(d2), o});
      int a = D - 1;
      while (a >= 0 && ++o[a] > reach[a]) {
        o[a] = -reach[a];
        --a;
      }
      if (a < 0) break;
    }
    std::stable_sort(all.begin(), all.end(), [](const auto& p, const auto& q) { return p.first < q.first; });
    for (const auto& [d, off] : all) {
      distance.push_back(d);
      offsets.push_back(off);
    }
    for (double rj : radii) {
      const double lim = rj * (1.0 + 1e-12);
      counts.push_back(static_cast<std::size_t>(std::upper_bound(distance.begin(), distance.end(), lim) -
                                                distance.begin()));
    }
  }

  /// Flat index deltas for a given grid (valid when the node plus reach stays inside).
  std::vector<std::ptrdiff_t> flat_deltas(const TensorGrid<D>& g) const {
    std::vector<std::ptrdiff_t> out(offsets.size());
    for (std::size_t i = 0; i < offsets.size(); ++i) {
      std::ptrdiff_t f = 0;
      for (int a = 0; a < D; ++a) f = f * g.counts[a] + offsets[i][a];
      out[i] = f;
    }
    return out;
  }
};

namespace detail {

template <int D>
std::vector<std::size_t> region_nodes(const TensorGrid<D>& g, const std::type_identity_t<Vec<D>>& center, double rho) {
  std::vector<std::size_t> out;
  const double lim = rho * (1.0 + 1e-12) + 1e-12;
  for (std::size_t i = 0; i < g.size(); ++i)
    if ((g.node(i) - center).norm() <= lim) out.push_back(i);
  return out;
}

template <int D>
void require_cover(const TensorGrid<D>& g, const std::vector<std::size_t>& nodes,
                   const std::type_identity_t<std::array<int, D>>& reach,
                   const std::string& what) {
  for (std::size_t i : nodes) {
    const auto idx = g.unflat(i);
    for (int a = 0; a < D; ++a)
      if (idx[a] - reach[a] < 0 || idx[a] + reach[a] >= g.counts[a])
        throw Error(ErrorKind::Resolution, "grid does not cover the inflated domain for " + what);
  }
}

}  // namespace detail

inline std::vector<double> linear_ladder(double R, int k) {
  std::vector<double> r;
  for (int j = 1; j <= k; ++j) r.push_back(R * j / k);
  return r;
}

inline std::vector<double> geometric_ladder(double lo, double hi, int k) {
  std::vector<double> r;
  for (int j = 0; j < k; ++j) r.push_back(k == 1 ? hi : lo * std::pow(hi / lo, static_cast<double>(j) / (k - 1)));
  return r;
}

/// M_R f at the nodes of B(center, rho): max over r_j = R j / k of the midpoint ball average of |f|.
template <int D>
ScalarGrid<D> local_max_function(const ScalarGrid<D>& f, double R, int k, double rho,
                                 const Vec<D>& center = Vec<D>::Zero()) {
  require(k >= 4, ErrorKind::InvalidArgument, "maximal function needs at least 4 radii");
  require(R > 0.0 && rho >= 0.0, ErrorKind::InvalidArgument, "radii must be positive");
  const BallLadder<D> ladder(f.grid, linear_ladder(R, k));
  const auto nodes = detail::region_nodes(f.grid, center, rho);
  detail::require_cover(f.grid, nodes, ladder.reach, "the maximal function");
  const auto deltas = ladder.flat_deltas(f.grid);
  ScalarGrid<D> out(f.grid, std::numeric_limits<double>::quiet_NaN());
  for (std::size_t i : nodes) {
    double sum = 0.0, best = 0.0;
    std::size_t p = 0;
    for (std::size_t c : ladder.counts) {
      for (; p < c; ++p) sum += std::abs(f.values[static_cast<std::size_t>(static_cast<std::ptrdiff_t>(i) + deltas[p])]);
      best = std::max(best, sum / static_cast<double>(c));
    }
    out.values[i] = best;
  }
  return out;
}

/// Midpoint integral of g(f) over the nodes of B(center, radius).
template <int D, class G>
double ball_integral(const ScalarGrid<D>& f, double radius, const G& g, const Vec<D>& center = Vec<D>::Zero()) {
  double s = 0.0;
  for (std::size_t i : detail::region_nodes(f.grid, center, radius)) s += g(f.values[i]);
  return s * f.grid.cell_volume();
}

struct WeakTypeReport {
  std::vector<double> alphas;
  std::vector<double> measures;
  std::vector<double> implied;  // alpha * measure / int |f|
  double integral = 0.0;
  double max_implied = 0.0;
  nlohmann::json to_json() const {
    return {{"alphas", alphas}, {"measures", measures}, {"implied_constants", implied},
            {"integral", integral}, {"max_implied", max_implied}};
  }
};

template <int D>
WeakTypeReport weak_type_check(const ScalarGrid<D>& f, double rho, double R, const std::vector<double>& alphas,
                               int k = 16) {
  WeakTypeReport rep;
  const auto M = local_max_function(f, R, k, rho);
  rep.integral = ball_integral(f, R + rho, [](double v) { return std::abs(v); });
  const auto nodes = detail::region_nodes(f.grid, Vec<D>::Zero(), rho);
  for (double a : alphas) {
    std::size_t n = 0;
    for (std::size_t i : nodes) n += M.values[i] > a;
    const double meas = n * f.grid.cell_volume();
    rep.alphas.push_back(a);
    rep.measures.push_back(meas);
    rep.implied.push_back(rep.integral > 0.0 ? a * meas / rep.integral : 0.0);
    rep.max_implied = std::max(rep.max_implied, rep.implied.back());
  }
  return rep;
}

/// int_{B(rho)} M_R f over int_{B(R+rho)} |f| log(2 + |f|).
template <int D>
double log_type_ratio(const ScalarGrid<D>& f, double rho, double R, int k = 16) {
  const auto M = local_max_function(f, R, k, rho);
  double lhs = 0.0;
  for (std::size_t i : detail::region_nodes(f.grid, Vec<D>::Zero(), rho)) lhs += M.values[i];
  lhs *= f.grid.cell_volume();
  const double rhs = ball_integral(f, R + rho, [](double v) { return std::abs(v) * std::log(2.0 + std::abs(v)); });
  return rhs > 0.0 ? lhs / rhs : 0.0;
}

/// Sum of 1 to 6 disc indicators with heights in [0.5, 4], centres in B(1.2), radii in [0.05, 0.4].
template <int D>
ScalarGrid<D> random_piecewise_function(const TensorGrid<D>& g, std::uint64_t seed, std::uint64_t index) {
  const int pieces = 1 + static_cast<int>(6.0 * hash_uniform(hash_key(seed, 0x9c, index, 0)));
  std::vector<Vec<D>> c;
  std::vector<double> r, h;
  for (int p = 0; p < pieces; ++p) {
    c.push_back(sample_ball<D>(hash_key(seed, 0x9d, index, 0), p, 1.2));
    r.push_back(0.05 + 0.35 * hash_uniform(hash_key(seed, 0x9e, index, p)));
    h.push_back(0.5 + 3.5 * hash_uniform(hash_key(seed, 0x9f, index, p)));
  }
  return ScalarGrid<D>::sample(g, [&](const Vec<D>& x) {
    double v = 0.0;
    for (int p = 0; p < pieces; ++p)
      if ((x - c[p]).norm() <= r[p]) v += h[p];
    return v;
  });
}

/// Geometric covering ratio |B(x, r)| / |B(x, r) cap B(y, r)| for |x - y| = r.
inline double covering_ratio(int d) { return 1.0 / boost::math::ibeta(0.5 * (d + 1), 0.5, 0.75); }

/// Calibrated dimensional constants. C_d: weak-type and pointwise roles; C_log: the log-integral estimate.
struct Calibration {
  double Cd = 0.0;
  double Clog = 0.0;
  double Cd_rho = 0.0;
  double Ctilde = 0.0;
  nlohmann::json provenance = nlohmann::json::object();

  nlohmann::json to_json() const {
    return {{"C_d", Cd}, {"C_log", Clog}, {"C_d_rho", Cd_rho}, {"C_tilde", Ctilde}, {"provenance", provenance}};
  }
  static Calibration from_json(const nlohmann::json& j) {
    Calibration c;
    c.Cd = j.at("C_d").get<double>();
    c.Clog = j.at("C_log").get<double>();
    c.Cd_rho = j.value("C_d_rho", 0.0);
    c.Ctilde = j.value("C_tilde", covering_ratio(2));
    c.provenance = j.value("provenance", nlohmann::json::object());
    return c;
  }
};

inline Calibration load_calibration(const std::string& file = ROUGHFLOW_CALIBRATION_FILE) {
  std::ifstream is(file);
  if (!is) throw Error(ErrorKind::Io, "cannot open calibration file " + file);
  try {
    return Calibration::from_json(nlohmann::json::parse(is));
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::ConfigParse, std::string("calibration file: ") + e.what());
  }
}

struct CalibrationConfig {
  std::uint64_t seed = 1;
  int catalog_size = 20;
  double grid_half_width = 2.0;
  int grid_points = 129;
  double rho = 1.0;
  double R = 0.5;
  int radii = 16;
  std::vector<double> alphas{0.5, 1.0, 2.0};
  double safety = 1.5;

  nlohmann::json to_json() const {
    return {{"seed", seed},   {"catalog_size", catalog_size}, {"grid_half_width", grid_half_width},
            {"grid_points", grid_points}, {"rho", rho}, {"R", R}, {"radii", radii}, {"alphas", alphas},
            {"safety", safety}};
  }
};

struct CatalogCalibration {
  double max_weak = 0.0;
  double max_log = 0.0;
  std::vector<double> weak;  // per function
  std::vector<double> log;
};

inline CatalogCalibration calibrate_catalog(const CalibrationConfig& cfg, std::uint64_t seed) {
  CatalogCalibration out;
  const auto g = TensorGrid<2>::cube(cfg.grid_half_width, cfg.grid_points);
  for (int i = 0; i < cfg.catalog_size; ++i) {
    const auto f = random_piecewise_function<2>(g, seed, static_cast<std::uint64_t>(i));
    out.weak.push_back(weak_type_check(f, cfg.rho, cfg.R, cfg.alphas, cfg.radii).max_implied);
    out.log.push_back(log_type_ratio(f, cfg.rho, cfg.R, cfg.radii));
    out.max_weak = std::max(out.max_weak, out.weak.back());
    out.max_log = std::max(out.max_log, out.log.back());
  }
  return out;
}

struct PointwiseReport {
  double max_ratio = 0.0;
  std::size_t pairs = 0;
  std::size_t zero_pairs = 0;
  nlohmann::json to_json() const { return {{"max_ratio", max_ratio}, {"pairs", pairs}, {"zero_pairs", zero_pairs}}; }
};

/// max |f(x) - f(y)| / (|x - y| (M_R|grad f|(x) + M_R|grad f|(y))) over random node pairs in B(rho), |x - y| <= R.
template <int D>
PointwiseReport pointwise_sobolev_check(const ScalarGrid<D>& f, const ScalarGrid<D>& grad_norm, double R, double rho,
                                        std::size_t pairs, std::uint64_t seed, int k = 16) {
  const auto M = local_max_function(grad_norm, R, k, rho);
  const auto nodes = detail::region_nodes(f.grid, Vec<D>::Zero(), rho);
  require(nodes.size() >= 2, ErrorKind::Resolution, "too few nodes in the pair region");
  PointwiseReport rep;
  for (std::uint64_t t = 0; rep.pairs < pairs && t < 1000 * pairs; ++t) {
    const std::size_t i = nodes[static_cast<std::size_t>(hash_uniform(hash_key(seed, 0x51, t, 0)) * nodes.size())];
    const std::size_t j = nodes[static_cast<std::size_t>(hash_uniform(hash_key(seed, 0x51, t, 1)) * nodes.size())];
    const double dist = (f.grid.node(i) - f.grid.node(j)).norm();
    if (i == j || dist > R) continue;
    ++rep.pairs;
    const double num = std::abs(f.values[i] - f.values[j]);
    const double den = dist * (M.values[i] + M.values[j]);
    if (num == 0.0) {
      ++rep.zero_pairs;
      continue;
    }
    rep.max_ratio = std::max(rep.max_ratio, den > 0.0 ? num / den : std::numeric_limits<double>::infinity());
  }
  return rep;
}

struct LipschitzInputs {
  double R = 1.0;
  double eps = 0.1;
  double T = 1.0;
  double C = 0.0;             // growth constant of b
  double div_integral = 0.0;  // int_0^T ||div b_s||_{L^inf(B(R1))} ds
  double log_integral = 0.0;  // int_0^T int_{B(R1 + R~)} |grad b_s| log(2 + |grad b_s|) dy ds
  int radii = 16;
};

inline double growth_radius_R1(double R, double C, double T) { return (1.0 + 3.0 * R) * std::exp(C * T); }
inline double growth_radius_Rtilde(double R, double C, double T) { return 2.0 * (1.0 + 2.0 * R) * std::exp(C * T); }

struct LipschitzSetReport {
  double eps = 0.0, R = 0.0, R1 = 0.0, Rtilde = 0.0, L = 0.0, L1 = 0.0, L1_raw = 0.0;
  double threshold = 0.0;
  double log_bound = 0.0;  // 2 C~ L1 / eps
  double excluded_measure = 0.0;
  double cell_volume = 0.0;
  double empirical_lip = 0.0;
  double max_sup_Q = 0.0;
  double q_bound_max_excess = -std::numeric_limits<double>::infinity();
  std::size_t nodes_in_ball = 0;
  std::size_t nodes_in_E = 0;
  bool measure_ok = false, lip_ok = false, q_bound_ok = false;
  std::vector<char> E;  // over the flow grid
  std::vector<double> radii;
  std::vector<double> lip_per_time;

  bool ok() const { return measure_ok && lip_ok && q_bound_ok; }
  nlohmann::json to_json() const {
    return {{"eps", eps},
            {"R", R},
            {"R1", R1},
            {"R_tilde", Rtilde},
            {"L", L},
            {"L1", L1},
            {"L1_raw", L1_raw},
            {"threshold", threshold},
            {"log_lip_bound", log_bound},
            {"excluded_measure", excluded_measure},
            {"cell_volume", cell_volume},
            {"empirical_lip", empirical_lip},
            {"max_sup_Q", max_sup_Q},
            {"q_bound_max_excess", q_bound_max_excess},
            {"nodes_in_ball", nodes_in_ball},
            {"nodes_in_E", nodes_in_E},
            {"measure_ok", measure_ok},
            {"lip_ok", lip_ok},
            {"q_bound_ok", q_bound_ok},
            {"radii", radii},
            {"lip_per_time", lip_per_time}};
  }
};

/// Max over pairs of distinct masked nodes of |Z(x) - Z(y)| / |x - y|.
template <int D>
double masked_lipschitz(const TensorGrid<D>& g, const std::vector<std::size_t>& nodes, const std::vector<Vec<D>>& Z) {
  double best = 0.0;
  for (std::size_t a = 0; a < nodes.size(); ++a) {
    const Vec<D> xa = g.node(nodes[a]);
    for (std::size_t b = a + 1; b < nodes.size(); ++b) {
      const double d = (xa - g.node(nodes[b])).norm();
      best = std::max(best, (Z[nodes[a]] - Z[nodes[b]]).norm() / d);
    }
  }
  return best;
}

/// The Lipschitz set of the flow on B(R). mgrad(j, y) returns (M_{R~}|grad b_{t_j}|)(y) at stored time j.
template <int D, class MaxGrad>
LipschitzSetReport lipschitz_set(const FlowField<D>& Y, const MaxGrad& mgrad, const LipschitzInputs& in,
                                 const Calibration& cal) {
  require(Y.grid.has_value(), ErrorKind::InvalidArgument, "lipschitz set needs a grid flow field");
  const TensorGrid<D>& g = *Y.grid;
  LipschitzSetReport rep;
  rep.eps = in.eps;
  rep.R = in.R;
  rep.R1 = growth_radius_R1(in.R, in.C, in.T);
  rep.Rtilde = growth_radius_Rtilde(in.R, in.C, in.T);
  rep.cell_volume = g.cell_volume();
  const double dx = g.spacing.maxCoeff();
  require(2.0 * in.R >= 8.0 * dx, ErrorKind::Resolution, "grid cannot resolve the smallest ladder radius");
  rep.radii = geometric_ladder(4.0 * dx, 2.0 * in.R, in.radii);
  const BallLadder<D> ladder(g, rep.radii);
  const auto ball = detail::region_nodes(g, Vec<D>::Zero(), in.R);
  detail::require_cover(g, ball, ladder.reach, "Q(t, x, r)");
  const auto deltas = ladder.flat_deltas(g);
  rep.nodes_in_ball = ball.size();

  // Phi on B(3R) by the trapezoid rule over stored times
  const auto outer = detail::region_nodes(g, Vec<D>::Zero(), 3.0 * in.R);
  ScalarGrid<D> Phi(g, std::numeric_limits<double>::quiet_NaN());
  for (std::size_t i : outer) {
    double s = 0.0, prev = mgrad(0, Y.Y[0][i]);
    for (std::size_t j = 1; j < Y.Y.size(); ++j) {
      const double cur = mgrad(j, Y.Y[j][i]);
      s += 0.5 * (Y.times[j] - Y.times[j - 1]) * (prev + cur);
      prev = cur;
    }
    require(std::isfinite(s), ErrorKind::Resolution, "maximal gradient grid does not cover the flow image");
    Phi.values[i] = s;
  }
  const auto MPhi = local_max_function(Phi, 2.0 * in.R, in.radii, in.R);

  // sup over stored times and radii of Q(t, x, r)
  std::vector<double> supQ(ball.size(), 0.0);
  for (std::size_t j = 0; j < Y.Y.size(); ++j) {
    const auto& Yj = Y.Y[j];
    for (std::size_t b = 0; b < ball.size(); ++b) {
      const std::size_t i = ball[b];
      for (std::size_t r = 0; r < rep.radii.size(); ++r) {
        double s = 0.0;
        const std::size_t c = ladder.counts[r];
        for (std::size_t p = 0; p < c; ++p)
          s += std::log1p((Yj[i] - Yj[static_cast<std::size_t>(static_cast<std::ptrdiff_t>(i) + deltas[p])]).norm() /
                          rep.radii[r]);
        supQ[b] = std::max(supQ[b], s / static_cast<double>(c));
      }
    }
  }

  for (std::size_t b = 0; b < ball.size(); ++b) {
    const std::size_t i = ball[b];
    const double bound = std::log(2.0) + cal.Cd * Phi.values[i] + cal.Cd * MPhi.values[i];
    rep.q_bound_max_excess = std::max(rep.q_bound_max_excess, supQ[b] - bound);
    rep.max_sup_Q = std::max(rep.max_sup_Q, supQ[b]);
  }
  rep.q_bound_ok = rep.q_bound_max_excess <= 0.0;

  rep.L = std::exp(in.div_integral);
  rep.L1_raw = 3.0 * cal.Cd * (1.0 + cal.Cd) * rep.L * (in.T * cal.Cd_rho + cal.Clog * in.log_integral);
  // the Chebyshev split needs L1 / eps >= 3 log 2; enlarging L1 keeps the bound valid
  rep.L1 = std::max(rep.L1_raw, 3.0 * in.eps * std::log(2.0));
  rep.threshold = rep.L1 / in.eps;
  rep.log_bound = 2.0 * cal.Ctilde * rep.L1 / in.eps;
  rep.E.assign(g.size(), 0);
  std::vector<std::size_t> E_nodes;
  for (std::size_t b = 0; b < ball.size(); ++b)
    if (supQ[b] <= rep.threshold) {
      rep.E[ball[b]] = 1;
      E_nodes.push_back(ball[b]);
    }
  rep.nodes_in_E = E_nodes.size();
  rep.excluded_measure = static_cast<double>(ball.size() - E_nodes.size()) * rep.cell_volume;
  rep.measure_ok = rep.excluded_measure <= in.eps + rep.cell_volume;
  for (const auto& Yj : Y.Y) {
    rep.lip_per_time.push_back(masked_lipschitz(g, E_nodes, Yj));
    rep.empirical_lip = std::max(rep.empirical_lip, rep.lip_per_time.back());
  }
  rep.lip_ok = rep.empirical_lip == 0.0 || std::log(rep.empirical_lip) <= rep.log_bound;
  return rep;
}

struct ApproxDiffReport {
  double empirical_lip = 0.0;
  double product_bound = 0.0;
  std::size_t interior = 0;
  std::size_t stabilized = 0;
  double fraction = 0.0;
  bool lip_ok = false, stable_ok = false;
  bool ok() const { return lip_ok && stable_ok; }
  nlohmann::json to_json() const {
    return {{"empirical_lip", empirical_lip}, {"product_bound", product_bound}, {"interior_points", interior},
            {"stabilized_points", stabilized}, {"fraction", fraction}, {"lip_ok", lip_ok}, {"stable_ok", stable_ok}};
  }
};

/// Central difference quotients of X at 4, 2 and 1 grid cells. A point of E whose 4-cell neighbours lie in E
/// is stabilized when successive quotient matrices differ by at most `tol` relative in operator norm.
template <int D>
ApproxDiffReport approx_diff_check(const TensorGrid<D>& g, const std::vector<Vec<D>>& X, const std::vector<char>& E,
                                   double lip_phi, double lip_Y, double tol = 0.2, double min_fraction = 0.9) {
  ApproxDiffReport rep;
  std::vector<std::size_t> nodes;
  for (std::size_t i = 0; i < g.size(); ++i)
    if (E[i]) nodes.push_back(i);
  rep.empirical_lip = masked_lipschitz(g, nodes, X);
  rep.product_bound = lip_phi * lip_Y;
  rep.lip_ok = rep.empirical_lip <= rep.product_bound * (1.0 + 1e-12);
  auto opnorm = [](const Mat<D>& A) { return Eigen::JacobiSVD<Mat<D>>(A).singularValues()(0); };
  for (std::size_t i : nodes) {
    const auto idx = g.unflat(i);
    bool inside = true;
    for (int a = 0; a < D && inside; ++a)
      for (int s : {-4, -2, -1, 1, 2, 4}) {
        auto n = idx;
        n[a] += s;
        if (n[a] < 0 || n[a] >= g.counts[a] || !E[g.flat(n)]) {
          inside = false;
          break;
        }
      }
    if (!inside) continue;
    ++rep.interior;
    Mat<D> Q[3];
    const int scales[3] = {4, 2, 1};
    for (int q = 0; q < 3; ++q)
      for (int a = 0; a < D; ++a) {
        auto p = idx, m = idx;
        p[a] += scales[q];
        m[a] -= scales[q];
        Q[q].col(a) = (X[g.flat(p)] - X[g.flat(m)]) / (2.0 * scales[q] * g.spacing(a));
      }
    bool ok = true;
    for (int q = 0; q < 2; ++q) {
      const double ref = opnorm(Q[q]);
      const double diff = opnorm(Q[q + 1] - Q[q]);
      if (ref == 0.0 ? diff != 0.0 : diff > tol * ref) ok = false;
    }
    rep.stabilized += ok;
  }
  rep.fraction = rep.interior ? static_cast<double>(rep.stabilized) / rep.interior : 1.0;
  rep.stable_ok = rep.fraction >= min_fraction;
  return rep;
}

struct LipschitzConfig {
  double R = 1.0;
  double eps_fraction = 0.1;  // eps = fraction * |B(R)|
  double T = 1.0;
  double h = 1.0 / 64;
  int grid_points = 129;
  std::size_t stride = 4;
  std::uint64_t seed = 1;
  int mollify_level = 0;  // 0: scenario default
  int quadrature_points = 9;
  double gradient_spacing = 0.1;
  int radii = 16;

  nlohmann::json to_json() const {
    return {{"R", R}, {"eps_fraction", eps_fraction}, {"T", T}, {"h", h}, {"grid_points", grid_points},
            {"stride", stride}, {"seed", seed}, {"mollify_level", mollify_level},
            {"quadrature_points", quadrature_points}, {"gradient_spacing", gradient_spacing}, {"radii", radii}};
  }
};

struct LipschitzExperiment {
  LipschitzSetReport set;
  ApproxDiffReport diff;
  LipschitzInputs inputs;
  double growth_C = 0.0;
  double max_shift = 0.0;
  bool ok() const { return set.ok() && diff.ok(); }
  nlohmann::json to_json() const {
    return {{"lipschitz_set", set.to_json()},
            {"approx_diff", diff.to_json()},
            {"growth_C", growth_C},
            {"max_shift", max_shift},
            {"div_integral", inputs.div_integral},
            {"log_integral", inputs.log_integral},
            {"eps", inputs.eps},
            {"ok", ok()}};
  }
};

/// Lipschitz-set and approximate-differentiability diagnostics for a scenario with constant diffusion
/// fields, where phi_t is the shift by s_t = sum sigma_i w_t^i and b_t = A0(. + s_t).
inline LipschitzExperiment lipschitz_experiment(const Scenario& sc, const LipschitzConfig& cfg,
                                                const Calibration& cal) {
  require(sc.additive(), ErrorKind::InvalidArgument, "lipschitz diagnostics need constant diffusion fields");
  MollifierSpec<2> spec;
  spec.quadrature_points_per_axis = cfg.quadrature_points;
  const SmoothVectorField<2> b = sc.drift(cfg.mollify_level, spec);
  const BrownianPath path = sample_path(cfg.seed, sc.m, cfg.T, cfg.h);
  std::vector<Vec<2>> shift(path.steps() + 1, Vec<2>::Zero());
  for (std::size_t k = 0; k < path.steps(); ++k) {
    shift[k + 1] = shift[k];
    for (int i = 0; i < sc.m; ++i) shift[k + 1] += sc.diffusion[i].value(Vec<2>::Zero()) * path.dw(k, i);
  }
  LipschitzExperiment ex;
  for (const auto& s : shift) ex.max_shift = std::max(ex.max_shift, s.norm());

  double CA = sc.growth().C;
  if (!sc.rough()) {
    const auto probe = TensorGrid<2>::cube(20.0, 81);
    for (std::size_t i = 0; i < probe.size(); ++i)
      CA = std::max(CA, b.value(probe.node(i)).norm() / (1.0 + probe.node(i).norm()));
  }
  ex.growth_C = CA * (1.0 + ex.max_shift);

  LipschitzInputs in;
  in.R = cfg.R;
  in.T = cfg.T;
  in.C = ex.growth_C;
  in.eps = cfg.eps_fraction * unit_ball_volume(2) * cfg.R * cfg.R;
  in.radii = cfg.radii;
  const double R1 = growth_radius_R1(in.R, in.C, in.T);
  const double Rt = growth_radius_Rtilde(in.R, in.C, in.T);

  // |grad A0| and div A0 on a grid covering B(R1 + R~ + max shift)
  const double half = R1 + Rt + ex.max_shift + 2.0 * cfg.gradient_spacing;
  const int n = 2 * static_cast<int>(std::ceil(half / cfg.gradient_spacing)) + 1;
  const auto G = TensorGrid<2>::cube(0.5 * (n - 1) * cfg.gradient_spacing, n);
  ScalarGrid<2> grad(G), div(G);
  const bool zero = b.is_zero();
  for (std::size_t i = 0; i < G.size(); ++i) {
    if (zero) continue;
    const Mat<2> J = b.jacobian(G.node(i));
    grad.values[i] = J.norm();
    div.values[i] = J.trace();
  }
  double div_sup = 0.0;
  for (std::size_t i : detail::region_nodes(G, Vec<2>::Zero(), R1 + ex.max_shift))
    div_sup = std::max(div_sup, std::abs(div.values[i]));
  in.div_integral = cfg.T * div_sup;

  AdditiveFrame<2> frame(path, sc.diffusion);
  LagrangianOptions opt;
  opt.stride = cfg.stride;
  const auto Ygrid = TensorGrid<2>::cube(3.1 * cfg.R, cfg.grid_points);
  const FlowField<2> Y = lagrangian_flow_grid<2>(Ygrid, cfg.R, frame, b, opt);

  // time integral of the log term by the trapezoid rule over stored times
  auto log_term = [&](std::size_t j) {
    const Vec<2> s = shift[Y.steps[j]];
    double acc = 0.0;
    for (std::size_t i = 0; i < G.size(); ++i)
      if ((G.node(i) - s).norm() <= R1 + Rt) acc += grad.values[i] * std::log(2.0 + grad.values[i]);
    return acc * G.cell_volume();
  };
  std::vector<double> lt;
  for (std::size_t j = 0; j < Y.Y.size(); ++j) lt.push_back(log_term(j));
  for (std::size_t j = 1; j < lt.size(); ++j) in.log_integral += 0.5 * (Y.times[j] - Y.times[j - 1]) * (lt[j] + lt[j - 1]);
  ex.inputs = in;

  const auto MG = local_max_function(grad, Rt, cfg.radii, R1 + ex.max_shift + 2.0 * cfg.gradient_spacing);
  auto mgrad = [&](std::size_t j, const Vec<2>& y) { return MG.interpolate(y + shift[Y.steps[j]]); };
  ex.set = lipschitz_set<2>(Y, mgrad, in, cal);

  std::vector<Vec<2>> X = Y.Y.back();
  for (auto& x : X) x += shift[Y.steps.back()];
  ex.diff = approx_diff_check<2>(Ygrid, X, ex.set.E, 1.0, ex.set.empirical_lip);
  return ex;
}

}  // namespace roughflow
