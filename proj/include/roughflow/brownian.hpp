#pragma once

#include "roughflow/core.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <limits>
#include <utility>
#include <vector>

namespace roughflow {

/// Seeded m-dimensional Brownian increments on a uniform grid of step h over [0, T].
/// Increments are stored in the orientation of the original path; `reversed` marks a
/// time-reversed view, which keeps refinement keys attached to the original intervals.
class BrownianPath {
 public:
  BrownianPath() = default;

  int m() const { return m_; }
  double T() const { return T_; }
  double h() const { return h_; }
  std::size_t steps() const { return steps_; }
  std::uint64_t seed() const { return seed_; }
  int level() const { return level_; }
  bool reversed() const { return reversed_; }

  double dw(std::size_t k, int i) const { return inc_[k * m_ + i]; }
  const std::vector<double>& increments() const { return inc_; }

  /// w at node k (sum of the first k increments, in order).
  std::vector<double> cumulative(int i) const {
    std::vector<double> w(steps_ + 1, 0.0);
    for (std::size_t k = 0; k < steps_; ++k) w[k + 1] = w[k] + dw(k, i);
    return w;
  }

  friend BrownianPath sample_path(std::uint64_t seed, int m, double T, double h);
  friend BrownianPath refine(const BrownianPath& p);
  friend BrownianPath reverse(const BrownianPath& p);
  static BrownianPath from_increments(std::uint64_t seed, int m, double T, double h, std::vector<double> inc,
                                      int level = 0, bool reversed = false);

 private:
  int m_ = 0;
  double T_ = 0.0;
  double h_ = 0.0;
  std::size_t steps_ = 0;
  std::uint64_t seed_ = 0;
  int level_ = 0;
  bool reversed_ = false;
  std::vector<double> inc_;
};

inline std::size_t checked_steps(double T, double h) {
  require(h > 0.0 && std::isfinite(h), ErrorKind::InvalidArgument, "step h must be positive");
  require(h <= T, ErrorKind::InvalidArgument, "step h exceeds horizon T");
  const double r = T / h;
  const double n = std::round(r);
  require(std::abs(r - n) <= 1e-9 * std::max(1.0, r), ErrorKind::InvalidArgument, "T / h must be an integer");
  return static_cast<std::size_t>(n);
}

inline BrownianPath BrownianPath::from_increments(std::uint64_t seed, int m, double T, double h,
                                                  std::vector<double> inc, int level, bool reversed) {
  BrownianPath p;
  p.m_ = m;
  p.T_ = T;
  p.h_ = h;
  p.steps_ = checked_steps(T, h);
  require(inc.size() == p.steps_ * static_cast<std::size_t>(m), ErrorKind::InvalidArgument,
          "increment array has wrong size");
  p.seed_ = seed;
  p.level_ = level;
  p.reversed_ = reversed;
  p.inc_ = std::move(inc);
  return p;
}

/// Increment (k, i) is sqrt(h) times a normal keyed by (seed, level 0, k, i).
inline BrownianPath sample_path(std::uint64_t seed, int m, double T, double h) {
  require(m >= 0, ErrorKind::InvalidArgument, "m must be nonnegative");
  BrownianPath p;
  p.m_ = m;
  p.T_ = T;
  p.h_ = h;
  p.steps_ = checked_steps(T, h);
  p.seed_ = seed;
  p.inc_.resize(p.steps_ * m);
  const double s = std::sqrt(h);
  for (std::size_t k = 0; k < p.steps_; ++k)
    for (int i = 0; i < m; ++i) p.inc_[k * m + i] = s * hash_normal(seed, 0, k, i);
  return p;
}

namespace detail {

// Split delta into (p, q) with p + q == delta in floating point whenever binary64 admits it.
// p is snapped to a multiple of ulp(delta), which makes delta - p exact when both halves stay
// within the binade range of delta. Otherwise q is nudged to the closest attainable sum.
inline std::pair<double, double> exact_split(double delta, double a) {
  const double u = delta == 0.0 ? std::numeric_limits<double>::denorm_min()
                                 : std::nextafter(std::abs(delta), INFINITY) - std::abs(delta);
  double p = 0.5 * delta + a;
  const double snapped = std::round(p / u) * u;
  if (std::isfinite(snapped)) p = snapped;
  double q = delta - p;
  for (int tries = 0; tries < 4 && p + q != delta; ++tries) {
    const double next = std::nextafter(q, (p + q < delta) ? INFINITY : -INFINITY);
    if (std::abs(p + next - delta) > std::abs(p + q - delta)) break;
    q = next;
  }
  return {p, q};
}

}  // namespace detail

/// Brownian-bridge midpoint insertion. The bridge offset of a coarse interval is keyed by
/// (seed, level + 1, interval index in original orientation), so refine and reverse commute.
inline BrownianPath refine(const BrownianPath& p) {
  BrownianPath r;
  r.m_ = p.m_;
  r.T_ = p.T_;
  r.h_ = 0.5 * p.h_;
  r.steps_ = 2 * p.steps_;
  r.seed_ = p.seed_;
  r.level_ = p.level_ + 1;
  r.reversed_ = p.reversed_;
  r.inc_.resize(r.steps_ * r.m_);
  const double s = 0.5 * std::sqrt(p.h_);
  for (std::size_t k = 0; k < p.steps_; ++k) {
    const std::size_t orig = p.reversed_ ? p.steps_ - 1 - k : k;
    for (int i = 0; i < p.m_; ++i) {
      const double a = s * hash_normal(p.seed_, r.level_, orig, i);
      auto [first, second] = detail::exact_split(p.dw(k, i), a);
      if (p.reversed_) std::swap(first, second);
      r.inc_[(2 * k) * r.m_ + i] = first;
      r.inc_[(2 * k + 1) * r.m_ + i] = second;
    }
  }
  return r;
}

/// Increment over [t, t + h] of the result is the original increment over [T - t - h, T - t].
inline BrownianPath reverse(const BrownianPath& p) {
  BrownianPath r = p;
  r.reversed_ = !p.reversed_;
  for (std::size_t k = 0; k < p.steps_; ++k)
    for (int i = 0; i < p.m_; ++i) r.inc_[k * p.m_ + i] = p.inc_[(p.steps_ - 1 - k) * p.m_ + i];
  return r;
}

/// The first k steps of an unreversed path, as a path on [0, k h].
inline BrownianPath truncate(const BrownianPath& p, std::size_t k) {
  require(k >= 1 && k <= p.steps(), ErrorKind::InvalidArgument, "truncation step out of range");
  require(!p.reversed(), ErrorKind::InvalidArgument, "truncate applies to forward paths");
  std::vector<double> inc(p.increments().begin(), p.increments().begin() + k * p.m());
  return BrownianPath::from_increments(p.seed(), p.m(), k * p.h(), p.h(), std::move(inc), p.level(), false);
}

inline BrownianPath refine_times(BrownianPath p, int times) {
  for (int i = 0; i < times; ++i) p = refine(p);
  return p;
}

namespace detail {

template <class T>
void put_le(std::ostream& os, T v) {
  unsigned char buf[sizeof(T)];
  std::memcpy(buf, &v, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) std::reverse(buf, buf + sizeof(T));
  os.write(reinterpret_cast<const char*>(buf), sizeof(T));
}

template <class T>
T get_le(std::istream& is) {
  unsigned char buf[sizeof(T)];
  is.read(reinterpret_cast<char*>(buf), sizeof(T));
  if (!is) throw Error(ErrorKind::Io, "truncated binary file");
  if constexpr (std::endian::native == std::endian::big) std::reverse(buf, buf + sizeof(T));
  T v;
  std::memcpy(&v, buf, sizeof(T));
  return v;
}

}  // namespace detail

/// Binary cache: "RFBP", u32 version 1, u32 m, u64 steps, f64 h, u64 seed, then row-major f64 increments.
inline void write_path_binary(const BrownianPath& p, const std::string& file) {
  std::ofstream os(file, std::ios::binary);
  if (!os) throw Error(ErrorKind::Io, "cannot open " + file);
  os.write("RFBP", 4);
  detail::put_le<std::uint32_t>(os, 1);
  detail::put_le<std::uint32_t>(os, static_cast<std::uint32_t>(p.m()));
  detail::put_le<std::uint64_t>(os, p.steps());
  detail::put_le<double>(os, p.h());
  detail::put_le<std::uint64_t>(os, p.seed());
  for (double v : p.increments()) detail::put_le<double>(os, v);
}

inline BrownianPath read_path_binary(const std::string& file) {
  std::ifstream is(file, std::ios::binary);
  if (!is) throw Error(ErrorKind::Io, "cannot open " + file);
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, "RFBP", 4) != 0) throw Error(ErrorKind::Io, "bad magic in " + file);
  const auto version = detail::get_le<std::uint32_t>(is);
  if (version != 1) throw Error(ErrorKind::Io, "unsupported path cache version");
  const auto m = detail::get_le<std::uint32_t>(is);
  const auto steps = detail::get_le<std::uint64_t>(is);
  const auto h = detail::get_le<double>(is);
  const auto seed = detail::get_le<std::uint64_t>(is);
  std::vector<double> inc(steps * m);
  for (auto& v : inc) v = detail::get_le<double>(is);
  return BrownianPath::from_increments(seed, static_cast<int>(m), h * static_cast<double>(steps), h, std::move(inc));
}

inline void write_path_csv(const BrownianPath& p, std::ostream& os) {
  os << "k,t";
  for (int i = 0; i < p.m(); ++i) os << ",dw" << i + 1;
  os << "\n";
  os.precision(17);
  for (std::size_t k = 0; k < p.steps(); ++k) {
    os << k << "," << k * p.h();
    for (int i = 0; i < p.m(); ++i) os << "," << p.dw(k, i);
    os << "\n";
  }
}

}  // namespace roughflow
