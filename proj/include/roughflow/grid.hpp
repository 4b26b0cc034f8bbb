#pragma once

#include "roughflow/core.hpp"

#include <algorithm>
#include <array>
#include <cstddef>
#include <vector>

namespace roughflow {

/// Uniform tensor-product grid of nodes lower + i * spacing, i in [0, counts).
template <int D>
struct TensorGrid {
  Vec<D> lower = Vec<D>::Zero();
  Vec<D> spacing = Vec<D>::Ones();
  std::array<int, D> counts{};

  static TensorGrid cube(double half_width, int points_per_axis) {
    require(points_per_axis >= 2, ErrorKind::InvalidArgument, "grid needs at least 2 points per axis");
    require(half_width > 0.0, ErrorKind::InvalidArgument, "grid half width must be positive");
    TensorGrid g;
    g.lower.setConstant(-half_width);
    g.spacing.setConstant(2.0 * half_width / (points_per_axis - 1));
    g.counts.fill(points_per_axis);
    return g;
  }

  static TensorGrid box(const Vec<D>& lo, const Vec<D>& hi, double step) {
    require(step > 0.0, ErrorKind::InvalidArgument, "grid step must be positive");
    TensorGrid g;
    g.lower = lo;
    for (int a = 0; a < D; ++a) {
      const int cells = std::max(1, static_cast<int>(std::ceil((hi(a) - lo(a)) / step - 1e-9)));
      g.counts[a] = cells + 1;
      g.spacing(a) = (hi(a) - lo(a)) / cells;
    }
    return g;
  }

  std::size_t size() const {
    std::size_t n = 1;
    for (int c : counts) n *= static_cast<std::size_t>(c);
    return n;
  }

  double cell_volume() const { return spacing.prod(); }

  Vec<D> upper() const {
    Vec<D> u;
    for (int a = 0; a < D; ++a) u(a) = lower(a) + spacing(a) * (counts[a] - 1);
    return u;
  }

  std::size_t flat(const std::array<int, D>& idx) const {
    std::size_t f = 0;
    for (int a = 0; a < D; ++a) f = f * counts[a] + idx[a];
    return f;
  }

  std::array<int, D> unflat(std::size_t f) const {
    std::array<int, D> idx{};
    for (int a = D - 1; a >= 0; --a) {
      idx[a] = static_cast<int>(f % counts[a]);
      f /= counts[a];
    }
    return idx;
  }

  Vec<D> node(const std::array<int, D>& idx) const {
    Vec<D> x;
    for (int a = 0; a < D; ++a) x(a) = lower(a) + spacing(a) * idx[a];
    return x;
  }

  Vec<D> node(std::size_t f) const { return node(unflat(f)); }

  bool contains(const Vec<D>& x, double pad = 0.0) const {
    const Vec<D> u = upper();
    for (int a = 0; a < D; ++a)
      if (x(a) < lower(a) + pad || x(a) > u(a) - pad) return false;
    return true;
  }

  std::array<int, D> nearest(const Vec<D>& x) const {
    std::array<int, D> idx{};
    for (int a = 0; a < D; ++a) {
      int i = static_cast<int>(std::lround((x(a) - lower(a)) / spacing(a)));
      idx[a] = std::clamp(i, 0, counts[a] - 1);
    }
    return idx;
  }
};

namespace detail {

// Cubic Lagrange weights on nodes -1, 0, 1, 2 at offset u in [0, 1].
inline void cubic_weights(double u, double w[4], double dw[4]) {
  w[0] = -u * (u - 1.0) * (u - 2.0) / 6.0;
  w[1] = (u + 1.0) * (u - 1.0) * (u - 2.0) / 2.0;
  w[2] = -(u + 1.0) * u * (u - 2.0) / 2.0;
  w[3] = (u + 1.0) * u * (u - 1.0) / 6.0;
  dw[0] = -(3.0 * u * u - 6.0 * u + 2.0) / 6.0;
  dw[1] = (3.0 * u * u - 4.0 * u - 1.0) / 2.0;
  dw[2] = -(3.0 * u * u - 2.0 * u - 2.0) / 2.0;
  dw[3] = (3.0 * u * u - 1.0) / 6.0;
}

}  // namespace detail

/// Tensor cubic stencil at x. Throws out-of-chart when the 4^D stencil leaves the grid.
template <int D>
struct CubicStencil {
  static constexpr int kSize = 1 << (2 * D);
  std::array<std::size_t, kSize> index{};
  std::array<double, kSize> weight{};
  std::array<Vec<D>, kSize> dweight{};

  CubicStencil(const TensorGrid<D>& g, const Vec<D>& x) {
    std::array<int, D> base{};
    double w[D][4], dw[D][4];
    for (int a = 0; a < D; ++a) {
      require(g.counts[a] >= 4, ErrorKind::InvalidArgument, "cubic interpolation needs 4 points per axis");
      const double s = (x(a) - g.lower(a)) / g.spacing(a);
      if (!(s >= 0.0 && s <= g.counts[a] - 1.0)) throw Error(ErrorKind::OutOfChart, "point outside interpolation grid");
      int i = static_cast<int>(std::floor(s));
      i = std::clamp(i, 1, g.counts[a] - 3);
      detail::cubic_weights(s - i, w[a], dw[a]);
      base[a] = i - 1;
    }
    for (int k = 0; k < kSize; ++k) {
      std::array<int, D> idx{};
      double wt = 1.0;
      Vec<D> dwt = Vec<D>::Ones();
      int code = k;
      for (int a = D - 1; a >= 0; --a) {
        const int o = code & 3;
        code >>= 2;
        idx[a] = base[a] + o;
        wt *= w[a][o];
        for (int b = 0; b < D; ++b) dwt(b) *= (a == b ? dw[a][o] / g.spacing(a) : w[a][o]);
      }
      index[k] = g.flat(idx);
      weight[k] = wt;
      dweight[k] = dwt;
    }
  }

  template <class T>
  T value(const std::vector<T>& data) const {
    T acc = data[index[0]] * weight[0];
    for (int k = 1; k < kSize; ++k) acc += data[index[k]] * weight[k];
    return acc;
  }

  double value(const std::vector<double>& data) const {
    double acc = 0.0;
    for (int k = 0; k < kSize; ++k) acc += data[index[k]] * weight[k];
    return acc;
  }

  /// Jacobian of an interpolated vector field: rows components, columns coordinates.
  Mat<D> jacobian(const std::vector<Vec<D>>& data) const {
    Mat<D> acc = Mat<D>::Zero();
    for (int k = 0; k < kSize; ++k) acc += data[index[k]] * dweight[k].transpose();
    return acc;
  }

  Vec<D> gradient(const std::vector<double>& data) const {
    Vec<D> acc = Vec<D>::Zero();
    for (int k = 0; k < kSize; ++k) acc += data[index[k]] * dweight[k];
    return acc;
  }
};

}  // namespace roughflow
