#pragma once

#include "roughflow/sde.hpp"

#include <memory>
#include <vector>

namespace roughflow {

/// phi_t, J_t, K_t and the spatial derivatives dJ[a](b, c) = d_c J_{ab} at one point.
template <int D>
struct FrameSample {
  Vec<D> phi = Vec<D>::Zero();
  Mat<D> J = Mat<D>::Identity();
  Mat<D> K = Mat<D>::Identity();
  Hess<D> dJ = zero_hess<D>();

  Vec<D> divK() const { return inverse_divergence<D>(K, dJ); }
};

/// Diffusion flow data advanced in lockstep along the path. At step k the frame holds
/// the slices t_k and t_{k+1}; sample(x, theta) blends them linearly in t.
template <int D>
class DiffusionFrame {
 public:
  virtual ~DiffusionFrame() = default;

  /// Rewind to k = 0.
  virtual void reset() = 0;
  /// Move the slice pair forward by one step.
  virtual void advance() = 0;
  virtual FrameSample<D> sample(const Vec<D>& x, double theta) const = 0;

  std::size_t step() const { return k_; }
  const BrownianPath& path() const { return path_; }
  const std::vector<SmoothVectorField<D>>& fields() const { return fields_; }

 protected:
  DiffusionFrame(BrownianPath path, std::vector<SmoothVectorField<D>> fields)
      : path_(std::move(path)), fields_(std::move(fields)) {
    require(static_cast<int>(fields_.size()) == path_.m(), ErrorKind::InvalidArgument,
            "number of diffusion fields differs from path dimension");
  }

  BrownianPath path_;
  std::vector<SmoothVectorField<D>> fields_;
  std::size_t k_ = 0;
};

/// Constant diffusion fields: phi_t(x) = x + sum_i sigma_i w_t^i, K = I. Exact.
template <int D>
class AdditiveFrame : public DiffusionFrame<D> {
 public:
  AdditiveFrame(BrownianPath path, std::vector<SmoothVectorField<D>> fields)
      : DiffusionFrame<D>(std::move(path), std::move(fields)) {
    for (const auto& f : this->fields_) {
      require(f.is_constant(), ErrorKind::InvalidArgument, "additive frame needs constant diffusion fields");
      sigma_.push_back(f.value(Vec<D>::Zero()));
    }
    reset();
  }

  void reset() override {
    this->k_ = 0;
    shift_[0].setZero();
    shift_[1] = shift_after(0, shift_[0]);
  }

  void advance() override {
    ++this->k_;
    shift_[0] = shift_[1];
    if (this->k_ < this->path_.steps()) shift_[1] = shift_after(this->k_, shift_[0]);
  }

  FrameSample<D> sample(const Vec<D>& x, double theta) const override {
    FrameSample<D> s;
    if (theta == 0.0)
      s.phi = x + shift_[0];
    else if (theta == 1.0)
      s.phi = x + shift_[1];
    else
      s.phi = x + ((1.0 - theta) * shift_[0] + theta * shift_[1]);
    return s;
  }

  /// sum_i sigma_i w^i at node k (accumulated in step order).
  Vec<D> shift(std::size_t k) const {
    Vec<D> s = Vec<D>::Zero();
    for (std::size_t j = 0; j < k; ++j) s = shift_after(j, s);
    return s;
  }

 private:
  Vec<D> shift_after(std::size_t k, const Vec<D>& s) const {
    Vec<D> out = s;
    for (std::size_t i = 0; i < sigma_.size(); ++i) out += sigma_[i] * this->path_.dw(k, static_cast<int>(i));
    return out;
  }

  std::vector<Vec<D>> sigma_;
  std::array<Vec<D>, 2> shift_{Vec<D>::Zero(), Vec<D>::Zero()};
};

/// General diffusion fields: a node grid advanced with the second variation; off-node values
/// by tensor cubic interpolation of phi, J and dJ. Queries outside the node box are out-of-chart.
template <int D>
class GridChart : public DiffusionFrame<D> {
 public:
  GridChart(BrownianPath path, std::vector<SmoothVectorField<D>> fields, TensorGrid<D> nodes)
      : DiffusionFrame<D>(std::move(path), std::move(fields)), nodes_(std::move(nodes)) {
    for (const auto& f : this->fields_)
      require(f.is_constant() || f.has_hessian(), ErrorKind::MissingHessian,
              "grid chart needs second derivatives of '" + f.name() + "'");
    reset();
  }

  const TensorGrid<D>& nodes() const { return nodes_; }

  void reset() override {
    this->k_ = 0;
    state_[0].assign(nodes_.size(), FlowState<D>{});
    for (std::size_t i = 0; i < nodes_.size(); ++i) state_[0][i] = FlowState<D>::at(nodes_.node(i));
    unpack(0);
    step_into(1, state_[0], 0);
  }

  void advance() override {
    ++this->k_;
    std::swap(state_[0], state_[1]);
    std::swap(phi_[0], phi_[1]);
    std::swap(J_[0], J_[1]);
    std::swap(dJ_[0], dJ_[1]);
    if (this->k_ < this->path_.steps()) step_into(1, state_[0], this->k_);
  }

  FrameSample<D> sample(const Vec<D>& x, double theta) const override {
    const CubicStencil<D> st(nodes_, x);
    FrameSample<D> s;
    if (theta == 0.0 || theta == 1.0) {
      const int slot = theta == 0.0 ? 0 : 1;
      s.phi = st.value(phi_[slot]);
      s.J = st.value(J_[slot]);
      for (int a = 0; a < D; ++a) s.dJ[a] = st.value(dJ_[slot][a]);
    } else {
      s.phi = (1.0 - theta) * st.value(phi_[0]) + theta * st.value(phi_[1]);
      s.J = (1.0 - theta) * st.value(J_[0]) + theta * st.value(J_[1]);
      for (int a = 0; a < D; ++a) s.dJ[a] = (1.0 - theta) * st.value(dJ_[0][a]) + theta * st.value(dJ_[1][a]);
    }
    s.K = s.J.inverse();
    return s;
  }

 private:
  void step_into(int slot, const std::vector<FlowState<D>>& from, std::size_t k) {
    state_[slot].resize(from.size());
    const double* dw = this->path_.increments().data() + k * this->path_.m();
    for (std::size_t i = 0; i < from.size(); ++i)
      state_[slot][i] = heun_step<D>(from[i], this->fields_, dw, nullptr, this->path_.h(), 2);
    unpack(slot);
  }

  void unpack(int slot) {
    const std::size_t n = state_[slot].size();
    phi_[slot].resize(n);
    J_[slot].resize(n);
    for (int a = 0; a < D; ++a) dJ_[slot][a].resize(n);
    for (std::size_t i = 0; i < n; ++i) {
      phi_[slot][i] = state_[slot][i].x;
      J_[slot][i] = state_[slot][i].J;
      for (int a = 0; a < D; ++a) dJ_[slot][a][i] = state_[slot][i].H[a];
    }
  }

  TensorGrid<D> nodes_;
  std::array<std::vector<FlowState<D>>, 2> state_;
  std::array<std::vector<Vec<D>>, 2> phi_;
  std::array<std::vector<Mat<D>>, 2> J_;
  std::array<std::array<std::vector<Mat<D>>, D>, 2> dJ_;
};

/// Exact frame for constant fields (including m = 0), node chart otherwise.
template <int D>
std::unique_ptr<DiffusionFrame<D>> make_frame(const BrownianPath& path, const std::vector<SmoothVectorField<D>>& fields,
                                              const TensorGrid<D>& chart_nodes) {
  bool additive = true;
  for (const auto& f : fields) additive = additive && f.is_constant();
  if (additive) return std::make_unique<AdditiveFrame<D>>(path, fields);
  return std::make_unique<GridChart<D>>(path, fields, chart_nodes);
}

}  // namespace roughflow
