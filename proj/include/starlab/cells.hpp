// Copyright 2026 The starlab Authors.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

// Recurrent cells: vanilla RNN, LSTM, LSTM with only a forget gate, GRU and
// STAR. Every cell works on batches stored as columns (features x batch).

#pragma once

#include "starlab/numerics.hpp"

#include <cmath>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace starlab {

enum class CellKind { VRNN, LSTM, LSTMwF, GRU, STAR };

inline constexpr CellKind kAllCellKinds[] = {CellKind::VRNN, CellKind::LSTM, CellKind::LSTMwF,
                                             CellKind::GRU, CellKind::STAR};

inline std::string_view to_string(CellKind kind) {
  switch (kind) {
    case CellKind::VRNN: return "vrnn";
    case CellKind::LSTM: return "lstm";
    case CellKind::LSTMwF: return "lstmwf";
    case CellKind::GRU: return "gru";
    case CellKind::STAR: return "star";
  }
  return "?";
}

inline std::optional<CellKind> parse_cell_kind(std::string_view name) {
  if (name == "vrnn") return CellKind::VRNN;
  if (name == "lstm") return CellKind::LSTM;
  if (name == "lstmwf" || name == "lstm-wf") return CellKind::LSTMwF;
  if (name == "gru") return CellKind::GRU;
  if (name == "star") return CellKind::STAR;
  return std::nullopt;
}

inline bool has_cell_state(CellKind kind) { return kind == CellKind::LSTM; }

/// Which gate biases start from the chrono scheme.
enum class BiasInit {
  Zero,             // every bias zero (fixed-point analysis)
  Chrono,           // gate biases chrono-initialised, others zero
  ChronoForgetOne,  // as Chrono, but the LSTM uses b_f = 1, b_i = 0
};

// Fixed slot order of the weights and biases for each kind. Input weights
// have n_in columns, recurrent ones n_hidden.
namespace slot {
namespace vrnn { enum W { Wx, Wh }; enum B { b }; }
namespace lstm { enum W { Wxi, Whi, Wxf, Whf, Wxo, Who, Wxz, Whz }; enum B { bi, bf, bo, bz }; }
namespace lstmwf { enum W { Wxf, Whf, Wxz, Whz }; enum B { bf, bz }; }
namespace gru { enum W { Wxz, Whz, Wxr, Whr, Wxh, Whh }; enum B { bz, br, bh }; }
namespace star { enum W { Wz, Wx, Wh }; enum B { bz, bk }; }
}  // namespace slot

struct TensorLayout {
  std::vector<std::string> weight_names;
  std::vector<bool> weight_is_recurrent;
  std::vector<std::string> bias_names;
};

inline TensorLayout layout_of(CellKind kind) {
  switch (kind) {
    case CellKind::VRNN: return {{"W_x", "W_h"}, {false, true}, {"b"}};
    case CellKind::LSTM:
      return {{"W_xi", "W_hi", "W_xf", "W_hf", "W_xo", "W_ho", "W_xz", "W_hz"},
              {false, true, false, true, false, true, false, true},
              {"b_i", "b_f", "b_o", "b_z"}};
    case CellKind::LSTMwF:
      return {{"W_xf", "W_hf", "W_xz", "W_hz"}, {false, true, false, true}, {"b_f", "b_z"}};
    case CellKind::GRU:
      return {{"W_xz", "W_hz", "W_xr", "W_hr", "W_xh", "W_hh"},
              {false, true, false, true, false, true},
              {"b_z", "b_r", "b_h"}};
    case CellKind::STAR: return {{"W_z", "W_x", "W_h"}, {false, false, true}, {"b_z", "b_k"}};
  }
  throw std::invalid_argument("layout_of: unknown cell kind");
}

/// Named weights and biases of one cell, laid out per `layout_of(kind)`.
/// Shared by parameters, gradients and optimizer moments.
struct CellTensors {
  CellKind kind = CellKind::VRNN;
  Index n_in = 0;
  Index n_hidden = 0;
  std::vector<Mat> weights;
  std::vector<Vec> biases;

  static CellTensors zeros(CellKind kind, Index n_in, Index n_hidden) {
    const TensorLayout layout = layout_of(kind);
    CellTensors t;
    t.kind = kind;
    t.n_in = n_in;
    t.n_hidden = n_hidden;
    for (bool recurrent : layout.weight_is_recurrent)
      t.weights.push_back(Mat::Zero(n_hidden, recurrent ? n_hidden : n_in));
    t.biases.assign(layout.bias_names.size(), Vec::Zero(n_hidden));
    return t;
  }

  CellTensors zeros_like() const { return zeros(kind, n_in, n_hidden); }

  Mat& weight(std::string_view name) { return weights[find(layout_of(kind).weight_names, name)]; }
  const Mat& weight(std::string_view name) const {
    return weights[find(layout_of(kind).weight_names, name)];
  }
  Vec& bias(std::string_view name) { return biases[find(layout_of(kind).bias_names, name)]; }
  const Vec& bias(std::string_view name) const {
    return biases[find(layout_of(kind).bias_names, name)];
  }

  Index scalar_count() const {
    Index count = 0;
    for (const auto& w : weights) count += w.size();
    for (const auto& b : biases) count += b.size();
    return count;
  }

  double squared_norm() const {
    double s = 0.0;
    for (const auto& w : weights) s += w.squaredNorm();
    for (const auto& b : biases) s += b.squaredNorm();
    return s;
  }

  double norm() const { return std::sqrt(squared_norm()); }

  bool all_finite() const {
    for (const auto& w : weights)
      if (!w.allFinite()) return false;
    for (const auto& b : biases)
      if (!b.allFinite()) return false;
    return true;
  }

  void set_zero() {
    for (auto& w : weights) w.setZero();
    for (auto& b : biases) b.setZero();
  }

  CellTensors& operator+=(const CellTensors& other) {
    for (std::size_t i = 0; i < weights.size(); ++i) weights[i] += other.weights[i];
    for (std::size_t i = 0; i < biases.size(); ++i) biases[i] += other.biases[i];
    return *this;
  }

  CellTensors& operator*=(double s) {
    for (auto& w : weights) w *= s;
    for (auto& b : biases) b *= s;
    return *this;
  }

  /// Visits every scalar in layout order.
  template <typename F>
  void for_each_scalar(F&& f) {
    for (auto& w : weights)
      for (Index i = 0; i < w.size(); ++i) f(w.data()[i]);
    for (auto& b : biases)
      for (Index i = 0; i < b.size(); ++i) f(b.data()[i]);
  }

 private:
  static std::size_t find(const std::vector<std::string>& names, std::string_view name) {
    for (std::size_t i = 0; i < names.size(); ++i)
      if (names[i] == name) return i;
    throw std::out_of_range("CellTensors: no tensor named " + std::string(name));
  }
};

using CellParams = CellTensors;
using CellGrads = CellTensors;

inline Index param_count(CellKind kind, Index n_in, Index n_hidden) {
  if (n_in < 1 || n_hidden < 1) throw std::invalid_argument("param_count: dimensions must be >= 1");
  const Index gate = n_hidden * n_in + n_hidden * n_hidden + n_hidden;
  switch (kind) {
    case CellKind::VRNN: return gate;
    case CellKind::LSTM: return 4 * gate;
    case CellKind::LSTMwF: return 2 * gate;
    case CellKind::GRU: return 3 * gate;
    case CellKind::STAR: return 2 * n_hidden * n_in + n_hidden * n_hidden + 2 * n_hidden;
  }
  throw std::invalid_argument("param_count: unknown cell kind");
}

/// Chrono gate bias: b = -ln(u), u ~ U[1, t_max - 1], so sigma(b) starts small.
inline Vec chrono_bias_init(Index n, Index t_max, Rng& rng) {
  if (t_max < 2) throw std::invalid_argument("chrono_bias_init: t_max must be >= 2");
  Vec b(n);
  const double hi = static_cast<double>(t_max - 1);
  for (Index i = 0; i < n; ++i) b(i) = -std::log(rng.uniform(1.0, hi));
  return b;
}

/// Semi-orthogonal weights drawn in slot order, then the gate biases.
inline CellParams init_params(CellKind kind, Index n_in, Index n_hidden, Index t_max, Rng& rng,
                              BiasInit bias_init = BiasInit::Chrono) {
  if (n_in < 1 || n_hidden < 1) throw std::invalid_argument("init_params: dimensions must be >= 1");
  if (t_max < 2) throw std::invalid_argument("init_params: t_max must be >= 2");
  CellParams p = CellParams::zeros(kind, n_in, n_hidden);
  for (auto& w : p.weights) w = orthogonal_matrix(rng, w.rows(), w.cols());
  if (bias_init == BiasInit::Zero) return p;

  switch (kind) {
    case CellKind::VRNN: break;
    case CellKind::LSTM:
      if (bias_init == BiasInit::ChronoForgetOne) {
        p.biases[slot::lstm::bf].setOnes();
      } else {
        p.biases[slot::lstm::bf] = -chrono_bias_init(n_hidden, t_max, rng);
        p.biases[slot::lstm::bi] = -p.biases[slot::lstm::bf];
      }
      break;
    case CellKind::LSTMwF:
      // f retains the previous state, so it is biased open.
      p.biases[slot::lstmwf::bf] = -chrono_bias_init(n_hidden, t_max, rng);
      break;
    case CellKind::GRU:
      // z admits the candidate, so it is biased closed.
      p.biases[slot::gru::bz] = chrono_bias_init(n_hidden, t_max, rng);
      break;
    case CellKind::STAR: p.biases[slot::star::bk] = chrono_bias_init(n_hidden, t_max, rng); break;
  }
  return p;
}

namespace detail {

inline Mat sigmoid(const Mat& a) { return (1.0 / (1.0 + (-a.array()).exp())).matrix(); }

inline Mat tanh_of(const Mat& a) { return a.array().tanh().matrix(); }

// sigma' and tanh' from post-activations.
inline Mat dsigmoid(const Mat& s) { return (s.array() * (1.0 - s.array())).matrix(); }
inline Mat dtanh(const Mat& t) { return (1.0 - t.array().square()).matrix(); }

inline Mat affine(const Mat& w, const Mat& x, const Vec& b) {
  Mat out = w * x;
  out.colwise() += b;
  return out;
}

inline Mat affine(const Mat& wx, const Mat& x, const Mat& wh, const Mat& h, const Vec& b) {
  Mat out = wx * x;
  out.noalias() += wh * h;
  out.colwise() += b;
  return out;
}

inline Mat diag_times(const Vec& d, const Mat& m) { return d.asDiagonal() * m; }

inline Vec col(const Mat& m) { return m.col(0); }

inline Mat as_column(const Vec& v) {
  Mat m(v.size(), 1);
  m.col(0) = v;
  return m;
}

}  // namespace detail

/// Everything backward needs, so no forward recomputation is required.
/// Activations that a kind does not use stay empty.
struct ForwardCache {
  Mat x, h_prev, c_prev;
  Mat i, f, o, z, k, r, a;  // gates and candidates (post-activation)
  Mat c, tanh_c;            // LSTM cell state
  Mat h;
};

inline void check_forward_shapes(const CellParams& p, const Mat& x, const Mat& h_prev,
                                 const Mat& c_prev) {
  const bool ok = x.rows() == p.n_in && h_prev.rows() == p.n_hidden && x.cols() == h_prev.cols();
  if (!ok) throw std::invalid_argument("cell forward: shape mismatch");
  if (has_cell_state(p.kind)) {
    if (c_prev.rows() != p.n_hidden || c_prev.cols() != h_prev.cols())
      throw std::invalid_argument("cell forward: LSTM requires a cell state of matching shape");
  } else if (c_prev.size() != 0) {
    throw std::invalid_argument("cell forward: only LSTM carries a cell state");
  }
}

/// One step of the cell's update rule on a batch of columns.
inline ForwardCache forward(const CellParams& p, const Mat& x, const Mat& h_prev,
                            const Mat& c_prev = Mat()) {
  using namespace detail;
  check_forward_shapes(p, x, h_prev, c_prev);
  ForwardCache fc;
  fc.x = x;
  fc.h_prev = h_prev;
  const auto& W = p.weights;
  const auto& b = p.biases;
  switch (p.kind) {
    case CellKind::VRNN: {
      using namespace slot::vrnn;
      fc.h = tanh_of(affine(W[Wx], x, W[Wh], h_prev, b[slot::vrnn::b]));
      break;
    }
    case CellKind::LSTM: {
      using namespace slot::lstm;
      fc.c_prev = c_prev;
      fc.i = sigmoid(affine(W[Wxi], x, W[Whi], h_prev, b[bi]));
      fc.f = sigmoid(affine(W[Wxf], x, W[Whf], h_prev, b[bf]));
      fc.o = sigmoid(affine(W[Wxo], x, W[Who], h_prev, b[bo]));
      fc.z = tanh_of(affine(W[Wxz], x, W[Whz], h_prev, b[bz]));
      fc.c = (fc.f.array() * c_prev.array() + fc.i.array() * fc.z.array()).matrix();
      fc.tanh_c = tanh_of(fc.c);
      fc.h = (fc.o.array() * fc.tanh_c.array()).matrix();
      break;
    }
    case CellKind::LSTMwF: {
      using namespace slot::lstmwf;
      fc.f = sigmoid(affine(W[Wxf], x, W[Whf], h_prev, b[bf]));
      fc.z = tanh_of(affine(W[Wxz], x, W[Whz], h_prev, b[bz]));
      fc.h = tanh_of(
          (fc.f.array() * h_prev.array() + (1.0 - fc.f.array()) * fc.z.array()).matrix());
      break;
    }
    case CellKind::GRU: {
      using namespace slot::gru;
      fc.z = sigmoid(affine(W[Wxz], x, W[Whz], h_prev, b[bz]));
      fc.r = sigmoid(affine(W[Wxr], x, W[Whr], h_prev, b[br]));
      const Mat gated = (fc.r.array() * h_prev.array()).matrix();
      fc.a = tanh_of(affine(W[Wxh], x, W[Whh], gated, b[bh]));
      fc.h = ((1.0 - fc.z.array()) * h_prev.array() + fc.z.array() * fc.a.array()).matrix();
      break;
    }
    case CellKind::STAR: {
      using namespace slot::star;
      fc.z = tanh_of(affine(W[Wz], x, b[slot::star::bz]));
      fc.k = sigmoid(affine(W[Wx], x, W[Wh], h_prev, b[bk]));
      fc.h = tanh_of(
          (h_prev.array() + fc.k.array() * (fc.z.array() - h_prev.array())).matrix());
      break;
    }
  }
  return fc;
}

struct CellBackward {
  Mat g_x;
  Mat g_h_prev;
  Mat g_c_prev;  // LSTM only
};

namespace detail {

// Adds delta * input^T to a weight gradient and the row sums of delta to a bias.
inline void add_outer(Mat& gw, const Mat& delta, const Mat& input) {
  gw.noalias() += delta * input.transpose();
}
inline void add_rowsum(Vec& gb, const Mat& delta) { gb += delta.rowwise().sum(); }

}  // namespace detail

/// Reverse-mode step. Parameter gradients are added into `grads`, which must
/// have the layout of `p`; pass a zeroed set to obtain this step alone.
inline CellBackward backward_into(const CellParams& p, const ForwardCache& fc, const Mat& g_h,
                                  const Mat& g_c, CellGrads& grads) {
  using namespace detail;
  if (g_h.rows() != p.n_hidden || g_h.cols() != fc.h.cols())
    throw std::invalid_argument("cell backward: g_h shape mismatch");
  if (has_cell_state(p.kind) && g_c.size() != 0 &&
      (g_c.rows() != p.n_hidden || g_c.cols() != fc.h.cols()))
    throw std::invalid_argument("cell backward: g_c shape mismatch");
  if (!has_cell_state(p.kind) && g_c.size() != 0)
    throw std::invalid_argument("cell backward: only LSTM carries a cell state");

  const auto& W = p.weights;
  auto& GW = grads.weights;
  auto& GB = grads.biases;
  CellBackward out;
  switch (p.kind) {
    case CellKind::VRNN: {
      using namespace slot::vrnn;
      const Mat d = (g_h.array() * dtanh(fc.h).array()).matrix();
      out.g_x = W[Wx].transpose() * d;
      out.g_h_prev = W[Wh].transpose() * d;
      add_outer(GW[Wx], d, fc.x);
      add_outer(GW[Wh], d, fc.h_prev);
      add_rowsum(GB[slot::vrnn::b], d);
      break;
    }
    case CellKind::LSTM: {
      using namespace slot::lstm;
      Mat gc = (g_h.array() * fc.o.array() * dtanh(fc.tanh_c).array()).matrix();
      if (g_c.size() != 0) gc += g_c;
      const Mat d_o = (g_h.array() * fc.tanh_c.array() * dsigmoid(fc.o).array()).matrix();
      const Mat d_f = (gc.array() * fc.c_prev.array() * dsigmoid(fc.f).array()).matrix();
      const Mat d_i = (gc.array() * fc.z.array() * dsigmoid(fc.i).array()).matrix();
      const Mat d_z = (gc.array() * fc.i.array() * dtanh(fc.z).array()).matrix();
      out.g_c_prev = (gc.array() * fc.f.array()).matrix();
      out.g_x = W[Wxi].transpose() * d_i;
      out.g_x.noalias() += W[Wxf].transpose() * d_f;
      out.g_x.noalias() += W[Wxo].transpose() * d_o;
      out.g_x.noalias() += W[Wxz].transpose() * d_z;
      out.g_h_prev = W[Whi].transpose() * d_i;
      out.g_h_prev.noalias() += W[Whf].transpose() * d_f;
      out.g_h_prev.noalias() += W[Who].transpose() * d_o;
      out.g_h_prev.noalias() += W[Whz].transpose() * d_z;
      add_outer(GW[Wxi], d_i, fc.x);
      add_outer(GW[Whi], d_i, fc.h_prev);
      add_outer(GW[Wxf], d_f, fc.x);
      add_outer(GW[Whf], d_f, fc.h_prev);
      add_outer(GW[Wxo], d_o, fc.x);
      add_outer(GW[Who], d_o, fc.h_prev);
      add_outer(GW[Wxz], d_z, fc.x);
      add_outer(GW[Whz], d_z, fc.h_prev);
      add_rowsum(GB[bi], d_i);
      add_rowsum(GB[bf], d_f);
      add_rowsum(GB[bo], d_o);
      add_rowsum(GB[bz], d_z);
      break;
    }
    case CellKind::LSTMwF: {
      using namespace slot::lstmwf;
      const Mat gs = (g_h.array() * dtanh(fc.h).array()).matrix();
      const Mat d_f =
          (gs.array() * (fc.h_prev.array() - fc.z.array()) * dsigmoid(fc.f).array()).matrix();
      const Mat d_z = (gs.array() * (1.0 - fc.f.array()) * dtanh(fc.z).array()).matrix();
      out.g_x = W[Wxf].transpose() * d_f;
      out.g_x.noalias() += W[Wxz].transpose() * d_z;
      out.g_h_prev = (gs.array() * fc.f.array()).matrix();
      out.g_h_prev.noalias() += W[Whf].transpose() * d_f;
      out.g_h_prev.noalias() += W[Whz].transpose() * d_z;
      add_outer(GW[Wxf], d_f, fc.x);
      add_outer(GW[Whf], d_f, fc.h_prev);
      add_outer(GW[Wxz], d_z, fc.x);
      add_outer(GW[Whz], d_z, fc.h_prev);
      add_rowsum(GB[bf], d_f);
      add_rowsum(GB[bz], d_z);
      break;
    }
    case CellKind::GRU: {
      using namespace slot::gru;
      const Mat d_a = (g_h.array() * fc.z.array() * dtanh(fc.a).array()).matrix();
      const Mat d_z =
          (g_h.array() * (fc.a.array() - fc.h_prev.array()) * dsigmoid(fc.z).array()).matrix();
      const Mat g_gated = W[Whh].transpose() * d_a;
      const Mat d_r = (g_gated.array() * fc.h_prev.array() * dsigmoid(fc.r).array()).matrix();
      const Mat gated = (fc.r.array() * fc.h_prev.array()).matrix();
      out.g_x = W[Wxz].transpose() * d_z;
      out.g_x.noalias() += W[Wxr].transpose() * d_r;
      out.g_x.noalias() += W[Wxh].transpose() * d_a;
      out.g_h_prev =
          (g_h.array() * (1.0 - fc.z.array()) + g_gated.array() * fc.r.array()).matrix();
      out.g_h_prev.noalias() += W[Whz].transpose() * d_z;
      out.g_h_prev.noalias() += W[Whr].transpose() * d_r;
      add_outer(GW[Wxz], d_z, fc.x);
      add_outer(GW[Whz], d_z, fc.h_prev);
      add_outer(GW[Wxr], d_r, fc.x);
      add_outer(GW[Whr], d_r, fc.h_prev);
      add_outer(GW[Wxh], d_a, fc.x);
      add_outer(GW[Whh], d_a, gated);
      add_rowsum(GB[bz], d_z);
      add_rowsum(GB[br], d_r);
      add_rowsum(GB[bh], d_a);
      break;
    }
    case CellKind::STAR: {
      using namespace slot::star;
      const Mat gs = (g_h.array() * dtanh(fc.h).array()).matrix();
      const Mat d_k =
          (gs.array() * (fc.z.array() - fc.h_prev.array()) * dsigmoid(fc.k).array()).matrix();
      const Mat d_z = (gs.array() * fc.k.array() * dtanh(fc.z).array()).matrix();
      out.g_x = W[Wz].transpose() * d_z;
      out.g_x.noalias() += W[Wx].transpose() * d_k;
      out.g_h_prev = (gs.array() * (1.0 - fc.k.array())).matrix();
      out.g_h_prev.noalias() += W[Wh].transpose() * d_k;
      add_outer(GW[Wz], d_z, fc.x);
      add_outer(GW[Wx], d_k, fc.x);
      add_outer(GW[Wh], d_k, fc.h_prev);
      add_rowsum(GB[slot::star::bz], d_z);
      add_rowsum(GB[bk], d_k);
      break;
    }
  }
  return out;
}

struct CellBackwardWithGrads : CellBackward {
  CellGrads grads;
};

inline CellBackwardWithGrads backward(const CellParams& p, const ForwardCache& fc, const Mat& g_h,
                                      const Mat& g_c = Mat()) {
  CellBackwardWithGrads out;
  out.grads = p.zeros_like();
  static_cast<CellBackward&>(out) = backward_into(p, fc, g_h, g_c, out.grads);
  return out;
}

struct Jacobians {
  Mat J;  // d h / d x
  Mat H;  // d h / d h_prev
};

/// Input and state Jacobians at a single point, assembled from the
/// diagonal-times-weight closed forms of each update rule.
inline Jacobians jacobians_at(const CellParams& p, const Vec& x, const Vec& h_prev,
                              const std::optional<Vec>& c_prev = std::nullopt) {
  using namespace detail;
  if (has_cell_state(p.kind) != c_prev.has_value())
    throw std::invalid_argument("jacobians_at: c_prev must be given iff the cell is an LSTM");
  const ForwardCache fc =
      forward(p, as_column(x), as_column(h_prev), c_prev ? as_column(*c_prev) : Mat());
  const auto& W = p.weights;
  Jacobians jac;
  switch (p.kind) {
    case CellKind::VRNN: {
      using namespace slot::vrnn;
      const Vec d = col(dtanh(fc.h));
      jac.J = diag_times(d, W[Wx]);
      jac.H = diag_times(d, W[Wh]);
      break;
    }
    case CellKind::LSTM: {
      using namespace slot::lstm;
      const Vec tc = col(fc.tanh_c);
      const Vec dtc_o = (col(dtanh(fc.tanh_c)).array() * col(fc.o).array()).matrix();
      const Vec do_ = col(dsigmoid(fc.o));
      const Vec cp_df = (col(fc.c_prev).array() * col(dsigmoid(fc.f)).array()).matrix();
      const Vec z_di = (col(fc.z).array() * col(dsigmoid(fc.i)).array()).matrix();
      const Vec i_dz = (col(fc.i).array() * col(dtanh(fc.z)).array()).matrix();
      const Vec tc_do = (tc.array() * do_.array()).matrix();
      jac.J = diag_times(tc_do, W[Wxo]) +
              diag_times(dtc_o, diag_times(cp_df, W[Wxf]) + diag_times(z_di, W[Wxi]) +
                                    diag_times(i_dz, W[Wxz]));
      jac.H = diag_times(tc_do, W[Who]) +
              diag_times(dtc_o, diag_times(cp_df, W[Whf]) + diag_times(z_di, W[Whi]) +
                                    diag_times(i_dz, W[Whz]));
      break;
    }
    case CellKind::LSTMwF: {
      using namespace slot::lstmwf;
      const Vec ds = col(dtanh(fc.h));
      const Vec gap_df =
          ((col(fc.h_prev) - col(fc.z)).array() * col(dsigmoid(fc.f)).array()).matrix();
      const Vec keep_dz = ((1.0 - col(fc.f).array()) * col(dtanh(fc.z)).array()).matrix();
      jac.J = diag_times(ds, diag_times(gap_df, W[Wxf]) + diag_times(keep_dz, W[Wxz]));
      Mat inner = diag_times(gap_df, W[Whf]) + diag_times(keep_dz, W[Whz]);
      inner.diagonal() += col(fc.f);
      jac.H = diag_times(ds, inner);
      break;
    }
    case CellKind::GRU: {
      using namespace slot::gru;
      const Vec hp = col(fc.h_prev);
      const Vec gap_dz = ((col(fc.a) - hp).array() * col(dsigmoid(fc.z)).array()).matrix();
      const Vec z_da = (col(fc.z).array() * col(dtanh(fc.a)).array()).matrix();
      const Vec hp_dr = (hp.array() * col(dsigmoid(fc.r)).array()).matrix();
      jac.J = diag_times(gap_dz, W[Wxz]) +
              diag_times(z_da, W[Wxh] + W[Whh] * diag_times(hp_dr, W[Wxr]));
      Mat through_reset = diag_times(hp_dr, W[Whr]);
      through_reset.diagonal() += col(fc.r);
      jac.H = diag_times(gap_dz, W[Whz]) + diag_times(z_da, W[Whh] * through_reset);
      jac.H.diagonal() += (1.0 - col(fc.z).array()).matrix();
      break;
    }
    case CellKind::STAR: {
      using namespace slot::star;
      const Vec ds = col(dtanh(fc.h));
      const Vec gap_dk =
          ((col(fc.z) - col(fc.h_prev)).array() * col(dsigmoid(fc.k)).array()).matrix();
      const Vec k_dz = (col(fc.k).array() * col(dtanh(fc.z)).array()).matrix();
      jac.J = diag_times(ds, diag_times(gap_dk, W[Wx]) + diag_times(k_dz, W[Wz]));
      Mat inner = diag_times(gap_dk, W[Wh]);
      inner.diagonal() += (1.0 - col(fc.k).array()).matrix();
      jac.H = diag_times(ds, inner);
      break;
    }
  }
  return jac;
}

}  // namespace starlab
