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

// Stacked recurrent networks unrolled over time: the depth x time lattice,
// its forward and backward sweeps, and per-cell gradient statistics.

#pragma once

#include "starlab/cells.hpp"

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <limits>
#include <optional>
#include <ostream>
#include <stdexcept>
#include <string>
#include <vector>

namespace starlab {

struct LayerSpec {
  CellKind kind = CellKind::STAR;
  Index n_hidden = 0;
  /// Declared input width; must match the layer below when given.
  std::optional<Index> n_in;
};

struct StackSpec {
  std::vector<LayerSpec> layers;
  Index n_in = 0;
  Index t_max = 2;

  static StackSpec uniform(CellKind kind, Index depth, Index n_in, Index n_hidden, Index t_max) {
    StackSpec s;
    s.layers.assign(static_cast<std::size_t>(depth), LayerSpec{kind, n_hidden, std::nullopt});
    s.n_in = n_in;
    s.t_max = t_max;
    return s;
  }

  Index depth() const { return static_cast<Index>(layers.size()); }

  Index input_width(std::size_t layer) const {
    return layer == 0 ? n_in : layers[layer - 1].n_hidden;
  }

  void validate() const {
    if (layers.empty()) throw std::invalid_argument("stack: at least one layer is required");
    if (n_in < 1) throw std::invalid_argument("stack: input width must be >= 1");
    if (t_max < 2) throw std::invalid_argument("stack: t_max must be >= 2");
    for (std::size_t l = 0; l < layers.size(); ++l) {
      if (layers[l].n_hidden < 1)
        throw std::invalid_argument("stack: layer " + std::to_string(l + 1) + " has no units");
      if (layers[l].n_in && *layers[l].n_in != input_width(l))
        throw std::invalid_argument("stack: layer " + std::to_string(l + 1) +
                                    " declares input width " + std::to_string(*layers[l].n_in) +
                                    " but receives " + std::to_string(input_width(l)));
    }
  }
};

/// Parameters are shared across time within a layer and never across layers.
struct Lattice {
  StackSpec spec;
  std::vector<CellParams> params;

  Index depth() const { return spec.depth(); }
};

inline Lattice build(const StackSpec& spec, BiasInit bias_init, Rng& rng) {
  spec.validate();
  Lattice lat;
  lat.spec = spec;
  for (std::size_t l = 0; l < spec.layers.size(); ++l) {
    lat.params.push_back(init_params(spec.layers[l].kind, spec.input_width(l),
                                     spec.layers[l].n_hidden, spec.t_max, rng, bias_init));
  }
  return lat;
}

/// Hidden (and LSTM cell) states of every lattice node. Index as [layer][t],
/// zero based; the initial states are zero and not stored.
struct SequenceGrid {
  std::vector<Mat> inputs;
  std::vector<std::vector<Mat>> h;
  std::vector<std::vector<Mat>> c;

  Index steps() const { return static_cast<Index>(inputs.size()); }
  Index batch() const { return inputs.empty() ? 0 : inputs.front().cols(); }
  const Mat& top(Index t) const { return h.back()[static_cast<std::size_t>(t)]; }
};

namespace detail {

inline const Mat& cell_input(const SequenceGrid& g, std::size_t l, std::size_t t) {
  return l == 0 ? g.inputs[t] : g.h[l - 1][t];
}

}  // namespace detail

/// Runs the stacked recurrence left to right and bottom to top. Inputs are
/// n_in x batch matrices, one per step.
inline SequenceGrid forward_sequence(const Lattice& lat, const std::vector<Mat>& inputs) {
  const Index steps = static_cast<Index>(inputs.size());
  if (steps < 1) throw std::invalid_argument("forward_sequence: empty input sequence");
  if (steps > lat.spec.t_max)
    throw std::invalid_argument("forward_sequence: sequence longer than t_max");
  const Index batch = inputs.front().cols();
  for (const Mat& x : inputs) {
    if (x.rows() != lat.spec.n_in || x.cols() != batch)
      throw std::invalid_argument("forward_sequence: input width mismatch");
  }
  SequenceGrid g;
  g.inputs = inputs;
  const std::size_t depth = lat.params.size();
  g.h.resize(depth);
  g.c.resize(depth);
  for (std::size_t l = 0; l < depth; ++l) {
    const CellParams& p = lat.params[l];
    const bool lstm = has_cell_state(p.kind);
    g.h[l].reserve(static_cast<std::size_t>(steps));
    if (lstm) g.c[l].reserve(static_cast<std::size_t>(steps));
    Mat h = Mat::Zero(p.n_hidden, batch);
    Mat c = lstm ? Mat(Mat::Zero(p.n_hidden, batch)) : Mat();
    for (std::size_t t = 0; t < static_cast<std::size_t>(steps); ++t) {
      ForwardCache fc = forward(p, detail::cell_input(g, l, t), h, c);
      h = std::move(fc.h);
      g.h[l].push_back(h);
      if (lstm) {
        c = std::move(fc.c);
        g.c[l].push_back(c);
      }
    }
  }
  return g;
}

enum class LossMode { FinalStep, AllSteps, MeanPool };

inline std::optional<LossMode> parse_loss_mode(std::string_view name) {
  if (name == "final") return LossMode::FinalStep;
  if (name == "all") return LossMode::AllSteps;
  if (name == "mean") return LossMode::MeanPool;
  return std::nullopt;
}

inline std::string_view to_string(LossMode mode) {
  switch (mode) {
    case LossMode::FinalStep: return "final";
    case LossMode::AllSteps: return "all";
    case LossMode::MeanPool: return "mean";
  }
  return "?";
}

/// Gradients arriving at the top layer, one per step; an empty matrix means
/// no loss attaches at that step.
using TopGradients = std::vector<Mat>;

/// Analysis seeds: the unit vector (1/sqrt(n)) * 1, scaled by `scale`, at
/// every loss-attached node. MeanPool spreads it as 1/T per step.
inline TopGradients analysis_seeds(LossMode mode, Index steps, Index n_hidden, Index batch = 1,
                                   double scale = 1.0) {
  TopGradients seeds(static_cast<std::size_t>(steps));
  const Mat unit =
      Mat::Constant(n_hidden, batch, scale / std::sqrt(static_cast<double>(n_hidden)));
  for (Index t = 0; t < steps; ++t) {
    switch (mode) {
      case LossMode::FinalStep:
        if (t == steps - 1) seeds[static_cast<std::size_t>(t)] = unit;
        break;
      case LossMode::AllSteps: seeds[static_cast<std::size_t>(t)] = unit; break;
      case LossMode::MeanPool:
        seeds[static_cast<std::size_t>(t)] = unit / static_cast<double>(steps);
        break;
    }
  }
  return seeds;
}

struct BackwardOptions {
  /// Record per-node norms of g_h and of the node's own parameter gradient.
  bool record_norms = true;
  /// Record the cosine between the vertical and temporal parts of g_h.
  bool record_path_cosine = false;
};

struct BackwardResult {
  /// [layer][t] Frobenius norms; empty unless recorded.
  Mat gh_norm;
  Mat gparam_norm;
  /// NaN where either contribution is zero.
  Mat path_cosine;
  /// Per-layer parameter gradients summed over time.
  std::vector<CellGrads> totals;
  /// Gradient with respect to each input step.
  std::vector<Mat> input_grads;
};

/// Reverse sweep right to left and top to bottom. At each node g_h is the sum
/// of the input-Jacobian term from the node above (or the loss seed) and the
/// state-Jacobian term from the next step.
inline BackwardResult backward_sequence(const Lattice& lat, const SequenceGrid& g,
                                        const TopGradients& top,
                                        const BackwardOptions& opts = {}) {
  const Index steps = g.steps();
  if (static_cast<Index>(top.size()) != steps)
    throw std::invalid_argument("backward_sequence: one top gradient slot per step is required");
  const std::size_t depth = lat.params.size();
  const Index batch = g.batch();
  const Index n_top = lat.params.back().n_hidden;
  for (const Mat& s : top) {
    if (s.size() != 0 && (s.rows() != n_top || s.cols() != batch))
      throw std::invalid_argument("backward_sequence: top gradient shape mismatch");
  }

  BackwardResult res;
  const Index L = static_cast<Index>(depth);
  if (opts.record_norms) {
    res.gh_norm = Mat::Zero(L, steps);
    res.gparam_norm = Mat::Zero(L, steps);
  }
  if (opts.record_path_cosine)
    res.path_cosine = Mat::Constant(L, steps, std::numeric_limits<double>::quiet_NaN());
  for (const auto& p : lat.params) res.totals.push_back(p.zeros_like());
  res.input_grads.resize(static_cast<std::size_t>(steps));

  std::vector<Mat> from_future(depth);
  std::vector<Mat> c_from_future(depth);
  for (std::size_t l = 0; l < depth; ++l) {
    from_future[l] = Mat::Zero(lat.params[l].n_hidden, batch);
    if (has_cell_state(lat.params[l].kind))
      c_from_future[l] = Mat::Zero(lat.params[l].n_hidden, batch);
  }
  CellGrads scratch;

  for (Index ti = steps - 1; ti >= 0; --ti) {
    const auto t = static_cast<std::size_t>(ti);
    Mat from_above = top[t].size() != 0 ? top[t] : Mat(Mat::Zero(n_top, batch));
    for (std::size_t li = depth; li-- > 0;) {
      const CellParams& p = lat.params[li];
      const bool lstm = has_cell_state(p.kind);
      const Mat& h_prev = t == 0 ? Mat(Mat::Zero(p.n_hidden, batch)) : g.h[li][t - 1];
      const Mat c_prev = lstm ? (t == 0 ? Mat(Mat::Zero(p.n_hidden, batch)) : g.c[li][t - 1])
                              : Mat();
      const ForwardCache fc = forward(p, detail::cell_input(g, li, t), h_prev, c_prev);

      if (opts.record_path_cosine) {
        const double a = from_above.norm();
        const double b = from_future[li].norm();
        if (a > 0.0 && b > 0.0)
          res.path_cosine(static_cast<Index>(li), ti) =
              (from_above.array() * from_future[li].array()).sum() / (a * b);
      }
      const Mat g_h = from_above + from_future[li];

      CellBackward step;
      if (opts.record_norms) {
        if (scratch.weights.empty() || scratch.kind != p.kind || scratch.n_in != p.n_in ||
            scratch.n_hidden != p.n_hidden)
          scratch = p.zeros_like();
        else
          scratch.set_zero();
        step = backward_into(p, fc, g_h, c_from_future[li], scratch);
        res.gh_norm(static_cast<Index>(li), ti) = g_h.norm();
        res.gparam_norm(static_cast<Index>(li), ti) = scratch.norm();
        res.totals[li] += scratch;
      } else {
        step = backward_into(p, fc, g_h, c_from_future[li], res.totals[li]);
      }
      from_future[li] = std::move(step.g_h_prev);
      if (lstm) c_from_future[li] = std::move(step.g_c_prev);
      from_above = std::move(step.g_x);
    }
    res.input_grads[t] = std::move(from_above);
  }
  return res;
}

/// Running mean and variance (Welford), mergeable with Chan's formula.
struct Welford {
  std::uint64_t count = 0;
  double mean = 0.0;
  double m2 = 0.0;

  void add(double x) {
    ++count;
    const double delta = x - mean;
    mean += delta / static_cast<double>(count);
    m2 += delta * (x - mean);
  }

  void merge(const Welford& o) {
    if (o.count == 0) return;
    if (count == 0) {
      *this = o;
      return;
    }
    const double n_a = static_cast<double>(count);
    const double n_b = static_cast<double>(o.count);
    const double n = n_a + n_b;
    const double delta = o.mean - mean;
    mean += delta * n_b / n;
    m2 += o.m2 + delta * delta * n_a * n_b / n;
    count += o.count;
  }

  /// Population variance over the recorded runs.
  double variance() const { return count == 0 ? 0.0 : m2 / static_cast<double>(count); }
  double stddev() const { return std::sqrt(std::max(0.0, variance())); }
};

/// Per-node gradient magnitude statistics over Monte-Carlo runs; layer and
/// step are zero based internally, one based in exports.
class GradientField {
 public:
  GradientField() = default;
  GradientField(Index layers, Index steps)
      : layers_(layers),
        steps_(steps),
        gparam_(static_cast<std::size_t>(layers * steps)),
        gh_(static_cast<std::size_t>(layers * steps)),
        cosine_(static_cast<std::size_t>(layers * steps)) {}

  Index layers() const { return layers_; }
  Index steps() const { return steps_; }
  std::uint64_t runs() const { return runs_; }

  void add_run(const BackwardResult& r) {
    if (r.gparam_norm.rows() != layers_ || r.gparam_norm.cols() != steps_)
      throw std::invalid_argument("GradientField: run shape mismatch");
    for (Index l = 0; l < layers_; ++l) {
      for (Index t = 0; t < steps_; ++t) {
        const std::size_t i = at(l, t);
        gparam_[i].add(r.gparam_norm(l, t));
        gh_[i].add(r.gh_norm(l, t));
        if (r.path_cosine.size() != 0 && std::isfinite(r.path_cosine(l, t)))
          cosine_[i].add(r.path_cosine(l, t));
      }
    }
    ++runs_;
  }

  void merge(const GradientField& o) {
    if (o.layers_ != layers_ || o.steps_ != steps_)
      throw std::invalid_argument("GradientField: merge shape mismatch");
    for (std::size_t i = 0; i < gparam_.size(); ++i) {
      gparam_[i].merge(o.gparam_[i]);
      gh_[i].merge(o.gh_[i]);
      cosine_[i].merge(o.cosine_[i]);
    }
    runs_ += o.runs_;
  }

  const Welford& gparam(Index layer, Index t) const { return gparam_[at(layer, t)]; }
  const Welford& gh(Index layer, Index t) const { return gh_[at(layer, t)]; }
  const Welford& path_cosine(Index layer, Index t) const { return cosine_[at(layer, t)]; }

  Mat mean_gparam() const { return collect([](const Welford& w) { return w.mean; }, gparam_); }
  Mat mean_gh() const { return collect([](const Welford& w) { return w.mean; }, gh_); }

  /// std / mean of the parameter-gradient norm; nullopt where the mean is 0.
  std::optional<double> normalized_std(Index layer, Index t) const {
    const Welford& w = gparam(layer, t);
    if (!(w.mean > 0.0)) return std::nullopt;
    return w.stddev() / w.mean;
  }

  void write_csv(std::ostream& os) const {
    os << "layer,t,mean_gparam_norm,std_gparam_norm,mean_gh_norm,runs\n";
    for (Index l = 0; l < layers_; ++l) {
      for (Index t = 0; t < steps_; ++t) {
        const Welford& gp = gparam(l, t);
        os << (l + 1) << ',' << (t + 1) << ',' << fmt(gp.mean) << ',' << fmt(gp.stddev()) << ','
           << fmt(gh(l, t).mean) << ',' << runs_ << '\n';
      }
    }
  }

  void write_normalized_std_csv(std::ostream& os) const {
    os << "layer,t,normalized_std_gparam_norm\n";
    for (Index l = 0; l < layers_; ++l) {
      for (Index t = 0; t < steps_; ++t) {
        const auto v = normalized_std(l, t);
        os << (l + 1) << ',' << (t + 1) << ',' << (v ? fmt(*v) : std::string("null")) << '\n';
      }
    }
  }

  static std::string fmt(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
  }

 private:
  std::size_t at(Index l, Index t) const {
    if (l < 0 || l >= layers_ || t < 0 || t >= steps_)
      throw std::out_of_range("GradientField: node out of range");
    return static_cast<std::size_t>(l * steps_ + t);
  }

  template <typename F>
  Mat collect(F f, const std::vector<Welford>& v) const {
    Mat m(layers_, steps_);
    for (Index l = 0; l < layers_; ++l)
      for (Index t = 0; t < steps_; ++t) m(l, t) = f(v[at(l, t)]);
    return m;
  }

  Index layers_ = 0;
  Index steps_ = 0;
  std::uint64_t runs_ = 0;
  std::vector<Welford> gparam_;
  std::vector<Welford> gh_;
  std::vector<Welford> cosine_;
};

}  // namespace starlab
