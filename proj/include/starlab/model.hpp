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

// Output heads, losses, optimizers and the model-level gradient assembly
// used by the training loop.

#pragma once

#include "starlab/lattice.hpp"
#include "starlab/tasks.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace starlab {

class NonFiniteGradient : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class HeadAttach { FinalStep, PerStep, MeanPool };

/// Dense readout on the top layer: linear for regression, softmax logits for
/// classification.
struct Head {
  Mat W;  // outputs x n_hidden
  Vec b;
  HeadAttach attach = HeadAttach::FinalStep;

  Index outputs() const { return W.rows(); }
};

struct HeadGrads {
  Mat W;
  Vec b;
};

/// U(-1/sqrt(n), 1/sqrt(n)) weights and a zero bias.
inline Head init_head(Index outputs, Index n_hidden, HeadAttach attach, Rng& rng) {
  Head h;
  h.W.resize(outputs, n_hidden);
  const double bound = 1.0 / std::sqrt(static_cast<double>(n_hidden));
  for (Index i = 0; i < h.W.size(); ++i) h.W.data()[i] = rng.uniform(-bound, bound);
  h.b = Vec::Zero(outputs);
  h.attach = attach;
  return h;
}

struct Model {
  Lattice lattice;
  Head head;
};

struct ModelGrads {
  std::vector<CellGrads> cells;
  HeadGrads head;

  double squared_norm() const {
    double s = head.W.squaredNorm() + head.b.squaredNorm();
    for (const auto& c : cells) s += c.squared_norm();
    return s;
  }
  double norm() const { return std::sqrt(squared_norm()); }

  ModelGrads& operator+=(const ModelGrads& o) {
    for (std::size_t l = 0; l < cells.size(); ++l) cells[l] += o.cells[l];
    head.W += o.head.W;
    head.b += o.head.b;
    return *this;
  }
};

inline ModelGrads zero_grads(const Model& m) {
  ModelGrads g;
  for (const auto& p : m.lattice.params) g.cells.push_back(p.zeros_like());
  g.head.W = Mat::Zero(m.head.W.rows(), m.head.W.cols());
  g.head.b = Vec::Zero(m.head.b.size());
  return g;
}

/// Flat views over every trainable array, in a fixed order: layers bottom to
/// top (weights then biases, slot order), then the head.
inline std::vector<std::span<double>> parameter_spans(Model& m) {
  std::vector<std::span<double>> out;
  for (auto& p : m.lattice.params) {
    for (auto& w : p.weights) out.emplace_back(w.data(), static_cast<std::size_t>(w.size()));
    for (auto& b : p.biases) out.emplace_back(b.data(), static_cast<std::size_t>(b.size()));
  }
  out.emplace_back(m.head.W.data(), static_cast<std::size_t>(m.head.W.size()));
  out.emplace_back(m.head.b.data(), static_cast<std::size_t>(m.head.b.size()));
  return out;
}

inline std::vector<std::span<double>> gradient_spans(ModelGrads& g) {
  std::vector<std::span<double>> out;
  for (auto& p : g.cells) {
    for (auto& w : p.weights) out.emplace_back(w.data(), static_cast<std::size_t>(w.size()));
    for (auto& b : p.biases) out.emplace_back(b.data(), static_cast<std::size_t>(b.size()));
  }
  out.emplace_back(g.head.W.data(), static_cast<std::size_t>(g.head.W.size()));
  out.emplace_back(g.head.b.data(), static_cast<std::size_t>(g.head.b.size()));
  return out;
}

// ---------------------------------------------------------------------------
// Losses

/// Column-wise softmax with the max subtracted.
inline Mat softmax_columns(const Mat& logits) {
  Mat p = logits;
  for (Index j = 0; j < p.cols(); ++j) {
    const double mx = p.col(j).maxCoeff();
    p.col(j) = (p.col(j).array() - mx).exp().matrix();
    p.col(j) /= p.col(j).sum();
  }
  return p;
}

/// Summed cross-entropy of the columns of `logits` against `classes`; writes
/// (softmax - onehot) * scale into `dlogits` when it is non-null.
inline double cross_entropy(const Mat& logits, std::span<const int> classes, double scale,
                            Mat* dlogits, Index* correct = nullptr) {
  double total = 0.0;
  if (dlogits) *dlogits = Mat::Zero(logits.rows(), logits.cols());
  for (Index j = 0; j < logits.cols(); ++j) {
    const double mx = logits.col(j).maxCoeff();
    const double lse = mx + std::log((logits.col(j).array() - mx).exp().sum());
    const int c = classes[static_cast<std::size_t>(j)];
    total += lse - logits(c, j);
    if (correct) {
      Index arg = 0;
      logits.col(j).maxCoeff(&arg);
      if (arg == c) ++*correct;
    }
    if (dlogits) {
      dlogits->col(j) = ((logits.col(j).array() - lse).exp() * scale).matrix();
      (*dlogits)(c, j) -= scale;
    }
  }
  return total;
}

struct HeadEval {
  /// Loss summed over the batch, divided by `denominator`.
  double loss = 0.0;
  Index correct = 0;
  Index counted = 0;
  TopGradients top;
  HeadGrads grads;
};

/// Applies the head and the task loss. Losses are means over the batch (and
/// over steps for per-step targets); `denominator` is the full batch size so
/// microbatch gradients add up to the full-batch gradient.
inline HeadEval evaluate_head(const Head& head, const SequenceGrid& grid, const Batch& batch,
                              Index denominator, bool need_grads) {
  const Index steps = grid.steps();
  const Index B = grid.batch();
  HeadEval ev;
  if (need_grads) {
    ev.top.resize(static_cast<std::size_t>(steps));
    ev.grads.W = Mat::Zero(head.W.rows(), head.W.cols());
    ev.grads.b = Vec::Zero(head.b.size());
  }
  auto readout = [&](const Mat& h) {
    Mat y = head.W * h;
    y.colwise() += head.b;
    return y;
  };
  auto accumulate = [&](Index t, const Mat& h, const Mat& dy) {
    ev.grads.W.noalias() += dy * h.transpose();
    ev.grads.b += dy.rowwise().sum();
    Mat g = head.W.transpose() * dy;
    auto& slot = ev.top[static_cast<std::size_t>(t)];
    if (slot.size() == 0) slot = std::move(g);
    else slot += g;
  };

  if (batch.target_kind == TargetKind::ClassPerStep) {
    if (head.attach != HeadAttach::PerStep)
      throw std::invalid_argument("evaluate_head: per-step targets need a per-step head");
    const double denom = static_cast<double>(denominator * steps);
    for (Index t = 0; t < steps; ++t) {
      const Mat& h = grid.top(t);
      Mat dy;
      const auto& cls = batch.step_classes[static_cast<std::size_t>(t)];
      ev.loss += cross_entropy(readout(h), cls, 1.0 / denom, need_grads ? &dy : nullptr,
                               &ev.correct) / denom;
      ev.counted += B;
      if (need_grads) accumulate(t, h, dy);
    }
    return ev;
  }

  if (head.attach == HeadAttach::PerStep)
    throw std::invalid_argument("evaluate_head: sequence targets need a final or pooled head");
  Mat pooled;
  if (head.attach == HeadAttach::FinalStep) {
    pooled = grid.top(steps - 1);
  } else {
    pooled = Mat::Zero(grid.top(0).rows(), B);
    for (Index t = 0; t < steps; ++t) pooled += grid.top(t);
    pooled /= static_cast<double>(steps);
  }
  const Mat y = readout(pooled);
  const double denom = static_cast<double>(denominator);
  Mat dy;
  if (batch.target_kind == TargetKind::ScalarPerSequence) {
    if (head.outputs() != 1) throw std::invalid_argument("evaluate_head: regression needs 1 output");
    const Mat diff = y - batch.values.transpose();
    ev.loss = diff.squaredNorm() / denom;
    if (need_grads) dy = diff * (2.0 / denom);
  } else {
    ev.loss = cross_entropy(y, batch.classes, 1.0 / denom, need_grads ? &dy : nullptr,
                            &ev.correct) / denom;
    ev.counted = B;
  }
  if (need_grads) {
    if (head.attach == HeadAttach::FinalStep) {
      accumulate(steps - 1, pooled, dy);
    } else {
      ev.grads.W.noalias() += dy * pooled.transpose();
      ev.grads.b += dy.rowwise().sum();
      const Mat g = (head.W.transpose() * dy) / static_cast<double>(steps);
      for (Index t = 0; t < steps; ++t) ev.top[static_cast<std::size_t>(t)] = g;
    }
  }
  return ev;
}

/// Columns [first, first + count) of every step and target.
inline Batch slice_batch(const Batch& b, Index first, Index count) {
  Batch s;
  s.target_kind = b.target_kind;
  s.loss = b.loss;
  for (const auto& x : b.inputs) s.inputs.push_back(x.middleCols(first, count));
  if (b.values.size() != 0) s.values = b.values.segment(first, count);
  for (const auto& row : b.step_classes)
    s.step_classes.emplace_back(row.begin() + first, row.begin() + first + count);
  if (!b.classes.empty()) s.classes.assign(b.classes.begin() + first, b.classes.begin() + first + count);
  return s;
}

struct GradientEval {
  double loss = 0.0;
  Index correct = 0;
  Index counted = 0;
  ModelGrads grads;
};

/// Loss and full gradient of the batch-mean loss, accumulated over
/// microbatches of at most `microbatch` columns (0 = whole batch).
inline GradientEval compute_gradients(const Model& m, const Batch& batch, Index microbatch = 0) {
  const Index B = batch.batch_size();
  const Index chunk = microbatch > 0 ? std::min(microbatch, B) : B;
  GradientEval out;
  out.grads = zero_grads(m);
  BackwardOptions opts;
  opts.record_norms = false;
  for (Index first = 0; first < B; first += chunk) {
    const Index count = std::min(chunk, B - first);
    const Batch part = count == B ? batch : slice_batch(batch, first, count);
    const SequenceGrid grid = forward_sequence(m.lattice, part.inputs);
    HeadEval ev = evaluate_head(m.head, grid, part, B, true);
    out.loss += ev.loss;
    out.correct += ev.correct;
    out.counted += ev.counted;
    BackwardResult br = backward_sequence(m.lattice, grid, ev.top, opts);
    for (std::size_t l = 0; l < br.totals.size(); ++l) out.grads.cells[l] += br.totals[l];
    out.grads.head.W += ev.grads.W;
    out.grads.head.b += ev.grads.b;
  }
  return out;
}

struct LossEval {
  double loss = 0.0;
  Index correct = 0;
  Index counted = 0;
  double accuracy() const {
    return counted > 0 ? static_cast<double>(correct) / static_cast<double>(counted)
                       : std::numeric_limits<double>::quiet_NaN();
  }
};

/// Forward-only loss of the batch mean.
inline LossEval evaluate_loss(const Model& m, const Batch& batch, Index microbatch = 0) {
  const Index B = batch.batch_size();
  const Index chunk = microbatch > 0 ? std::min(microbatch, B) : B;
  LossEval out;
  for (Index first = 0; first < B; first += chunk) {
    const Index count = std::min(chunk, B - first);
    const Batch part = count == B ? batch : slice_batch(batch, first, count);
    const SequenceGrid grid = forward_sequence(m.lattice, part.inputs);
    const HeadEval ev = evaluate_head(m.head, grid, part, B, false);
    out.loss += ev.loss;
    out.correct += ev.correct;
    out.counted += ev.counted;
  }
  return out;
}

/// L2 norm of each layer's parameter gradient (of the batch-mean loss).
inline std::vector<double> layer_grad_norms(const std::vector<CellGrads>& totals) {
  std::vector<double> out;
  out.reserve(totals.size());
  for (const auto& g : totals) out.push_back(g.norm());
  return out;
}

// ---------------------------------------------------------------------------
// Optimizers

struct LrSchedule {
  double base = 1e-3;
  /// Polynomial decay to `end` over `decay_steps` when decay_steps > 0.
  double end = 0.0;
  std::uint64_t decay_steps = 0;
  double power = 1.0;

  double at(std::uint64_t step) const {
    if (decay_steps == 0) return base;
    const double frac =
        std::min(1.0, static_cast<double>(step) / static_cast<double>(decay_steps));
    return (base - end) * std::pow(1.0 - frac, power) + end;
  }
};

inline double global_norm(std::span<const std::span<double>> grads) {
  double s = 0.0;
  for (const auto g : grads)
    for (double v : g) s += v * v;
  return std::sqrt(s);
}

/// Rescales the gradients so their global norm is at most `threshold`;
/// returns the norm before clipping.
inline double clip_global_norm(std::span<const std::span<double>> grads, double threshold) {
  if (!(threshold > 0.0)) throw std::invalid_argument("clip_global_norm: threshold must be > 0");
  const double norm = global_norm(grads);
  if (norm > threshold) {
    const double scale = threshold / norm;
    for (const auto g : grads)
      for (double& v : g) v *= scale;
  }
  return norm;
}

inline void require_finite(std::span<const std::span<double>> grads) {
  for (const auto g : grads)
    for (double v : g)
      if (!std::isfinite(v)) throw NonFiniteGradient("optimizer: non-finite gradient entry");
}

inline void require_congruent(std::span<const std::span<double>> params,
                              std::span<const std::span<double>> grads) {
  if (params.size() != grads.size()) throw std::invalid_argument("optimizer: tensor count mismatch");
  for (std::size_t i = 0; i < params.size(); ++i)
    if (params[i].size() != grads[i].size())
      throw std::invalid_argument("optimizer: tensor shape mismatch");
}

struct AdamState {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::uint64_t step = 0;
  std::vector<std::vector<double>> m;
  std::vector<std::vector<double>> v;
};

/// Bias-corrected Adam. A non-finite gradient throws before any parameter is
/// touched.
inline void adam_step(AdamState& s, std::span<const std::span<double>> params,
                      std::span<const std::span<double>> grads) {
  require_congruent(params, grads);
  require_finite(grads);
  if (s.m.empty()) {
    for (const auto p : params) {
      s.m.emplace_back(p.size(), 0.0);
      s.v.emplace_back(p.size(), 0.0);
    }
  }
  if (s.m.size() != params.size()) throw std::invalid_argument("adam: state/parameter mismatch");
  ++s.step;
  const double c1 = 1.0 - std::pow(s.beta1, static_cast<double>(s.step));
  const double c2 = 1.0 - std::pow(s.beta2, static_cast<double>(s.step));
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto p = params[k];
    const auto g = grads[k];
    auto& m = s.m[k];
    auto& v = s.v[k];
    for (std::size_t i = 0; i < p.size(); ++i) {
      m[i] = s.beta1 * m[i] + (1.0 - s.beta1) * g[i];
      v[i] = s.beta2 * v[i] + (1.0 - s.beta2) * g[i] * g[i];
      p[i] -= s.lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + s.eps);
    }
  }
}

struct SgdMomentumState {
  double lr = 1e-3;
  double momentum = 0.9;
  double weight_decay = 0.0;
  std::uint64_t step = 0;
  std::vector<std::vector<double>> velocity;
};

inline void sgd_momentum_step(SgdMomentumState& s, std::span<const std::span<double>> params,
                              std::span<const std::span<double>> grads) {
  require_congruent(params, grads);
  require_finite(grads);
  if (s.velocity.empty())
    for (const auto p : params) s.velocity.emplace_back(p.size(), 0.0);
  ++s.step;
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto p = params[k];
    const auto g = grads[k];
    auto& vel = s.velocity[k];
    for (std::size_t i = 0; i < p.size(); ++i) {
      vel[i] = s.momentum * vel[i] + g[i] + s.weight_decay * p[i];
      p[i] -= s.lr * vel[i];
    }
  }
}

}  // namespace starlab
