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

// Central finite-difference checks of the analytic backward passes.

#pragma once

#include "starlab/model.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <stdexcept>
#include <string>

namespace starlab {

/// The forward/backward pair under test. Defaults to the library cells; tests
/// substitute modified pairs.
struct CellOps {
  std::function<ForwardCache(const CellParams&, const Mat&, const Mat&, const Mat&)> forward =
      [](const CellParams& p, const Mat& x, const Mat& h, const Mat& c) {
        return starlab::forward(p, x, h, c);
      };
  std::function<CellBackward(const CellParams&, const ForwardCache&, const Mat&, const Mat&,
                             CellGrads&)>
      backward = [](const CellParams& p, const ForwardCache& fc, const Mat& gh, const Mat& gc,
                    CellGrads& g) { return backward_into(p, fc, gh, gc, g); };
};

/// |analytic - numeric| / max(|analytic|, |numeric|, floor). The floor keeps
/// derivatives that are analytically zero from dividing round-off by zero.
inline constexpr double kRelErrorFloor = 1e-4;

inline double relative_error(double analytic, double numeric) {
  return std::abs(analytic - numeric) /
         std::max({std::abs(analytic), std::abs(numeric), kRelErrorFloor});
}

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::string worst;  // where the worst error occurred
  Index checked = 0;  // derivatives compared
};

/// A random cell with Gaussian weights and biases, so gates are off their
/// symmetric points.
inline CellParams random_cell(CellKind kind, Index n_in, Index n_hidden, Rng& rng) {
  CellParams p = CellParams::zeros(kind, n_in, n_hidden);
  for (auto& w : p.weights) w = 0.6 * gaussian_matrix(rng, w.rows(), w.cols());
  for (auto& b : p.biases) b = 0.5 * gaussian_matrix(rng, b.size(), 1).col(0);
  return p;
}

/// For each trial: random dimensions, parameters, inputs and a random linear
/// projection u.h (+ w.c for the LSTM); every parameter and input derivative
/// of the projection is compared against central differences.
inline GradCheckResult grad_check(CellKind kind, Index trials, double eps, Rng& rng,
                                  const CellOps& ops = {}) {
  if (!(eps >= 1e-7 && eps <= 1e-3)) throw std::invalid_argument("grad_check: eps in [1e-7, 1e-3]");
  if (trials < 1) throw std::invalid_argument("grad_check: trials must be >= 1");
  GradCheckResult res;
  const Index batch = 2;
  for (Index trial = 0; trial < trials; ++trial) {
    const Index n_in = 2 + rng.below(4);
    const Index n = 2 + rng.below(4);
    CellParams p = random_cell(kind, n_in, n, rng);
    Mat x = gaussian_matrix(rng, n_in, batch);
    Mat h = Mat(n, batch);
    for (Index i = 0; i < h.size(); ++i) h.data()[i] = rng.uniform(-0.9, 0.9);
    Mat c = has_cell_state(kind) ? gaussian_matrix(rng, n, batch) : Mat();
    const Mat u = gaussian_matrix(rng, n, batch);
    const Mat w = has_cell_state(kind) ? gaussian_matrix(rng, n, batch) : Mat();

    // The projection is applied to the output difference, not to two
    // separately summed objectives.
    auto outputs = [&]() { return ops.forward(p, x, h, c); };
    auto projected_difference = [&](const ForwardCache& up, const ForwardCache& down) {
      double f = ((up.h - down.h).array() * u.array()).sum();
      if (has_cell_state(kind)) f += ((up.c - down.c).array() * w.array()).sum();
      return f;
    };
    CellGrads g = p.zeros_like();
    const CellBackward back = ops.backward(p, ops.forward(p, x, h, c), u, w, g);

    auto probe = [&](double& slot, double analytic, const std::string& where) {
      const double saved = slot;
      slot = saved + eps;
      const ForwardCache up = outputs();
      slot = saved - eps;
      const ForwardCache down = outputs();
      slot = saved;
      const double err = relative_error(analytic, projected_difference(up, down) / (2.0 * eps));
      ++res.checked;
      if (err > res.max_rel_error || !std::isfinite(err)) {
        res.max_rel_error = std::isfinite(err) ? err : std::numeric_limits<double>::infinity();
        res.worst = where + " (trial " + std::to_string(trial) + ")";
      }
    };

    const TensorLayout layout = layout_of(kind);
    for (std::size_t k = 0; k < p.weights.size(); ++k)
      for (Index i = 0; i < p.weights[k].size(); ++i)
        probe(p.weights[k].data()[i], g.weights[k].data()[i], layout.weight_names[k]);
    for (std::size_t k = 0; k < p.biases.size(); ++k)
      for (Index i = 0; i < p.biases[k].size(); ++i)
        probe(p.biases[k].data()[i], g.biases[k].data()[i], layout.bias_names[k]);
    for (Index i = 0; i < x.size(); ++i) probe(x.data()[i], back.g_x.data()[i], "x");
    for (Index i = 0; i < h.size(); ++i) probe(h.data()[i], back.g_h_prev.data()[i], "h_prev");
    for (Index i = 0; i < c.size(); ++i) probe(c.data()[i], back.g_c_prev.data()[i], "c_prev");
  }
  return res;
}

struct DirectionalCheck {
  double analytic = 0.0;
  double numeric = 0.0;
  double rel_error = 0.0;
};

/// Derivative of the batch loss along a random direction over all model
/// parameters: assembled gradient . d against a central difference.
inline DirectionalCheck directional_check(Model& m, const Batch& batch, double eps, Rng& rng) {
  const GradientEval ge = compute_gradients(m, batch);
  ModelGrads g = ge.grads;
  auto params = parameter_spans(m);
  auto grads = gradient_spans(g);
  std::vector<std::vector<double>> dir;
  double analytic = 0.0;
  for (std::size_t k = 0; k < params.size(); ++k) {
    dir.emplace_back(params[k].size());
    for (std::size_t i = 0; i < params[k].size(); ++i) {
      dir[k][i] = rng.gaussian();
      analytic += dir[k][i] * grads[k][i];
    }
  }
  std::vector<std::vector<double>> saved;
  for (const auto p : params) saved.emplace_back(p.begin(), p.end());
  auto shifted_loss = [&](double step) {
    for (std::size_t k = 0; k < params.size(); ++k)
      for (std::size_t i = 0; i < params[k].size(); ++i)
        params[k][i] = saved[k][i] + step * dir[k][i];
    const double loss = evaluate_loss(m, batch).loss;
    for (std::size_t k = 0; k < params.size(); ++k)
      std::copy(saved[k].begin(), saved[k].end(), params[k].begin());
    return loss;
  };
  const double up = shifted_loss(eps);
  const double down = shifted_loss(-eps);
  DirectionalCheck out;
  out.analytic = analytic;
  out.numeric = (up - down) / (2.0 * eps);
  out.rel_error = relative_error(out.analytic, out.numeric);
  return out;
}

}  // namespace starlab
