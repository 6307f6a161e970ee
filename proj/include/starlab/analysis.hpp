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

// Fixed-point Jacobian spectra and Monte-Carlo gradient-field simulation.

#pragma once

#include "starlab/lattice.hpp"
#include "starlab/tasks.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <thread>
#include <variant>
#include <vector>

namespace starlab {

struct FixedPointReport {
  CellKind kind = CellKind::STAR;
  Index n = 0;
  double mean_sv_J = 0.0;
  double mean_sv_H = 0.0;
  /// Combined gain if the two incoming gradients are uncorrelated.
  double factor_uncorrelated = 0.0;
  /// Combined gain if they are perfectly positively correlated.
  double factor_correlated = 0.0;
  Index trials = 0;
};

/// Mean singular values of the input and state Jacobians at the zero state
/// with orthogonal weights and zero biases, averaged over `trials` draws.
inline FixedPointReport fixed_point_report(CellKind kind, Index n, Index trials, Rng& rng) {
  if (n < 2) throw std::invalid_argument("fixed_point_report: n must be >= 2");
  if (trials < 1) throw std::invalid_argument("fixed_point_report: trials must be >= 1");
  double sum_j = 0.0;
  double sum_h = 0.0;
  const Vec zero = Vec::Zero(n);
  for (Index k = 0; k < trials; ++k) {
    const CellParams p = init_params(kind, n, n, 2, rng, BiasInit::Zero);
    const auto c0 = has_cell_state(kind) ? std::optional<Vec>(zero) : std::nullopt;
    const Jacobians jac = jacobians_at(p, zero, zero, c0);
    sum_j += mean_singular_value(jac.J);
    sum_h += mean_singular_value(jac.H);
  }
  FixedPointReport r;
  r.kind = kind;
  r.n = n;
  r.trials = trials;
  r.mean_sv_J = sum_j / static_cast<double>(trials);
  r.mean_sv_H = sum_h / static_cast<double>(trials);
  r.factor_uncorrelated = std::sqrt(r.mean_sv_J * r.mean_sv_J + r.mean_sv_H * r.mean_sv_H);
  r.factor_correlated = r.mean_sv_J + r.mean_sv_H;
  return r;
}

/// x_0 = z_0, x_t = alpha x_{t-1} + (1 - alpha) z_t with z_t ~ N(0, I).
/// Returns one n_in x 1 column per step.
inline std::vector<Mat> gen_ar1_sequence(Rng& rng, Index steps, Index n_in, double alpha) {
  if (!(alpha >= 0.0 && alpha < 1.0)) throw std::invalid_argument("gen_ar1_sequence: alpha in [0,1)");
  if (steps < 1 || n_in < 1) throw std::invalid_argument("gen_ar1_sequence: empty shape");
  std::vector<Mat> xs;
  xs.reserve(static_cast<std::size_t>(steps));
  Mat x = gaussian_matrix(rng, n_in, 1);
  xs.push_back(x);
  for (Index t = 1; t < steps; ++t) {
    x = alpha * x + (1.0 - alpha) * gaussian_matrix(rng, n_in, 1);
    xs.push_back(x);
  }
  return xs;
}

struct Ar1Input {
  double alpha = 0.5;
};

struct MnistInput {
  const MnistSet* set = nullptr;
};

struct SimConfig {
  StackSpec stack;
  std::uint64_t runs = 100;
  LossMode loss_mode = LossMode::FinalStep;
  std::variant<Ar1Input, MnistInput> input = Ar1Input{};
  /// Sequence length; defaults to stack.t_max.
  Index steps = 0;
  std::uint64_t seed = 1;
  bool record_path_cosine = false;
  unsigned threads = 1;

  Index sequence_length() const { return steps > 0 ? steps : stack.t_max; }

  void validate() const {
    stack.validate();
    if (runs < 1) throw std::invalid_argument("simulation: runs must be >= 1");
    if (sequence_length() > stack.t_max) throw std::invalid_argument("simulation: steps > t_max");
    if (const auto* ar = std::get_if<Ar1Input>(&input)) {
      if (!(ar->alpha >= 0.0 && ar->alpha < 1.0))
        throw std::invalid_argument("simulation: alpha must lie in [0, 1)");
    } else {
      const auto& m = std::get<MnistInput>(input);
      if (m.set == nullptr || m.set->size() == 0)
        throw std::invalid_argument("simulation: MNIST input requested but no dataset loaded");
      if (stack.n_in != 1) throw std::invalid_argument("simulation: MNIST input needs n_in = 1");
      if (sequence_length() > m.set->pixels())
        throw std::invalid_argument("simulation: more steps than pixels");
    }
  }
};

/// One Monte-Carlo run: fresh parameters on stream 2r, fresh input on 2r+1.
inline BackwardResult simulate_run(const SimConfig& cfg, std::uint64_t run) {
  Rng param_rng(cfg.seed, 2 * run);
  Rng input_rng(cfg.seed, 2 * run + 1);
  const Index steps = cfg.sequence_length();
  std::vector<Mat> inputs;
  BiasInit bias_init = BiasInit::Zero;
  if (const auto* ar = std::get_if<Ar1Input>(&cfg.input)) {
    inputs = gen_ar1_sequence(input_rng, steps, cfg.stack.n_in, ar->alpha);
  } else {
    const MnistSet& set = *std::get<MnistInput>(cfg.input).set;
    const Index row = input_rng.below(static_cast<std::uint32_t>(set.size()));
    inputs.reserve(static_cast<std::size_t>(steps));
    for (Index t = 0; t < steps; ++t) inputs.push_back(Mat::Constant(1, 1, set.images(row, t)));
    bias_init = BiasInit::ChronoForgetOne;
  }
  const Lattice lat = build(cfg.stack, bias_init, param_rng);
  const SequenceGrid grid = forward_sequence(lat, inputs);
  const Index n_top = cfg.stack.layers.back().n_hidden;
  BackwardOptions opts;
  opts.record_path_cosine = cfg.record_path_cosine;
  BackwardResult r = backward_sequence(lat, grid, analysis_seeds(cfg.loss_mode, steps, n_top), opts);
  r.totals.clear();
  r.input_grads.clear();
  return r;
}

/// Runs are computed in blocks (in parallel when threads > 1) and always
/// accumulated in run order, so the field does not depend on the thread count.
inline GradientField simulate_gradient_field(const SimConfig& cfg) {
  cfg.validate();
  GradientField field(cfg.stack.depth(), cfg.sequence_length());
  const unsigned threads = std::max(1u, cfg.threads);
  const std::uint64_t block = std::max<std::uint64_t>(threads, 1) * 4;
  for (std::uint64_t first = 0; first < cfg.runs; first += block) {
    const std::uint64_t count = std::min(block, cfg.runs - first);
    std::vector<BackwardResult> results(count);
    if (threads == 1) {
      for (std::uint64_t i = 0; i < count; ++i) results[i] = simulate_run(cfg, first + i);
    } else {
      std::vector<std::thread> pool;
      for (unsigned w = 0; w < threads; ++w) {
        pool.emplace_back([&, w] {
          for (std::uint64_t i = w; i < count; i += threads) results[i] = simulate_run(cfg, first + i);
        });
      }
      for (auto& th : pool) th.join();
    }
    for (const auto& r : results) field.add_run(r);
  }
  return field;
}

/// mean ||g_params|| at (t, layer 1) over the same at (t, layer L); t is zero
/// based and defaults to the last step.
inline double layer_ratio(const GradientField& f, std::optional<Index> t = std::nullopt) {
  const Index step = t.value_or(f.steps() - 1);
  return f.gparam(0, step).mean / f.gparam(f.layers() - 1, step).mean;
}

/// Per-layer Hilbert-Schmidt norms of each weight matrix (divided by the
/// square root of its smaller side) and mean hidden activation, recorded once
/// per optimizer step.
struct WeightStateSample {
  std::uint64_t step = 0;
  std::vector<std::vector<double>> weight_norms;  // [layer][weight slot]
  std::vector<double> mean_hidden;                // [layer]
};

inline std::vector<std::vector<double>> normalized_weight_norms(const Lattice& lat) {
  std::vector<std::vector<double>> out;
  for (const auto& p : lat.params) {
    std::vector<double> row;
    for (const auto& w : p.weights)
      row.push_back(w.norm() / std::sqrt(static_cast<double>(std::min(w.rows(), w.cols()))));
    out.push_back(std::move(row));
  }
  return out;
}

/// Mean over units, batch and steps of every layer's hidden state.
inline std::vector<double> mean_hidden_state(const SequenceGrid& g) {
  std::vector<double> out;
  for (const auto& layer : g.h) {
    double sum = 0.0;
    double count = 0.0;
    for (const auto& h : layer) {
      sum += h.sum();
      count += static_cast<double>(h.size());
    }
    out.push_back(count > 0.0 ? sum / count : 0.0);
  }
  return out;
}

class WeightStateTrace {
 public:
  void record(std::uint64_t step, const Lattice& lat, const SequenceGrid& grid) {
    samples_.push_back({step, normalized_weight_norms(lat), mean_hidden_state(grid)});
  }
  const std::vector<WeightStateSample>& samples() const { return samples_; }

 private:
  std::vector<WeightStateSample> samples_;
};

}  // namespace starlab
