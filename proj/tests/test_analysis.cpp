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


#include "starlab/analysis.hpp"

#include <gtest/gtest.h>

#include <Eigen/Eigenvalues>

#include <cmath>
#include <sstream>

namespace starlab {
namespace {

TEST(FixedPoint, OrthogonalConstants) {
  struct Case {
    CellKind kind;
    double j, h;
  };
  for (const Case& c : {Case{CellKind::VRNN, 1.0, 1.0}, Case{CellKind::LSTM, 0.25, 0.25}, Case{CellKind::STAR, 0.5, 0.5}}) {
    Rng rng(1, 0);
    const FixedPointReport r = fixed_point_report(c.kind, 32, 3, rng);
    EXPECT_NEAR(r.mean_sv_J, c.j, 1e-10);
    EXPECT_NEAR(r.mean_sv_H, c.h, 1e-10);
    EXPECT_NEAR(r.factor_uncorrelated, std::hypot(c.j, c.h), 1e-10);
    EXPECT_NEAR(r.factor_correlated, c.j + c.h, 1e-10);
    EXPECT_EQ(r.trials, 3);
  }
}

// At the zero state the state Jacobians of the LSTM without input gate and of
// the GRU are normal matrices a I + b Q, whose singular values are |a + b l|
// over the eigenvalues l of the orthogonal Q.
double normal_mean_sv(const Mat& q, double a, double b) {
  const Eigen::EigenSolver<Eigen::MatrixXd> es(q);
  double s = 0;
  for (Index i = 0; i < q.rows(); ++i) s += std::abs(a + b * es.eigenvalues()(i));
  return s / static_cast<double>(q.rows());
}

TEST(FixedPoint, GatedCellsAgainstEigenvalueOracle) {
  const Index n = 24;
  {
    Rng rng(2, 0), replay(2, 0);
    const FixedPointReport r = fixed_point_report(CellKind::LSTMwF, n, 1, rng);
    const CellParams p = init_params(CellKind::LSTMwF, n, n, 2, replay, BiasInit::Zero);
    EXPECT_NEAR(r.mean_sv_J, 0.5, 1e-10);
    EXPECT_NEAR(r.mean_sv_H, normal_mean_sv(p.weight("W_hz"), 0.5, 0.5), 1e-9);
  }
  {
    Rng rng(3, 0), replay(3, 0);
    const FixedPointReport r = fixed_point_report(CellKind::GRU, n, 1, rng);
    const CellParams p = init_params(CellKind::GRU, n, n, 2, replay, BiasInit::Zero);
    EXPECT_NEAR(r.mean_sv_J, 0.5, 1e-10);
    EXPECT_NEAR(r.mean_sv_H, normal_mean_sv(p.weight("W_hh"), 0.5, 0.25), 1e-9);
  }
}

TEST(FixedPoint, RejectsBadArguments) {
  Rng rng(1, 0);
  EXPECT_THROW(fixed_point_report(CellKind::STAR, 1, 3, rng), std::invalid_argument);
  EXPECT_THROW(fixed_point_report(CellKind::STAR, 8, 0, rng), std::invalid_argument);
}

TEST(Ar1, LagOneAutocorrelation) {
  Rng rng(4, 0);
  const Index steps = 200, width = 500;
  const auto xs = gen_ar1_sequence(rng, steps, width, 0.5);
  ASSERT_EQ(static_cast<Index>(xs.size()), steps);
  double sxy = 0, sxx = 0, syy = 0, sx = 0, sy = 0, n = 0;
  for (Index t = 21; t < steps; ++t)
    for (Index i = 0; i < width; ++i) {
      const double a = xs[t - 1](i, 0), b = xs[t](i, 0);
      sxy += a * b;
      sxx += a * a;
      syy += b * b;
      sx += a;
      sy += b;
      ++n;
    }
  const double cov = sxy / n - sx / n * sy / n;
  const double corr = cov / std::sqrt((sxx / n - sx / n * sx / n) * (syy / n - sy / n * sy / n));
  EXPECT_NEAR(corr, 0.5, 0.02);
  // Stationary variance (1 - a)^2 / (1 - a^2) = 1/3.
  EXPECT_NEAR(sxx / n, 1.0 / 3.0, 0.02);
  EXPECT_THROW(gen_ar1_sequence(rng, 5, 1, 1.0), std::invalid_argument);
}

SimConfig small_sim(CellKind kind) {
  SimConfig c;
  c.stack = StackSpec::uniform(kind, 6, 1, 32, 20);
  c.runs = 20;
  c.seed = 3;
  return c;
}

TEST(Simulation, IndependentOfThreadCount) {
  SimConfig c = small_sim(CellKind::GRU);
  c.runs = 7;
  std::ostringstream a, b;
  simulate_gradient_field(c).write_csv(a);
  c.threads = 3;
  simulate_gradient_field(c).write_csv(b);
  EXPECT_EQ(a.str(), b.str());
}

TEST(Simulation, RunsAreReproducible) {
  const SimConfig c = small_sim(CellKind::STAR);
  const BackwardResult a = simulate_run(c, 4);
  const BackwardResult b = simulate_run(c, 4);
  EXPECT_EQ(a.gparam_norm, b.gparam_norm);
  EXPECT_NE(a.gparam_norm, simulate_run(c, 5).gparam_norm);
}

// Bottom-to-top ratio along the anti-diagonal ending at the top-right node.
double diagonal_ratio(const GradientField& f) {
  const Index L = f.layers(), T = f.steps();
  return f.gparam(0, T - L).mean / f.gparam(L - 1, T - 1).mean;
}

TEST(Simulation, LayerwiseOrdering) {
  const GradientField vrnn = simulate_gradient_field(small_sim(CellKind::VRNN));
  const GradientField lstm = simulate_gradient_field(small_sim(CellKind::LSTM));
  const GradientField star = simulate_gradient_field(small_sim(CellKind::STAR));
  EXPECT_LT(layer_ratio(lstm), layer_ratio(star));
  EXPECT_LT(layer_ratio(star), layer_ratio(vrnn));
  // Along the band that receives both vertical and temporal terms the LSTM
  // attenuates strongly, STAR moderately, and the vRNN hardly at all.
  EXPECT_LT(diagonal_ratio(lstm), 0.1);
  EXPECT_LT(diagonal_ratio(lstm), diagonal_ratio(star));
  EXPECT_LT(diagonal_ratio(star), diagonal_ratio(vrnn));
  EXPECT_GT(diagonal_ratio(vrnn), 0.5);
}

TEST(Simulation, AllStepsDominatesFinalStep) {
  SimConfig c = small_sim(CellKind::STAR);
  c.runs = 4;
  const GradientField final = simulate_gradient_field(c);
  c.loss_mode = LossMode::AllSteps;
  const GradientField all = simulate_gradient_field(c);
  // Identical draws; the final-step seed is one of the all-step seeds, and the
  // first step only sees the final loss through the whole sequence.
  EXPECT_NEAR(all.gparam(5, 19).mean, final.gparam(5, 19).mean, 1e-14);
  EXPECT_GT(all.gparam(5, 0).mean, final.gparam(5, 0).mean);
}

TEST(Simulation, MnistInput) {
  const MnistSet set = load_mnist_idx(STARLAB_TEST_DATA "/mnist-subset-images-idx3-ubyte",
                                      STARLAB_TEST_DATA "/mnist-subset-labels-idx1-ubyte");
  SimConfig c;
  c.stack = StackSpec::uniform(CellKind::LSTM, 3, 1, 8, 784);
  c.steps = 40;
  c.runs = 3;
  c.input = MnistInput{&set};
  const GradientField f = simulate_gradient_field(c);
  EXPECT_EQ(f.steps(), 40);
  EXPECT_GT(f.gparam(2, 39).mean, 0.0);
}

TEST(Simulation, ValidateRejectsBadConfigs) {
  SimConfig c = small_sim(CellKind::STAR);
  c.runs = 0;
  EXPECT_THROW(simulate_gradient_field(c), std::invalid_argument);
  c = small_sim(CellKind::STAR);
  c.steps = 21;
  EXPECT_THROW(simulate_gradient_field(c), std::invalid_argument);
  c = small_sim(CellKind::STAR);
  c.input = Ar1Input{1.5};
  EXPECT_THROW(simulate_gradient_field(c), std::invalid_argument);
  c = small_sim(CellKind::STAR);
  c.input = MnistInput{nullptr};
  EXPECT_THROW(simulate_gradient_field(c), std::invalid_argument);
}

TEST(WeightTrace, OrthogonalInitHasUnitNormalizedNorms) {
  Rng rng(5, 0);
  StackSpec s;
  s.layers = {{CellKind::LSTM, 6, std::nullopt}, {CellKind::STAR, 4, std::nullopt}};
  s.n_in = 3;
  s.t_max = 5;
  const Lattice lat = build(s, BiasInit::Chrono, rng);
  const auto norms = normalized_weight_norms(lat);
  ASSERT_EQ(norms.size(), 2u);
  EXPECT_EQ(norms[0].size(), 8u);
  EXPECT_EQ(norms[1].size(), 3u);
  for (const auto& row : norms)
    for (double v : row) EXPECT_NEAR(v, 1.0, 1e-12);

  std::vector<Mat> xs(5, Mat::Constant(3, 2, 0.5));
  const SequenceGrid g = forward_sequence(lat, xs);
  WeightStateTrace trace;
  trace.record(0, lat, g);
  trace.record(1, lat, g);
  ASSERT_EQ(trace.samples().size(), 2u);
  const auto& mh = trace.samples()[1].mean_hidden;
  ASSERT_EQ(mh.size(), 2u);
  double sum = 0;
  for (const auto& h : g.h[1]) sum += h.sum();
  EXPECT_NEAR(mh[1], sum / (5 * 4 * 2), 1e-15);
}

}  // namespace
}  // namespace starlab
