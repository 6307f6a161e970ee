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


#include "starlab/cells.hpp"
#include "starlab/gradcheck.hpp"

#include <gtest/gtest.h>

#include <cmath>

namespace starlab {
namespace {

double sig(double a) { return 1.0 / (1.0 + std::exp(-a)); }

// Element-wise reference forward for a single sample, written from the update
// rules without any matrix helpers.
struct Ref {
  std::vector<double> h, c;
};

double dot_row(const Mat& w, Index i, const Vec& v) {
  double s = 0;
  for (Index j = 0; j < w.cols(); ++j) s += w(i, j) * v(j);
  return s;
}

Ref reference_forward(const CellParams& p, const Vec& x, const Vec& h, const Vec& c) {
  const auto& W = p.weights;
  const auto& b = p.biases;
  const Index n = p.n_hidden;
  Ref r;
  r.h.resize(n);
  switch (p.kind) {
    case CellKind::VRNN:
      for (Index i = 0; i < n; ++i) r.h[i] = std::tanh(dot_row(W[0], i, x) + dot_row(W[1], i, h) + b[0](i));
      break;
    case CellKind::LSTM:
      r.c.resize(n);
      for (Index i = 0; i < n; ++i) {
        const double ig = sig(dot_row(W[0], i, x) + dot_row(W[1], i, h) + b[0](i));
        const double fg = sig(dot_row(W[2], i, x) + dot_row(W[3], i, h) + b[1](i));
        const double og = sig(dot_row(W[4], i, x) + dot_row(W[5], i, h) + b[2](i));
        const double z = std::tanh(dot_row(W[6], i, x) + dot_row(W[7], i, h) + b[3](i));
        r.c[i] = fg * c(i) + ig * z;
        r.h[i] = og * std::tanh(r.c[i]);
      }
      break;
    case CellKind::LSTMwF:
      for (Index i = 0; i < n; ++i) {
        const double fg = sig(dot_row(W[0], i, x) + dot_row(W[1], i, h) + b[0](i));
        const double z = std::tanh(dot_row(W[2], i, x) + dot_row(W[3], i, h) + b[1](i));
        r.h[i] = std::tanh(fg * h(i) + (1 - fg) * z);
      }
      break;
    case CellKind::GRU: {
      Vec rh(n);
      for (Index i = 0; i < n; ++i) rh(i) = sig(dot_row(W[2], i, x) + dot_row(W[3], i, h) + b[1](i)) * h(i);
      for (Index i = 0; i < n; ++i) {
        const double z = sig(dot_row(W[0], i, x) + dot_row(W[1], i, h) + b[0](i));
        const double a = std::tanh(dot_row(W[4], i, x) + dot_row(W[5], i, rh) + b[2](i));
        r.h[i] = (1 - z) * h(i) + z * a;
      }
      break;
    }
    case CellKind::STAR:
      for (Index i = 0; i < n; ++i) {
        const double z = std::tanh(dot_row(W[0], i, x) + b[0](i));
        const double k = sig(dot_row(W[1], i, x) + dot_row(W[2], i, h) + b[1](i));
        r.h[i] = std::tanh((1 - k) * h(i) + k * z);
      }
      break;
  }
  return r;
}

class PerKind : public ::testing::TestWithParam<CellKind> {};

TEST_P(PerKind, ForwardMatchesElementwiseReference) {
  const CellKind kind = GetParam();
  Rng rng(21, static_cast<std::uint64_t>(kind));
  const CellParams p = random_cell(kind, 3, 4, rng);
  const Mat x = gaussian_matrix(rng, 3, 2);
  const Mat h = 0.5 * gaussian_matrix(rng, 4, 2);
  const Mat c = has_cell_state(kind) ? Mat(gaussian_matrix(rng, 4, 2)) : Mat();
  const ForwardCache fc = forward(p, x, h, c);
  for (Index s = 0; s < 2; ++s) {
    const Ref r = reference_forward(p, x.col(s), h.col(s), has_cell_state(kind) ? Vec(c.col(s)) : Vec());
    for (Index i = 0; i < 4; ++i) {
      EXPECT_NEAR(fc.h(i, s), r.h[i], 1e-14);
      if (has_cell_state(kind)) {
        EXPECT_NEAR(fc.c(i, s), r.c[i], 1e-14);
      }
    }
  }
}

TEST_P(PerKind, GradCheck) {
  Rng rng(5, static_cast<std::uint64_t>(GetParam()));
  const GradCheckResult r = grad_check(GetParam(), 20, 1e-5, rng);
  EXPECT_LT(r.max_rel_error, 1e-6) << r.worst;
  EXPECT_GT(r.checked, 0);
}

// Columns of J and H recovered by back-propagating unit vectors must equal
// the closed forms.
TEST_P(PerKind, JacobiansMatchBackward) {
  const CellKind kind = GetParam();
  Rng rng(33, static_cast<std::uint64_t>(kind));
  for (int trial = 0; trial < 20; ++trial) {
    const Index n_in = 3 + trial % 3, n = 4 + trial % 4;
    const CellParams p = random_cell(kind, n_in, n, rng);
    const Vec x = gaussian_matrix(rng, n_in, 1).col(0);
    const Vec h = 0.8 * gaussian_matrix(rng, n, 1).col(0);
    std::optional<Vec> c;
    if (has_cell_state(kind)) c = gaussian_matrix(rng, n, 1).col(0);
    const Jacobians jac = jacobians_at(p, x, h, c);
    ASSERT_EQ(jac.J.rows(), n);
    ASSERT_EQ(jac.J.cols(), n_in);
    ASSERT_EQ(jac.H.rows(), n);
    ASSERT_EQ(jac.H.cols(), n);
    const ForwardCache fc = forward(p, x, h, c ? Mat(*c) : Mat());
    Mat J(n, n_in), H(n, n);
    for (Index i = 0; i < n; ++i) {
      Mat e = Mat::Zero(n, 1);
      e(i, 0) = 1.0;
      const auto b = backward(p, fc, e, has_cell_state(kind) ? Mat(Mat::Zero(n, 1)) : Mat());
      J.row(i) = b.g_x.col(0).transpose();
      H.row(i) = b.g_h_prev.col(0).transpose();
    }
    EXPECT_LE((J - jac.J).cwiseAbs().maxCoeff(), 1e-10);
    EXPECT_LE((H - jac.H).cwiseAbs().maxCoeff(), 1e-10);
  }
}

// Independent of the backward pass: central differences of the forward map.
TEST_P(PerKind, JacobiansMatchFiniteDifferences) {
  const CellKind kind = GetParam();
  Rng rng(34, static_cast<std::uint64_t>(kind));
  const Index n_in = 3, n = 5;
  const CellParams p = random_cell(kind, n_in, n, rng);
  const Vec x = gaussian_matrix(rng, n_in, 1).col(0);
  const Vec h = 0.8 * gaussian_matrix(rng, n, 1).col(0);
  const Mat c = has_cell_state(kind) ? Mat(gaussian_matrix(rng, n, 1)) : Mat();
  const Jacobians jac = jacobians_at(p, x, h, has_cell_state(kind) ? std::optional<Vec>(c.col(0)) : std::nullopt);
  const double eps = 1e-6;
  for (Index j = 0; j < n_in; ++j) {
    Vec xp = x, xm = x;
    xp(j) += eps;
    xm(j) -= eps;
    const Mat d = (forward(p, xp, h, c).h - forward(p, xm, h, c).h) / (2 * eps);
    for (Index i = 0; i < n; ++i) EXPECT_NEAR(jac.J(i, j), d(i, 0), 1e-8);
  }
  for (Index j = 0; j < n; ++j) {
    Vec hp = h, hm = h;
    hp(j) += eps;
    hm(j) -= eps;
    const Mat d = (forward(p, x, hp, c).h - forward(p, x, hm, c).h) / (2 * eps);
    for (Index i = 0; i < n; ++i) EXPECT_NEAR(jac.H(i, j), d(i, 0), 1e-8);
  }
}

TEST_P(PerKind, BackwardAccumulates) {
  const CellKind kind = GetParam();
  Rng rng(35, static_cast<std::uint64_t>(kind));
  const CellParams p = random_cell(kind, 2, 3, rng);
  const Mat c = has_cell_state(kind) ? Mat(gaussian_matrix(rng, 3, 1)) : Mat();
  const ForwardCache fc = forward(p, gaussian_matrix(rng, 2, 1), gaussian_matrix(rng, 3, 1), c);
  const Mat gh = gaussian_matrix(rng, 3, 1);
  const Mat gc = has_cell_state(kind) ? Mat(gaussian_matrix(rng, 3, 1)) : Mat();
  CellGrads twice = p.zeros_like();
  backward_into(p, fc, gh, gc, twice);
  backward_into(p, fc, gh, gc, twice);
  CellGrads once = backward(p, fc, gh, gc).grads;
  once *= 2.0;
  for (std::size_t w = 0; w < once.weights.size(); ++w)
    EXPECT_LE((once.weights[w] - twice.weights[w]).cwiseAbs().maxCoeff(), 1e-14);
}

TEST_P(PerKind, ShapeMismatchThrows) {
  const CellKind kind = GetParam();
  Rng rng(36, 0);
  const CellParams p = random_cell(kind, 2, 3, rng);
  const Mat c = has_cell_state(kind) ? Mat(Mat::Zero(3, 1)) : Mat();
  EXPECT_THROW(forward(p, Mat::Zero(3, 1), Mat::Zero(3, 1), c), std::invalid_argument);
  EXPECT_THROW(forward(p, Mat::Zero(2, 1), Mat::Zero(3, 2), c), std::invalid_argument);
}

INSTANTIATE_TEST_SUITE_P(Cells, PerKind, ::testing::ValuesIn(kAllCellKinds),
                         [](const auto& info) { return std::string(to_string(info.param)); });

TEST(CellKind, NamesRoundTrip) {
  for (CellKind k : kAllCellKinds) EXPECT_EQ(parse_cell_kind(to_string(k)), k);
  EXPECT_EQ(parse_cell_kind("lstm-wf"), CellKind::LSTMwF);
  EXPECT_FALSE(parse_cell_kind("indrnn"));
}

TEST(ParamCount, ClosedForms) {
  EXPECT_EQ(param_count(CellKind::STAR, 128, 128), 49408);
  EXPECT_EQ(param_count(CellKind::GRU, 128, 128), 98688);
  EXPECT_EQ(param_count(CellKind::LSTM, 128, 128), 131584);
  EXPECT_EQ(param_count(CellKind::VRNN, 128, 128), 32896);
  EXPECT_EQ(param_count(CellKind::LSTMwF, 128, 128), 65792);
  EXPECT_EQ(param_count(CellKind::STAR, 1, 1), 5);
  EXPECT_THROW(param_count(CellKind::GRU, 0, 4), std::invalid_argument);
}

TEST(ParamCount, MatchesAllocatedScalars) {
  for (CellKind k : kAllCellKinds)
    EXPECT_EQ(CellParams::zeros(k, 7, 5).scalar_count(), param_count(k, 7, 5)) << to_string(k);
}

TEST(Chrono, DegenerateHorizonGivesZero) {
  Rng rng(1, 0);
  const Vec b = chrono_bias_init(16, 2, rng);
  EXPECT_EQ(b.cwiseAbs().maxCoeff(), 0.0);
  EXPECT_THROW(chrono_bias_init(4, 1, rng), std::invalid_argument);
}

TEST(Chrono, RangeAndGateBias) {
  Rng rng(1, 1);
  const Vec b = chrono_bias_init(100000, 784, rng);
  EXPECT_GE(b.minCoeff(), -std::log(783.0));
  EXPECT_LE(b.maxCoeff(), 0.0);
  EXPECT_LT(b.minCoeff(), -std::log(783.0) + 0.01);
  for (Index i = 0; i < b.size(); ++i) ASSERT_LT(sig(b(i)), 0.5 + 1e-15);
}

TEST(InitParams, GateBiasConventions) {
  Rng rng(2, 0);
  const CellParams star = init_params(CellKind::STAR, 4, 6, 100, rng);
  EXPECT_LE(star.bias("b_k").maxCoeff(), 0.0);
  EXPECT_EQ(star.bias("b_z").cwiseAbs().maxCoeff(), 0.0);

  const CellParams lstm = init_params(CellKind::LSTM, 4, 6, 100, rng);
  EXPECT_GE(lstm.bias("b_f").minCoeff(), 0.0);
  EXPECT_LE((lstm.bias("b_i") + lstm.bias("b_f")).cwiseAbs().maxCoeff(), 0.0);

  const CellParams one = init_params(CellKind::LSTM, 4, 6, 100, rng, BiasInit::ChronoForgetOne);
  EXPECT_EQ(one.bias("b_f"), Vec::Ones(6));

  const CellParams wf = init_params(CellKind::LSTMwF, 4, 6, 100, rng);
  EXPECT_GE(wf.bias("b_f").minCoeff(), 0.0);
  const CellParams gru = init_params(CellKind::GRU, 4, 6, 100, rng);
  EXPECT_LE(gru.bias("b_z").maxCoeff(), 0.0);

  const CellParams zero = init_params(CellKind::STAR, 4, 6, 100, rng, BiasInit::Zero);
  for (const auto& b : zero.biases) EXPECT_EQ(b.cwiseAbs().maxCoeff(), 0.0);
  for (const auto& w : zero.weights) {
    const Index k = std::min(w.rows(), w.cols());
    const Mat g = w.rows() <= w.cols() ? Mat(w * w.transpose()) : Mat(w.transpose() * w);
    EXPECT_LE((g - Mat::Identity(k, k)).cwiseAbs().maxCoeff(), 1e-12);
  }
}

// At the zero state with zero biases the Jacobians are fixed multiples of the
// (orthogonal) weights.
TEST(Jacobians, ZeroStateClosedForms) {
  Rng rng(3, 0);
  const Index n = 6;
  const Vec zero = Vec::Zero(n);
  auto at_zero = [&](CellKind k) {
    const CellParams p = init_params(k, n, n, 2, rng, BiasInit::Zero);
    return std::pair{p, jacobians_at(p, zero, zero, has_cell_state(k) ? std::optional<Vec>(zero) : std::nullopt)};
  };
  {
    const auto [p, j] = at_zero(CellKind::VRNN);
    EXPECT_LE((j.J - p.weight("W_x")).cwiseAbs().maxCoeff(), 1e-15);
    EXPECT_LE((j.H - p.weight("W_h")).cwiseAbs().maxCoeff(), 1e-15);
  }
  {
    const auto [p, j] = at_zero(CellKind::LSTM);
    EXPECT_LE((j.J - 0.25 * p.weight("W_xz")).cwiseAbs().maxCoeff(), 1e-15);
    EXPECT_LE((j.H - 0.25 * p.weight("W_hz")).cwiseAbs().maxCoeff(), 1e-15);
  }
  {
    const auto [p, j] = at_zero(CellKind::STAR);
    EXPECT_LE((j.J - 0.5 * p.weight("W_z")).cwiseAbs().maxCoeff(), 1e-15);
    EXPECT_LE((j.H - 0.5 * Mat::Identity(n, n)).cwiseAbs().maxCoeff(), 1e-15);
  }
}

// A linear recurrent map has an exact central difference, so the check error
// reduces to round-off.
TEST(GradCheck, LinearCellIsExact) {
  CellOps ops;
  ops.forward = [](const CellParams& p, const Mat& x, const Mat& h, const Mat&) {
    ForwardCache fc;
    fc.x = x;
    fc.h_prev = h;
    fc.h = p.weights[0] * x + p.weights[1] * h;
    fc.h.colwise() += p.biases[0];
    return fc;
  };
  ops.backward = [](const CellParams& p, const ForwardCache& fc, const Mat& gh, const Mat&, CellGrads& g) {
    g.weights[0] += gh * fc.x.transpose();
    g.weights[1] += gh * fc.h_prev.transpose();
    g.biases[0] += gh.rowwise().sum();
    return CellBackward{p.weights[0].transpose() * gh, p.weights[1].transpose() * gh, Mat()};
  };
  Rng rng(4, 0);
  const GradCheckResult r = grad_check(CellKind::VRNN, 20, 1e-5, rng, ops);
  EXPECT_LT(r.max_rel_error, 1e-8) << r.worst;
}

TEST(GradCheck, CorruptedBackwardIsCaught) {
  CellOps ops;
  ops.backward = [](const CellParams& p, const ForwardCache& fc, const Mat& gh, const Mat& gc, CellGrads& g) {
    CellBackward b = backward_into(p, fc, gh, gc, g);
    b.g_x *= 1.001;
    return b;
  };
  Rng rng(4, 1);
  EXPECT_GT(grad_check(CellKind::STAR, 3, 1e-5, rng, ops).max_rel_error, 1e-4);
}

// Truncation error dominates at large steps and round-off at small ones; the
// error curve is convex in log-log coordinates.
TEST(GradCheck, StepSweepIsConvex) {
  for (CellKind k : {CellKind::STAR, CellKind::LSTM}) {
    std::vector<double> err;
    for (double eps : {1e-4, 1e-5, 1e-6}) {
      Rng rng(6, 0);
      err.push_back(std::log10(grad_check(k, 20, eps, rng).max_rel_error));
    }
    EXPECT_LE(err[1], 0.5 * (err[0] + err[2])) << to_string(k);
  }
}

TEST(GradCheck, RelativeErrorFloor) {
  EXPECT_EQ(relative_error(1.0, 1.0), 0.0);
  EXPECT_NEAR(relative_error(2.0, 1.0), 0.5, 1e-15);
  EXPECT_NEAR(relative_error(0.0, 1e-12), 1e-8, 1e-20);
}

}  // namespace
}  // namespace starlab
