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

// Dense linear algebra aliases, a seedable PCG generator, matrix
// initializers and a one-sided Jacobi singular value routine.

#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace starlab {

using Index = Eigen::Index;
using Mat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vec = Eigen::VectorXd;

class ConvergenceError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// PCG32 (XSH-RR output over a 64-bit LCG). Each (seed, stream) pair selects
/// an independent sequence; the increment is derived from the stream id.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0, std::uint64_t stream = 0)
      : seed_(seed), stream_(stream), inc_((stream << 1u) | 1u) {
    next_u32();
    state_ += seed;
    next_u32();
  }

  std::uint64_t seed() const { return seed_; }
  std::uint64_t stream() const { return stream_; }

  /// A fresh generator on another stream of the same seed.
  Rng split(std::uint64_t stream) const { return Rng(seed_, stream); }

  std::uint32_t next_u32() {
    const std::uint64_t old = state_;
    state_ = old * 6364136223846793005ULL + inc_;
    const auto xorshifted = static_cast<std::uint32_t>(((old >> 18u) ^ old) >> 27u);
    const auto rot = static_cast<std::uint32_t>(old >> 59u);
    return (xorshifted >> rot) | (xorshifted << ((32u - rot) & 31u));
  }

  /// Uniform on [0, 1) with 53 random bits.
  double uniform() {
    const std::uint64_t a = next_u32() >> 5;
    const std::uint64_t b = next_u32() >> 6;
    return (static_cast<double>(a) * 67108864.0 + static_cast<double>(b)) *
           (1.0 / 9007199254740992.0);
  }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Unbiased integer in [0, n).
  std::uint32_t below(std::uint32_t n) {
    if (n == 0) throw std::invalid_argument("Rng::below: empty range");
    const std::uint32_t threshold = (0u - n) % n;
    for (;;) {
      const std::uint32_t r = next_u32();
      if (r >= threshold) return r % n;
    }
  }

  /// Standard normal via the Box-Muller transform; the second variate of each
  /// pair is cached.
  double gaussian() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1 = 0.0;
    do {
      u1 = uniform();
    } while (u1 <= 0.0);
    const double u2 = uniform();
    const double radius = std::sqrt(-2.0 * std::log(u1));
    const double angle = 2.0 * std::numbers::pi * u2;
    spare_ = radius * std::sin(angle);
    has_spare_ = true;
    return radius * std::cos(angle);
  }

 private:
  std::uint64_t seed_;
  std::uint64_t stream_;
  std::uint64_t state_ = 0;
  std::uint64_t inc_;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

inline void require_positive_dims(Index rows, Index cols, const char* what) {
  if (rows < 1 || cols < 1) {
    throw std::invalid_argument(std::string(what) + ": dimensions must be >= 1");
  }
}

inline Mat gaussian_matrix(Rng& rng, Index rows, Index cols) {
  require_positive_dims(rows, cols, "gaussian_matrix");
  Mat m(rows, cols);
  for (Index i = 0; i < rows; ++i)
    for (Index j = 0; j < cols; ++j) m(i, j) = rng.gaussian();
  return m;
}

/// Haar-distributed orthogonal matrix for the square case: QR of a Gaussian
/// draw with the signs of diag(R) folded into Q. Non-square shapes take the
/// leading rows/columns of a square draw of the larger dimension, giving
/// orthonormal rows (wide) or columns (tall).
inline Mat orthogonal_matrix(Rng& rng, Index rows, Index cols) {
  require_positive_dims(rows, cols, "orthogonal_matrix");
  const Index n = std::max(rows, cols);
  const Mat a = gaussian_matrix(rng, n, n);
  Eigen::HouseholderQR<Eigen::MatrixXd> qr(a);
  Eigen::MatrixXd q = qr.householderQ();
  const Eigen::MatrixXd& r = qr.matrixQR();
  for (Index j = 0; j < n; ++j) {
    if (r(j, j) < 0.0) q.col(j) *= -1.0;
  }
  return q.topLeftCorner(rows, cols);
}

/// Descending singular values by one-sided (Hestenes) Jacobi rotations. The
/// min(rows, cols) vectors of the thinner orientation are orthogonalised
/// pairwise until every normalised inner product is below `tol`.
inline std::vector<double> singular_values(const Mat& m, double tol = 1e-12,
                                           int max_sweeps = 80) {
  if (!m.allFinite()) throw std::invalid_argument("singular_values: non-finite entries");
  // Rows of `v` are the vectors being orthogonalised.
  Mat v = m.rows() >= m.cols() ? Mat(m.transpose()) : m;
  const Index k = v.rows();

  double worst = 0.0;
  for (int sweep = 0; sweep < max_sweeps; ++sweep) {
    worst = 0.0;
    for (Index p = 0; p + 1 < k; ++p) {
      for (Index q = p + 1; q < k; ++q) {
        const double alpha = v.row(p).squaredNorm();
        const double beta = v.row(q).squaredNorm();
        const double gamma = v.row(p).dot(v.row(q));
        if (alpha == 0.0 || beta == 0.0) continue;
        const double off = std::abs(gamma) / std::sqrt(alpha * beta);
        worst = std::max(worst, off);
        if (off < tol) continue;
        const double zeta = (beta - alpha) / (2.0 * gamma);
        const double t = std::copysign(1.0, zeta) / (std::abs(zeta) + std::sqrt(1.0 + zeta * zeta));
        const double c = 1.0 / std::sqrt(1.0 + t * t);
        const double s = c * t;
        for (Index j = 0; j < v.cols(); ++j) {
          const double vp = v(p, j);
          const double vq = v(q, j);
          v(p, j) = c * vp - s * vq;
          v(q, j) = s * vp + c * vq;
        }
      }
    }
    if (worst < tol) {
      std::vector<double> out(static_cast<std::size_t>(k));
      for (Index i = 0; i < k; ++i) out[static_cast<std::size_t>(i)] = v.row(i).norm();
      std::sort(out.begin(), out.end(), std::greater<>());
      return out;
    }
  }
  std::ostringstream msg;
  msg << "singular_values: no convergence after " << max_sweeps << " sweeps on a " << m.rows()
      << "x" << m.cols() << " matrix (off-diagonal " << worst << ", frobenius " << m.norm() << ")";
  throw ConvergenceError(msg.str());
}

inline double mean_singular_value(const Mat& m) {
  const auto sv = singular_values(m);
  double sum = 0.0;
  for (double s : sv) sum += s;
  return sum / static_cast<double>(sv.size());
}

}  // namespace starlab
