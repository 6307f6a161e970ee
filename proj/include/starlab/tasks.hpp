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

// Sequence tasks: the adding problem, copy memory and pixel-by-pixel MNIST
// (optionally permuted), plus the big-endian IDX reader behind the latter.

#pragma once

#include "starlab/numerics.hpp"

#include <array>
#include <cstdint>
#include <fstream>
#include <istream>
#include <numeric>
#include <optional>
#include <ostream>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace starlab {

enum class LossKind { MeanSquaredError, CrossEntropy };

enum class TargetKind {
  ScalarPerSequence,  // adding problem
  ClassPerStep,       // copy memory
  ClassPerSequence,   // MNIST
};

/// One minibatch: `inputs[t]` is n_in x batch; the populated target field
/// follows `target_kind`.
struct Batch {
  std::vector<Mat> inputs;
  TargetKind target_kind = TargetKind::ScalarPerSequence;
  LossKind loss = LossKind::MeanSquaredError;
  Vec values;                                   // [batch]
  std::vector<std::vector<int>> step_classes;  // [t][batch]
  std::vector<int> classes;                     // [batch]

  Index steps() const { return static_cast<Index>(inputs.size()); }
  Index batch_size() const { return inputs.empty() ? 0 : inputs.front().cols(); }
  Index input_width() const { return inputs.empty() ? 0 : inputs.front().rows(); }

  void validate(int num_classes) const {
    if (inputs.empty()) throw std::invalid_argument("batch: no steps");
    for (const auto& x : inputs)
      if (x.rows() != input_width() || x.cols() != batch_size())
        throw std::invalid_argument("batch: ragged inputs");
    auto check_class = [&](int c) {
      if (c < 0 || c >= num_classes) throw std::invalid_argument("batch: class id outside alphabet");
    };
    switch (target_kind) {
      case TargetKind::ScalarPerSequence:
        if (values.size() != batch_size()) throw std::invalid_argument("batch: target count");
        break;
      case TargetKind::ClassPerStep:
        if (static_cast<Index>(step_classes.size()) != steps())
          throw std::invalid_argument("batch: per-step targets");
        for (const auto& row : step_classes) {
          if (static_cast<Index>(row.size()) != batch_size())
            throw std::invalid_argument("batch: per-step targets");
          for (int c : row) check_class(c);
        }
        break;
      case TargetKind::ClassPerSequence:
        if (static_cast<Index>(classes.size()) != batch_size())
          throw std::invalid_argument("batch: target count");
        for (int c : classes) check_class(c);
        break;
    }
  }
};

// ---------------------------------------------------------------------------
// Adding problem

enum class MarkerPlacement {
  Halves,    // first marker in [0, T/2), second in [T/2, T)
  Anywhere,  // two distinct positions uniformly over [0, T)
};

/// Two-channel adding sequences from explicit values and marker positions.
inline Batch assemble_adding(const std::vector<std::vector<double>>& values,
                             const std::vector<std::pair<Index, Index>>& markers) {
  if (values.empty() || values.size() != markers.size())
    throw std::invalid_argument("assemble_adding: one marker pair per sequence");
  const Index steps = static_cast<Index>(values.front().size());
  const Index batch = static_cast<Index>(values.size());
  Batch b;
  b.target_kind = TargetKind::ScalarPerSequence;
  b.loss = LossKind::MeanSquaredError;
  b.inputs.assign(static_cast<std::size_t>(steps), Mat::Zero(2, batch));
  b.values = Vec::Zero(batch);
  for (Index s = 0; s < batch; ++s) {
    const auto& v = values[static_cast<std::size_t>(s)];
    const auto [first, second] = markers[static_cast<std::size_t>(s)];
    if (static_cast<Index>(v.size()) != steps || first == second || first < 0 || second < 0 ||
        first >= steps || second >= steps)
      throw std::invalid_argument("assemble_adding: bad sequence or markers");
    for (Index t = 0; t < steps; ++t) b.inputs[static_cast<std::size_t>(t)](0, s) = v[t];
    b.inputs[static_cast<std::size_t>(first)](1, s) = 1.0;
    b.inputs[static_cast<std::size_t>(second)](1, s) = 1.0;
    b.values(s) = v[first] + v[second];
  }
  return b;
}

inline Batch gen_adding(Rng& rng, Index batch, Index steps,
                        MarkerPlacement placement = MarkerPlacement::Halves) {
  if (steps < 2) throw std::invalid_argument("gen_adding: T must be >= 2");
  if (batch < 1) throw std::invalid_argument("gen_adding: batch must be >= 1");
  std::vector<std::vector<double>> values(static_cast<std::size_t>(batch));
  std::vector<std::pair<Index, Index>> markers(static_cast<std::size_t>(batch));
  const auto T = static_cast<std::uint32_t>(steps);
  for (std::size_t s = 0; s < values.size(); ++s) {
    auto& v = values[s];
    v.resize(T);
    for (auto& x : v) x = rng.uniform();
    if (placement == MarkerPlacement::Halves) {
      const std::uint32_t half = T / 2;
      markers[s] = {rng.below(half), half + rng.below(T - half)};
    } else {
      const std::uint32_t a = rng.below(T);
      std::uint32_t b = rng.below(T - 1);
      if (b >= a) ++b;
      markers[s] = {a, b};
    }
  }
  return assemble_adding(values, markers);
}

// ---------------------------------------------------------------------------
// Copy memory

inline constexpr int kCopyAlphabet = 10;
inline constexpr int kCopyDigits = 10;
inline constexpr int kCopyDelimiter = 9;

/// Symbols of one copy sequence of length T + 20: the digits, T - 1 blanks,
/// then eleven 9s (the first is the delimiter).
inline std::vector<int> copy_input_symbols(const std::vector<int>& digits, Index steps) {
  if (static_cast<int>(digits.size()) != kCopyDigits)
    throw std::invalid_argument("copy: exactly ten digits are required");
  std::vector<int> s(digits);
  s.insert(s.end(), static_cast<std::size_t>(steps - 1), 0);
  s.insert(s.end(), kCopyDigits + 1, kCopyDelimiter);
  return s;
}

inline std::vector<int> copy_target_symbols(const std::vector<int>& digits, Index steps) {
  std::vector<int> s(static_cast<std::size_t>(steps + 10), 0);
  s.insert(s.end(), digits.begin(), digits.end());
  return s;
}

inline Batch assemble_copy(const std::vector<std::vector<int>>& digits, Index steps) {
  if (steps < 1) throw std::invalid_argument("gen_copy: T must be >= 1");
  if (digits.empty()) throw std::invalid_argument("gen_copy: batch must be >= 1");
  const Index len = steps + 20;
  const Index batch = static_cast<Index>(digits.size());
  Batch b;
  b.target_kind = TargetKind::ClassPerStep;
  b.loss = LossKind::CrossEntropy;
  b.inputs.assign(static_cast<std::size_t>(len), Mat::Zero(kCopyAlphabet, batch));
  b.step_classes.assign(static_cast<std::size_t>(len), std::vector<int>(batch, 0));
  for (Index s = 0; s < batch; ++s) {
    for (int d : digits[static_cast<std::size_t>(s)])
      if (d < 1 || d > 8) throw std::invalid_argument("gen_copy: digits must lie in 1..8");
    const auto in = copy_input_symbols(digits[static_cast<std::size_t>(s)], steps);
    const auto out = copy_target_symbols(digits[static_cast<std::size_t>(s)], steps);
    for (Index t = 0; t < len; ++t) {
      b.inputs[static_cast<std::size_t>(t)](in[static_cast<std::size_t>(t)], s) = 1.0;
      b.step_classes[static_cast<std::size_t>(t)][static_cast<std::size_t>(s)] =
          out[static_cast<std::size_t>(t)];
    }
  }
  return b;
}

inline Batch gen_copy(Rng& rng, Index batch, Index steps) {
  if (batch < 1) throw std::invalid_argument("gen_copy: batch must be >= 1");
  std::vector<std::vector<int>> digits(static_cast<std::size_t>(batch));
  for (auto& d : digits) {
    d.resize(kCopyDigits);
    for (auto& v : d) v = 1 + static_cast<int>(rng.below(8));
  }
  return assemble_copy(digits, steps);
}

// ---------------------------------------------------------------------------
// MNIST

class IdxError : public std::runtime_error {
 public:
  enum class Code { Io, BadMagic, Truncated, CountMismatch };
  IdxError(Code code, const std::string& what) : std::runtime_error(what), code_(code) {}
  Code code() const { return code_; }

 private:
  Code code_;
};

inline constexpr std::uint32_t kIdxImageMagic = 0x00000803;
inline constexpr std::uint32_t kIdxLabelMagic = 0x00000801;

struct MnistSet {
  /// One flattened image per row, row-major pixel order, values in [0, 1].
  Mat images;
  std::vector<int> labels;
  Index rows = 28;
  Index cols = 28;
  /// permuted[j] = original[permutation[j]].
  std::optional<std::vector<Index>> permutation;

  Index size() const { return images.rows(); }
  Index pixels() const { return images.cols(); }
};

namespace detail {

inline std::uint32_t read_be32(std::istream& in, const char* what) {
  std::array<unsigned char, 4> b{};
  if (!in.read(reinterpret_cast<char*>(b.data()), 4))
    throw IdxError(IdxError::Code::Truncated, std::string("idx: truncated header in ") + what);
  return (std::uint32_t{b[0]} << 24) | (std::uint32_t{b[1]} << 16) | (std::uint32_t{b[2]} << 8) |
         std::uint32_t{b[3]};
}

inline void write_be32(std::ostream& out, std::uint32_t v) {
  const char b[4] = {static_cast<char>(v >> 24), static_cast<char>(v >> 16),
                     static_cast<char>(v >> 8), static_cast<char>(v)};
  out.write(b, 4);
}

inline std::vector<unsigned char> read_payload(std::istream& in, std::size_t n, const char* what) {
  std::vector<unsigned char> data(n);
  if (n != 0 && !in.read(reinterpret_cast<char*>(data.data()), static_cast<std::streamsize>(n)))
    throw IdxError(IdxError::Code::Truncated, std::string("idx: truncated payload in ") + what);
  return data;
}

}  // namespace detail

struct IdxImages {
  Index count = 0, rows = 0, cols = 0;
  std::vector<unsigned char> pixels;
};

inline IdxImages read_idx_images(std::istream& in) {
  const std::uint32_t magic = detail::read_be32(in, "images");
  if (magic != kIdxImageMagic)
    throw IdxError(IdxError::Code::BadMagic, "idx: bad image magic " + std::to_string(magic));
  IdxImages img;
  img.count = detail::read_be32(in, "images");
  img.rows = detail::read_be32(in, "images");
  img.cols = detail::read_be32(in, "images");
  img.pixels = detail::read_payload(in, static_cast<std::size_t>(img.count * img.rows * img.cols),
                                    "images");
  return img;
}

inline std::vector<int> read_idx_labels(std::istream& in) {
  const std::uint32_t magic = detail::read_be32(in, "labels");
  if (magic != kIdxLabelMagic)
    throw IdxError(IdxError::Code::BadMagic, "idx: bad label magic " + std::to_string(magic));
  const std::uint32_t n = detail::read_be32(in, "labels");
  const auto raw = detail::read_payload(in, n, "labels");
  return {raw.begin(), raw.end()};
}

inline void write_idx_images(std::ostream& out, const IdxImages& img) {
  detail::write_be32(out, kIdxImageMagic);
  detail::write_be32(out, static_cast<std::uint32_t>(img.count));
  detail::write_be32(out, static_cast<std::uint32_t>(img.rows));
  detail::write_be32(out, static_cast<std::uint32_t>(img.cols));
  out.write(reinterpret_cast<const char*>(img.pixels.data()),
            static_cast<std::streamsize>(img.pixels.size()));
}

inline void write_idx_labels(std::ostream& out, const std::vector<int>& labels) {
  detail::write_be32(out, kIdxLabelMagic);
  detail::write_be32(out, static_cast<std::uint32_t>(labels.size()));
  for (int l : labels) out.put(static_cast<char>(l));
}

inline MnistSet load_mnist_idx(std::istream& images_in, std::istream& labels_in) {
  const IdxImages img = read_idx_images(images_in);
  std::vector<int> labels = read_idx_labels(labels_in);
  if (static_cast<Index>(labels.size()) != img.count)
    throw IdxError(IdxError::Code::CountMismatch,
                   "idx: " + std::to_string(img.count) + " images but " +
                       std::to_string(labels.size()) + " labels");
  MnistSet set;
  set.rows = img.rows;
  set.cols = img.cols;
  const Index px = img.rows * img.cols;
  set.images.resize(img.count, px);
  for (Index i = 0; i < img.count; ++i)
    for (Index j = 0; j < px; ++j)
      set.images(i, j) = static_cast<double>(img.pixels[static_cast<std::size_t>(i * px + j)]) / 255.0;
  set.labels = std::move(labels);
  return set;
}

inline MnistSet load_mnist_idx(const std::string& images_path, const std::string& labels_path) {
  std::ifstream images(images_path, std::ios::binary);
  if (!images) throw IdxError(IdxError::Code::Io, "idx: cannot open " + images_path);
  std::ifstream labels(labels_path, std::ios::binary);
  if (!labels) throw IdxError(IdxError::Code::Io, "idx: cannot open " + labels_path);
  return load_mnist_idx(images, labels);
}

/// Fisher-Yates permutation of [0, n) drawn from `seed`.
inline std::vector<Index> pixel_permutation(Index n, std::uint64_t seed) {
  std::vector<Index> p(static_cast<std::size_t>(n));
  std::iota(p.begin(), p.end(), Index{0});
  Rng rng(seed, 0x9e3779b9u);
  for (std::size_t i = p.size(); i > 1; --i) {
    const std::size_t j = rng.below(static_cast<std::uint32_t>(i));
    std::swap(p[i - 1], p[j]);
  }
  return p;
}

/// Applies one seeded permutation to every image. Permuting an already
/// permuted set composes the two.
inline MnistSet permute_pixels(const MnistSet& set, std::uint64_t seed) {
  const auto p = pixel_permutation(set.pixels(), seed);
  MnistSet out = set;
  for (Index j = 0; j < set.pixels(); ++j) out.images.col(j) = set.images.col(p[j]);
  std::vector<Index> composed(p.size());
  for (std::size_t j = 0; j < p.size(); ++j)
    composed[j] = set.permutation ? (*set.permutation)[static_cast<std::size_t>(p[j])] : p[j];
  out.permutation = std::move(composed);
  return out;
}

/// Undoes the stored permutation.
inline MnistSet unpermute_pixels(const MnistSet& set) {
  MnistSet out = set;
  if (!set.permutation) return out;
  const auto& p = *set.permutation;
  for (Index j = 0; j < set.pixels(); ++j) out.images.col(p[static_cast<std::size_t>(j)]) = set.images.col(j);
  out.permutation.reset();
  return out;
}

/// Pixel-by-pixel sequences (one pixel per step) for the given rows.
inline Batch mnist_batch(const MnistSet& set, std::span<const Index> rows) {
  if (rows.empty()) throw std::invalid_argument("mnist_batch: empty selection");
  const Index batch = static_cast<Index>(rows.size());
  Batch b;
  b.target_kind = TargetKind::ClassPerSequence;
  b.loss = LossKind::CrossEntropy;
  b.inputs.assign(static_cast<std::size_t>(set.pixels()), Mat(1, batch));
  b.classes.resize(rows.size());
  for (Index s = 0; s < batch; ++s) {
    const Index r = rows[static_cast<std::size_t>(s)];
    if (r < 0 || r >= set.size()) throw std::out_of_range("mnist_batch: row out of range");
    for (Index t = 0; t < set.pixels(); ++t) b.inputs[static_cast<std::size_t>(t)](0, s) = set.images(r, t);
    b.classes[static_cast<std::size_t>(s)] = set.labels[static_cast<std::size_t>(r)];
  }
  return b;
}

/// Rows `first .. first + count` as a new set (permutation is kept).
inline MnistSet mnist_slice(const MnistSet& set, Index first, Index count) {
  if (first < 0 || count < 0 || first + count > set.size())
    throw std::out_of_range("mnist_slice: range exceeds the set");
  MnistSet out;
  out.rows = set.rows;
  out.cols = set.cols;
  out.images = set.images.middleRows(first, count);
  out.labels.assign(set.labels.begin() + first, set.labels.begin() + first + count);
  out.permutation = set.permutation;
  return out;
}

/// Debug dump: one row per (sample, step).
inline void write_batch_csv(const Batch& b, std::ostream& os) {
  os << "sample,t";
  for (Index k = 0; k < b.input_width(); ++k) os << ",x" << k;
  os << ",target\n";
  for (Index s = 0; s < b.batch_size(); ++s) {
    for (Index t = 0; t < b.steps(); ++t) {
      os << s << ',' << t;
      for (Index k = 0; k < b.input_width(); ++k) os << ',' << b.inputs[static_cast<std::size_t>(t)](k, s);
      os << ',';
      switch (b.target_kind) {
        case TargetKind::ScalarPerSequence:
          if (t + 1 == b.steps()) os << b.values(s);
          break;
        case TargetKind::ClassPerStep:
          os << b.step_classes[static_cast<std::size_t>(t)][static_cast<std::size_t>(s)];
          break;
        case TargetKind::ClassPerSequence:
          if (t + 1 == b.steps()) os << b.classes[static_cast<std::size_t>(s)];
          break;
      }
      os << '\n';
    }
  }
}

}  // namespace starlab
