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

// Checkpoint container: an 8-byte tag, a little-endian u64 manifest length,
// a JSON shape manifest, then every tensor as little-endian float64 in
// manifest order.

#pragma once

#include "starlab/model.hpp"

#include <nlohmann/json.hpp>

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>
#include <stdexcept>
#include <string>

namespace starlab {

inline constexpr char kCheckpointTag[8] = {'S', 'T', 'A', 'R', 'C', 'K', 'P', '1'};

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace detail {

inline void put_le64(std::ostream& os, std::uint64_t v) {
  char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xffu);
  os.write(b, 8);
}

inline std::uint64_t get_le64(std::istream& is) {
  unsigned char b[8];
  if (!is.read(reinterpret_cast<char*>(b), 8)) throw CheckpointError("checkpoint: truncated");
  std::uint64_t v = 0;
  for (int i = 7; i >= 0; --i) v = (v << 8) | b[i];
  return v;
}

inline void put_doubles(std::ostream& os, const double* p, Index n) {
  for (Index i = 0; i < n; ++i) put_le64(os, std::bit_cast<std::uint64_t>(p[i]));
}

inline void get_doubles(std::istream& is, double* p, Index n) {
  for (Index i = 0; i < n; ++i) p[i] = std::bit_cast<double>(get_le64(is));
}

inline std::string head_attach_name(HeadAttach a) {
  switch (a) {
    case HeadAttach::FinalStep: return "final";
    case HeadAttach::PerStep: return "per-step";
    case HeadAttach::MeanPool: return "mean";
  }
  return "?";
}

inline HeadAttach parse_head_attach(const std::string& s) {
  if (s == "final") return HeadAttach::FinalStep;
  if (s == "per-step") return HeadAttach::PerStep;
  if (s == "mean") return HeadAttach::MeanPool;
  throw CheckpointError("checkpoint: unknown head attachment " + s);
}

}  // namespace detail

inline nlohmann::json checkpoint_manifest(const Model& m) {
  nlohmann::json layers = nlohmann::json::array();
  for (const auto& p : m.lattice.params) {
    const TensorLayout layout = layout_of(p.kind);
    nlohmann::json tensors = nlohmann::json::array();
    for (std::size_t k = 0; k < p.weights.size(); ++k)
      tensors.push_back({{"name", layout.weight_names[k]},
                         {"shape", {p.weights[k].rows(), p.weights[k].cols()}}});
    for (std::size_t k = 0; k < p.biases.size(); ++k)
      tensors.push_back({{"name", layout.bias_names[k]}, {"shape", {p.biases[k].size()}}});
    layers.push_back({{"kind", std::string(to_string(p.kind))},
                      {"n_in", p.n_in},
                      {"n_hidden", p.n_hidden},
                      {"tensors", tensors}});
  }
  return {{"format", "starlab-checkpoint"},
          {"version", 1},
          {"t_max", m.lattice.spec.t_max},
          {"layers", layers},
          {"head",
           {{"attach", detail::head_attach_name(m.head.attach)},
            {"shape", {m.head.W.rows(), m.head.W.cols()}}}}};
}

inline void save_checkpoint(std::ostream& os, const Model& m) {
  const std::string manifest = checkpoint_manifest(m).dump();
  os.write(kCheckpointTag, sizeof kCheckpointTag);
  detail::put_le64(os, manifest.size());
  os.write(manifest.data(), static_cast<std::streamsize>(manifest.size()));
  for (const auto& p : m.lattice.params) {
    for (const auto& w : p.weights) detail::put_doubles(os, w.data(), w.size());
    for (const auto& b : p.biases) detail::put_doubles(os, b.data(), b.size());
  }
  detail::put_doubles(os, m.head.W.data(), m.head.W.size());
  detail::put_doubles(os, m.head.b.data(), m.head.b.size());
}

inline Model load_checkpoint(std::istream& is) {
  char tag[8];
  if (!is.read(tag, 8) || std::memcmp(tag, kCheckpointTag, 8) != 0)
    throw CheckpointError("checkpoint: bad tag");
  const std::uint64_t len = detail::get_le64(is);
  std::string text(len, '\0');
  if (!is.read(text.data(), static_cast<std::streamsize>(len)))
    throw CheckpointError("checkpoint: truncated manifest");
  const nlohmann::json j = nlohmann::json::parse(text);
  if (j.at("format") != "starlab-checkpoint" || j.at("version") != 1)
    throw CheckpointError("checkpoint: unsupported format");

  Model m;
  m.lattice.spec.t_max = j.at("t_max").get<Index>();
  for (const auto& lj : j.at("layers")) {
    const auto kind = parse_cell_kind(lj.at("kind").get<std::string>());
    if (!kind) throw CheckpointError("checkpoint: unknown cell kind");
    CellParams p =
        CellParams::zeros(*kind, lj.at("n_in").get<Index>(), lj.at("n_hidden").get<Index>());
    for (auto& w : p.weights) detail::get_doubles(is, w.data(), w.size());
    for (auto& b : p.biases) detail::get_doubles(is, b.data(), b.size());
    if (m.lattice.params.empty()) m.lattice.spec.n_in = p.n_in;
    m.lattice.spec.layers.push_back({p.kind, p.n_hidden, p.n_in});
    m.lattice.params.push_back(std::move(p));
  }
  const auto& hj = j.at("head");
  m.head.attach = detail::parse_head_attach(hj.at("attach").get<std::string>());
  m.head.W.resize(hj.at("shape")[0].get<Index>(), hj.at("shape")[1].get<Index>());
  m.head.b.resize(m.head.W.rows());
  detail::get_doubles(is, m.head.W.data(), m.head.W.size());
  detail::get_doubles(is, m.head.b.data(), m.head.b.size());
  m.lattice.spec.validate();
  return m;
}

inline void save_checkpoint(const std::string& path, const Model& m) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw CheckpointError("checkpoint: cannot write " + path);
  save_checkpoint(os, m);
}

inline Model load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw CheckpointError("checkpoint: cannot read " + path);
  return load_checkpoint(is);
}

}  // namespace starlab
