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


#include "starlab/checkpoint.hpp"
#include "starlab/train.hpp"

#include <gtest/gtest.h>

#include <sstream>

namespace starlab {
namespace {

Model mixed_model() {
  const TrainConfig c = parse_train_config(nlohmann::json::parse(R"({
    "task": "copy", "seq_len": 6, "seed": 11,
    "stack": {"layers": [{"cell": "vrnn", "hidden": 5}, {"cell": "lstm", "hidden": 4},
                         {"cell": "lstmwf", "hidden": 3}, {"cell": "gru", "hidden": 4},
                         {"cell": "star", "hidden": 6}]}
  })"));
  return build_model(c);
}

std::string serialize(const Model& m) {
  std::ostringstream os(std::ios::binary);
  save_checkpoint(os, m);
  return os.str();
}

TEST(Checkpoint, RoundTripIsBitExact) {
  Model m = mixed_model();
  std::istringstream is(serialize(m), std::ios::binary);
  Model back = load_checkpoint(is);
  EXPECT_EQ(back.lattice.spec.t_max, m.lattice.spec.t_max);
  EXPECT_EQ(back.lattice.spec.n_in, 10);
  ASSERT_EQ(back.lattice.depth(), 5);
  EXPECT_EQ(back.lattice.params[2].kind, CellKind::LSTMwF);
  EXPECT_EQ(back.head.attach, HeadAttach::PerStep);
  auto a = parameter_spans(m);
  auto b = parameter_spans(back);
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t k = 0; k < a.size(); ++k) {
    ASSERT_EQ(a[k].size(), b[k].size());
    for (std::size_t i = 0; i < a[k].size(); ++i)
      EXPECT_EQ(std::bit_cast<std::uint64_t>(a[k][i]), std::bit_cast<std::uint64_t>(b[k][i]));
  }
  EXPECT_EQ(serialize(back), serialize(m));

  Rng rng(5, 0);
  const Batch batch = gen_copy(rng, 4, 6);
  EXPECT_EQ(evaluate_loss(back, batch).loss, evaluate_loss(m, batch).loss);
}

TEST(Checkpoint, HeaderLayout) {
  const std::string bytes = serialize(mixed_model());
  EXPECT_EQ(bytes.substr(0, 8), "STARCKP1");
  std::uint64_t len = 0;
  for (int i = 7; i >= 0; --i) len = (len << 8) | static_cast<unsigned char>(bytes[8 + i]);
  const auto manifest = nlohmann::json::parse(bytes.substr(16, len));
  EXPECT_EQ(manifest["format"], "starlab-checkpoint");
  EXPECT_EQ(manifest["layers"][1]["tensors"][0]["name"], "W_xi");
  std::size_t scalars = 0;
  for (auto s : parameter_spans(*std::make_unique<Model>(mixed_model()))) scalars += s.size();
  EXPECT_EQ(bytes.size(), 16 + len + 8 * scalars);
}

TEST(Checkpoint, CorruptInputIsRejected) {
  std::string bytes = serialize(mixed_model());
  std::string bad_tag = bytes;
  bad_tag[0] = 'X';
  std::istringstream a(bad_tag);
  EXPECT_THROW(load_checkpoint(a), CheckpointError);
  std::istringstream b(bytes.substr(0, bytes.size() - 3));
  EXPECT_THROW(load_checkpoint(b), CheckpointError);
  std::istringstream c(bytes.substr(0, 12));
  EXPECT_THROW(load_checkpoint(c), CheckpointError);
  EXPECT_THROW(load_checkpoint(std::string("/nonexistent/model.ckpt")), CheckpointError);
}

}  // namespace
}  // namespace starlab
