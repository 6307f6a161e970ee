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

// Training configuration (strict JSON), task data and the minibatch loop.

#pragma once

#include "starlab/analysis.hpp"
#include "starlab/model.hpp"
#include "starlab/tasks.hpp"

#include <nlohmann/json.hpp>

#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <functional>
#include <numeric>
#include <optional>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

namespace starlab {

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class TaskKind { Adding, Copy, Mnist, PermutedMnist };

inline std::optional<TaskKind> parse_task(std::string_view s) {
  if (s == "adding") return TaskKind::Adding;
  if (s == "copy") return TaskKind::Copy;
  if (s == "mnist") return TaskKind::Mnist;
  if (s == "pmnist") return TaskKind::PermutedMnist;
  return std::nullopt;
}

inline std::string_view to_string(TaskKind t) {
  switch (t) {
    case TaskKind::Adding: return "adding";
    case TaskKind::Copy: return "copy";
    case TaskKind::Mnist: return "mnist";
    case TaskKind::PermutedMnist: return "pmnist";
  }
  return "?";
}

inline bool is_mnist(TaskKind t) { return t == TaskKind::Mnist || t == TaskKind::PermutedMnist; }

struct DataConfig {
  std::string dir;  // empty: $STARLAB_DATA_DIR
  std::string train_images = "train-images-idx3-ubyte";
  std::string train_labels = "train-labels-idx1-ubyte";
  std::string test_images;  // empty: test rows follow the train rows
  std::string test_labels;
  Index train_size = 1000;
  Index test_size = 200;
  std::uint64_t permutation_seed = 92916;
};

struct TrainConfig {
  TaskKind task = TaskKind::Adding;
  StackSpec stack;  // n_in and t_max are filled in from the task
  Index seq_len = 200;
  Index batch_size = 50;
  Index microbatch = 0;
  std::uint64_t max_steps = 20000;
  Index epochs = 3;
  std::string optimizer = "adam";
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double momentum = 0.9;
  double weight_decay = 0.0;
  double lr_end = 0.0;
  std::uint64_t lr_decay_steps = 0;
  double lr_power = 1.0;
  std::optional<double> clip;
  std::uint64_t seed = 1;
  std::uint64_t eval_every = 100;
  Index eval_size = 500;
  std::optional<double> stop_below;
  MarkerPlacement marker_placement = MarkerPlacement::Halves;
  BiasInit bias_init = BiasInit::Chrono;
  bool log_layer_grad_norms = false;
  bool log_weight_trace = false;
  DataConfig data;

  Index input_width() const {
    switch (task) {
      case TaskKind::Adding: return 2;
      case TaskKind::Copy: return kCopyAlphabet;
      default: return 1;
    }
  }
  Index outputs() const { return task == TaskKind::Adding ? 1 : 10; }
  Index sequence_length() const {
    if (task == TaskKind::Copy) return seq_len + 20;
    if (is_mnist(task)) return 784;
    return seq_len;
  }
  HeadAttach head_attach() const {
    return task == TaskKind::Copy ? HeadAttach::PerStep : HeadAttach::FinalStep;
  }

  void validate() const {
    if (stack.layers.empty()) throw ConfigError("config: stack has no layers");
    if (!(lr >= 0.0) || !std::isfinite(lr)) throw ConfigError("config: lr must be >= 0");
    if (batch_size < 1) throw ConfigError("config: batch_size must be >= 1");
    if (microbatch < 0) throw ConfigError("config: microbatch must be >= 0");
    if (!is_mnist(task) && seq_len < (task == TaskKind::Adding ? 2 : 1))
      throw ConfigError("config: seq_len too short");
    if (!is_mnist(task) && max_steps < 1) throw ConfigError("config: max_steps must be >= 1");
    if (is_mnist(task) && epochs < 1) throw ConfigError("config: epochs must be >= 1");
    if (clip && !(*clip > 0.0)) throw ConfigError("config: clip must be > 0");
    if (!(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0))
      throw ConfigError("config: betas must lie in [0, 1)");
    if (!(eps > 0.0)) throw ConfigError("config: eps must be > 0");
    if (optimizer != "adam" && optimizer != "sgd") throw ConfigError("config: unknown optimizer");
    if (eval_size < 1) throw ConfigError("config: eval_size must be >= 1");
    if (is_mnist(task) && (data.train_size < 1 || data.test_size < 0))
      throw ConfigError("config: bad MNIST subset sizes");
    for (const auto& l : stack.layers)
      if (l.n_hidden < 1) throw ConfigError("config: layer without units");
  }
};

namespace detail {

/// Reads keys from a JSON object and rejects any it was not asked for.
class StrictObject {
 public:
  StrictObject(const nlohmann::json& j, std::string where) : j_(j), where_(std::move(where)) {
    if (!j.is_object()) throw ConfigError("config: " + where_ + " must be an object");
  }

  template <typename T>
  void read(const char* key, T& out) {
    seen_.insert(key);
    if (!j_.contains(key)) return;
    try {
      out = j_.at(key).get<T>();
    } catch (const nlohmann::json::exception&) {
      throw ConfigError("config: bad value for " + where_ + "." + key);
    }
  }

  const nlohmann::json* sub(const char* key) {
    seen_.insert(key);
    return j_.contains(key) ? &j_.at(key) : nullptr;
  }

  void finish() const {
    for (const auto& item : j_.items())
      if (!seen_.count(item.key())) throw ConfigError("config: unknown key " + where_ + "." + item.key());
  }

 private:
  const nlohmann::json& j_;
  std::string where_;
  std::set<std::string> seen_;
};

inline CellKind cell_from_json(const std::string& s) {
  const auto k = parse_cell_kind(s);
  if (!k) throw ConfigError("config: unknown cell kind " + s);
  return *k;
}

}  // namespace detail

/// Stack from {"cell", "layers": count, "hidden"} or {"layers": [{"cell",
/// "hidden", "input"?}, ...]}.
inline StackSpec parse_stack(const nlohmann::json& j) {
  detail::StrictObject o(j, "stack");
  StackSpec s;
  const nlohmann::json* layers = o.sub("layers");
  if (layers && layers->is_array()) {
    for (const auto& lj : *layers) {
      detail::StrictObject lo(lj, "stack.layers[]");
      std::string cell = "star";
      Index hidden = 0;
      Index input = -1;
      lo.read("cell", cell);
      lo.read("hidden", hidden);
      lo.read("input", input);
      lo.finish();
      s.layers.push_back({detail::cell_from_json(cell), hidden,
                          input >= 0 ? std::optional<Index>(input) : std::nullopt});
    }
  } else {
    std::string cell = "star";
    Index depth = 1;
    Index hidden = 128;
    if (layers) {
      if (!layers->is_number_integer()) throw ConfigError("config: stack.layers must be a count or list");
      depth = layers->get<Index>();
    }
    o.read("cell", cell);
    o.read("hidden", hidden);
    if (depth < 1) throw ConfigError("config: stack.layers must be >= 1");
    s.layers.assign(static_cast<std::size_t>(depth), LayerSpec{detail::cell_from_json(cell), hidden, std::nullopt});
  }
  o.finish();
  return s;
}

inline TrainConfig parse_train_config(const nlohmann::json& j) {
  detail::StrictObject o(j, "config");
  TrainConfig c;
  std::string task = "adding";
  o.read("task", task);
  const auto t = parse_task(task);
  if (!t) throw ConfigError("config: unknown task " + task);
  c.task = *t;
  const nlohmann::json* stack = o.sub("stack");
  if (!stack) throw ConfigError("config: stack is required");
  c.stack = parse_stack(*stack);
  o.read("seq_len", c.seq_len);
  o.read("batch_size", c.batch_size);
  o.read("microbatch", c.microbatch);
  o.read("max_steps", c.max_steps);
  o.read("epochs", c.epochs);
  o.read("seed", c.seed);
  o.read("eval_every", c.eval_every);
  o.read("eval_size", c.eval_size);
  if (const auto* sb = o.sub("stop_below"); sb && !sb->is_null()) c.stop_below = sb->get<double>();
  if (const auto* cl = o.sub("clip"); cl && !cl->is_null()) {
    if (!cl->is_number()) throw ConfigError("config: clip must be a number");
    c.clip = cl->get<double>();
  }
  std::string placement = "halves";
  o.read("marker_placement", placement);
  if (placement == "halves") c.marker_placement = MarkerPlacement::Halves;
  else if (placement == "anywhere") c.marker_placement = MarkerPlacement::Anywhere;
  else throw ConfigError("config: marker_placement must be halves or anywhere");
  std::string bias = "chrono";
  o.read("bias_init", bias);
  if (bias == "chrono") c.bias_init = BiasInit::Chrono;
  else if (bias == "zero") c.bias_init = BiasInit::Zero;
  else if (bias == "forget-one") c.bias_init = BiasInit::ChronoForgetOne;
  else throw ConfigError("config: bias_init must be chrono, zero or forget-one");

  if (const auto* opt = o.sub("optimizer")) {
    detail::StrictObject oo(*opt, "optimizer");
    oo.read("name", c.optimizer);
    oo.read("lr", c.lr);
    oo.read("beta1", c.beta1);
    oo.read("beta2", c.beta2);
    oo.read("eps", c.eps);
    oo.read("momentum", c.momentum);
    oo.read("weight_decay", c.weight_decay);
    if (const auto* decay = oo.sub("decay")) {
      detail::StrictObject od(*decay, "optimizer.decay");
      od.read("end", c.lr_end);
      od.read("steps", c.lr_decay_steps);
      od.read("power", c.lr_power);
      od.finish();
    }
    oo.finish();
  }
  if (const auto* ins = o.sub("instrument")) {
    detail::StrictObject oi(*ins, "instrument");
    oi.read("layer_grad_norms", c.log_layer_grad_norms);
    oi.read("weight_trace", c.log_weight_trace);
    oi.finish();
  }
  if (const auto* data = o.sub("data")) {
    detail::StrictObject od(*data, "data");
    od.read("dir", c.data.dir);
    od.read("train_images", c.data.train_images);
    od.read("train_labels", c.data.train_labels);
    od.read("test_images", c.data.test_images);
    od.read("test_labels", c.data.test_labels);
    od.read("train_size", c.data.train_size);
    od.read("test_size", c.data.test_size);
    od.read("permutation_seed", c.data.permutation_seed);
    od.finish();
  }
  o.finish();
  c.stack.n_in = c.input_width();
  c.stack.t_max = std::max<Index>(2, c.sequence_length());
  c.validate();
  return c;
}

/// Config as JSON; parse_train_config(to_json(c)) reproduces c.
inline nlohmann::json to_json(const TrainConfig& c) {
  nlohmann::json layers = nlohmann::json::array();
  for (const auto& l : c.stack.layers) {
    nlohmann::json lj = {{"cell", std::string(to_string(l.kind))}, {"hidden", l.n_hidden}};
    if (l.n_in) lj["input"] = *l.n_in;
    layers.push_back(lj);
  }
  auto bias_name = [&] {
    switch (c.bias_init) {
      case BiasInit::Zero: return "zero";
      case BiasInit::Chrono: return "chrono";
      case BiasInit::ChronoForgetOne: return "forget-one";
    }
    return "chrono";
  };
  nlohmann::json j = {
      {"task", std::string(to_string(c.task))},
      {"stack", {{"layers", layers}}},
      {"seq_len", c.seq_len},
      {"batch_size", c.batch_size},
      {"microbatch", c.microbatch},
      {"max_steps", c.max_steps},
      {"epochs", c.epochs},
      {"seed", c.seed},
      {"eval_every", c.eval_every},
      {"eval_size", c.eval_size},
      {"stop_below", c.stop_below ? nlohmann::json(*c.stop_below) : nlohmann::json(nullptr)},
      {"clip", c.clip ? nlohmann::json(*c.clip) : nlohmann::json(nullptr)},
      {"marker_placement", c.marker_placement == MarkerPlacement::Halves ? "halves" : "anywhere"},
      {"bias_init", bias_name()},
      {"optimizer",
       {{"name", c.optimizer},
        {"lr", c.lr},
        {"beta1", c.beta1},
        {"beta2", c.beta2},
        {"eps", c.eps},
        {"momentum", c.momentum},
        {"weight_decay", c.weight_decay},
        {"decay", {{"end", c.lr_end}, {"steps", c.lr_decay_steps}, {"power", c.lr_power}}}}},
      {"instrument",
       {{"layer_grad_norms", c.log_layer_grad_norms}, {"weight_trace", c.log_weight_trace}}},
      {"data",
       {{"dir", c.data.dir},
        {"train_images", c.data.train_images},
        {"train_labels", c.data.train_labels},
        {"test_images", c.data.test_images},
        {"test_labels", c.data.test_labels},
        {"train_size", c.data.train_size},
        {"test_size", c.data.test_size},
        {"permutation_seed", c.data.permutation_seed}}}};
  return j;
}

/// MNIST train and test subsets; empty for the synthetic tasks.
struct TaskData {
  MnistSet train;
  MnistSet test;
};

inline std::string resolve_data_path(const DataConfig& d, const std::string& file) {
  namespace fs = std::filesystem;
  if (fs::path(file).is_absolute()) return file;
  std::string root = d.dir;
  if (root.empty()) {
    if (const char* env = std::getenv("STARLAB_DATA_DIR")) root = env;
  }
  return root.empty() ? file : (fs::path(root) / file).string();
}

/// Loads the MNIST subsets named by the config and applies the pMNIST
/// permutation when asked.
inline TaskData load_task_data(const TrainConfig& c) {
  TaskData td;
  if (!is_mnist(c.task)) return td;
  const DataConfig& d = c.data;
  const MnistSet all =
      load_mnist_idx(resolve_data_path(d, d.train_images), resolve_data_path(d, d.train_labels));
  if (d.test_images.empty()) {
    if (all.size() < d.train_size + d.test_size)
      throw ConfigError("config: dataset has fewer rows than train_size + test_size");
    td.train = mnist_slice(all, 0, d.train_size);
    td.test = mnist_slice(all, d.train_size, d.test_size);
  } else {
    if (all.size() < d.train_size) throw ConfigError("config: dataset smaller than train_size");
    td.train = mnist_slice(all, 0, d.train_size);
    const MnistSet test =
        load_mnist_idx(resolve_data_path(d, d.test_images), resolve_data_path(d, d.test_labels));
    if (test.size() < d.test_size) throw ConfigError("config: test set smaller than test_size");
    td.test = mnist_slice(test, 0, d.test_size);
  }
  if (c.task == TaskKind::PermutedMnist) {
    td.train = permute_pixels(td.train, d.permutation_seed);
    td.test = permute_pixels(td.test, d.permutation_seed);
  }
  return td;
}

inline Model build_model(const TrainConfig& c) {
  Rng rng(c.seed, 0);
  Model m;
  m.lattice = build(c.stack, c.bias_init, rng);
  m.head = init_head(c.outputs(), c.stack.layers.back().n_hidden, c.head_attach(), rng);
  return m;
}

struct TrainSummary {
  std::uint64_t steps = 0;
  bool diverged = false;
  std::string reason;
  std::optional<LossEval> final_eval;
  std::vector<double> step_losses;
  Model model;
};

using MetricSink = std::function<void(const nlohmann::json&)>;

namespace detail {

inline nlohmann::json eval_record(std::uint64_t step, Index epoch, const LossEval& ev) {
  nlohmann::json e = {{"loss", ev.loss}};
  if (ev.counted > 0) e["accuracy"] = ev.accuracy();
  return {{"step", step}, {"epoch", epoch}, {"eval", e}};
}

}  // namespace detail

/// Minibatch loop: forward, head and loss, backward, optional clipping, then
/// the optimizer step. Emits one record per step and one per evaluation.
/// A non-finite loss or gradient ends the run with a `diverged` record.
inline TrainSummary train_run(const TrainConfig& cfg, const TaskData& data, const MetricSink& sink) {
  cfg.validate();
  if (is_mnist(cfg.task) && data.train.size() == 0)
    throw ConfigError("train: MNIST task without data");
  TrainSummary out;
  out.model = build_model(cfg);
  Model& m = out.model;
  AdamState adam;
  adam.beta1 = cfg.beta1;
  adam.beta2 = cfg.beta2;
  adam.eps = cfg.eps;
  SgdMomentumState sgd;
  sgd.momentum = cfg.momentum;
  sgd.weight_decay = cfg.weight_decay;
  const LrSchedule schedule{cfg.lr, cfg.lr_end, cfg.lr_decay_steps, cfg.lr_power};

  Rng data_rng(cfg.seed, 2);
  Rng eval_rng(cfg.seed, 3);
  Rng shuffle_rng(cfg.seed, 4);

  Batch eval_batch;
  if (cfg.task == TaskKind::Adding)
    eval_batch = gen_adding(eval_rng, cfg.eval_size, cfg.seq_len, cfg.marker_placement);
  else if (cfg.task == TaskKind::Copy)
    eval_batch = gen_copy(eval_rng, cfg.eval_size, cfg.seq_len);
  else if (data.test.size() > 0) {
    std::vector<Index> rows(static_cast<std::size_t>(data.test.size()));
    std::iota(rows.begin(), rows.end(), Index{0});
    eval_batch = mnist_batch(data.test, rows);
  }
  const Index eval_chunk = std::max<Index>(cfg.microbatch, cfg.batch_size);

  auto evaluate = [&](std::uint64_t step, Index epoch) {
    if (eval_batch.inputs.empty()) return false;
    const LossEval ev = evaluate_loss(m, eval_batch, eval_chunk);
    out.final_eval = ev;
    sink(detail::eval_record(step, epoch, ev));
    return cfg.stop_below && ev.loss < *cfg.stop_below;
  };

  auto diverge = [&](std::uint64_t step, Index epoch, const std::string& why) {
    out.diverged = true;
    out.reason = why;
    sink({{"step", step}, {"epoch", epoch}, {"diverged", true}, {"reason", why}});
  };

  // Returns false when training must stop.
  auto train_step = [&](const Batch& batch, std::uint64_t step, Index epoch) {
    GradientEval ge = compute_gradients(m, batch, cfg.microbatch);
    out.step_losses.push_back(ge.loss);
    nlohmann::json rec = {{"step", step}, {"epoch", epoch}};
    if (!std::isfinite(ge.loss)) {
      diverge(step, epoch, "non-finite loss");
      return false;
    }
    rec["loss"] = ge.loss;
    if (cfg.log_layer_grad_norms) rec["layer_grad_norms"] = layer_grad_norms(ge.grads.cells);
    if (cfg.log_weight_trace) {
      rec["weight_norms"] = normalized_weight_norms(m.lattice);
      // Hidden-state means on the first microbatch keep memory flat.
      const Index cols = cfg.microbatch > 0 ? std::min(cfg.microbatch, batch.batch_size())
                                            : batch.batch_size();
      const Batch probe = slice_batch(batch, 0, cols);
      rec["mean_hidden"] = mean_hidden_state(forward_sequence(m.lattice, probe.inputs));
    }
    auto params = parameter_spans(m);
    auto grads = gradient_spans(ge.grads);
    try {
      require_finite(grads);
      if (cfg.clip) rec["grad_norm"] = clip_global_norm(grads, *cfg.clip);
      if (cfg.optimizer == "adam") {
        adam.lr = schedule.at(step - 1);
        adam_step(adam, params, grads);
      } else {
        sgd.lr = schedule.at(step - 1);
        sgd_momentum_step(sgd, params, grads);
      }
    } catch (const NonFiniteGradient& e) {
      sink(rec);
      diverge(step, epoch, e.what());
      return false;
    }
    sink(rec);
    out.steps = step;
    return true;
  };

  if (!is_mnist(cfg.task)) {
    for (std::uint64_t step = 1; step <= cfg.max_steps; ++step) {
      const Batch batch = cfg.task == TaskKind::Adding
                              ? gen_adding(data_rng, cfg.batch_size, cfg.seq_len, cfg.marker_placement)
                              : gen_copy(data_rng, cfg.batch_size, cfg.seq_len);
      if (!train_step(batch, step, 0)) return out;
      const bool last = step == cfg.max_steps;
      if ((cfg.eval_every > 0 && step % cfg.eval_every == 0) || last) {
        if (evaluate(step, 0)) return out;
      }
    }
    return out;
  }

  std::uint64_t step = 0;
  std::vector<Index> order(static_cast<std::size_t>(data.train.size()));
  std::iota(order.begin(), order.end(), Index{0});
  for (Index epoch = 0; epoch < cfg.epochs; ++epoch) {
    for (std::size_t i = order.size(); i > 1; --i)
      std::swap(order[i - 1], order[shuffle_rng.below(static_cast<std::uint32_t>(i))]);
    for (std::size_t first = 0; first < order.size(); first += static_cast<std::size_t>(cfg.batch_size)) {
      const std::size_t count = std::min(order.size() - first, static_cast<std::size_t>(cfg.batch_size));
      const Batch batch = mnist_batch(data.train, std::span<const Index>(order).subspan(first, count));
      ++step;
      if (!train_step(batch, step, epoch)) return out;
      if (cfg.eval_every > 0 && step % cfg.eval_every == 0 && evaluate(step, epoch)) return out;
    }
    if (evaluate(step, epoch)) return out;
  }
  return out;
}

}  // namespace starlab
