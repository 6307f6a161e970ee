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

// starlab command-line entry point: analyze, simulate, train, gradcheck and
// replay. Every artifact is written next to a run manifest from which the run
// can be repeated.

#include "starlab/analysis.hpp"
#include "starlab/checkpoint.hpp"
#include "starlab/gradcheck.hpp"
#include "starlab/heatmap.hpp"
#include "starlab/train.hpp"

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

namespace fs = std::filesystem;
using nlohmann::json;
using namespace starlab;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitRuntime = 1;
constexpr int kExitUsage = 2;
constexpr const char* kVersion = "0.1.0";

class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class RuntimeFailure : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct RunOutput {
  std::vector<std::string> files;  // relative to the output directory
  json extra = json::object();
};

void write_text(const fs::path& p, const std::string& s) {
  std::ofstream f(p, std::ios::binary);
  if (!f) throw RuntimeFailure("cannot write " + p.string());
  f << s;
}

CellKind cell_or_usage(const std::string& s) {
  const auto k = parse_cell_kind(s);
  if (!k) throw UsageError("unknown cell kind '" + s + "' (vrnn, lstm, lstmwf, gru, star)");
  return *k;
}

std::vector<CellKind> cells_or_all(const std::string& s) {
  if (s == "all") return {std::begin(kAllCellKinds), std::end(kAllCellKinds)};
  return {cell_or_usage(s)};
}

template <typename T>
T get_or(const json& j, const char* key, T fallback) {
  return j.contains(key) ? j.at(key).get<T>() : fallback;
}

// ---------------------------------------------------------------- analyze

RunOutput run_analyze(const json& cfg, const fs::path& out) {
  const auto cells = cells_or_all(cfg.at("cell").get<std::string>());
  const Index n = cfg.at("hidden").get<Index>();
  const Index trials = cfg.at("trials").get<Index>();
  const std::string format = cfg.at("format").get<std::string>();
  if (n < 2) throw UsageError("--hidden must be >= 2");
  if (trials < 1) throw UsageError("--trials must be >= 1");

  std::vector<FixedPointReport> reports;
  for (CellKind k : cells) {
    Rng rng(cfg.at("seed").get<std::uint64_t>(), static_cast<std::uint64_t>(k));
    reports.push_back(fixed_point_report(k, n, trials, rng));
  }
  std::printf("%-8s %10s %10s %12s %12s\n", "cell", "sv(J)", "sv(H)", "f_uncorr", "f_corr");
  for (const auto& r : reports)
    std::printf("%-8s %10.6f %10.6f %12.6f %12.6f\n", std::string(to_string(r.kind)).c_str(), r.mean_sv_J,
                r.mean_sv_H, r.factor_uncorrelated, r.factor_correlated);

  RunOutput ro;
  if (format == "csv") {
    std::string s = "cell,n,trials,mean_sv_J,mean_sv_H,factor_uncorrelated,factor_correlated\n";
    for (const auto& r : reports)
      s += std::string(to_string(r.kind)) + ',' + std::to_string(r.n) + ',' + std::to_string(r.trials) + ',' +
           GradientField::fmt(r.mean_sv_J) + ',' + GradientField::fmt(r.mean_sv_H) + ',' +
           GradientField::fmt(r.factor_uncorrelated) + ',' + GradientField::fmt(r.factor_correlated) + '\n';
    write_text(out / "analyze.csv", s);
    ro.files.push_back("analyze.csv");
  } else {
    json arr = json::array();
    for (const auto& r : reports)
      arr.push_back({{"cell", std::string(to_string(r.kind))},
                     {"n", r.n},
                     {"trials", r.trials},
                     {"mean_sv_J", r.mean_sv_J},
                     {"mean_sv_H", r.mean_sv_H},
                     {"factor_uncorrelated", r.factor_uncorrelated},
                     {"factor_correlated", r.factor_correlated}});
    write_text(out / "analyze.json", arr.dump(2) + "\n");
    ro.files.push_back("analyze.json");
  }
  return ro;
}

// --------------------------------------------------------------- simulate

RunOutput run_simulate(const json& cfg, const fs::path& out) {
  SimConfig sim;
  const Index steps = cfg.at("steps").get<Index>();
  const std::string input = cfg.at("input").get<std::string>();
  if (steps < 1) throw UsageError("--steps must be >= 1");
  if (cfg.at("runs").get<std::int64_t>() < 1) throw UsageError("--runs must be >= 1");
  const Index n_in = input == "mnist" ? 1 : cfg.at("n_in").get<Index>();
  const Index t_max = std::max<Index>(2, input == "mnist" ? 784 : steps);
  try {
    if (cfg.contains("stack") && !cfg.at("stack").is_null()) {
      sim.stack = parse_stack(cfg.at("stack"));
    } else {
      const Index layers = cfg.at("layers").get<Index>();
      if (layers < 1) throw UsageError("--layers must be >= 1");
      sim.stack = StackSpec::uniform(cell_or_usage(cfg.at("cell").get<std::string>()), layers, n_in,
                                     cfg.at("hidden").get<Index>(), t_max);
    }
  } catch (const ConfigError& e) {
    throw UsageError(e.what());
  }
  sim.stack.n_in = n_in;
  sim.stack.t_max = t_max;
  sim.steps = steps;
  sim.runs = cfg.at("runs").get<std::uint64_t>();
  sim.seed = cfg.at("seed").get<std::uint64_t>();
  sim.threads = cfg.at("threads").get<unsigned>();
  sim.record_path_cosine = get_or(cfg, "path_cosine", false);
  const auto mode = parse_loss_mode(cfg.at("loss").get<std::string>());
  if (!mode) throw UsageError("--loss must be final, all or mean");
  sim.loss_mode = *mode;

  MnistSet set;
  if (input == "mnist") {
    DataConfig d;
    const std::string images = resolve_data_path(d, cfg.at("mnist_images").get<std::string>());
    const std::string labels = resolve_data_path(d, cfg.at("mnist_labels").get<std::string>());
    try {
      set = load_mnist_idx(images, labels);
    } catch (const IdxError& e) {
      throw RuntimeFailure(std::string("MNIST data: ") + e.what());
    }
    sim.input = MnistInput{&set};
  } else if (input == "ar1") {
    sim.input = Ar1Input{cfg.at("alpha").get<double>()};
  } else {
    throw UsageError("--input must be ar1 or mnist");
  }
  try {
    sim.validate();
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  }

  const GradientField field = simulate_gradient_field(sim);
  RunOutput ro;
  {
    std::ofstream f(out / "field.csv", std::ios::binary);
    field.write_csv(f);
    std::ofstream g(out / "field_normalized_std.csv", std::ios::binary);
    field.write_normalized_std_csv(g);
    ro.files = {"field.csv", "field_normalized_std.csv"};
  }
  if (sim.record_path_cosine) {
    std::ofstream f(out / "path_cosine.csv", std::ios::binary);
    f << "layer,t,mean_cosine\n";
    for (Index l = 0; l < field.layers(); ++l)
      for (Index t = 0; t < field.steps(); ++t)
        f << l + 1 << ',' << t + 1 << ',' << GradientField::fmt(field.path_cosine(l, t).mean) << '\n';
    ro.files.push_back("path_cosine.csv");
  }
  if (get_or(cfg, "heatmap", false)) {
    HeatmapOptions opt;
    opt.title = "mean parameter-gradient norm (log10)";
    write_heatmap((out / "field.svg").string(), field, opt);
    ro.files.push_back("field.svg");
  }
  const double ratio = layer_ratio(field);
  ro.extra["layer_ratio_last_step"] = ratio;
  std::printf("layers=%lld steps=%lld runs=%llu  mean|g|(l=1,t=T)/mean|g|(l=L,t=T) = %.6g\n",
              static_cast<long long>(field.layers()), static_cast<long long>(field.steps()),
              static_cast<unsigned long long>(sim.runs), ratio);
  return ro;
}

// ------------------------------------------------------------------ train

RunOutput run_train(const json& cfg_json, const fs::path& out) {
  TrainConfig cfg;
  try {
    cfg = parse_train_config(cfg_json);
  } catch (const ConfigError& e) {
    throw UsageError(e.what());
  }
  TaskData data;
  try {
    data = load_task_data(cfg);
  } catch (const IdxError& e) {
    throw RuntimeFailure(std::string("dataset: ") + e.what());
  } catch (const ConfigError& e) {
    throw RuntimeFailure(e.what());
  }
  std::ofstream metrics(out / "metrics.jsonl", std::ios::binary);
  if (!metrics) throw RuntimeFailure("cannot write metrics.jsonl");
  const TrainSummary s = train_run(cfg, data, [&](const json& rec) { metrics << rec.dump() << '\n'; });
  metrics.close();
  RunOutput ro;
  ro.files.push_back("metrics.jsonl");
  save_checkpoint((out / "model.ckpt").string(), s.model);
  ro.files.push_back("model.ckpt");
  ro.extra["steps"] = s.steps;
  if (cfg.task == TaskKind::PermutedMnist) ro.extra["permutation_seed"] = cfg.data.permutation_seed;
  if (s.final_eval) {
    ro.extra["final_eval_loss"] = s.final_eval->loss;
    std::printf("steps=%llu  eval loss=%.6g", static_cast<unsigned long long>(s.steps), s.final_eval->loss);
    if (s.final_eval->counted > 0) std::printf("  accuracy=%.4f", s.final_eval->accuracy());
    std::printf("\n");
  }
  if (s.diverged) {
    ro.extra["diverged"] = s.reason;
    std::fprintf(stderr, "training diverged: %s\n", s.reason.c_str());
  }
  return ro;
}

// -------------------------------------------------------------- gradcheck

RunOutput run_gradcheck(const json& cfg, bool corrupt, bool& passed) {
  const auto cells = cells_or_all(cfg.at("cell").get<std::string>());
  const Index trials = cfg.at("trials").get<Index>();
  const double eps = cfg.at("eps").get<double>();
  if (trials < 1) throw UsageError("--trials must be >= 1");
  if (!(eps >= 1e-7 && eps <= 1e-3)) throw UsageError("--eps must lie in [1e-7, 1e-3]");
  CellOps ops;
  if (corrupt) {
    ops.backward = [](const CellParams& p, const ForwardCache& fc, const Mat& gh, const Mat& gc,
                      CellGrads& g) {
      CellBackward b = backward_into(p, fc, gh, gc, g);
      b.g_h_prev *= 1.01;
      return b;
    };
  }
  passed = true;
  RunOutput ro;
  for (CellKind k : cells) {
    Rng rng(cfg.at("seed").get<std::uint64_t>(), static_cast<std::uint64_t>(k));
    const GradCheckResult r = grad_check(k, trials, eps, rng, ops);
    const bool ok = r.max_rel_error < 1e-5;
    passed = passed && ok;
    std::printf("%-8s %s  max rel error %.3e over %lld derivatives (worst: %s)\n",
                std::string(to_string(k)).c_str(), ok ? "PASS" : "FAIL", r.max_rel_error,
                static_cast<long long>(r.checked), r.worst.c_str());
    ro.extra[std::string(to_string(k))] = r.max_rel_error;
  }
  return ro;
}

// --------------------------------------------------------------- manifest

int execute(const std::string& sub, const json& cfg, const fs::path& out, bool corrupt = false) {
  fs::create_directories(out);
  const auto t0 = std::chrono::steady_clock::now();
  RunOutput ro;
  bool passed = true;
  if (sub == "analyze") ro = run_analyze(cfg, out);
  else if (sub == "simulate") ro = run_simulate(cfg, out);
  else if (sub == "train") ro = run_train(cfg, out);
  else if (sub == "gradcheck") ro = run_gradcheck(cfg, corrupt, passed);
  else throw UsageError("manifest names unknown subcommand '" + sub + "'");
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

  json manifest = {{"format", "starlab-run-manifest"},
                   {"version", 1},
                   {"starlab_version", kVersion},
                   {"subcommand", sub},
                   {"config", cfg},
                   {"seed", cfg.at("seed")},
                   {"outputs", ro.files},
                   {"results", ro.extra},
                   {"timings", {{"wall_seconds", secs}}}};
  write_text(out / (sub + ".manifest.json"), manifest.dump(2) + "\n");
  if (ro.extra.contains("diverged")) return kExitRuntime;
  return passed ? kExitOk : kExitRuntime;
}

json read_json_file(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw UsageError("cannot open " + path);
  try {
    return json::parse(f);
  } catch (const json::parse_error& e) {
    throw UsageError(path + ": " + e.what());
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"starlab: gradient propagation in deep recurrent lattices"};
  app.require_subcommand(1);
  app.set_version_flag("--version", kVersion);

  std::string out_dir = ".";
  std::uint64_t seed = 1;

  // analyze
  auto* an = app.add_subcommand("analyze", "fixed-point Jacobian singular values");
  std::string an_cell = "all";
  Index an_hidden = 128, an_trials = 50;
  bool an_json = false, an_csv = false;
  an->add_option("--cell", an_cell, "cell kind or 'all'");
  an->add_option("--hidden", an_hidden, "hidden units");
  an->add_option("--trials", an_trials, "orthogonal draws to average");
  an->add_option("--seed", seed);
  auto* fj = an->add_flag("--json", an_json, "JSON report (default)");
  an->add_flag("--csv", an_csv, "CSV report")->excludes(fj);
  an->add_option("--out", out_dir, "output directory");

  // simulate
  auto* si = app.add_subcommand("simulate", "Monte-Carlo gradient field on the lattice");
  std::string si_cell = "star", si_stack, si_loss = "final", si_input = "ar1";
  std::string si_images = "train-images-idx3-ubyte", si_labels = "train-labels-idx1-ubyte";
  Index si_layers = 12, si_steps = 50, si_hidden = 128, si_n_in = 1;
  std::int64_t si_runs = 100;
  double si_alpha = 0.5;
  unsigned si_threads = std::max(1u, std::thread::hardware_concurrency());
  bool si_heatmap = false, si_cosine = false;
  auto* sc = si->add_option("--cell", si_cell, "cell kind for a uniform stack");
  si->add_option("--stack", si_stack, "JSON stack file (heterogeneous stacks)")->excludes(sc);
  si->add_option("--layers", si_layers);
  si->add_option("--steps", si_steps);
  si->add_option("--hidden", si_hidden);
  si->add_option("--n-in", si_n_in, "AR(1) input width");
  si->add_option("--runs", si_runs);
  si->add_option("--loss", si_loss, "final, all or mean");
  si->add_option("--input", si_input, "ar1 or mnist");
  si->add_option("--alpha", si_alpha, "AR(1) coefficient");
  si->add_option("--mnist-images", si_images);
  si->add_option("--mnist-labels", si_labels);
  si->add_option("--seed", seed);
  si->add_option("--threads", si_threads);
  si->add_flag("--heatmap", si_heatmap, "also write field.svg");
  si->add_flag("--path-cosine", si_cosine, "record the cosine between vertical and temporal terms");
  si->add_option("--out", out_dir, "output directory");

  // train
  auto* tr = app.add_subcommand("train", "train a stack on a task");
  std::string tr_task, tr_config;
  tr->add_option("--task", tr_task, "adding, copy, mnist or pmnist");
  tr->add_option("--config", tr_config, "JSON config file")->required();
  tr->add_option("--out", out_dir, "output directory");

  // gradcheck
  auto* gc = app.add_subcommand("gradcheck", "finite-difference check of the cell backward passes");
  std::string gc_cell = "all";
  Index gc_trials = 100;
  double gc_eps = 1e-5;
  bool gc_corrupt = false;
  gc->add_option("--cell", gc_cell, "cell kind or 'all'");
  gc->add_option("--trials", gc_trials);
  gc->add_option("--eps", gc_eps);
  gc->add_option("--seed", seed);
  gc->add_option("--out", out_dir, "output directory");
#ifdef STARLAB_GRADCHECK_SELFTEST
  gc->add_flag("--corrupt", gc_corrupt, "perturb the backward pass (harness self-test)");
#endif

  // replay
  auto* rp = app.add_subcommand("replay", "re-run from a run manifest");
  std::string rp_manifest;
  rp->add_option("manifest", rp_manifest)->required();
  rp->add_option("--out", out_dir, "output directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitUsage;
  }

  try {
    if (*an) {
      json cfg = {{"cell", an_cell},
                  {"hidden", an_hidden},
                  {"trials", an_trials},
                  {"seed", seed},
                  {"format", an_csv ? "csv" : "json"}};
      return execute("analyze", cfg, out_dir);
    }
    if (*si) {
      json cfg = {{"cell", si_cell},     {"layers", si_layers}, {"steps", si_steps},   {"hidden", si_hidden},
                  {"n_in", si_n_in},     {"runs", si_runs},     {"loss", si_loss},     {"input", si_input},
                  {"alpha", si_alpha},   {"seed", seed},        {"threads", si_threads},
                  {"heatmap", si_heatmap}, {"path_cosine", si_cosine}, {"stack", nullptr}};
      if (si_input == "mnist") {
        cfg["mnist_images"] = si_images;
        cfg["mnist_labels"] = si_labels;
      }
      if (!si_stack.empty()) cfg["stack"] = read_json_file(si_stack);
      return execute("simulate", cfg, out_dir);
    }
    if (*tr) {
      json raw = read_json_file(tr_config);
      if (!tr_task.empty()) {
        if (raw.contains("task") && raw.at("task") != tr_task)
          throw UsageError("--task " + tr_task + " conflicts with the config's task");
        raw["task"] = tr_task;
      }
      TrainConfig cfg;
      try {
        cfg = parse_train_config(raw);
      } catch (const ConfigError& e) {
        throw UsageError(e.what());
      }
      return execute("train", to_json(cfg), out_dir);
    }
    if (*gc) {
      json cfg = {{"cell", gc_cell}, {"trials", gc_trials}, {"eps", gc_eps}, {"seed", seed}};
      return execute("gradcheck", cfg, out_dir, gc_corrupt);
    }
    if (*rp) {
      const json m = read_json_file(rp_manifest);
      if (!m.contains("subcommand") || !m.contains("config"))
        throw UsageError(rp_manifest + " is not a run manifest");
      return execute(m.at("subcommand").get<std::string>(), m.at("config"), out_dir);
    }
  } catch (const UsageError& e) {
    std::fprintf(stderr, "usage error: %s\n", e.what());
    return kExitUsage;
  } catch (const json::exception& e) {
    std::fprintf(stderr, "usage error: %s\n", e.what());
    return kExitUsage;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitRuntime;
  }
  return kExitUsage;
}
