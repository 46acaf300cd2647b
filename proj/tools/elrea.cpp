/* Copyright (c) 2026 The elrea Authors. All Rights Reserved.

Licensed under the Apache License, Version 2.0 (the "License");
you may not use this file except in compliance with the License.
You may obtain a copy of the License at

    http://www.apache.org/licenses/LICENSE-2.0

Unless required by applicable law or agreed to in writing, software
distributed under the License is distributed on an "AS IS" BASIS,
WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
See the License for the specific language governing permissions and
limitations under the License. */

// elrea <subcommand> --config <path> [--seed N] [--top-k K] [--method M]

#include "elrea/pipeline.hpp"

#include <CLI11.hpp>

namespace {

std::string method_help() {
  std::string s;
  for (const auto& m : elrea::method_names()) s += (s.empty() ? "" : "|") + m;
  return s;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Gradient-clustered LoRA expert ensembles"};
  app.require_subcommand(1);

  std::string config_path;
  std::optional<std::int64_t> seed;
  int top_k = -1;
  std::string method;
  bool quiet = false;

  auto common = [&](CLI::App* sub) {
    sub->add_option("-c,--config", config_path, "config file")->required()->check(CLI::ExistingFile);
    sub->add_option("--seed", seed, "master seed (overrides the config)");
    sub->add_flag("-q,--quiet", quiet, "no progress lines");
  };

  const std::vector<std::pair<std::string, std::string>> plain = {
      {"data", "build train/test/pretraining splits"},
      {"pretrain", "pretrain the backbone"},
      {"train-base", "fine-tune the base adapter on all training data"},
      {"grad-features", "projected gradient features for train and test"},
      {"cluster", "BIRCH clustering with rebalancing"},
      {"train-experts", "fine-tune one expert per cluster"},
      {"route", "routing weights for every test instance"},
      {"report", "cluster distribution, routing profile, method summary, timing table"},
      {"run-all", "every stage, enabled baselines, report"},
  };
  std::map<std::string, CLI::App*> subs;
  for (const auto& [name, help] : plain) {
    subs[name] = app.add_subcommand(name, help);
    common(subs[name]);
  }

  auto* gen = app.add_subcommand("generate", "decode the test set with one method");
  common(gen);
  gen->add_option("--method", method, method_help())->required()->check(CLI::IsMember(elrea::method_names()));
  gen->add_option("--top-k", top_k, "keep the k largest expert weights (0: all)")->check(CLI::NonNegativeNumber);

  auto* eval = app.add_subcommand("evaluate", "exact-match accuracy with deltas against base");
  common(eval);
  eval->add_option("--method", method, method_help())->required()->check(CLI::IsMember(elrea::method_names()));
  eval->add_option("--top-k", top_k, "evaluate the top-k generations")->check(CLI::NonNegativeNumber);

  std::string baseline;
  auto* base = app.add_subcommand("baseline", "train a baseline (mole, lora-ens, random-cluster)");
  common(base);
  base->add_option("name", baseline, "baseline name")->required()->check(CLI::IsMember(elrea::baseline_names()));

  std::string split = "train";
  std::string out;
  auto* exp = app.add_subcommand("export-features", "write a feature matrix as CSV");
  common(exp);
  exp->add_option("--split", split, "train or test")->check(CLI::IsMember({"train", "test"}));
  exp->add_option("-o,--out", out, "output CSV")->required();

  std::string run_a, run_b;
  auto* cmp = app.add_subcommand("compare-runs", "list artifacts that differ between two run directories");
  cmp->add_option("a", run_a)->required()->check(CLI::ExistingDirectory);
  cmp->add_option("b", run_b)->required()->check(CLI::ExistingDirectory);

  CLI11_PARSE(app, argc, argv);

  try {
    if (cmp->parsed()) {
      const auto diff = elrea::compare_run_dirs(run_a, run_b);
      for (const auto& d : diff) std::cout << d << "\n";
      std::cerr << (diff.empty() ? "identical\n" : std::to_string(diff.size()) + " artifact(s) differ\n");
      return diff.empty() ? 0 : 1;
    }

    auto cfg = elrea::load_config(config_path);
    if (seed) cfg.seed = *seed;
    if (gen->parsed() && top_k >= 0) cfg.top_k = top_k;
    elrea::Pipeline p(cfg, quiet ? nullptr : &std::cerr);
    if (!quiet) std::cerr << "config " << p.hash() << ", run dir " << p.root().string() << "\n";

    if (subs["data"]->parsed()) p.data();
    else if (subs["pretrain"]->parsed()) p.pretrain();
    else if (subs["train-base"]->parsed()) p.train_base();
    else if (subs["grad-features"]->parsed()) p.grad_features();
    else if (subs["cluster"]->parsed()) p.cluster();
    else if (subs["train-experts"]->parsed()) p.train_experts();
    else if (subs["route"]->parsed()) p.route();
    else if (subs["report"]->parsed()) p.report();
    else if (subs["run-all"]->parsed()) p.run_all();
    else if (base->parsed()) p.baseline(baseline);
    else if (gen->parsed()) std::cout << p.generate(method) << "\n";
    else if (eval->parsed()) {
      const auto label = elrea::Pipeline::method_label(method, top_k < 0 ? 0 : top_k);
      p.evaluate(label);
      std::cout << elrea::read_file(p.dir("evaluate-" + label) / "eval.csv");
    } else if (exp->parsed()) {
      p.export_features(split, out);
    }
  } catch (const elrea::Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 0;
}
