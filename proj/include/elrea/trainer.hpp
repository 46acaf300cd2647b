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

// Adam fine-tuning of an adapter with per-epoch checkpoints and optimizer
// snapshots.

#pragma once

#include "elrea/checkpoint.hpp"
#include "elrea/transformer.hpp"

#include <cstdio>
#include <functional>
#include <optional>

namespace elrea {

struct AdamHyper {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Linear decay from lr0 to zero over total_steps; step t (1-based) uses
/// lr0 * (total_steps - t + 1) / total_steps.
struct LinearSchedule {
  double lr0 = 5e-5;
  std::uint64_t total_steps = 1;

  double at(std::uint64_t step) const {
    require(step >= 1, ErrorCode::kInvalidArgument, "schedule steps are 1-based");
    if (step > total_steps) return 0.0;
    return lr0 * static_cast<double>(total_steps - step + 1) / static_cast<double>(total_steps);
  }
};

struct AdamState {
  std::uint64_t step = 0;
  Vector m;
  Vector v;
  AdamHyper hyper;
  LinearSchedule schedule;

  static AdamState fresh(Eigen::Index dim, AdamHyper hyper = {}, LinearSchedule schedule = {}) {
    return {0, Vector::Zero(dim), Vector::Zero(dim), hyper, schedule};
  }

  bool operator==(const AdamState& o) const {
    return step == o.step && m.size() == o.m.size() && v.size() == o.v.size() && m == o.m && v == o.v &&
           hyper.beta1 == o.hyper.beta1 && hyper.beta2 == o.hyper.beta2 && hyper.eps == o.hyper.eps &&
           schedule.lr0 == o.schedule.lr0 && schedule.total_steps == o.schedule.total_steps;
  }
};

struct AdamStepResult {
  AdamState state;
  Vector params;
  Vector update;  // params_new - params_old
  double lr = 0.0;
};

/// One bias-corrected Adam step at the state's scheduled learning rate (or
/// `lr_override` when given).
inline AdamStepResult adam_step(const AdamState& state, const Vector& grad, const Vector& params,
                                std::optional<double> lr_override = std::nullopt) {
  require(grad.size() == params.size() && grad.size() == state.m.size() && grad.size() == state.v.size(),
          ErrorCode::kShapeMismatch, "adam_step dimensions disagree");
  AdamStepResult r{state, {}, {}, 0.0};
  AdamState& s = r.state;
  s.step += 1;
  r.lr = lr_override ? *lr_override : s.schedule.at(s.step);
  const double t = static_cast<double>(s.step);
  s.m = s.hyper.beta1 * s.m + (1.0 - s.hyper.beta1) * grad;
  s.v = s.hyper.beta2 * s.v + (1.0 - s.hyper.beta2) * grad.cwiseProduct(grad);
  const double c1 = 1.0 - std::pow(s.hyper.beta1, t);
  const double c2 = 1.0 - std::pow(s.hyper.beta2, t);
  r.update = -r.lr * ((s.m / c1).array() / ((s.v / c2).array().sqrt() + s.hyper.eps)).matrix();
  r.params = params + r.update;
  return r;
}

inline void save_adam_state(const std::filesystem::path& path, const AdamState& s, const Json& provenance = {}) {
  TensorArchive archive;
  archive.meta["kind"] = "adam-state";
  archive.meta["step"] = s.step;
  archive.meta["beta1"] = s.hyper.beta1;
  archive.meta["beta2"] = s.hyper.beta2;
  archive.meta["eps"] = s.hyper.eps;
  archive.meta["lr0"] = s.schedule.lr0;
  archive.meta["total_steps"] = s.schedule.total_steps;
  archive.meta["provenance"] = provenance.is_null() ? Json::object() : provenance;
  archive.arrays.emplace_back("m", s.m);
  archive.arrays.emplace_back("v", s.v);
  write_archive(path, archive);
}

inline AdamState load_adam_state(const std::filesystem::path& path) {
  TensorArchive a = read_archive(path);
  require(a.meta.value("kind", "") == "adam-state" && a.arrays.size() == 2, ErrorCode::kParse,
          path.string() + ": not an optimizer snapshot");
  AdamState s;
  s.step = a.meta.at("step").get<std::uint64_t>();
  s.hyper = {a.meta.at("beta1").get<double>(), a.meta.at("beta2").get<double>(), a.meta.at("eps").get<double>()};
  s.schedule = {a.meta.at("lr0").get<double>(), a.meta.at("total_steps").get<std::uint64_t>()};
  s.m = a.arrays[0].second.reshaped();
  s.v = a.arrays[1].second.reshaped();
  return s;
}

enum class TrainMask { kResponse, kFull };

inline LossMask train_mask(const TokenSequence& seq, TrainMask kind) {
  return kind == TrainMask::kResponse ? response_mask(seq) : full_mask(seq);
}

struct TrainConfig {
  int epochs = 2;
  double lr = 5e-5;
  int batch = 16;
  std::uint64_t seed = 0;
  TrainMask mask = TrainMask::kResponse;
  AdamHyper hyper;
};

struct EpochRecord {
  int epoch = 0;  // 1-based
  LoraAdapter adapter;
  AdamState state;
  double mean_lr = 0.0;   // average scheduled rate over the epoch's steps
  double final_lr = 0.0;  // rate of the epoch's last step
  std::vector<double> step_losses;  // mean per-sequence loss of each batch
  std::vector<double> step_lrs;

  double mean_loss() const {
    double s = 0.0;
    for (double l : step_losses) s += l;
    return step_losses.empty() ? 0.0 : s / static_cast<double>(step_losses.size());
  }
};

struct TrainRun {
  std::vector<EpochRecord> epochs;
  double seconds = 0.0;
};

/// Seeded per-epoch permutation of [0, n).
inline std::vector<std::size_t> epoch_order(std::size_t n, std::uint64_t seed, int epoch) {
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  Rng rng(hash_combine(derive_seed(seed, "shuffle"), static_cast<std::uint64_t>(epoch)));
  rng.shuffle(order);
  return order;
}

inline std::uint64_t steps_per_epoch(std::size_t n, int batch) {
  return (n + static_cast<std::size_t>(batch) - 1) / static_cast<std::size_t>(batch);
}

/// Mean over the batch of per-sequence adapter gradients; returns the mean loss.
inline double batch_gradient(const ParameterStore& backbone, const LoraAdapter& adapter,
                             std::span<const TokenSequence* const> batch, std::span<const LossMask> masks,
                             std::span<const RunOptions> opts, Vector& out) {
  const auto mix = AdapterMix::single(adapter);
  const WrtSelector wrt{false, true, false};
  Gradients g = zero_gradients(backbone, mix, wrt);
  double loss = 0.0;
  for (std::size_t i = 0; i < batch.size(); ++i)
    loss += accumulate_gradient(backbone, mix, *batch[i], masks[i], wrt, g, opts.empty() ? RunOptions{} : opts[i]);
  out = flatten(g.adapter) / static_cast<double>(batch.size());
  return loss / static_cast<double>(batch.size());
}

/// Where to pick up training: after `completed_epochs` with this adapter and
/// optimizer snapshot.
struct TrainResume {
  int completed_epochs = 0;
  LoraAdapter adapter;
  AdamState state;
};

using EpochCallback = std::function<void(const EpochRecord&)>;

/// Fine-tunes only the adapter; the backbone stays frozen. Sequences whose
/// training mask is empty (no response tokens) are skipped by the caller.
inline TrainRun train(const ParameterStore& backbone, const LoraAdapter& init, std::span<const TokenSequence> data,
                      const TrainConfig& cfg, const EpochCallback& on_epoch = {},
                      const std::optional<TrainResume>& resume = std::nullopt, int stop_after_epoch = 0) {
  require(!data.empty(), ErrorCode::kEmptyDataset, "training set is empty");
  require(cfg.epochs >= 1 && cfg.batch >= 1, ErrorCode::kInvalidArgument, "epochs and batch must be >= 1");
  Stopwatch clock;
  const std::uint64_t per_epoch = steps_per_epoch(data.size(), cfg.batch);
  const LinearSchedule schedule{cfg.lr, per_epoch * static_cast<std::uint64_t>(cfg.epochs)};

  LoraAdapter adapter = resume ? resume->adapter : init;
  AdamState state = resume ? resume->state : AdamState::fresh(static_cast<Eigen::Index>(adapter.size()), cfg.hyper, schedule);
  require(state.schedule.lr0 == schedule.lr0 && state.schedule.total_steps == schedule.total_steps,
          ErrorCode::kInvalidArgument, "resume snapshot was produced with a different schedule");
  Vector flat = flatten(adapter);
  const int last_epoch = stop_after_epoch > 0 ? std::min(stop_after_epoch, cfg.epochs) : cfg.epochs;

  std::vector<LossMask> masks;
  masks.reserve(data.size());
  for (const auto& s : data) masks.push_back(train_mask(s, cfg.mask));

  TrainRun run;
  for (int epoch = (resume ? resume->completed_epochs : 0) + 1; epoch <= last_epoch; ++epoch) {
    EpochRecord rec;
    rec.epoch = epoch;
    const auto order = epoch_order(data.size(), cfg.seed, epoch);
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(cfg.batch)) {
      const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(cfg.batch));
      std::vector<const TokenSequence*> batch;
      std::vector<LossMask> batch_masks;
      std::vector<RunOptions> opts;
      for (std::size_t i = start; i < end; ++i) {
        batch.push_back(&data[order[i]]);
        batch_masks.push_back(masks[order[i]]);
        opts.push_back({true, hash_combine(hash_combine(derive_seed(cfg.seed, "dropout"), state.step + 1), i - start)});
      }
      Vector g;
      const double loss = batch_gradient(backbone, adapter, batch, batch_masks, opts, g);
      auto step = adam_step(state, g, flat);
      state = std::move(step.state);
      flat = std::move(step.params);
      adapter = unflatten(flat, adapter);
      rec.step_losses.push_back(loss);
      rec.step_lrs.push_back(step.lr);
    }
    double lr_sum = 0.0;
    for (double lr : rec.step_lrs) lr_sum += lr;
    rec.mean_lr = lr_sum / static_cast<double>(rec.step_lrs.size());
    rec.final_lr = rec.step_lrs.back();
    rec.adapter = adapter;
    rec.state = state;
    if (on_epoch) on_epoch(rec);
    run.epochs.push_back(std::move(rec));
  }
  run.seconds = clock.seconds();
  return run;
}

struct PretrainRun {
  ParameterStore params;
  std::vector<double> epoch_losses;  // mean per-sequence loss of each epoch
  double seconds = 0.0;
};

/// Full-parameter Adam training of the backbone itself (no adapter). Used to
/// turn a random initialization into a usable base model before any adapter
/// work.
inline PretrainRun pretrain_backbone(const ParameterStore& init, std::span<const TokenSequence> data,
                                     const TrainConfig& cfg) {
  require(!data.empty(), ErrorCode::kEmptyDataset, "pretraining set is empty");
  require(cfg.epochs >= 1 && cfg.batch >= 1, ErrorCode::kInvalidArgument, "epochs and batch must be >= 1");
  Stopwatch clock;
  const std::uint64_t per_epoch = steps_per_epoch(data.size(), cfg.batch);
  PretrainRun run{init, {}, 0.0};
  Vector flat = init.flatten();
  AdamState state = AdamState::fresh(flat.size(), cfg.hyper, {cfg.lr, per_epoch * static_cast<std::uint64_t>(cfg.epochs)});
  const WrtSelector wrt{true, false, false};
  const AdapterMix mix;
  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    const auto order = epoch_order(data.size(), cfg.seed, epoch);
    double epoch_loss = 0.0;
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(cfg.batch)) {
      const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(cfg.batch));
      Gradients g = zero_gradients(run.params, mix, wrt);
      for (std::size_t i = start; i < end; ++i) {
        const auto& seq = data[order[i]];
        epoch_loss += accumulate_gradient(run.params, mix, seq, train_mask(seq, cfg.mask), wrt, g);
      }
      auto step = adam_step(state, g.backbone.flatten() / static_cast<double>(end - start), flat);
      state = std::move(step.state);
      flat = std::move(step.params);
      run.params.assign_flat(flat);
    }
    run.epoch_losses.push_back(epoch_loss / static_cast<double>(data.size()));
  }
  run.seconds = clock.seconds();
  return run;
}

/// Sum over epochs of eta_e <g_train_e, g_valid_e>.
inline double trajectory_influence(std::span<const Vector> g_train, std::span<const Vector> g_valid,
                                   std::span<const double> etas) {
  require(g_train.size() == g_valid.size() && g_train.size() == etas.size(), ErrorCode::kShapeMismatch,
          "per-epoch feature and learning-rate counts differ");
  double score = 0.0;
  for (std::size_t e = 0; e < etas.size(); ++e) {
    require(g_train[e].size() == g_valid[e].size(), ErrorCode::kShapeMismatch, "feature lengths differ");
    score += etas[e] * g_train[e].dot(g_valid[e]);
  }
  return score;
}

// Run directory layout: <dir>/epoch-<e>/{adapter.ckpt, adam.ckpt, meta}.
inline std::filesystem::path epoch_dir(const std::filesystem::path& run_dir, int epoch) {
  return run_dir / ("epoch-" + std::to_string(epoch));
}

inline std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

/// key=value header, a blank line, then the per-step loss curve as CSV.
inline std::string epoch_meta_text(const EpochRecord& rec, std::uint64_t seed, const std::string& config_hash) {
  std::string out;
  out += "epoch=" + std::to_string(rec.epoch) + "\n";
  out += "mean_lr=" + format_double(rec.mean_lr) + "\n";
  out += "final_lr=" + format_double(rec.final_lr) + "\n";
  out += "mean_loss=" + format_double(rec.mean_loss()) + "\n";
  out += "seed=" + std::to_string(seed) + "\n";
  out += "step=" + std::to_string(rec.state.step) + "\n";
  out += "config_hash=" + config_hash + "\n\n";
  out += "step,lr,loss\n";
  const std::uint64_t first = rec.state.step - rec.step_losses.size() + 1;
  for (std::size_t i = 0; i < rec.step_losses.size(); ++i)
    out += std::to_string(first + i) + "," + format_double(rec.step_lrs[i]) + "," + format_double(rec.step_losses[i]) + "\n";
  return out;
}

inline void save_epoch(const std::filesystem::path& run_dir, const EpochRecord& rec, std::uint64_t seed,
                       const std::string& config_hash) {
  const auto dir = epoch_dir(run_dir, rec.epoch);
  const Json prov = {{"seed", seed}, {"epoch", rec.epoch}, {"config_hash", config_hash}};
  save_adapter(dir / "adapter.ckpt", rec.adapter, prov);
  save_adam_state(dir / "adam.ckpt", rec.state, prov);
  write_file(dir / "meta", epoch_meta_text(rec, seed, config_hash));
}

/// Reads key=value pairs from the header of an epoch meta file.
inline std::map<std::string, std::string> read_epoch_meta(const std::filesystem::path& path) {
  std::map<std::string, std::string> out;
  std::istringstream in(read_file(path));
  std::string line;
  while (std::getline(in, line) && !line.empty()) {
    const auto eq = line.find('=');
    require(eq != std::string::npos, ErrorCode::kParse, path.string() + ": bad meta line '" + line + "'");
    out[line.substr(0, eq)] = line.substr(eq + 1);
  }
  return out;
}

/// A persisted epoch: adapter checkpoint, optimizer snapshot, rates.
struct EpochSnapshot {
  int epoch = 0;
  LoraAdapter adapter;
  AdamState state;
  double mean_lr = 0.0;
  double final_lr = 0.0;
};

inline std::vector<EpochSnapshot> load_run(const std::filesystem::path& run_dir, int epochs) {
  std::vector<EpochSnapshot> out;
  for (int e = 1; e <= epochs; ++e) {
    const auto dir = epoch_dir(run_dir, e);
    require(std::filesystem::exists(dir / "meta"), ErrorCode::kMissingArtifact, (dir / "meta").string());
    const auto meta = read_epoch_meta(dir / "meta");
    out.push_back({e, load_adapter(dir / "adapter.ckpt"), load_adam_state(dir / "adam.ckpt"),
                   std::stod(meta.at("mean_lr")), std::stod(meta.at("final_lr"))});
  }
  return out;
}

}  // namespace elrea
