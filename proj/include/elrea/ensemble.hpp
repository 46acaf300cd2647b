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

// Ensemble decoding over a backbone and several LoRA adapters, plus the
// comparison strategies (layer-level routing and merging, learned gating,
// independently trained ensembles, voting, random clusters).

#pragma once

#include "elrea/router.hpp"

#include <functional>
#include <map>
#include <sstream>

namespace elrea {

struct DecodeParams {
  int max_new_tokens = 32;
  double temperature = 0.0;  // 0 = greedy
  std::uint64_t seed = 0;
};

/// Adapter list is [Q_base, Q_1..Q_C]; weights line up with it.
struct EnsembleSpec {
  const ParameterStore* backbone = nullptr;
  std::vector<const LoraAdapter*> adapters;
  DecodeParams decode;

  void validate() const {
    require(backbone != nullptr, ErrorCode::kInvalidArgument, "ensemble needs a backbone");
    require(!adapters.empty(), ErrorCode::kInvalidArgument, "ensemble needs at least one adapter");
    for (const auto* a : adapters) require(a != nullptr, ErrorCode::kInvalidArgument, "null adapter in ensemble");
  }
};

/// [w_base, w_1..w_C] as a flat list.
inline std::vector<double> ensemble_weights(const RoutingWeights& r) {
  std::vector<double> out{r.w_base};
  out.insert(out.end(), r.w.begin(), r.w.end());
  return out;
}

namespace detail {

inline int argmax_lowest(const Vector& v) {
  int best = 0;
  for (Eigen::Index i = 1; i < v.size(); ++i)
    if (v(i) > v(best)) best = static_cast<int>(i);
  return best;
}

inline int sample_softmax(const Vector& logits, double temperature, Rng& rng) {
  const Vector z = logits / temperature;
  const Vector p = (z.array() - z.maxCoeff()).exp();
  double u = rng.uniform() * p.sum();
  for (Eigen::Index i = 0; i < p.size(); ++i) {
    u -= p(i);
    if (u < 0.0) return static_cast<int>(i);
  }
  return static_cast<int>(p.size() - 1);
}

}  // namespace detail

/// Sum_k weight_k * logits_k. Weights need not sum to 1.
inline Vector combine_logits(std::span<const Vector> logit_rows, std::span<const double> weights) {
  require(!logit_rows.empty(), ErrorCode::kInvalidArgument, "no logits to combine");
  require(logit_rows.size() == weights.size(), ErrorCode::kShapeMismatch, "one weight per logit row required");
  double total = 0.0;
  for (double w : weights) total += w;
  require(total > 0.0, ErrorCode::kInvalidArgument, "ensemble weights must have positive total");
  Vector out = Vector::Zero(logit_rows.front().size());
  for (std::size_t k = 0; k < logit_rows.size(); ++k) {
    require(logit_rows[k].size() == out.size(), ErrorCode::kShapeMismatch, "logit rows differ in length");
    if (weights[k] != 0.0) out.noalias() += weights[k] * logit_rows[k];
  }
  return out;
}

/// Argmax of the weighted logit sum; ties go to the lowest token id.
inline int ensemble_next_token(std::span<const Vector> logit_rows, std::span<const double> weights) {
  return detail::argmax_lowest(combine_logits(logit_rows, weights));
}

struct GenerationResult {
  std::vector<int> tokens;       // generated only, EOS excluded
  std::string text;
  std::vector<double> weights;   // [w_base, w_1..w_C] used for every step
  bool stopped_at_eos = false;
  bool truncated = false;        // context hit l_max before EOS
  int route_calls = 0;
  std::uint64_t forward_passes = 0;
  double seconds = 0.0;
  std::size_t peak_bytes = 0;
};

/// Next-token logits for the given context (last row only).
using LogitFn = std::function<Vector(std::span<const int>)>;

/// Shared decoding loop. Greedy when temperature is 0, otherwise samples the
/// full softmax at that temperature.
inline GenerationResult decode(std::span<const int> prompt, int l_max, const DecodeParams& params,
                               const LogitFn& next_logits, const Vocab* vocab = nullptr) {
  require(!prompt.empty(), ErrorCode::kInvalidArgument, "empty prompt");
  require(static_cast<int>(prompt.size()) < l_max, ErrorCode::kOverLength,
          "prompt of " + std::to_string(prompt.size()) + " tokens leaves no room under l_max");
  require(params.max_new_tokens >= 1, ErrorCode::kInvalidArgument, "max_new_tokens must be >= 1");
  require(params.temperature >= 0.0, ErrorCode::kInvalidArgument, "negative temperature");
  Stopwatch clock;
  GenerationResult out;
  std::vector<int> context(prompt.begin(), prompt.end());
  Rng rng(derive_seed(params.seed, "decode"));
  for (int step = 0; step < params.max_new_tokens; ++step) {
    if (static_cast<int>(context.size()) >= l_max) {
      out.truncated = true;
      break;
    }
    const Vector logits = next_logits(context);
    const int token = params.temperature > 0.0 ? detail::sample_softmax(logits, params.temperature, rng)
                                               : detail::argmax_lowest(logits);
    if (token == Vocab::kEos) {
      out.stopped_at_eos = true;
      break;
    }
    out.tokens.push_back(token);
    context.push_back(token);
  }
  if (vocab) out.text = decode_symbols(out.tokens, *vocab);
  out.seconds = clock.seconds();
  return out;
}

inline Vector last_logits(const ParameterStore& backbone, const AdapterMix& mix, std::span<const int> context) {
  const Matrix logits = forward_tokens(backbone, mix, context);
  return logits.row(logits.rows() - 1).transpose();
}

/// Rough peak working set of one decode step: parameters plus per-replica
/// activations for a context of length T.
inline std::size_t estimate_peak_bytes(const ParameterStore& backbone, std::span<const LoraAdapter* const> adapters,
                                       std::size_t replicas, std::size_t T) {
  const LmConfig& c = backbone.config();
  std::size_t n = backbone.size();
  for (const auto* a : adapters) n += a->size();
  const std::size_t per_token = static_cast<std::size_t>(c.vocab_size + 6 * c.d_model + 3 * c.d_ff) +
                                static_cast<std::size_t>(c.n_heads) * T;
  return 8 * (n + replicas * T * per_token);
}

using RouteFn = std::function<RoutingWeights()>;

/// Weighted-logit ensemble generation. The router is called exactly once and
/// its weights are reused for every step; every adapter sees the same context.
inline GenerationResult generate(const EnsembleSpec& spec, std::span<const int> prompt, const RouteFn& router,
                                 const Vocab* vocab = nullptr) {
  spec.validate();
  const RoutingWeights routing = router();
  std::vector<double> weights = ensemble_weights(routing);
  require(weights.size() == spec.adapters.size(), ErrorCode::kShapeMismatch,
          "routing has " + std::to_string(weights.size()) + " weights for " + std::to_string(spec.adapters.size()) +
              " adapters");
  std::uint64_t passes = 0;
  std::size_t longest = 0;
  auto step = [&](std::span<const int> ctx) {
    std::vector<Vector> rows;
    rows.reserve(spec.adapters.size());
    for (std::size_t k = 0; k < spec.adapters.size(); ++k) {
      if (weights[k] == 0.0) {
        rows.emplace_back(Vector::Zero(spec.backbone->config().vocab_size));
        continue;
      }
      rows.push_back(last_logits(*spec.backbone, AdapterMix::single(*spec.adapters[k]), ctx));
      ++passes;
    }
    longest = std::max(longest, ctx.size());
    return combine_logits(rows, weights);
  };
  GenerationResult out = decode(prompt, spec.backbone->config().l_max, spec.decode, step, vocab);
  out.weights = std::move(weights);
  out.route_calls = 1;
  out.forward_passes = passes;
  out.peak_bytes = estimate_peak_bytes(*spec.backbone, spec.adapters, spec.adapters.size(), longest);
  return out;
}

inline GenerationResult generate(const EnsembleSpec& spec, std::span<const int> prompt, const RoutingWeights& routing,
                                 const Vocab* vocab = nullptr) {
  return generate(spec, prompt, [&] { return routing; }, vocab);
}

/// Single-model generation through any adapter mix.
inline GenerationResult generate_mix(const ParameterStore& backbone, const AdapterMix& mix, std::span<const int> prompt,
                                     const DecodeParams& params, const Vocab* vocab = nullptr) {
  std::uint64_t passes = 0;
  std::size_t longest = 0;
  auto step = [&](std::span<const int> ctx) {
    ++passes;
    longest = std::max(longest, ctx.size());
    return last_logits(backbone, mix, ctx);
  };
  GenerationResult out = decode(prompt, backbone.config().l_max, params, step, vocab);
  out.forward_passes = passes;
  out.peak_bytes = estimate_peak_bytes(backbone, mix.experts, 1, longest);
  return out;
}

// ---- layer-level routing and merging ----

/// Logits with every adapted layer computing Wx + sum_c lambda_c s_c x B_c A_c^T,
/// lambda = weights / sum(weights). One forward pass.
inline Matrix moe_routing_forward(const ParameterStore& backbone, std::span<const LoraAdapter* const> adapters,
                                  std::span<const double> weights, std::span<const int> tokens) {
  std::vector<double> lambda = normalize_weights(weights);
  return forward_tokens(backbone, AdapterMix::fixed({adapters.begin(), adapters.end()}, std::move(lambda)), tokens);
}

/// One adapter whose factors are the lambda-weighted sums of the inputs' factors.
inline LoraAdapter moe_merge(std::span<const LoraAdapter* const> adapters, std::span<const double> weights) {
  const std::vector<double> lambda = normalize_weights(weights);
  return merge_weighted(adapters, lambda);
}

inline GenerationResult generate_moe_routing(const ParameterStore& backbone,
                                             std::span<const LoraAdapter* const> adapters,
                                             const RoutingWeights& routing, std::span<const int> prompt,
                                             const DecodeParams& params, const Vocab* vocab = nullptr) {
  const auto w = ensemble_weights(routing);
  require(w.size() == adapters.size(), ErrorCode::kShapeMismatch, "routing and adapter counts differ");
  GenerationResult out = generate_mix(
      backbone, AdapterMix::fixed({adapters.begin(), adapters.end()}, normalize_weights(w)), prompt, params, vocab);
  out.weights = w;
  out.route_calls = 1;
  return out;
}

inline GenerationResult generate_moe_merging(const ParameterStore& backbone,
                                             std::span<const LoraAdapter* const> adapters,
                                             const RoutingWeights& routing, std::span<const int> prompt,
                                             const DecodeParams& params, const Vocab* vocab = nullptr) {
  const auto w = ensemble_weights(routing);
  require(w.size() == adapters.size(), ErrorCode::kShapeMismatch, "routing and adapter counts differ");
  const LoraAdapter merged = moe_merge(adapters, w);
  GenerationResult out = generate_mix(backbone, AdapterMix::single(merged), prompt, params, vocab);
  out.weights = w;
  out.route_calls = 1;
  return out;
}

// ---- learned per-layer gating ----

struct MoleConfig {
  int epochs = 1;
  double lr = 2e-5;
  int batch = 16;
  std::uint64_t seed = 0;
  TrainMask mask = TrainMask::kResponse;
  AdamHyper hyper;
};

struct MoleRun {
  GatingParams gating;
  std::vector<double> step_losses;
  double seconds = 0.0;
};

/// Trains only the gating vectors; backbone and experts stay frozen. Gating
/// starts at zero, i.e. the uniform mixture.
inline MoleRun mole_train(const ParameterStore& backbone, std::span<const LoraAdapter* const> experts,
                          std::span<const TokenSequence> data, const MoleConfig& cfg) {
  require(!experts.empty(), ErrorCode::kInvalidArgument, "gated mixture needs experts");
  require(!data.empty(), ErrorCode::kEmptyDataset, "gating training set is empty");
  require(cfg.epochs >= 1 && cfg.batch >= 1, ErrorCode::kInvalidArgument, "epochs and batch must be >= 1");
  Stopwatch clock;
  MoleRun run;
  run.gating = GatingParams::zeros(*experts.front(), static_cast<int>(experts.size()));
  const std::uint64_t per_epoch = steps_per_epoch(data.size(), cfg.batch);
  AdamState state = AdamState::fresh(static_cast<Eigen::Index>(run.gating.size()), cfg.hyper,
                                     {cfg.lr, per_epoch * static_cast<std::uint64_t>(cfg.epochs)});
  Vector flat = run.gating.flatten();
  const WrtSelector wrt{false, false, true};
  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    const auto order = epoch_order(data.size(), derive_seed(cfg.seed, "mole"), epoch);
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(cfg.batch)) {
      const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(cfg.batch));
      const auto mix = AdapterMix::gated({experts.begin(), experts.end()}, run.gating);
      Gradients g = zero_gradients(backbone, mix, wrt);
      double loss = 0.0;
      for (std::size_t i = start; i < end; ++i) {
        const TokenSequence& seq = data[order[i]];
        loss += accumulate_gradient(backbone, mix, seq, train_mask(seq, cfg.mask), wrt, g);
      }
      const double n = static_cast<double>(end - start);
      auto step = adam_step(state, g.gating.flatten() / n, flat);
      state = std::move(step.state);
      flat = std::move(step.params);
      run.gating.assign_flat(flat);
      run.step_losses.push_back(loss / n);
    }
  }
  run.seconds = clock.seconds();
  return run;
}

inline Matrix mole_forward(const ParameterStore& backbone, std::span<const LoraAdapter* const> experts,
                           const GatingParams& gating, std::span<const int> tokens) {
  return forward_tokens(backbone, AdapterMix::gated({experts.begin(), experts.end()}, gating), tokens);
}

inline GenerationResult generate_mole(const ParameterStore& backbone, std::span<const LoraAdapter* const> experts,
                                      const GatingParams& gating, std::span<const int> prompt,
                                      const DecodeParams& params, const Vocab* vocab = nullptr) {
  return generate_mix(backbone, AdapterMix::gated({experts.begin(), experts.end()}, gating), prompt, params, vocab);
}

/// Token-averaged gate values per (sequence, layer):
///   id,layer,lambda_0,..,lambda_{n-1}
inline std::string mole_lambda_csv(const ParameterStore& backbone, std::span<const LoraAdapter* const> experts,
                                   const GatingParams& gating, std::span<const std::string> ids,
                                   std::span<const TokenSequence> seqs) {
  require(ids.size() == seqs.size(), ErrorCode::kShapeMismatch, "one id per sequence required");
  const auto mix = AdapterMix::gated({experts.begin(), experts.end()}, gating);
  std::string out = "id,layer";
  for (std::size_t c = 0; c < experts.size(); ++c) out += ",lambda_" + std::to_string(c);
  out += "\n";
  for (std::size_t i = 0; i < seqs.size(); ++i) {
    ForwardTape tape;
    forward(backbone, mix, seqs[i], {}, &tape);
    for (std::size_t l = 0; l < tape.blocks.size(); ++l) {
      const auto& b = tape.blocks[l];
      const std::pair<const char*, const detail::LinearTape*> lins[] = {
          {"q_proj", &b.lin_q},       {"k_proj", &b.lin_k},   {"v_proj", &b.lin_v},      {"o_proj", &b.lin_o},
          {"gate_proj", &b.lin_gate}, {"up_proj", &b.lin_up}, {"down_proj", &b.lin_down}};
      for (const auto& [family, lt] : lins) {
        if (lt->lambda.size() == 0) continue;
        out += ids[i] + "," + block_name(static_cast<int>(l), family);
        const Eigen::RowVectorXd mean = lt->lambda.colwise().mean();
        for (Eigen::Index c = 0; c < mean.size(); ++c) out += "," + format_double(mean(c));
        out += "\n";
      }
    }
  }
  return out;
}

// ---- independently trained ensembles ----

/// n_extra adapters trained on the full set with their own init and shuffle
/// seeds. Q_base is not retrained here.
inline std::vector<LoraAdapter> lora_ensembles(const ParameterStore& backbone, const LoraAdapter& shape_template,
                                               std::span<const TokenSequence> data, const TrainConfig& cfg,
                                               int n_extra = 3) {
  require(n_extra >= 0, ErrorCode::kInvalidArgument, "n_extra must be >= 0");
  std::vector<LoraAdapter> out;
  for (int k = 1; k <= n_extra; ++k) {
    const std::uint64_t seed = hash_combine(derive_seed(cfg.seed, "lora-ensemble"), static_cast<std::uint64_t>(k));
    LoraOptions opts;
    opts.alpha = shape_template.alpha;
    opts.dropout = shape_template.dropout;
    for (const auto& [name, _] : shape_template.layers) {
      const std::string family = name.substr(name.rfind('.') + 1);
      if (std::find(opts.families.begin(), opts.families.end(), family) == opts.families.end())
        opts.families.push_back(family);
    }
    const LoraAdapter init = init_lora(backbone.config(), shape_template.rank, seed, opts);
    TrainConfig c = cfg;
    c.seed = seed;
    out.push_back(train(backbone, init, data, c).epochs.back().adapter);
  }
  return out;
}

/// Next token from the mean of the members' logits.
inline GenerationResult generate_mean_logits(const ParameterStore& backbone,
                                             std::span<const LoraAdapter* const> members,
                                             std::span<const int> prompt, const DecodeParams& params,
                                             const Vocab* vocab = nullptr) {
  EnsembleSpec spec{&backbone, {members.begin(), members.end()}, params};
  RoutingWeights r;
  r.w.assign(members.size() - 1, 1.0 / static_cast<double>(members.size()));
  r.w_base = 1.0 / static_cast<double>(members.size());
  GenerationResult out = generate(spec, prompt, r, vocab);
  out.route_calls = 0;
  return out;
}

// ---- self-consistency ----

struct VoteResult {
  std::optional<std::string> answer;  // nullopt: every sample unparsable
  std::vector<std::string> samples;
  std::map<std::string, int> votes;
};

/// Modal answer; a tie is broken by a seeded pick among the tied answers.
inline std::optional<std::string> majority_vote(std::span<const std::optional<std::string>> answers,
                                                std::uint64_t seed, std::map<std::string, int>* votes_out = nullptr) {
  std::map<std::string, int> votes;
  for (const auto& a : answers)
    if (a) ++votes[*a];
  if (votes_out) *votes_out = votes;
  if (votes.empty()) return std::nullopt;
  int best = 0;
  for (const auto& [_, n] : votes) best = std::max(best, n);
  std::vector<std::string> tied;
  for (const auto& [a, n] : votes)
    if (n == best) tied.push_back(a);
  if (tied.size() == 1) return tied.front();
  Rng rng(derive_seed(seed, "vote-tie"));
  return tied[rng.below(tied.size())];
}

struct SelfConsistencyParams {
  int n = 5;
  double temperature = 1.0;
  std::uint64_t seed = 0;      // sampling
  std::uint64_t tie_seed = 0;  // vote tie-break
  int max_new_tokens = 32;
};

/// n full-softmax samples, answers extracted, modal answer returned.
inline VoteResult self_consistency(const ParameterStore& backbone, const LoraAdapter* adapter,
                                   std::span<const int> prompt, const Vocab& vocab,
                                   const SelfConsistencyParams& params = {}) {
  require(params.n >= 1, ErrorCode::kInvalidArgument, "self-consistency needs n >= 1");
  require(params.temperature > 0.0, ErrorCode::kInvalidArgument, "self-consistency samples need temperature > 0");
  VoteResult out;
  std::vector<std::optional<std::string>> answers;
  for (int i = 0; i < params.n; ++i) {
    const DecodeParams p{params.max_new_tokens, params.temperature,
                         hash_combine(derive_seed(params.seed, "self-consistency"), static_cast<std::uint64_t>(i))};
    const auto g = generate_mix(backbone, AdapterMix::optional(adapter), prompt, p, &vocab);
    out.samples.push_back(g.text);
    answers.push_back(extract_answer(g.text));
  }
  out.answer = majority_vote(answers, params.tie_seed, &out.votes);
  return out;
}

// ---- random clusters ----

/// Labels 1..C for n items: a seeded permutation sliced into the given sizes.
inline std::vector<int> random_cluster_partition(std::size_t n, std::span<const std::size_t> sizes,
                                                 std::uint64_t seed) {
  std::size_t total = 0;
  for (auto s : sizes) total += s;
  require(total == n, ErrorCode::kInvalidArgument,
          "cluster sizes sum to " + std::to_string(total) + ", dataset has " + std::to_string(n));
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng rng(derive_seed(seed, "random-clusters"));
  rng.shuffle(order);
  std::vector<int> labels(n, 0);
  std::size_t pos = 0;
  for (std::size_t c = 0; c < sizes.size(); ++c)
    for (std::size_t i = 0; i < sizes[c]; ++i) labels[order[pos++]] = static_cast<int>(c) + 1;
  return labels;
}

// ---- output records ----

struct GenerationRecord {
  std::string id;
  std::string method;
  std::string prompt;
  std::string generation;
  std::optional<std::string> answer;
  std::vector<double> weights;  // per cluster
  double w_base = 0.0;
  std::size_t peak_bytes = 0;
  bool truncated = false;
  double wall_seconds = 0.0;  // not serialized; timing goes to a sidecar

  Json to_json() const {
    Json j;
    j["id"] = id;
    j["method"] = method;
    j["prompt"] = prompt;
    j["generation"] = generation;
    j["answer"] = answer ? Json(*answer) : Json(nullptr);
    j["weights"] = weights;
    j["w_base"] = w_base;
    j["peak_bytes"] = peak_bytes;
    j["truncated"] = truncated;
    return j;
  }

  static GenerationRecord from_json(const Json& j) {
    GenerationRecord r;
    r.id = j.at("id").get<std::string>();
    r.method = j.at("method").get<std::string>();
    r.prompt = j.at("prompt").get<std::string>();
    r.generation = j.at("generation").get<std::string>();
    if (!j.at("answer").is_null()) r.answer = j.at("answer").get<std::string>();
    r.weights = j.at("weights").get<std::vector<double>>();
    r.w_base = j.at("w_base").get<double>();
    r.peak_bytes = j.at("peak_bytes").get<std::size_t>();
    r.truncated = j.value("truncated", false);
    return r;
  }
};

inline GenerationRecord make_record(std::string id, std::string method, std::string prompt,
                                    const GenerationResult& g) {
  GenerationRecord r;
  r.id = std::move(id);
  r.method = std::move(method);
  r.prompt = std::move(prompt);
  r.generation = g.text;
  r.answer = extract_answer(g.text);
  if (!g.weights.empty()) {
    r.w_base = g.weights.front();
    r.weights.assign(g.weights.begin() + 1, g.weights.end());
  }
  r.wall_seconds = g.seconds;
  r.peak_bytes = g.peak_bytes;
  r.truncated = g.truncated;
  return r;
}

inline void save_generations(const std::filesystem::path& path, std::span<const GenerationRecord> records) {
  std::string out;
  for (const auto& r : records) out += r.to_json().dump() + "\n";
  write_file(path, out);
}

inline std::vector<GenerationRecord> load_generations(const std::filesystem::path& path) {
  require(std::filesystem::exists(path), ErrorCode::kMissingArtifact, path.string());
  std::vector<GenerationRecord> out;
  std::istringstream in(read_file(path));
  std::string line;
  std::size_t n = 0;
  while (std::getline(in, line)) {
    ++n;
    if (line.empty()) continue;
    try {
      out.push_back(GenerationRecord::from_json(Json::parse(line)));
    } catch (const Json::exception& e) {
      throw Error(ErrorCode::kParse, path.string() + ":" + std::to_string(n) + ": " + e.what());
    }
  }
  return out;
}

}  // namespace elrea
