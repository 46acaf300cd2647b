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

#include "elrea/ensemble.hpp"

#include "support/fixtures.hpp"

#include <gtest/gtest.h>

namespace {

using namespace elrea;
using elrea::testing::random_sequence;
using elrea::testing::randomize;
using elrea::testing::tiny_config;

std::vector<const LoraAdapter*> pointers(const std::vector<LoraAdapter>& v) {
  std::vector<const LoraAdapter*> out;
  for (const auto& a : v) out.push_back(&a);
  return out;
}

struct Models {
  LmConfig c = tiny_config();
  ParameterStore backbone = init_backbone(c, 3);
  std::vector<LoraAdapter> adapters;  // [base, 1..n]
  std::vector<int> prompt;

  explicit Models(int n, double stddev = 0.5) {
    Rng rng(4);
    for (int k = 0; k <= n; ++k) {
      adapters.push_back(init_lora(c, 2, 10 + static_cast<std::uint64_t>(k)));
      randomize(adapters.back(), rng, stddev);
    }
    prompt = {Vocab::kBos, 5, 7, 9, Vocab::kSep};
  }
};

TEST(NextToken, ScalingAndDominance) {
  const Vector l = (Vector(4) << 0.1, 2.0, -1.0, 1.5).finished();
  for (double w : {1e-6, 1.0, 7.0}) EXPECT_EQ(ensemble_next_token(std::vector<Vector>{l}, std::vector<double>{w}), 1);
  const std::vector<Vector> rows{Vector::Unit(4, 0), Vector::Unit(4, 3)};
  EXPECT_EQ(ensemble_next_token(rows, std::vector<double>{2.0, 1.0}), 0);
  EXPECT_EQ(ensemble_next_token(rows, std::vector<double>{1.0, 2.0}), 3);
  // Equal scores: the lower id wins.
  EXPECT_EQ(ensemble_next_token(rows, std::vector<double>{1.0, 1.0}), 0);
}

TEST(NextToken, MatchesBruteForce) {
  Rng rng(1);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<Vector> rows;
    std::vector<double> w;
    for (int k = 0; k < 3; ++k) {
      rows.push_back(Vector::NullaryExpr(17, [&] { return rng.normal(); }));
      w.push_back(rng.uniform());
    }
    int best = -1;
    double best_score = -1e300;
    for (int t = 0; t < 17; ++t) {
      double s = 0.0;
      for (int k = 0; k < 3; ++k) s += w[static_cast<std::size_t>(k)] * rows[static_cast<std::size_t>(k)](t);
      if (s > best_score) best_score = s, best = t;
    }
    EXPECT_EQ(ensemble_next_token(rows, w), best);
  }
}

TEST(NextToken, Errors) {
  const std::vector<Vector> rows{Vector::Ones(3)};
  EXPECT_THROW(ensemble_next_token(std::vector<Vector>{}, std::vector<double>{}), Error);
  EXPECT_THROW(ensemble_next_token(rows, std::vector<double>{0.0}), Error);
  EXPECT_THROW(ensemble_next_token(rows, std::vector<double>{-1.0}), Error);
  EXPECT_THROW(ensemble_next_token(rows, std::vector<double>{1.0, 1.0}), Error);
}

TEST(Decode, StopsAtEosAndLimits) {
  int calls = 0;
  auto eos_third = [&](std::span<const int>) {
    ++calls;
    return Vector::Unit(6, calls == 3 ? Vocab::kEos : 5);
  };
  const std::vector<int> prompt{Vocab::kBos, 4, Vocab::kSep};
  const auto a = decode(prompt, 20, {10, 0.0, 0}, eos_third);
  EXPECT_EQ(a.tokens, (std::vector<int>{5, 5}));
  EXPECT_TRUE(a.stopped_at_eos);
  EXPECT_FALSE(a.truncated);

  auto never_eos = [](std::span<const int>) { return Vector::Unit(6, 4); };
  const auto b = decode(prompt, 20, {4, 0.0, 0}, never_eos);
  EXPECT_EQ(b.tokens.size(), 4u);
  EXPECT_FALSE(b.truncated);

  const auto c = decode(prompt, 6, {10, 0.0, 0}, never_eos);
  EXPECT_EQ(c.tokens.size(), 3u);
  EXPECT_TRUE(c.truncated);

  EXPECT_THROW(decode(prompt, 3, {10, 0.0, 0}, never_eos), Error);
}

TEST(Decode, SamplingFollowsSoftmax) {
  const Vector logits = (Vector(4) << 0.0, 1.0, -0.5, 0.5).finished();
  const Vector p = logits.array().exp() / logits.array().exp().sum();
  Rng rng(5);
  std::vector<int> counts(4, 0);
  const int n = 40000;
  for (int i = 0; i < n; ++i) ++counts[static_cast<std::size_t>(detail::sample_softmax(logits, 1.0, rng))];
  double chi2 = 0.0;
  for (int t = 0; t < 4; ++t) {
    const double e = n * p(t);
    chi2 += (counts[static_cast<std::size_t>(t)] - e) * (counts[static_cast<std::size_t>(t)] - e) / e;
  }
  EXPECT_LT(chi2, 16.27);  // df 3, p = 0.001
}

TEST(Generate, IdenticalExpertsReduceToBase) {
  Models m(0);
  const LoraAdapter& base = m.adapters[0];
  const std::vector<const LoraAdapter*> same{&base, &base, &base, &base};
  const auto ref = generate_mix(m.backbone, AdapterMix::single(base), m.prompt, {8, 0.0, 0});
  RoutingWeights r;
  r.w = {0.3, 0.2, 0.4};
  r.w_base = 0.6;
  const auto g = generate({&m.backbone, same, {8, 0.0, 0}}, m.prompt, r);
  EXPECT_EQ(g.tokens, ref.tokens);
  EXPECT_FALSE(g.tokens.empty());
}

TEST(Generate, BaseOnlyWeights) {
  Models m(3);
  const auto ptrs = pointers(m.adapters);
  RoutingWeights r;
  r.w = {0.0, 0.0, 0.0};
  r.w_base = 1.0;
  const auto g = generate({&m.backbone, ptrs, {8, 0.0, 0}}, m.prompt, r);
  const auto ref = generate_mix(m.backbone, AdapterMix::single(m.adapters[0]), m.prompt, {8, 0.0, 0});
  EXPECT_EQ(g.tokens, ref.tokens);
  EXPECT_EQ(g.forward_passes, ref.forward_passes);
}

TEST(Generate, MatchesStepwiseOracleAndRoutesOnce) {
  Models m(4);
  const auto ptrs = pointers(m.adapters);
  RoutingWeights r;
  r.w = {0.1, 0.5, 0.2, 0.2};
  r.w_base = 0.3;
  int route_calls = 0;
  auto router = [&] {
    ++route_calls;
    return r;
  };
  const EnsembleSpec spec{&m.backbone, ptrs, {10, 0.0, 0}};
  const auto g = generate(spec, m.prompt, router);
  EXPECT_EQ(route_calls, 1);
  EXPECT_EQ(g.route_calls, 1);
  EXPECT_EQ(g.weights, (std::vector<double>{0.3, 0.1, 0.5, 0.2, 0.2}));

  // Full recomputation: each adapter's full forward, weighted sum of last rows.
  std::vector<int> ctx = m.prompt, expect;
  for (int step = 0; step < 10 && static_cast<int>(ctx.size()) < m.c.l_max; ++step) {
    Vector s = Vector::Zero(m.c.vocab_size);
    for (std::size_t k = 0; k < ptrs.size(); ++k) {
      const Matrix l = forward_tokens(m.backbone, AdapterMix::single(*ptrs[k]), ctx);
      s += g.weights[k] * l.row(l.rows() - 1).transpose();
    }
    Eigen::Index best;
    s.maxCoeff(&best);
    if (best == Vocab::kEos) break;
    expect.push_back(static_cast<int>(best));
    ctx.push_back(static_cast<int>(best));
  }
  EXPECT_EQ(g.tokens, expect);

  const auto again = generate(spec, m.prompt, router);
  EXPECT_EQ(again.tokens, g.tokens);
  EXPECT_GT(g.peak_bytes, 0u);
}

TEST(Generate, UniformWeightsMatchAnyConstant) {
  Models m(3);
  const auto ptrs = pointers(m.adapters);
  const EnsembleSpec spec{&m.backbone, ptrs, {8, 0.0, 0}};
  RoutingWeights c;
  c.w.assign(3, 2.5);
  c.w_base = 2.5;
  EXPECT_EQ(generate(spec, m.prompt, uniform_weights(3)).tokens, generate(spec, m.prompt, c).tokens);

  // A skewed routing differs from uniform.
  const auto routed = weights_from_cosines(std::vector<double>{0.9, 0.1, 0.0});
  EXPECT_NE(ensemble_weights(routed), ensemble_weights(uniform_weights(3)));
}

TEST(Generate, CountMismatchRejected) {
  Models m(2);
  const auto ptrs = pointers(m.adapters);
  EXPECT_THROW(generate({&m.backbone, ptrs, {}}, m.prompt, uniform_weights(4)), Error);
}

TEST(MoeRouting, OneHotEqualsSingleAdapter) {
  Models m(3);
  const auto ptrs = pointers(m.adapters);
  const Matrix ref = forward_tokens(m.backbone, AdapterMix::single(m.adapters[2]), m.prompt);
  const Matrix got = moe_routing_forward(m.backbone, ptrs, std::vector<double>{0.0, 0.0, 3.0, 0.0}, m.prompt);
  EXPECT_LT((got - ref).cwiseAbs().maxCoeff(), 1e-10);
  EXPECT_THROW(moe_routing_forward(m.backbone, ptrs, std::vector<double>(4, 0.0), m.prompt), Error);
}

TEST(MoeRouting, EqualsDenseLayerwiseSum) {
  Models m(2);
  const auto ptrs = pointers(m.adapters);
  const std::vector<double> w{2.0, 2.0, 4.0};
  EXPECT_EQ(normalize_weights(std::vector<double>{2.0, 2.0}), (std::vector<double>{0.5, 0.5}));
  auto dense = m.backbone;
  const double lam[] = {0.25, 0.25, 0.5};
  for (std::size_t k = 0; k < 3; ++k)
    for (const auto& [name, p] : ptrs[k]->layers) dense.at(name) += lam[k] * ptrs[k]->scale() * p.a * p.b.transpose();
  const Matrix got = moe_routing_forward(m.backbone, ptrs, w, m.prompt);
  const Matrix ref = forward_tokens(dense, AdapterMix::none(), m.prompt);
  EXPECT_LT((got - ref).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(MoeMerging, DiffersFromRoutingOnConstructedPair) {
  // Rank-1 experts on orthogonal directions: routing gives
  // 0.5 (e1 e1^T + e2 e2^T), merging gives 0.25 (e1 + e2)(e1 + e2)^T.
  Models m(0);
  std::vector<LoraAdapter> experts(2, m.adapters[0].zeros_like());
  for (auto& e : experts) e.rank = 1, e.alpha = 4.0;
  for (int k = 0; k < 2; ++k)
    for (auto& [name, p] : experts[static_cast<std::size_t>(k)].layers) {
      p.a = Matrix::Zero(p.a.rows(), 1);
      p.b = Matrix::Zero(p.b.rows(), 1);
      p.a(k, 0) = 1.0;
      p.b(k, 0) = 1.0;
    }
  const auto ptrs = pointers(experts);
  const std::vector<double> w{1.0, 1.0};

  const auto& p0 = experts[0].layers.begin()->second;
  const auto& p1 = experts[1].layers.begin()->second;
  const Matrix routed = 0.5 * (p0.a * p0.b.transpose() + p1.a * p1.b.transpose());
  const Matrix merged = (0.5 * (p0.a + p1.a)) * (0.5 * (p0.b + p1.b)).transpose();
  EXPECT_NEAR((routed - merged).cwiseAbs().maxCoeff(), 0.25, 1e-15);

  const LoraAdapter mix = moe_merge(ptrs, w);
  EXPECT_NEAR((mix.layers.begin()->second.a * mix.layers.begin()->second.b.transpose() - merged).norm(), 0.0, 1e-15);
  const Matrix a = moe_routing_forward(m.backbone, ptrs, w, m.prompt);
  const Matrix b = forward_tokens(m.backbone, AdapterMix::single(mix), m.prompt);
  EXPECT_GT((a - b).cwiseAbs().maxCoeff(), 1e-3);
}

TEST(Mole, ZeroGatingIsUniformMixture) {
  Models m(3);
  const auto ptrs = pointers(m.adapters);
  const auto gates = GatingParams::zeros(m.adapters[0], 4);
  const Matrix a = mole_forward(m.backbone, ptrs, gates, m.prompt);
  const Matrix b = moe_routing_forward(m.backbone, ptrs, std::vector<double>(4, 1.0), m.prompt);
  EXPECT_LT((a - b).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(Mole, FirstStepIsSignedAdamStep) {
  Models m(2);
  const auto ptrs = pointers(m.adapters);
  Rng rng(6);
  std::vector<TokenSequence> data;
  for (int i = 0; i < 4; ++i) data.push_back(random_sequence(rng, m.c, 10, 4));
  MoleConfig cfg;
  cfg.batch = 4;
  cfg.lr = 1e-3;
  const auto run = mole_train(m.backbone, ptrs, data, cfg);
  ASSERT_EQ(run.step_losses.size(), 1u);

  const auto zero = GatingParams::zeros(m.adapters[0], 3);
  const auto mix = AdapterMix::gated(ptrs, zero);
  Vector g = Vector::Zero(static_cast<Eigen::Index>(zero.size()));
  for (const auto& s : data) g += grad(m.backbone, mix, s, response_mask(s), {false, false, true});
  g /= 4.0;
  // Bias-corrected first step: -lr * g / (|g| + eps).
  const Vector expect = -1e-3 * (g.array() / (g.array().abs() + 1e-8)).matrix();
  EXPECT_LT((run.gating.flatten() - expect).cwiseAbs().maxCoeff(), 1e-15);
}

TEST(Mole, TrainingLowersLossAndExportsLambdas) {
  Models m(2);
  const auto ptrs = pointers(m.adapters);
  Rng rng(7);
  std::vector<TokenSequence> data;
  std::vector<std::string> ids;
  for (int i = 0; i < 8; ++i) {
    data.push_back(random_sequence(rng, m.c, 10, 4));
    ids.push_back("s" + std::to_string(i));
  }
  MoleConfig cfg;
  cfg.batch = 8;
  cfg.epochs = 30;
  cfg.lr = 5e-2;
  const auto run = mole_train(m.backbone, ptrs, data, cfg);
  EXPECT_LT(run.step_losses.back(), run.step_losses.front());

  const std::string csv = mole_lambda_csv(m.backbone, ptrs, run.gating, ids, data);
  std::istringstream in(csv);
  std::string line;
  std::getline(in, line);
  EXPECT_EQ(line, "id,layer,lambda_0,lambda_1,lambda_2");
  int rows = 0;
  while (std::getline(in, line)) {
    ++rows;
    double sum = 0.0;
    std::istringstream fields(line);
    std::string f;
    std::getline(fields, f, ',');
    std::getline(fields, f, ',');
    while (std::getline(fields, f, ',')) sum += std::stod(f);
    EXPECT_NEAR(sum, 1.0, 1e-12);
  }
  EXPECT_EQ(rows, 8 * m.c.n_layers * 7);
}

TEST(LoraEnsembles, MeanLogitGeneration) {
  Models m(3);
  const DecodeParams p{8, 0.0, 0};
  const auto base = generate_mix(m.backbone, AdapterMix::single(m.adapters[0]), m.prompt, p);
  const std::vector<const LoraAdapter*> one{&m.adapters[0]};
  EXPECT_EQ(generate_mean_logits(m.backbone, one, m.prompt, p).tokens, base.tokens);
  const std::vector<const LoraAdapter*> same(4, &m.adapters[0]);
  EXPECT_EQ(generate_mean_logits(m.backbone, same, m.prompt, p).tokens, base.tokens);

  const auto ptrs = pointers(m.adapters);
  const auto g = generate_mean_logits(m.backbone, ptrs, m.prompt, p);
  std::vector<int> ctx = m.prompt, expect;
  for (int step = 0; step < 8; ++step) {
    Vector s = Vector::Zero(m.c.vocab_size);
    for (const auto* a : ptrs) {
      const Matrix l = forward_tokens(m.backbone, AdapterMix::single(*a), ctx);
      s += l.row(l.rows() - 1).transpose();
    }
    s /= 4.0;
    Eigen::Index best;
    s.maxCoeff(&best);
    if (best == Vocab::kEos) break;
    expect.push_back(static_cast<int>(best));
    ctx.push_back(static_cast<int>(best));
  }
  EXPECT_EQ(g.tokens, expect);
}

TEST(LoraEnsembles, TrainsDistinctDeterministicMembers) {
  Models m(0);
  Rng rng(8);
  std::vector<TokenSequence> data;
  for (int i = 0; i < 8; ++i) data.push_back(random_sequence(rng, m.c, 10, 4));
  TrainConfig cfg;
  cfg.epochs = 1;
  cfg.batch = 4;
  cfg.lr = 1e-2;
  EXPECT_TRUE(lora_ensembles(m.backbone, m.adapters[0], data, cfg, 0).empty());
  const auto a = lora_ensembles(m.backbone, m.adapters[0], data, cfg, 2);
  ASSERT_EQ(a.size(), 2u);
  EXPECT_FALSE(a[0] == a[1]);
  EXPECT_TRUE(a[0].same_shape(m.adapters[0]));
  EXPECT_EQ(a, lora_ensembles(m.backbone, m.adapters[0], data, cfg, 2));
}

TEST(SelfConsistency, VoteRules) {
  using A = std::optional<std::string>;
  const std::vector<A> votes{"A", "A", "B", "B", "C"};
  const auto pick = majority_vote(votes, 11);
  ASSERT_TRUE(pick);
  EXPECT_TRUE(*pick == "A" || *pick == "B");
  EXPECT_EQ(majority_vote(votes, 11), pick);
  std::set<std::string> seen;
  for (std::uint64_t s = 0; s < 64; ++s) seen.insert(*majority_vote(votes, s));
  EXPECT_EQ(seen, (std::set<std::string>{"A", "B"}));

  EXPECT_EQ(majority_vote(std::vector<A>{"7", std::nullopt, "7", "3"}, 0), A("7"));
  EXPECT_FALSE(majority_vote(std::vector<A>{std::nullopt, std::nullopt}, 0));
}

TEST(SelfConsistency, SamplesAreSeededAndSingleVoteIsTheSample) {
  Models m(0, 1.0);
  const Vocab vocab = Vocab::from_symbols({'0', '1', '2', '3', '4', '=', '+'});
  ASSERT_EQ(vocab.size(), m.c.vocab_size);
  const auto a = self_consistency(m.backbone, &m.adapters[0], m.prompt, vocab, {5, 1.0, 21, 3, 8});
  const auto b = self_consistency(m.backbone, &m.adapters[0], m.prompt, vocab, {5, 1.0, 21, 3, 8});
  EXPECT_EQ(a.samples, b.samples);
  EXPECT_EQ(a.answer, b.answer);
  EXPECT_EQ(a.samples.size(), 5u);

  const auto one = self_consistency(m.backbone, &m.adapters[0], m.prompt, vocab, {1, 1.0, 21, 3, 8});
  const DecodeParams p{8, 1.0, hash_combine(derive_seed(21, "self-consistency"), 0)};
  const auto g = generate_mix(m.backbone, AdapterMix::single(m.adapters[0]), m.prompt, p, &vocab);
  EXPECT_EQ(one.samples.front(), g.text);
  EXPECT_EQ(one.answer, extract_answer(g.text));
  EXPECT_EQ(one.samples.front(), a.samples.front());
  EXPECT_THROW(self_consistency(m.backbone, nullptr, m.prompt, vocab, {0, 1.0, 0, 0, 8}), Error);
}

TEST(RandomClusters, ExactPartition) {
  const std::vector<std::size_t> sizes{5, 3, 12};
  const auto labels = random_cluster_partition(20, sizes, 9);
  std::vector<std::size_t> counts(4, 0);
  for (int l : labels) ++counts[static_cast<std::size_t>(l)];
  EXPECT_EQ(counts, (std::vector<std::size_t>{0, 5, 3, 12}));
  EXPECT_EQ(labels, random_cluster_partition(20, sizes, 9));
  EXPECT_NE(labels, random_cluster_partition(20, sizes, 10));
  EXPECT_THROW(random_cluster_partition(21, sizes, 9), Error);
}

TEST(RandomClusters, TagMixMatchesGlobal) {
  // Four tags with generator shares 0.4/0.3/0.2/0.1.
  const std::size_t n = 4000;
  std::vector<int> tag(n);
  for (std::size_t i = 0; i < n; ++i) tag[i] = i < 1600 ? 0 : i < 2800 ? 1 : i < 3600 ? 2 : 3;
  const double share[] = {0.4, 0.3, 0.2, 0.1};
  const std::vector<std::size_t> sizes{1500, 1000, 800, 500, 200};
  const auto labels = random_cluster_partition(n, sizes, 12);
  for (std::size_t c = 0; c < sizes.size(); ++c) {
    double counts[4] = {0, 0, 0, 0};
    for (std::size_t i = 0; i < n; ++i)
      if (labels[i] == static_cast<int>(c) + 1) ++counts[tag[i]];
    double chi2 = 0.0;
    for (int t = 0; t < 4; ++t) {
      const double e = share[t] * static_cast<double>(sizes[c]);
      chi2 += (counts[t] - e) * (counts[t] - e) / e;
    }
    EXPECT_LT(chi2, 16.27) << "cluster " << c + 1;  // df 3, p = 0.001
  }
}

TEST(GenerationRecords, JsonlRoundTrip) {
  GenerationResult g;
  g.text = "12+3=15";
  g.weights = {0.2, 0.5, 0.5};
  g.seconds = 0.25;
  g.peak_bytes = 1024;
  auto r = make_record("add-1", "elrea", "12+3", g);
  EXPECT_EQ(r.answer, std::optional<std::string>("15"));
  EXPECT_EQ(r.w_base, 0.2);
  EXPECT_EQ(r.weights, (std::vector<double>{0.5, 0.5}));
  GenerationResult bad;
  bad.text = "nothing";
  const auto r2 = make_record("add-2", "base", "1+1", bad);
  EXPECT_FALSE(r2.answer);

  const auto dir = std::filesystem::temp_directory_path() / "elrea_gen_test";
  std::filesystem::create_directories(dir);
  const std::vector<GenerationRecord> recs{r, r2};
  save_generations(dir / "g.jsonl", recs);
  const auto back = load_generations(dir / "g.jsonl");
  ASSERT_EQ(back.size(), 2u);
  EXPECT_EQ(back[0].to_json(), r.to_json());
  EXPECT_EQ(back[1].to_json(), r2.to_json());
  const auto j = r.to_json();
  EXPECT_FALSE(j.contains("wall_seconds"));
  for (const char* key : {"id", "prompt", "generation", "answer", "weights", "w_base", "peak_bytes"})
    EXPECT_TRUE(j.contains(key)) << key;
  std::filesystem::remove_all(dir);
}

}  // namespace
