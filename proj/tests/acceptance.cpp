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

// Acceptance checks, one PASS/FAIL line per criterion. Criteria 10-12 run
// the desk configuration twice in temporary directories (baselines off).
//
//   acceptance [--config configs/desk.conf] [--keep DIR] [--only N]

#include "elrea/pipeline.hpp"

#include "support/fixtures.hpp"

#include <CLI11.hpp>

namespace {

using namespace elrea;
namespace fs = std::filesystem;

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof(buf), f, args...);
  return buf;
}

Vector random_vector(Rng& rng, Eigen::Index n) { return Vector::NullaryExpr(n, [&] { return rng.normal(); }); }

// 1. analytic adapter gradient vs central differences on every coordinate
Outcome gradient_check() {
  Stopwatch clock;
  double worst = 0.0;
  std::size_t largest = 0;
  for (std::uint64_t seed = 1; seed <= 10; ++seed) {
    auto c = testing::tiny_config();
    c.n_kv_heads = seed % 2 ? 1 : 0;
    const auto params = init_backbone(c, seed);
    auto adapter = init_lora(c, 2, seed + 100);
    Rng rng(seed + 200);
    testing::randomize(adapter, rng, 0.15);
    const auto seq = testing::random_sequence(rng, c, 11, 6);
    LossMask mask(seq.size(), false);
    for (std::size_t t = 1; t < seq.size(); ++t) mask[t] = true;
    largest = std::max(largest, params.size() + adapter.size());
    const Vector g = grad(params, &adapter, seq, mask, "adapter-only");
    const Vector x = flatten(adapter);
    auto f = [&](const Vector& v) {
      const auto a = unflatten(v, adapter);
      return ntp_loss(forward(params, &a, seq), seq, mask);
    };
    Vector fd(x.size());
    for (Eigen::Index i = 0; i < x.size(); ++i) fd(i) = testing::central_difference(f, x, i, 1e-5);
    worst = std::max(worst, (g - fd).norm() / fd.norm());
  }
  const double secs = clock.seconds();
  return {worst <= 1e-6 && secs < 60.0 && largest <= 10000,
          fmt("max relative error %.2e over 10 seeds (<= 1e-6), %zu parameters, %.1fs", worst, largest, secs)};
}

// 2. adam_feature vs a per-coordinate reference Adam step
Outcome adam_feature_oracle() {
  Rng rng(8);
  double worst = 0.0;
  for (int c = 0; c < 100; ++c) {
    const int dim = 1 + static_cast<int>(rng.below(64));
    AdamState s = AdamState::fresh(dim);
    s.step = rng.below(1000);
    for (int i = 0; i < dim; ++i) {
      s.m(i) = 0.1 * rng.normal();
      s.v(i) = 0.01 * rng.uniform();
    }
    const Vector g = random_vector(rng, dim);
    const double eta = 1e-3 * rng.uniform();
    const double t = static_cast<double>(s.step + 1);
    const Vector f = adam_feature(g, s, eta);
    for (int i = 0; i < dim; ++i) {
      const double m = 0.9 * s.m(i) + 0.1 * g(i);
      const double v = 0.999 * s.v(i) + 0.001 * g(i) * g(i);
      const double mh = m / (1.0 - std::pow(0.9, t));
      const double vh = v / (1.0 - std::pow(0.999, t));
      const double param_delta = -eta * mh / (std::sqrt(vh) + 1e-8);  // theta_new - theta_old
      worst = std::max(worst, std::abs(f(i) + param_delta));
    }
  }
  return {worst <= 1e-12, fmt("100 cases, max |feature - step| = %.2e (<= 1e-12)", worst)};
}

// 3. cosine preservation at d_proj 8192 and its failure at 512
std::vector<double> jl_deviations(int d_proj, Eigen::Index dim, std::uint64_t seed) {
  Rng rng(seed);
  const int pairs = 200;
  Matrix xs(dim, 2 * pairs);
  std::vector<double> truth;
  for (int p = 0; p < pairs; ++p) {
    const Vector x = random_vector(rng, dim).normalized();
    Vector z = random_vector(rng, dim);
    z = (z - z.dot(x) * x).normalized();
    const double c = rng.range(-1.0, 1.0);
    const Vector y = (c * x + std::sqrt(1.0 - c * c) * z).normalized();
    xs.col(2 * p) = x;
    xs.col(2 * p + 1) = y;
    truth.push_back(x.dot(y));
  }
  const Matrix px = project_columns(xs, {seed + 1, d_proj, static_cast<std::size_t>(dim)});
  std::vector<double> dev;
  for (int p = 0; p < pairs; ++p)
    dev.push_back(std::abs(px.col(2 * p).dot(px.col(2 * p + 1)) / d_proj - truth[static_cast<std::size_t>(p)]));
  return dev;
}

Outcome projection_check() {
  const auto wide = jl_deviations(8192, 100000, 21);
  const auto narrow = jl_deviations(512, 100000, 21);
  auto within = [](const std::vector<double>& d) {
    return std::count_if(d.begin(), d.end(), [](double x) { return x <= 0.05; });
  };
  const auto w = within(wide), n = within(narrow);
  return {w >= 198 && n < 200, fmt("d_proj 8192: %ld/200 within 0.05 (max %.4f); d_proj 512: %ld/200 (max %.4f)", long(w),
                                   *std::max_element(wide.begin(), wide.end()), long(n),
                                   *std::max_element(narrow.begin(), narrow.end()))};
}

// 4. unit rows, scale invariance, cancellation
Outcome normalization_check() {
  const fs::path dir = fs::temp_directory_path() / ("elrea-accept-feat-" + std::to_string(::getpid()));
  fs::remove_all(dir);
  const auto c = testing::tiny_config();
  const auto backbone = init_backbone(c, 2);
  Rng rng(6);
  std::vector<TokenSequence> seqs;
  for (int i = 0; i < 40; ++i) seqs.push_back(testing::random_sequence(rng, c, 8 + i % 5, 3 + i % 3));
  std::vector<FeatureInput> inputs;
  for (std::size_t i = 0; i < seqs.size(); ++i) inputs.push_back({"x-" + std::to_string(100 + i), &seqs[i]});
  TrainConfig tc;
  tc.batch = 4;
  tc.lr = 1e-2;
  tc.seed = 3;
  train(backbone, init_lora(c, 2, 1), seqs, tc, [&](const EpochRecord& r) { save_epoch(dir / "run", r, tc.seed, "h"); });
  const auto run = load_run(dir / "run", 2);
  fs::remove_all(dir);
  const auto res = build_feature_matrix(backbone, run, inputs, {5, 8192, run[0].adapter.size()});
  double worst = 0.0;
  for (Eigen::Index i = 0; i < res.matrix.rows.rows(); ++i) worst = std::max(worst, std::abs(res.matrix.rows.row(i).norm() - 1.0));

  const Vector a = random_vector(rng, 8192), b = random_vector(rng, 8192);
  const Vector d1 = epoch_avg_normalize(std::vector<Vector>{a, b});
  const Vector d3 = epoch_avg_normalize(std::vector<Vector>{3.0 * a, 3.0 * b});
  const double scale_diff = (d1 - d3).cwiseAbs().maxCoeff();
  bool cancels = false;
  try {
    epoch_avg_normalize(std::vector<Vector>{a, -a});
  } catch (const Error& e) {
    cancels = e.code() == ErrorCode::kZeroDirection;
  }
  const bool ok = res.matrix.size() == seqs.size() && worst <= 1e-9 && scale_diff <= 1e-12 && cancels;
  return {ok, fmt("%zu rows, max | |row| - 1 | = %.1e; scale-by-3 diff %.1e; {v, -v} %s", res.matrix.size(), worst,
                  scale_diff, cancels ? "rejected as zero direction" : "NOT rejected")};
}

// Points around unit centers; ids in row order.
struct Blobs {
  FeatureMatrix features;
  std::vector<int> truth;
};

Blobs make_blobs(Rng& rng, const std::vector<Vector>& centers, const std::vector<int>& counts, double noise) {
  Blobs b;
  const int n = std::accumulate(counts.begin(), counts.end(), 0);
  const auto dim = centers[0].size();
  b.features.rows.resize(n, dim);
  int row = 0;
  for (std::size_t c = 0; c < centers.size(); ++c)
    for (int i = 0; i < counts[c]; ++i) {
      b.features.ids.push_back(fmt("p-%05d", row));
      const Vector v = centers[c] + noise / std::sqrt(double(dim)) * random_vector(rng, dim);
      b.features.rows.row(row++) = v.normalized().transpose();
      b.truth.push_back(static_cast<int>(c) + 1);
    }
  return b;
}

// 5. recovery, partition invariant, history bound, seed stability
Outcome clustering_check() {
  Rng rng(31);
  std::vector<Vector> centers;
  for (int c = 0; c < 4; ++c) centers.push_back(random_vector(rng, 128).normalized());
  const auto b = make_blobs(rng, centers, {250, 250, 250, 250}, 0.3);
  BirchParams p;
  p.k = 4;
  std::vector<std::vector<int>> runs;
  double min_ari = 1.0;
  bool partition = true, history = true;
  for (std::uint64_t seed : {1, 2, 3}) {
    const auto fitted = birch_fit(b.features, 600, p, seed);
    const auto m = rebalance(fitted, b.features, 600);
    for (const auto* mm : {&fitted, &m})
      partition = partition && std::accumulate(mm->sizes.begin(), mm->sizes.end(), std::size_t{0}) == b.features.size() &&
                  mm->labels.size() == b.features.size();
    history = history && m.history.size() <= 3;
    min_ari = std::min(min_ari, adjusted_rand_index(m.labels, b.truth));
    runs.push_back(m.labels);
  }
  double stability = 1.0;
  for (int i = 0; i < 3; ++i)
    for (int j = i + 1; j < 3; ++j) stability = std::min(stability, adjusted_rand_index(runs[i], runs[j]));
  return {min_ari >= 0.9 && partition && history && stability >= 0.8,
          fmt("ARI vs generator >= %.3f (>= 0.9), partition %s, history <= 3 %s, cross-seed ARI >= %.3f (>= 0.8)", min_ari,
              partition ? "holds" : "BROKEN", history ? "yes" : "NO", stability)};
}

// 6. one oversized cluster, K_initial 5 -> C 8 after one split
Outcome rebalance_check() {
  Rng rng(9);
  std::vector<Vector> axes;
  for (int i = 0; i < 9; ++i) axes.push_back(Vector::Unit(64, i));
  std::vector<Vector> centers(axes.begin(), axes.begin() + 4);
  for (int s = 0; s < 4; ++s) centers.push_back((axes[4] + 0.8 * axes[5 + static_cast<std::size_t>(s)]).normalized());
  const auto b = make_blobs(rng, centers, {10, 10, 10, 10, 50, 50, 50, 50}, 0.05);
  BirchParams p;
  p.threshold = 0.3;
  p.k = 5;
  const auto fitted = birch_fit(b.features, 5000, p, 4);
  const auto m = rebalance(fitted, b.features, 5000);
  const bool one_split = m.history.size() == 1 && m.history[0].split.size() == 1;
  return {fitted.clusters() == 5 && one_split && m.clusters() == 8,
          fmt("C %d -> %d after %zu iteration(s), %zu cluster(s) split", fitted.clusters(), m.clusters(), m.history.size(),
              m.history.empty() ? std::size_t{0} : m.history[0].split.size())};
}

// 7. routing weights against the direct formula
Outcome routing_check() {
  Rng rng(41);
  double sum_err = 0.0, base_err = 0.0, formula_err = 0.0;
  for (int t = 0; t < 500; ++t) {
    const int c = 2 + static_cast<int>(rng.below(9));
    std::vector<Vector> cents;
    for (int k = 0; k < c; ++k) cents.push_back(random_vector(rng, 32).normalized());
    const Vector d = random_vector(rng, 32).normalized();
    const auto r = route(d, cents);
    std::vector<double> cos;
    for (const auto& v : cents) cos.push_back(d.dot(v));
    const double mu = std::accumulate(cos.begin(), cos.end(), 0.0) / c;
    double var = 0.0;
    for (double x : cos) var += (x - mu) * (x - mu);
    const double sigma = std::sqrt(var / c);
    double z = 0.0;
    for (double x : cos) z += std::exp((x - mu) / sigma);
    double s = 0.0;
    for (int k = 0; k < c; ++k) {
      s += r.w[static_cast<std::size_t>(k)];
      formula_err = std::max(formula_err, std::abs(r.w[static_cast<std::size_t>(k)] - std::exp((cos[static_cast<std::size_t>(k)] - mu) / sigma) / z));
    }
    sum_err = std::max(sum_err, std::abs(s - 1.0));
    base_err = std::max(base_err, std::abs(r.w_base - (1.0 - *std::max_element(cos.begin(), cos.end()))));
  }
  const double h = std::sqrt(1.0 - 0.81);
  const std::vector<Vector> two{(Vector(2) << 0.9, h).finished(), (Vector(2) << -0.9, h).finished()};
  const auto r2 = route(Vector::Unit(2, 0), two);
  const bool closed = std::round(r2.w[0] * 1e4) == 8808 && std::round(r2.w[1] * 1e4) == 1192;
  const auto flat = weights_from_cosines(std::vector<double>{0.3, 0.3, 0.3});
  const bool uniform = flat.degenerate && std::abs(flat.w[0] - 1.0 / 3) < 1e-15 && std::abs(flat.w[2] - 1.0 / 3) < 1e-15;
  return {sum_err <= 1e-9 && base_err <= 1e-9 && formula_err <= 1e-9 && closed && uniform,
          fmt("|sum w - 1| <= %.1e, |w_base - (1 - max cos)| <= %.1e, formula diff %.1e; closed form %.4f/%.4f; sigma 0 -> %s",
              sum_err, base_err, formula_err, r2.w[0], r2.w[1], uniform ? "uniform" : "NOT uniform")};
}

std::vector<const LoraAdapter*> pointers(const std::vector<LoraAdapter>& v) {
  std::vector<const LoraAdapter*> out;
  for (const auto& a : v) out.push_back(&a);
  return out;
}

// 8. ensemble decoding identities
Outcome ensemble_check() {
  const auto c = testing::tiny_config();
  const auto backbone = init_backbone(c, 3);
  Rng rng(4);
  auto base = init_lora(c, 2, 10);
  testing::randomize(base, rng, 0.5);
  bool identical = true;
  for (int t = 0; t < 20; ++t) {
    const std::vector<int> prompt{Vocab::kBos, 3 + t % 7, 4 + t % 5, Vocab::kSep};
    const auto ref = generate_mix(backbone, AdapterMix::single(base), prompt, {10, 0.0, 0});
    RoutingWeights w;
    for (int k = 0; k < 3; ++k) w.w.push_back(rng.uniform());
    w.w_base = rng.uniform();
    const auto got = generate({&backbone, std::vector<const LoraAdapter*>(4, &base), {10, 0.0, 0}}, prompt, w);
    identical = identical && got.tokens == ref.tokens;
  }
  int scaling_ok = 0, oracle_ok = 0;
  for (int t = 0; t < 1000; ++t) {
    const int k = 1 + static_cast<int>(rng.below(6)), v = 2 + static_cast<int>(rng.below(30));
    std::vector<Vector> rows;
    std::vector<double> w;
    for (int i = 0; i < k; ++i) {
      rows.push_back(random_vector(rng, v));
      w.push_back(rng.uniform() + 1e-3);
    }
    int best = 0;
    double best_score = -std::numeric_limits<double>::infinity();
    for (int tok = 0; tok < v; ++tok) {
      double s = 0.0;
      for (int i = 0; i < k; ++i) s += w[static_cast<std::size_t>(i)] * rows[static_cast<std::size_t>(i)](tok);
      if (s > best_score) best_score = s, best = tok;
    }
    const int got = ensemble_next_token(rows, w);
    oracle_ok += got == best;
    std::vector<double> scaled = w;
    const double a = std::exp(rng.range(-5.0, 5.0));
    for (double& x : scaled) x *= a;
    scaling_ok += ensemble_next_token(rows, scaled) == got;
  }
  return {identical && scaling_ok == 1000 && oracle_ok == 1000,
          fmt("identical experts == base on 20 prompts: %s; scaling invariance %d/1000; brute-force oracle %d/1000",
              identical ? "yes" : "NO", scaling_ok, oracle_ok)};
}

// 9. MoE routing one-hot equivalence and routing/merging counterexample
Outcome moe_check() {
  const auto c = testing::tiny_config();
  const auto backbone = init_backbone(c, 3);
  Rng rng(4);
  std::vector<LoraAdapter> adapters;
  for (int k = 0; k < 4; ++k) {
    adapters.push_back(init_lora(c, 2, 10 + static_cast<std::uint64_t>(k)));
    testing::randomize(adapters.back(), rng, 0.5);
  }
  const auto ptrs = pointers(adapters);
  const std::vector<int> prompt{Vocab::kBos, 5, 7, 9, Vocab::kSep};
  double onehot = 0.0;
  for (std::size_t k = 0; k < 4; ++k) {
    std::vector<double> w(4, 0.0);
    w[k] = 1.0;
    const Matrix ref = forward_tokens(backbone, AdapterMix::single(adapters[k]), prompt);
    onehot = std::max(onehot, (moe_routing_forward(backbone, ptrs, w, prompt) - ref).cwiseAbs().maxCoeff());
  }
  // Rank-1 experts on orthogonal directions.
  std::vector<LoraAdapter> pair(2, adapters[0].zeros_like());
  for (int k = 0; k < 2; ++k) {
    auto& e = pair[static_cast<std::size_t>(k)];
    e.rank = 1;
    e.alpha = 4.0;
    for (auto& [_, p] : e.layers) {
      p.a = Matrix::Zero(p.a.rows(), 1);
      p.b = Matrix::Zero(p.b.rows(), 1);
      p.a(k, 0) = 1.0;
      p.b(k, 0) = 1.0;
    }
  }
  const auto pp = pointers(pair);
  const std::vector<double> half{1.0, 1.0};
  const Matrix routed = moe_routing_forward(backbone, pp, half, prompt);
  const Matrix merged = forward_tokens(backbone, AdapterMix::single(moe_merge(pp, half)), prompt);
  const double gap = (routed - merged).cwiseAbs().maxCoeff();
  return {onehot <= 1e-10 && gap > 1e-3, fmt("one-hot max diff %.1e (<= 1e-10); routed vs merged logits differ by %.3e (> 1e-3)", onehot, gap)};
}

// 10-12 share two desk runs.
struct DeskRuns {
  fs::path a, b;
  double seconds_a = 0.0;
  std::string error;
};

DeskRuns run_desk(const fs::path& config, const fs::path& root) {
  DeskRuns r;
  r.a = root / "run-a";
  r.b = root / "run-b";
  try {
    auto cfg = parse_config(read_file(config), config.string());
    cfg.run_moe_routing = cfg.run_moe_merging = cfg.run_mole = cfg.run_lora_ens = false;
    cfg.run_self_consistency = cfg.run_random_cluster = cfg.run_uniform = false;
    for (const auto& dir : {r.a, r.b}) {
      fs::remove_all(dir);
      cfg.run_dir = dir.string();
      Stopwatch clock;
      Pipeline(cfg, nullptr).run_all();
      if (dir == r.a) r.seconds_a = clock.seconds();
      std::cerr << "  desk run " << dir.string() << " done\n";
    }
  } catch (const std::exception& e) {
    r.error = e.what();
  }
  return r;
}

Outcome desk_end_to_end(const DeskRuns& runs, const fs::path& config) {
  if (!runs.error.empty()) return {false, "pipeline failed: " + runs.error};
  auto cfg = parse_config(read_file(config));
  cfg.run_dir = runs.a.string();
  Pipeline p(cfg, nullptr);
  const auto base = p.read_eval("base"), elrea = p.read_eval("elrea");
  const auto model = load_cluster_model(runs.a / "clusters");
  std::map<std::string, std::string> tags;
  for (const auto& e : load_jsonl(runs.a / "data/train.jsonl")) tags[e.id] = e.source_tag;
  const auto share = cluster_report(model, tags).dominant_share();
  const double min_share = *std::min_element(share.begin(), share.end());
  std::size_t test_n = 0;
  for (const auto& t : base.tags) test_n += t.total;
  const bool ok = elrea.micro() >= base.micro() && min_share >= 0.6 && runs.seconds_a < 1800.0;
  return {ok, fmt("%zu train / %zu test, C = %d: ELREA %.2f%% vs base %.2f%% exact match; min dominant share %.3f (>= 0.6); %.0fs",
                  model.ids.size(), test_n, model.clusters(), 100 * elrea.micro(), 100 * base.micro(), min_share,
                  runs.seconds_a)};
}

Outcome efficiency_check(const DeskRuns& runs, const fs::path& config) {
  if (!runs.error.empty()) return {false, "pipeline failed: " + runs.error};
  auto cfg = parse_config(read_file(config));
  std::string detail;
  bool ok = true;
  for (const auto& dir : {runs.a, runs.b}) {
    cfg.run_dir = dir.string();
    const auto e = Pipeline(cfg, nullptr).efficiency();
    ok = ok && e.ratio() >= 1.5 && e.ratio() <= 4.0;
    detail += fmt("%s%.2f (base %.1fs; features %.1f+%.1fs, experts %.1fs)", detail.empty() ? "" : "; ", e.ratio(),
                  e.base_finetune, e.train_features, e.test_features, e.experts);
  }
  return {ok, "fine-tuning ratio in [1.5, 4]: " + detail};
}

Outcome determinism_check(const DeskRuns& runs) {
  if (!runs.error.empty()) return {false, "pipeline failed: " + runs.error};
  const auto diff = compare_run_dirs(runs.a, runs.b);
  const auto n = artifact_files(runs.a).size();
  std::string detail = fmt("%zu artifacts compared, %zu differ", n, diff.size());
  for (std::size_t i = 0; i < std::min<std::size_t>(diff.size(), 5); ++i) detail += (i ? ", " : ": ") + diff[i];
  return {diff.empty() && n > 0, detail};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"acceptance checks"};
  std::string config = std::string(ELREA_SOURCE_DIR) + "/configs/desk.conf";
  std::string keep;
  std::vector<int> only;
  app.add_option("--config", config, "desk configuration")->check(CLI::ExistingFile);
  app.add_option("--keep", keep, "run the desk pipeline here and keep it");
  app.add_option("--only", only, "criteria to run")->check(CLI::Range(1, 12));
  CLI11_PARSE(app, argc, argv);

  auto wanted = [&](int n) { return only.empty() || std::find(only.begin(), only.end(), n) != only.end(); };
  const fs::path root = keep.empty() ? fs::temp_directory_path() / ("elrea-acceptance-" + std::to_string(::getpid())) : fs::path(keep);

  const std::vector<std::pair<std::string, std::function<Outcome()>>> unit = {
      {"gradient check", gradient_check},       {"adam feature", adam_feature_oracle},
      {"random projection", projection_check},  {"normalization", normalization_check},
      {"clustering recovery", clustering_check}, {"rebalance arithmetic", rebalance_check},
      {"routing weights", routing_check},       {"ensemble identities", ensemble_check},
      {"moe routing/merging", moe_check},
  };
  std::vector<std::pair<int, std::pair<std::string, Outcome>>> results;
  for (std::size_t i = 0; i < unit.size(); ++i) {
    const int n = static_cast<int>(i) + 1;
    if (!wanted(n)) continue;
    Outcome o;
    try {
      o = unit[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("threw: ") + e.what()};
    }
    std::printf("criterion %2d %-22s %s  %s\n", n, unit[i].first.c_str(), o.pass ? "PASS" : "FAIL", o.detail.c_str());
    std::fflush(stdout);
    results.push_back({n, {unit[i].first, o}});
  }
  if (wanted(10) || wanted(11) || wanted(12)) {
    const auto runs = run_desk(config, root);
    const std::vector<std::tuple<int, std::string, std::function<Outcome()>>> desk = {
        {10, "desk end-to-end", [&] { return desk_end_to_end(runs, config); }},
        {11, "efficiency ratio", [&] { return efficiency_check(runs, config); }},
        {12, "determinism", [&] { return determinism_check(runs); }},
    };
    for (const auto& [n, name, fn] : desk) {
      if (!wanted(n)) continue;
      Outcome o;
      try {
        o = fn();
      } catch (const std::exception& e) {
        o = {false, std::string("threw: ") + e.what()};
      }
      std::printf("criterion %2d %-22s %s  %s\n", n, name.c_str(), o.pass ? "PASS" : "FAIL", o.detail.c_str());
      std::fflush(stdout);
      results.push_back({n, {name, o}});
    }
    if (keep.empty()) fs::remove_all(root);
  }
  const auto failed = std::count_if(results.begin(), results.end(), [](const auto& r) { return !r.second.second.pass; });
  std::printf("%zu/%zu criteria passed\n", results.size() - static_cast<std::size_t>(failed), results.size());
  return failed ? 1 : 0;
}
