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

// Stage orchestration over a run directory. Every stage writes its outputs
// plus manifest.json (config hash, seeds, upstream manifest hashes, output
// file hashes). Wall-clock timings go to timing sidecars, which are the only
// files allowed to differ between identical reruns.

#pragma once

#include "elrea/clusterer.hpp"
#include "elrea/ensemble.hpp"

#include <iostream>
#include <variant>

namespace elrea {

// ---- configuration ----

inline const std::vector<std::string>& seed_names() {
  static const std::vector<std::string> kNames = {"data",    "init",     "shuffle", "projection",
                                                  "cluster", "sampling", "tie"};
  return kNames;
}

struct PipelineConfig {
  std::string run_dir = "runs/desk";

  // data
  std::string train_jsonl;  // empty: synthetic corpus
  std::string test_jsonl;
  std::string families = "add,reverse,sort,copy";
  int train_per_family = 1000;
  int test_per_family = 100;
  int pretrain_per_family = 1000;

  // backbone
  int d_model = 64;
  int n_layers = 2;
  int n_heads = 4;
  int n_kv_heads = 0;
  int d_ff = 128;
  int l_max = 256;
  bool tie_embeddings = false;
  bool pretrain = true;
  int pretrain_epochs = 2;
  double pretrain_lr = 3e-3;
  int pretrain_batch = 16;

  // adapters
  int rank = 8;
  double alpha = 0.0;  // 0 means 4 r
  double dropout = 0.1;
  int epochs = 2;
  double lr_base = 3e-3;
  double lr_expert = 1.2e-3;
  int batch = 16;

  // features and clustering
  int d_proj = 8192;
  int feature_chunk = 64;
  int sample_cap = 5000;
  int k_initial = 5;
  double birch_threshold = 0.5;
  int birch_branching = 50;
  std::string linkage = "ward";  // single or ward
  double rebalance_ratio = 5.0;
  int rebalance_max_iter = 3;

  // decoding
  int max_new_tokens = 32;
  int top_k = 0;  // 0: all experts

  // baselines
  bool run_moe_routing = true;
  bool run_moe_merging = true;
  bool run_mole = true;
  bool run_lora_ens = true;
  bool run_self_consistency = true;
  bool run_random_cluster = true;
  bool run_uniform = true;
  int mole_epochs = 1;
  double mole_lr = 1.2e-3;
  int lora_ens_extra = 3;
  int sc_samples = 5;
  double sc_temperature = 1.0;

  // seeds; -1 derives the named seed from the master seed
  std::int64_t seed = 1;
  std::map<std::string, std::int64_t> seeds = [] {
    std::map<std::string, std::int64_t> m;
    for (const auto& n : seed_names()) m[n] = -1;
    return m;
  }();

  std::uint64_t seed_for(const std::string& name) const {
    const std::int64_t v = seeds.at(name);
    return v >= 0 ? static_cast<std::uint64_t>(v) : derive_seed(static_cast<std::uint64_t>(seed), name);
  }

  LmConfig model() const {
    LmConfig c;
    c.vocab_size = Vocab::printable_ascii().size();
    c.d_model = d_model;
    c.n_layers = n_layers;
    c.n_heads = n_heads;
    c.n_kv_heads = n_kv_heads;
    c.d_ff = d_ff;
    c.l_max = l_max;
    c.tie_embeddings = tie_embeddings;
    return c;
  }

  std::vector<std::string> family_list() const {
    std::vector<std::string> out;
    std::istringstream in(families);
    std::string f;
    while (std::getline(in, f, ','))
      if (!f.empty()) out.push_back(f);
    return out;
  }

  void validate() const {
    model().validate();
    require(rank >= 1 && rank <= d_model, ErrorCode::kInvalidArgument, "lora.rank must be in [1, d_model]");
    require(epochs >= 1 && batch >= 1 && pretrain_epochs >= 1 && pretrain_batch >= 1 && mole_epochs >= 1,
            ErrorCode::kInvalidArgument, "epochs and batch sizes must be >= 1");
    require(lr_base > 0 && lr_expert > 0 && pretrain_lr > 0 && mole_lr > 0, ErrorCode::kInvalidArgument,
            "learning rates must be > 0");
    require(dropout >= 0.0 && dropout < 1.0, ErrorCode::kInvalidArgument, "lora.dropout must be in [0, 1)");
    require(d_proj >= 1 && feature_chunk >= 1 && sample_cap >= 2, ErrorCode::kInvalidArgument,
            "feature and sample sizes must be positive");
    parse_linkage(linkage);
    require(k_initial >= 2 && rebalance_max_iter >= 0 && rebalance_ratio > 1.0, ErrorCode::kInvalidArgument,
            "bad clustering settings");
    require(max_new_tokens >= 1 && top_k >= 0 && sc_samples >= 1 && sc_temperature > 0 && lora_ens_extra >= 0,
            ErrorCode::kInvalidArgument, "bad decoding settings");
    if (train_jsonl.empty()) {
      require(!family_list().empty(), ErrorCode::kInvalidArgument, "data.families is empty");
      for (const auto& f : family_list())
        require(synth::registry().count(f) > 0, ErrorCode::kUnknownFamily, f);
      require(train_per_family >= 1 && test_per_family >= 1 && pretrain_per_family >= 1,
              ErrorCode::kInvalidArgument, "per-family counts must be >= 1");
    } else {
      require(!test_jsonl.empty(), ErrorCode::kInvalidArgument, "data.test_jsonl is required with data.train_jsonl");
    }
  }
};

namespace detail {

enum class FieldType { kInt, kFloat, kString, kBool };

struct ConfigField {
  std::string key;
  FieldType type;
  std::variant<int*, std::int64_t*, double*, std::string*, bool*> target;
  bool hashed = true;
};

inline const char* type_name(FieldType t) {
  switch (t) {
    case FieldType::kInt: return "int";
    case FieldType::kFloat: return "float";
    case FieldType::kString: return "string";
    case FieldType::kBool: return "bool";
  }
  return "?";
}

inline std::vector<ConfigField> config_fields(PipelineConfig& c) {
  using T = FieldType;
  std::vector<ConfigField> f = {
      {"run_dir", T::kString, &c.run_dir, false},
      {"data.train_jsonl", T::kString, &c.train_jsonl},
      {"data.test_jsonl", T::kString, &c.test_jsonl},
      {"data.families", T::kString, &c.families},
      {"data.train_per_family", T::kInt, &c.train_per_family},
      {"data.test_per_family", T::kInt, &c.test_per_family},
      {"data.pretrain_per_family", T::kInt, &c.pretrain_per_family},
      {"model.d_model", T::kInt, &c.d_model},
      {"model.n_layers", T::kInt, &c.n_layers},
      {"model.n_heads", T::kInt, &c.n_heads},
      {"model.n_kv_heads", T::kInt, &c.n_kv_heads},
      {"model.d_ff", T::kInt, &c.d_ff},
      {"model.l_max", T::kInt, &c.l_max},
      {"model.tie_embeddings", T::kBool, &c.tie_embeddings},
      {"pretrain.enabled", T::kBool, &c.pretrain},
      {"pretrain.epochs", T::kInt, &c.pretrain_epochs},
      {"pretrain.lr", T::kFloat, &c.pretrain_lr},
      {"pretrain.batch", T::kInt, &c.pretrain_batch},
      {"lora.rank", T::kInt, &c.rank},
      {"lora.alpha", T::kFloat, &c.alpha},
      {"lora.dropout", T::kFloat, &c.dropout},
      {"train.epochs", T::kInt, &c.epochs},
      {"train.lr_base", T::kFloat, &c.lr_base},
      {"train.lr_expert", T::kFloat, &c.lr_expert},
      {"train.batch", T::kInt, &c.batch},
      {"features.d_proj", T::kInt, &c.d_proj},
      {"features.chunk", T::kInt, &c.feature_chunk, false},
      {"cluster.sample_cap", T::kInt, &c.sample_cap},
      {"cluster.k_initial", T::kInt, &c.k_initial},
      {"cluster.threshold", T::kFloat, &c.birch_threshold},
      {"cluster.branching", T::kInt, &c.birch_branching},
      {"cluster.linkage", T::kString, &c.linkage},
      {"cluster.rebalance_ratio", T::kFloat, &c.rebalance_ratio},
      {"cluster.rebalance_max_iter", T::kInt, &c.rebalance_max_iter},
      {"decode.max_new_tokens", T::kInt, &c.max_new_tokens},
      {"decode.top_k", T::kInt, &c.top_k, false},
      {"baseline.moe_routing", T::kBool, &c.run_moe_routing, false},
      {"baseline.moe_merging", T::kBool, &c.run_moe_merging, false},
      {"baseline.mole", T::kBool, &c.run_mole, false},
      {"baseline.lora_ens", T::kBool, &c.run_lora_ens, false},
      {"baseline.self_consistency", T::kBool, &c.run_self_consistency, false},
      {"baseline.random_cluster", T::kBool, &c.run_random_cluster, false},
      {"baseline.uniform", T::kBool, &c.run_uniform, false},
      {"mole.epochs", T::kInt, &c.mole_epochs},
      {"mole.lr", T::kFloat, &c.mole_lr},
      {"lora_ens.extra", T::kInt, &c.lora_ens_extra},
      {"self_consistency.samples", T::kInt, &c.sc_samples},
      {"self_consistency.temperature", T::kFloat, &c.sc_temperature},
      {"seed", T::kInt, &c.seed},
  };
  for (auto& [name, v] : c.seeds) f.push_back({"seed." + name, T::kInt, &v});
  return f;
}

inline std::string field_value(const ConfigField& f) {
  return std::visit(
      [](auto* p) -> std::string {
        using P = std::remove_pointer_t<decltype(p)>;
        if constexpr (std::is_same_v<P, std::string>) return *p;
        else if constexpr (std::is_same_v<P, bool>) return *p ? "true" : "false";
        else if constexpr (std::is_same_v<P, double>) return format_double(*p);
        else return std::to_string(*p);
      },
      f.target);
}

inline std::string trim(std::string_view s) {
  const auto a = s.find_first_not_of(" \t\r");
  if (a == std::string_view::npos) return "";
  const auto b = s.find_last_not_of(" \t\r");
  return std::string(s.substr(a, b - a + 1));
}

inline void set_field(const ConfigField& f, const std::string& value, const std::string& where) {
  auto bad = [&] { return Error(ErrorCode::kParse, where + ": bad " + type_name(f.type) + " value '" + value + "'"); };
  std::visit(
      [&](auto* p) {
        using P = std::remove_pointer_t<decltype(p)>;
        if constexpr (std::is_same_v<P, std::string>) {
          *p = value == "\"\"" ? "" : value;
        } else if constexpr (std::is_same_v<P, bool>) {
          if (value == "true") *p = true;
          else if (value == "false") *p = false;
          else throw bad();
        } else if constexpr (std::is_same_v<P, double>) {
          char* end = nullptr;
          const double v = std::strtod(value.c_str(), &end);
          if (value.empty() || *end != '\0' || !std::isfinite(v)) throw bad();
          *p = v;
        } else {
          char* end = nullptr;
          errno = 0;
          const long long v = std::strtoll(value.c_str(), &end, 10);
          if (value.empty() || *end != '\0' || errno != 0) throw bad();
          if constexpr (std::is_same_v<P, int>) {
            if (v < std::numeric_limits<int>::min() || v > std::numeric_limits<int>::max()) throw bad();
            *p = static_cast<int>(v);
          } else {
            *p = v;
          }
        }
      },
      f.target);
}

}  // namespace detail

/// Config text: one "<type> <key> = <value>" per line, '#' comments (whole
/// line, or trailing after whitespace).
///   float train.lr_base = 3e-3
inline PipelineConfig parse_config(const std::string& text, const std::string& origin = "config") {
  PipelineConfig cfg;
  auto fields = detail::config_fields(cfg);
  std::set<std::string> seen;
  std::istringstream in(text);
  std::string line;
  for (std::size_t n = 1; std::getline(in, line); ++n) {
    const std::string t = detail::trim(line);
    if (t.empty() || t.front() == '#') continue;
    const std::string where = origin + ":" + std::to_string(n);
    const auto eq = t.find('=');
    require(eq != std::string::npos, ErrorCode::kParse, where + ": expected '<type> <key> = <value>'");
    std::istringstream head(t.substr(0, eq));
    std::string type, key, extra;
    head >> type >> key;
    require(!type.empty() && !key.empty() && !(head >> extra), ErrorCode::kParse,
            where + ": expected '<type> <key> = <value>'");
    auto it = std::find_if(fields.begin(), fields.end(), [&](const auto& f) { return f.key == key; });
    require(it != fields.end(), ErrorCode::kParse, where + ": unknown key '" + key + "'");
    require(type == detail::type_name(it->type), ErrorCode::kParse,
            where + ": key '" + key + "' has type " + detail::type_name(it->type) + ", not " + type);
    require(seen.insert(key).second, ErrorCode::kParse, where + ": duplicate key '" + key + "'");
    std::string value = t.substr(eq + 1);
    // '#' after whitespace starts a trailing comment
    for (std::size_t h = value.find('#'); h != std::string::npos; h = value.find('#', h + 1))
      if (h > 0 && (value[h - 1] == ' ' || value[h - 1] == '\t')) {
        value.resize(h);
        break;
      }
    detail::set_field(*it, detail::trim(value), where);
  }
  cfg.validate();
  return cfg;
}

/// Every key in declaration order, in the parse_config format.
inline std::string config_text(const PipelineConfig& c, bool hashed_only = false) {
  PipelineConfig copy = c;
  std::string out;
  for (const auto& f : detail::config_fields(copy)) {
    if (hashed_only && !f.hashed) continue;
    std::string v = detail::field_value(f);
    if (v.empty()) v = "\"\"";
    out += std::string(detail::type_name(f.type)) + " " + f.key + " = " + v + "\n";
  }
  return out;
}

/// Hash of everything that influences artifacts (run_dir, toggles and
/// top-k are excluded).
inline std::string config_hash(const PipelineConfig& c) {
  Fnv1a h;
  h.update(config_text(c, true));
  return hex64(h.digest());
}

/// Reads a config file; ELREA_RUN_DIR overrides run_dir.
inline PipelineConfig load_config(const std::filesystem::path& path) {
  require(std::filesystem::exists(path), ErrorCode::kMissingArtifact, "config file " + path.string());
  PipelineConfig cfg = parse_config(read_file(path), path.string());
  if (const char* dir = std::getenv("ELREA_RUN_DIR"); dir && *dir) cfg.run_dir = dir;
  return cfg;
}

// ---- evaluation ----

/// Extracted answers compared after trimming; a gold string without '=' is
/// taken whole.
inline bool exact_match(std::string_view pred, std::string_view gold) {
  const auto p = extract_answer(pred);
  if (!p) return false;
  const auto g = extract_answer(gold);
  return *p == (g ? *g : detail::trim(gold));
}

struct TagScore {
  std::string tag;
  std::size_t correct = 0;
  std::size_t total = 0;
  double accuracy() const { return total ? static_cast<double>(correct) / static_cast<double>(total) : 0.0; }
};

struct EvalReport {
  std::string method;
  std::vector<TagScore> tags;  // sorted by tag

  double micro() const {
    std::size_t c = 0, n = 0;
    for (const auto& t : tags) c += t.correct, n += t.total;
    return n ? static_cast<double>(c) / static_cast<double>(n) : 0.0;
  }

  double macro() const {
    if (tags.empty()) return 0.0;
    double s = 0.0;
    for (const auto& t : tags) s += t.accuracy();
    return s / static_cast<double>(tags.size());
  }

  const TagScore* find(const std::string& tag) const {
    for (const auto& t : tags)
      if (t.tag == tag) return &t;
    return nullptr;
  }

  /// Percentages; delta columns are signed and relative to `base`.
  std::string csv(const EvalReport* base = nullptr) const {
    auto pct = [](double v) {
      char buf[32];
      std::snprintf(buf, sizeof(buf), "%.2f", 100.0 * v);
      return std::string(buf);
    };
    auto delta = [](double v) {
      char buf[32];
      std::snprintf(buf, sizeof(buf), "%+.2f", 100.0 * v);
      return std::string(buf);
    };
    std::string out = "tag,correct,total,accuracy";
    if (base) out += ",base_accuracy,delta";
    out += "\n";
    for (const auto& t : tags) {
      out += t.tag + "," + std::to_string(t.correct) + "," + std::to_string(t.total) + "," + pct(t.accuracy());
      if (base) {
        const TagScore* b = base->find(t.tag);
        const double ba = b ? b->accuracy() : 0.0;
        out += "," + pct(ba) + "," + delta(t.accuracy() - ba);
      }
      out += "\n";
    }
    std::size_t c = 0, n = 0;
    for (const auto& t : tags) c += t.correct, n += t.total;
    out += "micro," + std::to_string(c) + "," + std::to_string(n) + "," + pct(micro());
    if (base) out += "," + pct(base->micro()) + "," + delta(micro() - base->micro());
    out += "\nmacro,,," + pct(macro());
    if (base) out += "," + pct(base->macro()) + "," + delta(macro() - base->macro());
    out += "\n";
    return out;
  }
};

inline EvalReport evaluate_records(const std::string& method, std::span<const GenerationRecord> records,
                                   const std::map<std::string, const Example*>& gold) {
  std::map<std::string, TagScore> by_tag;
  for (const auto& r : records) {
    auto it = gold.find(r.id);
    require(it != gold.end(), ErrorCode::kInvalidArgument, "generation for unknown test id '" + r.id + "'");
    TagScore& s = by_tag[it->second->source_tag];
    s.tag = it->second->source_tag;
    ++s.total;
    if (r.answer && exact_match("=" + *r.answer, it->second->response)) ++s.correct;
  }
  EvalReport report{method, {}};
  for (auto& [_, s] : by_tag) report.tags.push_back(std::move(s));
  return report;
}

// ---- stage bookkeeping ----

/// Timing sidecars and resume logs are excluded from manifests and from
/// rerun comparisons.
inline bool is_volatile_artifact(const std::filesystem::path& p) {
  const std::string name = p.filename().string();
  return name == "timing.csv" || name.ends_with(".timing.csv") || name.ends_with(".progress");
}

inline std::vector<std::filesystem::path> artifact_files(const std::filesystem::path& dir) {
  std::vector<std::filesystem::path> out;
  if (!std::filesystem::exists(dir)) return out;
  for (const auto& e : std::filesystem::recursive_directory_iterator(dir))
    if (e.is_regular_file() && !is_volatile_artifact(e.path())) out.push_back(std::filesystem::relative(e.path(), dir));
  std::sort(out.begin(), out.end());
  return out;
}

/// Relative paths of files that differ (or exist on one side only),
/// ignoring volatile artifacts.
inline std::vector<std::string> compare_run_dirs(const std::filesystem::path& a, const std::filesystem::path& b) {
  const auto fa = artifact_files(a), fb = artifact_files(b);
  std::set<std::filesystem::path> all(fa.begin(), fa.end());
  all.insert(fb.begin(), fb.end());
  std::vector<std::string> diff;
  for (const auto& rel : all) {
    const bool ina = std::filesystem::exists(a / rel), inb = std::filesystem::exists(b / rel);
    if (!ina || !inb || read_file(a / rel) != read_file(b / rel)) diff.push_back(rel.string());
  }
  return diff;
}

struct TimingRow {
  std::string step;
  double seconds = 0.0;
};

inline std::string timing_csv(std::span<const TimingRow> rows) {
  std::string out = "step,seconds\n";
  for (const auto& r : rows) out += r.step + "," + format_double(r.seconds) + "\n";
  return out;
}

inline std::vector<TimingRow> read_timing(const std::filesystem::path& path) {
  std::vector<TimingRow> out;
  if (!std::filesystem::exists(path)) return out;
  std::istringstream in(read_file(path));
  std::string line;
  std::getline(in, line);
  while (std::getline(in, line)) {
    const auto comma = line.rfind(',');
    if (comma == std::string::npos) continue;
    out.push_back({line.substr(0, comma), std::stod(line.substr(comma + 1))});
  }
  return out;
}

inline const std::vector<std::string>& method_names() {
  static const std::vector<std::string> kMethods = {"base",         "elrea", "moe-routing",      "moe-merging",
                                                    "mole",         "lora-ens", "self-consistency", "random-cluster",
                                                    "uniform"};
  return kMethods;
}

inline const std::vector<std::string>& baseline_names() {
  static const std::vector<std::string> kNames = {"mole", "lora-ens", "random-cluster"};
  return kNames;
}

struct StageContext {
  std::filesystem::path dir;
  std::vector<TimingRow> timing;
  Json info = Json::object();
};

class Pipeline {
 public:
  explicit Pipeline(PipelineConfig cfg, std::ostream* log = &std::cerr)
      : cfg_(std::move(cfg)), hash_(config_hash(cfg_)), log_(log) {
    cfg_.validate();
  }

  const PipelineConfig& config() const { return cfg_; }
  const std::string& hash() const { return hash_; }
  std::filesystem::path root() const { return cfg_.run_dir; }

  static std::string stage_dir(const std::string& stage) {
    static const std::map<std::string, std::string> kDirs = {
        {"data", "data"},           {"pretrain", "pretrain"}, {"train-base", "base"},
        {"grad-features", "features"}, {"cluster", "clusters"}, {"train-experts", "experts"},
        {"route", "routing"},       {"report", "report"}};
    if (auto it = kDirs.find(stage); it != kDirs.end()) return it->second;
    if (stage.starts_with("baseline-")) return "baselines/" + stage.substr(9);
    if (stage.starts_with("generate-")) return "generations/" + stage.substr(9);
    if (stage.starts_with("evaluate-")) return "eval/" + stage.substr(9);
    throw Error(ErrorCode::kInvalidArgument, "unknown stage '" + stage + "'");
  }

  std::filesystem::path dir(const std::string& stage) const { return root() / stage_dir(stage); }

  bool done(const std::string& stage) const { return std::filesystem::exists(dir(stage) / "manifest.json"); }

  // ---- stages ----

  void data() {
    run("data", {}, [&](StageContext& ctx) {
      const Vocab vocab = Vocab::printable_ascii();
      std::vector<Example> train, test, pre;
      if (cfg_.train_jsonl.empty()) {
        const auto fams = cfg_.family_list();
        auto mix = [&](int per) {
          std::vector<TaskCount> m;
          for (const auto& f : fams) m.push_back({f, per});
          return m;
        };
        const std::uint64_t s = cfg_.seed_for("data");
        train = synth_generate(mix(cfg_.train_per_family), derive_seed(s, "train"));
        // Test and pretraining sets avoid instructions seen in the splits
        // they would leak into.
        std::set<std::string> seen;
        for (const auto& e : train) seen.insert(e.instruction);
        test = disjoint(synth_generate(mix(4 * cfg_.test_per_family), derive_seed(s, "test")), seen,
                        cfg_.test_per_family);
        std::set<std::string> test_seen;
        for (const auto& e : test) test_seen.insert(e.instruction);
        pre = disjoint(synth_generate(mix(2 * cfg_.pretrain_per_family), derive_seed(s, "pretrain")), test_seen,
                       cfg_.pretrain_per_family);
        for (auto& e : pre) e.id = "pre-" + e.id;
      } else {
        train = load_jsonl(cfg_.train_jsonl);
        test = load_jsonl(cfg_.test_jsonl);
        pre = train;
      }
      std::string stats = "split,examples,kept,discarded\n";
      auto keep = [&](std::vector<Example>& v, const std::string& name, bool prompt_only) {
        std::vector<Example> kept;
        for (auto& e : v) {
          Example probe = e;
          if (prompt_only) probe.response.clear();
          if (tokenize(probe, vocab, static_cast<std::size_t>(cfg_.l_max))) kept.push_back(std::move(e));
        }
        stats += name + "," + std::to_string(v.size()) + "," + std::to_string(kept.size()) + "," +
                 std::to_string(v.size() - kept.size()) + "\n";
        require(!kept.empty(), ErrorCode::kEmptyDataset, name + " split is empty after length filtering");
        v = std::move(kept);
      };
      keep(train, "train", false);
      keep(test, "test", true);
      keep(pre, "pretrain", false);
      save_jsonl(ctx.dir / "train.jsonl", train);
      save_jsonl(ctx.dir / "test.jsonl", test);
      save_jsonl(ctx.dir / "pretrain.jsonl", pre);
      vocab.save(ctx.dir / "vocab.txt");
      write_file(ctx.dir / "stats.csv", stats);
      ctx.info["train"] = train.size();
      ctx.info["test"] = test.size();
    });
  }

  void pretrain() {
    run("pretrain", {"data"}, [&](StageContext& ctx) {
      const ParameterStore init = init_backbone(cfg_.model(), derive_seed(cfg_.seed_for("init"), "backbone"));
      std::string losses = "epoch,loss\n";
      if (cfg_.pretrain) {
        const auto seqs = sequences("pretrain", false);
        TrainConfig tc;
        tc.epochs = cfg_.pretrain_epochs;
        tc.lr = cfg_.pretrain_lr;
        tc.batch = cfg_.pretrain_batch;
        tc.seed = derive_seed(cfg_.seed_for("shuffle"), "pretrain");
        tc.mask = TrainMask::kFull;
        const auto run = pretrain_backbone(init, seqs.seqs, tc);
        for (std::size_t e = 0; e < run.epoch_losses.size(); ++e)
          losses += std::to_string(e + 1) + "," + format_double(run.epoch_losses[e]) + "\n";
        save_backbone(ctx.dir / "backbone.ckpt", run.params, provenance());
        ctx.timing.push_back({"pretrain backbone", run.seconds});
      } else {
        save_backbone(ctx.dir / "backbone.ckpt", init, provenance());
      }
      write_file(ctx.dir / "losses.csv", losses);
    });
  }

  void train_base() {
    run("train-base", {"data", "pretrain"}, [&](StageContext& ctx) {
      const ParameterStore backbone = load_backbone(dir("pretrain") / "backbone.ckpt");
      const auto seqs = sequences("train", false);
      const LoraAdapter init = init_lora(backbone.config(), cfg_.rank, derive_seed(cfg_.seed_for("init"), "base-adapter"),
                                         lora_options());
      TrainConfig tc = train_config(cfg_.lr_base, derive_seed(cfg_.seed_for("shuffle"), "base"));
      const auto run = train(backbone, init, seqs.seqs, tc,
                             [&](const EpochRecord& rec) { save_epoch(ctx.dir / "run", rec, tc.seed, hash_); });
      save_adapter(ctx.dir / "adapter.ckpt", run.epochs.back().adapter, provenance());
      ctx.timing.push_back({"fine-tune base adapter", run.seconds});
    });
  }

  void grad_features() {
    run("grad-features", {"data", "pretrain", "train-base"}, [&](StageContext& ctx) {
      const ParameterStore backbone = load_backbone(dir("pretrain") / "backbone.ckpt");
      const auto snaps = load_run(dir("train-base") / "run", cfg_.epochs);
      const ProjectionSpec spec{cfg_.seed_for("projection"), cfg_.d_proj, snaps.front().adapter.size()};
      for (const auto& [split, step] : {std::pair{"train", "train gradient features"}, std::pair{"test", "test gradient features"}}) {
        const auto seqs = sequences(split, std::string(split) == "test");
        std::vector<FeatureInput> inputs;
        for (std::size_t i = 0; i < seqs.ids.size(); ++i) inputs.push_back({seqs.ids[i], &seqs.seqs[i]});
        FeatureBuildOptions opts;
        opts.chunk = static_cast<std::size_t>(cfg_.feature_chunk);
        opts.progress_path = ctx.dir / (std::string(split) + ".progress");
        const auto res = build_feature_matrix(backbone, snaps, inputs, spec, opts);
        save_features(ctx.dir / (std::string(split) + ".feat"), res.matrix);
        std::string fails = "id,reason\n";
        for (const auto& f : res.failures) {
          std::string reason = f.reason;
          std::replace(reason.begin(), reason.end(), ',', ';');
          fails += f.id + "," + reason + "\n";
        }
        write_file(ctx.dir / (std::string(split) + "_failures.csv"), fails);
        std::filesystem::remove(opts.progress_path);
        ctx.timing.push_back({step, res.seconds});
        ctx.info[std::string(split) + "_failures"] = res.failures.size();
      }
    });
  }

  void cluster() {
    run("cluster", {"data", "grad-features"}, [&](StageContext& ctx) {
      Stopwatch clock;
      const auto features = load_features(dir("grad-features") / "train.feat");
      BirchParams bp;
      bp.threshold = cfg_.birch_threshold;
      bp.branching = cfg_.birch_branching;
      bp.k = cfg_.k_initial;
      bp.linkage = parse_linkage(cfg_.linkage);
      ClusterModel model;
      try {
        model = birch_fit(features, static_cast<std::size_t>(cfg_.sample_cap), bp, cfg_.seed_for("cluster"));
      } catch (const Error& e) {
        if (e.code() != ErrorCode::kDegenerate) throw;
        throw Error(ErrorCode::kDegenerate, std::string(e.what()) + "; lower cluster.threshold");
      }
      model = rebalance(model, features, static_cast<std::size_t>(cfg_.sample_cap), cfg_.rebalance_max_iter,
                        cfg_.rebalance_ratio);
      save_cluster_model(ctx.dir, model);
      const auto report = cluster_report(model, tags("train"));
      write_file(ctx.dir / "distribution.csv", report.csv());
      ctx.timing.push_back({"clustering", clock.seconds()});
      ctx.info["clusters"] = model.clusters();
    });
  }

  void train_experts() {
    run("train-experts", {"data", "pretrain", "train-base", "cluster"}, [&](StageContext& ctx) {
      const auto model = load_cluster_model(dir("cluster"));
      const double secs = train_partition(ctx.dir, model.ids, model.labels, model.clusters(),
                                          derive_seed(cfg_.seed_for("shuffle"), "expert"));
      ctx.timing.push_back({"fine-tune experts", secs});
    });
  }

  void route() {
    run("route", {"grad-features", "cluster"}, [&](StageContext& ctx) {
      Stopwatch clock;
      const auto model = load_cluster_model(dir("cluster"));
      const auto test = load_features(dir("grad-features") / "test.feat");
      const auto table = route_batch(test, model.centroids, read_failures(dir("grad-features") / "test_failures.csv"));
      write_file(ctx.dir / "routing.csv", table.csv());
      write_file(ctx.dir / "summary.csv", table.summary_csv());
      ctx.timing.push_back({"routing", clock.seconds()});
    });
  }

  void baseline(const std::string& name) {
    require(std::find(baseline_names().begin(), baseline_names().end(), name) != baseline_names().end(),
            ErrorCode::kInvalidArgument, "unknown baseline '" + name + "' (mole, lora-ens, random-cluster)");
    if (name == "mole") {
      run("baseline-mole", {"data", "pretrain", "train-base", "train-experts"}, [&](StageContext& ctx) {
        const ParameterStore backbone = load_backbone(dir("pretrain") / "backbone.ckpt");
        const auto adapters = load_experts(dir("train-experts"));
        const auto ptrs = pointers(adapters);
        const auto seqs = sequences("train", false);
        MoleConfig mc;
        mc.epochs = cfg_.mole_epochs;
        mc.lr = cfg_.mole_lr;
        mc.batch = cfg_.batch;
        mc.seed = derive_seed(cfg_.seed_for("shuffle"), "mole");
        const auto run = mole_train(backbone, ptrs, seqs.seqs, mc);
        TensorArchive archive;
        archive.meta["kind"] = "gating";
        archive.meta["provenance"] = provenance();
        for (const auto& [layer, m] : run.gating.gates) archive.arrays.emplace_back(layer, m);
        write_archive(ctx.dir / "gating.ckpt", archive);
        const auto test = sequences("test", true);
        write_file(ctx.dir / "lambdas.csv", mole_lambda_csv(backbone, ptrs, run.gating, test.ids, test.seqs));
        std::string losses = "step,loss\n";
        for (std::size_t i = 0; i < run.step_losses.size(); ++i)
          losses += std::to_string(i + 1) + "," + format_double(run.step_losses[i]) + "\n";
        write_file(ctx.dir / "losses.csv", losses);
        ctx.timing.push_back({"train gating", run.seconds});
      });
    } else if (name == "lora-ens") {
      run("baseline-lora-ens", {"data", "pretrain", "train-base"}, [&](StageContext& ctx) {
        Stopwatch clock;
        const ParameterStore backbone = load_backbone(dir("pretrain") / "backbone.ckpt");
        const LoraAdapter base = load_adapter(dir("train-base") / "adapter.ckpt");
        const auto seqs = sequences("train", false);
        const auto members = lora_ensembles(backbone, base, seqs.seqs,
                                            train_config(cfg_.lr_base, derive_seed(cfg_.seed_for("init"), "lora-ens")),
                                            cfg_.lora_ens_extra);
        for (std::size_t k = 0; k < members.size(); ++k)
          save_adapter(ctx.dir / ("member-" + std::to_string(k + 1) + ".ckpt"), members[k], provenance());
        ctx.timing.push_back({"train ensemble members", clock.seconds()});
      });
    } else {
      run("baseline-random-cluster", {"data", "pretrain", "train-base", "cluster"}, [&](StageContext& ctx) {
        const auto model = load_cluster_model(dir("cluster"));
        const auto labels =
            random_cluster_partition(model.ids.size(), model.sizes, derive_seed(cfg_.seed_for("cluster"), "random"));
        std::string assign = "id,cluster\n";
        for (std::size_t i = 0; i < labels.size(); ++i) assign += model.ids[i] + "," + std::to_string(labels[i]) + "\n";
        write_file(ctx.dir / "assignments.csv", assign);
        ClusterModel shadow = model;
        shadow.labels = labels;
        write_file(ctx.dir / "distribution.csv", cluster_report(shadow, tags("train")).csv());
        const double secs = train_partition(ctx.dir, model.ids, labels, model.clusters(),
                                            derive_seed(cfg_.seed_for("shuffle"), "random-expert"));
        ctx.timing.push_back({"fine-tune random-cluster experts", secs});
      });
    }
  }

  static std::string method_label(const std::string& method, int top_k) {
    return top_k > 0 ? method + "-top" + std::to_string(top_k) : method;
  }

  /// Writes generations/<label>/generations.jsonl; returns the label.
  std::string generate(const std::string& method, int top_k = -1) {
    require(std::find(method_names().begin(), method_names().end(), method) != method_names().end(),
            ErrorCode::kInvalidArgument, "unknown method '" + method + "'");
    if (top_k < 0) top_k = cfg_.top_k;
    const bool routed = method == "elrea" || method == "moe-routing" || method == "moe-merging";
    require(top_k == 0 || routed, ErrorCode::kInvalidArgument, "--top-k applies to routed methods only");
    const std::string label = method_label(method, top_k);

    std::vector<std::string> ups = {"data", "pretrain", "train-base"};
    if (routed) ups.insert(ups.end(), {"train-experts", "route"});
    if (method == "uniform") ups.push_back("train-experts");
    if (method == "mole") ups.insert(ups.end(), {"train-experts", "baseline-mole"});
    if (method == "lora-ens") ups.push_back("baseline-lora-ens");
    if (method == "random-cluster") ups.push_back("baseline-random-cluster");

    run("generate-" + label, ups, [&](StageContext& ctx) {
      const ParameterStore backbone = load_backbone(dir("pretrain") / "backbone.ckpt");
      const LoraAdapter base = load_adapter(dir("train-base") / "adapter.ckpt");
      const Vocab vocab = Vocab::load(dir("data") / "vocab.txt");
      const auto test = sequences("test", true);
      const auto examples = load_jsonl(dir("data") / "test.jsonl");
      const DecodeParams dp{cfg_.max_new_tokens, 0.0, 0};

      std::vector<LoraAdapter> adapters;  // [base, ...]
      if (routed || method == "uniform" || method == "mole") adapters = load_experts(dir("train-experts"));
      if (method == "random-cluster") adapters = load_experts(dir("baseline-random-cluster"));
      if (method == "lora-ens") {
        adapters = {base};
        for (int k = 1; k <= cfg_.lora_ens_extra; ++k)
          adapters.push_back(load_adapter(dir("baseline-lora-ens") / ("member-" + std::to_string(k) + ".ckpt")));
      }
      const auto ptrs = pointers(adapters);
      const int clusters = static_cast<int>(adapters.size()) - 1;
      RoutingTable routing;
      if (routed) routing = parse_routing_csv(read_file(dir("route") / "routing.csv"), "routing.csv");
      GatingParams gating;
      if (method == "mole") {
        const auto archive = read_archive(dir("baseline-mole") / "gating.ckpt");
        for (const auto& [layer, m] : archive.arrays) gating.gates.emplace(layer, m);
      }

      std::vector<GenerationRecord> records;
      std::string timing = "id,wall_seconds\n";
      Stopwatch total;
      for (std::size_t i = 0; i < test.ids.size(); ++i) {
        const auto& prompt = test.seqs[i].tokens;
        GenerationResult g;
        std::optional<std::string> voted;
        bool voting = false;
        if (method == "base") {
          g = generate_mix(backbone, AdapterMix::single(base), prompt, dp, &vocab);
        } else if (routed) {
          RoutingWeights w = routing.at(test.ids[i]);
          require(w.clusters() == clusters, ErrorCode::kShapeMismatch, "routing and expert counts differ");
          if (top_k > 0) w = top_k_weights(w, top_k);
          if (method == "elrea") g = elrea::generate(EnsembleSpec{&backbone, ptrs, dp}, prompt, w, &vocab);
          else if (method == "moe-routing") g = generate_moe_routing(backbone, ptrs, w, prompt, dp, &vocab);
          else g = generate_moe_merging(backbone, ptrs, w, prompt, dp, &vocab);
        } else if (method == "uniform" || method == "random-cluster") {
          g = elrea::generate(EnsembleSpec{&backbone, ptrs, dp}, prompt, uniform_weights(clusters), &vocab);
        } else if (method == "mole") {
          g = generate_mole(backbone, ptrs, gating, prompt, dp, &vocab);
        } else if (method == "lora-ens") {
          g = generate_mean_logits(backbone, ptrs, prompt, dp, &vocab);
        } else {
          Stopwatch clock;
          SelfConsistencyParams sp;
          sp.n = cfg_.sc_samples;
          sp.temperature = cfg_.sc_temperature;
          sp.seed = hash_combine(cfg_.seed_for("sampling"), i);
          sp.tie_seed = hash_combine(cfg_.seed_for("tie"), i);
          sp.max_new_tokens = cfg_.max_new_tokens;
          const auto vote = self_consistency(backbone, &base, prompt, vocab, sp);
          voting = true;
          voted = vote.answer;
          g.text = vote.samples.front();
          for (const auto& s : vote.samples)
            if (vote.answer && extract_answer(s) == vote.answer) {
              g.text = s;
              break;
            }
          g.seconds = clock.seconds();
        }
        auto rec = make_record(test.ids[i], label, examples[i].instruction, g);
        if (voting) rec.answer = voted;
        timing += rec.id + "," + format_double(g.seconds) + "\n";
        records.push_back(std::move(rec));
      }
      save_generations(ctx.dir / "generations.jsonl", records);
      write_file(ctx.dir / "generations.timing.csv", timing);
      ctx.timing.push_back({"inference", total.seconds()});
      std::size_t peak = 0;
      for (const auto& r : records) peak = std::max(peak, r.peak_bytes);
      ctx.info["peak_bytes"] = peak;
      ctx.info["top_k"] = top_k;
    });
    return label;
  }

  EvalReport evaluate(const std::string& label) {
    std::vector<std::string> ups = {"data", "generate-" + label};
    if (label != "base") ups.push_back("generate-base");
    EvalReport report;
    run("evaluate-" + label, ups, [&](StageContext& ctx) {
      const auto examples = load_jsonl(dir("data") / "test.jsonl");
      std::map<std::string, const Example*> gold;
      for (const auto& e : examples) gold[e.id] = &e;
      const auto recs = load_generations(dir("generate-" + label) / "generations.jsonl");
      report = evaluate_records(label, recs, gold);
      std::optional<EvalReport> base;
      if (label != "base")
        base = evaluate_records("base", load_generations(dir("generate-base") / "generations.jsonl"), gold);
      write_file(ctx.dir / "eval.csv", report.csv(base ? &*base : nullptr));
      std::string per = "id,tag,answer,gold,correct\n";
      for (const auto& r : recs) {
        const Example& e = *gold.at(r.id);
        const bool ok = r.answer && exact_match("=" + *r.answer, e.response);
        std::string ans = r.answer.value_or("");
        std::replace(ans.begin(), ans.end(), ',', ';');
        per += r.id + "," + e.source_tag + "," + ans + "," + extract_answer(e.response).value_or(e.response) + "," +
               (ok ? "1" : "0") + "\n";
      }
      write_file(ctx.dir / "results.csv", per);
    });
    if (report.tags.empty()) report = read_eval(label);
    return report;
  }

  /// Cluster distribution, routing profile per test tag, method summary and
  /// the efficiency table (a timing sidecar).
  void report() {
    std::vector<std::string> ups = {"data", "cluster", "route"};
    for (const auto& m : std::filesystem::exists(root() / "eval") ? list_dirs(root() / "eval") : std::vector<std::string>{})
      ups.push_back("evaluate-" + m);
    run("report", ups, [&](StageContext& ctx) {
      const auto model = load_cluster_model(dir("cluster"));
      const auto cr = cluster_report(model, tags("train"));
      std::string dist = "cluster,size";
      for (const auto& t : cr.tags) dist += "," + t;
      dist += ",dominant_share\n";
      const auto share = cr.dominant_share();
      for (std::size_t c = 0; c < cr.counts.size(); ++c) {
        dist += std::to_string(c + 1) + "," + std::to_string(model.sizes[c]);
        for (std::size_t n : cr.counts[c]) dist += "," + std::to_string(n);
        dist += "," + format_double(share[c]) + "\n";
      }
      write_file(ctx.dir / "cluster_distribution.csv", dist);

      const auto routing = parse_routing_csv(read_file(dir("route") / "routing.csv"), "routing.csv");
      const auto test_tags = tags("test");
      std::map<std::string, std::pair<std::vector<double>, std::size_t>> prof;
      for (std::size_t i = 0; i < routing.ids.size(); ++i) {
        auto& [sum, n] = prof[test_tags.at(routing.ids[i])];
        const auto w = ensemble_weights(routing.weights[i]);
        if (sum.empty()) sum.assign(w.size(), 0.0);
        for (std::size_t k = 0; k < w.size(); ++k) sum[k] += w[k];
        ++n;
      }
      std::string rp = "tag,w_base";
      for (int c = 1; c <= routing.clusters; ++c) rp += ",w_" + std::to_string(c);
      rp += "\n";
      for (const auto& [tag, p] : prof) {
        rp += tag;
        for (double s : p.first) rp += "," + format_double(s / static_cast<double>(p.second));
        rp += "\n";
      }
      write_file(ctx.dir / "routing_profile.csv", rp);

      std::string methods = "method,micro,macro,delta_micro,delta_macro\n";
      std::optional<EvalReport> base;
      if (done("evaluate-base")) base = read_eval("base");
      for (const auto& label : ups) {
        if (!label.starts_with("evaluate-")) continue;
        const auto r = read_eval(label.substr(9));
        char buf[160];
        std::snprintf(buf, sizeof(buf), "%s,%.2f,%.2f,%+.2f,%+.2f\n", r.method.c_str(), 100 * r.micro(), 100 * r.macro(),
                      base ? 100 * (r.micro() - base->micro()) : 0.0, base ? 100 * (r.macro() - base->macro()) : 0.0);
        methods += buf;
      }
      write_file(ctx.dir / "methods.csv", methods);
      write_file(ctx.dir / "efficiency.timing.csv", efficiency_csv());
    });
  }

  /// Seconds spent in each step of the efficiency table.
  struct Efficiency {
    double base_finetune = 0, train_features = 0, test_features = 0, clustering = 0, experts = 0;
    double base_inference = 0, elrea_inference = 0;
    std::size_t base_peak = 0, elrea_peak = 0;

    double elrea_finetune() const { return base_finetune + train_features + test_features + experts; }
    double ratio() const { return base_finetune > 0 ? elrea_finetune() / base_finetune : 0.0; }
  };

  Efficiency efficiency() const {
    Efficiency e;
    auto sum = [&](const std::string& stage, const std::string& step) {
      double s = 0;
      for (const auto& r : read_timing(dir(stage) / "timing.csv"))
        if (r.step == step) s += r.seconds;
      return s;
    };
    e.base_finetune = sum("train-base", "fine-tune base adapter");
    e.train_features = sum("grad-features", "train gradient features");
    e.test_features = sum("grad-features", "test gradient features");
    e.clustering = sum("cluster", "clustering");
    e.experts = sum("train-experts", "fine-tune experts");
    e.base_inference = sum("generate-base", "inference");
    e.elrea_inference = sum("generate-elrea", "inference");
    auto peak = [&](const std::string& stage) -> std::size_t {
      if (!done(stage)) return 0;
      const auto m = Json::parse(read_file(dir(stage) / "manifest.json"));
      return m.at("info").value("peak_bytes", std::size_t{0});
    };
    e.base_peak = peak("generate-base");
    e.elrea_peak = peak("generate-elrea");
    return e;
  }

  std::string efficiency_csv() const {
    const auto e = efficiency();
    std::string out = "step,base_seconds,elrea_seconds\n";
    auto row = [&](const std::string& step, std::optional<double> b, double x) {
      out += step + "," + (b ? format_double(*b) : std::string("")) + "," + format_double(x) + "\n";
    };
    row("fine-tune base adapter", e.base_finetune, e.base_finetune);
    row("train gradient features", std::nullopt, e.train_features);
    row("test gradient features", std::nullopt, e.test_features);
    row("fine-tune experts", std::nullopt, e.experts);
    row("fine-tuning total", e.base_finetune, e.elrea_finetune());
    row("clustering (not in total)", std::nullopt, e.clustering);
    row("inference", e.base_inference, e.elrea_inference);
    out += "fine-tuning ratio,," + format_double(e.ratio()) + "\n";
    out += "inference peak bytes (estimate)," + std::to_string(e.base_peak) + "," + std::to_string(e.elrea_peak) + "\n";
    return out;
  }

  /// Core stages, base and ELREA generation/evaluation, enabled baselines,
  /// report.
  void run_all() {
    data();
    pretrain();
    train_base();
    grad_features();
    cluster();
    train_experts();
    route();
    for (const std::string m : {"base", "elrea"}) evaluate(generate(m));
    const std::pair<bool, const char*> routed[] = {{cfg_.run_moe_routing, "moe-routing"},
                                                   {cfg_.run_moe_merging, "moe-merging"},
                                                   {cfg_.run_uniform, "uniform"},
                                                   {cfg_.run_self_consistency, "self-consistency"}};
    for (const auto& [on, m] : routed)
      if (on) evaluate(generate(m));
    const std::pair<bool, const char*> trained[] = {
        {cfg_.run_mole, "mole"}, {cfg_.run_lora_ens, "lora-ens"}, {cfg_.run_random_cluster, "random-cluster"}};
    for (const auto& [on, m] : trained)
      if (on) {
        baseline(m);
        evaluate(generate(m));
      }
    report();
  }

  /// Feature rows as CSV (id then coordinates) for external inspection.
  void export_features(const std::string& split, const std::filesystem::path& out) const {
    require_stage("grad-features");
    write_file(out, features_csv(load_features(dir("grad-features") / (split + ".feat"))));
  }

  EvalReport read_eval(const std::string& label) const {
    const auto path = dir("evaluate-" + label) / "results.csv";
    require(std::filesystem::exists(path), ErrorCode::kMissingArtifact,
            path.string() + " (run `elrea evaluate --method " + label + "`)");
    std::istringstream in(read_file(path));
    std::string line;
    std::getline(in, line);
    std::map<std::string, TagScore> by;
    while (std::getline(in, line)) {
      std::vector<std::string> cells;
      std::istringstream row(line);
      std::string cell;
      while (std::getline(row, cell, ',')) cells.push_back(cell);
      if (cells.size() < 5) continue;
      auto& s = by[cells[1]];
      s.tag = cells[1];
      ++s.total;
      s.correct += cells[4] == "1";
    }
    EvalReport r{label, {}};
    for (auto& [_, s] : by) r.tags.push_back(s);
    return r;
  }

 private:
  struct Split {
    std::vector<std::string> ids;
    std::vector<TokenSequence> seqs;
  };

  PipelineConfig cfg_;
  std::string hash_;
  std::ostream* log_;

  void say(const std::string& s) const {
    if (log_) *log_ << s << std::endl;
  }

  Json provenance() const { return {{"config_hash", hash_}, {"seed", cfg_.seed}}; }

  Json seeds_json() const {
    Json j = Json::object();
    j["master"] = cfg_.seed;
    for (const auto& n : seed_names()) j[n] = cfg_.seed_for(n);
    return j;
  }

  LoraOptions lora_options() const {
    LoraOptions o;
    o.alpha = cfg_.alpha;
    o.dropout = cfg_.dropout;
    return o;
  }

  TrainConfig train_config(double lr, std::uint64_t seed) const {
    TrainConfig tc;
    tc.epochs = cfg_.epochs;
    tc.lr = lr;
    tc.batch = cfg_.batch;
    tc.seed = seed;
    tc.mask = TrainMask::kResponse;
    return tc;
  }

  static std::vector<Example> disjoint(std::vector<Example> pool, const std::set<std::string>& avoid, int per_family) {
    std::map<std::string, int> taken;
    std::vector<Example> out;
    for (auto& e : pool)
      if (!avoid.count(e.instruction) && taken[e.source_tag] < per_family) {
        ++taken[e.source_tag];
        out.push_back(std::move(e));
      }
    return out;
  }

  static std::vector<const LoraAdapter*> pointers(const std::vector<LoraAdapter>& v) {
    std::vector<const LoraAdapter*> out;
    for (const auto& a : v) out.push_back(&a);
    return out;
  }

  static RoutingWeights top_k_weights(const RoutingWeights& w, int k) { return elrea::top_k(w, k); }

  static std::vector<std::string> list_dirs(const std::filesystem::path& p) {
    std::vector<std::string> out;
    for (const auto& e : std::filesystem::directory_iterator(p))
      if (e.is_directory() && std::filesystem::exists(e.path() / "manifest.json")) out.push_back(e.path().filename().string());
    std::sort(out.begin(), out.end());
    return out;
  }

  Split sequences(const std::string& split, bool prompt_only) const {
    const Vocab vocab = Vocab::load(dir("data") / "vocab.txt");
    Split out;
    for (auto e : load_jsonl(dir("data") / (split + ".jsonl"))) {
      if (prompt_only) e.response.clear();
      auto seq = tokenize(e, vocab, static_cast<std::size_t>(cfg_.l_max));
      require(seq.has_value(), ErrorCode::kOverLength, e.id + " exceeds l_max; rerun the data stage");
      out.ids.push_back(e.id);
      out.seqs.push_back(std::move(*seq));
    }
    return out;
  }

  std::map<std::string, std::string> tags(const std::string& split) const {
    std::map<std::string, std::string> out;
    for (const auto& e : load_jsonl(dir("data") / (split + ".jsonl"))) out[e.id] = e.source_tag;
    return out;
  }

  static std::vector<FeatureFailure> read_failures(const std::filesystem::path& path) {
    std::vector<FeatureFailure> out;
    std::istringstream in(read_file(path));
    std::string line;
    std::getline(in, line);
    while (std::getline(in, line)) {
      const auto comma = line.find(',');
      if (comma != std::string::npos) out.push_back({line.substr(0, comma), line.substr(comma + 1)});
    }
    return out;
  }

  /// Base adapter followed by expert-<c>.ckpt for c = 1.. in `d`.
  std::vector<LoraAdapter> load_experts(const std::filesystem::path& d) const {
    std::vector<LoraAdapter> out{load_adapter(dir("train-base") / "adapter.ckpt")};
    for (int c = 1; std::filesystem::exists(d / ("expert-" + std::to_string(c) + ".ckpt")); ++c)
      out.push_back(load_adapter(d / ("expert-" + std::to_string(c) + ".ckpt")));
    require(out.size() >= 2, ErrorCode::kMissingArtifact, (d / "expert-1.ckpt").string());
    return out;
  }

  /// One adapter per label 1..C, each continued from the base adapter with a
  /// fresh optimizer on its members. Returns total training seconds.
  double train_partition(const std::filesystem::path& out, const std::vector<std::string>& ids,
                         const std::vector<int>& labels, int clusters, std::uint64_t seed) const {
    const ParameterStore backbone = load_backbone(dir("pretrain") / "backbone.ckpt");
    const LoraAdapter base = load_adapter(dir("train-base") / "adapter.ckpt");
    const auto all = sequences("train", false);
    std::map<std::string, const TokenSequence*> by_id;
    for (std::size_t i = 0; i < all.ids.size(); ++i) by_id[all.ids[i]] = &all.seqs[i];
    double secs = 0;
    std::string sizes = "cluster,size,mean_final_loss\n";
    for (int c = 1; c <= clusters; ++c) {
      std::vector<TokenSequence> members;
      for (std::size_t i = 0; i < ids.size(); ++i)
        if (labels[i] == c) members.push_back(*by_id.at(ids[i]));
      const TrainConfig tc = train_config(cfg_.lr_expert, hash_combine(seed, static_cast<std::uint64_t>(c)));
      const auto run = train(backbone, base, members, tc);
      secs += run.seconds;
      save_adapter(out / ("expert-" + std::to_string(c) + ".ckpt"), run.epochs.back().adapter, provenance());
      sizes += std::to_string(c) + "," + std::to_string(members.size()) + "," +
               format_double(run.epochs.back().mean_loss()) + "\n";
      say("  expert " + std::to_string(c) + "/" + std::to_string(clusters) + ": " + std::to_string(members.size()) +
          " examples");
    }
    write_file(out / "experts.csv", sizes);
    return secs;
  }

  void require_stage(const std::string& stage) const {
    const auto m = dir(stage) / "manifest.json";
    const std::string cmd = stage.starts_with("generate-")   ? "generate --method " + stage.substr(9)
                            : stage.starts_with("evaluate-") ? "evaluate --method " + stage.substr(9)
                            : stage.starts_with("baseline-") ? "baseline " + stage.substr(9)
                                                             : stage;
    require(std::filesystem::exists(m), ErrorCode::kMissingArtifact,
            "missing output of stage '" + stage + "' (" + m.string() + "); run `elrea " + cmd + "` first");
    const auto j = Json::parse(read_file(m));
    require(j.at("config_hash").get<std::string>() == hash_, ErrorCode::kHashMismatch,
            "stage '" + stage + "' was produced with config " + j.at("config_hash").get<std::string>() +
                ", current config is " + hash_ + "; rerun `elrea " + cmd + "`");
  }

  /// Runs `body` unless the stage's manifest matches the current config,
  /// upstream manifests and its own output hashes.
  template <typename Body>
  void run(const std::string& stage, const std::vector<std::string>& upstream, Body body) {
    Json inputs = Json::object();
    for (const auto& up : upstream) {
      require_stage(up);
      inputs[up] = hex64(file_hash(dir(up) / "manifest.json"));
    }
    const auto d = dir(stage);
    if (up_to_date(d, inputs)) {
      say(stage + ": up to date");
      return;
    }
    say(stage + ": running");
    if (std::filesystem::exists(d))
      for (const auto& e : std::filesystem::directory_iterator(d))
        if (!e.path().filename().string().ends_with(".progress")) std::filesystem::remove_all(e.path());
    std::filesystem::create_directories(d);
    Stopwatch clock;
    StageContext ctx{d, {}, Json::object()};
    body(ctx);
    ctx.timing.push_back({"stage total", clock.seconds()});
    Json outputs = Json::object();
    for (const auto& rel : artifact_files(d))
      if (rel != "manifest.json") outputs[rel.generic_string()] = hex64(file_hash(d / rel));
    Json m;
    m["stage"] = stage;
    m["config_hash"] = hash_;
    m["seeds"] = seeds_json();
    m["inputs"] = inputs;
    m["outputs"] = outputs;
    m["info"] = ctx.info;
    write_file(d / "manifest.json", m.dump(2) + "\n");
    write_file(d / "timing.csv", timing_csv(ctx.timing));
    say(stage + ": done in " + format_seconds(clock.seconds()));
  }

  bool up_to_date(const std::filesystem::path& d, const Json& inputs) const {
    const auto mp = d / "manifest.json";
    if (!std::filesystem::exists(mp)) return false;
    Json m;
    try {
      m = Json::parse(read_file(mp));
    } catch (const Json::exception&) {
      return false;
    }
    if (m.value("config_hash", "") != hash_ || m.value("inputs", Json::object()) != inputs) return false;
    for (const auto& [rel, h] : m.at("outputs").items())
      if (!std::filesystem::exists(d / rel) || hex64(file_hash(d / rel)) != h.get<std::string>()) return false;
    return true;
  }

  static std::string format_seconds(double s) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.1fs", s);
    return buf;
  }
};

}  // namespace elrea
