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

// Instruction/response examples, the synthetic task registry and
// character-level tokenization.

#pragma once

#include "elrea/common.hpp"

#include <json.hpp>

#include <algorithm>
#include <array>
#include <map>
#include <optional>
#include <set>
#include <span>

namespace elrea {

struct Example {
  std::string id;
  std::string instruction;
  std::string response;
  std::string source_tag;

  bool operator==(const Example&) const = default;
};

enum class Role : std::uint8_t { kInstr, kResp };

struct TokenSequence {
  std::vector<int> tokens;
  std::vector<Role> roles;

  std::size_t size() const { return tokens.size(); }
  bool operator==(const TokenSequence&) const = default;
};

/// Character vocabulary. Ids 0..3 are reserved; symbols follow in sorted order.
class Vocab {
 public:
  static constexpr int kPad = 0;
  static constexpr int kBos = 1;
  static constexpr int kEos = 2;
  static constexpr int kSep = 3;
  static constexpr int kReserved = 4;

  static Vocab from_symbols(std::vector<char> symbols) {
    std::sort(symbols.begin(), symbols.end());
    symbols.erase(std::unique(symbols.begin(), symbols.end()), symbols.end());
    Vocab v;
    v.symbols_ = std::move(symbols);
    v.ids_.fill(-1);
    for (std::size_t i = 0; i < v.symbols_.size(); ++i)
      v.ids_[static_cast<unsigned char>(v.symbols_[i])] = static_cast<int>(i) + kReserved;
    return v;
  }

  /// The fixed printable-ASCII alphabet (0x20..0x7e).
  static Vocab printable_ascii() {
    std::vector<char> symbols;
    for (int c = 0x20; c < 0x7f; ++c) symbols.push_back(static_cast<char>(c));
    return from_symbols(std::move(symbols));
  }

  static Vocab from_examples(std::span<const Example> examples) {
    std::set<char> seen;
    for (const auto& e : examples) {
      seen.insert(e.instruction.begin(), e.instruction.end());
      seen.insert(e.response.begin(), e.response.end());
    }
    return from_symbols({seen.begin(), seen.end()});
  }

  int size() const { return static_cast<int>(symbols_.size()) + kReserved; }

  std::optional<int> id(char c) const {
    const int v = ids_[static_cast<unsigned char>(c)];
    if (v < 0) return std::nullopt;
    return v;
  }

  char symbol(int id) const {
    require(id >= kReserved && id < size(), ErrorCode::kInvalidArgument,
            "token id " + std::to_string(id) + " is not a symbol");
    return symbols_[static_cast<std::size_t>(id - kReserved)];
  }

  const std::vector<char>& symbols() const { return symbols_; }

  /// One symbol per line, sorted; reserved ids are implicit.
  void save(const std::filesystem::path& path) const {
    std::string out;
    for (char c : symbols_) {
      out.push_back(c);
      out.push_back('\n');
    }
    write_file(path, out);
  }

  static Vocab load(const std::filesystem::path& path) {
    const std::string text = read_file(path);
    std::vector<char> symbols;
    std::size_t line = 1;
    for (std::size_t i = 0; i < text.size(); i += 2, ++line) {
      require(i + 1 < text.size() && text[i + 1] == '\n', ErrorCode::kParse,
              path.string() + ": line " + std::to_string(line) + " must hold exactly one symbol");
      symbols.push_back(text[i]);
    }
    Vocab v = from_symbols(symbols);
    require(v.symbols_.size() == symbols.size(), ErrorCode::kParse, path.string() + ": duplicate symbols");
    return v;
  }

  bool operator==(const Vocab& o) const { return symbols_ == o.symbols_; }

 private:
  std::vector<char> symbols_;
  std::array<int, 256> ids_{};
};

namespace detail {

inline std::string json_string_field(const nlohmann::json& obj, const char* key, std::size_t line,
                                     bool required) {
  auto it = obj.find(key);
  if (it == obj.end()) {
    require(!required, ErrorCode::kParse, "line " + std::to_string(line) + ": missing \"" + key + "\"");
    return {};
  }
  require(it->is_string(), ErrorCode::kParse,
          "line " + std::to_string(line) + ": \"" + key + "\" must be a string");
  return it->get<std::string>();
}

}  // namespace detail

/// Reads one example per line. Blank lines are skipped; missing ids become "line-<n>".
inline std::vector<Example> load_jsonl(const std::filesystem::path& path) {
  std::ifstream in(path);
  require(static_cast<bool>(in), ErrorCode::kIo, "cannot open " + path.string());
  std::vector<Example> out;
  std::string text;
  for (std::size_t line = 1; std::getline(in, text); ++line) {
    if (text.find_first_not_of(" \t\r") == std::string::npos) continue;
    nlohmann::json obj;
    try {
      obj = nlohmann::json::parse(text);
    } catch (const nlohmann::json::parse_error& e) {
      throw Error(ErrorCode::kParse, path.string() + ": line " + std::to_string(line) + ": " + e.what());
    }
    require(obj.is_object(), ErrorCode::kParse, "line " + std::to_string(line) + ": expected an object");
    Example e;
    e.instruction = detail::json_string_field(obj, "instruction", line, true);
    e.response = detail::json_string_field(obj, "response", line, true);
    e.id = detail::json_string_field(obj, "id", line, false);
    e.source_tag = detail::json_string_field(obj, "source_tag", line, false);
    require(!e.instruction.empty(), ErrorCode::kParse, "line " + std::to_string(line) + ": empty instruction");
    if (e.id.empty()) e.id = "line-" + std::to_string(line);
    out.push_back(std::move(e));
  }
  require(!out.empty(), ErrorCode::kEmptyDataset, path.string());
  return out;
}

inline void save_jsonl(const std::filesystem::path& path, std::span<const Example> examples) {
  std::string out;
  for (const auto& e : examples) {
    nlohmann::ordered_json obj;
    obj["id"] = e.id;
    obj["instruction"] = e.instruction;
    obj["response"] = e.response;
    obj["source_tag"] = e.source_tag;
    out += obj.dump();
    out.push_back('\n');
  }
  write_file(path, out);
}

// Synthetic task families. Every response has the form "<work>=<answer>".
namespace synth {

inline std::string random_word(Rng& rng, int min_len, int max_len) {
  std::string w(static_cast<std::size_t>(rng.range(min_len, max_len)), 'a');
  for (char& c : w) c = static_cast<char>('a' + rng.below(26));
  return w;
}

inline std::string random_digits(Rng& rng, int min_len, int max_len) {
  std::string w(static_cast<std::size_t>(rng.range(min_len, max_len)), '0');
  for (char& c : w) c = static_cast<char>('0' + rng.below(10));
  return w;
}

inline std::pair<std::string, std::string> make_add(Rng& rng) {
  const int a = rng.range(0, 99);
  const int b = rng.range(0, 99);
  const std::string work = std::to_string(a) + "+" + std::to_string(b);
  return {"add " + work, work + "=" + std::to_string(a + b)};
}

inline std::pair<std::string, std::string> make_reverse(Rng& rng) {
  const std::string w = random_word(rng, 3, 6);
  return {"reverse " + w, w + "=" + std::string(w.rbegin(), w.rend())};
}

inline std::pair<std::string, std::string> make_sort(Rng& rng) {
  const std::string d = random_digits(rng, 3, 6);
  std::string s = d;
  std::sort(s.begin(), s.end());
  return {"sort " + d, d + "=" + s};
}

inline std::pair<std::string, std::string> make_copy(Rng& rng) {
  const std::string w = random_word(rng, 3, 6);
  return {"copy " + w, w + "=" + w + "|" + w};
}

using Maker = std::pair<std::string, std::string> (*)(Rng&);

inline const std::map<std::string, Maker>& registry() {
  static const std::map<std::string, Maker> kFamilies = {
      {"add", &make_add}, {"copy", &make_copy}, {"reverse", &make_reverse}, {"sort", &make_sort}};
  return kFamilies;
}

}  // namespace synth

struct TaskCount {
  std::string family;
  int count = 0;
};

/// Deterministic in (task_mix, seed). Examples are emitted family by family
/// in task_mix order; ids are "<family>-<n>".
inline std::vector<Example> synth_generate(std::span<const TaskCount> task_mix, std::uint64_t seed) {
  std::vector<Example> out;
  std::map<std::string, int> next_index;
  for (const auto& [family, count] : task_mix) {
    auto it = synth::registry().find(family);
    require(it != synth::registry().end(), ErrorCode::kUnknownFamily, family);
    require(count >= 1, ErrorCode::kInvalidArgument, "count for " + family + " must be >= 1");
    for (int i = 0; i < count; ++i) {
      const int n = next_index[family]++;
      Rng rng(hash_combine(derive_seed(seed, family), static_cast<std::uint64_t>(n)));
      auto [instruction, response] = it->second(rng);
      char id[64];
      std::snprintf(id, sizeof(id), "%s-%05d", family.c_str(), n);
      out.push_back({id, std::move(instruction), std::move(response), family});
    }
  }
  return out;
}

/// Text after the final '=' with surrounding whitespace trimmed; nullopt if
/// there is no '=' or nothing follows it.
inline std::optional<std::string> extract_answer(std::string_view text) {
  const auto eq = text.rfind('=');
  if (eq == std::string_view::npos) return std::nullopt;
  std::string_view tail = text.substr(eq + 1);
  const auto first = tail.find_first_not_of(" \t\r\n");
  if (first == std::string_view::npos) return std::nullopt;
  const auto last = tail.find_last_not_of(" \t\r\n");
  return std::string(tail.substr(first, last - first + 1));
}

/// BOS instr SEP [resp EOS]. Returns nullopt when the result would exceed
/// l_max; callers count and skip those.
inline std::optional<TokenSequence> tokenize(const Example& example, const Vocab& vocab, std::size_t l_max) {
  require(!example.instruction.empty(), ErrorCode::kInvalidArgument, example.id + ": empty instruction");
  const std::size_t length =
      example.instruction.size() + 2 + (example.response.empty() ? 0 : example.response.size() + 1);
  if (length > l_max) return std::nullopt;

  TokenSequence seq;
  seq.tokens.reserve(length);
  seq.roles.reserve(length);
  auto push = [&](int token, Role role) {
    seq.tokens.push_back(token);
    seq.roles.push_back(role);
  };
  auto push_text = [&](const std::string& text, Role role) {
    for (char c : text) {
      auto id = vocab.id(c);
      require(id.has_value(), ErrorCode::kInvalidArgument,
              example.id + ": symbol '" + std::string(1, c) + "' not in vocabulary");
      push(*id, role);
    }
  };
  push(Vocab::kBos, Role::kInstr);
  push_text(example.instruction, Role::kInstr);
  push(Vocab::kSep, Role::kInstr);
  if (!example.response.empty()) {
    push_text(example.response, Role::kResp);
    push(Vocab::kEos, Role::kResp);
  }
  return seq;
}

/// Symbols of a token span with reserved ids dropped.
inline std::string decode_symbols(std::span<const int> tokens, const Vocab& vocab) {
  std::string out;
  for (int t : tokens)
    if (t >= Vocab::kReserved) out.push_back(vocab.symbol(t));
  return out;
}

/// Inverse of tokenize: (instruction, response).
inline std::pair<std::string, std::string> detokenize(const TokenSequence& seq, const Vocab& vocab) {
  const auto sep = std::find(seq.tokens.begin(), seq.tokens.end(), Vocab::kSep);
  require(sep != seq.tokens.end(), ErrorCode::kInvalidArgument, "sequence has no SEP token");
  const auto split = static_cast<std::size_t>(sep - seq.tokens.begin());
  const std::span<const int> all(seq.tokens);
  return {decode_symbols(all.subspan(0, split), vocab), decode_symbols(all.subspan(split + 1), vocab)};
}

}  // namespace elrea
