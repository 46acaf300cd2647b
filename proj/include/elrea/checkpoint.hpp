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

// Binary checkpoints: a JSON manifest followed by raw little-endian float64
// arrays, one per named entry, in manifest order (column-major).
//
//   "ELRCKPT1" | u64 manifest bytes | manifest | array data ...

#pragma once

#include "elrea/adapters.hpp"

#include <json.hpp>

namespace elrea {

using Json = nlohmann::ordered_json;

inline constexpr std::string_view kCheckpointMagic = "ELRCKPT1";

struct TensorArchive {
  Json meta = Json::object();  // caller fields; "entries" and "dtype" are managed here
  std::vector<std::pair<std::string, Matrix>> arrays;
};

inline std::string encode_archive(const TensorArchive& archive) {
  Json manifest = archive.meta;
  manifest["dtype"] = "float64-le";
  Json entries = Json::array();
  for (const auto& [name, m] : archive.arrays) entries.push_back({{"name", name}, {"rows", m.rows()}, {"cols", m.cols()}});
  manifest["entries"] = std::move(entries);
  const std::string text = manifest.dump();
  std::string out(kCheckpointMagic);
  binio::put_u64(out, text.size());
  out += text;
  for (const auto& [_, m] : archive.arrays)
    for (Eigen::Index i = 0; i < m.size(); ++i) binio::put_f64(out, m.data()[i]);
  return out;
}

inline TensorArchive decode_archive(std::string_view data, const std::string& origin) {
  require(data.substr(0, kCheckpointMagic.size()) == kCheckpointMagic, ErrorCode::kParse,
          origin + ": not a checkpoint file");
  data.remove_prefix(kCheckpointMagic.size());
  binio::Reader header(data.substr(0, 8));
  const std::uint64_t n = header.u64();
  require(8 + n <= data.size(), ErrorCode::kParse, origin + ": truncated manifest");
  TensorArchive archive;
  try {
    archive.meta = Json::parse(data.substr(8, n));
  } catch (const Json::exception& e) {
    throw Error(ErrorCode::kParse, origin + ": bad manifest: " + e.what());
  }
  binio::Reader body(data.substr(8 + n));
  for (const auto& entry : archive.meta.at("entries")) {
    Matrix m(entry.at("rows").get<Eigen::Index>(), entry.at("cols").get<Eigen::Index>());
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = body.f64();
    archive.arrays.emplace_back(entry.at("name").get<std::string>(), std::move(m));
  }
  require(body.done(), ErrorCode::kParse, origin + ": trailing bytes after arrays");
  archive.meta.erase("entries");
  archive.meta.erase("dtype");
  return archive;
}

inline void write_archive(const std::filesystem::path& path, const TensorArchive& archive) {
  write_file(path, encode_archive(archive));
}

inline TensorArchive read_archive(const std::filesystem::path& path) {
  require(std::filesystem::exists(path), ErrorCode::kMissingArtifact, path.string());
  return decode_archive(read_file(path), path.string());
}

inline Json to_json(const LmConfig& c) {
  return {{"vocab_size", c.vocab_size}, {"d_model", c.d_model},       {"n_layers", c.n_layers},
          {"n_heads", c.n_heads},       {"n_kv_heads", c.n_kv_heads}, {"d_ff", c.d_ff},
          {"l_max", c.l_max},           {"tie_embeddings", c.tie_embeddings}};
}

inline LmConfig lm_config_from_json(const Json& j) {
  LmConfig c;
  c.vocab_size = j.at("vocab_size").get<int>();
  c.d_model = j.at("d_model").get<int>();
  c.n_layers = j.at("n_layers").get<int>();
  c.n_heads = j.at("n_heads").get<int>();
  c.n_kv_heads = j.at("n_kv_heads").get<int>();
  c.d_ff = j.at("d_ff").get<int>();
  c.l_max = j.at("l_max").get<int>();
  c.tie_embeddings = j.at("tie_embeddings").get<bool>();
  c.validate();
  return c;
}

inline void save_backbone(const std::filesystem::path& path, const ParameterStore& params, const Json& provenance = {}) {
  TensorArchive archive;
  archive.meta["kind"] = "backbone";
  archive.meta["config"] = to_json(params.config());
  archive.meta["provenance"] = provenance.is_null() ? Json::object() : provenance;
  for (const auto& [name, m] : params.arrays()) archive.arrays.emplace_back(name, m);
  write_archive(path, archive);
}

inline ParameterStore load_backbone(const std::filesystem::path& path) {
  TensorArchive archive = read_archive(path);
  require(archive.meta.value("kind", "") == "backbone", ErrorCode::kParse, path.string() + ": not a backbone");
  ParameterStore params(lm_config_from_json(archive.meta.at("config")));
  for (auto& [name, m] : archive.arrays) params.add(name, std::move(m));
  return params;
}

inline void save_adapter(const std::filesystem::path& path, const LoraAdapter& adapter, const Json& provenance = {}) {
  TensorArchive archive;
  archive.meta["kind"] = "lora-adapter";
  archive.meta["rank"] = adapter.rank;
  archive.meta["alpha"] = adapter.alpha;
  archive.meta["dropout"] = adapter.dropout;
  archive.meta["targets"] = adapter.targets();
  archive.meta["provenance"] = provenance.is_null() ? Json::object() : provenance;
  for (const auto& [name, p] : adapter.layers) {
    archive.arrays.emplace_back(name + ".A", p.a);
    archive.arrays.emplace_back(name + ".B", p.b);
  }
  write_archive(path, archive);
}

inline LoraAdapter load_adapter(const std::filesystem::path& path) {
  TensorArchive archive = read_archive(path);
  require(archive.meta.value("kind", "") == "lora-adapter", ErrorCode::kParse, path.string() + ": not an adapter");
  LoraAdapter adapter;
  adapter.rank = archive.meta.at("rank").get<int>();
  adapter.alpha = archive.meta.at("alpha").get<double>();
  adapter.dropout = archive.meta.at("dropout").get<double>();
  require(archive.arrays.size() % 2 == 0, ErrorCode::kParse, path.string() + ": unpaired adapter arrays");
  for (std::size_t i = 0; i < archive.arrays.size(); i += 2) {
    const std::string& a_name = archive.arrays[i].first;
    require(a_name.size() > 2 && a_name.ends_with(".A") && archive.arrays[i + 1].first == a_name.substr(0, a_name.size() - 2) + ".B",
            ErrorCode::kParse, path.string() + ": malformed adapter entry " + a_name);
    adapter.layers.emplace(a_name.substr(0, a_name.size() - 2),
                           LoraPair{std::move(archive.arrays[i].second), std::move(archive.arrays[i + 1].second)});
  }
  return adapter;
}

}  // namespace elrea
