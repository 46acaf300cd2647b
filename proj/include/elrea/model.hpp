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

// Backbone configuration and parameter storage for the decoder-only LM.

#pragma once

#include "elrea/common.hpp"

#include <algorithm>
#include <array>
#include <map>
#include <span>

namespace elrea {

struct LmConfig {
  int vocab_size = 99;
  int d_model = 64;
  int n_layers = 2;
  int n_heads = 4;
  int n_kv_heads = 0;  // 0 means n_heads (plain multi-head attention)
  int d_ff = 128;
  int l_max = 256;
  bool tie_embeddings = false;

  int kv_heads() const { return n_kv_heads > 0 ? n_kv_heads : n_heads; }
  int head_dim() const { return d_model / n_heads; }
  int kv_dim() const { return kv_heads() * head_dim(); }

  void validate() const {
    require(vocab_size >= 1 && d_model >= 1 && n_layers >= 1 && n_heads >= 1 && d_ff >= 1 && l_max >= 1 &&
                n_kv_heads >= 0,
            ErrorCode::kInvalidArgument, "all model dimensions must be >= 1");
    require(d_model % n_heads == 0, ErrorCode::kInvalidArgument,
            "d_model=" + std::to_string(d_model) + " is not divisible by n_heads=" + std::to_string(n_heads));
    require(n_heads % kv_heads() == 0, ErrorCode::kInvalidArgument, "n_heads must be a multiple of n_kv_heads");
  }

  bool operator==(const LmConfig&) const = default;
};

/// The seven adapted projection families of every block.
inline constexpr std::array<const char*, 7> kLinearFamilies = {"q_proj",  "k_proj",    "v_proj",   "o_proj",
                                                               "up_proj", "down_proj", "gate_proj"};

inline std::string block_name(int layer, std::string_view part) {
  return "blocks." + std::to_string(layer) + "." + std::string(part);
}

struct LinearShape {
  std::string name;
  int d_out = 0;
  int d_in = 0;
};

inline LinearShape linear_shape(const LmConfig& c, int layer, std::string_view family) {
  const int attn = c.n_heads * c.head_dim();
  int d_out = 0, d_in = 0;
  if (family == "q_proj") d_out = attn, d_in = c.d_model;
  else if (family == "k_proj" || family == "v_proj") d_out = c.kv_dim(), d_in = c.d_model;
  else if (family == "o_proj") d_out = c.d_model, d_in = attn;
  else if (family == "up_proj" || family == "gate_proj") d_out = c.d_ff, d_in = c.d_model;
  else if (family == "down_proj") d_out = c.d_model, d_in = c.d_ff;
  else throw Error(ErrorCode::kInvalidArgument, "unknown linear family " + std::string(family));
  return {block_name(layer, family), d_out, d_in};
}

/// Every adapted linear layer, sorted by name.
inline std::vector<LinearShape> linear_shapes(const LmConfig& c,
                                              std::span<const std::string> families = {}) {
  std::vector<LinearShape> out;
  for (int l = 0; l < c.n_layers; ++l) {
    if (families.empty()) {
      for (const char* f : kLinearFamilies) out.push_back(linear_shape(c, l, f));
    } else {
      for (const auto& f : families) out.push_back(linear_shape(c, l, f));
    }
  }
  std::sort(out.begin(), out.end(), [](const auto& a, const auto& b) { return a.name < b.name; });
  return out;
}

/// Named arrays of the backbone. Iteration, flattening and serialization all
/// follow sorted name order.
class ParameterStore {
 public:
  ParameterStore() = default;
  explicit ParameterStore(LmConfig config) : config_(config) {}

  const LmConfig& config() const { return config_; }

  Matrix& add(const std::string& name, Matrix value) {
    auto [it, inserted] = arrays_.emplace(name, std::move(value));
    require(inserted, ErrorCode::kInvalidArgument, "duplicate parameter " + name);
    return it->second;
  }

  bool contains(const std::string& name) const { return arrays_.count(name) > 0; }

  const Matrix& at(const std::string& name) const {
    auto it = arrays_.find(name);
    require(it != arrays_.end(), ErrorCode::kInvalidArgument, "no parameter named " + name);
    return it->second;
  }
  Matrix& at(const std::string& name) {
    auto it = arrays_.find(name);
    require(it != arrays_.end(), ErrorCode::kInvalidArgument, "no parameter named " + name);
    return it->second;
  }

  const std::map<std::string, Matrix>& arrays() const { return arrays_; }
  std::map<std::string, Matrix>& arrays() { return arrays_; }

  std::size_t size() const {
    std::size_t n = 0;
    for (const auto& [_, m] : arrays_) n += static_cast<std::size_t>(m.size());
    return n;
  }

  Vector flatten() const {
    Vector out(static_cast<Eigen::Index>(size()));
    Eigen::Index pos = 0;
    for (const auto& [_, m] : arrays_) {
      out.segment(pos, m.size()) = m.reshaped();
      pos += m.size();
    }
    return out;
  }

  void assign_flat(const Vector& flat) {
    require(static_cast<std::size_t>(flat.size()) == size(), ErrorCode::kShapeMismatch,
            "flat vector length " + std::to_string(flat.size()) + " != " + std::to_string(size()));
    Eigen::Index pos = 0;
    for (auto& [_, m] : arrays_) {
      m.reshaped() = flat.segment(pos, m.size());
      pos += m.size();
    }
  }

  ParameterStore zeros_like() const {
    ParameterStore out(config_);
    for (const auto& [name, m] : arrays_) out.add(name, Matrix::Zero(m.rows(), m.cols()));
    return out;
  }

  bool operator==(const ParameterStore& o) const {
    if (!(config_ == o.config_) || arrays_.size() != o.arrays_.size()) return false;
    for (auto a = arrays_.begin(), b = o.arrays_.begin(); a != arrays_.end(); ++a, ++b) {
      if (a->first != b->first || a->second.rows() != b->second.rows() || a->second.cols() != b->second.cols() ||
          a->second != b->second)
        return false;
    }
    return true;
  }

 private:
  LmConfig config_;
  std::map<std::string, Matrix> arrays_;
};

/// Total backbone parameter count, computed from shapes alone.
inline std::size_t backbone_parameter_count(const LmConfig& c) {
  std::size_t n = static_cast<std::size_t>(c.vocab_size) * c.d_model;  // embed
  n += static_cast<std::size_t>(c.l_max) * c.d_model;                   // pos_embed
  if (!c.tie_embeddings) n += static_cast<std::size_t>(c.vocab_size) * c.d_model;
  n += static_cast<std::size_t>(c.d_model) * (2 * c.n_layers + 1);  // norms
  for (const auto& s : linear_shapes(c)) n += static_cast<std::size_t>(s.d_out) * s.d_in;
  return n;
}

/// Seeded stand-in for a pretrained backbone: N(0, 1/d_in) projections
/// (residual outputs further scaled by 1/sqrt(2 n_layers)), unit-variance
/// embeddings and zero norm offsets (RMSNorm gain is 1 + offset).
inline ParameterStore init_backbone(const LmConfig& config, std::uint64_t seed) {
  config.validate();
  ParameterStore store(config);
  auto normal = [&](const std::string& name, int rows, int cols, double stddev) {
    Rng rng(derive_seed(seed, name));
    Matrix m(rows, cols);
    for (Eigen::Index j = 0; j < m.cols(); ++j)
      for (Eigen::Index i = 0; i < m.rows(); ++i) m(i, j) = stddev * rng.normal();
    store.add(name, std::move(m));
  };
  normal("embed", config.vocab_size, config.d_model, 1.0);
  normal("pos_embed", config.l_max, config.d_model, 1.0);
  if (!config.tie_embeddings) normal("head", config.vocab_size, config.d_model, 1.0 / std::sqrt(config.d_model));
  store.add("final_norm", Matrix::Zero(config.d_model, 1));
  const double residual_scale = 1.0 / std::sqrt(2.0 * config.n_layers);
  for (int l = 0; l < config.n_layers; ++l) {
    store.add(block_name(l, "attn_norm"), Matrix::Zero(config.d_model, 1));
    store.add(block_name(l, "mlp_norm"), Matrix::Zero(config.d_model, 1));
    for (const char* f : kLinearFamilies) {
      const auto s = linear_shape(config, l, f);
      double stddev = 1.0 / std::sqrt(s.d_in);
      if (std::string_view(f) == "o_proj" || std::string_view(f) == "down_proj") stddev *= residual_scale;
      normal(s.name, s.d_out, s.d_in, stddev);
    }
  }
  return store;
}

}  // namespace elrea
