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

// Low-rank adapters: creation, flattening and factor-wise merging.
//
// For a linear layer W (d_out x d_in) the adapter holds A (d_out x r) and
// B (d_in x r); the adapted layer computes W x + (alpha / r) A B^T x.

#pragma once

#include "elrea/model.hpp"

namespace elrea {

struct LoraPair {
  Matrix a;  // d_out x r
  Matrix b;  // d_in x r

  bool operator==(const LoraPair& o) const {
    return a.rows() == o.a.rows() && a.cols() == o.a.cols() && b.rows() == o.b.rows() && b.cols() == o.b.cols() &&
           a == o.a && b == o.b;
  }
};

struct LoraAdapter {
  int rank = 8;
  double alpha = 32.0;
  double dropout = 0.1;
  std::map<std::string, LoraPair> layers;

  double scale() const { return alpha / rank; }

  std::size_t size() const {
    std::size_t n = 0;
    for (const auto& [_, p] : layers) n += static_cast<std::size_t>(p.a.size() + p.b.size());
    return n;
  }

  std::vector<std::string> targets() const {
    std::vector<std::string> out;
    for (const auto& [name, _] : layers) out.push_back(name);
    return out;
  }

  bool same_shape(const LoraAdapter& o) const {
    if (rank != o.rank || layers.size() != o.layers.size()) return false;
    for (auto x = layers.begin(), y = o.layers.begin(); x != layers.end(); ++x, ++y) {
      if (x->first != y->first || x->second.a.rows() != y->second.a.rows() ||
          x->second.b.rows() != y->second.b.rows())
        return false;
    }
    return true;
  }

  LoraAdapter zeros_like() const {
    LoraAdapter out{rank, alpha, dropout, {}};
    for (const auto& [name, p] : layers)
      out.layers.emplace(name, LoraPair{Matrix::Zero(p.a.rows(), p.a.cols()), Matrix::Zero(p.b.rows(), p.b.cols())});
    return out;
  }

  bool operator==(const LoraAdapter&) const = default;
};

struct LoraOptions {
  double alpha = 0.0;  // 0 means 4 r
  double dropout = 0.1;
  std::vector<std::string> families;  // empty means all seven
};

/// A ~ N(0, 1/d_in), B = 0, so the fresh adapter leaves the backbone unchanged.
inline LoraAdapter init_lora(const LmConfig& config, int rank, std::uint64_t seed, const LoraOptions& options = {}) {
  config.validate();
  require(rank >= 1, ErrorCode::kInvalidArgument, "rank must be >= 1");
  require(rank <= config.d_model, ErrorCode::kInvalidArgument,
          "rank " + std::to_string(rank) + " exceeds d_model " + std::to_string(config.d_model));
  LoraAdapter adapter;
  adapter.rank = rank;
  adapter.alpha = options.alpha > 0.0 ? options.alpha : 4.0 * rank;
  adapter.dropout = options.dropout;
  for (const auto& s : linear_shapes(config, options.families)) {
    Rng rng(derive_seed(seed, s.name));
    Matrix a(s.d_out, rank);
    const double stddev = 1.0 / std::sqrt(static_cast<double>(s.d_in));
    for (Eigen::Index j = 0; j < a.cols(); ++j)
      for (Eigen::Index i = 0; i < a.rows(); ++i) a(i, j) = stddev * rng.normal();
    adapter.layers.emplace(s.name, LoraPair{std::move(a), Matrix::Zero(s.d_in, rank)});
  }
  return adapter;
}

/// Layer-name order, A before B within a layer, column-major within a matrix.
inline Vector flatten(const LoraAdapter& adapter) {
  Vector out(static_cast<Eigen::Index>(adapter.size()));
  Eigen::Index pos = 0;
  for (const auto& [_, p] : adapter.layers) {
    out.segment(pos, p.a.size()) = p.a.reshaped();
    pos += p.a.size();
    out.segment(pos, p.b.size()) = p.b.reshaped();
    pos += p.b.size();
  }
  return out;
}

inline LoraAdapter unflatten(const Vector& flat, const LoraAdapter& shape_template) {
  require(static_cast<std::size_t>(flat.size()) == shape_template.size(), ErrorCode::kShapeMismatch,
          "vector length " + std::to_string(flat.size()) + " does not match adapter size " +
              std::to_string(shape_template.size()));
  LoraAdapter out = shape_template;
  Eigen::Index pos = 0;
  for (auto& [_, p] : out.layers) {
    p.a.reshaped() = flat.segment(pos, p.a.size());
    pos += p.a.size();
    p.b.reshaped() = flat.segment(pos, p.b.size());
    pos += p.b.size();
  }
  return out;
}

/// Normalizes raw weights into mixture coefficients lambda_c = w_c / sum w.
inline std::vector<double> normalize_weights(std::span<const double> weights) {
  double total = 0.0;
  for (double w : weights) {
    require(w >= 0.0 && std::isfinite(w), ErrorCode::kInvalidArgument, "weights must be finite and nonnegative");
    total += w;
  }
  require(total > 0.0, ErrorCode::kInvalidArgument, "weights sum to zero");
  std::vector<double> out(weights.begin(), weights.end());
  for (double& w : out) w /= total;
  return out;
}

/// A = sum lambda_c A_c and B = sum lambda_c B_c, independently. Weights are
/// used as given; callers normalize.
inline LoraAdapter merge_weighted(std::span<const LoraAdapter* const> adapters, std::span<const double> weights) {
  require(!adapters.empty(), ErrorCode::kInvalidArgument, "no adapters to merge");
  require(adapters.size() == weights.size(), ErrorCode::kShapeMismatch, "one weight per adapter required");
  double total = 0.0;
  for (double w : weights) {
    require(w >= 0.0, ErrorCode::kInvalidArgument, "merge weights must be nonnegative");
    total += w;
  }
  require(total > 0.0, ErrorCode::kInvalidArgument, "merge weights sum to zero");
  for (const auto* a : adapters)
    require(a->same_shape(*adapters.front()) && a->alpha == adapters.front()->alpha, ErrorCode::kShapeMismatch,
            "adapters differ in shape");
  LoraAdapter out = adapters.front()->zeros_like();
  for (std::size_t k = 0; k < adapters.size(); ++k) {
    if (weights[k] == 0.0) continue;
    for (auto& [name, p] : out.layers) {
      const auto& src = adapters[k]->layers.at(name);
      p.a += weights[k] * src.a;
      p.b += weights[k] * src.b;
    }
  }
  return out;
}

inline LoraAdapter merge_weighted(std::span<const LoraAdapter> adapters, std::span<const double> weights) {
  std::vector<const LoraAdapter*> ptrs;
  for (const auto& a : adapters) ptrs.push_back(&a);
  return merge_weighted(std::span<const LoraAdapter* const>(ptrs), weights);
}

/// Per-layer gating vectors for the learned-gate mixture; one row per expert.
struct GatingParams {
  std::map<std::string, Matrix> gates;  // layer name -> n_experts x d_in

  static GatingParams zeros(const LoraAdapter& shape_template, int n_experts) {
    GatingParams g;
    for (const auto& [name, p] : shape_template.layers) g.gates.emplace(name, Matrix::Zero(n_experts, p.b.rows()));
    return g;
  }

  std::size_t size() const {
    std::size_t n = 0;
    for (const auto& [_, m] : gates) n += static_cast<std::size_t>(m.size());
    return n;
  }

  Vector flatten() const {
    Vector out(static_cast<Eigen::Index>(size()));
    Eigen::Index pos = 0;
    for (const auto& [_, m] : gates) {
      out.segment(pos, m.size()) = m.reshaped();
      pos += m.size();
    }
    return out;
  }

  void assign_flat(const Vector& flat) {
    require(static_cast<std::size_t>(flat.size()) == size(), ErrorCode::kShapeMismatch, "gating vector length");
    Eigen::Index pos = 0;
    for (auto& [_, m] : gates) {
      m.reshaped() = flat.segment(pos, m.size());
      pos += m.size();
    }
  }

  GatingParams zeros_like() const {
    GatingParams out;
    for (const auto& [name, m] : gates) out.gates.emplace(name, Matrix::Zero(m.rows(), m.cols()));
    return out;
  }
};

}  // namespace elrea
