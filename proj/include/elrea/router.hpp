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

// Per-instance expert weights from gradient-direction similarity to cluster
// centroids.

#pragma once

#include "elrea/gradfeat.hpp"

#include <numeric>
#include <sstream>

namespace elrea {

struct RoutingWeights {
  std::vector<double> w;  // per cluster, index c-1
  double w_base = 1.0;
  std::vector<double> cosines;
  std::vector<double> standardized;
  double max_cos = 0.0;
  bool degenerate = false;  // sigma below tolerance, uniform weights used
  std::string fallback;     // non-empty when the instance had no usable feature

  int clusters() const { return static_cast<int>(w.size()); }
};

inline constexpr double kSigmaTolerance = 1e-12;
inline constexpr double kUnitTolerance = 1e-6;

/// Standardized-cosine softmax over clusters plus w_base = 1 - max cosine,
/// from raw cosines.
inline RoutingWeights weights_from_cosines(std::span<const double> cosines) {
  RoutingWeights r;
  if (cosines.empty()) return r;
  const std::size_t c = cosines.size();
  r.cosines.assign(cosines.begin(), cosines.end());
  double mu = 0.0;
  for (double x : r.cosines) mu += x;
  mu /= static_cast<double>(c);
  double var = 0.0;
  for (double x : r.cosines) var += (x - mu) * (x - mu);
  const double sigma = std::sqrt(var / static_cast<double>(c));
  r.max_cos = *std::max_element(r.cosines.begin(), r.cosines.end());
  r.w_base = 1.0 - r.max_cos;
  if (sigma < kSigmaTolerance) {
    r.degenerate = true;
    r.standardized.assign(c, 0.0);
    r.w.assign(c, 1.0 / static_cast<double>(c));
    return r;
  }
  for (double x : r.cosines) r.standardized.push_back((x - mu) / sigma);
  const double top = *std::max_element(r.standardized.begin(), r.standardized.end());
  double z = 0.0;
  for (double s : r.standardized) {
    r.w.push_back(std::exp(s - top));
    z += r.w.back();
  }
  for (double& x : r.w) x /= z;
  return r;
}

inline RoutingWeights route(const Vector& delta, std::span<const Vector> centroids) {
  if (centroids.empty()) return {};
  require(std::abs(delta.norm() - 1.0) <= kUnitTolerance, ErrorCode::kInvalidArgument, "test direction is not unit norm");
  std::vector<double> cosines;
  for (const auto& cent : centroids) {
    require(cent.size() == delta.size(), ErrorCode::kShapeMismatch, "centroid and test feature lengths differ");
    require(std::abs(cent.norm() - 1.0) <= kUnitTolerance, ErrorCode::kInvalidArgument, "centroid is not unit norm");
    cosines.push_back(std::clamp(delta.dot(cent), -1.0, 1.0));
  }
  return weights_from_cosines(cosines);
}

/// Weights for an instance without a usable gradient feature: uniform over
/// clusters with the base adapter at full weight.
inline RoutingWeights fallback_weights(int clusters, const std::string& reason) {
  RoutingWeights r;
  r.w.assign(static_cast<std::size_t>(clusters), clusters > 0 ? 1.0 / clusters : 0.0);
  r.w_base = 1.0;
  r.fallback = reason.empty() ? "no feature" : reason;
  return r;
}

/// Every weight literally 1, base included.
inline RoutingWeights uniform_weights(int clusters) {
  require(clusters >= 1, ErrorCode::kInvalidArgument, "uniform weights need at least one cluster");
  RoutingWeights r;
  r.w.assign(static_cast<std::size_t>(clusters), 1.0);
  r.w_base = 1.0;
  return r;
}

/// Keeps the k largest cluster weights (ties to the lower cluster id),
/// renormalized to sum 1; w_base is untouched.
inline RoutingWeights top_k(const RoutingWeights& in, int k) {
  require(k >= 1, ErrorCode::kInvalidArgument, "top-k needs k >= 1");
  if (k >= in.clusters()) return in;
  std::vector<std::size_t> order(in.w.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return in.w[a] > in.w[b]; });
  RoutingWeights out = in;
  std::fill(out.w.begin(), out.w.end(), 0.0);
  double kept = 0.0;
  for (int i = 0; i < k; ++i) kept += in.w[order[static_cast<std::size_t>(i)]];
  for (int i = 0; i < k; ++i) {
    const std::size_t c = order[static_cast<std::size_t>(i)];
    out.w[c] = kept > 0.0 ? in.w[c] / kept : 1.0 / k;
  }
  return out;
}

struct RoutingTable {
  std::vector<std::string> ids;
  std::vector<RoutingWeights> weights;
  int clusters = 0;

  const RoutingWeights& at(const std::string& id) const {
    const auto it = std::find(ids.begin(), ids.end(), id);
    require(it != ids.end(), ErrorCode::kInvalidArgument, "no routing weights for '" + id + "'");
    return weights[static_cast<std::size_t>(it - ids.begin())];
  }

  /// Mean weight per cluster plus base.
  std::vector<double> mean_weights() const {
    std::vector<double> mean(static_cast<std::size_t>(clusters) + 1, 0.0);
    for (const auto& w : weights) {
      for (int c = 0; c < clusters; ++c) mean[static_cast<std::size_t>(c)] += w.w[static_cast<std::size_t>(c)];
      mean.back() += w.w_base;
    }
    if (!weights.empty())
      for (double& m : mean) m /= static_cast<double>(weights.size());
    return mean;
  }

  std::string csv() const {
    std::string out = "id";
    for (int c = 1; c <= clusters; ++c) out += ",w_" + std::to_string(c);
    out += ",w_base,max_cos\n";
    for (std::size_t i = 0; i < ids.size(); ++i) {
      out += ids[i];
      for (double x : weights[i].w) out += "," + format_double(x);
      out += "," + format_double(weights[i].w_base) + "," + format_double(weights[i].max_cos) + "\n";
    }
    return out;
  }

  std::string summary_csv() const {
    std::string out = "cluster,mean_weight\n";
    const auto mean = mean_weights();
    for (int c = 0; c < clusters; ++c) out += std::to_string(c + 1) + "," + format_double(mean[static_cast<std::size_t>(c)]) + "\n";
    out += "base," + format_double(mean.back()) + "\n";
    return out;
  }
};

/// Inverse of RoutingTable::csv (cosine details are not stored).
inline RoutingTable parse_routing_csv(const std::string& text, const std::string& origin) {
  std::istringstream in(text);
  std::string line;
  require(static_cast<bool>(std::getline(in, line)) && line.starts_with("id,"), ErrorCode::kParse,
          origin + ": missing routing header");
  RoutingTable table;
  std::size_t fields = 0;
  for (char ch : line) fields += ch == ',';
  table.clusters = static_cast<int>(fields) - 2;
  require(table.clusters >= 0, ErrorCode::kParse, origin + ": bad routing header");
  std::size_t n = 1;
  while (std::getline(in, line)) {
    ++n;
    if (line.empty()) continue;
    std::vector<std::string> cells;
    std::istringstream row(line);
    std::string cell;
    while (std::getline(row, cell, ',')) cells.push_back(cell);
    require(cells.size() == fields + 1, ErrorCode::kParse, origin + ":" + std::to_string(n) + ": wrong field count");
    RoutingWeights w;
    try {
      for (int c = 0; c < table.clusters; ++c) w.w.push_back(std::stod(cells[static_cast<std::size_t>(c) + 1]));
      w.w_base = std::stod(cells[cells.size() - 2]);
      w.max_cos = std::stod(cells.back());
    } catch (const std::exception&) {
      throw Error(ErrorCode::kParse, origin + ":" + std::to_string(n) + ": bad number");
    }
    table.ids.push_back(cells.front());
    table.weights.push_back(std::move(w));
  }
  return table;
}

/// Routes every feature row; ids listed in `failures` (no usable feature)
/// get fallback weights. Output is ordered by id.
inline RoutingTable route_batch(const FeatureMatrix& test, std::span<const Vector> centroids,
                                std::span<const FeatureFailure> failures = {}) {
  RoutingTable table;
  table.clusters = static_cast<int>(centroids.size());
  std::map<std::string, RoutingWeights> by_id;
  for (std::size_t i = 0; i < test.size(); ++i) {
    try {
      by_id[test.ids[i]] = route(test.rows.row(static_cast<Eigen::Index>(i)).transpose(), centroids);
    } catch (const Error& e) {
      by_id[test.ids[i]] = fallback_weights(table.clusters, e.what());
    }
  }
  for (const auto& f : failures) by_id[f.id] = fallback_weights(table.clusters, f.reason);
  for (auto& [id, w] : by_id) {
    table.ids.push_back(id);
    table.weights.push_back(std::move(w));
  }
  return table;
}

}  // namespace elrea
