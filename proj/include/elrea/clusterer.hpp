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

// BIRCH clustering of unit gradient directions, the imbalance-driven
// re-clustering loop, centroids and per-cluster source reports.

#pragma once

#include "elrea/gradfeat.hpp"

#include <numeric>

namespace elrea {

enum class Linkage { kSingle, kWard };

inline const char* to_string(Linkage l) { return l == Linkage::kWard ? "ward" : "single"; }

inline Linkage parse_linkage(const std::string& s) {
  if (s == "single") return Linkage::kSingle;
  if (s == "ward") return Linkage::kWard;
  throw Error(ErrorCode::kInvalidArgument, "unknown linkage '" + s + "' (single, ward)");
}

struct BirchParams {
  double threshold = 0.5;
  int branching = 50;
  int k = 5;
  Linkage linkage = Linkage::kSingle;  // merge of leaf subclusters into k groups

  void validate() const {
    require(threshold > 0.0, ErrorCode::kInvalidArgument, "BIRCH threshold must be > 0");
    require(branching >= 2, ErrorCode::kInvalidArgument, "BIRCH branching factor must be >= 2");
    require(k >= 2, ErrorCode::kInvalidArgument, "cluster target must be >= 2");
  }
};

/// Clustering feature: count, linear sum, squared-norm sum.
struct ClusteringFeature {
  std::int64_t n = 0;
  Vector ls;
  double ss = 0.0;

  static ClusteringFeature of(const Eigen::Ref<const Vector>& x) { return {1, x, x.squaredNorm()}; }

  void add(const ClusteringFeature& o) {
    if (n == 0) ls = Vector::Zero(o.ls.size());
    n += o.n;
    ls += o.ls;
    ss += o.ss;
  }

  Vector centroid() const { return ls / static_cast<double>(n); }

  double radius() const {
    const double c = ls.squaredNorm() / static_cast<double>(n * n);
    return std::sqrt(std::max(0.0, ss / static_cast<double>(n) - c));
  }
};

/// CF-tree. Leaves hold subclusters of radius <= threshold; every internal
/// entry summarizes its child node.
class CfTree {
 public:
  struct Node {
    bool leaf = true;
    std::vector<ClusteringFeature> entries;
    std::vector<int> children;  // parallel to entries on internal nodes
  };

  CfTree(double threshold, int branching) : threshold_(threshold), branching_(branching) { nodes_.push_back({}); }

  void insert(const Eigen::Ref<const Vector>& x) {
    auto split = insert_into(root_, ClusteringFeature::of(x));
    if (!split) return;
    // Root split: a new root over the two halves.
    Node root;
    root.leaf = false;
    for (int child : {root_, *split}) {
      root.entries.push_back(summary(child));
      root.children.push_back(child);
    }
    nodes_.push_back(std::move(root));
    root_ = static_cast<int>(nodes_.size()) - 1;
  }

  /// Leaf subclusters in depth-first order.
  std::vector<ClusteringFeature> leaf_entries() const {
    std::vector<ClusteringFeature> out;
    collect(root_, out);
    return out;
  }

  const std::vector<Node>& nodes() const { return nodes_; }
  int root() const { return root_; }
  double threshold() const { return threshold_; }

  /// Largest deviation between an internal entry and the sum of its child's
  /// entries (count mismatches return infinity).
  double consistency_error() const {
    double worst = 0.0;
    for (const auto& node : nodes_) {
      if (node.leaf) continue;
      for (std::size_t i = 0; i < node.entries.size(); ++i) {
        const ClusteringFeature sum = summary(node.children[i]);
        const auto& e = node.entries[i];
        if (sum.n != e.n) return std::numeric_limits<double>::infinity();
        worst = std::max({worst, (sum.ls - e.ls).cwiseAbs().maxCoeff(), std::abs(sum.ss - e.ss)});
      }
    }
    return worst;
  }

 private:
  ClusteringFeature summary(int node) const {
    ClusteringFeature s;
    for (const auto& e : nodes_[static_cast<std::size_t>(node)].entries) s.add(e);
    return s;
  }

  static std::size_t closest(const std::vector<ClusteringFeature>& entries, const Vector& x) {
    std::size_t best = 0;
    double best_d = std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < entries.size(); ++i) {
      const double d = (entries[i].centroid() - x).squaredNorm();
      if (d < best_d) {
        best_d = d;
        best = i;
      }
    }
    return best;
  }

  // Returns the index of a new sibling node when `node` had to split.
  std::optional<int> insert_into(int node_index, const ClusteringFeature& cf) {
    const Vector x = cf.centroid();
    Node& node = nodes_[static_cast<std::size_t>(node_index)];
    if (node.leaf) {
      if (!node.entries.empty()) {
        const std::size_t i = closest(node.entries, x);
        ClusteringFeature merged = node.entries[i];
        merged.add(cf);
        if (merged.radius() <= threshold_) {
          node.entries[i] = std::move(merged);
          return std::nullopt;
        }
      }
      node.entries.push_back(cf);
    } else {
      const std::size_t i = closest(node.entries, x);
      const int child = node.children[i];
      auto split = insert_into(child, cf);
      Node& parent = nodes_[static_cast<std::size_t>(node_index)];  // insert_into may reallocate
      if (split) {
        parent.entries[i] = summary(child);
        parent.entries.push_back(summary(*split));
        parent.children.push_back(*split);
      } else {
        parent.entries[i].add(cf);
      }
    }
    if (static_cast<int>(nodes_[static_cast<std::size_t>(node_index)].entries.size()) <= branching_) return std::nullopt;
    return split_node(node_index);
  }

  // Farthest pair of entries seeds two halves; the rest go to the nearer seed.
  int split_node(int node_index) {
    Node old = std::move(nodes_[static_cast<std::size_t>(node_index)]);
    const std::size_t m = old.entries.size();
    std::vector<Vector> c(m);
    for (std::size_t i = 0; i < m; ++i) c[i] = old.entries[i].centroid();
    std::size_t s1 = 0, s2 = 1;
    double far = -1.0;
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = i + 1; j < m; ++j) {
        const double d = (c[i] - c[j]).squaredNorm();
        if (d > far) {
          far = d;
          s1 = i;
          s2 = j;
        }
      }
    Node a, b;
    a.leaf = b.leaf = old.leaf;
    for (std::size_t i = 0; i < m; ++i) {
      const bool to_a = i == s1 || (i != s2 && (c[i] - c[s1]).squaredNorm() <= (c[i] - c[s2]).squaredNorm());
      Node& dst = to_a ? a : b;
      dst.entries.push_back(std::move(old.entries[i]));
      if (!old.leaf) dst.children.push_back(old.children[i]);
    }
    nodes_[static_cast<std::size_t>(node_index)] = std::move(a);
    nodes_.push_back(std::move(b));
    return static_cast<int>(nodes_.size()) - 1;
  }

  void collect(int node, std::vector<ClusteringFeature>& out) const {
    const Node& n = nodes_[static_cast<std::size_t>(node)];
    if (n.leaf) {
      out.insert(out.end(), n.entries.begin(), n.entries.end());
      return;
    }
    for (int child : n.children) collect(child, out);
  }

  double threshold_;
  int branching_;
  std::vector<Node> nodes_;
  int root_ = 0;
};

namespace detail {

// Single-linkage merge of points down to k groups: the minimum spanning tree
// (Prim) with its k-1 heaviest edges removed. Returns a group per point,
// numbered by first appearance.
inline std::vector<int> single_linkage(const Matrix& points, int k) {
  const auto m = points.cols();
  const Vector sq = points.colwise().squaredNorm().transpose();
  Matrix d2 = (-2.0 * points.transpose() * points).colwise() + sq;
  d2.rowwise() += sq.transpose();

  std::vector<bool> in_tree(static_cast<std::size_t>(m), false);
  std::vector<double> best(static_cast<std::size_t>(m), std::numeric_limits<double>::infinity());
  std::vector<Eigen::Index> link(static_cast<std::size_t>(m), -1);
  struct Edge {
    double w;
    Eigen::Index a, b;
  };
  std::vector<Edge> edges;
  best[0] = 0.0;
  for (Eigen::Index step = 0; step < m; ++step) {
    Eigen::Index u = -1;
    for (Eigen::Index v = 0; v < m; ++v)
      if (!in_tree[static_cast<std::size_t>(v)] && (u < 0 || best[static_cast<std::size_t>(v)] < best[static_cast<std::size_t>(u)])) u = v;
    in_tree[static_cast<std::size_t>(u)] = true;
    if (link[static_cast<std::size_t>(u)] >= 0) edges.push_back({best[static_cast<std::size_t>(u)], link[static_cast<std::size_t>(u)], u});
    for (Eigen::Index v = 0; v < m; ++v) {
      if (in_tree[static_cast<std::size_t>(v)]) continue;
      const double d = std::max(0.0, d2(u, v));
      if (d < best[static_cast<std::size_t>(v)]) {
        best[static_cast<std::size_t>(v)] = d;
        link[static_cast<std::size_t>(v)] = u;
      }
    }
  }
  std::stable_sort(edges.begin(), edges.end(), [](const Edge& x, const Edge& y) { return x.w < y.w; });
  std::vector<Eigen::Index> parent(static_cast<std::size_t>(m));
  std::iota(parent.begin(), parent.end(), 0);
  auto find = [&](Eigen::Index x) {
    while (parent[static_cast<std::size_t>(x)] != x) x = parent[static_cast<std::size_t>(x)] = parent[static_cast<std::size_t>(parent[static_cast<std::size_t>(x)])];
    return x;
  };
  const std::size_t keep = edges.size() + 1 - static_cast<std::size_t>(std::min<Eigen::Index>(k, m));
  for (std::size_t e = 0; e < keep; ++e) parent[static_cast<std::size_t>(find(edges[e].a))] = find(edges[e].b);
  std::map<Eigen::Index, int> group;
  std::vector<int> out(static_cast<std::size_t>(m));
  for (Eigen::Index i = 0; i < m; ++i) {
    const auto root = find(i);
    auto it = group.try_emplace(root, static_cast<int>(group.size())).first;
    out[static_cast<std::size_t>(i)] = it->second;
  }
  return out;
}

// Ward merge of weighted points (leaf subclusters with their counts) down to
// k groups. Nearest-neighbour chain over the Lance-Williams update of the
// merge cost n_a n_b / (n_a + n_b) |c_a - c_b|^2; ties go to the lower index.
inline std::vector<int> ward_linkage(const Matrix& points, std::span<const double> weights, int k) {
  const auto m = points.cols();
  const std::size_t um = static_cast<std::size_t>(m);
  const Vector sq = points.colwise().squaredNorm().transpose();
  Matrix d = (-2.0 * points.transpose() * points).colwise() + sq;
  d.rowwise() += sq.transpose();
  std::vector<double> n(weights.begin(), weights.end());
  for (Eigen::Index i = 0; i < m; ++i)
    for (Eigen::Index j = 0; j < m; ++j)
      d(i, j) = i == j ? 0.0 : std::max(0.0, d(i, j)) * n[static_cast<std::size_t>(i)] * n[static_cast<std::size_t>(j)] /
                                   (n[static_cast<std::size_t>(i)] + n[static_cast<std::size_t>(j)]);

  struct Merge {
    double cost;
    Eigen::Index a, b;
  };
  std::vector<Merge> merges;
  std::vector<bool> alive(um, true);
  std::vector<Eigen::Index> chain;
  for (Eigen::Index remaining = m; remaining > 1;) {
    if (chain.empty())
      for (Eigen::Index i = 0; i < m; ++i)
        if (alive[static_cast<std::size_t>(i)]) {
          chain.push_back(i);
          break;
        }
    const Eigen::Index a = chain.back();
    const Eigen::Index prev = chain.size() > 1 ? chain[chain.size() - 2] : -1;
    Eigen::Index b = -1;
    double best = std::numeric_limits<double>::infinity();
    for (Eigen::Index j = 0; j < m; ++j)
      if (j != a && alive[static_cast<std::size_t>(j)] && d(a, j) < best) {
        best = d(a, j);
        b = j;
      }
    if (prev >= 0 && d(a, prev) == best) b = prev;  // keeps the chain from cycling
    if (b != prev) {
      chain.push_back(b);
      continue;
    }
    // a and prev are reciprocal nearest neighbours: merge into the lower index.
    chain.pop_back();
    chain.pop_back();
    const Eigen::Index keep = std::min(a, b), drop = std::max(a, b);
    merges.push_back({best, keep, drop});
    const double na = n[static_cast<std::size_t>(a)], nb = n[static_cast<std::size_t>(b)];
    for (Eigen::Index j = 0; j < m; ++j) {
      if (!alive[static_cast<std::size_t>(j)] || j == a || j == b) continue;
      const double nj = n[static_cast<std::size_t>(j)];
      const double v = ((na + nj) * d(a, j) + (nb + nj) * d(b, j) - nj * best) / (na + nb + nj);
      d(keep, j) = d(j, keep) = v;
    }
    n[static_cast<std::size_t>(keep)] = na + nb;
    alive[static_cast<std::size_t>(drop)] = false;
    --remaining;
  }
  std::stable_sort(merges.begin(), merges.end(), [](const Merge& x, const Merge& y) { return x.cost < y.cost; });
  std::vector<Eigen::Index> parent(um);
  std::iota(parent.begin(), parent.end(), 0);
  auto find = [&](Eigen::Index x) {
    while (parent[static_cast<std::size_t>(x)] != x) x = parent[static_cast<std::size_t>(x)] = parent[static_cast<std::size_t>(parent[static_cast<std::size_t>(x)])];
    return x;
  };
  const std::size_t apply = merges.size() + 1 - static_cast<std::size_t>(std::min<Eigen::Index>(k, m));
  for (std::size_t e = 0; e < apply; ++e) parent[static_cast<std::size_t>(find(merges[e].b))] = find(merges[e].a);
  std::map<Eigen::Index, int> group;
  std::vector<int> out(um);
  for (Eigen::Index i = 0; i < m; ++i)
    out[static_cast<std::size_t>(i)] = group.try_emplace(find(i), static_cast<int>(group.size())).first->second;
  return out;
}

// Relabels to 1..C by first appearance, dropping unused labels.
inline std::vector<int> compact_labels(const std::vector<int>& labels) {
  std::map<int, int> remap;
  std::vector<int> out(labels.size());
  for (std::size_t i = 0; i < labels.size(); ++i)
    out[i] = remap.try_emplace(labels[i], static_cast<int>(remap.size()) + 1).first->second;
  return out;
}

}  // namespace detail

/// Labels (1..C, first-appearance order) for the given rows: CF-tree over a
/// seeded sample of at most `sample_cap` rows, single-linkage (or Ward)
/// merge of its leaf subclusters to k groups, then every row to the nearest group
/// centroid. Fewer than k groups come back when the tree holds fewer
/// subclusters; a single subcluster is an error.
struct BirchLabels {
  std::vector<int> labels;
  std::vector<std::size_t> sample;  // positions within `rows`, insertion order
  std::size_t subclusters = 0;
};

inline BirchLabels birch_labels(const RowMatrix& features, std::span<const std::size_t> rows, std::size_t sample_cap,
                                const BirchParams& params, std::uint64_t seed) {
  params.validate();
  require(rows.size() >= static_cast<std::size_t>(params.k), ErrorCode::kInvalidArgument,
          "need at least " + std::to_string(params.k) + " instances, got " + std::to_string(rows.size()));
  BirchLabels out;
  out.sample.resize(rows.size());
  std::iota(out.sample.begin(), out.sample.end(), 0);
  Rng rng(derive_seed(seed, "birch-sample"));
  rng.shuffle(out.sample);
  if (out.sample.size() > sample_cap) out.sample.resize(sample_cap);

  CfTree tree(params.threshold, params.branching);
  for (std::size_t pos : out.sample) tree.insert(features.row(static_cast<Eigen::Index>(rows[pos])).transpose());
  const auto leaves = tree.leaf_entries();
  out.subclusters = leaves.size();
  require(leaves.size() >= 2, ErrorCode::kDegenerate, "all features fall into a single subcluster");

  Matrix centers(features.cols(), static_cast<Eigen::Index>(leaves.size()));
  for (std::size_t i = 0; i < leaves.size(); ++i) centers.col(static_cast<Eigen::Index>(i)) = leaves[i].centroid();
  std::vector<double> counts;
  for (const auto& leaf : leaves) counts.push_back(static_cast<double>(leaf.n));
  const auto group = params.linkage == Linkage::kWard ? detail::ward_linkage(centers, counts, params.k)
                                                      : detail::single_linkage(centers, params.k);
  const int groups = *std::max_element(group.begin(), group.end()) + 1;
  std::vector<ClusteringFeature> merged(static_cast<std::size_t>(groups));
  for (std::size_t i = 0; i < leaves.size(); ++i) merged[static_cast<std::size_t>(group[i])].add(leaves[i]);
  Matrix global(features.cols(), groups);
  for (int g = 0; g < groups; ++g) global.col(g) = merged[static_cast<std::size_t>(g)].centroid();

  const Vector gsq = global.colwise().squaredNorm().transpose();
  std::vector<int> raw(rows.size());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const Vector x = features.row(static_cast<Eigen::Index>(rows[i])).transpose();
    Eigen::Index best;
    (gsq - 2.0 * global.transpose() * x).minCoeff(&best);
    raw[i] = static_cast<int>(best);
  }
  out.labels = detail::compact_labels(raw);
  return out;
}

struct RebalanceStep {
  int iteration = 0;
  int target = 0;  // sub-cluster count requested for each split
  std::size_t min_size = 0;
  std::vector<int> split;  // cluster ids (before the step) that were re-clustered
  int clusters_before = 0;
  int clusters_after = 0;
};

struct ClusterModel {
  std::vector<std::string> ids;  // feature-matrix order
  std::vector<int> labels;       // 1..C, parallel to ids
  std::vector<Vector> centroids;  // unit, index c-1
  std::vector<std::size_t> sizes;
  std::vector<RebalanceStep> history;
  std::vector<std::string> sample_ids;
  BirchParams params;
  std::uint64_t seed = 0;

  int clusters() const { return static_cast<int>(sizes.size()); }
};

/// Unit-normalized mean of the member rows of each cluster 1..C.
inline std::vector<Vector> centroids(const RowMatrix& features, std::span<const int> labels) {
  require(static_cast<Eigen::Index>(labels.size()) == features.rows(), ErrorCode::kShapeMismatch,
          "label count differs from feature rows");
  const int c = labels.empty() ? 0 : *std::max_element(labels.begin(), labels.end());
  std::vector<Vector> sums(static_cast<std::size_t>(c), Vector::Zero(features.cols()));
  std::vector<std::size_t> counts(static_cast<std::size_t>(c), 0);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    require(labels[i] >= 1, ErrorCode::kInvalidArgument, "cluster labels start at 1");
    sums[static_cast<std::size_t>(labels[i] - 1)] += features.row(static_cast<Eigen::Index>(i)).transpose();
    ++counts[static_cast<std::size_t>(labels[i] - 1)];
  }
  for (int k = 0; k < c; ++k) {
    require(counts[static_cast<std::size_t>(k)] > 0, ErrorCode::kInvalidArgument, "cluster " + std::to_string(k + 1) + " is empty");
    Vector& s = sums[static_cast<std::size_t>(k)];
    s /= static_cast<double>(counts[static_cast<std::size_t>(k)]);
    const double norm = s.norm();
    require(norm >= kZeroDirectionTolerance, ErrorCode::kZeroDirection,
            "cluster " + std::to_string(k + 1) + " has a zero-norm mean direction");
    s /= norm;
  }
  return sums;
}

inline std::vector<std::size_t> cluster_sizes(std::span<const int> labels) {
  const int c = labels.empty() ? 0 : *std::max_element(labels.begin(), labels.end());
  std::vector<std::size_t> sizes(static_cast<std::size_t>(c), 0);
  for (int l : labels) ++sizes[static_cast<std::size_t>(l - 1)];
  return sizes;
}

namespace detail {

inline void finish_model(ClusterModel& model, const FeatureMatrix& features) {
  model.sizes = cluster_sizes(model.labels);
  model.centroids = centroids(features.rows, model.labels);
}

}  // namespace detail

inline ClusterModel birch_fit(const FeatureMatrix& features, std::size_t sample_cap, const BirchParams& params,
                              std::uint64_t seed) {
  std::vector<std::size_t> all(features.size());
  std::iota(all.begin(), all.end(), 0);
  const auto fit = birch_labels(features.rows, all, sample_cap, params, seed);
  ClusterModel model;
  model.ids = features.ids;
  model.labels = fit.labels;
  model.params = params;
  model.seed = seed;
  for (std::size_t pos : fit.sample) model.sample_ids.push_back(features.ids[pos]);
  detail::finish_model(model, features);
  return model;
}

/// Re-clusters every cluster larger than ratio x the current smallest one,
/// targeting max(2, k - i) sub-clusters at iteration i. Stops once balanced
/// or after max_iter iterations. A cluster whose members cannot be split
/// (a single subcluster) is left whole.
inline ClusterModel rebalance(const ClusterModel& model, const FeatureMatrix& features, std::size_t sample_cap,
                              int max_iter = 3, double ratio = 5.0) {
  require(model.labels.size() == features.size(), ErrorCode::kShapeMismatch, "model and features differ in size");
  ClusterModel out = model;
  for (int it = 1; it <= max_iter; ++it) {
    const auto sizes = cluster_sizes(out.labels);
    const std::size_t min_size = *std::min_element(sizes.begin(), sizes.end());
    std::vector<int> oversized;
    for (std::size_t c = 0; c < sizes.size(); ++c)
      if (static_cast<double>(sizes[c]) > ratio * static_cast<double>(min_size)) oversized.push_back(static_cast<int>(c) + 1);
    if (oversized.empty()) break;

    RebalanceStep step;
    step.iteration = it;
    step.target = std::max(2, model.params.k - it);
    step.min_size = min_size;
    step.clusters_before = static_cast<int>(sizes.size());
    BirchParams sub = model.params;
    sub.k = step.target;

    // New labels are assigned in old-cluster order, each split cluster
    // contributing its sub-clusters in place.
    std::map<int, std::vector<int>> parts;  // old cluster -> sub-label per member
    for (int c : oversized) {
      std::vector<std::size_t> members;
      for (std::size_t i = 0; i < out.labels.size(); ++i)
        if (out.labels[i] == c) members.push_back(i);
      if (members.size() < static_cast<std::size_t>(sub.k)) continue;
      try {
        auto fit = birch_labels(features.rows, members, sample_cap, sub,
                                hash_combine(hash_combine(model.seed, static_cast<std::uint64_t>(it)), static_cast<std::uint64_t>(c)));
        if (*std::max_element(fit.labels.begin(), fit.labels.end()) < 2) continue;
        parts[c] = std::move(fit.labels);
        step.split.push_back(c);
      } catch (const Error& e) {
        if (e.code() != ErrorCode::kDegenerate) throw;
      }
    }
    if (step.split.empty()) break;

    std::map<std::pair<int, int>, int> next;  // (old cluster, sub-label or 0) -> new id
    std::map<int, std::size_t> cursor;
    std::vector<int> relabeled(out.labels.size());
    for (int c = 1; c <= step.clusters_before; ++c) {
      if (!parts.count(c)) {
        next[{c, 0}] = static_cast<int>(next.size()) + 1;
        continue;
      }
      const int subs = *std::max_element(parts[c].begin(), parts[c].end());
      for (int s = 1; s <= subs; ++s) next[{c, s}] = static_cast<int>(next.size()) + 1;
    }
    for (std::size_t i = 0; i < out.labels.size(); ++i) {
      const int c = out.labels[i];
      const int s = parts.count(c) ? parts[c][cursor[c]++] : 0;
      relabeled[i] = next.at({c, s});
    }
    out.labels = std::move(relabeled);
    step.clusters_after = static_cast<int>(next.size());
    out.history.push_back(std::move(step));
  }
  detail::finish_model(out, features);
  return out;
}

/// Adjusted Rand index between two labelings of the same items.
inline double adjusted_rand_index(std::span<const int> a, std::span<const int> b) {
  require(a.size() == b.size(), ErrorCode::kShapeMismatch, "labelings differ in length");
  std::map<std::pair<int, int>, std::int64_t> joint;
  std::map<int, std::int64_t> ra, rb;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ++joint[{a[i], b[i]}];
    ++ra[a[i]];
    ++rb[b[i]];
  }
  auto pairs = [](std::int64_t n) { return static_cast<double>(n) * static_cast<double>(n - 1) / 2.0; };
  double index = 0.0, sa = 0.0, sb = 0.0;
  for (const auto& [_, n] : joint) index += pairs(n);
  for (const auto& [_, n] : ra) sa += pairs(n);
  for (const auto& [_, n] : rb) sb += pairs(n);
  const double expected = sa * sb / pairs(static_cast<std::int64_t>(a.size()));
  const double max_index = 0.5 * (sa + sb);
  if (max_index == expected) return 1.0;
  return (index - expected) / (max_index - expected);
}

/// Counts per (cluster, source tag): header "cluster,<tag>...", one row per
/// cluster; tags sorted.
struct ClusterReport {
  std::vector<std::string> tags;
  std::vector<std::vector<std::size_t>> counts;  // [cluster-1][tag]

  std::string csv() const {
    std::string out = "cluster";
    for (const auto& t : tags) out += "," + t;
    out += "\n";
    for (std::size_t c = 0; c < counts.size(); ++c) {
      out += std::to_string(c + 1);
      for (std::size_t n : counts[c]) out += "," + std::to_string(n);
      out += "\n";
    }
    return out;
  }

  /// Largest single-tag share of each cluster.
  std::vector<double> dominant_share() const {
    std::vector<double> out;
    for (const auto& row : counts) {
      const std::size_t total = std::accumulate(row.begin(), row.end(), std::size_t{0});
      out.push_back(total ? static_cast<double>(*std::max_element(row.begin(), row.end())) / static_cast<double>(total) : 0.0);
    }
    return out;
  }
};

inline ClusterReport cluster_report(const ClusterModel& model, const std::map<std::string, std::string>& tag_of) {
  ClusterReport report;
  std::set<std::string> tags;
  for (const auto& id : model.ids) tags.insert(tag_of.at(id));
  report.tags.assign(tags.begin(), tags.end());
  report.counts.assign(static_cast<std::size_t>(model.clusters()), std::vector<std::size_t>(report.tags.size(), 0));
  for (std::size_t i = 0; i < model.ids.size(); ++i) {
    const auto t = std::lower_bound(report.tags.begin(), report.tags.end(), tag_of.at(model.ids[i])) - report.tags.begin();
    ++report.counts[static_cast<std::size_t>(model.labels[i] - 1)][static_cast<std::size_t>(t)];
  }
  return report;
}

// Cluster directory: assignments.csv (id,cluster), centroids.bin (feature
// store format, ids "cluster-<c>"), history.log, sample.ids.
inline void save_cluster_model(const std::filesystem::path& dir, const ClusterModel& model) {
  std::string assign = "id,cluster\n";
  for (std::size_t i = 0; i < model.ids.size(); ++i) assign += model.ids[i] + "," + std::to_string(model.labels[i]) + "\n";
  write_file(dir / "assignments.csv", assign);
  FeatureMatrix cents;
  cents.rows.resize(model.clusters(), model.centroids.empty() ? 0 : model.centroids[0].size());
  for (int c = 0; c < model.clusters(); ++c) {
    cents.ids.push_back("cluster-" + std::to_string(c + 1));
    cents.rows.row(c) = model.centroids[static_cast<std::size_t>(c)].transpose();
  }
  save_features(dir / "centroids.bin", cents);
  std::string log = "threshold=" + format_double(model.params.threshold) + "\nbranching=" +
                    std::to_string(model.params.branching) + "\nk=" + std::to_string(model.params.k) +
                    "\nlinkage=" + to_string(model.params.linkage) + "\nseed=" + std::to_string(model.seed) + "\n";
  for (const auto& h : model.history) {
    log += "iteration=" + std::to_string(h.iteration) + " target=" + std::to_string(h.target) +
           " min_size=" + std::to_string(h.min_size) + " clusters=" + std::to_string(h.clusters_before) + "->" +
           std::to_string(h.clusters_after) + " split=";
    for (std::size_t i = 0; i < h.split.size(); ++i) log += (i ? ";" : "") + std::to_string(h.split[i]);
    log += "\n";
  }
  log += "sizes=";
  for (std::size_t c = 0; c < model.sizes.size(); ++c) log += (c ? ";" : "") + std::to_string(model.sizes[c]);
  log += "\n";
  write_file(dir / "history.log", log);
  std::string sample;
  for (const auto& id : model.sample_ids) sample += id + "\n";
  write_file(dir / "sample.ids", sample);
}

/// Assignments and centroids of a saved model (history stays in the log).
inline ClusterModel load_cluster_model(const std::filesystem::path& dir) {
  require(std::filesystem::exists(dir / "assignments.csv"), ErrorCode::kMissingArtifact,
          (dir / "assignments.csv").string() + " (run the cluster stage)");
  ClusterModel model;
  std::istringstream in(read_file(dir / "assignments.csv"));
  std::string line;
  std::getline(in, line);
  while (std::getline(in, line)) {
    const auto comma = line.rfind(',');
    require(comma != std::string::npos, ErrorCode::kParse, "bad assignment line '" + line + "'");
    model.ids.push_back(line.substr(0, comma));
    model.labels.push_back(std::stoi(line.substr(comma + 1)));
  }
  const auto cents = load_features(dir / "centroids.bin");
  for (Eigen::Index c = 0; c < cents.rows.rows(); ++c) model.centroids.push_back(cents.rows.row(c).transpose());
  model.sizes = cluster_sizes(model.labels);
  return model;
}

}  // namespace elrea
