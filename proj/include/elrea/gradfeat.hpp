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

// Per-instance gradient directions: Adam-adjusted instruction gradients,
// seeded +/-1 random projection, epoch averaging and unit normalization.

#pragma once

#include "elrea/trainer.hpp"

#include <array>

namespace elrea {

/// The projection matrix R (d_proj x source_dim, entries +/-1) is never
/// stored. Row j, source block b (64 coordinates) is the 64-bit word
/// sign_word(seed, b, j); bit k set means R[j][64 b + k] = +1.
struct ProjectionSpec {
  std::uint64_t seed = 0;
  int d_proj = 8192;
  std::size_t source_dim = 0;

  std::uint64_t sign_word(std::size_t block, int row) const {
    return hash_combine(hash_combine(seed, block), static_cast<std::uint64_t>(row));
  }

  int sign(int row, std::size_t col) const { return (sign_word(col / 64, row) >> (col % 64)) & 1 ? 1 : -1; }
};

namespace detail {

inline constexpr int kProjectLanes = 16;

// Up to kProjectLanes source columns at once. Within a 64-coordinate block
// every 4 coordinates fold into a 16-entry table of signed partial sums (one
// lane per column), so each output row costs 16 table rows per block. The
// tables (32 KiB) stay in L1.
inline void project_lanes(const Matrix& sources, Eigen::Index first, int lanes, const ProjectionSpec& spec,
                          Matrix& out) {
  constexpr int L = kProjectLanes;
  using Lane = Eigen::Array<double, L, 1>;
  const int p = spec.d_proj;
  const std::size_t blocks = (spec.source_dim + 63) / 64;
  // Lane-interleaved copy of the sources: coordinate i occupies [i*L, i*L + L).
  std::vector<double> src(blocks * 64 * L, 0.0);
  for (int v = 0; v < lanes; ++v)
    for (std::size_t i = 0; i < spec.source_dim; ++i) src[i * L + v] = sources(static_cast<Eigen::Index>(i), first + v);
  std::vector<double> tables(16 * 16 * L);
  std::vector<double> acc_rows(static_cast<std::size_t>(p) * L, 0.0);
  std::vector<std::uint64_t> words(static_cast<std::size_t>(p));
  auto row = [&](int k, std::uint64_t w) {
    return Eigen::Map<const Lane>(tables.data() + (static_cast<std::size_t>(k) * 16 + ((w >> (4 * k)) & 0xf)) * L);
  };
  for (std::size_t b = 0; b < blocks; ++b) {
    // zero padding past source_dim contributes nothing, so every block uses all 16 chunks
    for (int k = 0; k < 16; ++k) {
      const double* g = src.data() + (64 * b + 4 * static_cast<std::size_t>(k)) * L;
      double* t = tables.data() + static_cast<std::size_t>(k) * 16 * L;
      Lane total = Lane::Zero();
      for (int i = 0; i < 4; ++i) total += Eigen::Map<const Lane>(g + i * L);
      Eigen::Map<Lane>{t} = -total;
      for (unsigned mask = 1; mask < 16; ++mask)
        Eigen::Map<Lane>(t + mask * L) = Eigen::Map<const Lane>(t + (mask & (mask - 1)) * L) +
                                         2.0 * Eigen::Map<const Lane>(g + std::countr_zero(mask) * L);
    }
    for (int j = 0; j < p; ++j) words[static_cast<std::size_t>(j)] = spec.sign_word(b, j);
    for (int j = 0; j < p; ++j) {
      const std::uint64_t w = words[static_cast<std::size_t>(j)];
      Lane a0 = row(0, w), a1 = row(1, w);
      for (int k = 2; k < 16; k += 2) {
        a0 += row(k, w);
        a1 += row(k + 1, w);
      }
      Eigen::Map<Lane>(acc_rows.data() + static_cast<std::size_t>(j) * L) += a0 + a1;
    }
  }
  for (int j = 0; j < p; ++j)
    for (int v = 0; v < lanes; ++v) out(j, first + v) = acc_rows[static_cast<std::size_t>(j) * L + v];
}

}  // namespace detail

/// R g for each column of `sources` (source_dim x n). R is regenerated block
/// by block from the seed; each column's result does not depend on which
/// other columns share the call.
inline Matrix project_columns(const Matrix& sources, const ProjectionSpec& spec) {
  require(spec.d_proj >= 1, ErrorCode::kInvalidArgument, "d_proj must be >= 1");
  require(static_cast<std::size_t>(sources.rows()) == spec.source_dim, ErrorCode::kShapeMismatch,
          "gradient length " + std::to_string(sources.rows()) + " != projection source dim " +
              std::to_string(spec.source_dim));
  Matrix out = Matrix::Zero(spec.d_proj, sources.cols());
  for (Eigen::Index c = 0; c < sources.cols(); c += detail::kProjectLanes) {
    const int lanes = static_cast<int>(std::min<Eigen::Index>(detail::kProjectLanes, sources.cols() - c));
    detail::project_lanes(sources, c, lanes, spec, out);
  }
  return out;
}

inline Vector project(const Vector& g, const ProjectionSpec& spec) {
  return project_columns(g, spec).col(0);
}

/// eta * m_hat / (sqrt(v_hat) + eps) for the hypothetical next step
/// (t = state.step + 1) driven by this instance's gradient. The snapshot is
/// not modified.
inline Vector adam_feature(const Vector& grad, const AdamState& state, double eta) {
  require(grad.size() == state.m.size() && grad.size() == state.v.size(), ErrorCode::kShapeMismatch,
          "gradient and optimizer snapshot dimensions differ");
  const double t = static_cast<double>(state.step + 1);
  const auto& h = state.hyper;
  const Vector m_hat = (h.beta1 * state.m + (1.0 - h.beta1) * grad) / (1.0 - std::pow(h.beta1, t));
  const Vector v_hat = (h.beta2 * state.v + (1.0 - h.beta2) * grad.cwiseProduct(grad)) / (1.0 - std::pow(h.beta2, t));
  return eta * (m_hat.array() / (v_hat.array().sqrt() + h.eps)).matrix();
}

/// Leading instruction tokens (BOS .. SEP); what the instruction gradient sees.
inline TokenSequence instruction_prefix(const TokenSequence& seq) {
  TokenSequence out;
  for (std::size_t t = 0; t < seq.size() && seq.roles[t] == Role::kInstr; ++t) {
    out.tokens.push_back(seq.tokens[t]);
    out.roles.push_back(Role::kInstr);
  }
  return out;
}

/// Adapter gradient of the loss on instruction tokens only. Response tokens
/// never enter the loss or its context.
inline Vector instruction_gradient(const ParameterStore& backbone, const LoraAdapter& adapter,
                                   const TokenSequence& seq) {
  const TokenSequence prefix = instruction_prefix(seq);
  require(prefix.size() >= 2, ErrorCode::kInvalidArgument, "no instruction token beyond BOS to predict");
  return grad(backbone, AdapterMix::single(adapter), prefix, instruction_mask(prefix), {false, true, false});
}

inline constexpr double kZeroDirectionTolerance = 1e-12;

/// Mean over epochs, then unit-normalized.
inline Vector epoch_avg_normalize(std::span<const Vector> per_epoch) {
  require(!per_epoch.empty(), ErrorCode::kInvalidArgument, "no epoch features");
  Vector mean = Vector::Zero(per_epoch.front().size());
  for (const auto& f : per_epoch) {
    require(f.size() == mean.size(), ErrorCode::kShapeMismatch, "epoch features differ in length");
    mean += f;
  }
  mean /= static_cast<double>(per_epoch.size());
  const double norm = mean.norm();
  require(norm >= kZeroDirectionTolerance && std::isfinite(norm), ErrorCode::kZeroDirection,
          "averaged gradient feature has norm " + format_double(norm));
  return mean / norm;
}

/// Rows of unit gradient directions, sorted by instance id.
struct FeatureMatrix {
  std::vector<std::string> ids;
  RowMatrix rows;

  std::size_t size() const { return ids.size(); }
  Eigen::Index dim() const { return rows.cols(); }

  std::optional<std::size_t> find(const std::string& id) const {
    auto it = std::lower_bound(ids.begin(), ids.end(), id);
    if (it == ids.end() || *it != id) return std::nullopt;
    return static_cast<std::size_t>(it - ids.begin());
  }
};

struct FeatureFailure {
  std::string id;
  std::string reason;
};

inline constexpr std::string_view kFeatureMagic = "ELRFEAT1";

/// Binary matrix (row-major float64) + id manifest (one id per line).
inline void save_features(const std::filesystem::path& bin_path, const FeatureMatrix& fm) {
  std::string out(kFeatureMagic);
  binio::put_u64(out, static_cast<std::uint64_t>(fm.rows.rows()));
  binio::put_u64(out, static_cast<std::uint64_t>(fm.rows.cols()));
  for (Eigen::Index i = 0; i < fm.rows.size(); ++i) binio::put_f64(out, fm.rows.data()[i]);
  write_file(bin_path, out);
  std::string ids;
  for (const auto& id : fm.ids) ids += id + "\n";
  write_file(std::filesystem::path(bin_path).replace_extension(".ids"), ids);
}

inline FeatureMatrix load_features(const std::filesystem::path& bin_path) {
  require(std::filesystem::exists(bin_path), ErrorCode::kMissingArtifact, bin_path.string());
  const std::string data = read_file(bin_path);
  require(std::string_view(data).substr(0, kFeatureMagic.size()) == kFeatureMagic, ErrorCode::kParse,
          bin_path.string() + ": not a feature matrix");
  binio::Reader r(std::string_view(data).substr(kFeatureMagic.size()));
  FeatureMatrix fm;
  const auto n = static_cast<Eigen::Index>(r.u64());
  const auto d = static_cast<Eigen::Index>(r.u64());
  fm.rows.resize(n, d);
  for (Eigen::Index i = 0; i < fm.rows.size(); ++i) fm.rows.data()[i] = r.f64();
  require(r.done(), ErrorCode::kParse, bin_path.string() + ": trailing bytes");
  std::istringstream ids(read_file(std::filesystem::path(bin_path).replace_extension(".ids")));
  for (std::string line; std::getline(ids, line);) fm.ids.push_back(line);
  require(static_cast<Eigen::Index>(fm.ids.size()) == n, ErrorCode::kParse, bin_path.string() + ": id count mismatch");
  return fm;
}

inline std::string features_csv(const FeatureMatrix& fm) {
  std::string out = "id";
  for (Eigen::Index j = 0; j < fm.dim(); ++j) out += ",f" + std::to_string(j);
  out += "\n";
  for (std::size_t i = 0; i < fm.size(); ++i) {
    out += fm.ids[i];
    for (Eigen::Index j = 0; j < fm.dim(); ++j) out += "," + format_double(fm.rows(static_cast<Eigen::Index>(i), j));
    out += "\n";
  }
  return out;
}

struct FeatureInput {
  std::string id;
  const TokenSequence* seq = nullptr;
};

struct FeatureBuildOptions {
  std::size_t chunk = 64;  // instances per projection pass and per persisted batch
  std::filesystem::path progress_path;  // empty disables incremental persistence
};

struct FeatureBuildResult {
  FeatureMatrix matrix;
  std::vector<FeatureFailure> failures;
  std::size_t resumed = 0;  // rows taken from the progress file
  double seconds = 0.0;
};

namespace detail {

// Progress records: u64 id length | id | u64 status (0 ok, 1 failed) |
// ok: d_proj float64 | failed: u64 reason length | reason.
inline void append_progress(const std::filesystem::path& path, const std::string& id, const Vector* row,
                            const std::string& reason) {
  std::string rec;
  binio::put_u64(rec, id.size());
  rec += id;
  binio::put_u64(rec, row ? 0 : 1);
  if (row) {
    for (Eigen::Index i = 0; i < row->size(); ++i) binio::put_f64(rec, (*row)(i));
  } else {
    binio::put_u64(rec, reason.size());
    rec += reason;
  }
  std::ofstream out(path, std::ios::binary | std::ios::app);
  out.write(rec.data(), static_cast<std::streamsize>(rec.size()));
  require(static_cast<bool>(out), ErrorCode::kIo, "cannot append to " + path.string());
}

struct ProgressEntry {
  std::optional<Vector> row;
  std::string reason;
};

inline std::map<std::string, ProgressEntry> read_progress(const std::filesystem::path& path, int d_proj) {
  std::map<std::string, ProgressEntry> out;
  if (path.empty() || !std::filesystem::exists(path)) return out;
  const std::string data = read_file(path);
  std::string_view view(data);
  // A record cut short by an interrupted write is dropped.
  while (view.size() >= 8) {
    binio::Reader r(view.substr(0, 8));
    const std::uint64_t id_len = r.u64();
    if (view.size() < 16 + id_len) break;
    std::string id(view.substr(8, id_len));
    binio::Reader s(view.substr(8 + id_len, 8));
    const std::uint64_t status = s.u64();
    std::size_t consumed = 16 + id_len;
    ProgressEntry entry;
    if (status == 0) {
      const std::size_t need = 8 * static_cast<std::size_t>(d_proj);
      if (view.size() < consumed + need) break;
      binio::Reader vals(view.substr(consumed, need));
      Vector row(d_proj);
      for (int j = 0; j < d_proj; ++j) row(j) = vals.f64();
      entry.row = std::move(row);
      consumed += need;
    } else {
      if (view.size() < consumed + 8) break;
      binio::Reader len(view.substr(consumed, 8));
      const std::uint64_t n = len.u64();
      if (view.size() < consumed + 8 + n) break;
      entry.reason = std::string(view.substr(consumed + 8, n));
      consumed += 8 + n;
    }
    out[id] = std::move(entry);
    view.remove_prefix(consumed);
  }
  return out;
}

}  // namespace detail

/// Delta rows for every input. The projection is linear, so the epoch mean
/// is taken over the Adam features before projecting and R is applied once
/// per instance.
inline FeatureBuildResult build_feature_matrix(const ParameterStore& backbone, std::span<const EpochSnapshot> run,
                                               std::span<const FeatureInput> inputs, const ProjectionSpec& spec,
                                               const FeatureBuildOptions& options = {}) {
  require(!run.empty(), ErrorCode::kInvalidArgument, "no epoch snapshots");
  require(options.chunk >= 1, ErrorCode::kInvalidArgument, "chunk must be >= 1");
  Stopwatch clock;
  FeatureBuildResult result;
  auto done = detail::read_progress(options.progress_path, spec.d_proj);

  std::vector<const FeatureInput*> todo;
  for (const auto& in : inputs)
    if (!done.count(in.id)) todo.push_back(&in);
  result.resumed = inputs.size() - todo.size();

  const auto dim = static_cast<Eigen::Index>(spec.source_dim);
  const double inv_epochs = 1.0 / static_cast<double>(run.size());
  for (std::size_t start = 0; start < todo.size(); start += options.chunk) {
    const std::size_t end = std::min(todo.size(), start + options.chunk);
    const auto n = static_cast<Eigen::Index>(end - start);
    std::vector<std::string> failure(end - start);
    Matrix sources = Matrix::Zero(dim, n);
    for (std::size_t i = start; i < end; ++i) {
      const auto col = static_cast<Eigen::Index>(i - start);
      try {
        for (const auto& snap : run) {
          const Vector g = instruction_gradient(backbone, snap.adapter, *todo[i]->seq);
          sources.col(col) += adam_feature(g, snap.state, snap.final_lr);
        }
        sources.col(col) *= inv_epochs;
      } catch (const Error& e) {
        failure[i - start] = e.what();
        sources.col(col).setZero();
      }
    }
    const Matrix projected = project_columns(sources, spec);
    for (std::size_t i = start; i < end; ++i) {
      const auto col = static_cast<Eigen::Index>(i - start);
      detail::ProgressEntry entry;
      if (failure[i - start].empty()) {
        const Vector mean = projected.col(col);
        try {
          entry.row = epoch_avg_normalize(std::span<const Vector>(&mean, 1));
        } catch (const Error& e) {
          failure[i - start] = e.what();
        }
      }
      entry.reason = failure[i - start];
      if (!options.progress_path.empty())
        detail::append_progress(options.progress_path, todo[i]->id, entry.row ? &*entry.row : nullptr, entry.reason);
      done[todo[i]->id] = std::move(entry);
    }
  }

  std::vector<std::string> ok_ids;
  for (const auto& in : inputs) {
    const auto& entry = done.at(in.id);
    if (entry.row) ok_ids.push_back(in.id);
    else result.failures.push_back({in.id, entry.reason});
  }
  std::sort(ok_ids.begin(), ok_ids.end());
  require(std::adjacent_find(ok_ids.begin(), ok_ids.end()) == ok_ids.end(), ErrorCode::kInvalidArgument,
          "duplicate instance ids");
  std::sort(result.failures.begin(), result.failures.end(),
            [](const auto& a, const auto& b) { return a.id < b.id; });
  result.matrix.ids = ok_ids;
  result.matrix.rows.resize(static_cast<Eigen::Index>(ok_ids.size()), spec.d_proj);
  for (std::size_t i = 0; i < ok_ids.size(); ++i)
    result.matrix.rows.row(static_cast<Eigen::Index>(i)) = done.at(ok_ids[i]).row->transpose();
  result.seconds = clock.seconds();
  return result;
}

}  // namespace elrea
