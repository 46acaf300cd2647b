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

// Pre-norm decoder-only transformer: forward logits, next-token loss and
// exact reverse-mode gradients for the backbone, one adapter, or the gates of
// a learned expert mixture.

#pragma once

#include "elrea/adapters.hpp"
#include "elrea/corpus.hpp"

#include <limits>

namespace elrea {

/// How adapters enter every adapted linear layer.
struct AdapterMix {
  enum class Kind { kNone, kSingle, kFixed, kGated };

  Kind kind = Kind::kNone;
  std::vector<const LoraAdapter*> experts;
  std::vector<double> lambdas;            // kFixed: used as given
  const GatingParams* gating = nullptr;   // kGated

  static AdapterMix none() { return {}; }

  static AdapterMix single(const LoraAdapter& adapter) { return {Kind::kSingle, {&adapter}, {}, nullptr}; }

  static AdapterMix fixed(std::vector<const LoraAdapter*> experts, std::vector<double> lambdas) {
    require(!experts.empty() && experts.size() == lambdas.size(), ErrorCode::kShapeMismatch,
            "one lambda per expert required");
    return {Kind::kFixed, std::move(experts), std::move(lambdas), nullptr};
  }

  static AdapterMix gated(std::vector<const LoraAdapter*> experts, const GatingParams& gating) {
    require(!experts.empty(), ErrorCode::kInvalidArgument, "gated mixture needs experts");
    return {Kind::kGated, std::move(experts), {}, &gating};
  }

  static AdapterMix optional(const LoraAdapter* adapter) { return adapter ? single(*adapter) : none(); }

  const LoraPair* pair(std::size_t expert, const std::string& layer) const {
    auto it = experts[expert]->layers.find(layer);
    return it == experts[expert]->layers.end() ? nullptr : &it->second;
  }
};

struct RunOptions {
  bool training = false;  // enables adapter dropout
  std::uint64_t dropout_seed = 0;
};

/// Which parameter groups receive gradients.
struct WrtSelector {
  bool backbone = false;
  bool adapter = false;
  bool gating = false;

  static WrtSelector parse(std::string_view s) {
    if (s == "adapter-only") return {false, true, false};
    if (s == "backbone-only") return {true, false, false};
    if (s == "all") return {true, true, false};
    if (s == "gating-only") return {false, false, true};
    throw Error(ErrorCode::kInvalidArgument, "unknown parameter selector '" + std::string(s) + "'");
  }

  bool empty() const { return !backbone && !adapter && !gating; }
};

struct Gradients {
  ParameterStore backbone;
  LoraAdapter adapter;
  GatingParams gating;
};

inline Gradients zero_gradients(const ParameterStore& params, const AdapterMix& mix, const WrtSelector& wrt) {
  Gradients g;
  if (wrt.backbone) g.backbone = params.zeros_like();
  if (wrt.adapter) {
    require(mix.kind == AdapterMix::Kind::kSingle, ErrorCode::kInvalidArgument,
            "adapter gradients need a single adapter");
    g.adapter = mix.experts.front()->zeros_like();
  }
  if (wrt.gating) {
    require(mix.kind == AdapterMix::Kind::kGated, ErrorCode::kInvalidArgument, "gating gradients need a gated mix");
    g.gating = mix.gating->zeros_like();
  }
  return g;
}

/// Concatenation in stable order: backbone, then adapter, then gating.
inline Vector flatten(const Gradients& g, const WrtSelector& wrt) {
  std::vector<Vector> parts;
  if (wrt.backbone) parts.push_back(g.backbone.flatten());
  if (wrt.adapter) parts.push_back(flatten(g.adapter));
  if (wrt.gating) parts.push_back(g.gating.flatten());
  Eigen::Index n = 0;
  for (const auto& p : parts) n += p.size();
  Vector out(n);
  Eigen::Index pos = 0;
  for (const auto& p : parts) {
    out.segment(pos, p.size()) = p;
    pos += p.size();
  }
  return out;
}

namespace detail {

constexpr double kNormEps = 1e-6;

inline double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x * M_SQRT1_2)); }

inline double gelu_grad(double x) {
  constexpr double kInvSqrt2Pi = 0.39894228040143267794;
  return 0.5 * (1.0 + std::erf(x * M_SQRT1_2)) + x * kInvSqrt2Pi * std::exp(-0.5 * x * x);
}

struct NormTape {
  Matrix normed;  // x / rms
  Vector rms;
};

inline Matrix rms_norm(const Matrix& x, const Matrix& offset, NormTape& tape) {
  tape.rms = ((x.array().square().rowwise().sum() / static_cast<double>(x.cols())) + kNormEps).sqrt();
  tape.normed = x.array().colwise() / tape.rms.array();
  const Eigen::RowVectorXd gain = (offset.array() + 1.0).matrix().transpose();
  return tape.normed.array().rowwise() * gain.array();
}

inline Matrix rms_norm_backward(const Matrix& dy, const Matrix& offset, const NormTape& tape, Matrix* d_offset) {
  const Eigen::RowVectorXd gain = (offset.array() + 1.0).matrix().transpose();
  if (d_offset) *d_offset += (dy.array() * tape.normed.array()).colwise().sum().matrix().transpose();
  const Matrix dn = dy.array().rowwise() * gain.array();
  const Vector proj = (dn.array() * tape.normed.array()).rowwise().sum() / static_cast<double>(dy.cols());
  Matrix dx = dn - (tape.normed.array().colwise() * proj.array()).matrix();
  return dx.array().colwise() / tape.rms.array();
}

struct LinearTape {
  Matrix x;                // input
  Matrix dropout_scale;    // kSingle + training: mask / (1 - p), else empty
  std::vector<Matrix> u;   // per expert: x B_c (dropped input for kSingle)
  Matrix lambda;           // kGated: T x n_experts
};

inline Matrix linear_forward(const std::string& name, int layer_index, const Matrix& w, const Matrix& x,
                             const AdapterMix& mix, const RunOptions& opts, LinearTape* tape) {
  Matrix y = x * w.transpose();
  if (tape) tape->x = x;
  switch (mix.kind) {
    case AdapterMix::Kind::kNone:
      break;
    case AdapterMix::Kind::kSingle: {
      const LoraPair* p = mix.pair(0, name);
      if (!p) break;
      const LoraAdapter& a = *mix.experts.front();
      Matrix u;
      if (opts.training && a.dropout > 0.0) {
        Rng rng(hash_combine(opts.dropout_seed, static_cast<std::uint64_t>(layer_index)));
        Matrix keep(x.rows(), x.cols());
        const double inv = 1.0 / (1.0 - a.dropout);
        for (Eigen::Index j = 0; j < keep.cols(); ++j)
          for (Eigen::Index i = 0; i < keep.rows(); ++i) keep(i, j) = rng.uniform() >= a.dropout ? inv : 0.0;
        u = (x.array() * keep.array()).matrix() * p->b;
        if (tape) tape->dropout_scale = std::move(keep);
      } else {
        u = x * p->b;
      }
      y.noalias() += a.scale() * (u * p->a.transpose());
      if (tape) tape->u = {std::move(u)};
      break;
    }
    case AdapterMix::Kind::kFixed: {
      if (tape) tape->u.resize(mix.experts.size());
      for (std::size_t c = 0; c < mix.experts.size(); ++c) {
        const LoraPair* p = mix.pair(c, name);
        if (!p || mix.lambdas[c] == 0.0) continue;
        Matrix u = x * p->b;
        y.noalias() += (mix.lambdas[c] * mix.experts[c]->scale()) * (u * p->a.transpose());
        if (tape) tape->u[c] = std::move(u);
      }
      break;
    }
    case AdapterMix::Kind::kGated: {
      auto git = mix.gating->gates.find(name);
      if (git == mix.gating->gates.end()) break;
      require(static_cast<std::size_t>(git->second.rows()) == mix.experts.size(), ErrorCode::kShapeMismatch,
              "gating rows must equal expert count at " + name);
      Matrix logits = x * git->second.transpose();  // T x n
      Matrix lambda = (logits.colwise() - logits.rowwise().maxCoeff()).array().exp();
      lambda.array().colwise() /= lambda.rowwise().sum().array();
      if (tape) tape->u.resize(mix.experts.size());
      for (std::size_t c = 0; c < mix.experts.size(); ++c) {
        const LoraPair* p = mix.pair(c, name);
        if (!p) continue;
        Matrix u = x * p->b;
        Matrix out = mix.experts[c]->scale() * (u * p->a.transpose());
        y.noalias() += (out.array().colwise() * lambda.col(static_cast<Eigen::Index>(c)).array()).matrix();
        if (tape) tape->u[c] = std::move(u);
      }
      if (tape) tape->lambda = std::move(lambda);
      break;
    }
  }
  return y;
}

inline Matrix linear_backward(const std::string& name, const Matrix& w, const Matrix& dy, const AdapterMix& mix,
                              const LinearTape& tape, const WrtSelector& wrt, Gradients& grads) {
  Matrix dx = dy * w;
  if (wrt.backbone) grads.backbone.at(name).noalias() += dy.transpose() * tape.x;
  switch (mix.kind) {
    case AdapterMix::Kind::kNone:
      break;
    case AdapterMix::Kind::kSingle: {
      const LoraPair* p = mix.pair(0, name);
      if (!p) break;
      const double s = mix.experts.front()->scale();
      const Matrix v = dy * p->a;  // T x r
      Matrix dxd = s * (v * p->b.transpose());
      if (tape.dropout_scale.size() > 0) dxd.array() *= tape.dropout_scale.array();
      dx += dxd;
      if (wrt.adapter) {
        auto& g = grads.adapter.layers.at(name);
        g.a.noalias() += s * (dy.transpose() * tape.u[0]);
        if (tape.dropout_scale.size() > 0)
          g.b.noalias() += s * ((tape.x.array() * tape.dropout_scale.array()).matrix().transpose() * v);
        else
          g.b.noalias() += s * (tape.x.transpose() * v);
      }
      break;
    }
    case AdapterMix::Kind::kFixed: {
      for (std::size_t c = 0; c < mix.experts.size(); ++c) {
        const LoraPair* p = mix.pair(c, name);
        if (!p || mix.lambdas[c] == 0.0) continue;
        dx.noalias() += (mix.lambdas[c] * mix.experts[c]->scale()) * ((dy * p->a) * p->b.transpose());
      }
      break;
    }
    case AdapterMix::Kind::kGated: {
      if (tape.lambda.size() == 0) break;
      const Matrix& lambda = tape.lambda;
      Matrix dlambda = Matrix::Zero(lambda.rows(), lambda.cols());
      for (std::size_t c = 0; c < mix.experts.size(); ++c) {
        const LoraPair* p = mix.pair(c, name);
        if (!p) continue;
        const auto ci = static_cast<Eigen::Index>(c);
        const double s = mix.experts[c]->scale();
        const Matrix v = dy * p->a;
        dlambda.col(ci) = s * (v.array() * tape.u[c].array()).rowwise().sum();
        dx.noalias() += ((s * (v * p->b.transpose())).array().colwise() * lambda.col(ci).array()).matrix();
      }
      const Vector mean = (lambda.array() * dlambda.array()).rowwise().sum();
      const Matrix dz = lambda.array() * (dlambda.colwise() - mean).array();
      const Matrix& gate = mix.gating->gates.at(name);
      dx.noalias() += dz * gate;
      if (wrt.gating) grads.gating.gates.at(name).noalias() += dz.transpose() * tape.x;
      break;
    }
  }
  return dx;
}

struct BlockTape {
  Matrix h_in;
  NormTape attn_norm, mlp_norm;
  Matrix q, k, v, attn;
  std::vector<Matrix> probs;  // per head, T x T
  Matrix h_mid;
  Matrix gate_pre, up, act;
  LinearTape lin_q, lin_k, lin_v, lin_o, lin_gate, lin_up, lin_down;
};

}  // namespace detail

/// Activations kept for the backward pass of one sequence.
struct ForwardTape {
  std::vector<int> tokens;
  std::vector<detail::BlockTape> blocks;
  detail::NormTape final_norm;
  Matrix final_normed;
};

/// Logits (T x vocab) for every position of `tokens`.
inline Matrix forward_tokens(const ParameterStore& params, const AdapterMix& mix, std::span<const int> tokens,
                             const RunOptions& opts = {}, ForwardTape* tape = nullptr) {
  const LmConfig& c = params.config();
  const auto T = static_cast<Eigen::Index>(tokens.size());
  require(T >= 1, ErrorCode::kInvalidArgument, "empty sequence");
  require(T <= c.l_max, ErrorCode::kOverLength,
          "sequence length " + std::to_string(T) + " exceeds l_max " + std::to_string(c.l_max));
  const Matrix& embed = params.at("embed");
  const Matrix& pos = params.at("pos_embed");
  Matrix h(T, c.d_model);
  for (Eigen::Index t = 0; t < T; ++t) {
    const int tok = tokens[static_cast<std::size_t>(t)];
    require(tok >= 0 && tok < c.vocab_size, ErrorCode::kInvalidArgument, "token id out of range");
    h.row(t) = embed.row(tok) + pos.row(t);
  }
  if (tape) {
    tape->tokens.assign(tokens.begin(), tokens.end());
    tape->blocks.assign(static_cast<std::size_t>(c.n_layers), {});
  }
  const int hd = c.head_dim();
  const int group = c.n_heads / c.kv_heads();
  const double inv_sqrt_hd = 1.0 / std::sqrt(static_cast<double>(hd));
  int linear_index = 0;
  detail::BlockTape scratch;
  for (int l = 0; l < c.n_layers; ++l) {
    detail::BlockTape& bt = tape ? tape->blocks[static_cast<std::size_t>(l)] : scratch;
    auto lin = [&](const char* family, const Matrix& x, detail::LinearTape& lt) {
      const std::string name = block_name(l, family);
      return detail::linear_forward(name, linear_index++, params.at(name), x, mix, opts, tape ? &lt : nullptr);
    };
    if (tape) bt.h_in = h;
    const Matrix x1 = detail::rms_norm(h, params.at(block_name(l, "attn_norm")), bt.attn_norm);
    Matrix q = lin("q_proj", x1, bt.lin_q);
    Matrix k = lin("k_proj", x1, bt.lin_k);
    Matrix v = lin("v_proj", x1, bt.lin_v);
    Matrix attn(T, c.n_heads * hd);
    if (tape) bt.probs.resize(static_cast<std::size_t>(c.n_heads));
    for (int head = 0; head < c.n_heads; ++head) {
      const int kvh = head / group;
      Matrix scores = (q.middleCols(head * hd, hd) * k.middleCols(kvh * hd, hd).transpose()) * inv_sqrt_hd;
      for (Eigen::Index i = 0; i < T; ++i) {
        const double m = scores.row(i).head(i + 1).maxCoeff();
        double sum = 0.0;
        for (Eigen::Index j = 0; j <= i; ++j) sum += (scores(i, j) = std::exp(scores(i, j) - m));
        scores.row(i).head(i + 1) /= sum;
        scores.row(i).tail(T - i - 1).setZero();
      }
      attn.middleCols(head * hd, hd) = scores * v.middleCols(kvh * hd, hd);
      if (tape) bt.probs[static_cast<std::size_t>(head)] = std::move(scores);
    }
    h += lin("o_proj", attn, bt.lin_o);
    if (tape) {
      bt.q = std::move(q);
      bt.k = std::move(k);
      bt.v = std::move(v);
      bt.attn = std::move(attn);
      bt.h_mid = h;
    }
    const Matrix x2 = detail::rms_norm(h, params.at(block_name(l, "mlp_norm")), bt.mlp_norm);
    Matrix gate_pre = lin("gate_proj", x2, bt.lin_gate);
    Matrix up = lin("up_proj", x2, bt.lin_up);
    Matrix act = gate_pre.unaryExpr(&detail::gelu).cwiseProduct(up);
    h += lin("down_proj", act, bt.lin_down);
    if (tape) {
      bt.gate_pre = std::move(gate_pre);
      bt.up = std::move(up);
      bt.act = std::move(act);
    }
  }
  detail::NormTape final_scratch;
  const Matrix xf = detail::rms_norm(h, params.at("final_norm"), tape ? tape->final_norm : final_scratch);
  const Matrix& head = c.tie_embeddings ? embed : params.at("head");
  Matrix logits = xf * head.transpose();
  if (tape) tape->final_normed = xf;
  return logits;
}

inline Matrix forward(const ParameterStore& params, const AdapterMix& mix, const TokenSequence& seq,
                      const RunOptions& opts = {}, ForwardTape* tape = nullptr) {
  return forward_tokens(params, mix, seq.tokens, opts, tape);
}

inline Matrix forward(const ParameterStore& params, const LoraAdapter* adapter, const TokenSequence& seq) {
  return forward_tokens(params, AdapterMix::optional(adapter), seq.tokens);
}

/// Accumulates gradients of a scalar whose derivative w.r.t. the logits is
/// `dlogits` into `grads`.
inline void backward(const ParameterStore& params, const AdapterMix& mix, const ForwardTape& tape,
                     const Matrix& dlogits, const WrtSelector& wrt, Gradients& grads) {
  const LmConfig& c = params.config();
  const auto T = static_cast<Eigen::Index>(tape.tokens.size());
  const Matrix& embed = params.at("embed");
  const Matrix& head = c.tie_embeddings ? embed : params.at("head");
  Matrix* d_head = nullptr;
  if (wrt.backbone) d_head = &grads.backbone.at(c.tie_embeddings ? "embed" : "head");
  if (d_head) d_head->noalias() += dlogits.transpose() * tape.final_normed;
  Matrix dh = dlogits * head;
  dh = detail::rms_norm_backward(dh, params.at("final_norm"), tape.final_norm,
                                 wrt.backbone ? &grads.backbone.at("final_norm") : nullptr);

  const int hd = c.head_dim();
  const int group = c.n_heads / c.kv_heads();
  const double inv_sqrt_hd = 1.0 / std::sqrt(static_cast<double>(hd));
  for (int l = c.n_layers - 1; l >= 0; --l) {
    const detail::BlockTape& bt = tape.blocks[static_cast<std::size_t>(l)];
    auto lin_back = [&](const char* family, const Matrix& dy, const detail::LinearTape& lt) {
      const std::string name = block_name(l, family);
      return detail::linear_backward(name, params.at(name), dy, mix, lt, wrt, grads);
    };
    auto norm_grad = [&](const char* part) -> Matrix* {
      return wrt.backbone ? &grads.backbone.at(block_name(l, part)) : nullptr;
    };

    // feed-forward
    const Matrix d_act = lin_back("down_proj", dh, bt.lin_down);
    const Matrix d_up = d_act.cwiseProduct(bt.gate_pre.unaryExpr(&detail::gelu));
    const Matrix d_gate = d_act.cwiseProduct(bt.up).cwiseProduct(bt.gate_pre.unaryExpr(&detail::gelu_grad));
    Matrix dx2 = lin_back("gate_proj", d_gate, bt.lin_gate);
    dx2 += lin_back("up_proj", d_up, bt.lin_up);
    dh += detail::rms_norm_backward(dx2, params.at(block_name(l, "mlp_norm")), bt.mlp_norm, norm_grad("mlp_norm"));

    // attention
    const Matrix d_attn = lin_back("o_proj", dh, bt.lin_o);
    Matrix dq = Matrix::Zero(T, bt.q.cols());
    Matrix dk = Matrix::Zero(T, bt.k.cols());
    Matrix dv = Matrix::Zero(T, bt.v.cols());
    for (int h = 0; h < c.n_heads; ++h) {
      const int kvh = h / group;
      const Matrix& p = bt.probs[static_cast<std::size_t>(h)];
      const auto d_out = d_attn.middleCols(h * hd, hd);
      dv.middleCols(kvh * hd, hd).noalias() += p.transpose() * d_out;
      const Matrix dp = d_out * bt.v.middleCols(kvh * hd, hd).transpose();
      const Vector row_dot = (dp.array() * p.array()).rowwise().sum();
      const Matrix ds = (p.array() * (dp.colwise() - row_dot).array()).matrix() * inv_sqrt_hd;
      dq.middleCols(h * hd, hd).noalias() += ds * bt.k.middleCols(kvh * hd, hd);
      dk.middleCols(kvh * hd, hd).noalias() += ds.transpose() * bt.q.middleCols(h * hd, hd);
    }
    Matrix dx1 = lin_back("q_proj", dq, bt.lin_q);
    dx1 += lin_back("k_proj", dk, bt.lin_k);
    dx1 += lin_back("v_proj", dv, bt.lin_v);
    dh += detail::rms_norm_backward(dx1, params.at(block_name(l, "attn_norm")), bt.attn_norm, norm_grad("attn_norm"));
  }
  if (wrt.backbone) {
    Matrix& d_embed = grads.backbone.at("embed");
    Matrix& d_pos = grads.backbone.at("pos_embed");
    for (Eigen::Index t = 0; t < T; ++t) {
      d_embed.row(tape.tokens[static_cast<std::size_t>(t)]) += dh.row(t);
      d_pos.row(t) += dh.row(t);
    }
  }
}

/// Per-position booleans selecting which predicted tokens enter the loss.
using LossMask = std::vector<bool>;

inline LossMask response_mask(const TokenSequence& seq) {
  LossMask m(seq.size(), false);
  for (std::size_t t = 1; t < seq.size(); ++t) m[t] = seq.roles[t] == Role::kResp;
  return m;
}

/// Instruction tokens predicted from their left context (BOS excluded).
inline LossMask instruction_mask(const TokenSequence& seq) {
  LossMask m(seq.size(), false);
  for (std::size_t t = 1; t < seq.size(); ++t) m[t] = seq.roles[t] == Role::kInstr;
  return m;
}

inline LossMask full_mask(const TokenSequence& seq) {
  LossMask m(seq.size(), true);
  if (!m.empty()) m[0] = false;
  return m;
}

namespace detail {

inline void check_mask(const Matrix& logits, std::span<const int> tokens, const LossMask& mask) {
  require(mask.size() == tokens.size() && static_cast<std::size_t>(logits.rows()) == tokens.size(),
          ErrorCode::kShapeMismatch, "mask, logits and sequence lengths differ");
  require(mask.empty() || !mask[0], ErrorCode::kInvalidArgument, "position 0 has no left context to predict from");
  require(std::find(mask.begin(), mask.end(), true) != mask.end(), ErrorCode::kInvalidArgument,
          "loss mask selects no positions");
}

inline Vector log_softmax(const Eigen::Ref<const Eigen::RowVectorXd>& row) {
  const double m = row.maxCoeff();
  const double lse = m + std::log((row.array() - m).exp().sum());
  return (row.array() - lse).matrix().transpose();
}

}  // namespace detail

/// Summed natural-log NLL over masked positions; position t is predicted
/// from logits row t - 1.
inline double ntp_loss(const Matrix& logits, std::span<const int> tokens, const LossMask& mask) {
  detail::check_mask(logits, tokens, mask);
  double loss = 0.0;
  for (std::size_t t = 1; t < tokens.size(); ++t) {
    if (!mask[t]) continue;
    loss -= detail::log_softmax(logits.row(static_cast<Eigen::Index>(t - 1)))(tokens[t]);
  }
  return loss;
}

inline double ntp_loss(const Matrix& logits, const TokenSequence& seq, const LossMask& mask) {
  return ntp_loss(logits, std::span<const int>(seq.tokens), mask);
}

/// d loss / d logits for ntp_loss.
inline Matrix ntp_loss_grad(const Matrix& logits, std::span<const int> tokens, const LossMask& mask) {
  detail::check_mask(logits, tokens, mask);
  Matrix d = Matrix::Zero(logits.rows(), logits.cols());
  for (std::size_t t = 1; t < tokens.size(); ++t) {
    if (!mask[t]) continue;
    const auto row = static_cast<Eigen::Index>(t - 1);
    d.row(row) = detail::log_softmax(logits.row(row)).array().exp().matrix().transpose();
    d(row, tokens[t]) -= 1.0;
  }
  return d;
}

/// Loss and gradient of one sequence, accumulated into `grads`. Returns the loss.
inline double accumulate_gradient(const ParameterStore& params, const AdapterMix& mix, const TokenSequence& seq,
                                  const LossMask& mask, const WrtSelector& wrt, Gradients& grads,
                                  const RunOptions& opts = {}) {
  ForwardTape tape;
  const Matrix logits = forward(params, mix, seq, opts, &tape);
  const double loss = ntp_loss(logits, seq, mask);
  backward(params, mix, tape, ntp_loss_grad(logits, seq.tokens, mask), wrt, grads);
  return loss;
}

/// Flat gradient of ntp_loss for the selected parameter groups.
inline Vector grad(const ParameterStore& params, const AdapterMix& mix, const TokenSequence& seq,
                   const LossMask& mask, const WrtSelector& wrt, const RunOptions& opts = {}) {
  require(!wrt.empty(), ErrorCode::kInvalidArgument, "empty parameter selector");
  Gradients g = zero_gradients(params, mix, wrt);
  accumulate_gradient(params, mix, seq, mask, wrt, g, opts);
  return flatten(g, wrt);
}

inline Vector grad(const ParameterStore& params, const LoraAdapter* adapter, const TokenSequence& seq,
                   const LossMask& mask, std::string_view selector) {
  return grad(params, AdapterMix::optional(adapter), seq, mask, WrtSelector::parse(selector));
}

}  // namespace elrea
