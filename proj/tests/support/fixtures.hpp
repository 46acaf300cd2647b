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

// Shared fixtures for the unit suites: tiny configs, random sequences and a
// central finite-difference oracle.

#pragma once

#include "elrea/transformer.hpp"

#include <functional>

namespace elrea::testing {

inline LmConfig tiny_config() {
  LmConfig c;
  c.vocab_size = 11;
  c.d_model = 8;
  c.n_layers = 2;
  c.n_heads = 2;
  c.n_kv_heads = 1;
  c.d_ff = 12;
  c.l_max = 16;
  return c;
}

inline TokenSequence random_sequence(Rng& rng, const LmConfig& c, int length, int n_instr) {
  TokenSequence seq;
  for (int t = 0; t < length; ++t) {
    seq.tokens.push_back(static_cast<int>(rng.below(static_cast<std::uint64_t>(c.vocab_size))));
    seq.roles.push_back(t < n_instr ? Role::kInstr : Role::kResp);
  }
  return seq;
}

inline void randomize(LoraAdapter& a, Rng& rng, double stddev) {
  for (auto& [_, p] : a.layers) {
    for (Eigen::Index i = 0; i < p.a.size(); ++i) p.a.data()[i] = stddev * rng.normal();
    for (Eigen::Index i = 0; i < p.b.size(); ++i) p.b.data()[i] = stddev * rng.normal();
  }
}

/// Central difference of f at x along coordinate i.
inline double central_difference(const std::function<double(const Vector&)>& f, Vector x, Eigen::Index i,
                                 double h) {
  const double x0 = x(i);
  x(i) = x0 + h;
  const double up = f(x);
  x(i) = x0 - h;
  const double down = f(x);
  return (up - down) / (2.0 * h);
}

/// ||analytic - numeric|| / ||numeric|| over sampled coordinates.
inline double sampled_relative_error(const std::function<double(const Vector&)>& f, const Vector& x,
                                     const Vector& analytic, Rng& rng, int samples, double h = 1e-5) {
  double num = 0.0, den = 0.0;
  for (int s = 0; s < samples; ++s) {
    const auto i = static_cast<Eigen::Index>(rng.below(static_cast<std::uint64_t>(x.size())));
    const double fd = central_difference(f, x, i, h);
    num += (analytic(i) - fd) * (analytic(i) - fd);
    den += fd * fd;
  }
  return std::sqrt(num) / std::max(std::sqrt(den), 1e-300);
}

}  // namespace elrea::testing
