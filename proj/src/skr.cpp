// Copyright 2026 The gramnet Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#include "gramnet/skr.hpp"

#include <cmath>
#include <numbers>
#include <string>

namespace gramnet {

void RegConfig::validate() const {
  if (gamma < 1) throw ConfigError("reg.gamma must be >= 1");
  if (!(lambda >= 0.0) || !std::isfinite(lambda))
    throw ConfigError("reg.lambda must be finite and >= 0");
}

RngState::RngState(std::uint64_t seed) : engine_(seed) {}

std::uint64_t RngState::next_u64() { return engine_(); }

double RngState::uniform() {
  // 53 uniformly random mantissa bits in [0, 1).
  return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
}

double RngState::normal() {
  if (has_spare_) {
    has_spare_ = false;
    return spare_;
  }
  // Box-Muller; u1 in (0, 1] keeps the log finite.
  const double u1 = 1.0 - uniform();
  const double u2 = uniform();
  const double r = std::sqrt(-2.0 * std::log(u1));
  const double a = 2.0 * std::numbers::pi * u2;
  spare_ = r * std::sin(a);
  has_spare_ = true;
  return r * std::cos(a);
}

DenseMatrix RngState::normal_matrix(index_t rows, index_t cols,
                                    Precision prec) {
  DenseMatrix m(rows, cols, prec);
  for (index_t r = 0; r < rows; ++r)
    for (index_t c = 0; c < cols; ++c) m.set(r, c, normal());
  return m;
}

std::vector<index_t> RngState::permutation(index_t n) {
  std::vector<index_t> p(static_cast<std::size_t>(n));
  for (index_t i = 0; i < n; ++i) p[static_cast<std::size_t>(i)] = i;
  for (index_t i = n - 1; i > 0; --i) {
    const index_t j =
        static_cast<index_t>(next_u64() % static_cast<std::uint64_t>(i + 1));
    std::swap(p[static_cast<std::size_t>(i)], p[static_cast<std::size_t>(j)]);
  }
  return p;
}

SymMatrix skr_sample(const SymMatrix& g_ii, const RegConfig& cfg,
                     RngState& rng, SkrMode mode) {
  cfg.validate();
  const index_t n = g_ii.dim();
  // PSD validation; also provides the factor for the Gaussian draws.
  CholFactor factor = cholesky(g_ii, 1e-10);

  SymMatrix out(n, g_ii.precision());
  if (mode == SkrMode::kEval || !cfg.enabled) {
    for (index_t i = 0; i < n; ++i)
      for (index_t j = 0; j <= i; ++j)
        out.set(i, j, g_ii.at(i, j) + (i == j ? cfg.lambda : 0.0));
    return out;
  }

  const DenseMatrix z =
      rng.normal_matrix(n, cfg.gamma, g_ii.precision());
  const DenseMatrix a = matmul(factor.lower, z);  // columns ~ N(0, g_ii)
  const DenseMatrix w =
      scale(matmul(a, a.transposed()), 1.0 / static_cast<double>(cfg.gamma));
  for (index_t i = 0; i < n; ++i)
    for (index_t j = 0; j <= i; ++j)
      out.set(i, j, w.at(i, j) + (i == j ? cfg.lambda : 0.0));
  return out;
}

Var skr_sample_on_tape(Tape& tape, Var g_ii, Var l_factor,
                       const RegConfig& cfg, RngState& rng, SkrMode mode) {
  cfg.validate();
  const index_t n = tape.value(g_ii).rows();
  Var base = g_ii;
  if (mode == SkrMode::kTrain && cfg.enabled) {
    Var z = tape.constant(
        rng.normal_matrix(n, cfg.gamma, tape.precision()));
    Var a = tape.matmul(l_factor, z);
    base = tape.scale(tape.matmul(a, tape.transpose(a)),
                      1.0 / static_cast<double>(cfg.gamma));
  }
  if (cfg.lambda == 0.0) return base;
  Var jitter = tape.constant(
      gramnet::scale(DenseMatrix::identity(n, tape.precision()), cfg.lambda));
  return tape.add(base, jitter);
}

double sample_variance_scale(int gamma) {
  if (gamma < 1) throw ConfigError("sample_variance_scale: gamma must be >= 1");
  return 1.0 / static_cast<double>(gamma);
}

}  // namespace gramnet
