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

#ifndef GRAMNET_SKR_HPP
#define GRAMNET_SKR_HPP

#include <cstdint>
#include <random>
#include <vector>

#include "gramnet/autodiff.hpp"
#include "gramnet/tensor.hpp"

namespace gramnet {

/// Stochastic kernel regularisation settings: degrees of freedom gamma and
/// jitter lambda. Disabled means the deterministic G + lambda*I path.
struct RegConfig {
  int gamma = 1;        // >= 1
  double lambda = 0.0;  // >= 0, finite
  bool enabled = true;

  void validate() const;
};

enum class SkrMode : std::uint8_t { kTrain, kEval };

/// Seeded stream generator. Same seed, same binary: same sequence, bitwise.
/// Normals come from an internal Box-Muller so the stream does not depend on
/// the standard library's distribution implementation.
class RngState {
 public:
  explicit RngState(std::uint64_t seed);

  std::uint64_t next_u64();
  double uniform();  // [0, 1)
  double normal();   // standard normal
  DenseMatrix normal_matrix(index_t rows, index_t cols, Precision prec);
  /// Fisher-Yates over [0, n); deterministic across platforms.
  std::vector<index_t> permutation(index_t n);

 private:
  std::mt19937_64 engine_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

/// Draw the regularised inducing Gram:
///  - train & enabled: (1/gamma) * sum_k a_k a_k^T + lambda*I with
///    a_k ~ N(0, g_ii), i.e. a Wishart(g_ii/gamma, gamma) sample plus jitter;
///    singular when gamma < dim, expectation g_ii + lambda*I.
///  - eval or disabled: exactly g_ii + lambda*I (sample-free).
SymMatrix skr_sample(const SymMatrix& g_ii, const RegConfig& cfg,
                     RngState& rng, SkrMode mode);

/// Tape variant used by the forward pass: the layer's Gram is G = L L^T with
/// L the learned Cholesky factor node, so the Gaussian columns are L * Z and
/// gradients flow into L through plain matrix products.
Var skr_sample_on_tape(Tape& tape, Var g_ii, Var l_factor,
                       const RegConfig& cfg, RngState& rng, SkrMode mode);

/// Variance of sample entries relative to the gamma = 1 base: 1/gamma.
double sample_variance_scale(int gamma);

}  // namespace gramnet

#endif  // GRAMNET_SKR_HPP
