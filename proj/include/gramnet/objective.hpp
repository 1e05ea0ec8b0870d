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

#ifndef GRAMNET_OBJECTIVE_HPP
#define GRAMNET_OBJECTIVE_HPP

#include <vector>

#include "gramnet/net.hpp"

namespace gramnet {

enum class KlMode : std::uint8_t { kExact, kTaylor };

KlMode kl_mode_from_name(const std::string& name);
const char* kl_mode_name(KlMode m);

struct ObjectiveConfig {
  std::vector<double> nu;  // per-layer strengths; one entry broadcasts
  KlMode kl_mode = KlMode::kTaylor;
  int mc_samples_train = 1;

  double nu_for_layer(std::size_t layer) const;
  void validate(std::size_t layer_count) const;
};

/// Tr(K^{-1}G) - logdet(K^{-1}G) - P: the Gaussian KL core, zero at G = K.
/// The trace term goes through a Cholesky solve of K, so its inverse is
/// backpropagated into both arguments.
Var kl_exact_core(Tape& tape, Var g, Var k, double jitter = 0.0);

/// 0.5 * ||G^{-1}K - I||_F^2, solving against the learned factor of G so the
/// inverse's gradient flows only into that factor.
Var kl_taylor_core_from_factor(Tape& tape, Var g_factor, Var k);

/// Sum over classes of KL(N(mu_l, Sigma) || N(0, K)) with Sigma = S S^T.
Var output_kl(Tape& tape, Var head_mean, Var head_cov_factor, Var k_flat_ii,
              double jitter = 0.0);

// Plain-value overloads for tests and diagnostics.
double kl_exact_core(const SymMatrix& g, const SymMatrix& k);
double kl_taylor_core(const SymMatrix& g, const SymMatrix& k);
double output_kl(const DenseMatrix& mean, const SymMatrix& sigma,
                 const SymMatrix& k);

/// Assemble the minibatch training loss: the negation of
///   mean expected log-likelihood
///   - (1/P_train_total) * [ output_kl + sum_l nu_l * kl_core(G_l, K_l) ],
/// with the layer cores evaluated on the learned (pre-regularisation) G_ii.
/// `objective_value` receives the objective (not the loss) for logging.
Var assemble_objective(Tape& tape, const ForwardResult& fwd,
                       const std::vector<int>& labels,
                       const ObjectiveConfig& cfg, index_t train_set_size,
                       double* objective_value = nullptr);

}  // namespace gramnet

#endif  // GRAMNET_OBJECTIVE_HPP
