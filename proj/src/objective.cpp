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

#include "gramnet/objective.hpp"

#include <cmath>
#include <string>

namespace gramnet {

KlMode kl_mode_from_name(const std::string& name) {
  if (name == "exact") return KlMode::kExact;
  if (name == "taylor") return KlMode::kTaylor;
  throw ConfigError("unknown kl mode: " + name);
}

const char* kl_mode_name(KlMode m) {
  return m == KlMode::kExact ? "exact" : "taylor";
}

double ObjectiveConfig::nu_for_layer(std::size_t layer) const {
  if (nu.empty()) return 0.0;
  if (nu.size() == 1) return nu.front();
  return nu.at(layer);
}

void ObjectiveConfig::validate(std::size_t layer_count) const {
  if (mc_samples_train < 1)
    throw ConfigError("objective: mc_samples_train must be >= 1");
  if (nu.size() > 1 && nu.size() != layer_count)
    throw ConfigError("objective: nu must have one entry or one per layer");
  for (double v : nu)
    if (!(v >= 0.0)) throw ConfigError("objective: nu entries must be >= 0");
}

Var kl_exact_core(Tape& tape, Var g, Var k, double jitter) {
  const index_t p = tape.value(g).rows();
  if (tape.value(k).rows() != p || tape.value(k).cols() != p ||
      tape.value(g).cols() != p)
    throw ShapeMismatch("kl_exact_core: dimension mismatch");
  Var trace_term = tape.trace(tape.chol_solve(k, g, jitter));
  Var logdet_g = tape.logdet_via_chol(g, jitter);
  Var logdet_k = tape.logdet_via_chol(k, jitter);
  Var constant = tape.constant_scalar(static_cast<double>(p));
  return tape.sub(tape.sub(tape.add(trace_term, logdet_k), logdet_g),
                  constant);
}

Var kl_taylor_core_from_factor(Tape& tape, Var g_factor, Var k) {
  const index_t p = tape.value(k).rows();
  if (tape.value(g_factor).rows() != p)
    throw ShapeMismatch("kl_taylor_core: dimension mismatch");
  Var m = tape.chol_factor_solve(g_factor, k);  // G^{-1} K
  Var eye = tape.constant(DenseMatrix::identity(p, tape.precision()));
  return tape.scale(tape.frobenius_norm_sq(tape.sub(m, eye)), 0.5);
}

Var output_kl(Tape& tape, Var head_mean, Var head_cov_factor, Var k_flat_ii,
              double jitter) {
  const index_t p = tape.value(k_flat_ii).rows();
  const index_t classes = tape.value(head_mean).cols();
  if (tape.value(head_mean).rows() != p ||
      tape.value(head_cov_factor).rows() != p)
    throw ShapeMismatch("output_kl: dimension mismatch");
  const double c = static_cast<double>(classes);

  Var l_k = tape.cholesky(k_flat_ii, jitter);
  // Sum over classes of mu^T K^{-1} mu.
  Var w = tape.chol_factor_solve(l_k, head_mean);
  Var quad = tape.sum(tape.hadamard(head_mean, w));
  // Tr(K^{-1} Sigma) with Sigma = S S^T.
  Var sigma = tape.matmul(head_cov_factor, tape.transpose(head_cov_factor));
  Var tr = tape.trace(tape.chol_factor_solve(l_k, sigma));
  Var ld_k = tape.logdet_via_chol(k_flat_ii, jitter);
  Var ld_sigma = tape.logdet_via_chol(sigma, 0.0);
  Var dims = tape.constant_scalar(static_cast<double>(p));
  Var per_class = tape.sub(tape.add(tr, tape.sub(ld_k, ld_sigma)), dims);
  return tape.scale(tape.add(tape.scale(per_class, c), quad), 0.5);
}

double kl_exact_core(const SymMatrix& g, const SymMatrix& k) {
  Tape t(g.precision());
  Var gv = t.constant(g.to_dense());
  Var kv = t.constant(k.to_dense());
  return t.scalar_value(kl_exact_core(t, gv, kv));
}

double kl_taylor_core(const SymMatrix& g, const SymMatrix& k) {
  Tape t(g.precision());
  Var gv = t.constant(g.to_dense());
  Var kv = t.constant(k.to_dense());
  Var g_factor = t.cholesky(gv, 0.0);
  return t.scalar_value(kl_taylor_core_from_factor(t, g_factor, kv));
}

double output_kl(const DenseMatrix& mean, const SymMatrix& sigma,
                 const SymMatrix& k) {
  Tape t(mean.precision());
  Var mu = t.constant(mean);
  Var s_factor = t.cholesky(t.constant(sigma.to_dense()), 0.0);
  Var kv = t.constant(k.to_dense());
  return t.scalar_value(output_kl(t, mu, s_factor, kv));
}

Var assemble_objective(Tape& tape, const ForwardResult& fwd,
                       const std::vector<int>& labels,
                       const ObjectiveConfig& cfg, index_t train_set_size,
                       double* objective_value) {
  cfg.validate(fwd.layers.size());
  if (fwd.logit_samples.empty())
    throw ShapeMismatch("assemble_objective: forward carried no logit samples");
  if (static_cast<int>(fwd.logit_samples.size()) < cfg.mc_samples_train)
    throw ShapeMismatch(
        "assemble_objective: forward drew fewer logit samples than "
        "mc_samples_train");
  if (train_set_size < 1)
    throw ShapeMismatch("assemble_objective: empty training set");
  const index_t batch = tape.value(fwd.logit_samples.front()).rows();
  if (static_cast<index_t>(labels.size()) != batch)
    throw ShapeMismatch("assemble_objective: one label per datapoint required");

  // Monte-Carlo expected log-likelihood, per datapoint.
  Var ll_sum;
  for (int s = 0; s < cfg.mc_samples_train; ++s) {
    Var term = tape.softmax_log_likelihood(fwd.logit_samples[s], labels);
    ll_sum = s == 0 ? term : tape.add(ll_sum, term);
  }
  Var expected_ll = tape.scale(
      ll_sum, 1.0 / (static_cast<double>(cfg.mc_samples_train) *
                     static_cast<double>(batch)));

  // Regulariser: output KL plus the per-layer cores on the learned Grams,
  // divided by the training-set size so minibatch gradients stay unbiased.
  Var head_mean, head_cov_param;
  for (const auto& [name, var] : fwd.params) {
    if (name == "head.mu") head_mean = var;
    if (name == "head.sigma") head_cov_param = var;
  }
  Var cov_factor = tape.tril_exp_diag(head_cov_param);
  Var reg = output_kl(tape, head_mean, cov_factor, fwd.k_flat_ii);
  for (std::size_t l = 0; l < fwd.layers.size(); ++l) {
    const double nu = cfg.nu_for_layer(l);
    if (nu == 0.0) continue;
    Var core = cfg.kl_mode == KlMode::kExact
                   ? kl_exact_core(tape, fwd.layers[l].g_ii,
                                   fwd.layers[l].k_ii_in)
                   : kl_taylor_core_from_factor(tape, fwd.layers[l].l_factor,
                                                fwd.layers[l].k_ii_in);
    reg = tape.add(reg, tape.scale(core, nu));
  }
  Var objective = tape.sub(
      expected_ll,
      tape.scale(reg, 1.0 / static_cast<double>(train_set_size)));
  if (objective_value) *objective_value = tape.scalar_value(objective);
  return tape.scale(objective, -1.0);  // trainer minimises
}

}  // namespace gramnet
