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

#ifndef GRAMNET_NET_HPP
#define GRAMNET_NET_HPP

#include <functional>
#include <string>
#include <vector>

#include "gramnet/kernels.hpp"
#include "gramnet/skr.hpp"

namespace gramnet {

/// Variance floor under the predictive standard deviation's square root;
/// keeps round-off-negative conditional variances from producing NaNs.
inline constexpr double kVarianceFloor = 1e-12;

/// Feature-map geometry of a batch: locations are raster order (y*W + x) and
/// the global row of (image i, location r) is i*S + r.
struct SpatialShape {
  index_t width = 1;
  index_t height = 1;
  index_t images = 0;  // P_t
  index_t locations() const { return width * height; }
  index_t rows() const { return images * locations(); }
};

/// Patch geometry of a kernel convolution: offsets run over
/// dx in [-(patch_w-1)/2, ..], dy likewise; same (zero) padding.
struct ConvGeometry {
  index_t patch_w = 1;
  index_t patch_h = 1;
  index_t stride = 1;
  index_t patch_count() const { return patch_w * patch_h; }
};

struct LayerConfig {
  enum class Kind : std::uint8_t { kFc, kConv };
  Kind kind = Kind::kFc;
  index_t inducing = 0;  // P_i at this layer
  index_t patch_side = 1;
  index_t stride = 1;
  bool skip_with_prev = false;
  bool learn_mixup = false;  // fc layers; conv layers always learn C
  ConvGeometry geometry() const {
    if (kind == Kind::kConv) return {patch_side, patch_side, stride};
    return {1, 1, 1};
  }
};

/// Per-layer learnable state. G_ii = L L^T with L = tril_exp_diag(chol_param),
/// so the Gram stays positive definite under unconstrained gradient steps.
struct LayerState {
  DenseMatrix chol_param;  // P_i x P_i, unconstrained
  DenseMatrix mixup;       // (D*P_i) x P_prev; empty => fixed identity
  DenseMatrix skip_logit;  // 1x1; empty when the layer has no skip
  SymMatrix gram() const;  // materialise G_ii (diagnostics, checkpoints)
};

/// Variational output posterior: one mean column per class, Sigma shared.
struct OutputHead {
  DenseMatrix mean;       // P_i^L x classes
  DenseMatrix cov_param;  // P_i^L x P_i^L unconstrained; Sigma = S S^T
};

struct ModelConfig {
  KernelSpec kernel;
  std::vector<LayerConfig> layers;
  index_t inducing_inputs = 0;  // P_i^0
  index_t input_channels = 0;   // nu_0
  index_t classes = 2;
  double kii_jitter = 1e-8;  // standing jitter on kernel ii factorisations
  RegConfig reg;
  Precision precision = Precision::kDouble;

  void validate() const;
};

struct Model {
  ModelConfig cfg;
  DenseMatrix inducing_inputs;  // P_i^0 x nu_0, learnable
  std::vector<LayerState> layers;
  OutputHead head;

  void for_each_param(
      const std::function<void(const std::string&, DenseMatrix&)>& fn);
  void for_each_param(
      const std::function<void(const std::string&, const DenseMatrix&)>& fn)
      const;
  /// Condition number of each learned (pre-regularisation) G_ii.
  std::vector<double> gram_condition_numbers() const;
};

/// NNGP start: inducing inputs from random training rows, every G_ii set to
/// its layer's prior kernel block, mixups ~ N(0, 1/(D*P_prev)), skip logits 0,
/// head mean 0 and Sigma equal to the prior output kernel block.
/// `input_shape.width/height` describe the training feature maps; its row
/// count must match train_inputs.
Model init_model(const ModelConfig& cfg, const DenseMatrix& train_inputs,
                 const SpatialShape& input_shape, RngState& rng);

enum class RunMode : std::uint8_t { kTrain, kEval };

/// Kernel convolution with inducing mixup. `mixup` may be invalid for the
/// identity (requires matching inducing counts and D = 1). Returns blocks on
/// the strided output grid; out-of-bounds patch offsets contribute zero.
BlocksVar conv_mix(Tape& tape, const BlocksVar& phi, Var mixup,
                   index_t out_inducing, const SpatialShape& in_shape,
                   const ConvGeometry& geom, SpatialShape* out_shape);

SpatialShape conv_output_shape(const SpatialShape& in, const ConvGeometry& g);

/// Condition the train/test blocks on a regularised inducing Gram:
///   G_ti = K_ti K_ii^{-1} G~,​
///   G_tt_diag = K_tt_diag - diag(K_ti K_ii^{-1} K_it) + diag(... G~ ...),
/// without materialising any (P_t*S) x (P_t*S) matrix.
struct PropagateResult {
  Var g_ti;
  Var g_tt_diag;
};
PropagateResult propagate_gram(Tape& tape, const BlocksVar& k, Var g_tilde_ii,
                               double jitter);

/// Mean over locations of per-location rows: (P_t*S) x m -> P_t x m.
Var spatial_pool(Tape& tape, Var g_ti, index_t locations);

/// Final-layer pooling: kernel blocks are pooled before the last
/// conditioning so the additive-GP double sums are available per image. The
/// inducing-mediated part is exact; the conditional residual contributes its
/// per-location diagonal scaled by 1/S^2 (locations' residuals carried as
/// uncorrelated, which is all the diagonal-only tt contract preserves).
BlocksVar pool_and_condition(Tape& tape, const BlocksVar& k, Var g_tilde_ii,
                             double jitter, index_t locations);

/// Output GP with Monte-Carlo softmax: draws n_mc reparameterised logit
/// samples per datapoint (independent across datapoints) and averages their
/// softmax into `probabilities`.
struct GpPredictResult {
  std::vector<Var> logit_samples;  // each P_t x classes
  DenseMatrix probabilities;       // P_t x classes, plain value
};
GpPredictResult output_gp_predict(Tape& tape, const BlocksVar& k_flat,
                                  Var head_mean, Var head_cov_factor,
                                  double jitter, int n_mc, RngState& rng);

/// Tape references the objective needs for one layer.
struct LayerTapeRefs {
  Var g_ii;      // learned (pre-regularisation) Gram node
  Var l_factor;  // its Cholesky-parameterisation node
  Var k_ii_in;   // the layer's incoming kernel block (post conv/skip)
};

struct ForwardResult {
  std::vector<LayerTapeRefs> layers;
  Var k_flat_ii;                   // output kernel ii block
  std::vector<Var> logit_samples;  // n_mc nodes, each P_t x classes
  DenseMatrix probabilities;       // P_t x classes
  std::vector<double> cond_g_tilde;  // per-layer diagnostics
  /// Parameter nodes registered by this pass, named as in for_each_param.
  std::vector<std::pair<std::string, Var>> params;
};

/// Full Algorithm-1 pass over one batch. x_t is (P_t*S) x nu_0 in raster
/// order. Failures carry the layer index in their message.
ForwardResult forward(Tape& tape, const Model& model, const DenseMatrix& x_t,
                      const SpatialShape& input_shape, RunMode mode,
                      RngState& rng, int n_mc);

// Versioned binary checkpoint: every parameter tensor with shape headers and
// the config hash, CRC32-tailed.
void save_checkpoint(const std::string& path, const Model& model,
                     std::uint64_t config_hash);
void load_checkpoint(const std::string& path, Model& model,
                     std::uint64_t expected_config_hash);

}  // namespace gramnet

#endif  // GRAMNET_NET_HPP
