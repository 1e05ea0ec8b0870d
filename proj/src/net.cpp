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

#include "gramnet/net.hpp"

#include <zlib.h>

#include <cmath>
#include <cstring>
#include <fstream>
#include <string>

namespace gramnet {

namespace {

Var sigmoid_scalar(Tape& t, Var logit) {
  Var e = t.ew_exp(t.scale(logit, -1.0));
  Var one = t.constant_scalar(1.0);
  return t.ew_reciprocal(t.add(e, one));
}

double softmax_probability(const DenseMatrix& logits, index_t row,
                           index_t cls) {
  double mx = logits.at(row, 0);
  for (index_t c = 1; c < logits.cols(); ++c)
    mx = std::max(mx, logits.at(row, c));
  double lse = 0.0;
  for (index_t c = 0; c < logits.cols(); ++c)
    lse += std::exp(logits.at(row, c) - mx);
  return std::exp(logits.at(row, cls) - mx) / lse;
}

}  // namespace

void ModelConfig::validate() const {
  if (inducing_inputs < 1) throw ConfigError("model: inducing_inputs must be >= 1");
  if (input_channels < 1) throw ConfigError("model: input_channels must be >= 1");
  if (classes < 2) throw ConfigError("model: classes must be >= 2");
  if (!(kii_jitter >= 0.0)) throw ConfigError("model: kii_jitter must be >= 0");
  reg.validate();
  index_t prev = inducing_inputs;
  for (std::size_t l = 0; l < layers.size(); ++l) {
    const LayerConfig& lc = layers[l];
    if (lc.inducing < 1)
      throw ConfigError("model: layer " + std::to_string(l) +
                        " inducing count must be >= 1");
    if (lc.kind == LayerConfig::Kind::kConv) {
      if (lc.patch_side < 1 || lc.patch_side % 2 == 0)
        throw ConfigError("model: conv patch side must be odd and >= 1");
      if (lc.stride < 1) throw ConfigError("model: conv stride must be >= 1");
    } else if (!lc.learn_mixup && lc.inducing != prev) {
      throw ConfigError("model: fc layer " + std::to_string(l) +
                        " changes the inducing count; enable its mixup");
    }
    if (lc.skip_with_prev) {
      if (l == 0)
        throw ConfigError("model: layer 0 cannot skip to a previous layer");
      if (layers[l - 1].inducing != lc.inducing)
        throw ConfigError("model: skip requires matching inducing counts");
      if (lc.stride != 1)
        throw ConfigError("model: skip layers must have stride 1");
    }
    prev = lc.inducing;
  }
}

SymMatrix LayerState::gram() const {
  const index_t n = chol_param.rows();
  DenseMatrix l(n, n, chol_param.precision());
  for (index_t i = 0; i < n; ++i) {
    for (index_t j = 0; j < i; ++j) l.set(i, j, chol_param.at(i, j));
    l.set(i, i, std::exp(chol_param.at(i, i)));
  }
  return SymMatrix::from_dense_lower(matmul(l, l.transposed()));
}

namespace {

template <class ModelT, class Fn>
void enumerate_params(ModelT& model, Fn&& fn) {
  fn("x_i", model.inducing_inputs);
  for (std::size_t l = 0; l < model.layers.size(); ++l) {
    auto& st = model.layers[l];
    const std::string base = "layer" + std::to_string(l) + ".";
    fn(base + "chol", st.chol_param);
    if (!st.mixup.empty()) fn(base + "mixup", st.mixup);
    if (!st.skip_logit.empty()) fn(base + "skip", st.skip_logit);
  }
  fn("head.mu", model.head.mean);
  fn("head.sigma", model.head.cov_param);
}

}  // namespace

void Model::for_each_param(
    const std::function<void(const std::string&, DenseMatrix&)>& fn) {
  enumerate_params(*this, fn);
}

void Model::for_each_param(
    const std::function<void(const std::string&, const DenseMatrix&)>& fn)
    const {
  enumerate_params(*this, fn);
}

std::vector<double> Model::gram_condition_numbers() const {
  std::vector<double> out;
  out.reserve(layers.size());
  for (const LayerState& st : layers)
    out.push_back(condition_number(st.gram().to_precision(Precision::kDouble)));
  return out;
}

SpatialShape conv_output_shape(const SpatialShape& in, const ConvGeometry& g) {
  SpatialShape out = in;
  out.width = (in.width + g.stride - 1) / g.stride;
  out.height = (in.height + g.stride - 1) / g.stride;
  return out;
}

namespace {

// Global-row map for patch offset (dx, dy): output location (x', y') of
// image i reads input row i*S + (stride*y' + dy)*W + (stride*x' + dx), or -1
// outside the image (zero padding).
std::vector<index_t> conv_gather_map(const SpatialShape& in,
                                     const SpatialShape& out,
                                     const ConvGeometry& g, index_t dx,
                                     index_t dy) {
  std::vector<index_t> map;
  map.reserve(static_cast<std::size_t>(out.rows()));
  for (index_t i = 0; i < in.images; ++i) {
    for (index_t yo = 0; yo < out.height; ++yo) {
      for (index_t xo = 0; xo < out.width; ++xo) {
        const index_t xi = g.stride * xo + dx;
        const index_t yi = g.stride * yo + dy;
        if (xi < 0 || xi >= in.width || yi < 0 || yi >= in.height) {
          map.push_back(-1);
        } else {
          map.push_back(i * in.locations() + yi * in.width + xi);
        }
      }
    }
  }
  return map;
}

}  // namespace

BlocksVar conv_mix(Tape& tape, const BlocksVar& phi, Var mixup,
                   index_t out_inducing, const SpatialShape& in_shape,
                   const ConvGeometry& geom, SpatialShape* out_shape) {
  const index_t p_in = tape.value(phi.ii).rows();
  if (tape.value(phi.ti).rows() != in_shape.rows())
    throw ShapeMismatch("conv_mix: ti rows do not match the spatial shape");
  const index_t d_count = geom.patch_count();

  if (!mixup.valid()) {
    if (d_count != 1 || geom.stride != 1 || out_inducing != p_in)
      throw ShapeMismatch(
          "conv_mix: identity mixup requires D = 1, stride 1 and matching "
          "inducing counts");
    if (out_shape) *out_shape = in_shape;
    return phi;
  }

  const DenseMatrix& c = tape.value(mixup);
  if (c.rows() != d_count * out_inducing || c.cols() != p_in)
    throw ShapeMismatch("conv_mix: mixup is " + std::to_string(c.rows()) +
                        "x" + std::to_string(c.cols()) + ", expected " +
                        std::to_string(d_count * out_inducing) + "x" +
                        std::to_string(p_in));

  const SpatialShape shape_out = conv_output_shape(in_shape, geom);
  const index_t hw = (geom.patch_w - 1) / 2;
  const index_t hh = (geom.patch_h - 1) / 2;

  Var k_ii, k_ti, k_tt;
  for (index_t dy = -hh; dy <= hh; ++dy) {
    for (index_t dx = -hw; dx <= hw; ++dx) {
      const index_t d = (dy + hh) * geom.patch_w + (dx + hw);
      Var c_d = tape.slice(mixup, d * out_inducing, 0, out_inducing, p_in);
      Var term_ii = tape.matmul(tape.matmul(c_d, phi.ii), tape.transpose(c_d));
      std::vector<index_t> map =
          conv_gather_map(in_shape, shape_out, geom, dx, dy);
      Var gathered_ti = tape.row_gather(phi.ti, map);
      Var term_ti = tape.matmul(gathered_ti, tape.transpose(c_d));
      Var term_tt = tape.row_gather(phi.tt_diag, std::move(map));
      if (!k_ii.valid()) {
        k_ii = term_ii;
        k_ti = term_ti;
        k_tt = term_tt;
      } else {
        k_ii = tape.add(k_ii, term_ii);
        k_ti = tape.add(k_ti, term_ti);
        k_tt = tape.add(k_tt, term_tt);
      }
    }
  }
  const double inv_d = 1.0 / static_cast<double>(d_count);
  if (out_shape) *out_shape = shape_out;
  return {tape.scale(k_ii, inv_d), tape.scale(k_ti, inv_d),
          tape.scale(k_tt, inv_d)};
}

PropagateResult propagate_gram(Tape& tape, const BlocksVar& k, Var g_tilde_ii,
                               double jitter) {
  Var l = tape.cholesky(k.ii, jitter);
  Var a = tape.chol_factor_solve(l, tape.transpose(k.ti));  // K_ii^{-1} K_it
  Var at = tape.transpose(a);
  Var g_ti = tape.matmul(at, g_tilde_ii);
  Var mediated = tape.row_sum(tape.hadamard(g_ti, at));
  Var prior = tape.row_sum(tape.hadamard(k.ti, at));
  Var g_tt = tape.add(tape.sub(k.tt_diag, prior), mediated);
  return {g_ti, g_tt};
}

Var spatial_pool(Tape& tape, Var g_ti, index_t locations) {
  return tape.pool_rows_mean(g_ti, locations);
}

BlocksVar pool_and_condition(Tape& tape, const BlocksVar& k, Var g_tilde_ii,
                             double jitter, index_t locations) {
  Var l = tape.cholesky(k.ii, jitter);
  Var kbar = spatial_pool(tape, k.ti, locations);  // P_t x P_i
  Var abar = tape.chol_factor_solve(l, tape.transpose(kbar));
  Var abar_t = tape.transpose(abar);
  Var flat_ti = tape.matmul(abar_t, g_tilde_ii);
  Var mediated = tape.row_sum(tape.hadamard(flat_ti, abar_t));
  // Residual conditional variance, per location, then 1/S^2-weighted.
  Var a = tape.chol_factor_solve(l, tape.transpose(k.ti));
  Var prior = tape.row_sum(tape.hadamard(k.ti, tape.transpose(a)));
  Var residual = tape.sub(k.tt_diag, prior);
  Var residual_pooled =
      tape.scale(tape.pool_rows_mean(residual, locations),
                 1.0 / static_cast<double>(locations));
  Var flat_tt = tape.add(mediated, residual_pooled);
  return {g_tilde_ii, flat_ti, flat_tt};
}

GpPredictResult output_gp_predict(Tape& tape, const BlocksVar& k_flat,
                                  Var head_mean, Var head_cov_factor,
                                  double jitter, int n_mc, RngState& rng) {
  if (n_mc < 1) throw ConfigError("output_gp_predict: n_mc must be >= 1");
  const index_t p_t = tape.value(k_flat.ti).rows();
  const index_t classes = tape.value(head_mean).cols();

  Var l = tape.cholesky(k_flat.ii, jitter);
  Var w = tape.chol_factor_solve(l, head_mean);       // K_ii^{-1} mu
  Var mean = tape.matmul(k_flat.ti, w);               // P_t x classes
  Var a = tape.chol_factor_solve(l, tape.transpose(k_flat.ti));
  Var prior_diag = tape.row_sum(tape.hadamard(k_flat.ti, tape.transpose(a)));
  Var ks = tape.chol_factor_solve(l, head_cov_factor);  // K_ii^{-1} S_Sigma
  Var u = tape.matmul(k_flat.ti, ks);
  Var sigma_diag = tape.row_sum(tape.hadamard(u, u));
  Var variance =
      tape.add(tape.sub(k_flat.tt_diag, prior_diag), sigma_diag);
  Var std_dev = tape.ew_sqrt_floor(variance, kVarianceFloor);
  Var std_tiled = tape.tile_cols(std_dev, classes);

  GpPredictResult out;
  DenseMatrix probs(p_t, classes, Precision::kDouble);
  for (int s = 0; s < n_mc; ++s) {
    DenseMatrix noise = rng.normal_matrix(p_t, classes, tape.precision());
    Var f = tape.gaussian_reparam_sample(mean, std_tiled, noise);
    const DenseMatrix& fv = tape.value(f);
    for (index_t r = 0; r < p_t; ++r)
      for (index_t c = 0; c < classes; ++c)
        probs.set(r, c, probs.at(r, c) + softmax_probability(fv, r, c));
    out.logit_samples.push_back(f);
  }
  for (index_t r = 0; r < p_t; ++r)
    for (index_t c = 0; c < classes; ++c)
      probs.set(r, c, probs.at(r, c) / n_mc);
  out.probabilities = std::move(probs);
  return out;
}

ForwardResult forward(Tape& tape, const Model& model, const DenseMatrix& x_t,
                      const SpatialShape& input_shape, RunMode mode,
                      RngState& rng, int n_mc) {
  const ModelConfig& cfg = model.cfg;
  cfg.validate();
  if (x_t.rows() != input_shape.rows() || x_t.cols() != cfg.input_channels)
    throw ShapeMismatch("forward: batch inputs are " +
                        std::to_string(x_t.rows()) + "x" +
                        std::to_string(x_t.cols()) + ", expected " +
                        std::to_string(input_shape.rows()) + "x" +
                        std::to_string(cfg.input_channels));
  const double inv_nu0 = 1.0 / static_cast<double>(cfg.input_channels);
  const SkrMode skr_mode =
      mode == RunMode::kTrain ? SkrMode::kTrain : SkrMode::kEval;

  ForwardResult result;
  Var xi = tape.param(model.inducing_inputs.to_precision(tape.precision()));
  result.params.emplace_back("x_i", xi);
  Var xt = tape.constant(x_t.to_precision(tape.precision()));

  BlocksVar flat;  // datapoint-level blocks entering the output kernel
  if (cfg.layers.empty()) {
    // Plain sparse GP on the input kernel; pooling inputs realises the
    // additive double sum exactly at layer zero.
    Var x_pooled = tape.pool_rows_mean(xt, input_shape.locations());
    flat.ii = tape.scale(tape.matmul(xi, tape.transpose(xi)), inv_nu0);
    flat.ti = tape.scale(tape.matmul(x_pooled, tape.transpose(xi)), inv_nu0);
    flat.tt_diag =
        tape.scale(tape.row_sum(tape.hadamard(x_pooled, x_pooled)), inv_nu0);
  } else {
    BlocksVar blocks;
    blocks.ii = tape.scale(tape.matmul(xi, tape.transpose(xi)), inv_nu0);
    blocks.ti = tape.scale(tape.matmul(xt, tape.transpose(xi)), inv_nu0);
    blocks.tt_diag =
        tape.scale(tape.row_sum(tape.hadamard(xt, xt)), inv_nu0);
    SpatialShape shape = input_shape;
    BlocksVar prev_k;
    bool have_prev_k = false;

    for (std::size_t layer = 0; layer < cfg.layers.size(); ++layer) {
      try {
        const LayerConfig& lc = cfg.layers[layer];
        const LayerState& st = model.layers[layer];
        const std::string base = "layer" + std::to_string(layer) + ".";

        blocks = batch_kernel_normalise(tape, blocks);
        BlocksVar phi = apply_kernel(tape, cfg.kernel, blocks);

        Var mix;
        if (!st.mixup.empty()) {
          mix = tape.param(st.mixup.to_precision(tape.precision()));
        }
        SpatialShape next_shape;
        BlocksVar k = conv_mix(tape, phi, mix, lc.inducing, shape,
                               lc.geometry(), &next_shape);
        // Parameter registration order matches enumerate_params.
        Var chol_param =
            tape.param(st.chol_param.to_precision(tape.precision()));
        result.params.emplace_back(base + "chol", chol_param);
        if (mix.valid()) result.params.emplace_back(base + "mixup", mix);

        if (lc.skip_with_prev) {
          if (!have_prev_k)
            throw ShapeMismatch("skip with no previous kernel blocks");
          Var skip_param =
              tape.param(st.skip_logit.to_precision(tape.precision()));
          result.params.emplace_back(base + "skip", skip_param);
          Var alpha = sigmoid_scalar(tape, skip_param);
          k = skip_combine(tape, prev_k, k, alpha);
        }
        prev_k = k;
        have_prev_k = true;

        Var l_factor = tape.tril_exp_diag(chol_param);
        Var g_ii = tape.matmul(l_factor, tape.transpose(l_factor));
        Var g_tilde =
            skr_sample_on_tape(tape, g_ii, l_factor, cfg.reg, rng, skr_mode);
        result.layers.push_back({g_ii, l_factor, k.ii});
        result.cond_g_tilde.push_back(condition_number(
            SymMatrix::from_dense_lower(tape.value(g_tilde))
                .to_precision(Precision::kDouble)));

        shape = next_shape;
        if (layer + 1 == cfg.layers.size()) {
          flat = pool_and_condition(tape, k, g_tilde, cfg.kii_jitter,
                                    shape.locations());
        } else {
          PropagateResult pg =
              propagate_gram(tape, k, g_tilde, cfg.kii_jitter);
          blocks = {g_tilde, pg.g_ti, pg.g_tt_diag};
        }
      } catch (const DecompositionFailure& e) {
        throw DecompositionFailure(e.pivot, "layer " + std::to_string(layer) +
                                                ": " + e.what());
      } catch (const NonPositiveDiagonal& e) {
        throw NonPositiveDiagonal("layer " + std::to_string(layer) + ": " +
                                  e.what());
      }
    }
  }

  BlocksVar k_out = apply_kernel(tape, cfg.kernel, flat);
  result.k_flat_ii = k_out.ii;

  Var head_mean = tape.param(model.head.mean.to_precision(tape.precision()));
  Var head_cov_param =
      tape.param(model.head.cov_param.to_precision(tape.precision()));
  result.params.emplace_back("head.mu", head_mean);
  result.params.emplace_back("head.sigma", head_cov_param);
  Var cov_factor = tape.tril_exp_diag(head_cov_param);

  GpPredictResult gp = output_gp_predict(tape, k_out, head_mean, cov_factor,
                                         cfg.kii_jitter, n_mc, rng);
  result.logit_samples = std::move(gp.logit_samples);
  result.probabilities = std::move(gp.probabilities);
  return result;
}

namespace {

// Encode chol(K) as the unconstrained tril-exp-diag parameter.
DenseMatrix encode_chol_param(const SymMatrix& k, double jitter) {
  CholFactor f = cholesky(k, jitter);
  const index_t n = k.dim();
  DenseMatrix p(n, n, k.precision());
  for (index_t i = 0; i < n; ++i) {
    for (index_t j = 0; j < i; ++j) p.set(i, j, f.lower.at(i, j));
    p.set(i, i, std::log(f.lower.at(i, i)));
  }
  return p;
}

}  // namespace

Model init_model(const ModelConfig& cfg, const DenseMatrix& train_inputs,
                 const SpatialShape& input_shape, RngState& rng) {
  cfg.validate();
  if (train_inputs.cols() != cfg.input_channels)
    throw ShapeMismatch("init_model: training inputs have " +
                        std::to_string(train_inputs.cols()) +
                        " channels, expected " +
                        std::to_string(cfg.input_channels));
  if (train_inputs.rows() < cfg.inducing_inputs)
    throw ConfigError("init_model: fewer training rows than inducing inputs");

  Model model;
  model.cfg = cfg;

  // Inducing inputs: random training rows (patch centroids for conv data).
  const std::vector<index_t> perm = rng.permutation(train_inputs.rows());
  DenseMatrix xi(cfg.inducing_inputs, cfg.input_channels, Precision::kDouble);
  for (index_t r = 0; r < cfg.inducing_inputs; ++r)
    for (index_t c = 0; c < cfg.input_channels; ++c)
      xi.set(r, c, train_inputs.at(perm[static_cast<std::size_t>(r)], c));

  // NNGP chain over the inducing blocks only (train/test blocks stay empty):
  // each layer's prior K_ii initialises its learned Gram.
  Tape t(Precision::kDouble);
  Var xi_v = t.constant(xi);
  BlocksVar blocks;
  blocks.ii = t.scale(t.matmul(xi_v, t.transpose(xi_v)),
                      1.0 / static_cast<double>(cfg.input_channels));
  blocks.ti = t.constant(DenseMatrix(0, cfg.inducing_inputs, Precision::kDouble));
  blocks.tt_diag = t.constant(DenseMatrix(0, 1, Precision::kDouble));

  SpatialShape shape = input_shape;
  shape.images = 0;
  index_t prev_inducing = cfg.inducing_inputs;
  BlocksVar prev_k;
  bool have_prev_k = false;

  for (std::size_t layer = 0; layer < cfg.layers.size(); ++layer) {
    const LayerConfig& lc = cfg.layers[layer];
    LayerState st;

    blocks = batch_kernel_normalise(t, blocks);
    BlocksVar phi = apply_kernel(t, cfg.kernel, blocks);

    const bool needs_mixup =
        lc.kind == LayerConfig::Kind::kConv || lc.learn_mixup;
    Var mix;
    if (needs_mixup) {
      const index_t d = lc.geometry().patch_count();
      const double std_dev =
          std::sqrt(1.0 / static_cast<double>(d * prev_inducing));
      st.mixup = gramnet::scale(
          rng.normal_matrix(d * lc.inducing, prev_inducing,
                            Precision::kDouble),
          std_dev);
      mix = t.constant(st.mixup);
    }
    SpatialShape next_shape;
    BlocksVar k =
        conv_mix(t, phi, mix, lc.inducing, shape, lc.geometry(), &next_shape);
    if (lc.skip_with_prev && have_prev_k) {
      k = skip_combine(t, prev_k, k, t.constant_scalar(0.5));
      st.skip_logit = DenseMatrix(1, 1, Precision::kDouble);
    }
    prev_k = k;
    have_prev_k = true;

    st.chol_param = encode_chol_param(
        SymMatrix::from_dense_lower(t.value(k.ii)), cfg.kii_jitter);
    model.layers.push_back(std::move(st));

    blocks = {k.ii, blocks.ti, blocks.tt_diag};  // carry the prior forward
    shape = next_shape;
    prev_inducing = lc.inducing;
  }

  // Output head: mu = 0, Sigma = prior output kernel block.
  BlocksVar k_out = apply_kernel(t, cfg.kernel, blocks);
  model.head.mean =
      DenseMatrix(prev_inducing, cfg.classes, Precision::kDouble);
  model.head.cov_param = encode_chol_param(
      SymMatrix::from_dense_lower(t.value(k_out.ii)), cfg.kii_jitter);

  model.inducing_inputs = std::move(xi);
  // Store in the run precision (values generated in double for parity
  // between precision modes).
  model.for_each_param([&](const std::string&, DenseMatrix& p) {
    p = p.to_precision(cfg.precision);
  });
  return model;
}

namespace {

void put_bytes(std::string& out, const void* p, std::size_t n) {
  out.append(static_cast<const char*>(p), n);
}

void put_u32(std::string& out, std::uint32_t v) { put_bytes(out, &v, 4); }
void put_u64(std::string& out, std::uint64_t v) { put_bytes(out, &v, 8); }

struct ByteReader {
  const std::string& data;
  std::size_t pos = 0;

  void read(void* p, std::size_t n) {
    if (pos + n > data.size())
      throw FormatError(pos, "checkpoint: truncated at byte " +
                                 std::to_string(pos));
    std::memcpy(p, data.data() + pos, n);
    pos += n;
  }
  std::uint32_t u32() {
    std::uint32_t v;
    read(&v, 4);
    return v;
  }
  std::uint64_t u64() {
    std::uint64_t v;
    read(&v, 8);
    return v;
  }
  double f64() {
    double v;
    read(&v, 8);
    return v;
  }
};

constexpr char kCheckpointMagic[4] = {'G', 'N', 'C', 'K'};
constexpr std::uint32_t kCheckpointVersion = 1;

}  // namespace

void save_checkpoint(const std::string& path, const Model& model,
                     std::uint64_t config_hash) {
  std::string body;
  put_bytes(body, kCheckpointMagic, 4);
  put_u32(body, kCheckpointVersion);
  put_u64(body, config_hash);
  body.push_back(model.cfg.precision == Precision::kSingle ? 0 : 1);
  std::uint32_t count = 0;
  model.for_each_param(
      [&](const std::string&, const DenseMatrix&) { ++count; });
  put_u32(body, count);
  model.for_each_param([&](const std::string& name, const DenseMatrix& p) {
    put_u32(body, static_cast<std::uint32_t>(name.size()));
    put_bytes(body, name.data(), name.size());
    put_u32(body, static_cast<std::uint32_t>(p.rows()));
    put_u32(body, static_cast<std::uint32_t>(p.cols()));
    for (index_t r = 0; r < p.rows(); ++r)
      for (index_t c = 0; c < p.cols(); ++c) {
        const double v = p.at(r, c);
        put_bytes(body, &v, 8);
      }
  });
  const std::uint32_t crc = static_cast<std::uint32_t>(
      crc32(0, reinterpret_cast<const Bytef*>(body.data()),
            static_cast<uInt>(body.size())));
  put_u32(body, crc);

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open checkpoint for writing: " + path);
  out.write(body.data(), static_cast<std::streamsize>(body.size()));
  if (!out) throw IoError("short write to checkpoint: " + path);
}

void load_checkpoint(const std::string& path, Model& model,
                     std::uint64_t expected_config_hash) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint: " + path);
  std::string data((std::istreambuf_iterator<char>(in)),
                   std::istreambuf_iterator<char>());
  if (data.size() < 4) throw FormatError(0, "checkpoint: file too short");

  const std::uint32_t stored_crc = [&] {
    std::uint32_t v;
    std::memcpy(&v, data.data() + data.size() - 4, 4);
    return v;
  }();
  const std::uint32_t computed = static_cast<std::uint32_t>(
      crc32(0, reinterpret_cast<const Bytef*>(data.data()),
            static_cast<uInt>(data.size() - 4)));
  if (stored_crc != computed)
    throw ChecksumMismatch("checkpoint: CRC32 mismatch in " + path);

  ByteReader r{data};
  char magic[4];
  r.read(magic, 4);
  if (std::memcmp(magic, kCheckpointMagic, 4) != 0)
    throw FormatError(0, "checkpoint: bad magic");
  const std::uint32_t version = r.u32();
  if (version != kCheckpointVersion)
    throw FormatError(4, "checkpoint: unsupported version " +
                             std::to_string(version));
  const std::uint64_t hash = r.u64();
  if (hash != expected_config_hash)
    throw ConfigError(
        "checkpoint: config hash mismatch (checkpoint was written for a "
        "different model configuration)");
  char prec;
  r.read(&prec, 1);
  (void)prec;  // parameters are stored as doubles regardless
  const std::uint32_t count = r.u32();

  std::vector<std::pair<std::string, DenseMatrix*>> slots;
  model.for_each_param([&](const std::string& name, DenseMatrix& p) {
    slots.emplace_back(name, &p);
  });
  if (count != slots.size())
    throw FormatError(r.pos, "checkpoint: parameter count mismatch");

  for (auto& [name, slot] : slots) {
    const std::uint32_t name_len = r.u32();
    std::string stored_name(name_len, '\0');
    r.read(stored_name.data(), name_len);
    if (stored_name != name)
      throw FormatError(r.pos, "checkpoint: expected parameter '" + name +
                                   "', found '" + stored_name + "'");
    const index_t rows = r.u32();
    const index_t cols = r.u32();
    if (rows != slot->rows() || cols != slot->cols())
      throw FormatError(r.pos, "checkpoint: shape mismatch for " + name);
    DenseMatrix m(rows, cols, model.cfg.precision);
    for (index_t rr = 0; rr < rows; ++rr)
      for (index_t cc = 0; cc < cols; ++cc) m.set(rr, cc, r.f64());
    *slot = std::move(m);
  }
}

}  // namespace gramnet
