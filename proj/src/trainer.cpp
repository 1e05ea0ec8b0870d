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

#include "gramnet/trainer.hpp"

#include <chrono>
#include <cmath>
#include <limits>

namespace gramnet {

void TrainConfig::validate() const {
  if (!(lr0 > 0.0)) throw ConfigError("train: lr must be > 0");
  if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0))
    throw ConfigError("train: betas must lie in [0, 1)");
  if (epochs < 0) throw ConfigError("train: epochs must be >= 0");
  if (batch_size < 0) throw ConfigError("train: batch size must be >= 0");
  if (mc_samples_eval < 1) throw ConfigError("train: mc_eval must be >= 1");
  if (!(decay_factor > 0.0)) throw ConfigError("train: decay factor must be > 0");
}

double lr_schedule(long epoch, const TrainConfig& cfg) {
  int hits = 0;
  for (long e : cfg.decay_epochs)
    if (e <= epoch) ++hits;
  return cfg.lr0 * std::pow(cfg.decay_factor, hits);
}

void adam_step(std::vector<std::pair<std::string, DenseMatrix*>>& params,
               const std::map<std::string, DenseMatrix>& grads,
               AdamState& state, double lr, const TrainConfig& cfg) {
  // Reject non-finite gradients up front so no parameter is half-updated.
  for (const auto& [name, param] : params) {
    const auto it = grads.find(name);
    if (it == grads.end()) continue;
    if (!it->second.all_finite())
      throw NonFiniteGradient(name, "non-finite gradient for " + name);
  }
  state.step += 1;
  const double bc1 = 1.0 - std::pow(cfg.beta1, state.step);
  const double bc2 = 1.0 - std::pow(cfg.beta2, state.step);
  for (auto& [name, param] : params) {
    const auto it = grads.find(name);
    DenseMatrix g = it != grads.end()
                        ? it->second
                        : DenseMatrix(param->rows(), param->cols(),
                                      param->precision());
    if (g.rows() != param->rows() || g.cols() != param->cols())
      throw ShapeMismatch("adam_step: gradient shape mismatch for " + name);
    auto mit = state.m.find(name);
    if (mit == state.m.end()) {
      state.m.emplace(name, DenseMatrix(param->rows(), param->cols(),
                                        param->precision()));
      state.v.emplace(name, DenseMatrix(param->rows(), param->cols(),
                                        param->precision()));
    }
    DenseMatrix& m = state.m.at(name);
    DenseMatrix& v = state.v.at(name);
    for (index_t r = 0; r < param->rows(); ++r) {
      for (index_t c = 0; c < param->cols(); ++c) {
        const double gv = g.at(r, c);
        const double mv = cfg.beta1 * m.at(r, c) + (1.0 - cfg.beta1) * gv;
        const double vv = cfg.beta2 * v.at(r, c) + (1.0 - cfg.beta2) * gv * gv;
        m.set(r, c, mv);
        v.set(r, c, vv);
        const double m_hat = mv / bc1;
        const double v_hat = vv / bc2;
        param->set(r, c, param->at(r, c) -
                             lr * m_hat / (std::sqrt(v_hat) + cfg.eps_adam));
      }
    }
  }
}

namespace {

struct Batch {
  DenseMatrix inputs;
  std::vector<int> labels;
  SpatialShape shape;
};

Batch gather_batch(const Dataset& data, const std::vector<index_t>& images) {
  const index_t s = data.shape.locations();
  Batch b;
  b.shape = data.shape;
  b.shape.images = static_cast<index_t>(images.size());
  b.inputs = DenseMatrix(b.shape.rows(), data.channels, Precision::kDouble);
  b.labels.reserve(images.size());
  for (std::size_t k = 0; k < images.size(); ++k) {
    const index_t img = images[k];
    for (index_t r = 0; r < s; ++r)
      for (index_t c = 0; c < data.channels; ++c)
        b.inputs.set(static_cast<index_t>(k) * s + r, c,
                     data.inputs.at(img * s + r, c));
    b.labels.push_back(data.labels[static_cast<std::size_t>(img)]);
  }
  return b;
}

struct BatchScore {
  double ll_sum = 0.0;
  long correct = 0;
};

BatchScore score_probabilities(const DenseMatrix& probs,
                               const std::vector<int>& labels) {
  BatchScore s;
  constexpr double kProbFloor = 1e-300;
  for (index_t r = 0; r < probs.rows(); ++r) {
    const int y = labels[static_cast<std::size_t>(r)];
    s.ll_sum += std::log(std::max(probs.at(r, y), kProbFloor));
    index_t best = 0;
    for (index_t c = 1; c < probs.cols(); ++c)
      if (probs.at(r, c) > probs.at(r, best)) best = c;
    if (best == y) s.correct += 1;
  }
  return s;
}

}  // namespace

EvalMetrics evaluate(const Model& model, const Dataset& data, int mc_samples,
                     RngState& rng) {
  data.validate();
  constexpr index_t kChunkImages = 256;
  EvalMetrics out;
  out.probabilities =
      DenseMatrix(data.shape.images, model.cfg.classes, Precision::kDouble);
  double ll_sum = 0.0;
  long correct = 0;
  for (index_t start = 0; start < data.shape.images; start += kChunkImages) {
    const index_t count = std::min(kChunkImages, data.shape.images - start);
    std::vector<index_t> ids(static_cast<std::size_t>(count));
    for (index_t i = 0; i < count; ++i)
      ids[static_cast<std::size_t>(i)] = start + i;
    Batch b = gather_batch(data, ids);
    Tape tape(model.cfg.precision);
    ForwardResult fwd = forward(tape, model, b.inputs, b.shape,
                                RunMode::kEval, rng, mc_samples);
    const BatchScore score = score_probabilities(fwd.probabilities, b.labels);
    ll_sum += score.ll_sum;
    correct += score.correct;
    for (index_t r = 0; r < count; ++r)
      for (index_t c = 0; c < model.cfg.classes; ++c)
        out.probabilities.set(start + r, c, fwd.probabilities.at(r, c));
  }
  out.log_likelihood = ll_sum / static_cast<double>(data.shape.images);
  out.accuracy =
      static_cast<double>(correct) / static_cast<double>(data.shape.images);
  return out;
}

TrainResult train_loop(Model& model, const Dataset& train, const Dataset* eval,
                       const TrainConfig& train_cfg,
                       const ObjectiveConfig& obj_cfg,
                       const TrainCallbacks& callbacks) {
  train_cfg.validate();
  obj_cfg.validate(model.cfg.layers.size());
  train.validate();
  if (train.shape.images < 1) throw ConfigError("train_loop: empty dataset");

  RngState rng(train_cfg.seed);
  TrainResult result;
  const index_t n_images = train.shape.images;
  const index_t batch_size =
      train_cfg.batch_size > 0 ? std::min(train_cfg.batch_size, n_images)
                               : n_images;
  const auto nan = std::numeric_limits<double>::quiet_NaN();

  std::vector<std::pair<std::string, DenseMatrix*>> param_ptrs;
  model.for_each_param([&](const std::string& name, DenseMatrix& p) {
    param_ptrs.emplace_back(name, &p);
  });
  AdamState adam;
  long global_step = 0;

  for (long epoch = 0; epoch < train_cfg.epochs; ++epoch) {
    const auto epoch_start = std::chrono::steady_clock::now();
    const double lr = lr_schedule(epoch, train_cfg);
    MetricRow row;
    row.epoch = epoch;
    row.lr = lr;
    row.eval_ll = nan;
    row.eval_acc = nan;

    double objective_sum = 0.0;
    double ll_sum = 0.0;
    long correct = 0;
    long steps_in_epoch = 0;

    try {
      const std::vector<index_t> order = rng.permutation(n_images);
      for (index_t start = 0; start < n_images; start += batch_size) {
        const index_t count = std::min(batch_size, n_images - start);
        std::vector<index_t> ids(
            order.begin() + start, order.begin() + start + count);
        Batch b = gather_batch(train, ids);

        Tape tape(model.cfg.precision);
        ForwardResult fwd =
            forward(tape, model, b.inputs, b.shape, RunMode::kTrain, rng,
                    obj_cfg.mc_samples_train);
        double objective_value = 0.0;
        Var loss = assemble_objective(tape, fwd, b.labels, obj_cfg, n_images,
                                      &objective_value);
        if (!std::isfinite(objective_value))
          throw NonFiniteGradient("objective",
                                  "objective value is not finite");
        tape.backward(loss);
        std::map<std::string, DenseMatrix> grads;
        for (const auto& [name, var] : fwd.params)
          grads.emplace(name, tape.grad(var));
        adam_step(param_ptrs, grads, adam, lr, train_cfg);

        const BatchScore score =
            score_probabilities(fwd.probabilities, b.labels);
        objective_sum += objective_value;
        ll_sum += score.ll_sum;
        correct += score.correct;
        ++steps_in_epoch;
        ++global_step;
      }
    } catch (const Error& e) {
      row.status = "failed";
      row.step = global_step;
      row.objective = nan;
      row.train_ll = nan;
      row.train_acc = nan;
      row.cond_g_ii = model.gram_condition_numbers();
      row.wall_seconds =
          std::chrono::duration<double>(std::chrono::steady_clock::now() -
                                        epoch_start)
              .count();
      result.metrics.push_back(row);
      if (callbacks.on_epoch) callbacks.on_epoch(row);
      result.failed = true;
      result.failure = e.what();
      return result;
    }

    row.step = global_step;
    row.objective = objective_sum / static_cast<double>(steps_in_epoch);
    row.train_ll = ll_sum / static_cast<double>(n_images);
    row.train_acc =
        static_cast<double>(correct) / static_cast<double>(n_images);
    row.cond_g_ii = model.gram_condition_numbers();

    const bool last_epoch = epoch + 1 == train_cfg.epochs;
    const bool eval_now =
        eval != nullptr &&
        (last_epoch || (train_cfg.eval_every > 0 &&
                        (epoch + 1) % train_cfg.eval_every == 0));
    if (eval_now) {
      const EvalMetrics em =
          evaluate(model, *eval, train_cfg.mc_samples_eval, rng);
      row.eval_ll = em.log_likelihood;
      row.eval_acc = em.accuracy;
    }
    row.wall_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() -
                                      epoch_start)
            .count();
    result.metrics.push_back(row);
    if (callbacks.on_epoch) callbacks.on_epoch(row);
    if (callbacks.on_checkpoint &&
        ((train_cfg.checkpoint_every > 0 &&
          (epoch + 1) % train_cfg.checkpoint_every == 0) ||
         last_epoch)) {
      callbacks.on_checkpoint(model, epoch);
    }
  }
  return result;
}

}  // namespace gramnet
