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

#ifndef GRAMNET_TRAINER_HPP
#define GRAMNET_TRAINER_HPP

#include <functional>
#include <map>
#include <string>
#include <vector>

#include "gramnet/data_io.hpp"
#include "gramnet/objective.hpp"

namespace gramnet {

struct TrainConfig {
  double lr0 = 0.01;
  std::vector<long> decay_epochs;
  double decay_factor = 0.1;
  double beta1 = 0.8;
  double beta2 = 0.9;
  double eps_adam = 1e-8;
  long epochs = 100;
  index_t batch_size = 0;  // 0: full batch
  std::uint64_t seed = 0;
  int mc_samples_eval = 64;
  long eval_every = 0;        // 0: final epoch only
  long checkpoint_every = 0;  // 0: final only (when a sink is installed)

  void validate() const;
};

/// Per-parameter Adam moment buffers, keyed by parameter name.
struct AdamState {
  std::map<std::string, DenseMatrix> m;
  std::map<std::string, DenseMatrix> v;
  long step = 0;
};

/// One bias-corrected Adam update, minimising. Throws NonFiniteGradient with
/// the offending parameter name when a gradient is not finite.
void adam_step(std::vector<std::pair<std::string, DenseMatrix*>>& params,
               const std::map<std::string, DenseMatrix>& grads,
               AdamState& state, double lr, const TrainConfig& cfg);

/// lr0 * decay_factor^(number of decay epochs <= epoch).
double lr_schedule(long epoch, const TrainConfig& cfg);

struct EvalMetrics {
  double log_likelihood = 0.0;  // mean per datapoint
  double accuracy = 0.0;
  DenseMatrix probabilities;  // P x classes
};

/// Eval-mode pass (sample-free regularisation, mc_samples_eval draws).
EvalMetrics evaluate(const Model& model, const Dataset& data, int mc_samples,
                     RngState& rng);

struct TrainCallbacks {
  /// Called once per epoch with the fresh metric row (including the terminal
  /// failure row); use it to stream CSV output.
  std::function<void(const MetricRow&)> on_epoch;
  /// Called at checkpoint epochs and after the final epoch.
  std::function<void(const Model&, long epoch)> on_checkpoint;
};

struct TrainResult {
  std::vector<MetricRow> metrics;
  bool failed = false;
  std::string failure;
};

/// Seeded minibatch training: per step one forward pass with fresh
/// regularisation samples, objective assembly, backward, Adam update. A
/// numerical failure terminates the run, flushing a terminal failed row.
TrainResult train_loop(Model& model, const Dataset& train, const Dataset* eval,
                       const TrainConfig& train_cfg,
                       const ObjectiveConfig& obj_cfg,
                       const TrainCallbacks& callbacks = {});

}  // namespace gramnet

#endif  // GRAMNET_TRAINER_HPP
