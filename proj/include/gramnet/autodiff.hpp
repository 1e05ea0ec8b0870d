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

#ifndef GRAMNET_AUTODIFF_HPP
#define GRAMNET_AUTODIFF_HPP

#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "gramnet/tensor.hpp"

namespace gramnet {

/// Shared clamp bound for arccos inputs: |rho| is clamped to 1 - kArccosEps
/// before arccos so Gram diagonals (rho == 1 exactly) keep finite gradients.
inline constexpr double kArccosEps = 1e-7;

/// Handle to a node on a Tape. Only valid for the tape that produced it.
struct Var {
  int id = -1;
  bool valid() const { return id >= 0; }
};

/// Append-only reverse-mode tape over dense matrices. Scalars are 1x1
/// matrices. Values are computed eagerly as nodes are recorded; a single
/// backward() pass fills gradients for every node reachable from the loss.
/// A tape is single-threaded; independent tapes may run concurrently.
class Tape {
 public:
  explicit Tape(Precision prec);
  ~Tape();
  Tape(Tape&&) noexcept;
  Tape& operator=(Tape&&) noexcept;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Precision precision() const { return prec_; }
  int size() const;

  // Leaves.
  Var constant(DenseMatrix value);
  Var constant_scalar(double v);
  Var param(DenseMatrix value);

  // Linear algebra.
  Var add(Var a, Var b);
  Var sub(Var a, Var b);
  Var scale(Var a, double c);
  Var scale_by(Var a, Var scalar);  // scalar is a 1x1 node
  Var matmul(Var a, Var b);
  Var transpose(Var a);
  Var hadamard(Var a, Var b);

  // Elementwise.
  Var ew_exp(Var a);
  Var ew_sqrt(Var a);
  Var ew_sqrt_floor(Var a, double floor_value);
  Var ew_reciprocal(Var a);
  Var ew_arccos(Var a);
  Var ew_clamp_unit(Var a, double eps = kArccosEps);  // to [-1+eps, 1-eps]

  // Reductions and broadcasts.
  Var trace(Var a);
  Var sum(Var a);
  Var row_sum(Var a);              // n x m -> n x 1
  Var frobenius_norm_sq(Var a);
  Var diag_part(Var a);            // n x n -> n x 1
  Var tile_cols(Var v, index_t m); // n x 1 -> n x m, each column = v
  Var tile_rows(Var v, index_t m); // n x 1 -> m x n, each row = v^T

  // Structure.
  Var slice(Var a, index_t r0, index_t c0, index_t rows, index_t cols);
  Var vcat(Var a, Var b);
  Var hcat(Var a, Var b);
  /// Gather rows by index; index -1 yields a zero row. Backward scatter-adds.
  Var row_gather(Var a, std::vector<index_t> index_map);
  /// Mean over contiguous groups of `group` rows: (n*group) x m -> n x m.
  Var pool_rows_mean(Var a, index_t group);
  /// Lower-triangular reparameterisation: strict lower copied, diagonal
  /// mapped through exp, upper part zero. Guarantees positive diagonal.
  Var tril_exp_diag(Var a);

  // Factorisation-backed ops.
  /// Cholesky factor of (A + jitter*I); backward is the triangular
  /// recurrence, so gradients flow into A without an eigendecomposition.
  Var cholesky(Var a, double jitter = 0.0);
  /// Solve L X = B (lower) or L^T X = B when transpose_l is set.
  Var triangular_solve(Var l, Var b, bool transpose_l);
  /// log|A| via Cholesky of (A + jitter*I); backward adds grad * A^{-1}.
  Var logdet_via_chol(Var a, double jitter = 0.0);
  /// (A + jitter*I)^{-1} B through one Cholesky and two triangular solves.
  /// Gradient propagates into both A and B.
  Var chol_solve(Var a, Var b, double jitter = 0.0);
  /// Same solve against an existing lower-triangular factor node.
  Var chol_factor_solve(Var l, Var b);

  // Likelihood and sampling.
  /// Sum over rows of log softmax(logits[row])[label[row]].
  Var softmax_log_likelihood(Var logits, const std::vector<int>& labels);
  /// mean + std .* noise with `noise` treated as a constant
  /// (reparameterisation trick). std and noise must match mean's shape.
  Var gaussian_reparam_sample(Var mean, Var std_dev, const DenseMatrix& noise);

  const DenseMatrix& value(Var v) const;
  double scalar_value(Var v) const;

  /// Reverse pass from a 1x1 loss node. Deterministic: identical tapes give
  /// bitwise identical gradients.
  void backward(Var loss);
  /// Gradient of the last backward() w.r.t. node v; exact zeros if v was not
  /// reached.
  DenseMatrix grad(Var v) const;

  /// Largest node row*col count recorded, for memory-shape audits in tests.
  index_t max_node_elements() const;
  /// True if some node has both dimensions >= `dim` (used to audit that no
  /// full train/test-by-train/test block was ever materialised).
  bool has_square_node_of_dim(index_t dim) const;

 private:
  struct Node;
  Var push(Node node);
  void accumulate(int id, const DenseMatrix& g);
  const DenseMatrix& val(int id) const;

  Precision prec_;
  std::vector<Node> nodes_;
  std::vector<DenseMatrix> grads_;
};

/// One line of a gradient-check report.
struct GradCheckEntry {
  std::string name;
  double max_rel_err = 0.0;
  double max_abs_err = 0.0;
  bool finite = true;
};

struct GradCheckReport {
  std::vector<GradCheckEntry> entries;
  double worst_rel_err() const;
  bool all_finite() const;
  bool passes(double threshold) const;
};

/// Builds the loss with `build` (which must register one tape param per
/// entry of `params`, in order, and return a scalar node), then compares
/// tape gradients against central finite differences coordinate by
/// coordinate. `max_coords_per_param` of 0 checks every coordinate.
GradCheckReport grad_check(
    const std::function<Var(Tape&, const std::vector<Var>&)>& build,
    const std::vector<std::pair<std::string, DenseMatrix>>& params,
    double step, int max_coords_per_param = 0, std::uint64_t coord_seed = 0);

}  // namespace gramnet

#endif  // GRAMNET_AUTODIFF_HPP
