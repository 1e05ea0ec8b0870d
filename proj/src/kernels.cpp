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

#include "gramnet/kernels.hpp"

#include <cmath>
#include <numbers>
#include <string>

namespace gramnet {

KernelKind kernel_kind_from_name(const std::string& name) {
  if (name == "sq_exp") return KernelKind::kSqExp;
  if (name == "arccos1") return KernelKind::kArccos1;
  if (name == "normalised_gaussian") return KernelKind::kNormalisedGaussian;
  throw ConfigError("unknown kernel kind: " + name);
}

const char* kernel_kind_name(KernelKind k) {
  switch (k) {
    case KernelKind::kSqExp:
      return "sq_exp";
    case KernelKind::kArccos1:
      return "arccos1";
    case KernelKind::kNormalisedGaussian:
      return "normalised_gaussian";
  }
  return "?";
}

namespace {

void check_positive_diagonals(Tape& tape, const BlocksVar& g) {
  const DenseMatrix& ii = tape.value(g.ii);
  for (index_t i = 0; i < ii.rows(); ++i) {
    if (!(ii.at(i, i) > 0.0)) {
      throw NonPositiveDiagonal("kernel input: ii diagonal entry " +
                                std::to_string(i) + " is " +
                                std::to_string(ii.at(i, i)));
    }
  }
  const DenseMatrix& tt = tape.value(g.tt_diag);
  for (index_t p = 0; p < tt.rows(); ++p) {
    if (!(tt.at(p, 0) > 0.0)) {
      throw NonPositiveDiagonal("kernel input: tt diagonal entry " +
                                std::to_string(p) + " is " +
                                std::to_string(tt.at(p, 0)));
    }
  }
}

// rho blocks: D^{-1/2} G D^{-1/2} built from the ii diagonal and tt_diag.
struct RhoBlocks {
  Var ii;
  Var ti;
};

RhoBlocks correlation_blocks(Tape& t, const BlocksVar& g) {
  Var d = t.diag_part(g.ii);                 // P_i x 1
  Var inv_ri = t.ew_reciprocal(t.ew_sqrt(d));
  Var inv_rt = t.ew_reciprocal(t.ew_sqrt(g.tt_diag));
  Var outer_ii = t.matmul(inv_ri, t.transpose(inv_ri));
  Var outer_ti = t.matmul(inv_rt, t.transpose(inv_ri));
  return {t.hadamard(g.ii, outer_ii), t.hadamard(g.ti, outer_ti)};
}

BlocksVar sq_exp_blocks(Tape& t, const BlocksVar& g, double lengthscale) {
  if (!(lengthscale > 0.0))
    throw ConfigError("sq_exp: lengthscale must be positive");
  const double c = -1.0 / (2.0 * lengthscale * lengthscale);
  Var d = t.diag_part(g.ii);
  const index_t pi = t.value(g.ii).rows();
  const index_t nt = t.value(g.tt_diag).rows();

  // ii: d_a + d_b - 2 G_ab.
  Var dist_ii = t.sub(t.add(t.tile_cols(d, pi), t.tile_rows(d, pi)),
                      t.scale(g.ii, 2.0));
  Var phi_ii = t.ew_exp(t.scale(dist_ii, c));
  // ti: tt_p + d_i - 2 G_pi.
  Var dist_ti = t.sub(t.add(t.tile_cols(g.tt_diag, pi), t.tile_rows(d, nt)),
                      t.scale(g.ti, 2.0));
  Var phi_ti = t.ew_exp(t.scale(dist_ti, c));
  // tt diagonal: zero distance, identically 1 (and genuinely constant).
  Var phi_tt = t.constant(
      DenseMatrix::constant(nt, 1, 1.0, t.precision()));
  return {phi_ii, phi_ti, phi_tt};
}

BlocksVar normalised_gaussian_blocks(Tape& t, const BlocksVar& g) {
  RhoBlocks rho = correlation_blocks(t, g);
  const index_t pi = t.value(g.ii).rows();
  const index_t nt = t.value(g.tt_diag).rows();
  Var m1_ii = t.constant(DenseMatrix::constant(pi, pi, -1.0, t.precision()));
  Var m1_ti = t.constant(DenseMatrix::constant(nt, pi, -1.0, t.precision()));
  Var phi_ii = t.ew_exp(t.add(rho.ii, m1_ii));
  Var phi_ti = t.ew_exp(t.add(rho.ti, m1_ti));
  Var phi_tt = t.constant(DenseMatrix::constant(nt, 1, 1.0, t.precision()));
  return {phi_ii, phi_ti, phi_tt};
}

// Order-1 arccos kernel applied to one rho block, with the sqrt(G_aa G_bb)
// amplitude: (1/pi) * s .* (sqrt(1 - rho^2) + (pi - acos(rho)) .* rho).
Var arccos1_block(Tape& t, Var rho, Var amplitude) {
  constexpr double pi = std::numbers::pi;
  Var rc = t.ew_clamp_unit(rho);
  Var theta = t.ew_arccos(rc);
  const index_t r = t.value(rho).rows();
  const index_t c = t.value(rho).cols();
  Var ones = t.constant(DenseMatrix::constant(r, c, 1.0, t.precision()));
  Var pis = t.constant(DenseMatrix::constant(r, c, pi, t.precision()));
  Var sin_theta = t.ew_sqrt(t.sub(ones, t.hadamard(rc, rc)));
  Var angular = t.add(sin_theta, t.hadamard(t.sub(pis, theta), rc));
  return t.scale(t.hadamard(amplitude, angular), 1.0 / pi);
}

BlocksVar arccos1_blocks(Tape& t, const BlocksVar& g) {
  RhoBlocks rho = correlation_blocks(t, g);
  Var d = t.diag_part(g.ii);
  Var ri = t.ew_sqrt(d);
  Var rt = t.ew_sqrt(g.tt_diag);
  Var amp_ii = t.matmul(ri, t.transpose(ri));
  Var amp_ti = t.matmul(rt, t.transpose(ri));
  Var phi_ii = arccos1_block(t, rho.ii, amp_ii);
  Var phi_ti = arccos1_block(t, rho.ti, amp_ti);
  // Diagonal: theta = 0 so Phi_pp = G_pp; evaluated through the same clamped
  // path for gradient consistency (relative deviation is O(clamp eps)).
  const index_t nt = t.value(g.tt_diag).rows();
  Var rho_tt = t.constant(DenseMatrix::constant(nt, 1, 1.0, t.precision()));
  Var phi_tt = arccos1_block(t, rho_tt, g.tt_diag);
  return {phi_ii, phi_ti, phi_tt};
}

}  // namespace

BlocksVar apply_kernel(Tape& tape, const KernelSpec& spec, const BlocksVar& g) {
  const DenseMatrix& ii = tape.value(g.ii);
  const DenseMatrix& ti = tape.value(g.ti);
  if (ii.rows() != ii.cols() || ti.cols() != ii.rows() ||
      tape.value(g.tt_diag).rows() != ti.rows() ||
      tape.value(g.tt_diag).cols() != 1) {
    throw ShapeMismatch("apply_kernel: inconsistent block shapes");
  }
  check_positive_diagonals(tape, g);
  switch (spec.kind) {
    case KernelKind::kSqExp:
      return sq_exp_blocks(tape, g, spec.lengthscale);
    case KernelKind::kArccos1:
      return arccos1_blocks(tape, g);
    case KernelKind::kNormalisedGaussian:
      return normalised_gaussian_blocks(tape, g);
  }
  throw ConfigError("apply_kernel: unreachable kernel kind");
}

BlocksVar batch_kernel_normalise(Tape& tape, const BlocksVar& g) {
  const DenseMatrix& ii = tape.value(g.ii);
  double mean_diag = 0.0;
  for (index_t i = 0; i < ii.rows(); ++i) mean_diag += ii.at(i, i);
  mean_diag /= static_cast<double>(ii.rows());
  if (!(mean_diag > 0.0)) {
    throw NonPositiveDiagonal("batch_kernel_normalise: mean ii diagonal is " +
                              std::to_string(mean_diag));
  }
  Var s = tape.scale(tape.trace(g.ii), 1.0 / static_cast<double>(ii.rows()));
  Var inv_s = tape.ew_reciprocal(s);
  return {tape.scale_by(g.ii, inv_s), tape.scale_by(g.ti, inv_s),
          tape.scale_by(g.tt_diag, inv_s)};
}

BlocksVar skip_combine(Tape& tape, const BlocksVar& before,
                       const BlocksVar& after, Var alpha) {
  const auto check = [&](Var a, Var b) {
    if (tape.value(a).rows() != tape.value(b).rows() ||
        tape.value(a).cols() != tape.value(b).cols())
      throw ShapeMismatch("skip_combine: block shapes differ");
  };
  check(before.ii, after.ii);
  check(before.ti, after.ti);
  check(before.tt_diag, after.tt_diag);
  Var one = tape.constant_scalar(1.0);
  Var rest = tape.sub(one, alpha);
  const auto mix = [&](Var b, Var a) {
    return tape.add(tape.scale_by(a, alpha), tape.scale_by(b, rest));
  };
  return {mix(before.ii, after.ii), mix(before.ti, after.ti),
          mix(before.tt_diag, after.tt_diag)};
}

namespace {

BlocksVar to_vars(Tape& t, const KernelBlocks& g) {
  return {t.constant(g.ii.to_dense()), t.constant(g.ti),
          t.constant(g.tt_diag)};
}

KernelBlocks from_vars(const Tape& t, const BlocksVar& v) {
  return {SymMatrix::from_dense_lower(t.value(v.ii)), t.value(v.ti),
          t.value(v.tt_diag)};
}

}  // namespace

KernelBlocks apply_kernel(const KernelSpec& spec, const KernelBlocks& g) {
  Tape t(g.ii.precision());
  return from_vars(t, apply_kernel(t, spec, to_vars(t, g)));
}

KernelBlocks batch_kernel_normalise(const KernelBlocks& g) {
  Tape t(g.ii.precision());
  return from_vars(t, batch_kernel_normalise(t, to_vars(t, g)));
}

KernelBlocks skip_combine(const KernelBlocks& before, const KernelBlocks& after,
                          double alpha) {
  Tape t(before.ii.precision());
  Var a = t.constant_scalar(alpha);
  return from_vars(
      t, skip_combine(t, to_vars(t, before), to_vars(t, after), a));
}

}  // namespace gramnet
