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

#include "gramnet/autodiff.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <random>

namespace gramnet {

namespace {

template <class T>
using EMat =
    Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <class T>
Eigen::Map<EMat<T>> emap(DenseMatrix& m) {
  return {m.buf<T>().data(), m.rows(), m.cols()};
}

template <class T>
Eigen::Map<const EMat<T>> emap(const DenseMatrix& m) {
  return {m.buf<T>().data(), m.rows(), m.cols()};
}

template <class F>
auto dispatch(Precision p, F&& f) {
  if (p == Precision::kSingle) return f.template operator()<float>();
  return f.template operator()<double>();
}

enum class Op : std::uint8_t {
  kConst,
  kParam,
  kAdd,
  kSub,
  kScale,
  kScaleBy,
  kMatmul,
  kTranspose,
  kHadamard,
  kExp,
  kLog,
  kSqrt,
  kSqrtFloor,
  kReciprocal,
  kArccos,
  kClampUnit,
  kTrace,
  kSum,
  kRowSum,
  kFrobSq,
  kDiagPart,
  kTileCols,
  kTileRows,
  kSlice,
  kVcat,
  kHcat,
  kRowGather,
  kPoolRowsMean,
  kTrilExpDiag,
  kCholesky,
  kTriSolve,
  kTriSolveT,
  kSoftmaxLogLik,
};

// X = L^{-1} B (lower-triangular L), computed in the matrices' precision.
DenseMatrix lower_solve(const DenseMatrix& l, const DenseMatrix& b) {
  DenseMatrix x = b;
  dispatch(b.precision(), [&]<class T>() {
    auto lm = emap<T>(l);
    auto xm = emap<T>(x);
    lm.template triangularView<Eigen::Lower>().solveInPlace(xm);
  });
  return x;
}

// X = L^{-T} B.
DenseMatrix upper_solve_t(const DenseMatrix& l, const DenseMatrix& b) {
  DenseMatrix x = b;
  dispatch(b.precision(), [&]<class T>() {
    auto lm = emap<T>(l);
    auto xm = emap<T>(x);
    lm.transpose().template triangularView<Eigen::Upper>().solveInPlace(xm);
  });
  return x;
}

DenseMatrix tril_mask(const DenseMatrix& m) {
  DenseMatrix out = m;
  for (index_t i = 0; i < out.rows(); ++i)
    for (index_t j = i + 1; j < out.cols(); ++j) out.set(i, j, 0.0);
  return out;
}

}  // namespace

struct Tape::Node {
  Op op;
  int a = -1;
  int b = -1;
  DenseMatrix value;
  double c0 = 0.0;             // scale factor / jitter / floor / eps
  index_t i0 = 0;              // slice row offset / pool group / tile count
  index_t i1 = 0;              // slice col offset
  std::vector<index_t> idx;    // row_gather map
  std::vector<int> labels;     // softmax labels
};

Tape::Tape(Precision prec) : prec_(prec) {}
Tape::~Tape() = default;
Tape::Tape(Tape&&) noexcept = default;
Tape& Tape::operator=(Tape&&) noexcept = default;

int Tape::size() const { return static_cast<int>(nodes_.size()); }

Var Tape::push(Node node) {
  nodes_.push_back(std::move(node));
  return Var{static_cast<int>(nodes_.size()) - 1};
}

const DenseMatrix& Tape::val(int id) const { return nodes_[id].value; }

const DenseMatrix& Tape::value(Var v) const { return nodes_[v.id].value; }

double Tape::scalar_value(Var v) const {
  const DenseMatrix& m = nodes_[v.id].value;
  if (m.rows() != 1 || m.cols() != 1)
    throw ShapeMismatch("scalar_value: node is not 1x1");
  return m.at(0, 0);
}

Var Tape::constant(DenseMatrix value) {
  if (value.precision() != prec_)
    throw PrecisionMismatch("constant: value precision differs from tape");
  return push({Op::kConst, -1, -1, std::move(value)});
}

Var Tape::constant_scalar(double v) {
  return constant(DenseMatrix::constant(1, 1, v, prec_));
}

Var Tape::param(DenseMatrix value) {
  if (value.precision() != prec_)
    throw PrecisionMismatch("param: value precision differs from tape");
  return push({Op::kParam, -1, -1, std::move(value)});
}

Var Tape::add(Var a, Var b) {
  return push({Op::kAdd, a.id, b.id, gramnet::add(val(a.id), val(b.id))});
}

Var Tape::sub(Var a, Var b) {
  return push(
      {Op::kSub, a.id, b.id,
       gramnet::add(val(a.id), gramnet::scale(val(b.id), -1.0))});
}

Var Tape::scale(Var a, double c) {
  Node n{Op::kScale, a.id, -1, gramnet::scale(val(a.id), c)};
  n.c0 = c;
  return push(std::move(n));
}

Var Tape::scale_by(Var a, Var scalar) {
  const DenseMatrix& s = val(scalar.id);
  if (s.rows() != 1 || s.cols() != 1)
    throw ShapeMismatch("scale_by: scalar operand is not 1x1");
  return push({Op::kScaleBy, a.id, scalar.id,
               gramnet::scale(val(a.id), s.at(0, 0))});
}

Var Tape::matmul(Var a, Var b) {
  return push({Op::kMatmul, a.id, b.id, gramnet::matmul(val(a.id), val(b.id))});
}

Var Tape::transpose(Var a) {
  return push({Op::kTranspose, a.id, -1, val(a.id).transposed()});
}

Var Tape::hadamard(Var a, Var b) {
  const DenseMatrix& x = val(a.id);
  const DenseMatrix& y = val(b.id);
  if (x.precision() != y.precision())
    throw PrecisionMismatch("hadamard: mixed precision");
  if (x.rows() != y.rows() || x.cols() != y.cols())
    throw ShapeMismatch("hadamard: shape mismatch");
  DenseMatrix out(x.rows(), x.cols(), x.precision());
  dispatch(x.precision(), [&]<class T>() {
    emap<T>(out) = emap<T>(x).cwiseProduct(emap<T>(y));
  });
  return push({Op::kHadamard, a.id, b.id, std::move(out)});
}

namespace {

template <class Fn>
DenseMatrix ew_apply(const DenseMatrix& x, Fn&& fn) {
  DenseMatrix out(x.rows(), x.cols(), x.precision());
  dispatch(x.precision(), [&]<class T>() {
    const auto& in = x.buf<T>();
    auto& o = out.buf<T>();
    for (std::size_t i = 0; i < in.size(); ++i)
      o[i] = static_cast<T>(fn(static_cast<double>(in[i])));
  });
  return out;
}

}  // namespace

Var Tape::ew_exp(Var a) {
  return push({Op::kExp, a.id, -1,
               ew_apply(val(a.id), [](double x) { return std::exp(x); })});
}

Var Tape::ew_sqrt(Var a) {
  return push({Op::kSqrt, a.id, -1,
               ew_apply(val(a.id), [](double x) { return std::sqrt(x); })});
}

Var Tape::ew_sqrt_floor(Var a, double floor_value) {
  Node n{Op::kSqrtFloor, a.id, -1,
         ew_apply(val(a.id), [floor_value](double x) {
           return std::sqrt(std::max(x, floor_value));
         })};
  n.c0 = floor_value;
  return push(std::move(n));
}

Var Tape::ew_reciprocal(Var a) {
  return push({Op::kReciprocal, a.id, -1,
               ew_apply(val(a.id), [](double x) { return 1.0 / x; })});
}

Var Tape::ew_arccos(Var a) {
  return push({Op::kArccos, a.id, -1,
               ew_apply(val(a.id), [](double x) { return std::acos(x); })});
}

Var Tape::ew_clamp_unit(Var a, double eps) {
  Node n{Op::kClampUnit, a.id, -1,
         ew_apply(val(a.id), [eps](double x) {
           return std::clamp(x, -1.0 + eps, 1.0 - eps);
         })};
  n.c0 = eps;
  return push(std::move(n));
}

Var Tape::trace(Var a) {
  const DenseMatrix& x = val(a.id);
  if (x.rows() != x.cols()) throw ShapeMismatch("trace: matrix is not square");
  double t = 0.0;
  for (index_t i = 0; i < x.rows(); ++i) t += x.at(i, i);
  return push({Op::kTrace, a.id, -1, DenseMatrix::constant(1, 1, t, prec_)});
}

Var Tape::sum(Var a) {
  const DenseMatrix& x = val(a.id);
  const double s = dispatch(prec_, [&]<class T>() -> double {
    return static_cast<double>(emap<T>(x).sum());
  });
  return push({Op::kSum, a.id, -1, DenseMatrix::constant(1, 1, s, prec_)});
}

Var Tape::row_sum(Var a) {
  const DenseMatrix& x = val(a.id);
  DenseMatrix out(x.rows(), 1, prec_);
  dispatch(prec_, [&]<class T>() {
    emap<T>(out).col(0) = emap<T>(x).rowwise().sum();
  });
  return push({Op::kRowSum, a.id, -1, std::move(out)});
}

Var Tape::frobenius_norm_sq(Var a) {
  const DenseMatrix& x = val(a.id);
  const double s = dispatch(prec_, [&]<class T>() -> double {
    return static_cast<double>(emap<T>(x).squaredNorm());
  });
  return push({Op::kFrobSq, a.id, -1, DenseMatrix::constant(1, 1, s, prec_)});
}

Var Tape::diag_part(Var a) {
  const DenseMatrix& x = val(a.id);
  if (x.rows() != x.cols())
    throw ShapeMismatch("diag_part: matrix is not square");
  DenseMatrix out(x.rows(), 1, prec_);
  for (index_t i = 0; i < x.rows(); ++i) out.set(i, 0, x.at(i, i));
  return push({Op::kDiagPart, a.id, -1, std::move(out)});
}

Var Tape::tile_cols(Var v, index_t m) {
  const DenseMatrix& x = val(v.id);
  if (x.cols() != 1) throw ShapeMismatch("tile_cols: input is not a column");
  DenseMatrix out(x.rows(), m, prec_);
  for (index_t r = 0; r < x.rows(); ++r) {
    const double val_r = x.at(r, 0);
    for (index_t c = 0; c < m; ++c) out.set(r, c, val_r);
  }
  Node n{Op::kTileCols, v.id, -1, std::move(out)};
  n.i0 = m;
  return push(std::move(n));
}

Var Tape::tile_rows(Var v, index_t m) {
  const DenseMatrix& x = val(v.id);
  if (x.cols() != 1) throw ShapeMismatch("tile_rows: input is not a column");
  DenseMatrix out(m, x.rows(), prec_);
  for (index_t c = 0; c < x.rows(); ++c) {
    const double val_c = x.at(c, 0);
    for (index_t r = 0; r < m; ++r) out.set(r, c, val_c);
  }
  Node n{Op::kTileRows, v.id, -1, std::move(out)};
  n.i0 = m;
  return push(std::move(n));
}

Var Tape::slice(Var a, index_t r0, index_t c0, index_t rows, index_t cols) {
  const DenseMatrix& x = val(a.id);
  if (r0 < 0 || c0 < 0 || r0 + rows > x.rows() || c0 + cols > x.cols())
    throw ShapeMismatch("slice: window out of range");
  DenseMatrix out(rows, cols, prec_);
  dispatch(prec_, [&]<class T>() {
    emap<T>(out) = emap<T>(x).block(r0, c0, rows, cols);
  });
  Node n{Op::kSlice, a.id, -1, std::move(out)};
  n.i0 = r0;
  n.i1 = c0;
  return push(std::move(n));
}

Var Tape::vcat(Var a, Var b) {
  const DenseMatrix& x = val(a.id);
  const DenseMatrix& y = val(b.id);
  if (x.cols() != y.cols()) throw ShapeMismatch("vcat: column mismatch");
  DenseMatrix out(x.rows() + y.rows(), x.cols(), prec_);
  dispatch(prec_, [&]<class T>() {
    emap<T>(out).topRows(x.rows()) = emap<T>(x);
    emap<T>(out).bottomRows(y.rows()) = emap<T>(y);
  });
  return push({Op::kVcat, a.id, b.id, std::move(out)});
}

Var Tape::hcat(Var a, Var b) {
  const DenseMatrix& x = val(a.id);
  const DenseMatrix& y = val(b.id);
  if (x.rows() != y.rows()) throw ShapeMismatch("hcat: row mismatch");
  DenseMatrix out(x.rows(), x.cols() + y.cols(), prec_);
  dispatch(prec_, [&]<class T>() {
    emap<T>(out).leftCols(x.cols()) = emap<T>(x);
    emap<T>(out).rightCols(y.cols()) = emap<T>(y);
  });
  return push({Op::kHcat, a.id, b.id, std::move(out)});
}

Var Tape::row_gather(Var a, std::vector<index_t> index_map) {
  const DenseMatrix& x = val(a.id);
  DenseMatrix out(static_cast<index_t>(index_map.size()), x.cols(), prec_);
  dispatch(prec_, [&]<class T>() {
    auto xm = emap<T>(x);
    auto om = emap<T>(out);
    for (std::size_t r = 0; r < index_map.size(); ++r) {
      const index_t src = index_map[r];
      if (src < 0) continue;  // zero row (out of image bounds)
      if (src >= x.rows()) throw ShapeMismatch("row_gather: index out of range");
      om.row(static_cast<index_t>(r)) = xm.row(src);
    }
  });
  Node n{Op::kRowGather, a.id, -1, std::move(out)};
  n.idx = std::move(index_map);
  return push(std::move(n));
}

Var Tape::pool_rows_mean(Var a, index_t group) {
  const DenseMatrix& x = val(a.id);
  if (group <= 0 || x.rows() % group != 0)
    throw ShapeMismatch("pool_rows_mean: rows not divisible by group");
  const index_t out_rows = x.rows() / group;
  DenseMatrix out(out_rows, x.cols(), prec_);
  dispatch(prec_, [&]<class T>() {
    auto xm = emap<T>(x);
    auto om = emap<T>(out);
    for (index_t g = 0; g < out_rows; ++g) {
      om.row(g) = xm.middleRows(g * group, group).colwise().sum() /
                  static_cast<T>(group);
    }
  });
  Node n{Op::kPoolRowsMean, a.id, -1, std::move(out)};
  n.i0 = group;
  return push(std::move(n));
}

Var Tape::tril_exp_diag(Var a) {
  const DenseMatrix& x = val(a.id);
  if (x.rows() != x.cols())
    throw ShapeMismatch("tril_exp_diag: matrix is not square");
  DenseMatrix out(x.rows(), x.cols(), prec_);
  for (index_t i = 0; i < x.rows(); ++i) {
    for (index_t j = 0; j < i; ++j) out.set(i, j, x.at(i, j));
    out.set(i, i, std::exp(x.at(i, i)));
  }
  return push({Op::kTrilExpDiag, a.id, -1, std::move(out)});
}

Var Tape::cholesky(Var a, double jitter) {
  // Reads only the lower triangle of a (the node is symmetric by
  // construction everywhere this is used); gradients for the upper part are
  // exact zeros and the lower part absorbs both symmetric halves.
  const SymMatrix sym = SymMatrix::from_dense_lower(val(a.id));
  CholFactor f = gramnet::cholesky(sym, jitter);
  Node n{Op::kCholesky, a.id, -1, std::move(f.lower)};
  n.c0 = jitter;
  return push(std::move(n));
}

Var Tape::triangular_solve(Var l, Var b, bool transpose_l) {
  const DenseMatrix& lm = val(l.id);
  const DenseMatrix& bm = val(b.id);
  if (lm.rows() != lm.cols() || lm.rows() != bm.rows())
    throw ShapeMismatch("triangular_solve: dimension mismatch");
  DenseMatrix x = transpose_l ? upper_solve_t(lm, bm) : lower_solve(lm, bm);
  return push({transpose_l ? Op::kTriSolveT : Op::kTriSolve, l.id, b.id,
               std::move(x)});
}

Var Tape::logdet_via_chol(Var a, double jitter) {
  Var l = cholesky(a, jitter);
  Var d = diag_part(l);
  Var logd =
      push({Op::kLog, d.id, -1,
            ew_apply(val(d.id), [](double x) { return std::log(x); })});
  return scale(sum(logd), 2.0);
}

Var Tape::chol_solve(Var a, Var b, double jitter) {
  Var l = cholesky(a, jitter);
  return chol_factor_solve(l, b);
}

Var Tape::chol_factor_solve(Var l, Var b) {
  Var y = triangular_solve(l, b, /*transpose_l=*/false);
  return triangular_solve(l, y, /*transpose_l=*/true);
}

Var Tape::softmax_log_likelihood(Var logits, const std::vector<int>& labels) {
  const DenseMatrix& f = val(logits.id);
  if (static_cast<index_t>(labels.size()) != f.rows())
    throw ShapeMismatch("softmax_log_likelihood: one label per row required");
  double total = 0.0;
  for (index_t r = 0; r < f.rows(); ++r) {
    const int y = labels[static_cast<std::size_t>(r)];
    if (y < 0 || y >= f.cols())
      throw ShapeMismatch("softmax_log_likelihood: label out of range");
    double mx = f.at(r, 0);
    for (index_t c = 1; c < f.cols(); ++c) mx = std::max(mx, f.at(r, c));
    double lse = 0.0;
    for (index_t c = 0; c < f.cols(); ++c) lse += std::exp(f.at(r, c) - mx);
    total += f.at(r, y) - mx - std::log(lse);
  }
  Node n{Op::kSoftmaxLogLik, logits.id, -1,
         DenseMatrix::constant(1, 1, total, prec_)};
  n.labels = labels;
  return push(std::move(n));
}

Var Tape::gaussian_reparam_sample(Var mean, Var std_dev,
                                  const DenseMatrix& noise) {
  Var xi = constant(noise);
  return add(mean, hadamard(std_dev, xi));
}

void Tape::accumulate(int id, const DenseMatrix& g) {
  DenseMatrix& slot = grads_[static_cast<std::size_t>(id)];
  if (slot.empty()) {
    slot = g;
    return;
  }
  dispatch(prec_, [&]<class T>() { emap<T>(slot) += emap<T>(g); });
}

void Tape::backward(Var loss) {
  const DenseMatrix& lv = val(loss.id);
  if (lv.rows() != 1 || lv.cols() != 1)
    throw ShapeMismatch("backward: loss node is not 1x1");
  grads_.assign(nodes_.size(), DenseMatrix{});
  grads_[static_cast<std::size_t>(loss.id)] =
      DenseMatrix::constant(1, 1, 1.0, prec_);

  for (int id = loss.id; id >= 0; --id) {
    const DenseMatrix& g = grads_[static_cast<std::size_t>(id)];
    if (g.empty()) continue;
    const Node& n = nodes_[static_cast<std::size_t>(id)];
    switch (n.op) {
      case Op::kConst:
      case Op::kParam:
        break;
      case Op::kAdd:
        accumulate(n.a, g);
        accumulate(n.b, g);
        break;
      case Op::kSub:
        accumulate(n.a, g);
        accumulate(n.b, gramnet::scale(g, -1.0));
        break;
      case Op::kScale:
        accumulate(n.a, gramnet::scale(g, n.c0));
        break;
      case Op::kScaleBy: {
        const double s = val(n.b).at(0, 0);
        accumulate(n.a, gramnet::scale(g, s));
        double ds = dispatch(prec_, [&]<class T>() -> double {
          return static_cast<double>(
              emap<T>(g).cwiseProduct(emap<T>(val(n.a))).sum());
        });
        accumulate(n.b, DenseMatrix::constant(1, 1, ds, prec_));
        break;
      }
      case Op::kMatmul:
        accumulate(n.a, gramnet::matmul(g, val(n.b).transposed()));
        accumulate(n.b, gramnet::matmul(val(n.a).transposed(), g));
        break;
      case Op::kTranspose:
        accumulate(n.a, g.transposed());
        break;
      case Op::kHadamard: {
        DenseMatrix da(g.rows(), g.cols(), prec_);
        DenseMatrix db(g.rows(), g.cols(), prec_);
        dispatch(prec_, [&]<class T>() {
          emap<T>(da) = emap<T>(g).cwiseProduct(emap<T>(val(n.b)));
          emap<T>(db) = emap<T>(g).cwiseProduct(emap<T>(val(n.a)));
        });
        accumulate(n.a, da);
        accumulate(n.b, db);
        break;
      }
      case Op::kExp: {
        DenseMatrix da(g.rows(), g.cols(), prec_);
        dispatch(prec_, [&]<class T>() {
          emap<T>(da) = emap<T>(g).cwiseProduct(emap<T>(n.value));
        });
        accumulate(n.a, da);
        break;
      }
      case Op::kLog: {
        DenseMatrix da(g.rows(), g.cols(), prec_);
        dispatch(prec_, [&]<class T>() {
          emap<T>(da) = emap<T>(g).cwiseQuotient(emap<T>(val(n.a)));
        });
        accumulate(n.a, da);
        break;
      }
      case Op::kSqrt: {
        DenseMatrix da(g.rows(), g.cols(), prec_);
        dispatch(prec_, [&]<class T>() {
          emap<T>(da) =
              emap<T>(g).cwiseQuotient(emap<T>(n.value) * static_cast<T>(2));
        });
        accumulate(n.a, da);
        break;
      }
      case Op::kSqrtFloor: {
        const DenseMatrix& x = val(n.a);
        DenseMatrix da(g.rows(), g.cols(), prec_);
        for (index_t r = 0; r < g.rows(); ++r)
          for (index_t c = 0; c < g.cols(); ++c) {
            const double xv = x.at(r, c);
            da.set(r, c,
                   xv > n.c0 ? g.at(r, c) / (2.0 * n.value.at(r, c)) : 0.0);
          }
        accumulate(n.a, da);
        break;
      }
      case Op::kReciprocal: {
        DenseMatrix da(g.rows(), g.cols(), prec_);
        dispatch(prec_, [&]<class T>() {
          emap<T>(da) = -emap<T>(g).cwiseProduct(
              emap<T>(n.value).cwiseProduct(emap<T>(n.value)));
        });
        accumulate(n.a, da);
        break;
      }
      case Op::kArccos: {
        const DenseMatrix& x = val(n.a);
        DenseMatrix da(g.rows(), g.cols(), prec_);
        for (index_t r = 0; r < g.rows(); ++r)
          for (index_t c = 0; c < g.cols(); ++c) {
            const double xv = x.at(r, c);
            da.set(r, c, -g.at(r, c) / std::sqrt(1.0 - xv * xv));
          }
        accumulate(n.a, da);
        break;
      }
      case Op::kClampUnit: {
        const DenseMatrix& x = val(n.a);
        DenseMatrix da(g.rows(), g.cols(), prec_);
        const double hi = 1.0 - n.c0;
        for (index_t r = 0; r < g.rows(); ++r)
          for (index_t c = 0; c < g.cols(); ++c) {
            const double xv = x.at(r, c);
            da.set(r, c, (xv > -hi && xv < hi) ? g.at(r, c) : 0.0);
          }
        accumulate(n.a, da);
        break;
      }
      case Op::kTrace: {
        const DenseMatrix& x = val(n.a);
        DenseMatrix da(x.rows(), x.cols(), prec_);
        const double s = g.at(0, 0);
        for (index_t i = 0; i < x.rows(); ++i) da.set(i, i, s);
        accumulate(n.a, da);
        break;
      }
      case Op::kSum: {
        const DenseMatrix& x = val(n.a);
        accumulate(n.a, DenseMatrix::constant(x.rows(), x.cols(), g.at(0, 0),
                                              prec_));
        break;
      }
      case Op::kRowSum: {
        const DenseMatrix& x = val(n.a);
        DenseMatrix da(x.rows(), x.cols(), prec_);
        for (index_t r = 0; r < x.rows(); ++r) {
          const double gr = g.at(r, 0);
          for (index_t c = 0; c < x.cols(); ++c) da.set(r, c, gr);
        }
        accumulate(n.a, da);
        break;
      }
      case Op::kFrobSq:
        accumulate(n.a, gramnet::scale(val(n.a), 2.0 * g.at(0, 0)));
        break;
      case Op::kDiagPart: {
        const DenseMatrix& x = val(n.a);
        DenseMatrix da(x.rows(), x.cols(), prec_);
        for (index_t i = 0; i < x.rows(); ++i) da.set(i, i, g.at(i, 0));
        accumulate(n.a, da);
        break;
      }
      case Op::kTileCols: {
        const DenseMatrix& x = val(n.a);
        DenseMatrix da(x.rows(), 1, prec_);
        dispatch(prec_, [&]<class T>() {
          emap<T>(da).col(0) = emap<T>(g).rowwise().sum();
        });
        accumulate(n.a, da);
        break;
      }
      case Op::kTileRows: {
        const DenseMatrix& x = val(n.a);
        DenseMatrix da(x.rows(), 1, prec_);
        dispatch(prec_, [&]<class T>() {
          emap<T>(da).col(0) = emap<T>(g).colwise().sum().transpose();
        });
        accumulate(n.a, da);
        break;
      }
      case Op::kSlice: {
        const DenseMatrix& x = val(n.a);
        DenseMatrix da(x.rows(), x.cols(), prec_);
        dispatch(prec_, [&]<class T>() {
          emap<T>(da).block(n.i0, n.i1, g.rows(), g.cols()) = emap<T>(g);
        });
        accumulate(n.a, da);
        break;
      }
      case Op::kVcat: {
        const index_t ra = val(n.a).rows();
        DenseMatrix da(ra, g.cols(), prec_);
        DenseMatrix db(g.rows() - ra, g.cols(), prec_);
        dispatch(prec_, [&]<class T>() {
          emap<T>(da) = emap<T>(g).topRows(ra);
          emap<T>(db) = emap<T>(g).bottomRows(g.rows() - ra);
        });
        accumulate(n.a, da);
        accumulate(n.b, db);
        break;
      }
      case Op::kHcat: {
        const index_t ca = val(n.a).cols();
        DenseMatrix da(g.rows(), ca, prec_);
        DenseMatrix db(g.rows(), g.cols() - ca, prec_);
        dispatch(prec_, [&]<class T>() {
          emap<T>(da) = emap<T>(g).leftCols(ca);
          emap<T>(db) = emap<T>(g).rightCols(g.cols() - ca);
        });
        accumulate(n.a, da);
        accumulate(n.b, db);
        break;
      }
      case Op::kRowGather: {
        const DenseMatrix& x = val(n.a);
        DenseMatrix da(x.rows(), x.cols(), prec_);
        dispatch(prec_, [&]<class T>() {
          auto dam = emap<T>(da);
          auto gm = emap<T>(g);
          for (std::size_t r = 0; r < n.idx.size(); ++r) {
            if (n.idx[r] < 0) continue;
            dam.row(n.idx[r]) += gm.row(static_cast<index_t>(r));
          }
        });
        accumulate(n.a, da);
        break;
      }
      case Op::kPoolRowsMean: {
        const DenseMatrix& x = val(n.a);
        DenseMatrix da(x.rows(), x.cols(), prec_);
        dispatch(prec_, [&]<class T>() {
          auto dam = emap<T>(da);
          auto gm = emap<T>(g);
          for (index_t r = 0; r < x.rows(); ++r)
            dam.row(r) = gm.row(r / n.i0) / static_cast<T>(n.i0);
        });
        accumulate(n.a, da);
        break;
      }
      case Op::kTrilExpDiag: {
        const DenseMatrix& x = val(n.a);
        DenseMatrix da(x.rows(), x.cols(), prec_);
        for (index_t i = 0; i < x.rows(); ++i) {
          for (index_t j = 0; j < i; ++j) da.set(i, j, g.at(i, j));
          da.set(i, i, g.at(i, i) * n.value.at(i, i));
        }
        accumulate(n.a, da);
        break;
      }
      case Op::kCholesky: {
        // Triangular backward recurrence (reverse of A = L L^T), with the
        // result folded onto the lower triangle to match the forward's
        // lower-triangle read.
        const DenseMatrix& l = n.value;
        const index_t dim = l.rows();
        DenseMatrix lbar = tril_mask(g);
        // P = Phi(L^T Lbar): lower triangle with halved diagonal.
        DenseMatrix p = gramnet::matmul(l.transposed(), lbar);
        for (index_t i = 0; i < dim; ++i) {
          for (index_t j = i + 1; j < dim; ++j) p.set(i, j, 0.0);
          p.set(i, i, 0.5 * p.at(i, i));
        }
        // S = L^{-T} P L^{-1}.
        DenseMatrix s = upper_solve_t(l, p);
        // Solve S_out L = S  =>  S_out = S L^{-1} via (L^T S_out^T = S^T).
        DenseMatrix s_out = upper_solve_t(l, s.transposed()).transposed();
        // Fold symmetric gradient onto the lower triangle.
        DenseMatrix da(dim, dim, prec_);
        for (index_t i = 0; i < dim; ++i) {
          da.set(i, i, s_out.at(i, i));
          for (index_t j = 0; j < i; ++j)
            da.set(i, j, s_out.at(i, j) + s_out.at(j, i));
        }
        accumulate(n.a, da);
        break;
      }
      case Op::kTriSolve: {
        // X = L^{-1} B: dB = L^{-T} g, dL = -dB X^T (tril).
        const DenseMatrix& l = val(n.a);
        DenseMatrix db = upper_solve_t(l, g);
        DenseMatrix dl = tril_mask(gramnet::scale(
            gramnet::matmul(db, n.value.transposed()), -1.0));
        accumulate(n.a, dl);
        accumulate(n.b, db);
        break;
      }
      case Op::kTriSolveT: {
        // X = L^{-T} B: dB = L^{-1} g, dL = -X dB^T (tril).
        const DenseMatrix& l = val(n.a);
        DenseMatrix db = lower_solve(l, g);
        DenseMatrix dl = tril_mask(gramnet::scale(
            gramnet::matmul(n.value, db.transposed()), -1.0));
        accumulate(n.a, dl);
        accumulate(n.b, db);
        break;
      }
      case Op::kSoftmaxLogLik: {
        const DenseMatrix& f = val(n.a);
        const double s = g.at(0, 0);
        DenseMatrix da(f.rows(), f.cols(), prec_);
        for (index_t r = 0; r < f.rows(); ++r) {
          double mx = f.at(r, 0);
          for (index_t c = 1; c < f.cols(); ++c) mx = std::max(mx, f.at(r, c));
          double lse = 0.0;
          for (index_t c = 0; c < f.cols(); ++c)
            lse += std::exp(f.at(r, c) - mx);
          const int y = n.labels[static_cast<std::size_t>(r)];
          for (index_t c = 0; c < f.cols(); ++c) {
            const double p = std::exp(f.at(r, c) - mx) / lse;
            da.set(r, c, s * ((c == y ? 1.0 : 0.0) - p));
          }
        }
        accumulate(n.a, da);
        break;
      }
    }
  }
}

DenseMatrix Tape::grad(Var v) const {
  const DenseMatrix& g = grads_[static_cast<std::size_t>(v.id)];
  if (!g.empty()) return g;
  const DenseMatrix& value = val(v.id);
  return DenseMatrix(value.rows(), value.cols(), prec_);
}

index_t Tape::max_node_elements() const {
  index_t best = 0;
  for (const Node& n : nodes_) best = std::max(best, n.value.size());
  return best;
}

bool Tape::has_square_node_of_dim(index_t dim) const {
  for (const Node& n : nodes_)
    if (n.value.rows() >= dim && n.value.cols() >= dim) return true;
  return false;
}

double GradCheckReport::worst_rel_err() const {
  double worst = 0.0;
  for (const auto& e : entries) worst = std::max(worst, e.max_rel_err);
  return worst;
}

bool GradCheckReport::all_finite() const {
  for (const auto& e : entries)
    if (!e.finite) return false;
  return true;
}

bool GradCheckReport::passes(double threshold) const {
  return all_finite() && worst_rel_err() < threshold;
}

GradCheckReport grad_check(
    const std::function<Var(Tape&, const std::vector<Var>&)>& build,
    const std::vector<std::pair<std::string, DenseMatrix>>& params,
    double step, int max_coords_per_param, std::uint64_t coord_seed) {
  if (params.empty()) return {};
  const Precision prec = params.front().second.precision();

  const auto eval = [&](const std::vector<DenseMatrix>& values) {
    Tape t(prec);
    std::vector<Var> vars;
    vars.reserve(values.size());
    for (const DenseMatrix& v : values) vars.push_back(t.param(v));
    return t.scalar_value(build(t, vars));
  };

  // Analytic gradients from one tape.
  std::vector<DenseMatrix> base;
  base.reserve(params.size());
  for (const auto& [name, v] : params) base.push_back(v);
  Tape t(prec);
  std::vector<Var> vars;
  for (const DenseMatrix& v : base) vars.push_back(t.param(v));
  Var loss = build(t, vars);
  t.backward(loss);
  std::vector<DenseMatrix> analytic;
  for (Var v : vars) analytic.push_back(t.grad(v));

  std::mt19937_64 pick(coord_seed);
  GradCheckReport report;
  for (std::size_t p = 0; p < params.size(); ++p) {
    GradCheckEntry entry;
    entry.name = params[p].first;
    const index_t count = base[p].size();
    std::vector<index_t> coords;
    if (max_coords_per_param > 0 && count > max_coords_per_param) {
      std::vector<index_t> all(static_cast<std::size_t>(count));
      for (index_t i = 0; i < count; ++i) all[static_cast<std::size_t>(i)] = i;
      for (int k = 0; k < max_coords_per_param; ++k) {
        const std::size_t j =
            k + static_cast<std::size_t>(pick() % (all.size() - k));
        std::swap(all[static_cast<std::size_t>(k)], all[j]);
        coords.push_back(all[static_cast<std::size_t>(k)]);
      }
    } else {
      for (index_t i = 0; i < count; ++i) coords.push_back(i);
    }
    for (index_t flat : coords) {
      const index_t r = flat / base[p].cols();
      const index_t c = flat % base[p].cols();
      const double orig = base[p].at(r, c);
      std::vector<DenseMatrix> work = base;
      work[p].set(r, c, orig + step);
      const double fp = eval(work);
      work[p].set(r, c, orig - step);
      const double fm = eval(work);
      const double fd = (fp - fm) / (2.0 * step);
      const double ad = analytic[p].at(r, c);
      if (!std::isfinite(fd) || !std::isfinite(ad)) {
        entry.finite = false;
        continue;
      }
      const double abs_err = std::abs(fd - ad);
      const double rel =
          abs_err / std::max({std::abs(fd), std::abs(ad), 1e-5});
      entry.max_abs_err = std::max(entry.max_abs_err, abs_err);
      entry.max_rel_err = std::max(entry.max_rel_err, rel);
    }
    report.entries.push_back(std::move(entry));
  }
  return report;
}

}  // namespace gramnet
