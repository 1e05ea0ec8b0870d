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

#include "gramnet/tensor.hpp"

#include <Eigen/Dense>
#include <Eigen/Eigenvalues>
#include <cmath>
#include <limits>
#include <string>

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

void require_same_precision(Precision a, Precision b, const char* op) {
  if (a != b) {
    throw PrecisionMismatch(std::string(op) + ": operands are " +
                            precision_name(a) + " and " + precision_name(b));
  }
}

}  // namespace

const char* precision_name(Precision p) {
  return p == Precision::kSingle ? "single" : "double";
}

DenseMatrix::DenseMatrix(index_t rows, index_t cols, Precision prec)
    : rows_(rows), cols_(cols), prec_(prec) {
  if (rows < 0 || cols < 0) throw ShapeMismatch("negative matrix dimension");
  if (prec == Precision::kSingle) {
    buf_ = std::vector<float>(static_cast<std::size_t>(rows * cols), 0.0f);
  } else {
    buf_ = std::vector<double>(static_cast<std::size_t>(rows * cols), 0.0);
  }
}

DenseMatrix DenseMatrix::identity(index_t n, Precision prec) {
  DenseMatrix m(n, n, prec);
  for (index_t i = 0; i < n; ++i) m.set(i, i, 1.0);
  return m;
}

DenseMatrix DenseMatrix::constant(index_t rows, index_t cols, double value,
                                  Precision prec) {
  DenseMatrix m(rows, cols, prec);
  for (index_t r = 0; r < rows; ++r)
    for (index_t c = 0; c < cols; ++c) m.set(r, c, value);
  return m;
}

DenseMatrix DenseMatrix::from_rows(
    std::initializer_list<std::initializer_list<double>> rows,
    Precision prec) {
  const index_t nr = static_cast<index_t>(rows.size());
  const index_t nc = nr > 0 ? static_cast<index_t>(rows.begin()->size()) : 0;
  DenseMatrix m(nr, nc, prec);
  index_t r = 0;
  for (const auto& row : rows) {
    if (static_cast<index_t>(row.size()) != nc)
      throw ShapeMismatch("ragged initializer rows");
    index_t c = 0;
    for (double v : row) m.set(r, c++, v);
    ++r;
  }
  return m;
}

double DenseMatrix::at(index_t r, index_t c) const {
  const std::size_t i = static_cast<std::size_t>(r * cols_ + c);
  return dispatch(prec_, [&]<class T>() -> double {
    return static_cast<double>(buf<T>()[i]);
  });
}

void DenseMatrix::set(index_t r, index_t c, double v) {
  const std::size_t i = static_cast<std::size_t>(r * cols_ + c);
  dispatch(prec_, [&]<class T>() { buf<T>()[i] = static_cast<T>(v); });
}

DenseMatrix DenseMatrix::to_precision(Precision p) const {
  if (p == prec_) return *this;
  DenseMatrix out(rows_, cols_, p);
  for (index_t r = 0; r < rows_; ++r)
    for (index_t c = 0; c < cols_; ++c) out.set(r, c, at(r, c));
  return out;
}

DenseMatrix DenseMatrix::transposed() const {
  DenseMatrix out(cols_, rows_, prec_);
  dispatch(prec_, [&]<class T>() { emap<T>(out) = emap<T>(*this).transpose(); });
  return out;
}

bool DenseMatrix::all_finite() const {
  return dispatch(prec_, [&]<class T>() -> bool {
    for (T v : buf<T>())
      if (!std::isfinite(static_cast<double>(v))) return false;
    return true;
  });
}

SymMatrix::SymMatrix(index_t dim, Precision prec) : dim_(dim), prec_(prec) {
  if (dim < 0) throw ShapeMismatch("negative matrix dimension");
  const std::size_t n = static_cast<std::size_t>(dim * (dim + 1) / 2);
  if (prec == Precision::kSingle) {
    buf_ = std::vector<float>(n, 0.0f);
  } else {
    buf_ = std::vector<double>(n, 0.0);
  }
}

SymMatrix SymMatrix::identity(index_t n, Precision prec) {
  SymMatrix m(n, prec);
  for (index_t i = 0; i < n; ++i) m.set(i, i, 1.0);
  return m;
}

SymMatrix SymMatrix::from_dense_lower(const DenseMatrix& m) {
  if (m.rows() != m.cols())
    throw ShapeMismatch("from_dense_lower: matrix is not square");
  SymMatrix s(m.rows(), m.precision());
  for (index_t i = 0; i < m.rows(); ++i)
    for (index_t j = 0; j <= i; ++j) s.set(i, j, m.at(i, j));
  return s;
}

SymMatrix SymMatrix::from_rows(
    std::initializer_list<std::initializer_list<double>> rows,
    Precision prec) {
  return from_dense_lower(DenseMatrix::from_rows(rows, prec));
}

index_t SymMatrix::packed_index(index_t i, index_t j) const {
  if (j > i) std::swap(i, j);
  return i * (i + 1) / 2 + j;
}

double SymMatrix::at(index_t i, index_t j) const {
  const std::size_t k = static_cast<std::size_t>(packed_index(i, j));
  return dispatch(prec_, [&]<class T>() -> double {
    return static_cast<double>(std::get<std::vector<T>>(buf_)[k]);
  });
}

void SymMatrix::set(index_t i, index_t j, double v) {
  const std::size_t k = static_cast<std::size_t>(packed_index(i, j));
  dispatch(prec_,
           [&]<class T>() { std::get<std::vector<T>>(buf_)[k] = static_cast<T>(v); });
}

DenseMatrix SymMatrix::to_dense() const {
  DenseMatrix m(dim_, dim_, prec_);
  for (index_t i = 0; i < dim_; ++i)
    for (index_t j = 0; j <= i; ++j) {
      const double v = at(i, j);
      m.set(i, j, v);
      m.set(j, i, v);
    }
  return m;
}

SymMatrix SymMatrix::to_precision(Precision p) const {
  if (p == prec_) return *this;
  SymMatrix out(dim_, p);
  for (index_t i = 0; i < dim_; ++i)
    for (index_t j = 0; j <= i; ++j) out.set(i, j, at(i, j));
  return out;
}

double SymMatrix::trace() const {
  double t = 0.0;
  for (index_t i = 0; i < dim_; ++i) t += at(i, i);
  return t;
}

bool SymMatrix::all_finite() const {
  return dispatch(prec_, [&]<class T>() -> bool {
    for (T v : std::get<std::vector<T>>(buf_))
      if (!std::isfinite(static_cast<double>(v))) return false;
    return true;
  });
}

namespace {

// Left-looking Cholesky in the matrix's own precision, so single-precision
// round-off behaves like single precision end to end.
template <class T>
DenseMatrix cholesky_impl(const SymMatrix& m, double jitter) {
  const index_t n = m.dim();
  DenseMatrix lower(n, n, m.precision());
  auto& l = lower.buf<T>();
  const auto idx = [n](index_t r, index_t c) {
    return static_cast<std::size_t>(r * n + c);
  };
  for (index_t j = 0; j < n; ++j) {
    T diag = static_cast<T>(m.at(j, j) + jitter);
    for (index_t k = 0; k < j; ++k) diag -= l[idx(j, k)] * l[idx(j, k)];
    if (!(diag > T(0))) {
      throw DecompositionFailure(
          static_cast<int>(j),
          "cholesky: non-positive pivot " + std::to_string(double(diag)) +
              " at index " + std::to_string(j));
    }
    const T dj = std::sqrt(diag);
    l[idx(j, j)] = dj;
    for (index_t i = j + 1; i < n; ++i) {
      T s = static_cast<T>(m.at(i, j));
      for (index_t k = 0; k < j; ++k) s -= l[idx(i, k)] * l[idx(j, k)];
      l[idx(i, j)] = s / dj;
    }
  }
  return lower;
}

}  // namespace

CholFactor cholesky(const SymMatrix& m, double jitter) {
  if (!std::isfinite(jitter)) throw NonFiniteValue("cholesky: jitter not finite");
  DenseMatrix lower = dispatch(m.precision(), [&]<class T>() {
    return cholesky_impl<T>(m, jitter);
  });
  return CholFactor{m.dim(), std::move(lower)};
}

DenseMatrix solve_psd(const CholFactor& f, const DenseMatrix& b) {
  if (f.dim != b.rows()) {
    throw ShapeMismatch("solve_psd: factor dim " + std::to_string(f.dim) +
                        " vs rhs rows " + std::to_string(b.rows()));
  }
  require_same_precision(f.lower.precision(), b.precision(), "solve_psd");
  DenseMatrix x = b;
  dispatch(b.precision(), [&]<class T>() {
    auto lm = emap<T>(f.lower);
    auto xm = emap<T>(x);
    lm.template triangularView<Eigen::Lower>().solveInPlace(xm);
    lm.transpose().template triangularView<Eigen::Upper>().solveInPlace(xm);
  });
  return x;
}

std::vector<double> sym_eigenvalues(const SymMatrix& m) {
  if (!m.all_finite()) throw NonFiniteValue("sym_eigenvalues: non-finite input");
  // Diagnostic path: always solved in double so condition numbers of badly
  // conditioned Grams are meaningful regardless of the storage precision.
  const DenseMatrix dense = m.to_dense().to_precision(Precision::kDouble);
  Eigen::Map<const EMat<double>> a(dense.buf<double>().data(), dense.rows(),
                                   dense.cols());
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solver(
      a, Eigen::EigenvaluesOnly);
  if (solver.info() != Eigen::Success) {
    throw ConvergenceFailure("sym_eigenvalues: QL/QR iteration did not converge");
  }
  const auto& ev = solver.eigenvalues();
  return std::vector<double>(ev.data(), ev.data() + ev.size());
}

double condition_number(const SymMatrix& m) {
  const std::vector<double> ev = sym_eigenvalues(m);
  if (ev.empty()) return 1.0;
  const double lo = ev.front();
  const double hi = ev.back();
  if (lo <= 0.0) return std::numeric_limits<double>::infinity();
  return hi / lo;
}

DenseMatrix matmul(const DenseMatrix& a, const DenseMatrix& b) {
  require_same_precision(a.precision(), b.precision(), "matmul");
  if (a.cols() != b.rows()) {
    throw ShapeMismatch("matmul: " + std::to_string(a.rows()) + "x" +
                        std::to_string(a.cols()) + " * " +
                        std::to_string(b.rows()) + "x" +
                        std::to_string(b.cols()));
  }
  DenseMatrix out(a.rows(), b.cols(), a.precision());
  dispatch(a.precision(), [&]<class T>() {
    emap<T>(out).noalias() = emap<T>(a) * emap<T>(b);
  });
  return out;
}

DenseMatrix add(const DenseMatrix& a, const DenseMatrix& b) {
  require_same_precision(a.precision(), b.precision(), "add");
  if (a.rows() != b.rows() || a.cols() != b.cols())
    throw ShapeMismatch("add: shape mismatch");
  DenseMatrix out(a.rows(), a.cols(), a.precision());
  dispatch(a.precision(),
           [&]<class T>() { emap<T>(out) = emap<T>(a) + emap<T>(b); });
  return out;
}

DenseMatrix scale(const DenseMatrix& a, double c) {
  DenseMatrix out(a.rows(), a.cols(), a.precision());
  dispatch(a.precision(), [&]<class T>() {
    emap<T>(out) = emap<T>(a) * static_cast<T>(c);
  });
  return out;
}

double frobenius_norm(const DenseMatrix& a) {
  return dispatch(a.precision(), [&]<class T>() -> double {
    return static_cast<double>(emap<T>(a).norm());
  });
}

}  // namespace gramnet
