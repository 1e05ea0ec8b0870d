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

#ifndef GRAMNET_TENSOR_HPP
#define GRAMNET_TENSOR_HPP

#include <cstdint>
#include <initializer_list>
#include <variant>
#include <vector>

#include "gramnet/errors.hpp"

namespace gramnet {

using index_t = std::int64_t;

/// Floating-point mode of a matrix. Fixed at construction; binary operations
/// between matrices of different precisions throw PrecisionMismatch.
enum class Precision : std::uint8_t { kSingle, kDouble };

const char* precision_name(Precision p);

/// Dense row-major matrix whose scalar type is selected at runtime.
class DenseMatrix {
 public:
  DenseMatrix() = default;
  DenseMatrix(index_t rows, index_t cols, Precision prec);  // zero-filled

  static DenseMatrix identity(index_t n, Precision prec);
  static DenseMatrix constant(index_t rows, index_t cols, double value,
                              Precision prec);
  static DenseMatrix from_rows(
      std::initializer_list<std::initializer_list<double>> rows,
      Precision prec = Precision::kDouble);

  index_t rows() const { return rows_; }
  index_t cols() const { return cols_; }
  index_t size() const { return rows_ * cols_; }
  bool empty() const { return rows_ == 0 || cols_ == 0; }
  Precision precision() const { return prec_; }

  double at(index_t r, index_t c) const;
  void set(index_t r, index_t c, double v);

  template <class T>
  std::vector<T>& buf() {
    return std::get<std::vector<T>>(buf_);
  }
  template <class T>
  const std::vector<T>& buf() const {
    return std::get<std::vector<T>>(buf_);
  }

  DenseMatrix to_precision(Precision p) const;
  DenseMatrix transposed() const;
  bool all_finite() const;

 private:
  index_t rows_ = 0;
  index_t cols_ = 0;
  Precision prec_ = Precision::kDouble;
  std::variant<std::vector<float>, std::vector<double>> buf_ =
      std::vector<double>{};
};

/// Symmetric matrix with packed lower-triangular storage: elements (i,j) and
/// (j,i) are one stored value, so symmetry is exact by construction.
class SymMatrix {
 public:
  SymMatrix() = default;
  SymMatrix(index_t dim, Precision prec);  // zero-filled

  static SymMatrix identity(index_t n, Precision prec);
  /// Takes the lower triangle of `m` (entries above the diagonal ignored).
  static SymMatrix from_dense_lower(const DenseMatrix& m);
  static SymMatrix from_rows(
      std::initializer_list<std::initializer_list<double>> rows,
      Precision prec = Precision::kDouble);

  index_t dim() const { return dim_; }
  Precision precision() const { return prec_; }

  double at(index_t i, index_t j) const;
  void set(index_t i, index_t j, double v);

  DenseMatrix to_dense() const;
  SymMatrix to_precision(Precision p) const;
  double trace() const;
  bool all_finite() const;

 private:
  index_t packed_index(index_t i, index_t j) const;

  index_t dim_ = 0;
  Precision prec_ = Precision::kDouble;
  std::variant<std::vector<float>, std::vector<double>> buf_ =
      std::vector<double>{};
};

/// Lower-triangular Cholesky factor. Diagonal entries are strictly positive.
struct CholFactor {
  index_t dim = 0;
  DenseMatrix lower;
};

/// Factor (m + jitter*I) = L*L^T. Throws DecompositionFailure with the
/// failing pivot index if a pivot is <= 0 after jitter.
CholFactor cholesky(const SymMatrix& m, double jitter = 0.0);

/// Solve (L L^T) X = b by forward then backward substitution.
DenseMatrix solve_psd(const CholFactor& f, const DenseMatrix& b);

/// Full real spectrum of a symmetric matrix, ascending.
std::vector<double> sym_eigenvalues(const SymMatrix& m);

/// lambda_max / lambda_min; +infinity when lambda_min <= 0.
double condition_number(const SymMatrix& m);

// Dense helpers shared by the tape and the plain code paths.
DenseMatrix matmul(const DenseMatrix& a, const DenseMatrix& b);
DenseMatrix add(const DenseMatrix& a, const DenseMatrix& b);
DenseMatrix scale(const DenseMatrix& a, double c);
double frobenius_norm(const DenseMatrix& a);

}  // namespace gramnet

#endif  // GRAMNET_TENSOR_HPP
