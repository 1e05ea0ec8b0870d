// Shared generators and dense oracles for the test suites. Oracles here go
// through Eigen's dense inverses directly so they stay independent of the
// library's factorisation-based code paths.
#ifndef GRAMNET_TESTS_TEST_HELPERS_HPP
#define GRAMNET_TESTS_TEST_HELPERS_HPP

#include <doctest.h>

#include <Eigen/Dense>
#include <cmath>

#include "gramnet/kernels.hpp"
#include "gramnet/skr.hpp"
#include "gramnet/tensor.hpp"

namespace testutil {

using gramnet::DenseMatrix;
using gramnet::index_t;
using gramnet::KernelBlocks;
using gramnet::Precision;
using gramnet::RngState;
using gramnet::SymMatrix;

inline Eigen::MatrixXd to_eigen(const DenseMatrix& m) {
  Eigen::MatrixXd out(m.rows(), m.cols());
  for (index_t r = 0; r < m.rows(); ++r)
    for (index_t c = 0; c < m.cols(); ++c) out(r, c) = m.at(r, c);
  return out;
}

inline Eigen::MatrixXd to_eigen(const SymMatrix& m) {
  return to_eigen(m.to_dense());
}

inline DenseMatrix from_eigen(const Eigen::MatrixXd& m,
                              Precision prec = Precision::kDouble) {
  DenseMatrix out(m.rows(), m.cols(), prec);
  for (index_t r = 0; r < m.rows(); ++r)
    for (index_t c = 0; c < m.cols(); ++c) out.set(r, c, m(r, c));
  return out;
}

inline SymMatrix random_psd(RngState& rng, index_t n, double diag_boost = 0.1,
                            Precision prec = Precision::kDouble) {
  DenseMatrix a = rng.normal_matrix(n, n, Precision::kDouble);
  DenseMatrix g = gramnet::matmul(a, a.transposed());
  for (index_t i = 0; i < n; ++i) g.set(i, i, g.at(i, i) + diag_boost);
  return SymMatrix::from_dense_lower(g.to_precision(prec));
}

/// Consistent Gram blocks from an explicit feature matrix, so the triple is
/// PSD and mutually consistent by construction.
inline KernelBlocks random_blocks(RngState& rng, index_t p_i, index_t n_t,
                                  index_t features = 6) {
  DenseMatrix f =
      rng.normal_matrix(p_i + n_t, features, Precision::kDouble);
  const Eigen::MatrixXd fe = to_eigen(f);
  const Eigen::MatrixXd g = fe * fe.transpose() / double(features);
  KernelBlocks b;
  b.ii = SymMatrix::from_dense_lower(from_eigen(g.topLeftCorner(p_i, p_i)));
  b.ti = from_eigen(g.bottomLeftCorner(n_t, p_i));
  b.tt_diag = DenseMatrix(n_t, 1, Precision::kDouble);
  for (index_t r = 0; r < n_t; ++r)
    b.tt_diag.set(r, 0, g(p_i + r, p_i + r));
  return b;
}

inline double max_abs_diff(const DenseMatrix& a, const DenseMatrix& b) {
  REQUIRE(a.rows() == b.rows());
  REQUIRE(a.cols() == b.cols());
  double worst = 0.0;
  for (index_t r = 0; r < a.rows(); ++r)
    for (index_t c = 0; c < a.cols(); ++c)
      worst = std::max(worst, std::abs(a.at(r, c) - b.at(r, c)));
  return worst;
}

inline double rel_frobenius_diff(const DenseMatrix& a, const DenseMatrix& b) {
  const Eigen::MatrixXd d = to_eigen(a) - to_eigen(b);
  const double base = to_eigen(b).norm();
  return d.norm() / (base > 0 ? base : 1.0);
}

}  // namespace testutil

#endif  // GRAMNET_TESTS_TEST_HELPERS_HPP
