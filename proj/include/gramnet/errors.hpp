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

#ifndef GRAMNET_ERRORS_HPP
#define GRAMNET_ERRORS_HPP

#include <cstddef>
#include <stdexcept>
#include <string>

namespace gramnet {

/// Base class of every error thrown by the library.
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// A Cholesky pivot was non-positive: the input is indefinite or too
/// ill-conditioned for the working precision. `pivot` is the failing index.
struct DecompositionFailure : Error {
  int pivot;
  DecompositionFailure(int pivot_index, const std::string& what)
      : Error(what), pivot(pivot_index) {}
};

/// Operand dimensions do not conform.
struct ShapeMismatch : Error {
  using Error::Error;
};

/// Binary operation on matrices with different floating-point precisions.
struct PrecisionMismatch : Error {
  using Error::Error;
};

/// Iterative eigensolver exceeded its iteration cap.
struct ConvergenceFailure : Error {
  using Error::Error;
};

/// A kernel required a strictly positive Gram diagonal entry and got <= 0.
struct NonPositiveDiagonal : Error {
  using Error::Error;
};

/// NaN or infinity where a finite value is required.
struct NonFiniteValue : Error {
  using Error::Error;
};

/// A gradient became non-finite during training; carries the parameter name.
struct NonFiniteGradient : Error {
  std::string parameter;
  NonFiniteGradient(std::string param, const std::string& what)
      : Error(what), parameter(std::move(param)) {}
};

/// Malformed file contents; `offset` is the byte position of the problem.
struct FormatError : Error {
  std::size_t offset;
  FormatError(std::size_t byte_offset, const std::string& what)
      : Error(what), offset(byte_offset) {}
};

/// File checksum does not match its payload.
struct ChecksumMismatch : Error {
  using Error::Error;
};

/// Filesystem-level failure.
struct IoError : Error {
  using Error::Error;
};

/// Bad run configuration (unknown key, bad value, missing path).
struct ConfigError : Error {
  using Error::Error;
};

}  // namespace gramnet

#endif  // GRAMNET_ERRORS_HPP
