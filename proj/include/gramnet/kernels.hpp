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

#ifndef GRAMNET_KERNELS_HPP
#define GRAMNET_KERNELS_HPP

#include "gramnet/autodiff.hpp"
#include "gramnet/tensor.hpp"

namespace gramnet {

/// Kernel nonlinearity operating purely on dot-product (Gram) information.
enum class KernelKind : std::uint8_t {
  kSqExp,               // exp(-(G_aa + G_bb - 2 G_ab) / (2 l^2))
  kArccos1,             // order-1 arccosine kernel
  kNormalisedGaussian,  // exp(rho - 1), unit diagonal
};

struct KernelSpec {
  KernelKind kind = KernelKind::kSqExp;
  double lengthscale = 1.0;  // > 0; used by kSqExp only
};

KernelKind kernel_kind_from_name(const std::string& name);
const char* kernel_kind_name(KernelKind k);

/// The (inducing, train/test, tt-diagonal) block triple carried through the
/// layer stack: ii is P_i x P_i, ti is (P_t*S) x P_i, tt_diag is (P_t*S) x 1.
struct KernelBlocks {
  SymMatrix ii;
  DenseMatrix ti;
  DenseMatrix tt_diag;
};

/// Same triple as tape nodes.
struct BlocksVar {
  Var ii;
  Var ti;
  Var tt_diag;
};

/// Apply the kernel nonlinearity elementwise over Gram entries.
/// Throws NonPositiveDiagonal when a required diagonal entry is <= 0.
BlocksVar apply_kernel(Tape& tape, const KernelSpec& spec,
                       const BlocksVar& g);

/// Divide all blocks by the mean of the inducing-block diagonal so the ii
/// diagonal mean becomes exactly 1.
BlocksVar batch_kernel_normalise(Tape& tape, const BlocksVar& g);

/// Blockwise alpha*after + (1-alpha)*before; alpha is a 1x1 node in [0,1].
BlocksVar skip_combine(Tape& tape, const BlocksVar& before,
                       const BlocksVar& after, Var alpha);

// Plain-value entry points (evaluated on a scratch tape) for callers that
// hold materialised blocks rather than tape nodes.
KernelBlocks apply_kernel(const KernelSpec& spec, const KernelBlocks& g);
KernelBlocks batch_kernel_normalise(const KernelBlocks& g);
KernelBlocks skip_combine(const KernelBlocks& before, const KernelBlocks& after,
                          double alpha);

}  // namespace gramnet

#endif  // GRAMNET_KERNELS_HPP
