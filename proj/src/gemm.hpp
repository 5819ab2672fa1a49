#pragma once

#include <cstddef>

#include "hvgg/tensor.hpp"

namespace hvgg::detail {

// Row-major C[m,n] (+)= op(A)[m,k] * op(B)[k,n]. With trans_a, A is stored as
// [k,m]; with trans_b, B is stored as [n,k].
void gemm(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k, const Real* a,
          const Real* b, Real* c, bool accumulate);

}  // namespace hvgg::detail
