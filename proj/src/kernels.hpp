#pragma once

#include "devid/common.hpp"

// Hot inner loops shared by the tensor primitives. The multi-accumulator
// dot breaks the FP dependency chain so the compiler can pipeline or SLP-
// vectorize without reassociating a single reduction.

namespace devid::kernels {

inline real dot(const real* __restrict a, const real* __restrict b, int n) {
  constexpr int W = 16; // lane array maps onto one or two vector registers
  real acc[W] = {};
  int i = 0;
  for (; i + W <= n; i += W)
    for (int j = 0; j < W; ++j) acc[j] += a[i + j] * b[i + j];
  real s = 0;
  for (int j = 0; j < W; ++j) s += acc[j];
  for (; i < n; ++i) s += a[i] * b[i];
  return s;
}

// y += alpha * x
inline void axpy(real* __restrict y, const real* __restrict x, real alpha, int n) {
  for (int i = 0; i < n; ++i) y[i] += alpha * x[i];
}

// y += alpha * x and z += alpha * w, fused to halve loop overhead in the
// convolution backward (dx and dw walk the same window).
inline void axpy2(real* __restrict y, const real* __restrict x, real* __restrict z,
                  const real* __restrict w, real alpha, int n) {
  for (int i = 0; i < n; ++i) {
    y[i] += alpha * x[i];
    z[i] += alpha * w[i];
  }
}

} // namespace devid::kernels
