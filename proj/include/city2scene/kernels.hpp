#pragma once

#include <span>
#include <vector>

#include "city2scene/tensor.hpp"

/// Data-parallel kernels behind the convolution and dense layers. Every kernel
/// assigns each output element to exactly one thread and accumulates in a
/// fixed order, so results do not depend on the OpenMP thread count.
namespace city2scene::kernels {

/// C[M,N] (+)= A[M,K] * B[K,N]
void gemm_nn(int m, int n, int k, const float* a, const float* b, float* c, bool accumulate);
/// C[M,N] (+)= A[M,K] * B[N,K]^T
void gemm_nt(int m, int n, int k, const float* a, const float* b, float* c, bool accumulate);
/// C[M,N] (+)= A[K,M]^T * B[K,N]
void gemm_tn(int m, int n, int k, const float* a, const float* b, float* c, bool accumulate);

struct ConvShape {
  int in_channels = 0;
  int out_channels = 0;
  int kernel = 3;
  int pad = 1;
};

/// Scratch reused across calls; one per layer.
struct ConvWorkspace {
  std::vector<float> cols;
  std::vector<float> out_cols;
};

/// Stride-1 convolution, weights [out][in][k][k], no bias.
Tensor conv2d_forward(const Tensor& x, std::span<const float> weights, const ConvShape& shape, ConvWorkspace& ws);

/// Accumulates into `dweights`; returns dL/dx when `want_dx`.
Tensor conv2d_backward(const Tensor& x, std::span<const float> weights, const Tensor& dy, const ConvShape& shape,
                       std::span<float> dweights, bool want_dx, ConvWorkspace& ws);

}  // namespace city2scene::kernels

/// Direct, single-threaded loops. Kept as the oracle for the parallel kernels
/// and as the baseline in the benchmark.
namespace city2scene::reference {

void gemm_nn(int m, int n, int k, const float* a, const float* b, float* c);

Tensor conv2d_forward(const Tensor& x, std::span<const float> weights, const kernels::ConvShape& shape);

Tensor conv2d_backward(const Tensor& x, std::span<const float> weights, const Tensor& dy,
                       const kernels::ConvShape& shape, std::span<float> dweights);

}  // namespace city2scene::reference
