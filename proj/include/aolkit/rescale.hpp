#pragma once

#include "aolkit/tensor.hpp"

namespace aol {

/// Column rescaling of a parameter matrix P (n x m):
/// D_i = (sum_j |P^T P|_ij)^(-1/2), or 0 for an all-zero row sum.
/// The effective weight W = P diag(D) has spectral norm at most 1.
struct MatrixRescale {
    Tensor D;  ///< [m] diagonal factors
    Tensor W;  ///< [n,m] effective weight
};

/// Per-input-channel rescaling of a convolution kernel P [k,k,c_in,c_out]:
/// d_c = (sum_{i,j} sum_a |G|_{i,j,a,c})^(-1/2) with G the kernel
/// self-correlation over output channels. W[.,.,c,.] = d_c * P[.,.,c,.].
struct KernelRescale {
    Tensor d;     ///< [c_in] per-channel factors
    Tensor W;     ///< [k,k,c_in,c_out] effective kernel
    Tensor gram;  ///< [2k-1, 2k-1, c_in, c_in] kernel self-correlation
};

/// `eps` is an optional floor on the absolute row sums before the inverse
/// square root, for callers that want gradient flow through near-zero
/// columns. Off (0.0) by default; the exact-zero branch yields D_i = 0.
MatrixRescale rescale_matrix(const Tensor& P, double eps = 0.0);

KernelRescale rescale_kernel(const Tensor& P, double eps = 0.0);

/// Reverse-mode gradients: map dL/dW back to dL/dP, including the
/// dependence of the rescale factors on P. The zero branch contributes
/// zero gradient.
Tensor rescale_matrix_backward(const Tensor& P, const Tensor& grad_W, double eps = 0.0);

Tensor rescale_kernel_backward(const Tensor& P, const Tensor& grad_W, double eps = 0.0);

}  // namespace aol
