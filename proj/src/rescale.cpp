#include "aolkit/rescale.hpp"

#include <cmath>

namespace aol {

namespace {

double sign_of(double v) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); }

/// Factor from an absolute row sum; `eps` floors the sum when positive.
double factor_from_sum(double s, double eps) {
    const double se = std::max(s, eps);
    return se > 0.0 ? 1.0 / std::sqrt(se) : 0.0;
}

/// d(factor)/d(sum); zero on the clamped/zero branch.
double factor_derivative(double s, double eps) {
    if (s <= eps || s <= 0.0) return 0.0;
    return -0.5 / (s * std::sqrt(s));
}

void check_matrix(const Tensor& P) {
    if (P.rank() != 2)
        throw std::invalid_argument("rescale_matrix: expected 2-D parameter matrix, got " +
                                    shape_to_string(P.shape()));
}

void check_kernel(const Tensor& P) {
    if (P.rank() != 4 || P.dim(0) != P.dim(1))
        throw std::invalid_argument("rescale_kernel: expected [k,k,c_in,c_out] kernel, got " +
                                    shape_to_string(P.shape()));
}

/// Kernel self-correlation over output channels, spatial support (2k-1)^2:
/// gram[i,j,a,c] = sum_b (P^(a,b) corr P^(c,b))_{i-k+1, j-k+1}.
/// Computed as one batched convolution with the input channel axis taking
/// the role of the batch axis.
Tensor kernel_self_correlation(const Tensor& P) {
    const int k = P.dim(0), ci = P.dim(2), co = P.dim(3);
    const int m = 2 * k - 1;

    // Kernel with swapped channel axes: K[p,q,b,c] = P[p,q,c,b].
    Tensor K({k, k, co, ci});
    for (int p = 0; p < k; ++p)
        for (int q = 0; q < k; ++q)
            for (int c = 0; c < ci; ++c)
                for (int b = 0; b < co; ++b)
                    K[((static_cast<std::int64_t>(p) * k + q) * co + b) * ci + c] =
                        P[((static_cast<std::int64_t>(p) * k + q) * ci + c) * co + b];

    ConvGeometry geom;
    geom.kernel = k;
    geom.stride = 1;
    geom.padding = Padding::Maximal;
    geom.in_channels = co;
    geom.out_channels = ci;

    Tensor gram({m, m, ci, ci});
    Tensor slice({k, k, co});
    for (int c = 0; c < ci; ++c) {
        for (int p = 0; p < k; ++p)
            for (int q = 0; q < k; ++q)
                for (int b = 0; b < co; ++b)
                    slice[(static_cast<std::int64_t>(p) * k + q) * co + b] =
                        P[((static_cast<std::int64_t>(p) * k + q) * ci + c) * co + b];
        const Tensor out = conv2d(slice, K, geom);  // [m,m,ci], out[i,j,a] = G[i,j,a,c]
        for (int i = 0; i < m; ++i)
            for (int j = 0; j < m; ++j)
                for (int a = 0; a < ci; ++a)
                    gram[((static_cast<std::int64_t>(i) * m + j) * ci + a) * ci + c] =
                        out[(static_cast<std::int64_t>(i) * m + j) * ci + a];
    }
    return gram;
}

}  // namespace

MatrixRescale rescale_matrix(const Tensor& P, double eps) {
    check_matrix(P);
    const int n = P.dim(0), m = P.dim(1);
    const Tensor G = matmul(transpose(P), P);  // [m,m]

    MatrixRescale r;
    r.D = Tensor({m});
    for (int i = 0; i < m; ++i) {
        double s = 0.0;
        for (int j = 0; j < m; ++j) s += std::fabs(G[static_cast<std::int64_t>(i) * m + j]);
        r.D[i] = factor_from_sum(s, eps);
    }
    r.W = Tensor({n, m});
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < m; ++j)
            r.W[static_cast<std::int64_t>(i) * m + j] =
                P[static_cast<std::int64_t>(i) * m + j] * r.D[j];
    return r;
}

Tensor rescale_matrix_backward(const Tensor& P, const Tensor& grad_W, double eps) {
    check_matrix(P);
    if (!grad_W.same_shape(P))
        throw std::invalid_argument("rescale_matrix_backward: gradient shape mismatch");
    const int n = P.dim(0), m = P.dim(1);
    const Tensor G = matmul(transpose(P), P);

    Tensor S({m, m});  // sign(P^T P), subgradient 0 at zero entries
    Tensor D({m});
    Tensor dfac({m});
    for (int i = 0; i < m; ++i) {
        double s = 0.0;
        for (int j = 0; j < m; ++j) {
            const double g = G[static_cast<std::int64_t>(i) * m + j];
            S[static_cast<std::int64_t>(i) * m + j] = sign_of(g);
            s += std::fabs(g);
        }
        D[i] = factor_from_sum(s, eps);
        dfac[i] = factor_derivative(s, eps);
    }

    // h_j = dL/dD_j * dD_j/ds_j with dL/dD_j = sum_n dW[n,j] P[n,j].
    Tensor h({m});
    for (int j = 0; j < m; ++j) {
        double g = 0.0;
        for (int i = 0; i < n; ++i)
            g += grad_W[static_cast<std::int64_t>(i) * m + j] *
                 P[static_cast<std::int64_t>(i) * m + j];
        h[j] = g * dfac[j];
    }

    // dP = dW diag(D) + (P S) diag(h) + P diag(h) S.
    Tensor dP({n, m});
    const Tensor PS = matmul(P, S);
    Tensor Ph({n, m});
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < m; ++j)
            Ph[static_cast<std::int64_t>(i) * m + j] =
                P[static_cast<std::int64_t>(i) * m + j] * h[j];
    const Tensor PhS = matmul(Ph, S);
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < m; ++j) {
            const std::int64_t idx = static_cast<std::int64_t>(i) * m + j;
            dP[idx] = grad_W[idx] * D[j] + PS[idx] * h[j] + PhS[idx];
        }
    return dP;
}

KernelRescale rescale_kernel(const Tensor& P, double eps) {
    check_kernel(P);
    const int k = P.dim(0), ci = P.dim(2), co = P.dim(3);
    const int m = 2 * k - 1;

    KernelRescale r;
    r.gram = kernel_self_correlation(P);
    r.d = Tensor({ci});
    for (int c = 0; c < ci; ++c) {
        double s = 0.0;
        for (int i = 0; i < m; ++i)
            for (int j = 0; j < m; ++j)
                for (int a = 0; a < ci; ++a)
                    s += std::fabs(
                        r.gram[((static_cast<std::int64_t>(i) * m + j) * ci + a) * ci + c]);
        r.d[c] = factor_from_sum(s, eps);
    }
    r.W = Tensor({k, k, ci, co});
    for (int p = 0; p < k; ++p)
        for (int q = 0; q < k; ++q)
            for (int c = 0; c < ci; ++c) {
                const double dc = r.d[c];
                for (int b = 0; b < co; ++b) {
                    const std::int64_t idx =
                        ((static_cast<std::int64_t>(p) * k + q) * ci + c) * co + b;
                    r.W[idx] = dc * P[idx];
                }
            }
    return r;
}

Tensor rescale_kernel_backward(const Tensor& P, const Tensor& grad_W, double eps) {
    check_kernel(P);
    if (!grad_W.same_shape(P))
        throw std::invalid_argument("rescale_kernel_backward: gradient shape mismatch");
    const int k = P.dim(0), ci = P.dim(2), co = P.dim(3);
    const int m = 2 * k - 1;

    const Tensor gram = kernel_self_correlation(P);
    Tensor d({ci}), dfac({ci});
    for (int c = 0; c < ci; ++c) {
        double s = 0.0;
        for (int i = 0; i < m; ++i)
            for (int j = 0; j < m; ++j)
                for (int a = 0; a < ci; ++a)
                    s += std::fabs(
                        gram[((static_cast<std::int64_t>(i) * m + j) * ci + a) * ci + c]);
        d[c] = factor_from_sum(s, eps);
        dfac[c] = factor_derivative(s, eps);
    }

    // h_c = (sum_{p,q,b} dW[p,q,c,b] P[p,q,c,b]) * dfac_c.
    Tensor h({ci});
    for (int c = 0; c < ci; ++c) {
        double g = 0.0;
        for (int p = 0; p < k; ++p)
            for (int q = 0; q < k; ++q)
                for (int b = 0; b < co; ++b) {
                    const std::int64_t idx =
                        ((static_cast<std::int64_t>(p) * k + q) * ci + c) * co + b;
                    g += grad_W[idx] * P[idx];
                }
        h[c] = g * dfac[c];
    }

    auto Pat = [&](int p, int q, int a, int b) -> double {
        if (p < 0 || p >= k || q < 0 || q >= k) return 0.0;
        return P[((static_cast<std::int64_t>(p) * k + q) * ci + a) * co + b];
    };
    auto Sat = [&](int i, int j, int a, int c) -> double {
        return sign_of(gram[((static_cast<std::int64_t>(i) * m + j) * ci + a) * ci + c]);
    };

    Tensor dP({k, k, ci, co});
    for (int p = 0; p < k; ++p)
        for (int q = 0; q < k; ++q)
            for (int e = 0; e < ci; ++e)
                for (int b = 0; b < co; ++b) {
                    const std::int64_t idx =
                        ((static_cast<std::int64_t>(p) * k + q) * ci + e) * co + b;
                    double acc = d[e] * grad_W[idx];
                    for (int i = 0; i < m; ++i) {
                        const int u = i - (k - 1);
                        for (int j = 0; j < m; ++j) {
                            const int v = j - (k - 1);
                            for (int c = 0; c < ci; ++c)
                                acc += h[c] * Sat(i, j, e, c) * Pat(p + u, q + v, c, b);
                            for (int a = 0; a < ci; ++a)
                                acc += h[e] * Sat(i, j, a, e) * Pat(p - u, q - v, a, b);
                        }
                    }
                    dP[idx] = acc;
                }
    return dP;
}

}  // namespace aol
