#include <doctest.h>

#include <cmath>

#include "aolkit/rescale.hpp"
#include "aolkit/rng.hpp"
#include "test_support.hpp"

using aol::Tensor;

TEST_CASE("identity matrix keeps factors exactly 1") {
    const int n = 5;
    Tensor p({n, n});
    for (int i = 0; i < n; ++i) p[static_cast<std::int64_t>(i) * n + i] = 1.0;
    aol::MatrixRescale r = aol::rescale_matrix(p);
    for (int j = 0; j < n; ++j) CHECK(r.D[j] == 1.0);
    CHECK(aol::max_abs(aol::sub(r.W, p)) == 0.0);
}

TEST_CASE("all-ones 2x2 matrix") {
    // P^T P = [[2,2],[2,2]], row sums 4, so D = (1/2, 1/2).
    Tensor p({2, 2}, {1, 1, 1, 1});
    aol::MatrixRescale r = aol::rescale_matrix(p);
    CHECK(r.D[0] == doctest::Approx(0.5));
    CHECK(r.D[1] == doctest::Approx(0.5));
    for (std::int64_t i = 0; i < 4; ++i) CHECK(r.W[i] == doctest::Approx(0.5));
    // sigma(W) is exactly 1 here: W maps (1,1) to (1,1).
    CHECK(aoltest::spectral_norm_jacobi(r.W) == doctest::Approx(1.0));
}

TEST_CASE("zero column takes the zero branch") {
    Tensor p({3, 2}, {1, 0, 2, 0, 3, 0});
    aol::MatrixRescale r = aol::rescale_matrix(p);
    CHECK(r.D[1] == 0.0);
    CHECK(r.D[0] == doctest::Approx(1.0 / std::sqrt(14.0)));
    CHECK(r.W[1] == 0.0);
    CHECK(r.W[3] == 0.0);
    CHECK(r.W[5] == 0.0);
}

TEST_CASE("eps floor keeps zero columns differentiable") {
    Tensor p({3, 2}, {1, 0, 2, 0, 3, 0});
    aol::MatrixRescale r = aol::rescale_matrix(p, 1e-8);
    CHECK(r.D[1] == doctest::Approx(1e4));
}

TEST_CASE("rescaled matrix has spectral norm at most 1 (fuzz)") {
    aol::Rng rng(23);
    for (int trial = 0; trial < 20; ++trial) {
        int n = 2 + static_cast<int>(rng.uniform_int(8));
        int m = 2 + static_cast<int>(rng.uniform_int(8));
        Tensor p = aoltest::random_tensor({n, m}, rng, 2.0);
        aol::MatrixRescale r = aol::rescale_matrix(p);
        CHECK(aoltest::spectral_norm_jacobi(r.W) <= 1.0 + 1e-9);
    }
}

TEST_CASE("rescaling is tight for orthonormal columns") {
    // Scaled orthonormal columns: P = 3 * Q, Q^T Q = I. D = 1/3 and sigma(W) = 1.
    aol::Rng rng(29);
    Tensor g = aoltest::random_tensor({6, 3}, rng);
    // Gram-Schmidt
    for (int j = 0; j < 3; ++j) {
        for (int prev = 0; prev < j; ++prev) {
            double d = 0;
            for (int i = 0; i < 6; ++i)
                d += g[static_cast<std::int64_t>(i) * 3 + j] * g[static_cast<std::int64_t>(i) * 3 + prev];
            for (int i = 0; i < 6; ++i)
                g[static_cast<std::int64_t>(i) * 3 + j] -= d * g[static_cast<std::int64_t>(i) * 3 + prev];
        }
        double nrm = 0;
        for (int i = 0; i < 6; ++i) {
            double v = g[static_cast<std::int64_t>(i) * 3 + j];
            nrm += v * v;
        }
        nrm = std::sqrt(nrm);
        for (int i = 0; i < 6; ++i) g[static_cast<std::int64_t>(i) * 3 + j] /= nrm;
    }
    Tensor p = aol::scale(g, 3.0);
    aol::MatrixRescale r = aol::rescale_matrix(p);
    for (int j = 0; j < 3; ++j) CHECK(r.D[j] == doctest::Approx(1.0 / 3.0));
    CHECK(aoltest::spectral_norm_jacobi(r.W) == doctest::Approx(1.0));
}

TEST_CASE("rescale factors are scale-covariant") {
    // rescale(alpha P).W == rescale(P).W for alpha > 0.
    aol::Rng rng(31);
    Tensor p = aoltest::random_tensor({5, 4}, rng);
    Tensor w1 = aol::rescale_matrix(p).W;
    Tensor w2 = aol::rescale_matrix(aol::scale(p, 7.5)).W;
    CHECK(aol::max_abs(aol::sub(w1, w2)) < 1e-12);
}

TEST_CASE("matrix rescale backward matches finite differences") {
    aol::Rng rng(37);
    Tensor p = aoltest::random_tensor({4, 3}, rng);
    Tensor u = aoltest::random_tensor({4, 3}, rng);
    Tensor dp = aol::rescale_matrix_backward(p, u);
    auto f = [&](const Tensor& pp) { return aol::dot(aol::rescale_matrix(pp).W, u); };
    for (std::int64_t i = 0; i < p.numel(); ++i) {
        double fd = aoltest::central_difference(f, p, i);
        CHECK(aoltest::relative_error(dp[i], fd) < 1e-5);
    }
}

TEST_CASE("matrix rescale backward: zero column contributes zero gradient") {
    Tensor p({3, 2}, {1, 0, 2, 0, 3, 0});
    Tensor u({3, 2});
    u.fill(1.0);
    Tensor dp = aol::rescale_matrix_backward(p, u);
    CHECK(dp[1] == 0.0);
    CHECK(dp[3] == 0.0);
    CHECK(dp[5] == 0.0);
    CHECK(dp.all_finite());
}

// ---- kernel rescaling ----

TEST_CASE("delta kernel self-correlation and factors") {
    // 1x1 single-channel kernel [2]: gram = [4], d = 1/2.
    Tensor p({1, 1, 1, 1}, {2.0});
    aol::KernelRescale r = aol::rescale_kernel(p);
    REQUIRE(r.gram.shape() == std::vector<int>{1, 1, 1, 1});
    CHECK(r.gram[0] == doctest::Approx(4.0));
    CHECK(r.d[0] == doctest::Approx(0.5));
    CHECK(r.W[0] == doctest::Approx(1.0));
}

TEST_CASE("all-ones 2x2 kernel: hand-computed self-correlation") {
    // Single in/out channel, k=2, all ones. The self-correlation is the
    // triangle-shaped autocorrelation [[1,2,1],[2,4,2],[1,2,1]], sum 16,
    // so d = 1/4.
    Tensor p({2, 2, 1, 1}, {1, 1, 1, 1});
    aol::KernelRescale r = aol::rescale_kernel(p);
    REQUIRE(r.gram.shape() == std::vector<int>{3, 3, 1, 1});
    const double want[9] = {1, 2, 1, 2, 4, 2, 1, 2, 1};
    for (int i = 0; i < 9; ++i) CHECK(r.gram[i] == doctest::Approx(want[i]));
    CHECK(r.d[0] == doctest::Approx(0.25));
}

TEST_CASE("kernel self-correlation matches the direct quadruple loop") {
    // G[i,j,a,c] = sum_b sum over overlap of P[.,.,a,b] shifted against P[.,.,c,b].
    aol::Rng rng(41);
    const int k = 3, ci = 2, co = 3;
    Tensor p = aoltest::random_tensor({k, k, ci, co}, rng);
    aol::KernelRescale r = aol::rescale_kernel(p);
    REQUIRE(r.gram.shape() == std::vector<int>{2 * k - 1, 2 * k - 1, ci, ci});
    auto pat = [&](int i, int j, int a, int b) {
        return p[((static_cast<std::int64_t>(i) * k + j) * ci + a) * co + b];
    };
    for (int i = 0; i < 2 * k - 1; ++i)
        for (int j = 0; j < 2 * k - 1; ++j)
            for (int a = 0; a < ci; ++a)
                for (int c = 0; c < ci; ++c) {
                    const int u = i - (k - 1), v = j - (k - 1);
                    double s = 0.0;
                    for (int b = 0; b < co; ++b)
                        for (int pp = 0; pp < k; ++pp)
                            for (int qq = 0; qq < k; ++qq) {
                                const int pu = pp + u, qv = qq + v;
                                if (pu < 0 || pu >= k || qv < 0 || qv >= k) continue;
                                s += pat(pp, qq, a, b) * pat(pu, qv, c, b);
                            }
                    double got = r.gram[((static_cast<std::int64_t>(i) * (2 * k - 1) + j) * ci + a) * ci + c];
                    CHECK(got == doctest::Approx(s).epsilon(1e-10));
                }
}

TEST_CASE("kernel rescale backward matches finite differences") {
    aol::Rng rng(43);
    Tensor p = aoltest::random_tensor({2, 2, 2, 2}, rng);
    Tensor u = aoltest::random_tensor({2, 2, 2, 2}, rng);
    Tensor dp = aol::rescale_kernel_backward(p, u);
    auto f = [&](const Tensor& pp) { return aol::dot(aol::rescale_kernel(pp).W, u); };
    for (std::int64_t i = 0; i < p.numel(); ++i) {
        double fd = aoltest::central_difference(f, p, i);
        CHECK(aoltest::relative_error(dp[i], fd) < 1e-5);
    }
}

TEST_CASE("kernel rescale backward with eps floor matches finite differences") {
    aol::Rng rng(47);
    Tensor p = aoltest::random_tensor({3, 3, 2, 1}, rng, 0.3);
    Tensor u = aoltest::random_tensor({3, 3, 2, 1}, rng);
    const double eps = 1e-3;
    Tensor dp = aol::rescale_kernel_backward(p, u, eps);
    auto f = [&](const Tensor& pp) { return aol::dot(aol::rescale_kernel(pp, eps).W, u); };
    for (std::int64_t i = 0; i < p.numel(); ++i) {
        double fd = aoltest::central_difference(f, p, i);
        CHECK(aoltest::relative_error(dp[i], fd) < 1e-5);
    }
}
