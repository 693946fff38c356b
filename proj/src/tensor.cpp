#include "aolkit/tensor.hpp"

#include <cmath>
#include <sstream>

namespace aol {

bool Tensor::all_finite() const {
    for (double v : data_)
        if (!std::isfinite(v)) return false;
    return true;
}

std::string shape_to_string(const std::vector<int>& shape) {
    std::ostringstream os;
    os << "[";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << ",";
        os << shape[i];
    }
    os << "]";
    return os.str();
}

static void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (!a.same_shape(b))
        throw std::invalid_argument(std::string(op) + ": shape mismatch " +
                                    shape_to_string(a.shape()) + " vs " +
                                    shape_to_string(b.shape()));
}

Tensor add(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "add");
    Tensor out(a.shape());
    for (std::int64_t i = 0; i < a.numel(); ++i) out[i] = a[i] + b[i];
    return out;
}

Tensor sub(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "sub");
    Tensor out(a.shape());
    for (std::int64_t i = 0; i < a.numel(); ++i) out[i] = a[i] - b[i];
    return out;
}

Tensor scale(const Tensor& a, double alpha) {
    Tensor out(a.shape());
    for (std::int64_t i = 0; i < a.numel(); ++i) out[i] = a[i] * alpha;
    return out;
}

double dot(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "dot");
    double s = 0.0;
    for (std::int64_t i = 0; i < a.numel(); ++i) s += a[i] * b[i];
    return s;
}

double norm2(const Tensor& a) { return std::sqrt(dot(a, a)); }

double max_abs(const Tensor& a) {
    double m = 0.0;
    for (std::int64_t i = 0; i < a.numel(); ++i) m = std::max(m, std::fabs(a[i]));
    return m;
}

Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2)
        throw std::invalid_argument("matmul: expected 2-D tensors, got " +
                                    shape_to_string(a.shape()) + " and " +
                                    shape_to_string(b.shape()));
    if (a.dim(1) != b.dim(0))
        throw std::invalid_argument("matmul: inner dimensions disagree, " +
                                    shape_to_string(a.shape()) + " vs " +
                                    shape_to_string(b.shape()));
    const int n = a.dim(0), m = a.dim(1), p = b.dim(1);
    Tensor c({n, p});
    const double* ad = a.data();
    const double* bd = b.data();
    double* cd = c.data();
    for (int i = 0; i < n; ++i) {
        for (int k = 0; k < m; ++k) {
            const double aik = ad[static_cast<std::int64_t>(i) * m + k];
            if (aik == 0.0) continue;
            const double* brow = bd + static_cast<std::int64_t>(k) * p;
            double* crow = cd + static_cast<std::int64_t>(i) * p;
            for (int j = 0; j < p; ++j) crow[j] += aik * brow[j];
        }
    }
    return c;
}

Tensor transpose(const Tensor& a) {
    if (a.rank() != 2) throw std::invalid_argument("transpose: expected 2-D tensor");
    const int n = a.dim(0), m = a.dim(1);
    Tensor t({m, n});
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < m; ++j)
            t[static_cast<std::int64_t>(j) * n + i] = a[static_cast<std::int64_t>(i) * m + j];
    return t;
}

Padding padding_from_string(const std::string& s) {
    if (s == "same_zero") return Padding::SameZero;
    if (s == "valid") return Padding::Valid;
    if (s == "maximal") return Padding::Maximal;
    throw std::invalid_argument("unknown padding mode: " + s);
}

std::string padding_to_string(Padding p) {
    switch (p) {
        case Padding::SameZero: return "same_zero";
        case Padding::Valid: return "valid";
        case Padding::Maximal: return "maximal";
    }
    return "?";
}

int pad_before(const ConvGeometry& g) {
    switch (g.padding) {
        case Padding::SameZero: return (g.kernel - 1) / 2;
        case Padding::Valid: return 0;
        case Padding::Maximal: return g.kernel - 1;
    }
    return 0;
}

int pad_after(const ConvGeometry& g) {
    switch (g.padding) {
        case Padding::SameZero: return g.kernel - 1 - (g.kernel - 1) / 2;
        case Padding::Valid: return 0;
        case Padding::Maximal: return g.kernel - 1;
    }
    return 0;
}

int conv_output_extent(int n, const ConvGeometry& g) {
    const int padded = n + pad_before(g) + pad_after(g);
    if (padded < g.kernel)
        throw std::invalid_argument("conv2d: padded extent " + std::to_string(padded) +
                                    " smaller than kernel " + std::to_string(g.kernel));
    return (padded - g.kernel) / g.stride + 1;
}

static void check_conv_args(const Tensor& x, const Tensor& kernel, const ConvGeometry& g) {
    if (x.rank() != 3)
        throw std::invalid_argument("conv2d: input must be [h,w,c], got " +
                                    shape_to_string(x.shape()));
    if (kernel.rank() != 4)
        throw std::invalid_argument("conv2d: kernel must be [k,k,c_in,c_out], got " +
                                    shape_to_string(kernel.shape()));
    if (kernel.dim(0) != g.kernel || kernel.dim(1) != g.kernel)
        throw std::invalid_argument("conv2d: kernel tensor disagrees with geometry kernel size");
    if (x.dim(2) != kernel.dim(2))
        throw std::invalid_argument("conv2d: channel mismatch, input has " +
                                    std::to_string(x.dim(2)) + " channels, kernel expects " +
                                    std::to_string(kernel.dim(2)));
    if (g.stride < 1) throw std::invalid_argument("conv2d: stride must be positive");
}

Tensor conv2d(const Tensor& x, const Tensor& kernel, const ConvGeometry& g) {
    check_conv_args(x, kernel, g);
    const int h = x.dim(0), w = x.dim(1), ci = x.dim(2), co = kernel.dim(3);
    const int k = g.kernel, s = g.stride, pb = pad_before(g);
    const int oh = conv_output_extent(h, g), ow = conv_output_extent(w, g);

    Tensor out({oh, ow, co});
    const double* xd = x.data();
    const double* kd = kernel.data();
    double* od = out.data();

    for (int i = 0; i < oh; ++i) {
        for (int j = 0; j < ow; ++j) {
            double* orow = od + (static_cast<std::int64_t>(i) * ow + j) * co;
            for (int p = 0; p < k; ++p) {
                const int u = i * s + p - pb;
                if (u < 0 || u >= h) continue;
                for (int q = 0; q < k; ++q) {
                    const int v = j * s + q - pb;
                    if (v < 0 || v >= w) continue;
                    const double* xrow = xd + (static_cast<std::int64_t>(u) * w + v) * ci;
                    const double* krow = kd + (static_cast<std::int64_t>(p) * k + q) * ci * co;
                    for (int a = 0; a < ci; ++a) {
                        const double xv = xrow[a];
                        if (xv == 0.0) continue;
                        const double* kk = krow + static_cast<std::int64_t>(a) * co;
                        for (int b = 0; b < co; ++b) orow[b] += xv * kk[b];
                    }
                }
            }
        }
    }
    return out;
}

Tensor conv2d_grad_input(const Tensor& grad_out, const Tensor& kernel,
                         const ConvGeometry& g, int in_h, int in_w) {
    if (grad_out.rank() != 3 || kernel.rank() != 4)
        throw std::invalid_argument("conv2d_grad_input: rank mismatch");
    const int oh = grad_out.dim(0), ow = grad_out.dim(1), co = grad_out.dim(2);
    const int ci = kernel.dim(2);
    const int k = g.kernel, s = g.stride, pb = pad_before(g);

    Tensor dx({in_h, in_w, ci});
    const double* gd = grad_out.data();
    const double* kd = kernel.data();
    double* xd = dx.data();

    for (int i = 0; i < oh; ++i) {
        for (int j = 0; j < ow; ++j) {
            const double* grow = gd + (static_cast<std::int64_t>(i) * ow + j) * co;
            for (int p = 0; p < k; ++p) {
                const int u = i * s + p - pb;
                if (u < 0 || u >= in_h) continue;
                for (int q = 0; q < k; ++q) {
                    const int v = j * s + q - pb;
                    if (v < 0 || v >= in_w) continue;
                    double* xrow = xd + (static_cast<std::int64_t>(u) * in_w + v) * ci;
                    const double* krow = kd + (static_cast<std::int64_t>(p) * k + q) * ci * co;
                    for (int a = 0; a < ci; ++a) {
                        const double* kk = krow + static_cast<std::int64_t>(a) * co;
                        double acc = 0.0;
                        for (int b = 0; b < co; ++b) acc += grow[b] * kk[b];
                        xrow[a] += acc;
                    }
                }
            }
        }
    }
    return dx;
}

Tensor conv2d_grad_kernel(const Tensor& grad_out, const Tensor& x, const ConvGeometry& g) {
    if (grad_out.rank() != 3 || x.rank() != 3)
        throw std::invalid_argument("conv2d_grad_kernel: rank mismatch");
    const int oh = grad_out.dim(0), ow = grad_out.dim(1), co = grad_out.dim(2);
    const int h = x.dim(0), w = x.dim(1), ci = x.dim(2);
    const int k = g.kernel, s = g.stride, pb = pad_before(g);

    Tensor dk({k, k, ci, co});
    const double* gd = grad_out.data();
    const double* xd = x.data();
    double* kd = dk.data();

    for (int i = 0; i < oh; ++i) {
        for (int j = 0; j < ow; ++j) {
            const double* grow = gd + (static_cast<std::int64_t>(i) * ow + j) * co;
            for (int p = 0; p < k; ++p) {
                const int u = i * s + p - pb;
                if (u < 0 || u >= h) continue;
                for (int q = 0; q < k; ++q) {
                    const int v = j * s + q - pb;
                    if (v < 0 || v >= w) continue;
                    const double* xrow = xd + (static_cast<std::int64_t>(u) * w + v) * ci;
                    double* krow = kd + (static_cast<std::int64_t>(p) * k + q) * ci * co;
                    for (int a = 0; a < ci; ++a) {
                        const double xv = xrow[a];
                        if (xv == 0.0) continue;
                        double* kk = krow + static_cast<std::int64_t>(a) * co;
                        for (int b = 0; b < co; ++b) kk[b] += xv * grow[b];
                    }
                }
            }
        }
    }
    return dk;
}

}  // namespace aol
