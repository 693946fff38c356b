#include "aolkit/layers.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "aolkit/rng.hpp"

namespace aol {

namespace {

std::int64_t numel_of(const Shape& s) {
    std::int64_t n = 1;
    for (int d : s) n *= d;
    return n;
}

ConvGeometry conv_geometry(const LayerSpec& spec, const Shape& in) {
    ConvGeometry g;
    g.kernel = spec.kernel;
    g.stride = spec.stride;
    g.padding = spec.padding;
    g.in_channels = in[2];
    g.out_channels = spec.out_channels;
    return g;
}

/// Orthonormal columns of an n x m Gaussian draw, n >= m.
/// Two Gram-Schmidt passes keep the columns orthonormal to ~1e-14.
Tensor orthonormal_columns(int n, int m, Rng& rng) {
    if (n < m) throw std::invalid_argument("orthonormal_columns: need n >= m");
    Tensor Q({n, m});
    for (std::int64_t i = 0; i < Q.numel(); ++i) Q[i] = rng.gaussian();
    for (int pass = 0; pass < 2; ++pass) {
        for (int j = 0; j < m; ++j) {
            for (int i = 0; i < j; ++i) {
                double proj = 0.0;
                for (int r = 0; r < n; ++r)
                    proj += Q[static_cast<std::int64_t>(r) * m + i] *
                            Q[static_cast<std::int64_t>(r) * m + j];
                for (int r = 0; r < n; ++r)
                    Q[static_cast<std::int64_t>(r) * m + j] -=
                        proj * Q[static_cast<std::int64_t>(r) * m + i];
            }
            double nrm = 0.0;
            for (int r = 0; r < n; ++r) {
                const double v = Q[static_cast<std::int64_t>(r) * m + j];
                nrm += v * v;
            }
            nrm = std::sqrt(nrm);
            if (nrm == 0.0) throw std::runtime_error("orthonormal_columns: degenerate draw");
            for (int r = 0; r < n; ++r) Q[static_cast<std::int64_t>(r) * m + j] /= nrm;
        }
    }
    return Q;
}

bool conv_preserves_size(const LayerSpec& spec, const Shape& in) {
    return in[2] == spec.out_channels && spec.stride == 1 && spec.kernel % 2 == 1 &&
           spec.padding == Padding::SameZero;
}

int batch_of(const Tensor& x, const Shape& in_shape, const char* op) {
    const auto& s = x.shape();
    if (static_cast<int>(s.size()) != static_cast<int>(in_shape.size()) + 1 ||
        !std::equal(in_shape.begin(), in_shape.end(), s.begin() + 1))
        throw std::invalid_argument(std::string(op) + ": input shape " + shape_to_string(s) +
                                    " does not match batched layer input " +
                                    shape_to_string(in_shape));
    return s[0];
}

Tensor example_slice(const Tensor& x, int n, const Shape& in_shape) {
    const std::int64_t sz = numel_of(in_shape);
    Tensor e(in_shape);
    const double* src = x.data() + static_cast<std::int64_t>(n) * sz;
    std::copy(src, src + sz, e.data());
    return e;
}

void write_slice(Tensor& dst, int n, const Tensor& e) {
    const std::int64_t sz = e.numel();
    std::copy(e.data(), e.data() + sz, dst.data() + static_cast<std::int64_t>(n) * sz);
}

}  // namespace

std::string layer_kind_to_string(LayerKind k) {
    switch (k) {
        case LayerKind::AolConv: return "aol_conv";
        case LayerKind::AolFc: return "aol_fc";
        case LayerKind::MaxMin: return "maxmin";
        case LayerKind::ConcatPool: return "concat_pool";
        case LayerKind::FirstChannels: return "first_channels";
        case LayerKind::Flatten: return "flatten";
    }
    return "?";
}

Shape layer_output_shape(const LayerSpec& spec, const Shape& in) {
    switch (spec.kind) {
        case LayerKind::AolConv: {
            if (in.size() != 3)
                throw std::invalid_argument("aol_conv expects [h,w,c] input, got " +
                                            shape_to_string(in));
            if (spec.out_channels <= 0 || spec.kernel <= 0 || spec.stride <= 0)
                throw std::invalid_argument("aol_conv: kernel, stride and out_channels "
                                            "must be positive");
            const ConvGeometry g = conv_geometry(spec, in);
            return {conv_output_extent(in[0], g), conv_output_extent(in[1], g),
                    spec.out_channels};
        }
        case LayerKind::AolFc: {
            if (in.size() != 1)
                throw std::invalid_argument("aol_fc expects flat input, got " +
                                            shape_to_string(in));
            if (spec.out_dim <= 0) throw std::invalid_argument("aol_fc: out_dim must be positive");
            return {spec.out_dim};
        }
        case LayerKind::MaxMin: {
            if (in.empty() || in.back() % 2 != 0)
                throw std::invalid_argument("maxmin requires an even channel count, got " +
                                            shape_to_string(in));
            return in;
        }
        case LayerKind::ConcatPool: {
            if (in.size() != 3)
                throw std::invalid_argument("concat_pool expects [h,w,c] input, got " +
                                            shape_to_string(in));
            if (spec.patch <= 0 || in[0] % spec.patch != 0 || in[1] % spec.patch != 0)
                throw std::invalid_argument("concat_pool: spatial size " + shape_to_string(in) +
                                            " not divisible by patch " +
                                            std::to_string(spec.patch));
            return {in[0] / spec.patch, in[1] / spec.patch, spec.patch * spec.patch * in[2]};
        }
        case LayerKind::FirstChannels: {
            if (in.empty() || spec.keep <= 0 || spec.keep > in.back())
                throw std::invalid_argument("first_channels: cannot keep " +
                                            std::to_string(spec.keep) + " of " +
                                            shape_to_string(in));
            Shape out = in;
            out.back() = spec.keep;
            return out;
        }
        case LayerKind::Flatten:
            if (in.empty()) throw std::invalid_argument("flatten: empty input shape");
            return {static_cast<int>(numel_of(in))};
    }
    throw std::invalid_argument("unknown layer kind");
}

std::vector<Shape> infer_shapes(const ModelSpec& spec) {
    if (spec.layers.empty()) throw std::invalid_argument("model spec has no layers");
    if (spec.input_shape.empty()) throw std::invalid_argument("model spec has no input shape");
    std::vector<Shape> shapes;
    shapes.reserve(spec.layers.size());
    Shape cur = spec.input_shape;
    for (std::size_t i = 0; i < spec.layers.size(); ++i) {
        try {
            cur = layer_output_shape(spec.layers[i], cur);
        } catch (const std::invalid_argument& e) {
            throw std::invalid_argument("layer " + std::to_string(i) + " (" +
                                        layer_kind_to_string(spec.layers[i].kind) +
                                        "): " + e.what());
        }
        shapes.push_back(cur);
    }
    return shapes;
}

Shape output_shape(const ModelSpec& spec) { return infer_shapes(spec).back(); }

Tensor init_identity(const LayerSpec& spec, const Shape& in_shape) {
    if (spec.kind == LayerKind::AolFc) {
        const int in = in_shape.at(0);
        if (in != spec.out_dim)
            throw std::invalid_argument("init_identity: fc layer changes size " +
                                        std::to_string(in) + " -> " +
                                        std::to_string(spec.out_dim));
        Tensor P({in, in});
        for (int i = 0; i < in; ++i) P[static_cast<std::int64_t>(i) * in + i] = 1.0;
        return P;
    }
    if (spec.kind == LayerKind::AolConv) {
        const int ci = in_shape.at(2);
        if (ci != spec.out_channels || spec.kernel % 2 == 0 || spec.stride != 1)
            throw std::invalid_argument("init_identity: conv layer is not size-preserving");
        const int k = spec.kernel, c0 = k / 2;
        Tensor P({k, k, ci, ci});
        for (int a = 0; a < ci; ++a)
            P[((static_cast<std::int64_t>(c0) * k + c0) * ci + a) * ci + a] = 1.0;
        return P;
    }
    throw std::invalid_argument("init_identity: layer has no parameters");
}

Tensor init_orthogonal(const LayerSpec& spec, const Shape& in_shape, std::uint64_t seed) {
    Rng rng(seed);
    if (spec.kind == LayerKind::AolFc) {
        const int in = in_shape.at(0), out = spec.out_dim;
        if (in >= out) return orthonormal_columns(in, out, rng);
        return transpose(orthonormal_columns(out, in, rng));
    }
    if (spec.kind == LayerKind::AolConv) {
        // Single-tap kernel holding an orthogonal channel map; the Jacobian
        // then acts pointwise, so the rescale factors start at 1 whenever
        // the channel count does not shrink.
        const int ci = in_shape.at(2), co = spec.out_channels, k = spec.kernel;
        const int tap = k % 2 == 1 ? k / 2 : 0;
        Tensor M =
            ci <= co ? transpose(orthonormal_columns(co, ci, rng)) : orthonormal_columns(ci, co, rng);
        Tensor P({k, k, ci, co});
        for (int a = 0; a < ci; ++a)
            for (int b = 0; b < co; ++b)
                P[((static_cast<std::int64_t>(tap) * k + tap) * ci + a) * co + b] =
                    M[static_cast<std::int64_t>(a) * co + b];
        return P;
    }
    throw std::invalid_argument("init_orthogonal: layer has no parameters");
}

Model build_model(const ModelSpec& spec, std::uint64_t seed) {
    const std::vector<Shape> shapes = infer_shapes(spec);
    Model model;
    model.spec = spec;
    model.params.resize(spec.layers.size());
    Shape cur = spec.input_shape;
    for (std::size_t i = 0; i < spec.layers.size(); ++i) {
        const LayerSpec& ls = spec.layers[i];
        if (ls.has_params()) {
            const bool preserving =
                ls.kind == LayerKind::AolFc ? cur.at(0) == ls.out_dim : conv_preserves_size(ls, cur);
            model.params[i].P = preserving
                                    ? init_identity(ls, cur)
                                    : init_orthogonal(ls, cur, seed + 0x9e3779b97f4a7c15ULL * i);
            const int out_units =
                ls.kind == LayerKind::AolFc ? ls.out_dim : ls.out_channels;
            model.params[i].b = Tensor({out_units});
        }
        cur = shapes[i];
    }
    return model;
}

// ---- forward ----

Tensor layer_forward(const LayerSpec& spec, const LayerParams& params, const Tensor& x,
                     const Shape& in_shape, LayerCache* cache, bool include_bias) {
    const int N = batch_of(x, in_shape, "layer_forward");
    const Shape out_shape = layer_output_shape(spec, in_shape);
    if (cache) {
        cache->input = x;
        cache->in_shape = in_shape;
        cache->out_shape = out_shape;
    }

    switch (spec.kind) {
        case LayerKind::AolConv: {
            const Tensor W = spec.rescaled ? rescale_kernel(params.P).W : params.P;
            if (cache) cache->effW = W;
            const ConvGeometry g = conv_geometry(spec, in_shape);
            Shape full = out_shape;
            full.insert(full.begin(), N);
            Tensor out(full);
            const int co = out_shape[2];
            for (int n = 0; n < N; ++n) {
                Tensor y = conv2d(example_slice(x, n, in_shape), W, g);
                if (include_bias)
                    for (std::int64_t i = 0; i < y.numel(); ++i) y[i] += params.b[i % co];
                write_slice(out, n, y);
            }
            return out;
        }
        case LayerKind::AolFc: {
            const Tensor W = spec.rescaled ? rescale_matrix(params.P).W : params.P;
            if (cache) cache->effW = W;
            Tensor out = matmul(x, W);  // [N,in] x [in,out]
            if (include_bias) {
                const int m = out.dim(1);
                for (std::int64_t i = 0; i < out.numel(); ++i) out[i] += params.b[i % m];
            }
            return out;
        }
        case LayerKind::MaxMin: {
            const int c = in_shape.back();
            Tensor out(x.shape());
            const std::int64_t rows = x.numel() / c;
            for (std::int64_t r = 0; r < rows; ++r) {
                const double* xi = x.data() + r * c;
                double* yo = out.data() + r * c;
                for (int i = 0; i < c; i += 2) {
                    const double a = xi[i], b = xi[i + 1];
                    yo[i] = a >= b ? a : b;
                    yo[i + 1] = a >= b ? b : a;
                }
            }
            return out;
        }
        case LayerKind::ConcatPool: {
            const int h = in_shape[0], w = in_shape[1], c = in_shape[2], p = spec.patch;
            const int oh = h / p, ow = w / p, oc = p * p * c;
            Shape full = {N, oh, ow, oc};
            Tensor out(full);
            for (int n = 0; n < N; ++n) {
                const double* xs = x.data() + static_cast<std::int64_t>(n) * h * w * c;
                double* os = out.data() + static_cast<std::int64_t>(n) * oh * ow * oc;
                for (int I = 0; I < oh; ++I)
                    for (int J = 0; J < ow; ++J)
                        for (int pr = 0; pr < p; ++pr)
                            for (int pc = 0; pc < p; ++pc) {
                                const double* src =
                                    xs + ((static_cast<std::int64_t>(I * p + pr) * w) +
                                          (J * p + pc)) * c;
                                double* dst = os +
                                              (static_cast<std::int64_t>(I) * ow + J) * oc +
                                              (pr * p + pc) * c;
                                std::copy(src, src + c, dst);
                            }
            }
            return out;
        }
        case LayerKind::FirstChannels: {
            const int c = in_shape.back(), keep = spec.keep;
            Shape full = out_shape;
            full.insert(full.begin(), N);
            Tensor out(full);
            const std::int64_t rows = x.numel() / c;
            for (std::int64_t r = 0; r < rows; ++r)
                std::copy(x.data() + r * c, x.data() + r * c + keep, out.data() + r * keep);
            return out;
        }
        case LayerKind::Flatten: {
            return x.reshaped({N, static_cast<int>(numel_of(in_shape))});
        }
    }
    throw std::invalid_argument("unknown layer kind");
}

Tensor layer_backward(const LayerSpec& spec, const LayerParams& params, const LayerCache& cache,
                      const Tensor& grad_out, LayerGrads* grads) {
    const Shape& in_shape = cache.in_shape;
    const int N = cache.input.dim(0);

    switch (spec.kind) {
        case LayerKind::AolConv: {
            const ConvGeometry g = conv_geometry(spec, in_shape);
            const int co = spec.out_channels;
            Shape full = in_shape;
            full.insert(full.begin(), N);
            Tensor dx(full);
            Tensor dW({spec.kernel, spec.kernel, in_shape[2], co});
            Tensor db({co});
            const Shape& os = cache.out_shape;
            for (int n = 0; n < N; ++n) {
                const Tensor gy = example_slice(grad_out, n, os);
                write_slice(dx, n, conv2d_grad_input(gy, cache.effW, g, in_shape[0], in_shape[1]));
                if (grads) {
                    const Tensor xi = example_slice(cache.input, n, in_shape);
                    const Tensor dWn = conv2d_grad_kernel(gy, xi, g);
                    for (std::int64_t i = 0; i < dW.numel(); ++i) dW[i] += dWn[i];
                    for (std::int64_t i = 0; i < gy.numel(); ++i) db[i % co] += gy[i];
                }
            }
            if (grads) {
                grads->dP = spec.rescaled ? rescale_kernel_backward(params.P, dW) : dW;
                grads->db = db;
            }
            return dx;
        }
        case LayerKind::AolFc: {
            Tensor dx = matmul(grad_out, transpose(cache.effW));
            if (grads) {
                const Tensor dW = matmul(transpose(cache.input), grad_out);
                grads->dP = spec.rescaled ? rescale_matrix_backward(params.P, dW) : dW;
                const int m = grad_out.dim(1);
                grads->db = Tensor({m});
                for (std::int64_t i = 0; i < grad_out.numel(); ++i)
                    grads->db[i % m] += grad_out[i];
            }
            return dx;
        }
        case LayerKind::MaxMin: {
            const int c = in_shape.back();
            Tensor dx(cache.input.shape());
            const std::int64_t rows = cache.input.numel() / c;
            for (std::int64_t r = 0; r < rows; ++r) {
                const double* xi = cache.input.data() + r * c;
                const double* gy = grad_out.data() + r * c;
                double* gx = dx.data() + r * c;
                for (int i = 0; i < c; i += 2) {
                    if (xi[i] >= xi[i + 1]) {
                        gx[i] = gy[i];
                        gx[i + 1] = gy[i + 1];
                    } else {
                        gx[i] = gy[i + 1];
                        gx[i + 1] = gy[i];
                    }
                }
            }
            return dx;
        }
        case LayerKind::ConcatPool:
        case LayerKind::FirstChannels:
        case LayerKind::Flatten:
            return layer_apply_transpose(spec, Tensor(), in_shape, grad_out);
    }
    throw std::invalid_argument("unknown layer kind");
}

Tensor layer_apply_transpose(const LayerSpec& spec, const Tensor& effW, const Shape& in_shape,
                             const Tensor& grad_out) {
    const Shape out_shape = layer_output_shape(spec, in_shape);
    const int N = batch_of(grad_out, out_shape, "layer_apply_transpose");
    Shape full = in_shape;
    full.insert(full.begin(), N);

    switch (spec.kind) {
        case LayerKind::AolConv: {
            ConvGeometry g;
            g.kernel = spec.kernel;
            g.stride = spec.stride;
            g.padding = spec.padding;
            g.in_channels = in_shape[2];
            g.out_channels = spec.out_channels;
            Tensor dx(full);
            for (int n = 0; n < N; ++n)
                write_slice(dx, n, conv2d_grad_input(example_slice(grad_out, n, out_shape), effW,
                                                     g, in_shape[0], in_shape[1]));
            return dx;
        }
        case LayerKind::AolFc:
            return matmul(grad_out, transpose(effW));
        case LayerKind::ConcatPool: {
            const int h = in_shape[0], w = in_shape[1], c = in_shape[2], p = spec.patch;
            const int oh = h / p, ow = w / p, oc = p * p * c;
            Tensor dx(full);
            for (int n = 0; n < N; ++n) {
                double* xs = dx.data() + static_cast<std::int64_t>(n) * h * w * c;
                const double* os = grad_out.data() + static_cast<std::int64_t>(n) * oh * ow * oc;
                for (int I = 0; I < oh; ++I)
                    for (int J = 0; J < ow; ++J)
                        for (int pr = 0; pr < p; ++pr)
                            for (int pc = 0; pc < p; ++pc) {
                                double* dst = xs + ((static_cast<std::int64_t>(I * p + pr) * w) +
                                                    (J * p + pc)) * c;
                                const double* src =
                                    os + (static_cast<std::int64_t>(I) * ow + J) * oc +
                                    (pr * p + pc) * c;
                                std::copy(src, src + c, dst);
                            }
            }
            return dx;
        }
        case LayerKind::FirstChannels: {
            const int c = in_shape.back(), keep = spec.keep;
            Tensor dx(full);
            const std::int64_t rows = dx.numel() / c;
            for (std::int64_t r = 0; r < rows; ++r)
                std::copy(grad_out.data() + r * keep, grad_out.data() + (r + 1) * keep,
                          dx.data() + r * c);
            return dx;
        }
        case LayerKind::Flatten:
            return grad_out.reshaped(full);
        case LayerKind::MaxMin:
            throw std::invalid_argument("layer_apply_transpose: maxmin is not linear");
    }
    throw std::invalid_argument("unknown layer kind");
}

Tensor forward(const Model& model, const Tensor& x) {
    const Shape& in = model.input_shape();
    const bool single = x.shape() == in;
    Tensor cur = x;
    if (single) {
        Shape s = in;
        s.insert(s.begin(), 1);
        cur = x.reshaped(s);
    }
    Shape shape = in;
    for (std::size_t i = 0; i < model.layer_count(); ++i) {
        try {
            cur = layer_forward(model.spec.layers[i], model.params[i], cur, shape);
        } catch (const std::invalid_argument& e) {
            throw std::invalid_argument("layer " + std::to_string(i) + ": " + e.what());
        }
        shape = layer_output_shape(model.spec.layers[i], shape);
    }
    if (single) return cur.reshaped(shape);
    return cur;
}

Tensor forward_trace(const Model& model, const Tensor& x_batch, ForwardTrace& trace) {
    trace.caches.assign(model.layer_count(), LayerCache{});
    Tensor cur = x_batch;
    Shape shape = model.input_shape();
    for (std::size_t i = 0; i < model.layer_count(); ++i) {
        cur = layer_forward(model.spec.layers[i], model.params[i], cur, shape, &trace.caches[i]);
        shape = trace.caches[i].out_shape;
    }
    return cur;
}

}  // namespace aol
