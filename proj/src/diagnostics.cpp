#include "aolkit/diagnostics.hpp"

#include <cmath>
#include <fstream>
#include <ostream>

#include "aolkit/rng.hpp"

namespace aol {

double spectral_norm_power_iteration(const LinearOp& apply, const LinearOp& apply_transpose,
                                     int dim, int iters, std::uint64_t seed) {
    if (iters < 1) throw std::invalid_argument("power iteration: iters must be >= 1");
    Rng rng(seed);
    Tensor v({dim});
    for (int i = 0; i < dim; ++i) v[i] = rng.gaussian();
    double vn = norm2(v);
    if (vn == 0.0) return 0.0;
    for (int i = 0; i < dim; ++i) v[i] /= vn;

    double est = 0.0;
    for (int it = 0; it < iters; ++it) {
        const Tensor w = apply(v);
        Tensor u = apply_transpose(w);
        const double rayleigh = dot(v, u);  // = |A v|^2 for unit v
        const double next = std::sqrt(std::max(rayleigh, 0.0));
        const double un = norm2(u);
        if (un == 0.0) return 0.0;  // zero operator (or v in the null space)
        for (int i = 0; i < dim; ++i) v[i] = u[i] / un;
        if (it > 0 && std::fabs(next - est) <= 1e-12 * std::max(1.0, est)) return next;
        est = next;
    }
    return est;
}

double spectral_norm_power_iteration(const Tensor& matrix, int iters, std::uint64_t seed) {
    if (matrix.rank() != 2)
        throw std::invalid_argument("power iteration: expected a 2-D matrix");
    const Tensor mt = transpose(matrix);
    const int m = matrix.dim(1);
    auto apply = [&](const Tensor& v) { return matmul(matrix, v.reshaped({m, 1})); };
    auto apply_t = [&](const Tensor& w) {
        Tensor u = matmul(mt, w);
        return u.reshaped({m});
    };
    return spectral_norm_power_iteration(apply, apply_t, m, iters, seed);
}

namespace {

constexpr int kJacobianGuard = 10000;

bool is_linear_layer(LayerKind k) { return k != LayerKind::MaxMin; }

}  // namespace

Tensor materialize_jacobian(const LayerSpec& spec, const LayerParams& params,
                            const Shape& input_shape) {
    if (!is_linear_layer(spec.kind))
        throw std::invalid_argument("materialize_jacobian: layer " +
                                    layer_kind_to_string(spec.kind) + " is not linear");
    const std::int64_t in_dim = numel_of_shape(input_shape);
    if (in_dim > kJacobianGuard)
        throw std::invalid_argument("materialize_jacobian: input dimension " +
                                    std::to_string(in_dim) + " exceeds the guard of " +
                                    std::to_string(kJacobianGuard));
    const Shape out_shape = layer_output_shape(spec, input_shape);
    const std::int64_t out_dim = numel_of_shape(out_shape);

    Shape bs = input_shape;
    bs.insert(bs.begin(), 1);
    Tensor jac({static_cast<int>(out_dim), static_cast<int>(in_dim)});
    Tensor basis(bs);
    for (std::int64_t j = 0; j < in_dim; ++j) {
        basis.fill(0.0);
        basis[j] = 1.0;
        const Tensor col = layer_forward(spec, params, basis, input_shape, nullptr,
                                         /*include_bias=*/false);
        for (std::int64_t i = 0; i < out_dim; ++i)
            jac[i * in_dim + j] = col[i];
    }
    return jac;
}

GramStats gram_analysis(const LayerSpec& spec, const LayerParams& params,
                        const Shape& input_shape) {
    const Tensor jac = materialize_jacobian(spec, params, input_shape);
    const int d = jac.dim(1);
    GramStats st;
    st.gram = matmul(transpose(jac), jac);
    st.diag_min = st.diag_max = st.gram[0];
    double diag_sum = 0.0, off_sum = 0.0, off_max = 0.0;
    for (int i = 0; i < d; ++i) {
        for (int j = 0; j < d; ++j) {
            const double v = st.gram[static_cast<std::int64_t>(i) * d + j];
            if (i == j) {
                diag_sum += v;
                st.diag_min = std::min(st.diag_min, v);
                st.diag_max = std::max(st.diag_max, v);
            } else {
                off_sum += std::fabs(v);
                off_max = std::max(off_max, std::fabs(v));
            }
        }
    }
    st.diag_mean = diag_sum / d;
    st.offdiag_mean_abs = d > 1 ? off_sum / (static_cast<double>(d) * d - d) : 0.0;
    st.offdiag_max_abs = off_max;
    st.orthogonality_ratio = st.diag_mean != 0.0 ? st.offdiag_mean_abs / st.diag_mean : 0.0;
    return st;
}

void export_gram_crops(const Tensor& gram, const std::string& path_prefix, int crop_size,
                       const std::vector<int>& offsets) {
    if (gram.rank() != 2 || gram.dim(0) != gram.dim(1))
        throw std::invalid_argument("export_gram_crops: expected a square Gram matrix");
    const int d = gram.dim(0);
    const int c = std::min(crop_size, d);

    std::vector<int> all_offsets = {0};
    all_offsets.insert(all_offsets.end(), offsets.begin(), offsets.end());
    for (std::size_t idx = 0; idx < all_offsets.size(); ++idx) {
        const int off = all_offsets[idx];
        const int r0 = std::max(0, std::min(d - c, (d - c) / 2));
        const int c0 = std::max(0, std::min(d - c, r0 + off));
        std::ofstream f(path_prefix + "_crop" + std::to_string(idx) + ".csv");
        f << "row,col,value\n";
        for (int i = 0; i < c; ++i)
            for (int j = 0; j < c; ++j)
                f << (r0 + i) << "," << (c0 + j) << ","
                  << gram[static_cast<std::int64_t>(r0 + i) * d + (c0 + j)] << "\n";
    }
}

BoundAudit audit_model_bound(const Model& model, int iters, std::uint64_t seed) {
    BoundAudit audit;
    Shape shape = model.input_shape();
    for (std::size_t i = 0; i < model.layer_count(); ++i) {
        const LayerSpec& ls = model.spec.layers[i];
        const Shape out = layer_output_shape(ls, shape);
        LayerBoundEntry entry;
        entry.index = static_cast<int>(i);
        entry.name = layer_kind_to_string(ls.kind);
        if (ls.kind == LayerKind::MaxMin) {
            entry.is_activation = true;
            entry.sigma = 1.0;
        } else {
            Tensor effW;
            if (ls.kind == LayerKind::AolConv)
                effW = ls.rescaled ? rescale_kernel(model.params[i].P).W : model.params[i].P;
            else if (ls.kind == LayerKind::AolFc)
                effW = ls.rescaled ? rescale_matrix(model.params[i].P).W : model.params[i].P;
            const Shape in_shape = shape;
            Shape in_b = in_shape, out_b = out;
            in_b.insert(in_b.begin(), 1);
            out_b.insert(out_b.begin(), 1);
            const LayerParams& params = model.params[i];
            auto apply = [&, in_b](const Tensor& v) {
                return layer_forward(ls, params, v.reshaped(in_b), in_shape, nullptr,
                                     /*include_bias=*/false);
            };
            auto apply_t = [&, out_b, in_shape](const Tensor& w) {
                Tensor g = layer_apply_transpose(ls, effW, in_shape, w.reshaped(out_b));
                return g.reshaped({static_cast<int>(numel_of_shape(in_shape))});
            };
            entry.sigma = spectral_norm_power_iteration(
                apply, apply_t, static_cast<int>(numel_of_shape(in_shape)), iters,
                seed + 101 * i);
        }
        entry.flagged = entry.sigma > 1.0 + 1e-9;
        audit.product *= entry.sigma;
        audit.ok = audit.ok && !entry.flagged;
        audit.layers.push_back(std::move(entry));
        shape = out;
    }
    return audit;
}

void write_bound_audit_csv(std::ostream& os, const BoundAudit& audit) {
    os << "layer,kind,sigma_max,flagged\n";
    for (const auto& e : audit.layers)
        os << e.index << "," << e.name << "," << e.sigma << "," << (e.flagged ? 1 : 0) << "\n";
    os << "product,," << audit.product << "," << (audit.ok ? 0 : 1) << "\n";
}

}  // namespace aol
