#pragma once

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <string>
#include <vector>

#include "aolkit/layers.hpp"

namespace aol {

using LinearOp = std::function<Tensor(const Tensor&)>;

/// Largest singular value of a linear operator, estimated from below by
/// power iteration on the Gram operator (apply_transpose after apply) with
/// the square root of the Rayleigh quotient at exit. Early exit when the
/// relative change drops below 1e-12.
double spectral_norm_power_iteration(const LinearOp& apply, const LinearOp& apply_transpose,
                                     int dim, int iters = 200, std::uint64_t seed = 0);

/// Power iteration on an explicit matrix.
double spectral_norm_power_iteration(const Tensor& matrix, int iters = 200,
                                     std::uint64_t seed = 0);

/// Bias-free Jacobian of a linear layer (column j = forward(e_j) - forward(0)),
/// shape [out_dim, in_dim]. Throws for nonlinear layers and for inputs above
/// the 10^4-dimension guard.
Tensor materialize_jacobian(const LayerSpec& spec, const LayerParams& params,
                            const Shape& input_shape);

struct GramStats {
    Tensor gram;  ///< J^T J, [d,d]
    double diag_mean = 0.0, diag_min = 0.0, diag_max = 0.0;
    double offdiag_mean_abs = 0.0, offdiag_max_abs = 0.0;
    double orthogonality_ratio = 0.0;  ///< offdiag_mean_abs / diag_mean
};

GramStats gram_analysis(const LayerSpec& spec, const LayerParams& params,
                        const Shape& input_shape);

/// Square crops of a Gram matrix as CSV (row, col, value): one centered and
/// one at each requested diagonal offset.
void export_gram_crops(const Tensor& gram, const std::string& path_prefix, int crop_size,
                       const std::vector<int>& offsets);

struct LayerBoundEntry {
    int index = 0;
    std::string name;
    double sigma = 0.0;
    bool is_activation = false;
    bool flagged = false;  ///< sigma above 1 + 1e-9
};

struct BoundAudit {
    std::vector<LayerBoundEntry> layers;
    double product = 1.0;
    bool ok = true;
};

/// Per-layer spectral norms of the effective weights via power iteration;
/// activations count as 1-Lipschitz. Flags any layer above 1 + 1e-9.
BoundAudit audit_model_bound(const Model& model, int iters = 200, std::uint64_t seed = 0);

void write_bound_audit_csv(std::ostream& os, const BoundAudit& audit);

}  // namespace aol
