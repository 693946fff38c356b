#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "aolkit/rescale.hpp"
#include "aolkit/tensor.hpp"

namespace aol {

using Shape = std::vector<int>;  // per-example shape, no batch axis

enum class LayerKind { AolConv, AolFc, MaxMin, ConcatPool, FirstChannels, Flatten };

std::string layer_kind_to_string(LayerKind k);

struct LayerSpec {
    LayerKind kind = LayerKind::Flatten;

    // AolConv
    int kernel = 3;
    int stride = 1;
    int out_channels = 0;
    Padding padding = Padding::SameZero;

    // AolFc
    int out_dim = 0;

    // ConcatPool
    int patch = 2;

    // FirstChannels
    int keep = 0;

    // When false, an AolConv/AolFc layer applies the raw parameter matrix
    // without the rescaling. Used for comparison studies only; such a layer
    // carries no Lipschitz guarantee.
    bool rescaled = true;

    bool has_params() const {
        return kind == LayerKind::AolConv || kind == LayerKind::AolFc;
    }

    static LayerSpec aol_conv(int kernel, int stride, int out_channels,
                              Padding padding = Padding::SameZero) {
        LayerSpec s;
        s.kind = LayerKind::AolConv;
        s.kernel = kernel;
        s.stride = stride;
        s.out_channels = out_channels;
        s.padding = padding;
        return s;
    }
    static LayerSpec aol_fc(int out_dim) {
        LayerSpec s;
        s.kind = LayerKind::AolFc;
        s.out_dim = out_dim;
        return s;
    }
    static LayerSpec maxmin() {
        LayerSpec s;
        s.kind = LayerKind::MaxMin;
        return s;
    }
    static LayerSpec concat_pool(int patch) {
        LayerSpec s;
        s.kind = LayerKind::ConcatPool;
        s.patch = patch;
        return s;
    }
    static LayerSpec first_channels(int keep) {
        LayerSpec s;
        s.kind = LayerKind::FirstChannels;
        s.keep = keep;
        return s;
    }
    static LayerSpec flatten() {
        LayerSpec s;
        s.kind = LayerKind::Flatten;
        return s;
    }
};

struct ModelSpec {
    Shape input_shape;
    std::vector<LayerSpec> layers;
};

struct LayerParams {
    Tensor P;  ///< raw trainable parameters (empty for parameter-free layers)
    Tensor b;  ///< bias (per output unit / channel)
};

struct Model {
    ModelSpec spec;
    std::vector<LayerParams> params;  ///< one entry per layer, empty tensors where unused

    const Shape& input_shape() const { return spec.input_shape; }
    std::size_t layer_count() const { return spec.layers.size(); }
};

/// Output shape of a single layer; throws on a shape-chain violation.
Shape layer_output_shape(const LayerSpec& spec, const Shape& in);

/// Shape after each layer; errors name the offending layer index.
std::vector<Shape> infer_shapes(const ModelSpec& spec);

Shape output_shape(const ModelSpec& spec);

// ---- initialization ----

/// Delta-center kernel / identity matrix, giving an identity Jacobian
/// (rescale factors exactly 1). Requires a size-preserving layer.
Tensor init_identity(const LayerSpec& spec, const Shape& in_shape);

/// Random orthonormal columns in the tall direction (two-pass Gram-Schmidt
/// of a Gaussian draw). Deterministic given the seed.
Tensor init_orthogonal(const LayerSpec& spec, const Shape& in_shape, std::uint64_t seed);

/// Instantiate a model: identity init where size-preserving, orthogonal
/// otherwise, zero biases.
Model build_model(const ModelSpec& spec, std::uint64_t seed);

// ---- forward / backward ----

struct LayerCache {
    Tensor input;  ///< batched layer input
    Tensor effW;   ///< effective weight after rescaling (AolConv / AolFc)
    Shape in_shape;
    Shape out_shape;
};

/// Forward through one layer. `x` is batched: shape [N, ...in_shape].
/// `include_bias=false` gives the layer's bias-free linear action.
Tensor layer_forward(const LayerSpec& spec, const LayerParams& params, const Tensor& x,
                     const Shape& in_shape, LayerCache* cache = nullptr,
                     bool include_bias = true);

struct LayerGrads {
    Tensor dP;
    Tensor db;
};

/// Backward through one layer: returns dL/d(input); fills parameter
/// gradients (including the rescale dependence on P) when `grads` is given.
Tensor layer_backward(const LayerSpec& spec, const LayerParams& params, const LayerCache& cache,
                      const Tensor& grad_out, LayerGrads* grads = nullptr);

/// Transpose of the layer's bias-free linear action (linear layers only).
Tensor layer_apply_transpose(const LayerSpec& spec, const Tensor& effW, const Shape& in_shape,
                             const Tensor& grad_out);

struct ForwardTrace {
    std::vector<LayerCache> caches;
};

/// Forward through the whole model. Accepts a single example (shape equal
/// to the model input shape) or a batch with a leading batch axis.
Tensor forward(const Model& model, const Tensor& x);

/// Batched forward that records per-layer caches for backpropagation.
Tensor forward_trace(const Model& model, const Tensor& x_batch, ForwardTrace& trace);

}  // namespace aol
