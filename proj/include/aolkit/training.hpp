#pragma once

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <string>
#include <vector>

#include "aolkit/layers.hpp"

namespace aol {

struct Dataset {
    Tensor train_x;  ///< [N, ...input_shape]
    std::vector<int> train_y;
    Tensor test_x;
    std::vector<int> test_y;
    int num_classes = 0;
};

struct TrainConfig {
    double lr0 = 1e-3;
    double momentum = 0.9;
    double weight_decay = 5e-4;
    int batch_size = 250;
    int epochs = 10;
    std::vector<int> milestones;  ///< epochs (0-based) at which lr drops by 10x
    double loss_offset_u = 1.4142135623730951;
    double loss_temperature_t = 0.25;
    std::uint64_t seed = 0;
    bool augment_flip = false;
    double augment_shift = 0.0;  ///< max integer shift as a fraction of the image size
    std::vector<double> cert_eps;  ///< per-epoch certified accuracy radii (may be empty)

    void validate() const;
};

/// Margin loss: mean over the batch of t * crossentropy(y, softmax((s - u y)/t)).
/// `y_onehot` rows must be one-hot.
double margin_loss(const Tensor& scores, const Tensor& y_onehot, double u, double t);

/// dL/d(scores) of margin_loss (already divided by the batch size).
Tensor margin_loss_grad(const Tensor& scores, const Tensor& y_onehot, double u, double t);

Tensor one_hot(const std::vector<int>& labels, int num_classes);

struct Grads {
    std::vector<LayerGrads> layers;  ///< aligned with model layers; empty tensors where unused
};

/// Gradients of the mean margin loss w.r.t. every (P, b), backpropagated
/// through the rescaling. Throws on non-finite activations.
Grads grad(const Model& model, const Tensor& x_batch, const std::vector<int>& labels,
           const TrainConfig& cfg, double* loss_out = nullptr, int* correct_out = nullptr);

struct OptState {
    std::vector<LayerGrads> velocity;  ///< same shapes as the gradients
    int epoch = 0;
    double lr = 0.0;
};

OptState make_opt_state(const Model& model, const TrainConfig& cfg);

/// g' = g + wd*p;  v <- mu*v - lr*g';  p <- p + mu*v - lr*g'.
/// Weight decay applies to P only, never to biases.
void sgd_nesterov_step(Model& model, const Grads& grads, OptState& state,
                       const TrainConfig& cfg);

struct EpochMetrics {
    int epoch = 0;
    double lr = 0.0;
    double train_loss = 0.0;
    double train_acc = 0.0;
    double val_acc = 0.0;
    std::vector<double> cert_acc;  ///< aligned with TrainConfig::cert_eps
};

struct TrainResult {
    std::vector<EpochMetrics> log;
    bool diverged = false;
};

using EpochCallback = std::function<void(const Model&, EpochMetrics&)>;

/// Full training loop: per-epoch Fisher-Yates shuffling, optional flip /
/// integer-shift augmentation, milestone lr schedule. Deterministic given
/// the config seed. On divergence (non-finite loss) the parameters are
/// rolled back to the last completed epoch.
TrainResult train(Model& model, const Dataset& data, const TrainConfig& cfg,
                  const EpochCallback& callback = nullptr);

void write_metrics_csv(std::ostream& os, const std::vector<EpochMetrics>& log,
                       const std::vector<double>& cert_eps);

}  // namespace aol
