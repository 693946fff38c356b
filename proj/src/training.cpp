#include "aolkit/training.hpp"

#include <algorithm>
#include <cmath>
#include <ostream>

#include "aolkit/rng.hpp"

namespace aol {

void TrainConfig::validate() const {
    if (lr0 < 0.0) throw std::invalid_argument("lr0 must be nonnegative");
    if (momentum < 0.0 || momentum >= 1.0)
        throw std::invalid_argument("momentum must be in [0, 1)");
    if (loss_temperature_t <= 0.0) throw std::invalid_argument("temperature t must be positive");
    if (loss_offset_u < 0.0) throw std::invalid_argument("offset u must be nonnegative");
    if (batch_size <= 0 || epochs < 0)
        throw std::invalid_argument("batch_size must be positive and epochs nonnegative");
}

Tensor one_hot(const std::vector<int>& labels, int num_classes) {
    Tensor y({static_cast<int>(labels.size()), num_classes});
    for (std::size_t n = 0; n < labels.size(); ++n) {
        if (labels[n] < 0 || labels[n] >= num_classes)
            throw std::invalid_argument("label " + std::to_string(labels[n]) +
                                        " out of range [0, " + std::to_string(num_classes) + ")");
        y[static_cast<std::int64_t>(n) * num_classes + labels[n]] = 1.0;
    }
    return y;
}

namespace {

void check_loss_args(const Tensor& scores, const Tensor& y_onehot, double t) {
    if (scores.rank() != 2 || !scores.same_shape(y_onehot))
        throw std::invalid_argument("margin_loss: scores and one-hot labels must both be "
                                    "[batch, classes]");
    if (t <= 0.0) throw std::invalid_argument("margin_loss: temperature must be positive");
    const int l = y_onehot.dim(1);
    for (int n = 0; n < y_onehot.dim(0); ++n) {
        int ones = 0;
        for (int i = 0; i < l; ++i) {
            const double v = y_onehot[static_cast<std::int64_t>(n) * l + i];
            if (v == 1.0)
                ++ones;
            else if (v != 0.0)
                throw std::invalid_argument("margin_loss: labels are not one-hot");
        }
        if (ones != 1) throw std::invalid_argument("margin_loss: labels are not one-hot");
    }
}

/// log(sum_i exp(z_i)) with the usual max shift.
double logsumexp(const double* z, int l) {
    double zmax = z[0];
    for (int i = 1; i < l; ++i) zmax = std::max(zmax, z[i]);
    double s = 0.0;
    for (int i = 0; i < l; ++i) s += std::exp(z[i] - zmax);
    return zmax + std::log(s);
}

}  // namespace

double margin_loss(const Tensor& scores, const Tensor& y_onehot, double u, double t) {
    check_loss_args(scores, y_onehot, t);
    const int N = scores.dim(0), l = scores.dim(1);
    std::vector<double> z(l);
    double total = 0.0;
    for (int n = 0; n < N; ++n) {
        const double* s = scores.data() + static_cast<std::int64_t>(n) * l;
        const double* y = y_onehot.data() + static_cast<std::int64_t>(n) * l;
        double zy = 0.0;
        for (int i = 0; i < l; ++i) {
            z[i] = (s[i] - u * y[i]) / t;
            if (y[i] == 1.0) zy = z[i];
        }
        total += t * (logsumexp(z.data(), l) - zy);
    }
    return total / N;
}

Tensor margin_loss_grad(const Tensor& scores, const Tensor& y_onehot, double u, double t) {
    check_loss_args(scores, y_onehot, t);
    const int N = scores.dim(0), l = scores.dim(1);
    Tensor g(scores.shape());
    std::vector<double> z(l);
    for (int n = 0; n < N; ++n) {
        const double* s = scores.data() + static_cast<std::int64_t>(n) * l;
        const double* y = y_onehot.data() + static_cast<std::int64_t>(n) * l;
        double* gn = g.data() + static_cast<std::int64_t>(n) * l;
        for (int i = 0; i < l; ++i) z[i] = (s[i] - u * y[i]) / t;
        const double lse = logsumexp(z.data(), l);
        for (int i = 0; i < l; ++i) gn[i] = (std::exp(z[i] - lse) - y[i]) / N;
    }
    return g;
}

namespace {

bool strictly_correct(const double* s, int l, int y) {
    for (int i = 0; i < l; ++i)
        if (i != y && s[i] >= s[y]) return false;
    return true;
}

}  // namespace

Grads grad(const Model& model, const Tensor& x_batch, const std::vector<int>& labels,
           const TrainConfig& cfg, double* loss_out, int* correct_out) {
    ForwardTrace trace;
    const Tensor logits = forward_trace(model, x_batch, trace);
    if (!logits.all_finite())
        throw std::runtime_error("grad: non-finite activations (training diverged)");

    const int l = logits.dim(1);
    const Tensor y = one_hot(labels, l);
    if (loss_out) *loss_out = margin_loss(logits, y, cfg.loss_offset_u, cfg.loss_temperature_t);
    if (correct_out) {
        int c = 0;
        for (int n = 0; n < logits.dim(0); ++n)
            if (strictly_correct(logits.data() + static_cast<std::int64_t>(n) * l, l, labels[n]))
                ++c;
        *correct_out = c;
    }

    Grads grads;
    grads.layers.resize(model.layer_count());
    Tensor delta = margin_loss_grad(logits, y, cfg.loss_offset_u, cfg.loss_temperature_t);
    for (int i = static_cast<int>(model.layer_count()) - 1; i >= 0; --i) {
        const LayerSpec& ls = model.spec.layers[i];
        LayerGrads* lg = ls.has_params() ? &grads.layers[i] : nullptr;
        delta = layer_backward(ls, model.params[i], trace.caches[i], delta, lg);
    }
    return grads;
}

OptState make_opt_state(const Model& model, const TrainConfig& cfg) {
    OptState st;
    st.lr = cfg.lr0;
    st.velocity.resize(model.layer_count());
    for (std::size_t i = 0; i < model.layer_count(); ++i) {
        if (!model.spec.layers[i].has_params()) continue;
        st.velocity[i].dP = Tensor(model.params[i].P.shape());
        st.velocity[i].db = Tensor(model.params[i].b.shape());
    }
    return st;
}

namespace {

void nesterov_update(Tensor& p, const Tensor& g, Tensor& v, double mu, double lr, double wd) {
    if (!p.same_shape(g) || !p.same_shape(v))
        throw std::invalid_argument("sgd_nesterov_step: shape mismatch between parameters, "
                                    "gradients and velocity");
    for (std::int64_t i = 0; i < p.numel(); ++i) {
        const double gp = g[i] + wd * p[i];
        v[i] = mu * v[i] - lr * gp;
        p[i] += mu * v[i] - lr * gp;
    }
}

}  // namespace

void sgd_nesterov_step(Model& model, const Grads& grads, OptState& state,
                       const TrainConfig& cfg) {
    for (std::size_t i = 0; i < model.layer_count(); ++i) {
        if (!model.spec.layers[i].has_params()) continue;
        nesterov_update(model.params[i].P, grads.layers[i].dP, state.velocity[i].dP,
                        cfg.momentum, state.lr, cfg.weight_decay);
        nesterov_update(model.params[i].b, grads.layers[i].db, state.velocity[i].db,
                        cfg.momentum, state.lr, 0.0);
    }
}

namespace {

Tensor augment_example(const Tensor& x, const Shape& shape, bool flip, int max_sh, int max_sw,
                       Rng& rng) {
    if (shape.size() != 3) return x;
    const int h = shape[0], w = shape[1], c = shape[2];
    const bool do_flip = flip && rng.uniform() < 0.5;
    const int dy = max_sh > 0 ? rng.uniform_int(2 * max_sh + 1) - max_sh : 0;
    const int dx = max_sw > 0 ? rng.uniform_int(2 * max_sw + 1) - max_sw : 0;
    if (!do_flip && dy == 0 && dx == 0) return x;
    Tensor out(x.shape());
    for (int i = 0; i < h; ++i)
        for (int j = 0; j < w; ++j) {
            const int si = i - dy;
            int sj = j - dx;
            if (do_flip) sj = w - 1 - sj;
            if (si < 0 || si >= h || sj < 0 || sj >= w) continue;
            const double* src = x.data() + (static_cast<std::int64_t>(si) * w + sj) * c;
            double* dst = out.data() + (static_cast<std::int64_t>(i) * w + j) * c;
            std::copy(src, src + c, dst);
        }
    return out;
}

double evaluate_accuracy(const Model& model, const Tensor& x, const std::vector<int>& y,
                         int batch) {
    if (y.empty()) return 0.0;
    const Shape in = model.input_shape();
    const std::int64_t ex = x.numel() / static_cast<int>(y.size());
    int correct = 0;
    for (std::size_t start = 0; start < y.size(); start += batch) {
        const int n = static_cast<int>(std::min<std::size_t>(batch, y.size() - start));
        Shape bs = in;
        bs.insert(bs.begin(), n);
        Tensor xb(bs);
        std::copy(x.data() + start * ex, x.data() + (start + n) * ex, xb.data());
        const Tensor logits = forward(model, xb);
        const int l = logits.dim(1);
        for (int i = 0; i < n; ++i)
            if (strictly_correct(logits.data() + static_cast<std::int64_t>(i) * l, l,
                                 y[start + i]))
                ++correct;
    }
    return static_cast<double>(correct) / y.size();
}

}  // namespace

TrainResult train(Model& model, const Dataset& data, const TrainConfig& cfg,
                  const EpochCallback& callback) {
    cfg.validate();
    const Shape in = model.input_shape();
    const int n_train = static_cast<int>(data.train_y.size());
    const std::int64_t ex = numel_of_shape(in);
    if (data.train_x.numel() != static_cast<std::int64_t>(n_train) * ex)
        throw std::invalid_argument("train: dataset does not match the model input shape");

    Rng rng(cfg.seed);
    std::vector<int> order(n_train);
    for (int i = 0; i < n_train; ++i) order[i] = i;

    int max_sh = 0, max_sw = 0;
    if (in.size() == 3 && cfg.augment_shift > 0.0) {
        max_sh = static_cast<int>(std::floor(cfg.augment_shift * in[0] + 0.5));
        max_sw = static_cast<int>(std::floor(cfg.augment_shift * in[1] + 0.5));
    }

    TrainResult result;
    OptState state = make_opt_state(model, cfg);
    state.lr = cfg.lr0;

    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        if (std::find(cfg.milestones.begin(), cfg.milestones.end(), epoch) !=
            cfg.milestones.end())
            state.lr *= 0.1;
        state.epoch = epoch;

        // Snapshot for rollback on divergence.
        const std::vector<LayerParams> snapshot = model.params;

        // Fisher-Yates shuffle with the run seed; last partial batch kept.
        for (int i = n_train - 1; i > 0; --i) std::swap(order[i], order[rng.uniform_int(i + 1)]);

        double loss_sum = 0.0;
        int correct_sum = 0;
        bool diverged = false;
        for (int start = 0; start < n_train && !diverged; start += cfg.batch_size) {
            const int bn = std::min(cfg.batch_size, n_train - start);
            Shape bs = in;
            bs.insert(bs.begin(), bn);
            Tensor xb(bs);
            std::vector<int> yb(bn);
            for (int i = 0; i < bn; ++i) {
                const int idx = order[start + i];
                Tensor xi(in);
                std::copy(data.train_x.data() + static_cast<std::int64_t>(idx) * ex,
                          data.train_x.data() + static_cast<std::int64_t>(idx + 1) * ex,
                          xi.data());
                if (cfg.augment_flip || max_sh > 0 || max_sw > 0)
                    xi = augment_example(xi, in, cfg.augment_flip, max_sh, max_sw, rng);
                std::copy(xi.data(), xi.data() + ex, xb.data() + static_cast<std::int64_t>(i) * ex);
                yb[i] = data.train_y[idx];
            }
            double loss = 0.0;
            int correct = 0;
            try {
                const Grads g = grad(model, xb, yb, cfg, &loss, &correct);
                if (!std::isfinite(loss)) throw std::runtime_error("non-finite loss");
                sgd_nesterov_step(model, g, state, cfg);
            } catch (const std::runtime_error&) {
                model.params = snapshot;  // last good checkpoint
                diverged = true;
                break;
            }
            loss_sum += loss * bn;
            correct_sum += correct;
        }
        if (diverged) {
            result.diverged = true;
            break;
        }

        EpochMetrics m;
        m.epoch = epoch;
        m.lr = state.lr;
        m.train_loss = loss_sum / n_train;
        m.train_acc = static_cast<double>(correct_sum) / n_train;
        m.val_acc = evaluate_accuracy(model, data.test_x, data.test_y, cfg.batch_size);
        if (callback) callback(model, m);
        result.log.push_back(std::move(m));
    }
    return result;
}

void write_metrics_csv(std::ostream& os, const std::vector<EpochMetrics>& log,
                       const std::vector<double>& cert_eps) {
    os << "epoch,lr,train_loss,train_acc,val_acc";
    for (double e : cert_eps) os << ",cert_acc@" << e;
    os << "\n";
    for (const auto& m : log) {
        os << m.epoch << "," << m.lr << "," << m.train_loss << "," << m.train_acc << ","
           << m.val_acc;
        for (double v : m.cert_acc) os << "," << v;
        os << "\n";
    }
}

}  // namespace aol
