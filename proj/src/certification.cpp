#include "aolkit/certification.hpp"

#include <cmath>
#include <ostream>

#include "aolkit/rng.hpp"

namespace aol {

namespace {

constexpr double kSqrt2 = 1.4142135623730951;

int argmax_of(const double* s, int l) {
    int best = 0;
    for (int i = 1; i < l; ++i)
        if (s[i] > s[best]) best = i;
    return best;
}

int runner_up(const double* s, int l, int skip) {
    int best = skip == 0 ? 1 : 0;
    for (int i = 0; i < l; ++i)
        if (i != skip && s[i] > s[best]) best = i;
    return best;
}

}  // namespace

double margin(const Tensor& logits, int y) {
    if (logits.rank() != 1 || logits.dim(0) < 2)
        throw std::invalid_argument("margin: need a logit vector with at least 2 classes");
    const int l = logits.dim(0);
    if (y < 0 || y >= l)
        throw std::invalid_argument("margin: class index " + std::to_string(y) +
                                    " out of range [0, " + std::to_string(l) + ")");
    const double* s = logits.data();
    const double other = s[runner_up(s, l, y)];
    return std::max(0.0, s[y] - other);
}

bool certified(double margin_value, double eps, double lipschitz_bound) {
    if (eps < 0.0) throw std::invalid_argument("certified: eps must be nonnegative");
    if (lipschitz_bound <= 0.0)
        throw std::invalid_argument("certified: Lipschitz bound must be positive");
    return margin_value > kSqrt2 * lipschitz_bound * eps;
}

CertReport certified_robust_accuracy(const Model& model, const Tensor& x,
                                     const std::vector<int>& labels,
                                     const std::vector<double>& eps_list,
                                     double lipschitz_bound) {
    const Shape in = model.input_shape();
    const std::int64_t ex = numel_of_shape(in);
    const int total = static_cast<int>(labels.size());
    if (x.numel() != static_cast<std::int64_t>(total) * ex)
        throw std::invalid_argument("certified_robust_accuracy: dataset shape " +
                                    shape_to_string(x.shape()) +
                                    " does not match model input " + shape_to_string(in));

    CertReport report;
    report.eps_list = eps_list;
    report.lipschitz_bound = lipschitz_bound;
    report.total = total;
    report.margins.resize(total);
    report.correct.resize(total);
    report.certified_count.assign(eps_list.size(), 0);

    const int batch = 256;
    int clean = 0;
    for (int start = 0; start < total; start += batch) {
        const int n = std::min(batch, total - start);
        Shape bs = in;
        bs.insert(bs.begin(), n);
        Tensor xb(bs);
        std::copy(x.data() + start * ex, x.data() + (start + n) * ex, xb.data());
        const Tensor logits = forward(model, xb);
        const int l = logits.dim(1);
        for (int i = 0; i < n; ++i) {
            const double* s = logits.data() + static_cast<std::int64_t>(i) * l;
            const int y = labels[start + i];
            const double other = s[runner_up(s, l, y)];
            const double m = std::max(0.0, s[y] - other);
            const bool ok = s[y] > other;  // argmax ties count as incorrect
            report.margins[start + i] = m;
            report.correct[start + i] = ok ? 1 : 0;
            if (ok) ++clean;
            for (std::size_t e = 0; e < eps_list.size(); ++e)
                if (ok && certified(m, eps_list[e], lipschitz_bound))
                    ++report.certified_count[e];
        }
    }
    report.clean_acc = total > 0 ? static_cast<double>(clean) / total : 0.0;
    report.cert_acc.resize(eps_list.size());
    for (std::size_t e = 0; e < eps_list.size(); ++e)
        report.cert_acc[e] =
            total > 0 ? static_cast<double>(report.certified_count[e]) / total : 0.0;
    return report;
}

void CertReport::write_csv(std::ostream& os) const {
    os << "eps,certified,total,cert_acc\n";
    for (std::size_t e = 0; e < eps_list.size(); ++e)
        os << eps_list[e] << "," << certified_count[e] << "," << total << "," << cert_acc[e]
           << "\n";
}

namespace {

/// Gradient of (s_runnerup - s_pred) w.r.t. the input.
Tensor logit_gap_input_grad(const Model& model, const Tensor& x_single, int pred) {
    Shape bs = model.input_shape();
    bs.insert(bs.begin(), 1);
    ForwardTrace trace;
    const Tensor logits = forward_trace(model, x_single.reshaped(bs), trace);
    const int l = logits.dim(1);
    const int r = runner_up(logits.data(), l, pred);
    Tensor delta({1, l});
    delta[r] = 1.0;
    delta[pred] = -1.0;
    Tensor g = delta;
    for (int i = static_cast<int>(model.layer_count()) - 1; i >= 0; --i)
        g = layer_backward(model.spec.layers[i], model.params[i], trace.caches[i], g, nullptr);
    return g.reshaped(model.input_shape());
}

bool prediction_flipped(const Model& model, const Tensor& x_adv, int pred) {
    const Tensor logits = forward(model, x_adv);
    return argmax_of(logits.data(), logits.dim(0)) != pred;
}

}  // namespace

bool attack_check(const Model& model, const Tensor& x, int y, double eps, int n_trials,
                  std::uint64_t seed, double lipschitz_bound) {
    const Tensor logits = forward(model, x);
    const int l = logits.dim(0);
    const double m = margin(logits, y);
    const int pred = argmax_of(logits.data(), l);
    if (pred != y || !certified(m, eps, lipschitz_bound))
        throw std::invalid_argument("attack_check: input is not certified at eps=" +
                                    std::to_string(eps));
    if (eps == 0.0) return true;

    Rng rng(seed);
    const std::int64_t d = x.numel();
    Tensor best_delta(x.shape());
    double best_gap = -1e300;

    for (int trial = 0; trial < n_trials; ++trial) {
        Tensor delta(x.shape());
        double nrm = 0.0;
        for (std::int64_t i = 0; i < d; ++i) {
            delta[i] = rng.gaussian();
            nrm += delta[i] * delta[i];
        }
        nrm = std::sqrt(nrm);
        if (nrm == 0.0) continue;
        for (std::int64_t i = 0; i < d; ++i) delta[i] *= eps / nrm;
        const Tensor adv = aol::add(x, delta);
        const Tensor s = forward(model, adv);
        if (argmax_of(s.data(), l) != pred) return false;
        const double gap = s[runner_up(s.data(), l, pred)] - s[pred];
        if (gap > best_gap) {
            best_gap = gap;
            best_delta = delta;
        }
    }

    // Gradient refinement of the strongest random trial, projected to the ball.
    Tensor delta = best_delta;
    const double step = eps / 4.0;
    for (int it = 0; it < 20; ++it) {
        const Tensor adv = aol::add(x, delta);
        if (prediction_flipped(model, adv, pred)) return false;
        Tensor g = logit_gap_input_grad(model, adv, pred);
        const double gn = norm2(g);
        if (gn == 0.0) break;
        for (std::int64_t i = 0; i < d; ++i) delta[i] += step * g[i] / gn;
        const double dn = norm2(delta);
        if (dn > eps)
            for (std::int64_t i = 0; i < d; ++i) delta[i] *= eps / dn;
    }
    return !prediction_flipped(model, aol::add(x, delta), pred);
}

}  // namespace aol
