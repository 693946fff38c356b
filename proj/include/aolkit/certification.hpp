#pragma once

#include <cstdint>
#include <iosfwd>
#include <vector>

#include "aolkit/layers.hpp"

namespace aol {

/// Margin of a logit vector: max(0, s_y - max_{i != y} s_i).
double margin(const Tensor& logits, int y);

/// Lipschitz margin rule: certified iff margin > sqrt(2) * L * eps
/// (strict, so ties are not certified).
bool certified(double margin_value, double eps, double lipschitz_bound = 1.0);

struct CertReport {
    std::vector<double> eps_list;
    double lipschitz_bound = 1.0;
    int total = 0;
    double clean_acc = 0.0;  ///< strict argmax; ties count as incorrect
    std::vector<int> certified_count;  ///< per eps
    std::vector<double> cert_acc;      ///< per eps
    std::vector<double> margins;       ///< per example (0 for misclassified)
    std::vector<char> correct;         ///< per example

    void write_csv(std::ostream& os) const;
};

CertReport certified_robust_accuracy(const Model& model, const Tensor& x,
                                     const std::vector<int>& labels,
                                     const std::vector<double>& eps_list,
                                     double lipschitz_bound = 1.0);

/// Soundness probe for a point certified at `eps`: samples `n_trials`
/// perturbations uniformly on the L2 sphere of radius eps, then refines the
/// best one by 20 gradient-ascent steps projected to the ball. Returns true
/// iff no perturbation changes the predicted class. Throws if the point is
/// not certified at eps.
bool attack_check(const Model& model, const Tensor& x, int y, double eps, int n_trials,
                  std::uint64_t seed = 0, double lipschitz_bound = 1.0);

}  // namespace aol
