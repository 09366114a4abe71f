// Training losses. Candidate scoring is supervised with binary cross entropy,
// keep decisions with a focal binary loss, coarse matches with a focal
// negative log likelihood over ground-truth positive confidences, and fine
// offsets with a squared error weighted by the inverse heatmap variance
// (treated as a constant, so only the offsets receive gradient).
//
// Logarithms clamp their argument at 1e-7; every clamped entry is counted so
// callers can monitor saturation.

#pragma once

#include <array>
#include <utility>
#include <vector>

#include "hcpm/tensor.hpp"

namespace hcpm {

inline constexpr double kLogClampEps = 1e-7;

// probs: rank 1 in [0, 1]; labels 0/1. Mean over entries.
Tensor binary_cross_entropy(const Tensor& probs, const std::vector<double>& labels,
                            int* clamp_hits);

// keep_prob: [k x 2] rows summing to 1 (column 1 = keep). Mean over rows of
// -alpha (1 - p_t)^gamma log p_t. gamma = 0, alpha = 1 recovers cross
// entropy on the keep column.
Tensor focal_binary(const Tensor& keep_prob, const std::vector<double>& labels, double gamma,
                    double alpha, int* clamp_hits);

// sim: [k_a x k_b] similarity logits; the confidence p at each positive is
// the product of its row- and column-softmax, evaluated in log space so a
// saturated softmax still carries gradient. Mean of -alpha (1 - p)^gamma
// log p over the positives; zero when the list is empty. clamp_hits counts
// positives whose confidence sits below kLogClampEps (reported, not
// clamped).
Tensor coarse_nll(const Tensor& sim, const std::vector<std::pair<int, int>>& positives,
                  double gamma, double alpha, int* clamp_hits);

struct FineTerm {
  Tensor offset;               // [1 x 2]
  Tensor variance;             // [1 x 1]
  std::array<double, 2> gt{};  // fine-cell units
};

// Mean over terms of ||offset - gt||^2 / sigma^2 with sigma^2 detached and
// floored at sigma_floor. sigma_override, when given, replaces the measured
// variances entry for entry (used by gradient checks to pin the weights).
Tensor fine_offset_loss(const std::vector<FineTerm>& terms,
                        const std::vector<double>* sigma_override = nullptr,
                        double sigma_floor = 1e-6);

Tensor weighted_total(const Tensor& self_prune, const Tensor& interactive, const Tensor& coarse,
                      const Tensor& fine, double w_self, double w_inter, double w_coarse,
                      double w_fine);

}  // namespace hcpm
