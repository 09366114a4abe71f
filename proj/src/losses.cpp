#include "hcpm/losses.hpp"

#include <stdexcept>
#include <string>

namespace hcpm {

namespace {

int count_below(const Tensor& t, double eps) {
  int n = 0;
  for (double v : *t.data) {
    if (v < eps) ++n;
  }
  return n;
}

Tensor labels_tensor(const std::vector<double>& labels, int n, const char* where) {
  if (static_cast<int>(labels.size()) != n) {
    throw std::invalid_argument(std::string(where) + ": " + std::to_string(labels.size()) +
                                " labels for " + std::to_string(n) + " entries");
  }
  for (double y : labels) {
    if (y != 0.0 && y != 1.0) throw std::invalid_argument(std::string(where) + ": labels must be 0 or 1");
  }
  return Tensor::from({n}, labels);
}

}  // namespace

Tensor binary_cross_entropy(const Tensor& probs, const std::vector<double>& labels,
                            int* clamp_hits) {
  if (probs.rank() != 1) throw std::invalid_argument("binary_cross_entropy: probs must be rank 1");
  const int n = probs.dim(0);
  const Tensor y = labels_tensor(labels, n, "binary_cross_entropy");
  const Tensor one = Tensor::full({n}, 1.0);
  const Tensor not_y = sub(one, y);
  const Tensor not_p = sub(one, probs);
  if (clamp_hits != nullptr) {
    *clamp_hits += count_below(probs, kLogClampEps) + count_below(not_p, kLogClampEps);
  }
  const Tensor ll = add(mul(y, log_clamped(probs, kLogClampEps)),
                        mul(not_y, log_clamped(not_p, kLogClampEps)));
  return neg(mean_all(ll));
}

Tensor focal_binary(const Tensor& keep_prob, const std::vector<double>& labels, double gamma,
                    double alpha, int* clamp_hits) {
  if (keep_prob.rank() != 2 || keep_prob.dim(1) != 2) {
    throw std::invalid_argument("focal_binary: keep_prob must be [k x 2]");
  }
  if (gamma < 0.0) throw std::invalid_argument("focal_binary: gamma must be >= 0");
  const int k = keep_prob.dim(0);
  const Tensor y = labels_tensor(labels, k, "focal_binary");
  const Tensor one = Tensor::full({k}, 1.0);
  const Tensor p1 = reshape_copy(slice_cols(keep_prob, 1, 2), {k});

  // p_t = p1 where y = 1, else 1 - p1.
  const Tensor pt = add(mul(y, p1), mul(sub(one, y), sub(one, p1)));
  if (clamp_hits != nullptr) *clamp_hits += count_below(pt, kLogClampEps);

  const Tensor focus = pow_const(sub(one, pt), gamma);
  return neg(scale(mean_all(mul(focus, log_clamped(pt, kLogClampEps))), alpha));
}

Tensor coarse_nll(const Tensor& sim, const std::vector<std::pair<int, int>>& positives,
                  double gamma, double alpha, int* clamp_hits) {
  if (sim.rank() != 2) throw std::invalid_argument("coarse_nll: sim must be rank 2");
  if (positives.empty()) return Tensor::scalar(0.0);
  const int ka = sim.dim(0), kb = sim.dim(1);
  std::vector<int> rows;
  rows.reserve(positives.size());
  for (const auto& [i, j] : positives) {
    if (i < 0 || i >= ka || j < 0 || j >= kb) {
      throw std::out_of_range("coarse_nll: positive (" + std::to_string(i) + ", " +
                              std::to_string(j) + ") outside " + std::to_string(ka) + "x" +
                              std::to_string(kb));
    }
    rows.push_back(i * kb + j);
  }
  const int m = static_cast<int>(rows.size());
  // log p stays well conditioned however peaked the logits are; the gradient
  // keeps the (p - 1) softmax form instead of dying in a clamped log.
  const Tensor log_conf = add(log_softmax(sim, 1), log_softmax(sim, 0));
  const Tensor lp = reshape_copy(gather_rows(reshape_copy(log_conf, {ka * kb, 1}), rows), {m});
  const Tensor p = exp_op(lp);
  if (clamp_hits != nullptr) *clamp_hits += count_below(p, kLogClampEps);
  const Tensor focus = pow_const(sub(Tensor::full({m}, 1.0), p), gamma);
  return neg(scale(mean_all(mul(focus, lp)), alpha));
}

Tensor fine_offset_loss(const std::vector<FineTerm>& terms,
                        const std::vector<double>* sigma_override, double sigma_floor) {
  if (terms.empty()) return Tensor::scalar(0.0);
  if (sigma_override != nullptr && sigma_override->size() != terms.size()) {
    throw std::invalid_argument("fine_offset_loss: override has " +
                                std::to_string(sigma_override->size()) + " entries for " +
                                std::to_string(terms.size()) + " terms");
  }
  Tensor total = Tensor::scalar(0.0);
  for (size_t i = 0; i < terms.size(); ++i) {
    const auto& t = terms[i];
    if (t.offset.rank() != 2 || t.offset.dim(0) != 1 || t.offset.dim(1) != 2) {
      throw std::invalid_argument("fine_offset_loss: offset must be [1 x 2]");
    }
    const double sigma2 = sigma_override != nullptr
                              ? (*sigma_override)[i]
                              : std::max(t.variance.value(), sigma_floor);
    if (sigma2 <= 0.0) throw std::invalid_argument("fine_offset_loss: sigma^2 must be > 0");
    const Tensor d = sub(t.offset, Tensor::from({1, 2}, {t.gt[0], t.gt[1]}));
    total = add(total, scale(sum_all(mul(d, d)), 1.0 / sigma2));
  }
  return scale(total, 1.0 / static_cast<double>(terms.size()));
}

Tensor weighted_total(const Tensor& self_prune, const Tensor& interactive, const Tensor& coarse,
                      const Tensor& fine, double w_self, double w_inter, double w_coarse,
                      double w_fine) {
  return add(add(scale(self_prune, w_self), scale(interactive, w_inter)),
             add(scale(coarse, w_coarse), scale(fine, w_fine)));
}

}  // namespace hcpm
