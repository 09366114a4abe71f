#include "hcpm/pruning.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace hcpm {

ScoreMlpParams make_score_mlp_params(ParamStore& store, const std::string& prefix, int d,
                                     int out_dim, Rng& rng) {
  if (d < 2) throw std::invalid_argument("score mlp: feature dim too small");
  const int hidden = d / 2;
  ScoreMlpParams p;
  p.fc1.w = store.add(prefix + ".fc1.w", {d, hidden});
  p.fc1.b = store.add(prefix + ".fc1.b", {hidden});
  p.fc2.w = store.add(prefix + ".fc2.w", {hidden, out_dim});
  p.fc2.b = store.add(prefix + ".fc2.b", {out_dim});
  init_xavier(p.fc1.w, d, hidden, rng);
  init_xavier(p.fc2.w, hidden, out_dim, rng);
  return p;
}

DicsParams make_dics_params(ParamStore& store, const std::string& prefix, int d, Rng& rng) {
  DicsParams p;
  p.ln_g = store.add(prefix + ".ln.g", {d});
  p.ln_b = store.add(prefix + ".ln.b", {d});
  std::fill(p.ln_g.data->begin(), p.ln_g.data->end(), 1.0);
  p.mlp = make_score_mlp_params(store, prefix + ".mlp", d, 2, rng);
  // Keep channel starts biased up (p_keep ~ 0.88) so stacked heads don't
  // wipe out the candidate set before they learn what to drop.
  (*p.mlp.fc2.b.data)[1] = 2.0;
  return p;
}

namespace {

Tensor score_mlp(const Tensor& x, const ScoreMlpParams& p) {
  return p.fc2(gelu(p.fc1(x)));
}

}  // namespace

Tensor self_prune_score(const FeatureGrid& coarse, const ScoreMlpParams& params) {
  if (coarse.scale != GridScale::coarse) {
    throw std::invalid_argument("self_prune_score: expects the coarse grid");
  }
  Tensor logits = score_mlp(coarse.flat(), params);  // [cells x 1]
  return reshape_copy(sigmoid(logits), {coarse.cells()});
}

CandidateSet topk_select(const FeatureGrid& coarse, const Tensor& scores, double alpha) {
  if (!(alpha > 0.0) || alpha > 1.0) {
    throw std::invalid_argument("topk_select: alpha " + std::to_string(alpha) +
                                " outside (0, 1]");
  }
  const int cells = coarse.cells();
  if (scores.rank() != 1 || scores.dim(0) != cells) {
    throw std::invalid_argument("topk_select: " + std::to_string(scores.numel()) +
                                " scores for " + std::to_string(cells) + " cells");
  }
  const int64_t k_raw = std::llround(std::floor(cells * alpha + 0.5));
  const int k = static_cast<int>(std::clamp<int64_t>(k_raw, 1, cells));

  std::vector<int> order(static_cast<size_t>(cells));
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
    return (*scores.data)[static_cast<size_t>(a)] > (*scores.data)[static_cast<size_t>(b)];
  });
  std::vector<int> selected(order.begin(), order.begin() + k);
  std::sort(selected.begin(), selected.end());  // grid order keeps selection readable

  CandidateSet set;
  set.grid_indices = selected;
  set.grid_h = coarse.h;
  set.grid_w = coarse.w;
  set.mask = PruneMask::ones(k);
  set.features = mul_rows(gather_rows(coarse.flat(), selected), gather_rows(scores, selected));
  return set;
}

Tensor dics_keep_probability(const Tensor& features, const DicsParams& params) {
  if (features.rank() != 2) {
    throw std::invalid_argument("dics_keep_probability: features must be [k x d]");
  }
  Tensor normed = add_rows(mul_cols(layer_norm(features, 1), params.ln_g), params.ln_b);
  return softmax(score_mlp(normed, params.mlp), 1);
}

Tensor gumbel_softmax_sample(const Tensor& keep_prob, double temperature, SampleMode mode,
                             Rng& rng, SampleStyle style) {
  if (keep_prob.rank() != 2 || keep_prob.dim(1) != 2) {
    throw std::invalid_argument("gumbel_softmax_sample: keep_prob must be [k x 2]");
  }
  const int k = keep_prob.dim(0);
  if (mode == SampleMode::eval) {
    Tensor out = Tensor::zeros({k});
    for (int i = 0; i < k; ++i) {
      const double p0 = (*keep_prob.data)[static_cast<size_t>(i) * 2];
      const double p1 = (*keep_prob.data)[static_cast<size_t>(i) * 2 + 1];
      (*out.data)[static_cast<size_t>(i)] = p1 >= p0 ? 1.0 : 0.0;
    }
    return out;
  }
  if (!(temperature > 0.0)) {
    throw std::invalid_argument("gumbel_softmax_sample: temperature " +
                                std::to_string(temperature) + " must be positive in train mode");
  }
  Tensor noise = Tensor::zeros({k, 2});
  for (double& g : *noise.data) g = rng.gumbel();
  Tensor y = scale(add(log_clamped(keep_prob), noise), 1.0 / temperature);
  Tensor soft_keep = reshape_copy(slice_cols(softmax(y, 1), 1, 2), {k});
  if (style == SampleStyle::soft) return soft_keep;

  // Straight-through: forward emits the hard argmax, backward the relaxation.
  Tensor shift = Tensor::zeros({k});
  for (int i = 0; i < k; ++i) {
    const double y0 = (*y.data)[static_cast<size_t>(i) * 2];
    const double y1 = (*y.data)[static_cast<size_t>(i) * 2 + 1];
    const double hard = y1 > y0 ? 1.0 : 0.0;
    (*shift.data)[static_cast<size_t>(i)] = hard - (*soft_keep.data)[static_cast<size_t>(i)];
  }
  return add(soft_keep, shift);
}

PruneMask update_mask(const Tensor& keep, const PruneMask& prior) {
  if (keep.rank() != 1 || keep.dim(0) != prior.size()) {
    throw std::invalid_argument("update_mask: keep length " + std::to_string(keep.numel()) +
                                " vs mask length " + std::to_string(prior.size()));
  }
  // Straight-through keeps are hard 0/1; only a relaxed decision makes the
  // product fractional, which marks the mask soft and skips validation.
  bool keep_is_binary = true;
  for (double v : *keep.data) {
    if (v != 0.0 && v != 1.0) {
      keep_is_binary = false;
      break;
    }
  }
  return PruneMask::from_values(mul(keep, prior.values), prior.soft || !keep_is_binary);
}

KeepDecision dics_apply(const Tensor& features, const PruneMask& prior, const DicsParams& params,
                        SampleMode mode, double temperature, Rng& rng, SampleStyle style) {
  if (features.dim(0) != prior.size()) {
    throw std::invalid_argument("dics_apply: " + std::to_string(features.dim(0)) +
                                " candidates vs mask length " + std::to_string(prior.size()));
  }
  KeepDecision dec;
  dec.keep_prob = dics_keep_probability(features, params);
  dec.keep = gumbel_softmax_sample(dec.keep_prob, temperature, mode, rng, style);

  if (style == SampleStyle::hard_st || mode == SampleMode::eval) {
    bool any_live = false;
    for (int i = 0; i < prior.size(); ++i) {
      if ((*dec.keep.data)[static_cast<size_t>(i)] > 0.5 &&
          (*prior.values.data)[static_cast<size_t>(i)] > 0.5) {
        any_live = true;
        break;
      }
    }
    if (!any_live) {
      int best = -1;
      double best_p = -1.0;
      for (int i = 0; i < prior.size(); ++i) {
        if ((*prior.values.data)[static_cast<size_t>(i)] <= 0.5) continue;
        const double p1 = (*dec.keep_prob.data)[static_cast<size_t>(i) * 2 + 1];
        if (p1 > best_p) {
          best_p = p1;
          best = i;
        }
      }
      if (best < 0) throw std::logic_error("dics_apply: prior mask has no live candidate");
      // Rebuild the straight-through shift for the forced row only.
      Tensor patch = Tensor::zeros({prior.size()});
      (*patch.data)[static_cast<size_t>(best)] =
          1.0 - (*dec.keep.data)[static_cast<size_t>(best)];
      dec.keep = add(dec.keep, patch);
      dec.force_kept = true;
    }
  }
  dec.updated = update_mask(dec.keep, prior);
  return dec;
}

}  // namespace hcpm
