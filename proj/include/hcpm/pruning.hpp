// Candidate selection: static top-k scoring before the attention blocks and
// the differentiable keep/drop decision applied between them.

#pragma once

#include <vector>

#include "hcpm/attention.hpp"
#include "hcpm/encoder.hpp"
#include "hcpm/nn.hpp"
#include "hcpm/tensor.hpp"

namespace hcpm {

// Two-layer MLP head, hidden dim d/2, gelu between.
struct ScoreMlpParams {
  Linear fc1, fc2;
};

ScoreMlpParams make_score_mlp_params(ParamStore& store, const std::string& prefix, int d,
                                     int out_dim, Rng& rng);

// Keep-probability head applied to normalized features: LayerNorm (affine)
// then the two-layer MLP to 2 channels; softmax happens in
// dics_keep_probability.
struct DicsParams {
  Tensor ln_g, ln_b;
  ScoreMlpParams mlp;
};

DicsParams make_dics_params(ParamStore& store, const std::string& prefix, int d, Rng& rng);

struct CandidateSet {
  Tensor features;               // [k x d], in graph
  std::vector<int> grid_indices; // row * grid_w + col of each candidate
  PruneMask mask;
  int grid_h = 0, grid_w = 0;
};

// Per-cell keep score in (0, 1): sigmoid of the MLP over flattened coarse
// features. Returns [cells].
Tensor self_prune_score(const FeatureGrid& coarse, const ScoreMlpParams& params);

// Keeps the k = round(cells * alpha) highest-scoring cells (round half up,
// clamped to [1, cells]); ties keep the lower cell index. Selected features
// are scaled by their score so the score head stays trainable. candidates
// come out with an all-ones mask. alpha must lie in (0, 1].
CandidateSet topk_select(const FeatureGrid& coarse, const Tensor& scores, double alpha);

// Softmax over {drop, keep} logits per candidate: [k x 2], rows sum to 1.
// Channel 0 is drop, channel 1 keep.
Tensor dics_keep_probability(const Tensor& features, const DicsParams& params);

enum class SampleMode { train, eval };
enum class SampleStyle { hard_st, soft };

// Train: Gumbel-Softmax draw at the given temperature; forward pass emits the
// hard keep bit, backward follows the relaxed sample (straight-through).
// SampleStyle::soft skips the hard override (gradient verification only).
// Eval: deterministic keep iff p_keep >= p_drop, no rng consumption.
// temperature must be positive in train mode.
Tensor gumbel_softmax_sample(const Tensor& keep_prob, double temperature, SampleMode mode,
                             Rng& rng, SampleStyle style = SampleStyle::hard_st);

// Elementwise product, so a candidate dropped once never comes back.
PruneMask update_mask(const Tensor& keep, const PruneMask& prior);

struct KeepDecision {
  Tensor keep_prob;   // [k x 2]
  Tensor keep;        // [k]
  PruneMask updated;
  bool force_kept = false;  // guard fired: everything was pruned
};

// One DICS step: probability head, sample, mask update. If the update would
// zero the whole mask, the highest keep-probability candidate among the
// previously live ones is force-kept.
KeepDecision dics_apply(const Tensor& features, const PruneMask& prior, const DicsParams& params,
                        SampleMode mode, double temperature, Rng& rng,
                        SampleStyle style = SampleStyle::hard_st);

}  // namespace hcpm
