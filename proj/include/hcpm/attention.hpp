// Attention kernels over candidate features, with and without pruning masks,
// and the self/cross attention block built from them.

#pragma once

#include <utility>
#include <vector>

#include "hcpm/nn.hpp"
#include "hcpm/tensor.hpp"

namespace hcpm {

// Row mask over candidates. Entries are exactly 0 (pruned) or 1 (live);
// the soft flag marks relaxed masks used only by gradient verification,
// which may carry values in (0, 1).
struct PruneMask {
  Tensor values;  // [n]
  bool soft = false;

  static PruneMask ones(int n);
  static PruneMask from_values(const Tensor& values, bool soft = false);
  int size() const { return values.rank() == 1 ? values.dim(0) : 0; }
  int live_count() const;
  std::vector<int> live_indices() const;  // rows with value > 0.5
  bool all_live() const { return live_count() == size(); }
};

// softmax(Q K^T) V. No scaling, no mask.
Tensor vanilla_attention(const Tensor& q, const Tensor& k, const Tensor& v);

// phi(Q) (phi(K)^T V) with phi = elu + 1 and a per-row normalizer
// phi(Q) . sum_j phi(K_j), so rows are convex mixtures of V rows.
Tensor linear_attention(const Tensor& q, const Tensor& k, const Tensor& v);

// Linear attention with pruning applied in place: key rows are zeroed after
// phi, value rows are zeroed, and pruned query rows come out exactly zero.
// The normalizer sums over live keys only. Kept rows match the compacted
// variant bit for bit. Errors if every key is pruned.
Tensor implicit_pruning_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                                  const PruneMask& mq, const PruneMask& mkv);

struct DirectAttention {
  Tensor output;                   // [live_q x d]
  std::vector<int> query_indices;  // original row of each output row
};

// Gathers live rows on both sides and runs plain linear attention on the
// compacted arrays. Errors if either selection is empty.
DirectAttention direct_pruning_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                                         const PruneMask& mq, const PruneMask& mkv);

// out = carry with out[indices[r]] = compact[r]. Indices must be unique and
// in range; gradient reaches compact rows and untouched carry rows.
Tensor scatter_back(const Tensor& compact, const std::vector<int>& indices, const Tensor& carry);

enum class PruneVariant { implicit, direct };

struct AttnLayerParams {
  Linear q, k, v, merge;
  Tensor ln1_g, ln1_b;
  Linear ffn1, ffn2;  // 2d -> 2d -> d on concat(x, message)
  Tensor ln2_g, ln2_b;
};

AttnLayerParams make_attn_layer_params(ParamStore& store, const std::string& prefix, int d, Rng& rng);

struct SelfCrossParams {
  AttnLayerParams sa, ca;
};

// One attention layer: x attends to src, residual added. With masked=false
// runs the unpruned path (plain linear attention, no mask arithmetic);
// otherwise the variant decides between in-place masking and compaction.
// Pruned query rows carry their input features through unchanged.
Tensor attention_layer(const Tensor& x, const Tensor& src, const PruneMask& mq,
                       const PruneMask& mkv, const AttnLayerParams& params, int heads,
                       PruneVariant variant, bool masked);

// Self attention on each side, then cross attention from the post-self
// snapshots, symmetric in A and B.
std::pair<Tensor, Tensor> self_cross_block(const Tensor& fa, const Tensor& fb,
                                           const PruneMask& ma, const PruneMask& mb,
                                           const SelfCrossParams& params, int heads,
                                           PruneVariant variant, bool masked);

}  // namespace hcpm
