// Candidate-to-candidate matching. Coarse matches come from a dual-softmax
// over feature similarities with mutual-argmax selection; each surviving pair
// is refined to sub-pixel accuracy by a softmax expectation over a small
// window of fine features, which also yields a spread estimate used to weight
// the refinement loss.

#pragma once

#include <array>
#include <vector>

#include "hcpm/encoder.hpp"
#include "hcpm/pruning.hpp"

namespace hcpm {

struct CoarseMatch {
  int ia = 0, ib = 0;  // candidate rows
  double confidence = 0.0;
};

struct FineMatch {
  int ia = 0, ib = 0;
  double confidence = 0.0;
  std::array<double, 2> point_a{};  // pixels in image A (cell anchor)
  std::array<double, 2> point_b{};  // pixels in image B, refined
  Tensor offset;                    // [1 x 2] fine-cell units, differentiable
  Tensor variance;                  // [1 x 1] heatmap spread, differentiable
};

struct MatchSet {
  Tensor similarity;  // [k_a x k_b] temperature-scaled logits; when masked, each
                      // dead endpoint subtracts a finite penalty (loss-facing)
  Tensor confidence;  // [k_a x k_b] dual-softmax product, zero on dead rows/cols
  std::vector<CoarseMatch> coarse;
  std::vector<FineMatch> fine;
  int dropped_border = 0;  // coarse matches whose fine window left the image
};

// Dual-softmax confidence followed by mutual-argmax selection with threshold
// theta_c. With masked set, pruned rows and columns get a -1e9 logit bias and
// the confidence matrix is multiplied by the outer product of the masks, so
// dead candidates can never emit a match and mask values stay on the
// gradient path.
MatchSet coarse_match(const CandidateSet& a, const CandidateSet& b, double tau_m, double theta_c,
                      bool masked);

// Correlates the fine feature under each match's A-side anchor against a
// window x window patch around the B-side anchor, then takes the softmax
// expectation of the offset and its variance. Matches whose window does not
// fit inside image B are dropped and counted.
void fine_refine(MatchSet* matches, const CandidateSet& a, const CandidateSet& b,
                 const FeatureGrid& fine_a, const FeatureGrid& fine_b, int window);

}  // namespace hcpm
