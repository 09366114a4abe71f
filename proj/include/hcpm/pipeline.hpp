// End-to-end matcher: encoder, candidate selection, masked attention blocks,
// dual-softmax matching, fine refinement, training, and evaluation.
//
// A forward pass selects the top-alpha coarse cells per side, runs the
// configured number of self/cross attention blocks, and from dics_from_block
// onward lets each block's keep head thin the candidate masks further. The
// final masks gate matching. In training mode keep bits are sampled
// straight-through from a Gumbel-Softmax; in eval mode they are the argmax.

#pragma once

#include <cstdint>
#include <iosfwd>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "hcpm/losses.hpp"
#include "hcpm/matching.hpp"
#include "hcpm/synthetic.hpp"

namespace hcpm {

enum class SuperviseMode { last, all };
enum class IpruneLabels { covisible, depth_validity };

struct PipelineConfig {
  // model
  int d_c = 64, d_f = 32;
  int n_blocks = 4, heads = 1;
  double alpha = 0.5;                 // static keep ratio, (0, 1]
  PruneVariant variant = PruneVariant::implicit;
  int dics_from_block = 0;            // first block with a keep head; >= n_blocks disables
  double gumbel_tau = 1.0;
  bool discard_after_prune = false;   // physically drop pruned candidates
  // matching
  double tau_m = 0.1;
  double theta_c = 0.2;
  int window = 5;
  // losses
  SuperviseMode supervise = SuperviseMode::last;
  CovisMode covis = CovisMode::bbox;
  IpruneLabels iprune_labels = IpruneLabels::covisible;
  double fine_sample_ratio = 0.3;
  double w_self = 0.5, w_inter = 0.3, w_coarse = 1.0, w_fine = 1.0;
  double focal_gamma = 2.0, focal_alpha = 0.25;
  // training
  double learning_rate = 1e-3;
  int steps = 2000;
  int batch_size = 1;
  uint64_t seed = 0;
  int log_every = 10;
  int eval_pairs = 20;
  // data
  int image_h = 64, image_w = 64;
  TextureFamily texture = TextureFamily::mixed;
  double plane_depth = 4.0;
  double second_plane_depth = 0.0;
  double max_rotation_deg = 10.0;
  double max_translation = 0.4;
  double invalid_fraction = 0.15;
  double min_covisible = 0.2;

  bool dics_enabled() const { return dics_from_block < n_blocks; }
  SceneConfig scene(uint64_t scene_seed) const;
  void validate() const;

  // Flat JSON object; unknown keys are an error. Enums are spelled out
  // ("implicit"/"direct", "last"/"all", "pointwise"/"bbox",
  // "covisible"/"depth_validity", "blobs"/"gratings"/"mixed").
  static PipelineConfig from_json_file(const std::string& path);
  static PipelineConfig from_json_text(const std::string& text);
  std::string to_json_text() const;
};

struct ModelParams {
  int d_c = 0, d_f = 0, n_blocks = 0, heads = 0;
  ParamStore store;
  EncoderParams encoder;
  ScoreMlpParams self_prune;
  struct Block {
    SelfCrossParams sc;
    DicsParams dics;
  };
  std::vector<Block> blocks;

  ModelParams(const PipelineConfig& cfg, uint64_t init_seed);
};

// Wall-clock nanoseconds per pipeline stage, accumulated over a forward pass.
struct StageClock {
  std::map<std::string, int64_t> ns;
  void add(const std::string& stage, int64_t nanos) { ns[stage] += nanos; }
};

struct BlockTrace {
  bool dics_ran = false;
  bool forced_a = false, forced_b = false;
  Tensor keep_prob_a, keep_prob_b;  // [rows x 2] at the time the head ran
  std::vector<int> grid_indices_a, grid_indices_b;
  std::vector<double> mask_a, mask_b;  // updated mask values, same rows
  int live_a = 0, live_b = 0;          // after the update
};

// Candidate array sizes seen by each stage, for the cost model.
struct LiveCounts {
  int cells_a = 0, cells_b = 0;
  int k_a = 0, k_b = 0;  // after static selection
  struct BlockDims {
    int rows_a = 0, rows_b = 0;    // array rows entering the block
    int live_a = 0, live_b = 0;    // mask-live rows entering the block
    bool dics_ran = false;
  };
  std::vector<BlockDims> blocks;
  int match_rows_a = 0, match_rows_b = 0;
  int fine_matches = 0;
};

struct ForwardResult {
  CandidateSet cand_a, cand_b;
  Tensor score_a, score_b;  // [cells], static keep scores
  MatchSet matches;
  std::vector<BlockTrace> trace;
  LiveCounts live;
  FeatureGrid fine_a, fine_b;
  int forced_keeps = 0;
};

// rng is only consumed in train mode; pass nullptr in eval mode.
ForwardResult forward(const Tensor& image_a, const Tensor& image_b, const ModelParams& params,
                      const PipelineConfig& cfg, SampleMode mode, Rng* rng,
                      SampleStyle style = SampleStyle::hard_st, StageClock* clock = nullptr);

struct LossBreakdown {
  double self_prune = 0, interactive = 0, coarse = 0, fine = 0, total = 0;
  int clamp_hits = 0;
  int gt_pairs = 0;        // mutual ground-truth pairs over the candidate sets
  int gt_pairs_live = 0;   // of those, pairs alive in both masks
  int fine_supervised = 0;
  int skipped_window = 0;     // ground truth fell outside the fine window
  int skipped_invisible = 0;  // match anchor not warpable
  bool coarse_empty = false;  // no ground-truth pairs to supervise
  Tensor total_tensor;  // scalar, in graph
};

// sample_rng drives the fine-term subsampling. fine_sigma_override pins the
// per-term variance weights (gradient verification).
LossBreakdown compute_losses(const ForwardResult& fwd, const PairSample& sample,
                             const PipelineConfig& cfg, Rng& sample_rng,
                             const std::vector<double>* fine_sigma_override = nullptr);

struct StepRecord {
  int step = 0;
  double self_prune = 0, interactive = 0, coarse = 0, fine = 0, total = 0;
  int live_a = 0, live_b = 0, matches = 0, gt_pairs = 0;
};

struct TrainResult {
  std::vector<StepRecord> log;
  bool diverged = false;
  int steps_done = 0;
  double final_total = 0.0;
};

// Streams one JSON object per logged step to metrics when given. On a
// non-finite loss or parameter, or a numeric failure inside the step, the
// last finite parameters are restored and training stops with diverged set.
TrainResult train(const PipelineConfig& cfg, ModelParams* params, std::ostream* metrics = nullptr);

struct EvalMetrics {
  double auc3 = 0, auc5 = 0, auc10 = 0;  // homography-corner recall AUC, pixels
  double precision3 = 0;                 // matches within 3 px of ground truth
  double mean_matches = 0;
  double mean_live_a = 0, mean_live_b = 0;
  int pairs = 0;
  int degenerate = 0;  // pairs with too few matches to fit a homography
};

// Renders eval pairs from cfg's scene with seeds eval_seed + i. Requires a
// single-plane scene so the ground-truth homography exists.
EvalMetrics evaluate(const PipelineConfig& cfg, const ModelParams& params, int n_pairs,
                     uint64_t eval_seed, std::ostream* per_pair = nullptr);

// Least-squares homography from >= 4 correspondences (normalized DLT).
// Returns false when the system is degenerate.
bool fit_homography(const std::vector<std::array<double, 2>>& pa,
                    const std::vector<std::array<double, 2>>& pb, Mat3* h);

// Largest displacement of the four image corners between the two maps.
double max_corner_error(const Mat3& h_est, const Mat3& h_gt, int width, int height);

// Area under the recall-vs-error curve up to threshold, normalized to [0, 1].
// Non-finite errors count as failures.
double recall_auc(std::vector<double> errors, double threshold);

// Eval-mode forward on a raw image pair.
MatchSet match_pair(const Tensor& image_a, const Tensor& image_b, const ModelParams& params,
                    const PipelineConfig& cfg);

// x_a,y_a,x_b,y_b,confidence with 6 decimals.
void write_matches_csv(std::ostream& out, const MatchSet& matches);

// Binary little-endian checkpoint of every parameter in declaration order,
// headed by the dimensions it was built with.
void save_checkpoint(const std::string& path, const ModelParams& params);
void load_checkpoint(const std::string& path, ModelParams* params);

}  // namespace hcpm
