// Closed-form FLOP accounting and wall-clock stage timing.
//
// The FLOP model charges, per element: 2 for a multiply-add inside a matrix
// or convolution product, 1 for any other arithmetic op, activation, or mask
// multiply, 4 for softmax, and 6 for layer-norm statistics plus 2 for its
// affine scale/shift. Counts follow the eval-mode forward pass exactly: the
// in-place masked path is charged at full array sizes plus its mask
// arithmetic, the compacted path only for the rows it actually touches.

#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "hcpm/pipeline.hpp"

namespace hcpm {

struct StageCost {
  std::string name;
  int64_t flops = 0;
};

struct CostReport {
  std::vector<StageCost> stages;
  int64_t total = 0;

  int64_t stage(const std::string& name) const;  // 0 when absent
  // Sum over stages whose name starts with the prefix ("block_", "dics_").
  int64_t stage_prefix(const std::string& prefix) const;
  std::string to_json() const;  // single line
};

// Cost of one forward pass with the candidate counts a real pass recorded.
CostReport count_flops(const PipelineConfig& cfg, const LiveCounts& live);

struct StageTiming {
  std::string name;
  double median_ns = 0, iqr_ns = 0;
  bool coarse = false;  // median under 1us: treat as timer noise
};

struct TimingReport {
  std::vector<StageTiming> stages;
  double total_median_ns = 0, total_iqr_ns = 0;
  int repeats = 0;
  std::string to_json() const;  // single line
};

// Repeated eval-mode forwards on one pair; warmup runs are discarded and per
// stage medians with interquartile ranges are reported.
TimingReport time_pipeline(const PipelineConfig& cfg, const ModelParams& params,
                           const Tensor& image_a, const Tensor& image_b, int repeats,
                           int warmup = 2);

}  // namespace hcpm
