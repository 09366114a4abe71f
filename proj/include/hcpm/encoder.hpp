// Toy two-scale convolutional encoder: 1/8 coarse features for matching,
// 1/2 fine features for sub-pixel refinement.

#pragma once

#include "hcpm/nn.hpp"
#include "hcpm/tensor.hpp"

namespace hcpm {

enum class GridScale { coarse, fine };  // coarse = 1/8 of input, fine = 1/2

struct FeatureGrid {
  int h = 0, w = 0, channels = 0;
  GridScale scale = GridScale::coarse;
  Tensor values;  // [h x w x channels]

  int cells() const { return h * w; }
  // [cells x channels] copy for row-indexed candidate ops.
  Tensor flat() const { return reshape_copy(values, {h * w, channels}); }
};

// Three stride-2 stages (1 -> d_f -> d_c -> d_c) with gelu between, plus a
// lateral 1x1 at 1/2 merged with the upsampled coarse map for the fine grid.
struct EncoderParams {
  Tensor conv1_w, conv1_b;
  Tensor conv2_w, conv2_b;
  Tensor conv3_w, conv3_b;
  Tensor lateral_w, lateral_b;
  Tensor topdown_w, topdown_b;
};

EncoderParams make_encoder_params(ParamStore& store, int d_c, int d_f, Rng& rng);

// image: [h x w x 1] grayscale in [0, 1]; h and w must be divisible by 8.
// Returns {coarse [h/8 x w/8 x d_c], fine [h/2 x w/2 x d_f]}.
std::pair<FeatureGrid, FeatureGrid> encode(const Tensor& image, const EncoderParams& params);

// Fixed 2-D sinusoidal code, one sin/cos pair per axis per frequency, added
// to the features. Coarse grids only; channels must be divisible by 4.
FeatureGrid positional_encoding(const FeatureGrid& grid);

// The raw [cells x d] code table for a grid, cached per (h, w, d).
Tensor positional_code_table(int h, int w, int d);

}  // namespace hcpm
