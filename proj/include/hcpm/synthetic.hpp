// Procedural image pairs with exact ground truth. A textured plane (plus an
// optional nearer slab) is rendered from two cameras whose relative pose is
// drawn at random; depth maps, pose, intrinsics, and, for the single-plane
// case, the pixel homography come straight from the construction.

#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "hcpm/geometry.hpp"
#include "hcpm/nn.hpp"

namespace hcpm {

enum class TextureFamily { blobs, gratings, mixed };

struct SceneConfig {
  int height = 64, width = 64;          // multiples of 8
  TextureFamily texture = TextureFamily::mixed;
  double plane_depth = 4.0;
  double second_plane_depth = 0.0;      // > 0 puts a slab in front of the plane
  double max_rotation_deg = 10.0;
  double max_translation = 0.4;         // scene units, per axis
  double invalid_fraction = 0.15;       // area of the carved depth hole, per side
  double min_covisible = 0.2;           // coarse-cell fraction a drawn pose must keep
  uint64_t seed = 0;
};

// Draws poses until enough of view A stays covisible (at most 32 attempts,
// then throws). Identity configs (both pose ranges zero) render the two views
// through the same arithmetic, so the images match bit for bit.
PairSample generate_pair(const SceneConfig& config);

// Pair i uses seed + i.
std::vector<PairSample> generate_dataset(const SceneConfig& config, int count);

// 8-bit binary PGM. Values are clamped to [0, 1] and quantized.
void write_pgm(const std::string& path, const Tensor& image);
Tensor read_pgm(const std::string& path);  // returns [h x w x 1] in [0, 1]

// prefix_a.pgm, prefix_b.pgm, prefix_meta.json (pose, intrinsics, depths,
// homography when present; numbers round-trip exactly).
void write_pair(const std::string& prefix, const PairSample& sample);
PairSample read_pair(const std::string& prefix);

}  // namespace hcpm
