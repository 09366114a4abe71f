// Ground-truth geometry: camera model, pointwise warps between views, and
// the labels the pruning and matching losses train against.
//
// Conventions. Pixels are (x, y) with x along columns; depth maps store the
// camera-frame z at integer pixels, 0 marking invalid. A coarse cell (r, c)
// is anchored at pixel (8c+4, 8r+4), which is also the fine-grid cell
// (4c+2, 4r+2) at 1/2 scale, so depth sampling and warping agree.

#pragma once

#include <array>
#include <cstdint>
#include <utility>
#include <vector>

#include "hcpm/tensor.hpp"

namespace hcpm {

struct Mat3 {
  std::array<double, 9> m{};  // row-major

  static Mat3 identity();
  double& operator()(int r, int c) { return m[static_cast<size_t>(r) * 3 + c]; }
  double operator()(int r, int c) const { return m[static_cast<size_t>(r) * 3 + c]; }
  Mat3 mul(const Mat3& o) const;
  std::array<double, 3> apply(const std::array<double, 3>& v) const;
  Mat3 transposed() const;
  Mat3 inverse() const;  // throws on singular input
};

// Rigid transform X_target = R * X_source + t.
struct Pose {
  Mat3 r = Mat3::identity();
  std::array<double, 3> t{};

  Pose inverse() const;
  bool is_identity() const;
};

Mat3 make_intrinsics(double f, double cx, double cy);
Mat3 rotation_axis_angle(const std::array<double, 3>& axis, double angle_rad);

// Applies a homography to a pixel; throws if the point maps to infinity.
std::array<double, 2> homography_apply(const Mat3& h, double x, double y);

struct PairSample {
  int height = 0, width = 0;
  Tensor image_a, image_b;  // [h x w x 1], values in [0, 1]
  Tensor depth_a, depth_b;  // [h x w], camera z, 0 = invalid
  Pose pose_ab;             // frame A -> frame B
  Mat3 k_a, k_b;
  bool has_homography = false;
  Mat3 homography;          // pixel A -> pixel B, when the scene is one plane
};

// Anchor pixel (x, y) of coarse cell (r, c).
std::array<double, 2> cell_anchor(int r, int c);

struct WarpResult {
  std::vector<std::array<double, 2>> points;
  std::vector<bool> visible;  // source depth valid, lands in front and inside target
};

// Back-projects each point with the source depth map (nearest-pixel lookup),
// applies the pose, projects into the target camera. Points whose source
// depth is invalid or that leave the target image come back invisible with
// their coordinates unspecified.
WarpResult warp_points(const std::vector<std::array<double, 2>>& points, const Tensor& depth,
                       const Pose& pose, const Mat3& k_src, const Mat3& k_dst, int dst_h,
                       int dst_w);

// One 0/1 label per coarse cell: depth at the cell anchor is positive.
std::vector<double> depth_validity_labels(const Tensor& depth);

enum class CovisMode { pointwise, bbox };

// Labels per candidate on one side ('a' or 'b'). pointwise: the anchor warps
// into the other image with valid depth on both ends. bbox: the candidate's
// own depth is valid and its anchor lies inside the axis-aligned box that
// encloses every pointwise-covisible pixel, a superset of pointwise.
std::vector<double> covisible_labels(const PairSample& sample, const std::vector<int>& grid_indices,
                                     int grid_h, int grid_w, char side, CovisMode mode);

struct GtAssignment {
  std::vector<std::pair<int, int>> pairs;  // candidate row in A, candidate row in B
  Tensor matrix;                           // [k_a x k_b], 0/1
};

// Mutual nearest coarse cells under the ground-truth warp, restricted to the
// two candidate sets. Cells with invalid depth on either end produce no pair;
// each row and column holds at most one positive.
GtAssignment gt_coarse_assignment(const PairSample& sample, const std::vector<int>& idx_a,
                                  const std::vector<int>& idx_b, int grid_h, int grid_w);

}  // namespace hcpm
