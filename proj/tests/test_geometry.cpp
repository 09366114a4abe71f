// Camera algebra and ground-truth label construction. The hand cases use a
// fronto-parallel plane where the warp reduces to closed-form pixel shifts.

#include <array>
#include <cmath>
#include <set>
#include <vector>

#include "doctest.h"
#include "hcpm/geometry.hpp"
#include "hcpm/synthetic.hpp"

using namespace hcpm;

namespace {

// Constant-depth sample with identity rotation: moving the camera by t shifts
// every pixel by f * t_xy / z.
PairSample translation_sample(double f, double z, std::array<double, 3> t, int h, int w) {
  PairSample s;
  s.height = h;
  s.width = w;
  s.image_a = Tensor::zeros({h, w, 1});
  s.image_b = Tensor::zeros({h, w, 1});
  s.depth_a = Tensor::full({h, w}, z);
  s.depth_b = Tensor::full({h, w}, z + t[2]);
  s.pose_ab.r = Mat3::identity();
  s.pose_ab.t = t;
  s.k_a = make_intrinsics(f, w / 2.0, h / 2.0);
  s.k_b = s.k_a;
  s.has_homography = false;
  return s;
}

}  // namespace

TEST_SUITE("geometry") {

TEST_CASE("Mat3 inverse and multiply") {
  Mat3 m;
  m.m = {2, 1, 0, 1, 3, 1, 0, 1, 2};
  Mat3 inv = m.inverse();
  Mat3 prod = m.mul(inv);
  for (int r = 0; r < 3; ++r)
    for (int c = 0; c < 3; ++c)
      CHECK(prod(r, c) == doctest::Approx(r == c ? 1.0 : 0.0).epsilon(1e-12));
  Mat3 singular;
  singular.m = {1, 2, 3, 2, 4, 6, 0, 0, 1};
  CHECK_THROWS(singular.inverse());
}

TEST_CASE("rotations are orthonormal with unit determinant") {
  Mat3 r = rotation_axis_angle({0.3, -0.8, 0.52}, 0.7);
  Mat3 rtr = r.transposed().mul(r);
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j)
      CHECK(rtr(i, j) == doctest::Approx(i == j ? 1.0 : 0.0).epsilon(1e-12));
  const double det = r(0, 0) * (r(1, 1) * r(2, 2) - r(1, 2) * r(2, 1)) -
                     r(0, 1) * (r(1, 0) * r(2, 2) - r(1, 2) * r(2, 0)) +
                     r(0, 2) * (r(1, 0) * r(2, 1) - r(1, 1) * r(2, 0));
  CHECK(det == doctest::Approx(1.0).epsilon(1e-12));
  Mat3 none = rotation_axis_angle({1, 0, 0}, 0.0);
  for (int i = 0; i < 9; ++i) CHECK(none.m[static_cast<size_t>(i)] == Mat3::identity().m[static_cast<size_t>(i)]);
}

TEST_CASE("pose composed with its inverse is the identity") {
  Pose p;
  p.r = rotation_axis_angle({0.1, 0.9, -0.2}, 0.4);
  p.t = {0.3, -0.1, 0.2};
  Pose inv = p.inverse();
  Mat3 r = p.r.mul(inv.r);
  std::array<double, 3> t = {
      p.r(0, 0) * inv.t[0] + p.r(0, 1) * inv.t[1] + p.r(0, 2) * inv.t[2] + p.t[0],
      p.r(1, 0) * inv.t[0] + p.r(1, 1) * inv.t[1] + p.r(1, 2) * inv.t[2] + p.t[1],
      p.r(2, 0) * inv.t[0] + p.r(2, 1) * inv.t[1] + p.r(2, 2) * inv.t[2] + p.t[2]};
  for (int i = 0; i < 3; ++i) {
    for (int j = 0; j < 3; ++j) CHECK(r(i, j) == doctest::Approx(i == j ? 1.0 : 0.0).epsilon(1e-12));
    CHECK(t[static_cast<size_t>(i)] == doctest::Approx(0.0).epsilon(1e-12));
  }
  CHECK(Pose{}.is_identity());
  CHECK_FALSE(p.is_identity());
}

TEST_CASE("homography_apply: identity, scale invariance, infinity") {
  Mat3 h = Mat3::identity();
  auto p = homography_apply(h, 3.5, -2.0);
  CHECK(p[0] == 3.5);
  CHECK(p[1] == -2.0);
  Mat3 hs;
  for (int i = 0; i < 9; ++i) hs.m[static_cast<size_t>(i)] = 2.5 * h.m[static_cast<size_t>(i)];
  auto ps = homography_apply(hs, 3.5, -2.0);
  CHECK(ps[0] == doctest::Approx(3.5).epsilon(1e-14));
  CHECK(ps[1] == doctest::Approx(-2.0).epsilon(1e-14));
  Mat3 bad;
  bad.m = {1, 0, 0, 0, 1, 0, 0, 0, 0};
  CHECK_THROWS(homography_apply(bad, 1.0, 1.0));
}

TEST_CASE("cell anchors sit at the 8-pixel cell centers") {
  auto a00 = cell_anchor(0, 0);
  CHECK(a00[0] == 4.0);
  CHECK(a00[1] == 4.0);
  auto a23 = cell_anchor(2, 3);
  CHECK(a23[0] == 28.0);  // x from the column
  CHECK(a23[1] == 20.0);  // y from the row
}

TEST_CASE("warp under pure translation shifts pixels by f t / z") {
  PairSample s = translation_sample(10.0, 2.0, {0.2, -0.4, 0.0}, 16, 16);
  std::vector<std::array<double, 2>> pts = {{4, 4}, {7, 11}, {12, 3}};
  WarpResult wr = warp_points(pts, s.depth_a, s.pose_ab, s.k_a, s.k_b, 16, 16);
  REQUIRE(wr.points.size() == 3);
  for (size_t i = 0; i < pts.size(); ++i) {
    REQUIRE(wr.visible[i]);
    CHECK(wr.points[i][0] == doctest::Approx(pts[i][0] + 10.0 * 0.2 / 2.0).epsilon(1e-12));
    CHECK(wr.points[i][1] == doctest::Approx(pts[i][1] - 10.0 * 0.4 / 2.0).epsilon(1e-12));
  }
}

TEST_CASE("warp visibility: leaving the frame, invalid depth, behind the camera") {
  PairSample s = translation_sample(10.0, 2.0, {2.0, 0.0, 0.0}, 16, 16);  // +10 px shift
  s.depth_a.at(3 * 16 + 2) = 0.0;                                         // pixel (2, 3) invalid
  std::vector<std::array<double, 2>> pts = {{8, 4}, {2, 3}, {1, 1}};
  WarpResult wr = warp_points(pts, s.depth_a, s.pose_ab, s.k_a, s.k_b, 16, 16);
  CHECK_FALSE(wr.visible[0]);  // 8 + 10 = 18 > 15
  CHECK_FALSE(wr.visible[1]);  // depth hole
  CHECK(wr.visible[2]);        // 1 + 10 = 11 in range
  PairSample behind = translation_sample(10.0, 2.0, {0.0, 0.0, -5.0}, 16, 16);
  WarpResult wb = warp_points({{8, 8}}, behind.depth_a, behind.pose_ab, behind.k_a, behind.k_b, 16, 16);
  CHECK_FALSE(wb.visible[0]);  // z = 2 - 5 < 0
}

TEST_CASE("warp round trips through the inverse pose") {
  PairSample s = translation_sample(12.0, 3.0, {0.3, 0.2, 0.0}, 24, 24);
  std::vector<std::array<double, 2>> pts = {{5, 5}, {10, 17}, {20, 8}};
  WarpResult fwd = warp_points(pts, s.depth_a, s.pose_ab, s.k_a, s.k_b, 24, 24);
  WarpResult back = warp_points(fwd.points, s.depth_b, s.pose_ab.inverse(), s.k_b, s.k_a, 24, 24);
  for (size_t i = 0; i < pts.size(); ++i) {
    REQUIRE(fwd.visible[i]);
    REQUIRE(back.visible[i]);
    CHECK(back.points[i][0] == doctest::Approx(pts[i][0]).epsilon(1e-10));
    CHECK(back.points[i][1] == doctest::Approx(pts[i][1]).epsilon(1e-10));
  }
}

TEST_CASE("warp agrees with the stored homography on rendered planar pairs") {
  for (uint64_t seed : {11ULL, 12ULL, 13ULL}) {
    SceneConfig cfg;
    cfg.seed = seed;
    cfg.invalid_fraction = 0.0;
    PairSample s = generate_pair(cfg);
    REQUIRE(s.has_homography);
    std::vector<std::array<double, 2>> pts;
    for (int r = 0; r < 8; ++r)
      for (int c = 0; c < 8; ++c) pts.push_back(cell_anchor(r, c));
    WarpResult wr = warp_points(pts, s.depth_a, s.pose_ab, s.k_a, s.k_b, s.height, s.width);
    int visible = 0;
    for (size_t i = 0; i < pts.size(); ++i) {
      if (!wr.visible[i]) continue;
      ++visible;
      auto hp = homography_apply(s.homography, pts[i][0], pts[i][1]);
      CHECK(wr.points[i][0] == doctest::Approx(hp[0]).epsilon(1e-9));
      CHECK(wr.points[i][1] == doctest::Approx(hp[1]).epsilon(1e-9));
    }
    CHECK(visible > 10);
  }
}

TEST_CASE("depth validity labels follow the anchor pixels") {
  Tensor depth = Tensor::full({16, 16}, 3.0);
  depth.at(4 * 16 + 12) = 0.0;  // anchor of cell (0, 1) at pixel (12, 4)
  auto labels = depth_validity_labels(depth);
  REQUIRE(labels.size() == 4);
  CHECK(labels[0] == 1.0);
  CHECK(labels[1] == 0.0);
  CHECK(labels[2] == 1.0);
  CHECK(labels[3] == 1.0);
}

TEST_CASE("pointwise covisibility matches a per-anchor oracle") {
  SceneConfig cfg;
  cfg.seed = 21;
  PairSample s = generate_pair(cfg);
  const int gh = s.height / 8, gw = s.width / 8;
  std::vector<int> all_cells(static_cast<size_t>(gh * gw));
  for (int i = 0; i < gh * gw; ++i) all_cells[static_cast<size_t>(i)] = i;
  auto labels = covisible_labels(s, all_cells, gh, gw, 'a', CovisMode::pointwise);
  for (int cell = 0; cell < gh * gw; ++cell) {
    auto anchor = cell_anchor(cell / gw, cell % gw);
    WarpResult wr = warp_points({anchor}, s.depth_a, s.pose_ab, s.k_a, s.k_b, s.height, s.width);
    bool expect = wr.visible[0];
    if (expect) {
      const int px = static_cast<int>(std::llround(wr.points[0][0]));
      const int py = static_cast<int>(std::llround(wr.points[0][1]));
      expect = s.depth_b.at(py * s.width + px) > 0.0;
    }
    CHECK(labels[static_cast<size_t>(cell)] == (expect ? 1.0 : 0.0));
  }
}

TEST_CASE("bbox covisibility is a superset of pointwise and respects own depth") {
  for (uint64_t seed : {31ULL, 32ULL, 33ULL, 34ULL}) {
    SceneConfig cfg;
    cfg.seed = seed;
    PairSample s = generate_pair(cfg);
    const int gh = s.height / 8, gw = s.width / 8;
    std::vector<int> all_cells(static_cast<size_t>(gh * gw));
    for (int i = 0; i < gh * gw; ++i) all_cells[static_cast<size_t>(i)] = i;
    for (char side : {'a', 'b'}) {
      auto point = covisible_labels(s, all_cells, gh, gw, side, CovisMode::pointwise);
      auto box = covisible_labels(s, all_cells, gh, gw, side, CovisMode::bbox);
      const Tensor& own_depth = side == 'a' ? s.depth_a : s.depth_b;
      for (int cell = 0; cell < gh * gw; ++cell) {
        CHECK(box[static_cast<size_t>(cell)] >= point[static_cast<size_t>(cell)]);
        auto anchor = cell_anchor(cell / gw, cell % gw);
        if (own_depth.at(static_cast<int64_t>(anchor[1]) * s.width + static_cast<int64_t>(anchor[0])) <= 0.0)
          CHECK(box[static_cast<size_t>(cell)] == 0.0);
      }
    }
  }
}

TEST_CASE("identity pose with full depth is totally covisible") {
  SceneConfig cfg;
  cfg.seed = 41;
  cfg.max_rotation_deg = 0.0;
  cfg.max_translation = 0.0;
  cfg.invalid_fraction = 0.0;
  PairSample s = generate_pair(cfg);
  const int gh = s.height / 8, gw = s.width / 8;
  std::vector<int> all_cells(static_cast<size_t>(gh * gw));
  for (int i = 0; i < gh * gw; ++i) all_cells[static_cast<size_t>(i)] = i;
  for (char side : {'a', 'b'})
    for (CovisMode mode : {CovisMode::pointwise, CovisMode::bbox}) {
      auto labels = covisible_labels(s, all_cells, gh, gw, side, mode);
      for (double l : labels) CHECK(l == 1.0);
    }
}

TEST_CASE("ground-truth assignment under identity pose pairs each cell with itself") {
  SceneConfig cfg;
  cfg.seed = 43;
  cfg.max_rotation_deg = 0.0;
  cfg.max_translation = 0.0;
  cfg.invalid_fraction = 0.0;
  PairSample s = generate_pair(cfg);
  const int gh = s.height / 8, gw = s.width / 8;
  std::vector<int> all_cells(static_cast<size_t>(gh * gw));
  for (int i = 0; i < gh * gw; ++i) all_cells[static_cast<size_t>(i)] = i;
  GtAssignment gt = gt_coarse_assignment(s, all_cells, all_cells, gh, gw);
  REQUIRE(gt.pairs.size() == static_cast<size_t>(gh * gw));
  for (const auto& [ra, rb] : gt.pairs) CHECK(ra == rb);
  REQUIRE(gt.matrix.shape == Shape{gh * gw, gh * gw});
  for (int i = 0; i < gh * gw; ++i)
    for (int j = 0; j < gh * gw; ++j)
      CHECK(gt.matrix.at(i * gh * gw + j) == (i == j ? 1.0 : 0.0));
}

TEST_CASE("ground-truth pairs are mutual nearest cells with valid depth") {
  SceneConfig cfg;
  cfg.seed = 47;
  PairSample s = generate_pair(cfg);
  const int gh = s.height / 8, gw = s.width / 8;
  std::vector<int> all_cells(static_cast<size_t>(gh * gw));
  for (int i = 0; i < gh * gw; ++i) all_cells[static_cast<size_t>(i)] = i;
  GtAssignment gt = gt_coarse_assignment(s, all_cells, all_cells, gh, gw);
  CHECK(gt.pairs.size() > 4);
  std::set<int> seen_a, seen_b;
  for (const auto& [ra, rb] : gt.pairs) {
    CHECK(seen_a.insert(ra).second);  // each row at most once
    CHECK(seen_b.insert(rb).second);
    // Forward: the A anchor must land in cell rb.
    auto anchor_a = cell_anchor(ra / gw, ra % gw);
    WarpResult fwd = warp_points({anchor_a}, s.depth_a, s.pose_ab, s.k_a, s.k_b, s.height, s.width);
    REQUIRE(fwd.visible[0]);
    CHECK(static_cast<int>(fwd.points[0][1] / 8) * gw + static_cast<int>(fwd.points[0][0] / 8) == rb);
    // Backward: the B anchor must land in cell ra.
    auto anchor_b = cell_anchor(rb / gw, rb % gw);
    WarpResult back = warp_points({anchor_b}, s.depth_b, s.pose_ab.inverse(), s.k_b, s.k_a, s.height, s.width);
    REQUIRE(back.visible[0]);
    CHECK(static_cast<int>(back.points[0][1] / 8) * gw + static_cast<int>(back.points[0][0] / 8) == ra);
  }
}

TEST_CASE("assignment restricted to candidate subsets filters and remaps rows") {
  SceneConfig cfg;
  cfg.seed = 53;
  cfg.max_rotation_deg = 0.0;
  cfg.max_translation = 0.0;
  cfg.invalid_fraction = 0.0;
  PairSample s = generate_pair(cfg);
  const int gh = s.height / 8, gw = s.width / 8;
  std::vector<int> idx_a = {0, 3, 9, 17, 33};
  std::vector<int> idx_b = {3, 9, 21, 33};
  GtAssignment gt = gt_coarse_assignment(s, idx_a, idx_b, gh, gw);
  // Identity pose: positives are exactly the shared cells {3, 9, 33}.
  REQUIRE(gt.pairs.size() == 3);
  for (const auto& [ra, rb] : gt.pairs) CHECK(idx_a[static_cast<size_t>(ra)] == idx_b[static_cast<size_t>(rb)]);
  REQUIRE(gt.matrix.shape == Shape{5, 4});
}

}  // TEST_SUITE
