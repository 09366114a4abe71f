#include "hcpm/geometry.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

namespace hcpm {

namespace {

constexpr double kMinDepth = 1e-9;

double depth_at(const Tensor& depth, int x, int y) {
  return (*depth.data)[static_cast<size_t>(y) * static_cast<size_t>(depth.dim(1)) + x];
}

// Nearest-pixel depth lookup; 0 when the point falls outside the map.
double depth_lookup(const Tensor& depth, double x, double y) {
  const int h = depth.dim(0), w = depth.dim(1);
  const int xi = static_cast<int>(std::llround(x));
  const int yi = static_cast<int>(std::llround(y));
  if (xi < 0 || xi >= w || yi < 0 || yi >= h) return 0.0;
  return depth_at(depth, xi, yi);
}

}  // namespace

Mat3 Mat3::identity() {
  Mat3 r;
  r.m = {1, 0, 0, 0, 1, 0, 0, 0, 1};
  return r;
}

Mat3 Mat3::mul(const Mat3& o) const {
  Mat3 r;
  for (int i = 0; i < 3; ++i) {
    for (int j = 0; j < 3; ++j) {
      double s = 0.0;
      for (int k = 0; k < 3; ++k) s += (*this)(i, k) * o(k, j);
      r(i, j) = s;
    }
  }
  return r;
}

std::array<double, 3> Mat3::apply(const std::array<double, 3>& v) const {
  std::array<double, 3> r{};
  for (int i = 0; i < 3; ++i) {
    r[i] = (*this)(i, 0) * v[0] + (*this)(i, 1) * v[1] + (*this)(i, 2) * v[2];
  }
  return r;
}

Mat3 Mat3::transposed() const {
  Mat3 r;
  for (int i = 0; i < 3; ++i) {
    for (int j = 0; j < 3; ++j) r(i, j) = (*this)(j, i);
  }
  return r;
}

Mat3 Mat3::inverse() const {
  const auto& a = m;
  Mat3 adj;
  adj.m = {a[4] * a[8] - a[5] * a[7], a[2] * a[7] - a[1] * a[8], a[1] * a[5] - a[2] * a[4],
           a[5] * a[6] - a[3] * a[8], a[0] * a[8] - a[2] * a[6], a[2] * a[3] - a[0] * a[5],
           a[3] * a[7] - a[4] * a[6], a[1] * a[6] - a[0] * a[7], a[0] * a[4] - a[1] * a[3]};
  const double det = a[0] * adj.m[0] + a[1] * adj.m[3] + a[2] * adj.m[6];
  if (std::abs(det) < 1e-14) {
    throw std::runtime_error("Mat3::inverse: singular matrix, det " + std::to_string(det));
  }
  for (double& v : adj.m) v /= det;
  return adj;
}

Pose Pose::inverse() const {
  Pose inv;
  inv.r = r.transposed();
  const auto rt = inv.r.apply(t);
  inv.t = {-rt[0], -rt[1], -rt[2]};
  return inv;
}

bool Pose::is_identity() const {
  for (int i = 0; i < 3; ++i) {
    for (int j = 0; j < 3; ++j) {
      if (r(i, j) != (i == j ? 1.0 : 0.0)) return false;
    }
  }
  return t[0] == 0.0 && t[1] == 0.0 && t[2] == 0.0;
}

Mat3 make_intrinsics(double f, double cx, double cy) {
  Mat3 k;
  k.m = {f, 0, cx, 0, f, cy, 0, 0, 1};
  return k;
}

Mat3 rotation_axis_angle(const std::array<double, 3>& axis, double angle_rad) {
  const double n = std::sqrt(axis[0] * axis[0] + axis[1] * axis[1] + axis[2] * axis[2]);
  if (n < 1e-12) throw std::invalid_argument("rotation_axis_angle: zero axis");
  const double ux = axis[0] / n, uy = axis[1] / n, uz = axis[2] / n;
  const double c = std::cos(angle_rad), s = std::sin(angle_rad), v = 1.0 - c;
  Mat3 r;
  r.m = {c + ux * ux * v,      ux * uy * v - uz * s, ux * uz * v + uy * s,
         uy * ux * v + uz * s, c + uy * uy * v,      uy * uz * v - ux * s,
         uz * ux * v - uy * s, uz * uy * v + ux * s, c + uz * uz * v};
  return r;
}

std::array<double, 2> homography_apply(const Mat3& h, double x, double y) {
  const auto p = h.apply({x, y, 1.0});
  if (std::abs(p[2]) < 1e-12) {
    throw std::runtime_error("homography_apply: point at infinity");
  }
  return {p[0] / p[2], p[1] / p[2]};
}

std::array<double, 2> cell_anchor(int r, int c) {
  return {8.0 * c + 4.0, 8.0 * r + 4.0};
}

WarpResult warp_points(const std::vector<std::array<double, 2>>& points, const Tensor& depth,
                       const Pose& pose, const Mat3& k_src, const Mat3& k_dst, int dst_h,
                       int dst_w) {
  if (depth.rank() != 2) throw std::invalid_argument("warp_points: depth must be rank 2");
  const Mat3 k_inv = k_src.inverse();
  WarpResult out;
  out.points.resize(points.size(), {0.0, 0.0});
  out.visible.assign(points.size(), false);
  for (size_t i = 0; i < points.size(); ++i) {
    const double z = depth_lookup(depth, points[i][0], points[i][1]);
    if (z <= kMinDepth) continue;
    const auto ray = k_inv.apply({points[i][0], points[i][1], 1.0});
    const std::array<double, 3> xs = {ray[0] * z, ray[1] * z, ray[2] * z};
    const auto rx = pose.r.apply(xs);
    const std::array<double, 3> xt = {rx[0] + pose.t[0], rx[1] + pose.t[1], rx[2] + pose.t[2]};
    if (xt[2] <= kMinDepth) continue;
    const auto proj = k_dst.apply(xt);
    const double px = proj[0] / proj[2], py = proj[1] / proj[2];
    if (px < 0.0 || px > dst_w - 1.0 || py < 0.0 || py > dst_h - 1.0) continue;
    out.points[i] = {px, py};
    out.visible[i] = true;
  }
  return out;
}

std::vector<double> depth_validity_labels(const Tensor& depth) {
  if (depth.rank() != 2) throw std::invalid_argument("depth_validity_labels: depth must be rank 2");
  const int h = depth.dim(0), w = depth.dim(1);
  if (h % 8 != 0 || w % 8 != 0) {
    throw std::invalid_argument("depth_validity_labels: dimensions must be multiples of 8");
  }
  std::vector<double> labels;
  labels.reserve(static_cast<size_t>(h / 8) * static_cast<size_t>(w / 8));
  for (int r = 0; r < h / 8; ++r) {
    for (int c = 0; c < w / 8; ++c) {
      labels.push_back(depth_at(depth, 8 * c + 4, 8 * r + 4) > kMinDepth ? 1.0 : 0.0);
    }
  }
  return labels;
}

namespace {

struct Side {
  const Tensor* image;
  const Tensor* depth_src;
  const Tensor* depth_dst;
  Pose pose;
  const Mat3* k_src;
  const Mat3* k_dst;
};

Side pick_side(const PairSample& s, char side) {
  if (side == 'a') return {&s.image_a, &s.depth_a, &s.depth_b, s.pose_ab, &s.k_a, &s.k_b};
  if (side == 'b') return {&s.image_b, &s.depth_b, &s.depth_a, s.pose_ab.inverse(), &s.k_b, &s.k_a};
  throw std::invalid_argument("covisible_labels: side must be 'a' or 'b'");
}

// A pixel is covisible when its warp lands in the other image with valid
// depth recorded on both ends.
bool pixel_covisible(const Side& v, double x, double y, int dst_h, int dst_w) {
  const std::vector<std::array<double, 2>> pt = {{x, y}};
  const auto warped = warp_points(pt, *v.depth_src, v.pose, *v.k_src, *v.k_dst, dst_h, dst_w);
  if (!warped.visible[0]) return false;
  return depth_lookup(*v.depth_dst, warped.points[0][0], warped.points[0][1]) > kMinDepth;
}

}  // namespace

std::vector<double> covisible_labels(const PairSample& sample, const std::vector<int>& grid_indices,
                                     int grid_h, int grid_w, char side, CovisMode mode) {
  const Side v = pick_side(sample, side);
  const int h = sample.height, w = sample.width;
  std::vector<double> labels(grid_indices.size(), 0.0);

  if (mode == CovisMode::pointwise) {
    for (size_t i = 0; i < grid_indices.size(); ++i) {
      const int gi = grid_indices[i];
      if (gi < 0 || gi >= grid_h * grid_w) {
        throw std::out_of_range("covisible_labels: grid index " + std::to_string(gi));
      }
      const auto anchor = cell_anchor(gi / grid_w, gi % grid_w);
      labels[i] = pixel_covisible(v, anchor[0], anchor[1], h, w) ? 1.0 : 0.0;
    }
    return labels;
  }

  // Bounding-box mode: enclose every covisible pixel of this side, then mark
  // candidates whose anchor falls inside the box and has valid depth.
  int min_x = w, max_x = -1, min_y = h, max_y = -1;
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      if (depth_at(*v.depth_src, x, y) <= kMinDepth) continue;
      if (!pixel_covisible(v, x, y, h, w)) continue;
      min_x = std::min(min_x, x);
      max_x = std::max(max_x, x);
      min_y = std::min(min_y, y);
      max_y = std::max(max_y, y);
    }
  }
  if (max_x < 0) return labels;
  for (size_t i = 0; i < grid_indices.size(); ++i) {
    const int gi = grid_indices[i];
    if (gi < 0 || gi >= grid_h * grid_w) {
      throw std::out_of_range("covisible_labels: grid index " + std::to_string(gi));
    }
    const auto anchor = cell_anchor(gi / grid_w, gi % grid_w);
    const bool inside = anchor[0] >= min_x && anchor[0] <= max_x && anchor[1] >= min_y &&
                        anchor[1] <= max_y;
    const bool own_depth = depth_at(*v.depth_src, static_cast<int>(anchor[0]),
                                    static_cast<int>(anchor[1])) > kMinDepth;
    labels[i] = (inside && own_depth) ? 1.0 : 0.0;
  }
  return labels;
}

GtAssignment gt_coarse_assignment(const PairSample& sample, const std::vector<int>& idx_a,
                                  const std::vector<int>& idx_b, int grid_h, int grid_w) {
  const int cells = grid_h * grid_w;
  std::vector<std::array<double, 2>> anchors(static_cast<size_t>(cells));
  for (int i = 0; i < cells; ++i) anchors[static_cast<size_t>(i)] = cell_anchor(i / grid_w, i % grid_w);

  // Nearest coarse cell in the other grid under the warp, or -1.
  const auto nearest = [&](const Tensor& depth, const Pose& pose, const Mat3& ks,
                           const Mat3& kd) {
    std::vector<int> to(static_cast<size_t>(cells), -1);
    const auto warped = warp_points(anchors, depth, pose, ks, kd, sample.height, sample.width);
    for (int i = 0; i < cells; ++i) {
      if (!warped.visible[static_cast<size_t>(i)]) continue;
      const int cc = static_cast<int>(std::floor(warped.points[static_cast<size_t>(i)][0] / 8.0));
      const int cr = static_cast<int>(std::floor(warped.points[static_cast<size_t>(i)][1] / 8.0));
      if (cc < 0 || cc >= grid_w || cr < 0 || cr >= grid_h) continue;
      to[static_cast<size_t>(i)] = cr * grid_w + cc;
    }
    return to;
  };

  const auto a_to_b = nearest(sample.depth_a, sample.pose_ab, sample.k_a, sample.k_b);
  const auto b_to_a = nearest(sample.depth_b, sample.pose_ab.inverse(), sample.k_b, sample.k_a);

  std::vector<int> row_of_a(static_cast<size_t>(cells), -1), row_of_b(static_cast<size_t>(cells), -1);
  for (size_t i = 0; i < idx_a.size(); ++i) row_of_a[static_cast<size_t>(idx_a[i])] = static_cast<int>(i);
  for (size_t j = 0; j < idx_b.size(); ++j) row_of_b[static_cast<size_t>(idx_b[j])] = static_cast<int>(j);

  GtAssignment out;
  out.matrix = Tensor::zeros({static_cast<int>(idx_a.size()), static_cast<int>(idx_b.size())});
  for (int i = 0; i < cells; ++i) {
    const int j = a_to_b[static_cast<size_t>(i)];
    if (j < 0 || b_to_a[static_cast<size_t>(j)] != i) continue;
    const int ra = row_of_a[static_cast<size_t>(i)], rb = row_of_b[static_cast<size_t>(j)];
    if (ra < 0 || rb < 0) continue;
    out.pairs.emplace_back(ra, rb);
    (*out.matrix.data)[static_cast<size_t>(ra) * idx_b.size() + rb] = 1.0;
  }
  return out;
}

}  // namespace hcpm
