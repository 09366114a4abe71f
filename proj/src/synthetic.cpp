#include "hcpm/synthetic.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <stdexcept>

#include "json.hpp"

namespace hcpm {

namespace {

constexpr double kPi = 3.14159265358979323846;

struct Grating {
  double kx, ky, phase, amp;
};

struct Blob {
  double cx, cy, inv_2s2, amp;
};

struct Texture {
  std::vector<Grating> gratings;
  std::vector<Blob> blobs;

  double operator()(double u, double v) const {
    double t = 0.0;
    for (const auto& g : gratings) t += g.amp * std::sin(g.kx * u + g.ky * v + g.phase);
    for (const auto& b : blobs) {
      const double du = u - b.cx, dv = v - b.cy;
      t += b.amp * std::exp(-(du * du + dv * dv) * b.inv_2s2);
    }
    return 0.5 + 0.45 * std::tanh(0.8 * t);
  }
};

Texture draw_texture(const SceneConfig& cfg, Rng& rng) {
  int n_gratings = 0, n_blobs = 0;
  switch (cfg.texture) {
    case TextureFamily::gratings: n_gratings = 12; break;
    case TextureFamily::blobs: n_blobs = 12; break;
    case TextureFamily::mixed: n_gratings = 7; n_blobs = 7; break;
  }
  const double f = 0.9 * std::min(cfg.height, cfg.width);
  const double half_u = 1.3 * (cfg.width / 2.0) / f * cfg.plane_depth;
  const double half_v = 1.3 * (cfg.height / 2.0) / f * cfg.plane_depth;

  Texture tex;
  for (int i = 0; i < n_gratings; ++i) {
    const double angle = rng.uniform(0.0, kPi);
    const double freq = rng.uniform(0.4, 2.0);
    const double phase = rng.uniform(0.0, 2.0 * kPi);
    const double amp = rng.uniform(0.35, 1.0);
    const double omega = 2.0 * kPi * freq;
    tex.gratings.push_back({omega * std::cos(angle), omega * std::sin(angle), phase, amp});
  }
  for (int i = 0; i < n_blobs; ++i) {
    const double cx = rng.uniform(-half_u, half_u);
    const double cy = rng.uniform(-half_v, half_v);
    const double sigma = rng.uniform(0.12, 0.5);
    const double mag = rng.uniform(0.5, 1.6);
    const double sign = rng.uniform01() < 0.5 ? -1.0 : 1.0;
    tex.blobs.push_back({cx, cy, 1.0 / (2.0 * sigma * sigma), mag * sign});
  }
  return tex;
}

struct Scene {
  Texture tex;
  double z0 = 4.0;                    // background plane
  double z1 = 0.0;                    // slab depth, 0 disables
  double slab_hx = 0.0, slab_hy = 0.0;
};

// Ray-plane view synthesis. The same routine renders both cameras, so an
// identity pose reproduces view A arithmetically, bit for bit.
void render_view(const Scene& scene, const Pose& pose, const Mat3& k, int h, int w,
                 Tensor* image, Tensor* depth) {
  *image = Tensor::full({h, w, 1}, 0.5);
  *depth = Tensor::zeros({h, w});
  const Mat3 k_inv = k.inverse();
  const Mat3 rt_m = pose.r.transposed();
  const auto rt_t = rt_m.apply(pose.t);

  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const auto d = k_inv.apply({static_cast<double>(x), static_cast<double>(y), 1.0});
      const auto rd = rt_m.apply(d);

      // Ray in world coordinates: X = lambda * rd - rt_t; camera depth is
      // lambda because the ray keeps dz = 1.
      const auto hit = [&](double z, std::array<double, 3>* xw) {
        if (std::abs(rd[2]) < 1e-12) return -1.0;
        const double lambda = (z + rt_t[2]) / rd[2];
        if (lambda < 1e-6) return -1.0;
        *xw = {lambda * rd[0] - rt_t[0], lambda * rd[1] - rt_t[1], lambda * rd[2] - rt_t[2]};
        return lambda;
      };

      std::array<double, 3> x0{}, x1{};
      const double l0 = hit(scene.z0, &x0);
      double l1 = -1.0;
      if (scene.z1 > 0.0) {
        l1 = hit(scene.z1, &x1);
        if (l1 > 0.0 && (std::abs(x1[0]) > scene.slab_hx || std::abs(x1[1]) > scene.slab_hy)) {
          l1 = -1.0;
        }
      }

      double lambda = -1.0;
      const std::array<double, 3>* xw = nullptr;
      if (l1 > 0.0 && (l0 <= 0.0 || l1 < l0)) {
        lambda = l1;
        xw = &x1;
      } else if (l0 > 0.0) {
        lambda = l0;
        xw = &x0;
      }
      if (lambda <= 0.0) continue;

      (*image->data)[static_cast<size_t>(y) * w + x] = scene.tex((*xw)[0], (*xw)[1]);
      (*depth->data)[static_cast<size_t>(y) * w + x] = lambda;
    }
  }
}

Pose draw_pose(const SceneConfig& cfg, Rng& rng) {
  Pose pose;
  if (cfg.max_rotation_deg > 0.0) {
    const double ax = rng.normal();
    const double ay = rng.normal();
    const double az = rng.normal();
    const double angle = rng.uniform(-cfg.max_rotation_deg, cfg.max_rotation_deg) * kPi / 180.0;
    pose.r = rotation_axis_angle({ax, ay, az}, angle);
  }
  if (cfg.max_translation > 0.0) {
    const double m = cfg.max_translation;
    pose.t[0] = rng.uniform(-m, m);
    pose.t[1] = rng.uniform(-m, m);
    pose.t[2] = rng.uniform(-m, m);
  }
  return pose;
}

void carve_hole(Tensor* depth, double fraction, Rng& rng) {
  if (fraction <= 0.0) return;
  const int h = depth->dim(0), w = depth->dim(1);
  const int rw = std::max<int>(1, static_cast<int>(std::llround(w * std::sqrt(fraction))));
  const int rh = std::max<int>(1, static_cast<int>(std::llround(h * std::sqrt(fraction))));
  const int x0 = static_cast<int>(rng.uniform(0.0, static_cast<double>(w - std::min(rw, w) + 1)));
  const int y0 = static_cast<int>(rng.uniform(0.0, static_cast<double>(h - std::min(rh, h) + 1)));
  for (int y = y0; y < std::min(h, y0 + rh); ++y) {
    for (int x = x0; x < std::min(w, x0 + rw); ++x) {
      (*depth->data)[static_cast<size_t>(y) * w + x] = 0.0;
    }
  }
}

void validate_config(const SceneConfig& cfg) {
  if (cfg.height <= 0 || cfg.width <= 0 || cfg.height % 8 != 0 || cfg.width % 8 != 0) {
    throw std::invalid_argument("generate_pair: image dimensions must be positive multiples of 8");
  }
  if (cfg.plane_depth <= 0.0) throw std::invalid_argument("generate_pair: plane_depth must be > 0");
  if (cfg.second_plane_depth > 0.0 && cfg.second_plane_depth >= cfg.plane_depth) {
    throw std::invalid_argument("generate_pair: second plane must sit in front of the first");
  }
  if (cfg.invalid_fraction < 0.0 || cfg.invalid_fraction >= 1.0) {
    throw std::invalid_argument("generate_pair: invalid_fraction must be in [0, 1)");
  }
  if (cfg.min_covisible < 0.0 || cfg.min_covisible > 1.0) {
    throw std::invalid_argument("generate_pair: min_covisible must be in [0, 1]");
  }
}

}  // namespace

PairSample generate_pair(const SceneConfig& cfg) {
  validate_config(cfg);
  Rng rng(cfg.seed);

  Scene scene;
  scene.tex = draw_texture(cfg, rng);
  scene.z0 = cfg.plane_depth;
  const double f = 0.9 * std::min(cfg.height, cfg.width);
  if (cfg.second_plane_depth > 0.0) {
    scene.z1 = cfg.second_plane_depth;
    scene.slab_hx = 0.4 * (cfg.width / 2.0) / f * scene.z1;
    scene.slab_hy = 0.4 * (cfg.height / 2.0) / f * scene.z1;
  }
  const Mat3 k = make_intrinsics(f, cfg.width / 2.0, cfg.height / 2.0);

  Tensor image_a, depth_a_full;
  render_view(scene, Pose{}, k, cfg.height, cfg.width, &image_a, &depth_a_full);

  const int grid_h = cfg.height / 8, grid_w = cfg.width / 8;
  std::vector<int> all_cells(static_cast<size_t>(grid_h) * grid_w);
  std::iota(all_cells.begin(), all_cells.end(), 0);

  for (int attempt = 0; attempt < 32; ++attempt) {
    const Pose pose = draw_pose(cfg, rng);

    PairSample s;
    s.height = cfg.height;
    s.width = cfg.width;
    s.image_a = image_a;
    s.depth_a = Tensor::from(depth_a_full.shape, *depth_a_full.data);
    render_view(scene, pose, k, cfg.height, cfg.width, &s.image_b, &s.depth_b);
    s.pose_ab = pose;
    s.k_a = k;
    s.k_b = k;
    carve_hole(&s.depth_a, cfg.invalid_fraction, rng);
    carve_hole(&s.depth_b, cfg.invalid_fraction, rng);

    if (scene.z1 <= 0.0) {
      s.has_homography = true;
      if (pose.is_identity()) {
        s.homography = Mat3::identity();
      } else {
        // Plane z = z0 in frame A: X_b = (R + t n^T / z0) X_a with n = e_z.
        Mat3 rt = pose.r;
        for (int i = 0; i < 3; ++i) rt(i, 2) += pose.t[i] / scene.z0;
        s.homography = k.mul(rt).mul(k.inverse());
      }
    }

    const auto covis = covisible_labels(s, all_cells, grid_h, grid_w, 'a', CovisMode::pointwise);
    const double frac = std::accumulate(covis.begin(), covis.end(), 0.0) / covis.size();
    if (frac >= cfg.min_covisible) return s;
  }
  throw std::runtime_error("generate_pair: no sufficiently covisible pose after 32 attempts, seed " +
                           std::to_string(cfg.seed));
}

std::vector<PairSample> generate_dataset(const SceneConfig& cfg, int count) {
  std::vector<PairSample> out;
  out.reserve(static_cast<size_t>(std::max(count, 0)));
  for (int i = 0; i < count; ++i) {
    SceneConfig c = cfg;
    c.seed = cfg.seed + static_cast<uint64_t>(i);
    out.push_back(generate_pair(c));
  }
  return out;
}

void write_pgm(const std::string& path, const Tensor& image) {
  if (image.rank() != 3 || image.dim(2) != 1) {
    throw std::invalid_argument("write_pgm: expected [h x w x 1] image");
  }
  const int h = image.dim(0), w = image.dim(1);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("write_pgm: cannot open " + path);
  out << "P5\n" << w << " " << h << "\n255\n";
  for (double v : *image.data) {
    const double c = std::clamp(v, 0.0, 1.0);
    out.put(static_cast<char>(static_cast<unsigned char>(std::llround(c * 255.0))));
  }
  if (!out) throw std::runtime_error("write_pgm: write failed for " + path);
}

Tensor read_pgm(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("read_pgm: cannot open " + path);

  const auto next_token = [&]() {
    std::string tok;
    while (in) {
      const int c = in.get();
      if (c == '#') {
        while (in && in.get() != '\n') {
        }
        continue;
      }
      if (c == EOF) break;
      if (std::isspace(c)) {
        if (!tok.empty()) break;
        continue;
      }
      tok.push_back(static_cast<char>(c));
    }
    if (tok.empty()) throw std::runtime_error("read_pgm: truncated header in " + path);
    return tok;
  };

  if (next_token() != "P5") throw std::runtime_error("read_pgm: not a binary PGM: " + path);
  const int w = std::stoi(next_token());
  const int h = std::stoi(next_token());
  const int maxval = std::stoi(next_token());
  if (w <= 0 || h <= 0 || maxval <= 0 || maxval > 255) {
    throw std::runtime_error("read_pgm: unsupported PGM parameters in " + path);
  }
  Tensor img = Tensor::zeros({h, w, 1});
  for (size_t i = 0; i < static_cast<size_t>(img.numel()); ++i) {
    const int c = in.get();
    if (c == EOF) throw std::runtime_error("read_pgm: truncated pixel data in " + path);
    (*img.data)[i] = static_cast<double>(c) / maxval;
  }
  return img;
}

namespace {

nlohmann::json mat_json(const Mat3& m) { return nlohmann::json(m.m); }

Mat3 mat_from_json(const nlohmann::json& j) {
  Mat3 m;
  for (int i = 0; i < 9; ++i) m.m[static_cast<size_t>(i)] = j.at(static_cast<size_t>(i)).get<double>();
  return m;
}

}  // namespace

void write_pair(const std::string& prefix, const PairSample& s) {
  write_pgm(prefix + "_a.pgm", s.image_a);
  write_pgm(prefix + "_b.pgm", s.image_b);
  nlohmann::json j;
  j["height"] = s.height;
  j["width"] = s.width;
  j["pose_r"] = s.pose_ab.r.m;
  j["pose_t"] = s.pose_ab.t;
  j["k_a"] = mat_json(s.k_a);
  j["k_b"] = mat_json(s.k_b);
  j["has_homography"] = s.has_homography;
  if (s.has_homography) j["homography"] = mat_json(s.homography);
  j["depth_a"] = *s.depth_a.data;
  j["depth_b"] = *s.depth_b.data;
  std::ofstream out(prefix + "_meta.json");
  if (!out) throw std::runtime_error("write_pair: cannot open " + prefix + "_meta.json");
  out << j.dump(2) << "\n";
}

PairSample read_pair(const std::string& prefix) {
  std::ifstream in(prefix + "_meta.json");
  if (!in) throw std::runtime_error("read_pair: cannot open " + prefix + "_meta.json");
  nlohmann::json j;
  in >> j;

  PairSample s;
  s.height = j.at("height").get<int>();
  s.width = j.at("width").get<int>();
  s.image_a = read_pgm(prefix + "_a.pgm");
  s.image_b = read_pgm(prefix + "_b.pgm");
  s.pose_ab.r = mat_from_json(j.at("pose_r"));
  const auto t = j.at("pose_t").get<std::vector<double>>();
  if (t.size() != 3) throw std::runtime_error("read_pair: pose_t must have 3 entries");
  std::copy(t.begin(), t.end(), s.pose_ab.t.begin());
  s.k_a = mat_from_json(j.at("k_a"));
  s.k_b = mat_from_json(j.at("k_b"));
  s.has_homography = j.at("has_homography").get<bool>();
  if (s.has_homography) s.homography = mat_from_json(j.at("homography"));
  const auto da = j.at("depth_a").get<std::vector<double>>();
  const auto db = j.at("depth_b").get<std::vector<double>>();
  if (da.size() != static_cast<size_t>(s.height) * s.width || da.size() != db.size()) {
    throw std::runtime_error("read_pair: depth size mismatch in " + prefix + "_meta.json");
  }
  s.depth_a = Tensor::from({s.height, s.width}, da);
  s.depth_b = Tensor::from({s.height, s.width}, db);
  return s;
}

}  // namespace hcpm
