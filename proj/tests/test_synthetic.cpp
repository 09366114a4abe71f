// Procedural pair generation: determinism, the exact-identity path, depth
// carving, pose retry exhaustion, and the on-disk round trip.

#include <cmath>
#include <cstdio>
#include <fstream>
#include <string>
#include <vector>

#include "doctest.h"
#include "hcpm/synthetic.hpp"

using namespace hcpm;

namespace {

std::string temp_path(const std::string& name) {
  return "/tmp/hcpm_test_" + std::to_string(::getpid()) + "_" + name;
}

SceneConfig identity_config(uint64_t seed) {
  SceneConfig cfg;
  cfg.seed = seed;
  cfg.max_rotation_deg = 0.0;
  cfg.max_translation = 0.0;
  return cfg;
}

}  // namespace

TEST_SUITE("synthetic") {

TEST_CASE("generation is deterministic per seed") {
  SceneConfig cfg;
  cfg.seed = 77;
  PairSample s1 = generate_pair(cfg);
  PairSample s2 = generate_pair(cfg);
  CHECK(*s1.image_a.data == *s2.image_a.data);
  CHECK(*s1.image_b.data == *s2.image_b.data);
  CHECK(*s1.depth_a.data == *s2.depth_a.data);
  CHECK(*s1.depth_b.data == *s2.depth_b.data);
  CHECK(s1.pose_ab.t == s2.pose_ab.t);
  cfg.seed = 78;
  PairSample s3 = generate_pair(cfg);
  CHECK(*s3.image_a.data != *s1.image_a.data);
}

TEST_CASE("identity configs render both views bit for bit equal") {
  PairSample s = generate_pair(identity_config(5));
  CHECK(s.pose_ab.is_identity());
  CHECK(*s.image_a.data == *s.image_b.data);
  REQUIRE(s.has_homography);
  for (int i = 0; i < 9; ++i)
    CHECK(s.homography.m[static_cast<size_t>(i)] == Mat3::identity().m[static_cast<size_t>(i)]);
  // Depth holes are carved independently per side; with carving off the
  // depth maps coincide too.
  SceneConfig plain = identity_config(5);
  plain.invalid_fraction = 0.0;
  PairSample s2 = generate_pair(plain);
  CHECK(*s2.depth_a.data == *s2.depth_b.data);
}

TEST_CASE("images stay inside [0, 1] across texture families") {
  for (TextureFamily tex : {TextureFamily::blobs, TextureFamily::gratings, TextureFamily::mixed}) {
    SceneConfig cfg;
    cfg.seed = 91;
    cfg.texture = tex;
    PairSample s = generate_pair(cfg);
    REQUIRE(s.image_a.shape == Shape{64, 64, 1});
    double lo = 1e30, hi = -1e30, spread = 0.0;
    for (double v : *s.image_a.data) {
      lo = std::min(lo, v);
      hi = std::max(hi, v);
    }
    spread = hi - lo;
    CHECK(lo >= 0.0);
    CHECK(hi <= 1.0);
    CHECK(spread > 0.05);  // the texture must not be flat
  }
}

TEST_CASE("texture families differ") {
  SceneConfig cfg;
  cfg.seed = 101;
  cfg.texture = TextureFamily::blobs;
  PairSample blobs = generate_pair(cfg);
  cfg.texture = TextureFamily::gratings;
  PairSample gratings = generate_pair(cfg);
  CHECK(*blobs.image_a.data != *gratings.image_a.data);
}

TEST_CASE("fronto-parallel depth equals the plane depth outside the carved hole") {
  SceneConfig cfg = identity_config(7);
  cfg.plane_depth = 3.25;
  cfg.invalid_fraction = 0.15;
  PairSample s = generate_pair(cfg);
  int zeros = 0;
  for (double z : *s.depth_a.data) {
    if (z == 0.0)
      ++zeros;
    else
      CHECK(z == doctest::Approx(3.25).epsilon(1e-12));
  }
  // Carve area: a rectangle with sides dim * sqrt(fraction).
  const int side = static_cast<int>(std::lround(64.0 * std::sqrt(0.15)));
  CHECK(zeros == side * side);
  cfg.invalid_fraction = 0.0;
  PairSample full = generate_pair(cfg);
  for (double z : *full.depth_a.data) CHECK(z > 0.0);
}

TEST_CASE("a front slab disables the homography and shortens depth") {
  SceneConfig cfg = identity_config(11);
  cfg.plane_depth = 4.0;
  cfg.second_plane_depth = 2.0;
  cfg.invalid_fraction = 0.0;
  PairSample s = generate_pair(cfg);
  CHECK_FALSE(s.has_homography);
  int near = 0, far = 0;
  for (double z : *s.depth_a.data) {
    if (std::abs(z - 2.0) < 1e-9) ++near;
    if (std::abs(z - 4.0) < 1e-9) ++far;
  }
  CHECK(near > 0);
  CHECK(far > 0);
  CHECK(near + far == 64 * 64);
}

TEST_CASE("impossible covisibility demands exhaust the pose retries") {
  SceneConfig cfg;
  cfg.seed = 13;
  cfg.max_translation = 50.0;  // shifts the view far off screen
  cfg.max_rotation_deg = 0.0;
  cfg.min_covisible = 0.9;
  CHECK_THROWS_AS(generate_pair(cfg), std::runtime_error);
}

TEST_CASE("dataset seeds advance per pair") {
  SceneConfig cfg;
  cfg.seed = 200;
  auto set = generate_dataset(cfg, 3);
  REQUIRE(set.size() == 3);
  for (int i = 0; i < 3; ++i) {
    SceneConfig one = cfg;
    one.seed = 200 + static_cast<uint64_t>(i);
    PairSample expect = generate_pair(one);
    CHECK(*set[static_cast<size_t>(i)].image_a.data == *expect.image_a.data);
  }
  CHECK(*set[0].image_a.data != *set[1].image_a.data);
}

TEST_CASE("PGM round trip quantizes to 8 bits") {
  SceneConfig cfg;
  cfg.seed = 61;
  PairSample s = generate_pair(cfg);
  const std::string path = temp_path("img.pgm");
  write_pgm(path, s.image_a);
  Tensor back = read_pgm(path);
  REQUIRE(back.shape == s.image_a.shape);
  for (int64_t i = 0; i < back.numel(); ++i)
    CHECK(std::abs(back.at(i) - s.image_a.at(i)) <= 0.5 / 255.0 + 1e-12);
  std::remove(path.c_str());
}

TEST_CASE("PGM reader accepts comments and rejects junk") {
  const std::string path = temp_path("hand.pgm");
  {
    std::ofstream out(path, std::ios::binary);
    out << "P5\n# a comment\n2 2\n255\n";
    const unsigned char px[4] = {0, 85, 170, 255};
    out.write(reinterpret_cast<const char*>(px), 4);
  }
  Tensor img = read_pgm(path);
  REQUIRE(img.shape == Shape{2, 2, 1});
  CHECK(img.at(0) == 0.0);
  CHECK(img.at(3) == 1.0);
  CHECK(img.at(1) == doctest::Approx(85.0 / 255.0).epsilon(1e-12));
  std::remove(path.c_str());
  {
    std::ofstream out(path, std::ios::binary);
    out << "P6\n2 2\n255\n";
  }
  CHECK_THROWS(read_pgm(path));
  std::remove(path.c_str());
  CHECK_THROWS(read_pgm(temp_path("missing.pgm")));
}

TEST_CASE("pair files round trip pose, intrinsics, and depth exactly") {
  SceneConfig cfg;
  cfg.seed = 63;
  PairSample s = generate_pair(cfg);
  const std::string prefix = temp_path("pair");
  write_pair(prefix, s);
  PairSample back = read_pair(prefix);
  CHECK(back.height == s.height);
  CHECK(back.width == s.width);
  CHECK(*back.depth_a.data == *s.depth_a.data);
  CHECK(*back.depth_b.data == *s.depth_b.data);
  CHECK(back.pose_ab.t == s.pose_ab.t);
  CHECK(back.pose_ab.r.m == s.pose_ab.r.m);
  CHECK(back.k_a.m == s.k_a.m);
  CHECK(back.k_b.m == s.k_b.m);
  REQUIRE(back.has_homography == s.has_homography);
  CHECK(back.homography.m == s.homography.m);
  for (int64_t i = 0; i < s.image_a.numel(); ++i)
    CHECK(std::abs(back.image_a.at(i) - s.image_a.at(i)) <= 0.5 / 255.0 + 1e-12);
  for (const char* suffix : {"_a.pgm", "_b.pgm", "_meta.json"}) std::remove((prefix + suffix).c_str());
}

TEST_CASE("scene dimensions must be multiples of 8") {
  SceneConfig cfg;
  cfg.height = 60;
  CHECK_THROWS(generate_pair(cfg));
}

}  // TEST_SUITE
