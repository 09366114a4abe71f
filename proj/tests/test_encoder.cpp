// Encoder shapes, padding behavior, and the sinusoidal position code.

#include <cmath>
#include <vector>

#include "doctest.h"
#include "hcpm/encoder.hpp"

using namespace hcpm;

namespace {

Tensor random_image(int h, int w, Rng& rng) {
  std::vector<double> v(static_cast<size_t>(h) * w);
  for (auto& x : v) x = rng.uniform01();
  return Tensor::from({h, w, 1}, std::move(v));
}

}  // namespace

TEST_SUITE("encoder") {

TEST_CASE("encode produces 1/8 coarse and 1/2 fine grids") {
  Rng rng(7);
  ParamStore store;
  auto params = make_encoder_params(store, 16, 8, rng);
  auto [coarse, fine] = encode(random_image(24, 32, rng), params);
  CHECK(coarse.h == 3);
  CHECK(coarse.w == 4);
  CHECK(coarse.channels == 16);
  CHECK(coarse.scale == GridScale::coarse);
  CHECK(fine.h == 12);
  CHECK(fine.w == 16);
  CHECK(fine.channels == 8);
  CHECK(fine.scale == GridScale::fine);
  CHECK(coarse.values.shape == Shape{3, 4, 16});
  CHECK(fine.values.shape == Shape{12, 16, 8});
}

TEST_CASE("encode rejects sizes not divisible by 8") {
  Rng rng(7);
  ParamStore store;
  auto params = make_encoder_params(store, 16, 8, rng);
  CHECK_THROWS(encode(Tensor::zeros({20, 32, 1}), params));
  CHECK_THROWS(encode(Tensor::zeros({32, 12, 1}), params));
}

TEST_CASE("constant images give spatially constant features") {
  // Edge-replicate padding means every window of a constant image is equal.
  Rng rng(13);
  ParamStore store;
  auto params = make_encoder_params(store, 8, 4, rng);
  auto [coarse, fine] = encode(Tensor::full({16, 16, 1}, 0.42), params);
  for (int c = 0; c < coarse.channels; ++c) {
    double first = coarse.values.at(c);
    for (int i = 0; i < coarse.cells(); ++i)
      CHECK(coarse.values.at(i * coarse.channels + c) == doctest::Approx(first).epsilon(1e-12));
  }
  for (int c = 0; c < fine.channels; ++c) {
    double first = fine.values.at(c);
    for (int i = 0; i < fine.h * fine.w; ++i)
      CHECK(fine.values.at(i * fine.channels + c) == doctest::Approx(first).epsilon(1e-12));
  }
}

TEST_CASE("encode is deterministic") {
  Rng rng(17);
  ParamStore store;
  auto params = make_encoder_params(store, 8, 4, rng);
  Tensor img = random_image(16, 24, rng);
  auto [c1, f1] = encode(img, params);
  auto [c2, f2] = encode(img, params);
  CHECK(*c1.values.data == *c2.values.data);
  CHECK(*f1.values.data == *f2.values.data);
}

TEST_CASE("distinct images give distinct features") {
  Rng rng(19);
  ParamStore store;
  auto params = make_encoder_params(store, 8, 4, rng);
  auto [c1, f1] = encode(random_image(16, 16, rng), params);
  auto [c2, f2] = encode(random_image(16, 16, rng), params);
  CHECK(*c1.values.data != *c2.values.data);
}

TEST_CASE("positional code table matches the sin/cos construction") {
  const int h = 3, w = 5, d = 8;
  Tensor table = positional_code_table(h, w, d);
  REQUIRE(table.shape == Shape{h * w, d});
  // Channel layout: per frequency q a group [sin x, cos x, sin y, cos y]
  // at channels 4q..4q+3, frequencies geometric in 1e4^(-4q/d).
  for (int r = 0; r < h; ++r)
    for (int c = 0; c < w; ++c)
      for (int q = 0; q < d / 4; ++q) {
        double freq = std::pow(10000.0, -4.0 * q / d);
        const int base = (r * w + c) * d + 4 * q;
        CHECK(table.at(base + 0) == doctest::Approx(std::sin(freq * c)).epsilon(1e-12));
        CHECK(table.at(base + 1) == doctest::Approx(std::cos(freq * c)).epsilon(1e-12));
        CHECK(table.at(base + 2) == doctest::Approx(std::sin(freq * r)).epsilon(1e-12));
        CHECK(table.at(base + 3) == doctest::Approx(std::cos(freq * r)).epsilon(1e-12));
      }
}

TEST_CASE("positional_encoding adds the table to the features") {
  Rng rng(23);
  ParamStore store;
  auto params = make_encoder_params(store, 8, 4, rng);
  auto [coarse, fine] = encode(random_image(16, 16, rng), params);
  FeatureGrid coded = positional_encoding(coarse);
  Tensor table = positional_code_table(coarse.h, coarse.w, coarse.channels);
  for (int i = 0; i < coarse.cells(); ++i)
    for (int c = 0; c < coarse.channels; ++c) {
      const int64_t flat = i * coarse.channels + c;
      CHECK(coded.values.at(flat) == doctest::Approx(coarse.values.at(flat) + table.at(flat)).epsilon(1e-13));
    }
}

TEST_CASE("positional_encoding rejects fine grids and bad channel counts") {
  FeatureGrid fine;
  fine.h = 4;
  fine.w = 4;
  fine.channels = 8;
  fine.scale = GridScale::fine;
  fine.values = Tensor::zeros({4, 4, 8});
  CHECK_THROWS(positional_encoding(fine));
  CHECK_THROWS(positional_code_table(4, 4, 6));
}

TEST_CASE("flat view matches the grid layout") {
  Rng rng(29);
  ParamStore store;
  auto params = make_encoder_params(store, 8, 4, rng);
  auto [coarse, fine] = encode(random_image(16, 16, rng), params);
  Tensor flat = coarse.flat();
  REQUIRE(flat.shape == Shape{coarse.cells(), coarse.channels});
  for (int64_t i = 0; i < flat.numel(); ++i) CHECK(flat.at(i) == coarse.values.at(i));
}

TEST_CASE("gradients flow through the encoder") {
  Rng rng(31);
  ParamStore store;
  auto params = make_encoder_params(store, 8, 4, rng);
  Tensor img = random_image(8, 8, rng);
  Tensor probe_c, probe_f;
  {
    auto [coarse, fine] = encode(img, params);
    probe_c = Tensor::from(coarse.values.shape, std::vector<double>(static_cast<size_t>(coarse.values.numel()), 0.0));
    probe_f = Tensor::from(fine.values.shape, std::vector<double>(static_cast<size_t>(fine.values.numel()), 0.0));
    for (int64_t i = 0; i < probe_c.numel(); ++i) probe_c.at(i) = rng.uniform(-1, 1);
    for (int64_t i = 0; i < probe_f.numel(); ++i) probe_f.at(i) = rng.uniform(-1, 1);
  }
  auto f = [&]() {
    auto [coarse, fine] = encode(img, params);
    return sum_all(add(sum_all(mul(coarse.values, probe_c)), sum_all(mul(fine.values, probe_f))));
  };
  std::vector<Tensor> inputs;
  for (auto& [name, t] : store.items) inputs.push_back(t);
  auto rep = grad_check(f, inputs, 1e-5, 1e-4, 6);
  CHECK_MESSAGE(rep.passed, "max rel err ", rep.max_rel_err, " input ", rep.worst_input);
}

}  // TEST_SUITE
