#include "hcpm/encoder.hpp"

#include <cmath>
#include <map>
#include <stdexcept>
#include <tuple>

namespace hcpm {

EncoderParams make_encoder_params(ParamStore& store, int d_c, int d_f, Rng& rng) {
  if (d_c < 4 || d_f < 1) throw std::invalid_argument("encoder: channel counts too small");
  EncoderParams p;
  p.conv1_w = store.add("encoder.conv1.w", {3, 3, 1, d_f});
  p.conv1_b = store.add("encoder.conv1.b", {d_f});
  p.conv2_w = store.add("encoder.conv2.w", {3, 3, d_f, d_c});
  p.conv2_b = store.add("encoder.conv2.b", {d_c});
  p.conv3_w = store.add("encoder.conv3.w", {3, 3, d_c, d_c});
  p.conv3_b = store.add("encoder.conv3.b", {d_c});
  p.lateral_w = store.add("encoder.lateral.w", {1, 1, d_f, d_f});
  p.lateral_b = store.add("encoder.lateral.b", {d_f});
  p.topdown_w = store.add("encoder.topdown.w", {1, 1, d_c, d_f});
  p.topdown_b = store.add("encoder.topdown.b", {d_f});
  init_xavier(p.conv1_w, 9 * 1, d_f, rng);
  init_xavier(p.conv2_w, 9 * d_f, d_c, rng);
  init_xavier(p.conv3_w, 9 * d_c, d_c, rng);
  init_xavier(p.lateral_w, d_f, d_f, rng);
  init_xavier(p.topdown_w, d_c, d_f, rng);
  return p;
}

std::pair<FeatureGrid, FeatureGrid> encode(const Tensor& image, const EncoderParams& params) {
  if (image.rank() != 3 || image.dim(2) != 1) {
    throw std::invalid_argument("encode: image must be h x w x 1");
  }
  const int h = image.dim(0), w = image.dim(1);
  if (h % 8 != 0 || w % 8 != 0 || h == 0 || w == 0) {
    throw std::invalid_argument("encode: image size " + std::to_string(h) + "x" +
                                std::to_string(w) + " not divisible by 8");
  }
  Tensor s1 = gelu(conv2d(image, params.conv1_w, params.conv1_b, 2));  // 1/2, d_f
  Tensor s2 = gelu(conv2d(s1, params.conv2_w, params.conv2_b, 2));     // 1/4, d_c
  Tensor s3 = gelu(conv2d(s2, params.conv3_w, params.conv3_b, 2));     // 1/8, d_c

  Tensor lat = conv2d(s1, params.lateral_w, params.lateral_b, 1);
  Tensor top = upsample_nearest(conv2d(s3, params.topdown_w, params.topdown_b, 1), 4);
  Tensor fine_vals = add(lat, top);

  FeatureGrid coarse{h / 8, w / 8, s3.dim(2), GridScale::coarse, s3};
  FeatureGrid fine{h / 2, w / 2, fine_vals.dim(2), GridScale::fine, fine_vals};
  return {coarse, fine};
}

Tensor positional_code_table(int h, int w, int d) {
  if (d % 4 != 0) throw std::invalid_argument("positional_encoding: channels must be divisible by 4");
  static std::map<std::tuple<int, int, int>, Tensor> cache;
  const auto key = std::make_tuple(h, w, d);
  auto it = cache.find(key);
  if (it != cache.end()) return it->second;

  Tensor table = Tensor::zeros({h * w, d});
  const int quarters = d / 4;
  for (int r = 0; r < h; ++r) {
    for (int c = 0; c < w; ++c) {
      double* row = table.data->data() + (static_cast<size_t>(r) * w + c) * d;
      for (int q = 0; q < quarters; ++q) {
        const double freq = std::pow(10000.0, -4.0 * q / d);
        row[4 * q + 0] = std::sin(freq * c);
        row[4 * q + 1] = std::cos(freq * c);
        row[4 * q + 2] = std::sin(freq * r);
        row[4 * q + 3] = std::cos(freq * r);
      }
    }
  }
  cache.emplace(key, table);
  return table;
}

FeatureGrid positional_encoding(const FeatureGrid& grid) {
  if (grid.scale != GridScale::coarse) {
    throw std::invalid_argument("positional_encoding: expects a coarse grid");
  }
  Tensor table = positional_code_table(grid.h, grid.w, grid.channels);
  Tensor code = reshape_copy(table, {grid.h, grid.w, grid.channels});
  FeatureGrid out = grid;
  out.values = add(grid.values, code);
  return out;
}

}  // namespace hcpm
