#include "hcpm/bench.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "json.hpp"

namespace hcpm {

namespace {

// Elementwise charges (see header).
constexpr int64_t kMulAdd = 2;
constexpr int64_t kElem = 1;
constexpr int64_t kSoftmaxElem = 4;
constexpr int64_t kLayerNormElem = 6;
constexpr int64_t kAffineElem = 2;

int64_t linear_flops(int64_t rows, int64_t in, int64_t out) {
  return rows * out * (kMulAdd * in + 1);  // matmul plus bias
}

int64_t conv_flops(int64_t out_cells, int64_t k2, int64_t cin, int64_t cout, bool activated) {
  int64_t f = out_cells * cout * (kMulAdd * k2 * cin + 1);
  if (activated) f += out_cells * cout * kElem;
  return f;
}

// One encoder tower on an image with `cells` coarse cells (h*w = 64*cells).
int64_t encoder_flops(int64_t cells, int64_t d_c, int64_t d_f) {
  const int64_t s1 = 16 * cells, s2 = 4 * cells, s3 = cells;
  int64_t f = 0;
  f += conv_flops(s1, 9, 1, d_f, true);
  f += conv_flops(s2, 9, d_f, d_c, true);
  f += conv_flops(s3, 9, d_c, d_c, true);
  f += conv_flops(s1, 1, d_f, d_f, false);   // lateral
  f += conv_flops(s3, 1, d_c, d_f, false);   // top-down before upsampling
  f += s1 * d_f * kElem;                     // fine merge add
  return f;
}

int64_t score_mlp_flops(int64_t rows, int64_t d, int64_t out_dim) {
  const int64_t hidden = d / 2;
  int64_t f = linear_flops(rows, d, hidden);
  f += rows * hidden * kElem;  // gelu
  f += linear_flops(rows, hidden, out_dim);
  return f;
}

int64_t ceil_log2(int64_t n) {
  int64_t b = 0;
  while ((int64_t{1} << b) < n) ++b;
  return b;
}

struct LayerShape {
  int64_t nq, nkv;      // rows the dense math runs on
  int64_t mask_cost;    // extra elementwise mask arithmetic
};

LayerShape layer_shape(int64_t rows_q, int64_t rows_kv, int64_t live_q, int64_t live_kv,
                       int64_t d, bool masked, PruneVariant variant) {
  if (!masked) return {rows_q, rows_kv, 0};
  if (variant == PruneVariant::implicit) {
    // keys masked after phi, values masked, output masked
    return {rows_q, rows_kv, d * (rows_q + 2 * rows_kv)};
  }
  // compacted: gathered rows scaled by their mask entries once per side
  return {live_q, live_kv, d * (live_q + live_kv)};
}

int64_t attention_layer_flops(const LayerShape& s, int64_t d, int64_t heads) {
  const int64_t dh = d / heads;
  int64_t f = s.mask_cost;
  f += linear_flops(s.nq, d, d);            // q projection
  f += 2 * linear_flops(s.nkv, d, d);       // k, v projections
  f += (s.nq + s.nkv) * d * kElem;          // phi
  f += kMulAdd * d * dh * s.nkv;            // per-head key summaries
  f += s.nkv * d * kElem;                   // key normalizer sums
  f += kMulAdd * d * dh * s.nq;             // numerator
  f += kMulAdd * d * s.nq;                  // denominator dot products
  f += s.nq * d * kElem;                    // normalizing division
  f += linear_flops(s.nq, d, d);            // merge
  f += s.nq * d * (kLayerNormElem + kAffineElem);
  f += linear_flops(s.nq, 2 * d, 2 * d);    // ffn hidden on concat(x, message)
  f += s.nq * 2 * d * kElem;                // gelu
  f += linear_flops(s.nq, 2 * d, d);
  f += s.nq * d * (kLayerNormElem + kAffineElem);
  f += s.nq * d * kElem;                    // residual
  return f;
}

int64_t dics_flops(int64_t rows, int64_t d) {
  int64_t f = rows * d * (kLayerNormElem + kAffineElem);
  f += score_mlp_flops(rows, d, 2);
  f += rows * 2 * kSoftmaxElem;
  f += rows * 6 * kElem;  // sampling and mask update
  return f;
}

}  // namespace

int64_t CostReport::stage(const std::string& name) const {
  for (const auto& s : stages) {
    if (s.name == name) return s.flops;
  }
  return 0;
}

int64_t CostReport::stage_prefix(const std::string& prefix) const {
  int64_t sum = 0;
  for (const auto& s : stages) {
    if (s.name.rfind(prefix, 0) == 0) sum += s.flops;
  }
  return sum;
}

std::string CostReport::to_json() const {
  nlohmann::json j;
  j["total_flops"] = total;
  nlohmann::json js = nlohmann::json::object();
  for (const auto& s : stages) js[s.name] = s.flops;
  j["stages"] = js;
  return j.dump();
}

CostReport count_flops(const PipelineConfig& cfg, const LiveCounts& live) {
  cfg.validate();
  if (static_cast<int>(live.blocks.size()) != cfg.n_blocks) {
    throw std::invalid_argument("count_flops: live counts cover " +
                                std::to_string(live.blocks.size()) + " blocks, config has " +
                                std::to_string(cfg.n_blocks));
  }
  const int64_t d = cfg.d_c, df = cfg.d_f;
  const bool masked = cfg.dics_enabled();
  CostReport r;

  r.stages.push_back({"encoder", encoder_flops(live.cells_a, d, df) + encoder_flops(live.cells_b, d, df)});
  r.stages.push_back({"positional", (static_cast<int64_t>(live.cells_a) + live.cells_b) * d * kElem});

  int64_t sp = score_mlp_flops(live.cells_a, d, 1) + score_mlp_flops(live.cells_b, d, 1);
  sp += (static_cast<int64_t>(live.cells_a) + live.cells_b) * kElem;  // sigmoid
  sp += live.cells_a * ceil_log2(live.cells_a) + live.cells_b * ceil_log2(live.cells_b);
  sp += (static_cast<int64_t>(live.k_a) + live.k_b) * d * kElem;  // score scaling
  r.stages.push_back({"self_prune", sp});

  for (int b = 0; b < cfg.n_blocks; ++b) {
    const auto& dims = live.blocks[static_cast<size_t>(b)];
    int64_t f = 0;
    f += attention_layer_flops(
        layer_shape(dims.rows_a, dims.rows_a, dims.live_a, dims.live_a, d, masked, cfg.variant), d, cfg.heads);
    f += attention_layer_flops(
        layer_shape(dims.rows_b, dims.rows_b, dims.live_b, dims.live_b, d, masked, cfg.variant), d, cfg.heads);
    f += attention_layer_flops(
        layer_shape(dims.rows_a, dims.rows_b, dims.live_a, dims.live_b, d, masked, cfg.variant), d, cfg.heads);
    f += attention_layer_flops(
        layer_shape(dims.rows_b, dims.rows_a, dims.live_b, dims.live_a, d, masked, cfg.variant), d, cfg.heads);
    r.stages.push_back({"block_" + std::to_string(b), f});
    if (dims.dics_ran) {
      r.stages.push_back({"dics_" + std::to_string(b), dics_flops(dims.rows_a, d) + dics_flops(dims.rows_b, d)});
    }
  }

  const int64_t ka = live.match_rows_a, kb = live.match_rows_b;
  int64_t mf = kMulAdd * d * ka * kb + ka * kb * kElem;  // similarities and temperature
  if (masked) mf += 4 * ka * kb * kElem;                 // bias add, outer product, confidence mask
  mf += 2 * ka * kb * kSoftmaxElem;
  mf += ka * kb * kElem;      // dual-softmax product
  mf += 2 * ka * kb * kElem;  // mutual argmax scans
  r.stages.push_back({"matching", mf});

  const int64_t w2 = static_cast<int64_t>(cfg.window) * cfg.window;
  const int64_t per_match = w2 * (kMulAdd * df + 1 + kSoftmaxElem + 3 * kMulAdd) + df * kElem + 10;
  r.stages.push_back({"refine", live.fine_matches * per_match});

  for (const auto& s : r.stages) r.total += s.flops;
  return r;
}

namespace {

double quantile(std::vector<double> v, double q) {
  if (v.empty()) return 0.0;
  std::sort(v.begin(), v.end());
  const double pos = q * static_cast<double>(v.size() - 1);
  const size_t lo = static_cast<size_t>(pos);
  const double frac = pos - static_cast<double>(lo);
  if (lo + 1 >= v.size()) return v.back();
  return v[lo] * (1.0 - frac) + v[lo + 1] * frac;
}

}  // namespace

std::string TimingReport::to_json() const {
  nlohmann::json j;
  j["repeats"] = repeats;
  j["total_median_ns"] = total_median_ns;
  j["total_iqr_ns"] = total_iqr_ns;
  nlohmann::json js = nlohmann::json::object();
  for (const auto& s : stages) {
    js[s.name] = {{"median_ns", s.median_ns}, {"iqr_ns", s.iqr_ns}, {"coarse", s.coarse}};
  }
  j["stages"] = js;
  return j.dump();
}

TimingReport time_pipeline(const PipelineConfig& cfg, const ModelParams& params,
                           const Tensor& image_a, const Tensor& image_b, int repeats, int warmup) {
  if (repeats < 1) throw std::invalid_argument("time_pipeline: repeats must be >= 1");
  TimingReport rep;
  rep.repeats = repeats;

  std::map<std::string, std::vector<double>> samples;
  std::vector<double> totals;
  for (int run = 0; run < warmup + repeats; ++run) {
    StageClock clock;
    forward(image_a, image_b, params, cfg, SampleMode::eval, nullptr, SampleStyle::hard_st, &clock);
    if (run < warmup) continue;
    double total = 0;
    for (const auto& [name, ns] : clock.ns) {
      samples[name].push_back(static_cast<double>(ns));
      total += static_cast<double>(ns);
    }
    totals.push_back(total);
  }

  for (const auto& [name, v] : samples) {
    StageTiming t;
    t.name = name;
    t.median_ns = quantile(v, 0.5);
    t.iqr_ns = quantile(v, 0.75) - quantile(v, 0.25);
    t.coarse = t.median_ns < 1000.0;
    rep.stages.push_back(std::move(t));
  }
  rep.total_median_ns = quantile(totals, 0.5);
  rep.total_iqr_ns = quantile(totals, 0.75) - quantile(totals, 0.25);
  return rep;
}

}  // namespace hcpm
