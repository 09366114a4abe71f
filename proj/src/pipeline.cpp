#include "hcpm/pipeline.hpp"

#include <algorithm>
#include <bit>
#include <chrono>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <limits>
#include <numeric>
#include <ostream>
#include <sstream>
#include <stdexcept>

#include <Eigen/Dense>

#include "json.hpp"

namespace hcpm {

namespace {

using nlohmann::json;

class StageTimer {
 public:
  StageTimer(StageClock* clock, std::string name) : clock_(clock), name_(std::move(name)) {
    if (clock_ != nullptr) t0_ = std::chrono::steady_clock::now();
  }
  ~StageTimer() {
    if (clock_ != nullptr) {
      const auto dt = std::chrono::steady_clock::now() - t0_;
      clock_->add(name_, std::chrono::duration_cast<std::chrono::nanoseconds>(dt).count());
    }
  }
  StageTimer(const StageTimer&) = delete;
  StageTimer& operator=(const StageTimer&) = delete;

 private:
  StageClock* clock_;
  std::string name_;
  std::chrono::steady_clock::time_point t0_;
};

template <typename T>
std::string enum_to_string(T v);

template <>
std::string enum_to_string(PruneVariant v) {
  return v == PruneVariant::implicit ? "implicit" : "direct";
}
template <>
std::string enum_to_string(SuperviseMode v) {
  return v == SuperviseMode::last ? "last" : "all";
}
template <>
std::string enum_to_string(CovisMode v) {
  return v == CovisMode::pointwise ? "pointwise" : "bbox";
}
template <>
std::string enum_to_string(IpruneLabels v) {
  return v == IpruneLabels::covisible ? "covisible" : "depth_validity";
}
template <>
std::string enum_to_string(TextureFamily v) {
  switch (v) {
    case TextureFamily::blobs: return "blobs";
    case TextureFamily::gratings: return "gratings";
    default: return "mixed";
  }
}

template <typename T>
T enum_from_string(const std::string& s, const char* key);

template <>
PruneVariant enum_from_string(const std::string& s, const char* key) {
  if (s == "implicit") return PruneVariant::implicit;
  if (s == "direct") return PruneVariant::direct;
  throw std::invalid_argument(std::string("config: bad ") + key + " value '" + s + "'");
}
template <>
SuperviseMode enum_from_string(const std::string& s, const char* key) {
  if (s == "last") return SuperviseMode::last;
  if (s == "all") return SuperviseMode::all;
  throw std::invalid_argument(std::string("config: bad ") + key + " value '" + s + "'");
}
template <>
CovisMode enum_from_string(const std::string& s, const char* key) {
  if (s == "pointwise") return CovisMode::pointwise;
  if (s == "bbox") return CovisMode::bbox;
  throw std::invalid_argument(std::string("config: bad ") + key + " value '" + s + "'");
}
template <>
IpruneLabels enum_from_string(const std::string& s, const char* key) {
  if (s == "covisible") return IpruneLabels::covisible;
  if (s == "depth_validity") return IpruneLabels::depth_validity;
  throw std::invalid_argument(std::string("config: bad ") + key + " value '" + s + "'");
}
template <>
TextureFamily enum_from_string(const std::string& s, const char* key) {
  if (s == "blobs") return TextureFamily::blobs;
  if (s == "gratings") return TextureFamily::gratings;
  if (s == "mixed") return TextureFamily::mixed;
  throw std::invalid_argument(std::string("config: bad ") + key + " value '" + s + "'");
}

}  // namespace

SceneConfig PipelineConfig::scene(uint64_t scene_seed) const {
  SceneConfig s;
  s.height = image_h;
  s.width = image_w;
  s.texture = texture;
  s.plane_depth = plane_depth;
  s.second_plane_depth = second_plane_depth;
  s.max_rotation_deg = max_rotation_deg;
  s.max_translation = max_translation;
  s.invalid_fraction = invalid_fraction;
  s.min_covisible = min_covisible;
  s.seed = scene_seed;
  return s;
}

void PipelineConfig::validate() const {
  const auto fail = [](const std::string& msg) { throw std::invalid_argument("config: " + msg); };
  if (d_c < 4 || d_c % 4 != 0) fail("d_c must be a positive multiple of 4");
  if (d_f < 1) fail("d_f must be positive");
  if (heads < 1 || d_c % heads != 0) fail("heads must divide d_c");
  if (n_blocks < 1) fail("n_blocks must be >= 1");
  if (!(alpha > 0.0) || alpha > 1.0) fail("alpha must lie in (0, 1]");
  if (dics_from_block < 0) fail("dics_from_block must be >= 0");
  if (!(gumbel_tau > 0.0)) fail("gumbel_tau must be > 0");
  if (!(tau_m > 0.0)) fail("tau_m must be > 0");
  if (theta_c < 0.0 || theta_c >= 1.0) fail("theta_c must lie in [0, 1)");
  if (window < 1 || window % 2 == 0) fail("window must be odd and positive");
  if (fine_sample_ratio < 0.0 || fine_sample_ratio > 1.0) fail("fine_sample_ratio must lie in [0, 1]");
  if (w_self < 0.0 || w_inter < 0.0 || w_coarse < 0.0 || w_fine < 0.0) fail("loss weights must be >= 0");
  if (focal_gamma < 0.0) fail("focal_gamma must be >= 0");
  if (!(focal_alpha > 0.0) || focal_alpha >= 1.0) fail("focal_alpha must lie in (0, 1)");
  if (!(learning_rate > 0.0)) fail("learning_rate must be > 0");
  if (steps < 0) fail("steps must be >= 0");
  if (batch_size < 1) fail("batch_size must be >= 1");
  if (log_every < 1) fail("log_every must be >= 1");
  if (eval_pairs < 1) fail("eval_pairs must be >= 1");
  if (image_h < 16 || image_w < 16 || image_h % 8 != 0 || image_w % 8 != 0) {
    fail("image dimensions must be multiples of 8, at least 16");
  }
  if (!(plane_depth > 0.0)) fail("plane_depth must be > 0");
  if (second_plane_depth < 0.0 || (second_plane_depth > 0.0 && second_plane_depth >= plane_depth)) {
    fail("second_plane_depth must be 0 or in (0, plane_depth)");
  }
  if (max_rotation_deg < 0.0 || max_translation < 0.0) fail("pose ranges must be >= 0");
  if (invalid_fraction < 0.0 || invalid_fraction >= 1.0) fail("invalid_fraction must lie in [0, 1)");
  if (min_covisible < 0.0 || min_covisible > 1.0) fail("min_covisible must lie in [0, 1]");
}

PipelineConfig PipelineConfig::from_json_text(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw std::invalid_argument(std::string("config: invalid JSON: ") + e.what());
  }
  if (!j.is_object()) throw std::invalid_argument("config: top level must be an object");

  PipelineConfig c;
  for (const auto& [key, value] : j.items()) {
    try {
      if (key == "d_c") c.d_c = value.get<int>();
      else if (key == "d_f") c.d_f = value.get<int>();
      else if (key == "n_blocks") c.n_blocks = value.get<int>();
      else if (key == "heads") c.heads = value.get<int>();
      else if (key == "alpha") c.alpha = value.get<double>();
      else if (key == "variant") c.variant = enum_from_string<PruneVariant>(value.get<std::string>(), "variant");
      else if (key == "dics_from_block") c.dics_from_block = value.get<int>();
      else if (key == "gumbel_tau") c.gumbel_tau = value.get<double>();
      else if (key == "discard_after_prune") c.discard_after_prune = value.get<bool>();
      else if (key == "tau_m") c.tau_m = value.get<double>();
      else if (key == "theta_c") c.theta_c = value.get<double>();
      else if (key == "window") c.window = value.get<int>();
      else if (key == "supervise") c.supervise = enum_from_string<SuperviseMode>(value.get<std::string>(), "supervise");
      else if (key == "covis") c.covis = enum_from_string<CovisMode>(value.get<std::string>(), "covis");
      else if (key == "iprune_labels") c.iprune_labels = enum_from_string<IpruneLabels>(value.get<std::string>(), "iprune_labels");
      else if (key == "fine_sample_ratio") c.fine_sample_ratio = value.get<double>();
      else if (key == "w_self") c.w_self = value.get<double>();
      else if (key == "w_inter") c.w_inter = value.get<double>();
      else if (key == "w_coarse") c.w_coarse = value.get<double>();
      else if (key == "w_fine") c.w_fine = value.get<double>();
      else if (key == "focal_gamma") c.focal_gamma = value.get<double>();
      else if (key == "focal_alpha") c.focal_alpha = value.get<double>();
      else if (key == "learning_rate") c.learning_rate = value.get<double>();
      else if (key == "steps") c.steps = value.get<int>();
      else if (key == "batch_size") c.batch_size = value.get<int>();
      else if (key == "seed") c.seed = value.get<uint64_t>();
      else if (key == "log_every") c.log_every = value.get<int>();
      else if (key == "eval_pairs") c.eval_pairs = value.get<int>();
      else if (key == "image_h") c.image_h = value.get<int>();
      else if (key == "image_w") c.image_w = value.get<int>();
      else if (key == "texture") c.texture = enum_from_string<TextureFamily>(value.get<std::string>(), "texture");
      else if (key == "plane_depth") c.plane_depth = value.get<double>();
      else if (key == "second_plane_depth") c.second_plane_depth = value.get<double>();
      else if (key == "max_rotation_deg") c.max_rotation_deg = value.get<double>();
      else if (key == "max_translation") c.max_translation = value.get<double>();
      else if (key == "invalid_fraction") c.invalid_fraction = value.get<double>();
      else if (key == "min_covisible") c.min_covisible = value.get<double>();
      else throw std::invalid_argument("config: unknown key '" + key + "'");
    } catch (const json::exception& e) {
      throw std::invalid_argument("config: bad value for '" + key + "': " + e.what());
    }
  }
  c.validate();
  return c;
}

PipelineConfig PipelineConfig::from_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("config: cannot open " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return from_json_text(ss.str());
}

std::string PipelineConfig::to_json_text() const {
  json j;
  j["d_c"] = d_c;
  j["d_f"] = d_f;
  j["n_blocks"] = n_blocks;
  j["heads"] = heads;
  j["alpha"] = alpha;
  j["variant"] = enum_to_string(variant);
  j["dics_from_block"] = dics_from_block;
  j["gumbel_tau"] = gumbel_tau;
  j["discard_after_prune"] = discard_after_prune;
  j["tau_m"] = tau_m;
  j["theta_c"] = theta_c;
  j["window"] = window;
  j["supervise"] = enum_to_string(supervise);
  j["covis"] = enum_to_string(covis);
  j["iprune_labels"] = enum_to_string(iprune_labels);
  j["fine_sample_ratio"] = fine_sample_ratio;
  j["w_self"] = w_self;
  j["w_inter"] = w_inter;
  j["w_coarse"] = w_coarse;
  j["w_fine"] = w_fine;
  j["focal_gamma"] = focal_gamma;
  j["focal_alpha"] = focal_alpha;
  j["learning_rate"] = learning_rate;
  j["steps"] = steps;
  j["batch_size"] = batch_size;
  j["seed"] = seed;
  j["log_every"] = log_every;
  j["eval_pairs"] = eval_pairs;
  j["image_h"] = image_h;
  j["image_w"] = image_w;
  j["texture"] = enum_to_string(texture);
  j["plane_depth"] = plane_depth;
  j["second_plane_depth"] = second_plane_depth;
  j["max_rotation_deg"] = max_rotation_deg;
  j["max_translation"] = max_translation;
  j["invalid_fraction"] = invalid_fraction;
  j["min_covisible"] = min_covisible;
  return j.dump(2);
}

ModelParams::ModelParams(const PipelineConfig& cfg, uint64_t init_seed)
    : d_c(cfg.d_c), d_f(cfg.d_f), n_blocks(cfg.n_blocks), heads(cfg.heads) {
  cfg.validate();
  Rng rng(init_seed);
  encoder = make_encoder_params(store, d_c, d_f, rng);
  self_prune = make_score_mlp_params(store, "self_prune", d_c, 1, rng);
  blocks.reserve(static_cast<size_t>(n_blocks));
  for (int b = 0; b < n_blocks; ++b) {
    const std::string prefix = "block" + std::to_string(b);
    Block blk;
    blk.sc.sa = make_attn_layer_params(store, prefix + ".sa", d_c, rng);
    blk.sc.ca = make_attn_layer_params(store, prefix + ".ca", d_c, rng);
    blk.dics = make_dics_params(store, prefix + ".dics", d_c, rng);
    blocks.push_back(std::move(blk));
  }
}

namespace {

// Physically removes pruned rows, keeping the surviving mask entries (and
// their straight-through gradient links) attached to the graph.
void compact_candidates(CandidateSet* cs, Tensor* features) {
  const auto live = cs->mask.live_indices();
  if (static_cast<int>(live.size()) == cs->mask.size()) return;
  *features = gather_rows(*features, live);
  std::vector<int> gi;
  gi.reserve(live.size());
  for (int i : live) gi.push_back(cs->grid_indices[static_cast<size_t>(i)]);
  cs->grid_indices = std::move(gi);
  cs->mask = PruneMask::from_values(gather_rows(cs->mask.values, live), cs->mask.soft);
}

}  // namespace

ForwardResult forward(const Tensor& image_a, const Tensor& image_b, const ModelParams& params,
                      const PipelineConfig& cfg, SampleMode mode, Rng* rng, SampleStyle style,
                      StageClock* clock) {
  cfg.validate();
  if (mode == SampleMode::train && rng == nullptr && cfg.dics_enabled()) {
    throw std::invalid_argument("forward: train mode needs an rng");
  }
  Rng fallback(0);
  Rng& grng = rng != nullptr ? *rng : fallback;

  ForwardResult out;
  FeatureGrid coarse_a, coarse_b;
  {
    StageTimer t(clock, "encoder");
    auto ea = encode(image_a, params.encoder);
    auto eb = encode(image_b, params.encoder);
    coarse_a = std::move(ea.first);
    out.fine_a = std::move(ea.second);
    coarse_b = std::move(eb.first);
    out.fine_b = std::move(eb.second);
  }
  {
    StageTimer t(clock, "positional");
    coarse_a = positional_encoding(coarse_a);
    coarse_b = positional_encoding(coarse_b);
  }
  {
    StageTimer t(clock, "self_prune");
    out.score_a = self_prune_score(coarse_a, params.self_prune);
    out.score_b = self_prune_score(coarse_b, params.self_prune);
    out.cand_a = topk_select(coarse_a, out.score_a, cfg.alpha);
    out.cand_b = topk_select(coarse_b, out.score_b, cfg.alpha);
  }

  out.live.cells_a = coarse_a.cells();
  out.live.cells_b = coarse_b.cells();
  out.live.k_a = out.cand_a.features.dim(0);
  out.live.k_b = out.cand_b.features.dim(0);

  const bool masked = cfg.dics_enabled();
  Tensor fa = out.cand_a.features;
  Tensor fb = out.cand_b.features;

  for (int b = 0; b < params.n_blocks; ++b) {
    LiveCounts::BlockDims dims;
    dims.rows_a = fa.dim(0);
    dims.rows_b = fb.dim(0);
    dims.live_a = out.cand_a.mask.live_count();
    dims.live_b = out.cand_b.mask.live_count();

    {
      StageTimer t(clock, "block_" + std::to_string(b));
      auto next = self_cross_block(fa, fb, out.cand_a.mask, out.cand_b.mask, params.blocks[static_cast<size_t>(b)].sc,
                                   cfg.heads, cfg.variant, masked);
      fa = std::move(next.first);
      fb = std::move(next.second);
    }

    BlockTrace tr;
    if (masked && b >= cfg.dics_from_block) {
      StageTimer t(clock, "dics_" + std::to_string(b));
      auto da = dics_apply(fa, out.cand_a.mask, params.blocks[static_cast<size_t>(b)].dics, mode,
                           cfg.gumbel_tau, grng, style);
      auto db = dics_apply(fb, out.cand_b.mask, params.blocks[static_cast<size_t>(b)].dics, mode,
                           cfg.gumbel_tau, grng, style);
      out.cand_a.mask = da.updated;
      out.cand_b.mask = db.updated;
      tr.dics_ran = true;
      dims.dics_ran = true;
      tr.keep_prob_a = da.keep_prob;
      tr.keep_prob_b = db.keep_prob;
      tr.forced_a = da.force_kept;
      tr.forced_b = db.force_kept;
      out.forced_keeps += (da.force_kept ? 1 : 0) + (db.force_kept ? 1 : 0);
      tr.grid_indices_a = out.cand_a.grid_indices;
      tr.grid_indices_b = out.cand_b.grid_indices;
      tr.mask_a.assign(da.updated.values.data->begin(), da.updated.values.data->end());
      tr.mask_b.assign(db.updated.values.data->begin(), db.updated.values.data->end());
      if (cfg.discard_after_prune) {
        compact_candidates(&out.cand_a, &fa);
        compact_candidates(&out.cand_b, &fb);
      }
    }
    tr.live_a = out.cand_a.mask.live_count();
    tr.live_b = out.cand_b.mask.live_count();
    out.trace.push_back(std::move(tr));
    out.live.blocks.push_back(dims);
  }

  out.cand_a.features = fa;
  out.cand_b.features = fb;
  out.live.match_rows_a = fa.dim(0);
  out.live.match_rows_b = fb.dim(0);

  {
    StageTimer t(clock, "matching");
    out.matches = coarse_match(out.cand_a, out.cand_b, cfg.tau_m, cfg.theta_c, masked);
  }
  {
    StageTimer t(clock, "refine");
    fine_refine(&out.matches, out.cand_a, out.cand_b, out.fine_a, out.fine_b, cfg.window);
  }
  out.live.fine_matches = static_cast<int>(out.matches.fine.size());
  return out;
}

namespace {

std::vector<double> iprune_label_values(const PairSample& sample, const std::vector<int>& grid_indices,
                                        int grid_h, int grid_w, char side,
                                        const PipelineConfig& cfg) {
  if (cfg.iprune_labels == IpruneLabels::covisible) {
    return covisible_labels(sample, grid_indices, grid_h, grid_w, side, cfg.covis);
  }
  const auto full = depth_validity_labels(side == 'a' ? sample.depth_a : sample.depth_b);
  std::vector<double> out;
  out.reserve(grid_indices.size());
  for (int gi : grid_indices) out.push_back(full.at(static_cast<size_t>(gi)));
  return out;
}

}  // namespace

LossBreakdown compute_losses(const ForwardResult& fwd, const PairSample& sample,
                             const PipelineConfig& cfg, Rng& sample_rng,
                             const std::vector<double>* fine_sigma_override) {
  LossBreakdown out;
  const int gh = fwd.cand_a.grid_h, gw = fwd.cand_a.grid_w;
  if (gh * 8 != sample.height || gw * 8 != sample.width) {
    throw std::invalid_argument("compute_losses: sample and forward grids disagree");
  }
  std::vector<int> all_cells(static_cast<size_t>(gh) * gw);
  std::iota(all_cells.begin(), all_cells.end(), 0);

  const auto labels_a = covisible_labels(sample, all_cells, gh, gw, 'a', cfg.covis);
  const auto labels_b = covisible_labels(sample, all_cells, gh, gw, 'b', cfg.covis);
  const Tensor l_self = scale(add(binary_cross_entropy(fwd.score_a, labels_a, &out.clamp_hits),
                                  binary_cross_entropy(fwd.score_b, labels_b, &out.clamp_hits)),
                              0.5);

  // Keep-head supervision: last block with a head, or all of them.
  std::vector<const BlockTrace*> supervised;
  for (const auto& tr : fwd.trace) {
    if (tr.dics_ran) supervised.push_back(&tr);
  }
  if (cfg.supervise == SuperviseMode::last && !supervised.empty()) {
    supervised = {supervised.back()};
  }
  Tensor l_inter = Tensor::scalar(0.0);
  if (!supervised.empty()) {
    Tensor acc = Tensor::scalar(0.0);
    for (const BlockTrace* tr : supervised) {
      const auto ya = iprune_label_values(sample, tr->grid_indices_a, gh, gw, 'a', cfg);
      const auto yb = iprune_label_values(sample, tr->grid_indices_b, gh, gw, 'b', cfg);
      acc = add(acc, focal_binary(tr->keep_prob_a, ya, cfg.focal_gamma, cfg.focal_alpha, &out.clamp_hits));
      acc = add(acc, focal_binary(tr->keep_prob_b, yb, cfg.focal_gamma, cfg.focal_alpha, &out.clamp_hits));
    }
    l_inter = scale(acc, 1.0 / (2.0 * static_cast<double>(supervised.size())));
  }

  const auto gt = gt_coarse_assignment(sample, fwd.cand_a.grid_indices, fwd.cand_b.grid_indices, gh, gw);
  out.gt_pairs = static_cast<int>(gt.pairs.size());
  for (const auto& [i, j] : gt.pairs) {
    if ((*fwd.cand_a.mask.values.data)[static_cast<size_t>(i)] > 0.5 &&
        (*fwd.cand_b.mask.values.data)[static_cast<size_t>(j)] > 0.5) {
      ++out.gt_pairs_live;
    }
  }
  out.coarse_empty = gt.pairs.empty();
  // Supervised over every ground-truth pair in the arrays, live or not. The
  // loss-facing logits carry a finite penalty per dead endpoint, so pruning a
  // true pair raises the loss and gradients steer the gates back toward it.
  const Tensor l_coarse = coarse_nll(fwd.matches.similarity, gt.pairs, cfg.focal_gamma,
                                     cfg.focal_alpha, &out.clamp_hits);

  // Fine supervision: warp each matched anchor with the ground truth and keep
  // the ones whose target stays inside the refinement window.
  std::vector<FineTerm> terms;
  const int hw = cfg.window / 2;
  for (const auto& fm : fwd.matches.fine) {
    const auto warped = warp_points({fm.point_a}, sample.depth_a, sample.pose_ab, sample.k_a,
                                    sample.k_b, sample.height, sample.width);
    if (!warped.visible[0]) {
      ++out.skipped_invisible;
      continue;
    }
    const int gb = fwd.cand_b.grid_indices[static_cast<size_t>(fm.ib)];
    const double xb = 4.0 * (gb % gw) + 2.0, yb = 4.0 * (gb / gw) + 2.0;
    const double dx = warped.points[0][0] / 2.0 - xb;
    const double dy = warped.points[0][1] / 2.0 - yb;
    if (std::abs(dx) > hw || std::abs(dy) > hw) {
      ++out.skipped_window;
      continue;
    }
    terms.push_back({fm.offset, fm.variance, {dx, dy}});
  }
  const int n_terms = static_cast<int>(terms.size());
  int m = static_cast<int>(std::llround(cfg.fine_sample_ratio * n_terms));
  m = std::min(m, n_terms);
  if (m < n_terms) {
    std::vector<int> order(static_cast<size_t>(n_terms));
    std::iota(order.begin(), order.end(), 0);
    for (int i = 0; i < n_terms - 1; ++i) {
      const int j = i + static_cast<int>(sample_rng.uniform(0.0, static_cast<double>(n_terms - i)));
      std::swap(order[static_cast<size_t>(i)], order[static_cast<size_t>(j)]);
    }
    order.resize(static_cast<size_t>(m));
    std::sort(order.begin(), order.end());
    std::vector<FineTerm> picked;
    picked.reserve(order.size());
    for (int i : order) picked.push_back(terms[static_cast<size_t>(i)]);
    terms = std::move(picked);
  }
  out.fine_supervised = static_cast<int>(terms.size());
  const Tensor l_fine = fine_offset_loss(terms, fine_sigma_override);

  out.total_tensor = weighted_total(l_self, l_inter, l_coarse, l_fine, cfg.w_self, cfg.w_inter,
                                    cfg.w_coarse, cfg.w_fine);
  out.self_prune = l_self.value();
  out.interactive = l_inter.value();
  out.coarse = l_coarse.value();
  out.fine = l_fine.value();
  out.total = out.total_tensor.value();
  return out;
}

namespace {

bool store_values_finite(const ParamStore& store) {
  for (const auto& [name, t] : store.items) {
    for (double x : *t.data) {
      if (!std::isfinite(x)) return false;
    }
  }
  return true;
}

bool store_grads_finite(const ParamStore& store) {
  for (const auto& [name, t] : store.items) {
    if (!t.grad) continue;
    for (double x : *t.grad) {
      if (!std::isfinite(x)) return false;
    }
  }
  return true;
}

json step_json(const StepRecord& r) {
  json j;
  j["step"] = r.step;
  j["total"] = r.total;
  j["self_prune"] = r.self_prune;
  j["interactive"] = r.interactive;
  j["coarse"] = r.coarse;
  j["fine"] = r.fine;
  j["live_a"] = r.live_a;
  j["live_b"] = r.live_b;
  j["matches"] = r.matches;
  j["gt_pairs"] = r.gt_pairs;
  return j;
}

}  // namespace

TrainResult train(const PipelineConfig& cfg, ModelParams* params, std::ostream* metrics) {
  cfg.validate();
  if (params == nullptr) throw std::invalid_argument("train: null params");
  if (params->d_c != cfg.d_c || params->d_f != cfg.d_f || params->n_blocks != cfg.n_blocks ||
      params->heads != cfg.heads) {
    throw std::invalid_argument("train: model was built with different dimensions");
  }

  TrainResult result;
  Rng gumbel_rng(cfg.seed ^ 0x7f4a7c15ULL);
  Rng sample_rng(cfg.seed * 1099511628211ULL + 17ULL);
  AdaptiveStep opt(params->store, cfg.learning_rate);
  std::vector<double> last_good = params->store.flatten_values();
  uint64_t pair_counter = 0;

  for (int step = 0; step < cfg.steps; ++step) {
    params->store.zero_grad();
    Tensor batch_total;
    StepRecord rec;
    rec.step = step;
    std::vector<PairSample> batch;
    batch.reserve(static_cast<size_t>(cfg.batch_size));
    for (int j = 0; j < cfg.batch_size; ++j) {
      batch.push_back(generate_pair(cfg.scene(cfg.seed + pair_counter)));
      ++pair_counter;
    }
    try {
      for (int j = 0; j < cfg.batch_size; ++j) {
        const PairSample& s = batch[static_cast<size_t>(j)];
        const ForwardResult fwd = forward(s.image_a, s.image_b, *params, cfg, SampleMode::train,
                                          &gumbel_rng);
        const LossBreakdown lb = compute_losses(fwd, s, cfg, sample_rng);
        batch_total = j == 0 ? lb.total_tensor : add(batch_total, lb.total_tensor);
        rec.total += lb.total;
        rec.self_prune += lb.self_prune;
        rec.interactive += lb.interactive;
        rec.coarse += lb.coarse;
        rec.fine += lb.fine;
        rec.live_a += fwd.trace.empty() ? fwd.cand_a.mask.live_count() : fwd.trace.back().live_a;
        rec.live_b += fwd.trace.empty() ? fwd.cand_b.mask.live_count() : fwd.trace.back().live_b;
        rec.matches += static_cast<int>(fwd.matches.fine.size());
        rec.gt_pairs += lb.gt_pairs_live;
      }
    } catch (const std::runtime_error&) {
      // Numeric failure (overflowed normalizer, saturated activation) from
      // exploded parameters; same treatment as a non-finite loss.
      params->store.load_values(last_good);
      result.diverged = true;
      break;
    }
    const double inv_batch = 1.0 / static_cast<double>(cfg.batch_size);
    if (cfg.batch_size > 1) batch_total = scale(batch_total, inv_batch);
    rec.total *= inv_batch;
    rec.self_prune *= inv_batch;
    rec.interactive *= inv_batch;
    rec.coarse *= inv_batch;
    rec.fine *= inv_batch;

    if (!std::isfinite(batch_total.value())) {
      params->store.load_values(last_good);
      result.diverged = true;
      break;
    }
    backward(batch_total);
    if (!store_grads_finite(params->store)) {
      params->store.load_values(last_good);
      result.diverged = true;
      break;
    }
    opt.step();
    if (!store_values_finite(params->store)) {
      params->store.load_values(last_good);
      result.diverged = true;
      break;
    }
    last_good = params->store.flatten_values();
    result.steps_done = step + 1;
    result.final_total = rec.total;

    if (step % cfg.log_every == 0 || step == cfg.steps - 1) {
      result.log.push_back(rec);
      if (metrics != nullptr) *metrics << step_json(rec).dump() << "\n";
    }
  }
  return result;
}

bool fit_homography(const std::vector<std::array<double, 2>>& pa,
                    const std::vector<std::array<double, 2>>& pb, Mat3* h) {
  const size_t n = pa.size();
  if (h == nullptr || n < 4 || pb.size() != n) return false;

  const auto normalizer = [](const std::vector<std::array<double, 2>>& pts, Mat3* t) {
    double cx = 0, cy = 0;
    for (const auto& p : pts) {
      cx += p[0];
      cy += p[1];
    }
    cx /= static_cast<double>(pts.size());
    cy /= static_cast<double>(pts.size());
    double md = 0;
    for (const auto& p : pts) md += std::hypot(p[0] - cx, p[1] - cy);
    md /= static_cast<double>(pts.size());
    if (md < 1e-9) return false;
    const double s = std::sqrt(2.0) / md;
    t->m = {s, 0, -s * cx, 0, s, -s * cy, 0, 0, 1};
    return true;
  };

  Mat3 ta, tb;
  if (!normalizer(pa, &ta) || !normalizer(pb, &tb)) return false;

  Eigen::MatrixXd a(2 * static_cast<int>(n), 9);
  for (size_t i = 0; i < n; ++i) {
    const auto p = homography_apply(ta, pa[i][0], pa[i][1]);
    const auto q = homography_apply(tb, pb[i][0], pb[i][1]);
    const int r = 2 * static_cast<int>(i);
    a.row(r) << -p[0], -p[1], -1, 0, 0, 0, q[0] * p[0], q[0] * p[1], q[0];
    a.row(r + 1) << 0, 0, 0, -p[0], -p[1], -1, q[1] * p[0], q[1] * p[1], q[1];
  }
  Eigen::JacobiSVD<Eigen::MatrixXd> svd(a, Eigen::ComputeFullV);
  // A unique solution direction needs rank 8; collinear or repeated points
  // collapse the eighth singular value.
  const Eigen::VectorXd sv = svd.singularValues();
  if (sv(0) < 1e-12 || sv(7) < 1e-9 * sv(0)) return false;
  const Eigen::VectorXd hv = svd.matrixV().col(8);

  Mat3 hn;
  for (int i = 0; i < 9; ++i) hn.m[static_cast<size_t>(i)] = hv(i);
  Mat3 result = tb.inverse().mul(hn).mul(ta);
  const double denom = result.m[8];
  if (std::abs(denom) < 1e-12) return false;
  for (double& v : result.m) v /= denom;
  for (double v : result.m) {
    if (!std::isfinite(v)) return false;
  }
  *h = result;
  return true;
}

double max_corner_error(const Mat3& h_est, const Mat3& h_gt, int width, int height) {
  const std::array<std::array<double, 2>, 4> corners = {
      {{0.0, 0.0}, {width - 1.0, 0.0}, {0.0, height - 1.0}, {width - 1.0, height - 1.0}}};
  double worst = 0.0;
  for (const auto& c : corners) {
    try {
      const auto pe = homography_apply(h_est, c[0], c[1]);
      const auto pg = homography_apply(h_gt, c[0], c[1]);
      worst = std::max(worst, std::hypot(pe[0] - pg[0], pe[1] - pg[1]));
    } catch (const std::runtime_error&) {
      return std::numeric_limits<double>::infinity();
    }
  }
  return worst;
}

double recall_auc(std::vector<double> errors, double threshold) {
  if (errors.empty() || !(threshold > 0.0)) return 0.0;
  const double n = static_cast<double>(errors.size());
  std::vector<double> finite;
  for (double e : errors) {
    if (std::isfinite(e) && e <= threshold) finite.push_back(std::max(e, 0.0));
  }
  std::sort(finite.begin(), finite.end());

  // Exact integral of the empirical recall step function on [0, threshold].
  double area = 0.0, prev_e = 0.0, recall = 0.0;
  for (size_t i = 0; i < finite.size(); ++i) {
    area += recall * (finite[i] - prev_e);
    prev_e = finite[i];
    recall = static_cast<double>(i + 1) / n;
  }
  area += recall * (threshold - prev_e);
  return area / threshold;
}

EvalMetrics evaluate(const PipelineConfig& cfg, const ModelParams& params, int n_pairs,
                     uint64_t eval_seed, std::ostream* per_pair) {
  cfg.validate();
  if (cfg.second_plane_depth > 0.0) {
    throw std::invalid_argument("evaluate: needs the single-plane scene so the ground-truth homography exists");
  }
  if (n_pairs < 1) throw std::invalid_argument("evaluate: n_pairs must be >= 1");

  EvalMetrics m;
  m.pairs = n_pairs;
  std::vector<double> corner_errors;
  int64_t match_hits = 0, match_total = 0;

  for (int i = 0; i < n_pairs; ++i) {
    const PairSample s = generate_pair(cfg.scene(eval_seed + static_cast<uint64_t>(i)));
    const ForwardResult fwd = forward(s.image_a, s.image_b, params, cfg, SampleMode::eval, nullptr);

    std::vector<std::array<double, 2>> pa, pb;
    for (const auto& fm : fwd.matches.fine) {
      pa.push_back(fm.point_a);
      pb.push_back(fm.point_b);
      const auto gtp = homography_apply(s.homography, fm.point_a[0], fm.point_a[1]);
      const double err = std::hypot(gtp[0] - fm.point_b[0], gtp[1] - fm.point_b[1]);
      match_total += 1;
      if (err <= 3.0) match_hits += 1;
    }
    m.mean_matches += static_cast<double>(fwd.matches.fine.size());
    m.mean_live_a += fwd.trace.empty() ? fwd.cand_a.mask.live_count() : fwd.trace.back().live_a;
    m.mean_live_b += fwd.trace.empty() ? fwd.cand_b.mask.live_count() : fwd.trace.back().live_b;

    double err = std::numeric_limits<double>::infinity();
    Mat3 h_est;
    if (fit_homography(pa, pb, &h_est)) {
      // One trimmed refit: a few bad mutual argmaxes otherwise drag the
      // least-squares plane arbitrarily far.
      std::vector<double> res(pa.size());
      for (size_t r = 0; r < pa.size(); ++r) {
        const auto p = h_est.apply({pa[r][0], pa[r][1], 1.0});
        res[r] = std::abs(p[2]) < 1e-12
                     ? std::numeric_limits<double>::infinity()
                     : std::hypot(p[0] / p[2] - pb[r][0], p[1] / p[2] - pb[r][1]);
      }
      std::vector<double> sorted = res;
      std::nth_element(sorted.begin(), sorted.begin() + sorted.size() / 2, sorted.end());
      const double cut = std::max(3.0 * sorted[sorted.size() / 2], 2.0);
      std::vector<std::array<double, 2>> ta, tb;
      for (size_t r = 0; r < pa.size(); ++r) {
        if (res[r] <= cut) {
          ta.push_back(pa[r]);
          tb.push_back(pb[r]);
        }
      }
      Mat3 h_trim;
      if (ta.size() >= 4 && ta.size() < pa.size() && fit_homography(ta, tb, &h_trim)) {
        h_est = h_trim;
      }
      err = max_corner_error(h_est, s.homography, s.width, s.height);
    } else {
      ++m.degenerate;
    }
    corner_errors.push_back(err);
    if (per_pair != nullptr) {
      json j;
      j["pair"] = i;
      j["matches"] = fwd.matches.fine.size();
      j["corner_error"] = std::isfinite(err) ? json(err) : json(nullptr);
      *per_pair << j.dump() << "\n";
    }
  }

  m.auc3 = recall_auc(corner_errors, 3.0);
  m.auc5 = recall_auc(corner_errors, 5.0);
  m.auc10 = recall_auc(corner_errors, 10.0);
  m.precision3 = match_total > 0 ? static_cast<double>(match_hits) / static_cast<double>(match_total) : 0.0;
  m.mean_matches /= n_pairs;
  m.mean_live_a /= n_pairs;
  m.mean_live_b /= n_pairs;
  return m;
}

MatchSet match_pair(const Tensor& image_a, const Tensor& image_b, const ModelParams& params,
                    const PipelineConfig& cfg) {
  return forward(image_a, image_b, params, cfg, SampleMode::eval, nullptr).matches;
}

void write_matches_csv(std::ostream& out, const MatchSet& matches) {
  out << "x_a,y_a,x_b,y_b,confidence\n";
  out << std::fixed << std::setprecision(6);
  for (const auto& fm : matches.fine) {
    out << fm.point_a[0] << "," << fm.point_a[1] << "," << fm.point_b[0] << "," << fm.point_b[1]
        << "," << fm.confidence << "\n";
  }
}

namespace {

void put_u32(std::ostream& out, uint32_t v) {
  for (int i = 0; i < 4; ++i) out.put(static_cast<char>((v >> (8 * i)) & 0xff));
}

void put_u64(std::ostream& out, uint64_t v) {
  for (int i = 0; i < 8; ++i) out.put(static_cast<char>((v >> (8 * i)) & 0xff));
}

uint32_t get_u32(std::istream& in) {
  uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<uint32_t>(static_cast<unsigned char>(in.get())) << (8 * i);
  return v;
}

uint64_t get_u64(std::istream& in) {
  uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<uint64_t>(static_cast<unsigned char>(in.get())) << (8 * i);
  return v;
}

constexpr uint32_t kCheckpointVersion = 1;

}  // namespace

void save_checkpoint(const std::string& path, const ModelParams& params) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("save_checkpoint: cannot open " + path);
  out.write("HCPM", 4);
  put_u32(out, kCheckpointVersion);
  put_u32(out, static_cast<uint32_t>(params.d_c));
  put_u32(out, static_cast<uint32_t>(params.d_f));
  put_u32(out, static_cast<uint32_t>(params.n_blocks));
  put_u32(out, static_cast<uint32_t>(params.heads));
  const auto values = params.store.flatten_values();
  put_u64(out, static_cast<uint64_t>(values.size()));
  for (double v : values) put_u64(out, std::bit_cast<uint64_t>(v));
  if (!out) throw std::runtime_error("save_checkpoint: write failed for " + path);
}

void load_checkpoint(const std::string& path, ModelParams* params) {
  if (params == nullptr) throw std::invalid_argument("load_checkpoint: null params");
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("load_checkpoint: cannot open " + path);
  char magic[4] = {};
  in.read(magic, 4);
  if (!in || std::memcmp(magic, "HCPM", 4) != 0) {
    throw std::runtime_error("load_checkpoint: bad magic in " + path);
  }
  const uint32_t version = get_u32(in);
  if (version != kCheckpointVersion) {
    throw std::runtime_error("load_checkpoint: unsupported version " + std::to_string(version));
  }
  const uint32_t d_c = get_u32(in), d_f = get_u32(in), n_blocks = get_u32(in), heads = get_u32(in);
  if (static_cast<int>(d_c) != params->d_c || static_cast<int>(d_f) != params->d_f ||
      static_cast<int>(n_blocks) != params->n_blocks || static_cast<int>(heads) != params->heads) {
    throw std::runtime_error("load_checkpoint: dimensions " + std::to_string(d_c) + "/" +
                             std::to_string(d_f) + "/" + std::to_string(n_blocks) + "/" +
                             std::to_string(heads) + " do not match the model");
  }
  const uint64_t count = get_u64(in);
  if (count != static_cast<uint64_t>(params->store.scalar_count())) {
    throw std::runtime_error("load_checkpoint: parameter count mismatch in " + path);
  }
  std::vector<double> values(count);
  for (uint64_t i = 0; i < count; ++i) values[i] = std::bit_cast<double>(get_u64(in));
  if (!in) throw std::runtime_error("load_checkpoint: truncated file " + path);
  params->store.load_values(values);
}

}  // namespace hcpm
