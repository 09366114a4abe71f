#include "hcpm/matching.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

namespace hcpm {

namespace {

constexpr double kDeadLogit = -1e9;

// Finite analogue of kDeadLogit for the loss-facing logits. Large enough to
// dominate any reachable similarity (LayerNormed features bound |sim| well
// below it), small enough to keep the loss and its gradients finite.
constexpr double kDeadPairPenalty = 1e4;

bool live(const PruneMask& m, int i) { return (*m.values.data)[static_cast<size_t>(i)] > 0.5; }

}  // namespace

MatchSet coarse_match(const CandidateSet& a, const CandidateSet& b, double tau_m, double theta_c,
                      bool masked) {
  if (tau_m <= 0.0) throw std::invalid_argument("coarse_match: tau_m must be > 0");
  if (a.features.rank() != 2 || b.features.rank() != 2 || a.features.dim(1) != b.features.dim(1)) {
    throw std::invalid_argument("coarse_match: feature dimensions disagree");
  }
  const int ka = a.features.dim(0), kb = b.features.dim(0);

  const Tensor sim_raw = scale(matmul(a.features, transpose(b.features)), 1.0 / tau_m);
  Tensor sim = sim_raw;
  if (masked) {
    Tensor bias = Tensor::zeros({ka, kb});
    for (int i = 0; i < ka; ++i) {
      for (int j = 0; j < kb; ++j) {
        if (!live(a.mask, i) || !live(b.mask, j)) {
          (*bias.data)[static_cast<size_t>(i) * kb + j] = kDeadLogit;
        }
      }
    }
    sim = add(sim, bias);
  }

  Tensor conf = mul(softmax(sim, 1), softmax(sim, 0));

  MatchSet out;
  out.similarity = sim_raw;
  if (masked) {
    const Tensor col_a = reshape_copy(a.mask.values, {ka, 1});
    const Tensor row_b = reshape_copy(b.mask.values, {1, kb});
    conf = mul(conf, matmul(col_a, row_b));
    // Loss-facing logits: each dead endpoint subtracts a finite penalty, so a
    // pruned ground-truth pair stays visible to the coarse loss and its
    // gradient pushes the responsible gates back up through the
    // straight-through sample. Emission keeps the hard kDeadLogit bias.
    const Tensor occupancy = add(matmul(col_a, Tensor::full({1, kb}, 1.0)),
                                 matmul(Tensor::full({ka, 1}, 1.0), row_b));
    out.similarity = add(sim_raw, scale(sub(occupancy, Tensor::full({ka, kb}, 2.0)),
                                        kDeadPairPenalty));
  }
  out.confidence = conf;

  // Mutual argmax; ties resolve to the lowest index.
  const auto& c = *conf.data;
  std::vector<int> best_in_row(static_cast<size_t>(ka), 0);
  std::vector<int> best_in_col(static_cast<size_t>(kb), 0);
  for (int i = 0; i < ka; ++i) {
    for (int j = 1; j < kb; ++j) {
      if (c[static_cast<size_t>(i) * kb + j] > c[static_cast<size_t>(i) * kb + best_in_row[static_cast<size_t>(i)]]) {
        best_in_row[static_cast<size_t>(i)] = j;
      }
    }
  }
  for (int j = 0; j < kb; ++j) {
    for (int i = 1; i < ka; ++i) {
      if (c[static_cast<size_t>(i) * kb + j] > c[static_cast<size_t>(best_in_col[static_cast<size_t>(j)]) * kb + j]) {
        best_in_col[static_cast<size_t>(j)] = i;
      }
    }
  }
  for (int i = 0; i < ka; ++i) {
    const int j = best_in_row[static_cast<size_t>(i)];
    const double v = c[static_cast<size_t>(i) * kb + j];
    if (best_in_col[static_cast<size_t>(j)] != i) continue;
    if (v < theta_c || v <= 0.0) continue;
    if (!live(a.mask, i) || !live(b.mask, j)) continue;
    out.coarse.push_back({i, j, v});
  }
  return out;
}

void fine_refine(MatchSet* matches, const CandidateSet& a, const CandidateSet& b,
                 const FeatureGrid& fine_a, const FeatureGrid& fine_b, int window) {
  if (matches == nullptr) throw std::invalid_argument("fine_refine: null match set");
  if (window < 1 || window % 2 == 0) {
    throw std::invalid_argument("fine_refine: window must be odd and positive, got " +
                                std::to_string(window));
  }
  const int hw = window / 2;
  const int wfa = fine_a.w, wfb = fine_b.w, hfb = fine_b.h;
  const Tensor fa = fine_a.flat();
  const Tensor fb = fine_b.flat();
  const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(fine_a.channels));

  // Offset tables are shared by every match of this window size.
  const int w2 = window * window;
  Tensor dx_t = Tensor::zeros({w2, 1});
  Tensor dy_t = Tensor::zeros({w2, 1});
  Tensor d2_t = Tensor::zeros({w2, 1});
  {
    int q = 0;
    for (int dy = -hw; dy <= hw; ++dy) {
      for (int dx = -hw; dx <= hw; ++dx, ++q) {
        (*dx_t.data)[static_cast<size_t>(q)] = dx;
        (*dy_t.data)[static_cast<size_t>(q)] = dy;
        (*d2_t.data)[static_cast<size_t>(q)] = static_cast<double>(dx) * dx + static_cast<double>(dy) * dy;
      }
    }
  }

  matches->fine.clear();
  matches->dropped_border = 0;
  for (const auto& cm : matches->coarse) {
    const int ga = a.grid_indices[static_cast<size_t>(cm.ia)];
    const int gb = b.grid_indices[static_cast<size_t>(cm.ib)];
    const int xa = 4 * (ga % a.grid_w) + 2, ya = 4 * (ga / a.grid_w) + 2;
    const int xb = 4 * (gb % b.grid_w) + 2, yb = 4 * (gb / b.grid_w) + 2;
    if (xb - hw < 0 || xb + hw >= wfb || yb - hw < 0 || yb + hw >= hfb) {
      ++matches->dropped_border;
      continue;
    }

    const Tensor center = gather_rows(fa, {ya * wfa + xa});
    std::vector<int> rows;
    rows.reserve(static_cast<size_t>(w2));
    for (int dy = -hw; dy <= hw; ++dy) {
      for (int dx = -hw; dx <= hw; ++dx) rows.push_back((yb + dy) * wfb + (xb + dx));
    }
    const Tensor win = gather_rows(fb, rows);
    const Tensor logits = scale(transpose(matmul(win, transpose(center))), inv_sqrt_d);
    const Tensor probs = softmax(logits, 1);

    const Tensor ex = matmul(probs, dx_t);
    const Tensor ey = matmul(probs, dy_t);
    const Tensor m2 = matmul(probs, d2_t);

    FineMatch fm;
    fm.ia = cm.ia;
    fm.ib = cm.ib;
    fm.confidence = cm.confidence;
    fm.offset = concat_cols(ex, ey);
    fm.variance = sub(m2, add(mul(ex, ex), mul(ey, ey)));
    fm.point_a = {2.0 * xa, 2.0 * ya};
    fm.point_b = {2.0 * (xb + ex.value()), 2.0 * (yb + ey.value())};
    matches->fine.push_back(std::move(fm));
  }
}

}  // namespace hcpm
