// Attention kernels against quadratic-form and softmax oracles, plus the
// equivalence contracts between the masked and compacted pruning paths.

#include <cmath>
#include <vector>

#include "doctest.h"
#include "hcpm/attention.hpp"

using namespace hcpm;

namespace {

Tensor random_tensor(const Shape& shape, Rng& rng, bool requires_grad = false) {
  int64_t n = 1;
  for (int d : shape) n *= d;
  std::vector<double> v(static_cast<size_t>(n));
  for (auto& x : v) x = rng.uniform(-1.2, 1.2);
  return Tensor::from(shape, std::move(v), requires_grad);
}

double phi(double x) { return x > 0.0 ? x + 1.0 : std::exp(x); }

// The quadratic form the linearized kernel factorizes:
// out_i = sum_j (phi(q_i) . phi(k_j)) v_j / sum_j (phi(q_i) . phi(k_j)).
std::vector<double> linear_attention_oracle(const Tensor& q, const Tensor& k, const Tensor& v) {
  const int n = q.dim(0), m = k.dim(0), d = q.dim(1), dv = v.dim(1);
  std::vector<double> out(static_cast<size_t>(n) * dv, 0.0);
  for (int i = 0; i < n; ++i) {
    long double den = 0.0L;
    std::vector<long double> num(static_cast<size_t>(dv), 0.0L);
    for (int j = 0; j < m; ++j) {
      long double w = 0.0L;
      for (int c = 0; c < d; ++c) w += static_cast<long double>(phi(q.at(i * d + c))) * phi(k.at(j * d + c));
      den += w;
      for (int c = 0; c < dv; ++c) num[static_cast<size_t>(c)] += w * v.at(j * dv + c);
    }
    for (int c = 0; c < dv; ++c) out[static_cast<size_t>(i) * dv + c] = static_cast<double>(num[static_cast<size_t>(c)] / den);
  }
  return out;
}

std::vector<double> vanilla_attention_oracle(const Tensor& q, const Tensor& k, const Tensor& v) {
  const int n = q.dim(0), m = k.dim(0), d = q.dim(1), dv = v.dim(1);
  std::vector<double> out(static_cast<size_t>(n) * dv, 0.0);
  for (int i = 0; i < n; ++i) {
    std::vector<long double> logits(static_cast<size_t>(m), 0.0L);
    long double mx = -1e30L;
    for (int j = 0; j < m; ++j) {
      long double s = 0.0L;
      for (int c = 0; c < d; ++c) s += static_cast<long double>(q.at(i * d + c)) * k.at(j * d + c);
      logits[static_cast<size_t>(j)] = s;
      mx = std::max(mx, s);
    }
    long double den = 0.0L;
    for (auto& l : logits) {
      l = expl(l - mx);
      den += l;
    }
    for (int j = 0; j < m; ++j)
      for (int c = 0; c < dv; ++c)
        out[static_cast<size_t>(i) * dv + c] += static_cast<double>(logits[static_cast<size_t>(j)] / den * v.at(j * dv + c));
  }
  return out;
}

PruneMask random_mask(int n, Rng& rng, double live_prob = 0.6) {
  std::vector<double> v(static_cast<size_t>(n));
  bool any = false;
  for (auto& x : v) {
    x = rng.uniform01() < live_prob ? 1.0 : 0.0;
    any = any || x == 1.0;
  }
  if (!any) v[static_cast<size_t>(rng.next_u64() % n)] = 1.0;
  return PruneMask::from_values(Tensor::from({n}, std::move(v)));
}

}  // namespace

TEST_SUITE("attention") {

TEST_CASE("linear_attention matches the quadratic-form oracle") {
  Rng rng(101);
  for (int trial = 0; trial < 5; ++trial) {
    Tensor q = random_tensor({6, 4}, rng);
    Tensor k = random_tensor({7, 4}, rng);
    Tensor v = random_tensor({7, 3}, rng);
    Tensor out = linear_attention(q, k, v);
    auto expect = linear_attention_oracle(q, k, v);
    for (size_t i = 0; i < expect.size(); ++i)
      CHECK((*out.data)[i] == doctest::Approx(expect[i]).epsilon(1e-12));
  }
}

TEST_CASE("linear_attention rows are convex mixtures of value rows") {
  Rng rng(103);
  Tensor q = random_tensor({5, 4}, rng);
  Tensor k = random_tensor({6, 4}, rng);
  Tensor v = random_tensor({6, 2}, rng);
  Tensor out = linear_attention(q, k, v);
  for (int c = 0; c < 2; ++c) {
    double lo = 1e30, hi = -1e30;
    for (int j = 0; j < 6; ++j) {
      lo = std::min(lo, v.at(j * 2 + c));
      hi = std::max(hi, v.at(j * 2 + c));
    }
    for (int i = 0; i < 5; ++i) {
      CHECK(out.at(i * 2 + c) >= lo - 1e-12);
      CHECK(out.at(i * 2 + c) <= hi + 1e-12);
    }
  }
}

TEST_CASE("vanilla_attention matches the softmax oracle") {
  Rng rng(107);
  Tensor q = random_tensor({4, 5}, rng);
  Tensor k = random_tensor({6, 5}, rng);
  Tensor v = random_tensor({6, 3}, rng);
  Tensor out = vanilla_attention(q, k, v);
  auto expect = vanilla_attention_oracle(q, k, v);
  for (size_t i = 0; i < expect.size(); ++i)
    CHECK((*out.data)[i] == doctest::Approx(expect[i]).epsilon(1e-11));
}

TEST_CASE("implicit attention with all-ones masks equals the unmasked kernel exactly") {
  Rng rng(109);
  Tensor q = random_tensor({8, 4}, rng);
  Tensor k = random_tensor({9, 4}, rng);
  Tensor v = random_tensor({9, 4}, rng);
  Tensor plain = linear_attention(q, k, v);
  Tensor masked = implicit_pruning_attention(q, k, v, PruneMask::ones(8), PruneMask::ones(9));
  for (int64_t i = 0; i < plain.numel(); ++i) CHECK(masked.at(i) == plain.at(i));
}

TEST_CASE("kept rows of the masked kernel equal the compacted kernel bit for bit") {
  Rng rng(113);
  for (int trial = 0; trial < 20; ++trial) {
    const int n = 10, m = 9, d = 4;
    Tensor q = random_tensor({n, d}, rng);
    Tensor k = random_tensor({m, d}, rng);
    Tensor v = random_tensor({m, 3}, rng);
    PruneMask mq = random_mask(n, rng);
    PruneMask mkv = random_mask(m, rng);
    Tensor masked = implicit_pruning_attention(q, k, v, mq, mkv);
    DirectAttention compact = direct_pruning_attention(q, k, v, mq, mkv);
    REQUIRE(static_cast<int>(compact.query_indices.size()) == compact.output.dim(0));
    for (size_t r = 0; r < compact.query_indices.size(); ++r) {
      const int row = compact.query_indices[r];
      for (int c = 0; c < 3; ++c)
        CHECK(masked.at(row * 3 + c) == compact.output.at(static_cast<int>(r) * 3 + c));
    }
  }
}

TEST_CASE("pruned query rows of the masked kernel are exactly zero") {
  Rng rng(127);
  Tensor q = random_tensor({6, 4}, rng);
  Tensor k = random_tensor({6, 4}, rng);
  Tensor v = random_tensor({6, 2}, rng);
  PruneMask mq = PruneMask::from_values(Tensor::from({6}, {1, 0, 1, 0, 0, 1}));
  Tensor out = implicit_pruning_attention(q, k, v, mq, PruneMask::ones(6));
  for (int i : {1, 3, 4})
    for (int c = 0; c < 2; ++c) CHECK(out.at(i * 2 + c) == 0.0);
}

TEST_CASE("masked kernel ignores pruned keys") {
  // Poison the pruned key/value rows; the output over live rows must match
  // the kernel run on the live subset alone.
  Rng rng(131);
  Tensor q = random_tensor({4, 3}, rng);
  Tensor k = random_tensor({5, 3}, rng);
  Tensor v = random_tensor({5, 2}, rng);
  PruneMask mkv = PruneMask::from_values(Tensor::from({5}, {1, 0, 1, 1, 0}));
  Tensor out = implicit_pruning_attention(q, k, v, PruneMask::ones(4), mkv);
  for (int j : {1, 4})
    for (int c = 0; c < 3; ++c) k.at(j * 3 + c) = 1e6;
  for (int j : {1, 4})
    for (int c = 0; c < 2; ++c) v.at(j * 2 + c) = -1e6;
  Tensor poisoned = implicit_pruning_attention(q, k, v, PruneMask::ones(4), mkv);
  for (int64_t i = 0; i < out.numel(); ++i) CHECK(poisoned.at(i) == out.at(i));
}

TEST_CASE("fully pruned keys or queries are an error") {
  Rng rng(137);
  Tensor q = random_tensor({3, 2}, rng);
  Tensor k = random_tensor({3, 2}, rng);
  Tensor v = random_tensor({3, 2}, rng);
  PruneMask dead = PruneMask::from_values(Tensor::from({3}, {0, 0, 0}));
  CHECK_THROWS(implicit_pruning_attention(q, k, v, PruneMask::ones(3), dead));
  CHECK_THROWS(direct_pruning_attention(q, k, v, PruneMask::ones(3), dead));
  CHECK_THROWS(direct_pruning_attention(q, k, v, dead, PruneMask::ones(3)));
}

TEST_CASE("scatter_back restores pruned rows from the carry") {
  Rng rng(139);
  Tensor compact = random_tensor({2, 3}, rng);
  Tensor carry = random_tensor({5, 3}, rng);
  Tensor out = scatter_back(compact, {1, 4}, carry);
  for (int c = 0; c < 3; ++c) {
    CHECK(out.at(0 * 3 + c) == carry.at(0 * 3 + c));
    CHECK(out.at(1 * 3 + c) == compact.at(0 * 3 + c));
    CHECK(out.at(2 * 3 + c) == carry.at(2 * 3 + c));
    CHECK(out.at(4 * 3 + c) == compact.at(1 * 3 + c));
  }
}

TEST_CASE("attention_layer: all-ones masked paths equal the unmasked path") {
  Rng rng(149);
  ParamStore store;
  const int d = 8;
  auto params = make_attn_layer_params(store, "t", d, rng);
  for (int heads : {1, 2}) {
    Tensor x = random_tensor({6, d}, rng);
    Tensor src = random_tensor({7, d}, rng);
    PruneMask mx = PruneMask::ones(6), ms = PruneMask::ones(7);
    Tensor plain = attention_layer(x, src, mx, ms, params, heads, PruneVariant::implicit, false);
    Tensor masked_i = attention_layer(x, src, mx, ms, params, heads, PruneVariant::implicit, true);
    Tensor masked_d = attention_layer(x, src, mx, ms, params, heads, PruneVariant::direct, true);
    for (int64_t i = 0; i < plain.numel(); ++i) {
      CHECK(masked_i.at(i) == plain.at(i));
      CHECK(masked_d.at(i) == plain.at(i));
    }
  }
}

TEST_CASE("attention_layer: masked and compacted variants agree everywhere") {
  // Kept rows bit for bit, pruned rows carried through unchanged by both.
  Rng rng(151);
  ParamStore store;
  const int d = 8;
  auto params = make_attn_layer_params(store, "t", d, rng);
  for (int heads : {1, 2}) {
    for (int trial = 0; trial < 8; ++trial) {
      Tensor x = random_tensor({7, d}, rng);
      Tensor src = random_tensor({6, d}, rng);
      PruneMask mx = random_mask(7, rng);
      PruneMask ms = random_mask(6, rng);
      Tensor yi = attention_layer(x, src, mx, ms, params, heads, PruneVariant::implicit, true);
      Tensor yd = attention_layer(x, src, mx, ms, params, heads, PruneVariant::direct, true);
      for (int64_t i = 0; i < yi.numel(); ++i) CHECK(yi.at(i) == yd.at(i));
      for (int r = 0; r < 7; ++r) {
        if (mx.values.at(r) > 0.5) continue;
        for (int c = 0; c < d; ++c) CHECK(yi.at(r * d + c) == x.at(r * d + c));
      }
    }
  }
}

TEST_CASE("self_cross_block is symmetric in its two sides") {
  Rng rng(157);
  ParamStore store;
  const int d = 8;
  SelfCrossParams params{make_attn_layer_params(store, "sa", d, rng),
                         make_attn_layer_params(store, "ca", d, rng)};
  Tensor fa = random_tensor({5, d}, rng);
  Tensor fb = random_tensor({6, d}, rng);
  PruneMask ma = random_mask(5, rng), mb = random_mask(6, rng);
  auto [oa, ob] = self_cross_block(fa, fb, ma, mb, params, 1, PruneVariant::implicit, true);
  auto [sb, sa] = self_cross_block(fb, fa, mb, ma, params, 1, PruneVariant::implicit, true);
  for (int64_t i = 0; i < oa.numel(); ++i) CHECK(oa.at(i) == sa.at(i));
  for (int64_t i = 0; i < ob.numel(); ++i) CHECK(ob.at(i) == sb.at(i));
}

TEST_CASE("gradients: linear attention") {
  Rng rng(163);
  Tensor q = random_tensor({4, 3}, rng, true);
  Tensor k = random_tensor({5, 3}, rng, true);
  Tensor v = random_tensor({5, 2}, rng, true);
  Tensor probe = random_tensor({4, 2}, rng);
  auto f = [&]() { return sum_all(mul(linear_attention(q, k, v), probe)); };
  auto rep = grad_check(f, {q, k, v});
  CHECK_MESSAGE(rep.passed, "max rel err ", rep.max_rel_err);
}

TEST_CASE("gradients: masked kernel on a soft mask") {
  Rng rng(167);
  Tensor q = random_tensor({4, 3}, rng, true);
  Tensor k = random_tensor({5, 3}, rng, true);
  Tensor v = random_tensor({5, 2}, rng, true);
  Tensor mqv = Tensor::from({4}, {0.9, 0.2, 0.7, 1.0}, true);
  Tensor mkvv = Tensor::from({5}, {1.0, 0.3, 0.8, 0.1, 0.6}, true);
  Tensor probe = random_tensor({4, 2}, rng);
  auto f = [&]() {
    PruneMask mq = PruneMask::from_values(mqv, true);
    PruneMask mkv = PruneMask::from_values(mkvv, true);
    return sum_all(mul(implicit_pruning_attention(q, k, v, mq, mkv), probe));
  };
  auto rep = grad_check(f, {q, k, v, mqv, mkvv});
  CHECK_MESSAGE(rep.passed, "max rel err ", rep.max_rel_err);
}

TEST_CASE("gradients: compacted kernel") {
  Rng rng(173);
  Tensor q = random_tensor({4, 3}, rng, true);
  Tensor k = random_tensor({5, 3}, rng, true);
  Tensor v = random_tensor({5, 2}, rng, true);
  PruneMask mq = PruneMask::from_values(Tensor::from({4}, {1, 0, 1, 1}));
  PruneMask mkv = PruneMask::from_values(Tensor::from({5}, {0, 1, 1, 0, 1}));
  Tensor probe = random_tensor({3, 2}, rng);
  auto f = [&]() { return sum_all(mul(direct_pruning_attention(q, k, v, mq, mkv).output, probe)); };
  auto rep = grad_check(f, {q, k, v});
  CHECK_MESSAGE(rep.passed, "max rel err ", rep.max_rel_err);
}

TEST_CASE("gradients: full attention layer, two heads") {
  Rng rng(179);
  ParamStore store;
  const int d = 4;
  auto params = make_attn_layer_params(store, "t", d, rng);
  Tensor x = random_tensor({3, d}, rng, true);
  Tensor src = random_tensor({4, d}, rng, true);
  Tensor probe = random_tensor({3, d}, rng);
  PruneMask mx = PruneMask::from_values(Tensor::from({3}, {1, 0, 1}));
  PruneMask ms = PruneMask::from_values(Tensor::from({4}, {1, 1, 0, 1}));
  auto f = [&]() {
    return sum_all(mul(attention_layer(x, src, mx, ms, params, 2, PruneVariant::implicit, true), probe));
  };
  std::vector<Tensor> inputs{x, src};
  for (auto& [name, t] : store.items) inputs.push_back(t);
  auto rep = grad_check(f, inputs, 1e-5, 1e-4, 8);
  CHECK_MESSAGE(rep.passed, "max rel err ", rep.max_rel_err, " input ", rep.worst_input);
}

}  // TEST_SUITE
