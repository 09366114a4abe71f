#include "hcpm/attention.hpp"

#include <cmath>
#include <stdexcept>

namespace hcpm {

PruneMask PruneMask::ones(int n) {
  if (n < 1) throw std::invalid_argument("PruneMask: size must be >= 1");
  return {Tensor::full({n}, 1.0), false};
}

PruneMask PruneMask::from_values(const Tensor& values, bool soft) {
  if (values.rank() != 1) throw std::invalid_argument("PruneMask: values must be 1-D");
  if (!soft) {
    for (double v : *values.data) {
      if (v != 0.0 && v != 1.0) {
        throw std::invalid_argument("PruneMask: entry " + std::to_string(v) + " is not 0 or 1");
      }
    }
  }
  return {values, soft};
}

int PruneMask::live_count() const {
  int n = 0;
  for (double v : *values.data) n += v > 0.5 ? 1 : 0;
  return n;
}

std::vector<int> PruneMask::live_indices() const {
  std::vector<int> idx;
  for (int i = 0; i < size(); ++i)
    if ((*values.data)[static_cast<size_t>(i)] > 0.5) idx.push_back(i);
  return idx;
}

namespace {

void check_qkv(const Tensor& q, const Tensor& k, const Tensor& v, const char* op) {
  if (q.rank() != 2 || k.rank() != 2 || v.rank() != 2) {
    throw std::invalid_argument(std::string(op) + ": q, k, v must be 2-D");
  }
  if (q.dim(1) != k.dim(1)) {
    throw std::invalid_argument(std::string(op) + ": q and k feature dims disagree");
  }
  if (k.dim(0) != v.dim(0)) {
    throw std::invalid_argument(std::string(op) + ": k and v row counts disagree");
  }
  if (k.dim(0) == 0 || q.dim(0) == 0) {
    throw std::invalid_argument(std::string(op) + ": empty attention input");
  }
}

Tensor rows_1d(const Tensor& m) {  // [n x 1] -> [n]
  return reshape_copy(m, {m.dim(0)});
}

}  // namespace

Tensor vanilla_attention(const Tensor& q, const Tensor& k, const Tensor& v) {
  check_qkv(q, k, v, "vanilla_attention");
  Tensor weights = softmax(matmul(q, transpose(k)), 1);
  return matmul(weights, v);
}

Tensor linear_attention(const Tensor& q, const Tensor& k, const Tensor& v) {
  check_qkv(q, k, v, "linear_attention");
  Tensor phiq = elu_plus_one(q);
  Tensor phik = elu_plus_one(k);
  Tensor summary = matmul(transpose(phik), v);                       // [d x dv]
  Tensor z = sum_axis(phik, 0);                                      // [d]
  Tensor num = matmul(phiq, summary);                                // [n x dv]
  Tensor den = rows_1d(matmul(phiq, reshape_copy(z, {z.dim(0), 1})));  // [n]
  return div_rows(num, den);
}

Tensor implicit_pruning_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                                  const PruneMask& mq, const PruneMask& mkv) {
  check_qkv(q, k, v, "implicit_pruning_attention");
  if (mq.size() != q.dim(0) || mkv.size() != k.dim(0)) {
    throw std::invalid_argument("implicit_pruning_attention: mask sizes " +
                                std::to_string(mq.size()) + "/" + std::to_string(mkv.size()) +
                                " for " + std::to_string(q.dim(0)) + " queries and " +
                                std::to_string(k.dim(0)) + " keys");
  }
  if (mkv.live_count() == 0) {
    throw std::invalid_argument("implicit_pruning_attention: every key is pruned");
  }
  Tensor phiq = elu_plus_one(q);
  Tensor phik = mul_rows(elu_plus_one(k), mkv.values);
  Tensor vm = mul_rows(v, mkv.values);
  Tensor summary = matmul(transpose(phik), vm);
  Tensor z = sum_axis(phik, 0);
  Tensor num = matmul(phiq, summary);
  Tensor den = rows_1d(matmul(phiq, reshape_copy(z, {z.dim(0), 1})));
  return mul_rows(div_rows(num, den), mq.values);
}

DirectAttention direct_pruning_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                                         const PruneMask& mq, const PruneMask& mkv) {
  check_qkv(q, k, v, "direct_pruning_attention");
  if (mq.size() != q.dim(0) || mkv.size() != k.dim(0)) {
    throw std::invalid_argument("direct_pruning_attention: mask sizes do not match inputs");
  }
  const std::vector<int> iq = mq.live_indices();
  const std::vector<int> ikv = mkv.live_indices();
  if (iq.empty()) throw std::invalid_argument("direct_pruning_attention: every query is pruned");
  if (ikv.empty()) throw std::invalid_argument("direct_pruning_attention: every key is pruned");
  Tensor qc = gather_rows(q, iq);
  Tensor kc = gather_rows(k, ikv);
  Tensor vc = gather_rows(v, ikv);
  return {linear_attention(qc, kc, vc), iq};
}

Tensor scatter_back(const Tensor& compact, const std::vector<int>& indices, const Tensor& carry) {
  return scatter_rows(compact, indices, carry);
}

AttnLayerParams make_attn_layer_params(ParamStore& store, const std::string& prefix, int d,
                                       Rng& rng) {
  AttnLayerParams p;
  auto linear = [&](const std::string& name, int in, int out) {
    Linear l;
    l.w = store.add(prefix + "." + name + ".w", {in, out});
    l.b = store.add(prefix + "." + name + ".b", {out});
    init_xavier(l.w, in, out, rng);
    return l;
  };
  p.q = linear("q", d, d);
  p.k = linear("k", d, d);
  p.v = linear("v", d, d);
  p.merge = linear("merge", d, d);
  p.ln1_g = store.add(prefix + ".ln1.g", {d});
  p.ln1_b = store.add(prefix + ".ln1.b", {d});
  std::fill(p.ln1_g.data->begin(), p.ln1_g.data->end(), 1.0);
  p.ffn1 = linear("ffn1", 2 * d, 2 * d);
  p.ffn2 = linear("ffn2", 2 * d, d);
  p.ln2_g = store.add(prefix + ".ln2.g", {d});
  p.ln2_b = store.add(prefix + ".ln2.b", {d});
  std::fill(p.ln2_g.data->begin(), p.ln2_g.data->end(), 1.0);
  return p;
}

namespace {

Tensor per_head(const Tensor& q, const Tensor& k, const Tensor& v, int heads,
                const std::function<Tensor(const Tensor&, const Tensor&, const Tensor&)>& kernel) {
  const int d = q.dim(1);
  if (heads < 1 || d % heads != 0) {
    throw std::invalid_argument("attention_layer: feature dim " + std::to_string(d) +
                                " not divisible by " + std::to_string(heads) + " heads");
  }
  if (heads == 1) return kernel(q, k, v);
  const int dh = d / heads;
  Tensor out;
  for (int hix = 0; hix < heads; ++hix) {
    Tensor o = kernel(slice_cols(q, hix * dh, (hix + 1) * dh),
                      slice_cols(k, hix * dh, (hix + 1) * dh),
                      slice_cols(v, hix * dh, (hix + 1) * dh));
    out = hix == 0 ? o : concat_cols(out, o);
  }
  return out;
}

// Message, merge, and feed-forward shared by all layer paths. x and the
// attention output must have matching row counts.
Tensor layer_tail(const Tensor& x, const Tensor& att, const AttnLayerParams& p) {
  Tensor merged = add_rows(mul_cols(layer_norm(p.merge(att), 1), p.ln1_g), p.ln1_b);
  Tensor hmid = gelu(p.ffn1(concat_cols(x, merged)));
  Tensor h = p.ffn2(hmid);
  return add_rows(mul_cols(layer_norm(h, 1), p.ln2_g), p.ln2_b);
}

}  // namespace

Tensor attention_layer(const Tensor& x, const Tensor& src, const PruneMask& mq,
                       const PruneMask& mkv, const AttnLayerParams& params, int heads,
                       PruneVariant variant, bool masked) {
  if (!masked) {
    Tensor att = per_head(params.q(x), params.k(src), params.v(src), heads, linear_attention);
    return add(x, layer_tail(x, att, params));
  }
  if (variant == PruneVariant::implicit) {
    Tensor att = per_head(params.q(x), params.k(src), params.v(src), heads,
                          [&](const Tensor& q, const Tensor& k, const Tensor& v) {
                            return implicit_pruning_attention(q, k, v, mq, mkv);
                          });
    return add(x, mul_rows(layer_tail(x, att, params), mq.values));
  }
  // direct: compact both sides, run the plain path, scatter into the carry.
  const std::vector<int> iq = mq.live_indices();
  const std::vector<int> ikv = mkv.live_indices();
  if (iq.empty()) throw std::invalid_argument("attention_layer: every query is pruned");
  if (ikv.empty()) throw std::invalid_argument("attention_layer: every key is pruned");
  Tensor xc = mul_rows(gather_rows(x, iq), gather_rows(mq.values, iq));
  Tensor sc = mul_rows(gather_rows(src, ikv), gather_rows(mkv.values, ikv));
  Tensor att = per_head(params.q(xc), params.k(sc), params.v(sc), heads, linear_attention);
  Tensor out_c = add(xc, layer_tail(xc, att, params));
  return scatter_back(out_c, iq, x);
}

std::pair<Tensor, Tensor> self_cross_block(const Tensor& fa, const Tensor& fb,
                                           const PruneMask& ma, const PruneMask& mb,
                                           const SelfCrossParams& params, int heads,
                                           PruneVariant variant, bool masked) {
  Tensor sa_a = attention_layer(fa, fa, ma, ma, params.sa, heads, variant, masked);
  Tensor sa_b = attention_layer(fb, fb, mb, mb, params.sa, heads, variant, masked);
  Tensor ca_a = attention_layer(sa_a, sa_b, ma, mb, params.ca, heads, variant, masked);
  Tensor ca_b = attention_layer(sa_b, sa_a, mb, ma, params.ca, heads, variant, masked);
  return {ca_a, ca_b};
}

}  // namespace hcpm
