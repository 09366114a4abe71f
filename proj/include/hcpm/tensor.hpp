// Reverse-mode autodiff over dense row-major double tensors.
//
// Tensors are value types sharing their storage: copying a Tensor copies the
// handle, not the buffer. Every differentiable op returns a fresh Tensor whose
// Node closure accumulates into the parents' grad buffers, so reusing a tensor
// in several places of a graph sums its gradient contributions naturally.
// Callers are responsible for zeroing grads between backward passes.

#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

namespace hcpm {

using Shape = std::vector<int>;

struct Node;

struct Tensor {
  Shape shape;
  std::shared_ptr<std::vector<double>> data;
  std::shared_ptr<std::vector<double>> grad;  // allocated iff requires_grad
  bool requires_grad = false;
  std::shared_ptr<Node> node;  // null for leaves and constants

  Tensor() = default;

  static Tensor zeros(const Shape& shape, bool requires_grad = false);
  static Tensor full(const Shape& shape, double value, bool requires_grad = false);
  static Tensor from(const Shape& shape, std::vector<double> values, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);

  int64_t numel() const;
  int rank() const { return static_cast<int>(shape.size()); }
  int dim(int i) const { return shape.at(static_cast<size_t>(i)); }
  double value() const;  // requires numel() == 1
  double& at(int64_t flat) { return (*data)[static_cast<size_t>(flat)]; }
  double at(int64_t flat) const { return (*data)[static_cast<size_t>(flat)]; }

  // Detached copy of the current values: no grad, no node.
  Tensor detach() const;
};

struct Node {
  std::string op;
  std::vector<Tensor> parents;
  std::function<void()> backward;  // accumulates into parents' grads
};

// Seeds grad of a scalar root with 1 and runs the tape in reverse
// topological order. Throws if root.numel() != 1.
void backward(const Tensor& root);

void zero_grad(Tensor& t);

// ---- elementwise ----
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor neg(const Tensor& a);
Tensor scale(const Tensor& a, double s);
Tensor add_scalar(const Tensor& a, double s);
Tensor sigmoid(const Tensor& a);
Tensor gelu(const Tensor& a);
Tensor elu_plus_one(const Tensor& a);  // x > 0 ? x + 1 : exp(x); strictly positive
Tensor exp_op(const Tensor& a);
// ln(max(x, floor)); gradient is zero on the clamped region.
Tensor log_clamped(const Tensor& a, double floor = 1e-12);
Tensor pow_const(const Tensor& a, double p);  // requires a >= 0 when p is non-integer

// ---- linear algebra ----
Tensor matmul(const Tensor& a, const Tensor& b);  // [m x k] * [k x n]
Tensor transpose(const Tensor& a);                // 2-D only

// ---- reductions / normalizations ----
// axis semantics for 2-D tensors: axis=1 normalizes each row, axis=0 each
// column. 1-D tensors accept axis=0 only.
Tensor softmax(const Tensor& a, int axis);
Tensor log_softmax(const Tensor& a, int axis);  // x - logsumexp, stable for any finite x
Tensor layer_norm(const Tensor& a, int axis, double eps = 1e-6);
Tensor sum_all(const Tensor& a);   // -> [1]
Tensor mean_all(const Tensor& a);  // -> [1]
Tensor sum_axis(const Tensor& a, int axis);  // 2-D: axis=0 -> [n], axis=1 -> [m]

// ---- shape and indexing ----
Tensor reshape_copy(const Tensor& a, const Shape& shape);
// rows of a 2-D tensor (1-D treated as [n x 1]); duplicate indices allowed,
// gradient scatter-adds into the source rows.
Tensor gather_rows(const Tensor& a, const std::vector<int>& idx);
// out = carry with out[idx[r]] = compact[r]; indices must be unique and in
// range. Gradient flows to compact at idx and to carry everywhere else.
Tensor scatter_rows(const Tensor& compact, const std::vector<int>& idx, const Tensor& carry);
Tensor slice_cols(const Tensor& a, int c0, int c1);  // columns [c0, c1)
Tensor concat_cols(const Tensor& a, const Tensor& b);
Tensor mul_rows(const Tensor& a, const Tensor& s);  // row i scaled by s[i]
Tensor div_rows(const Tensor& a, const Tensor& s);  // row i divided by s[i]; |s[i]| must stay > 1e-300
Tensor mul_cols(const Tensor& a, const Tensor& g);  // column j scaled by g[j]
Tensor add_rows(const Tensor& a, const Tensor& b);  // bias b[d] added to every row

// ---- image ops ----
// x: [h x w x cin], w: [kh x kw x cin x cout], b: [cout]. Stride >= 1,
// edge-replicate padding of kh/2 so constant inputs produce constant outputs.
Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b, int stride);
Tensor upsample_nearest(const Tensor& x, int factor);  // [h x w x c] -> [h*f x w*f x c]

// ---- verification ----
struct GradCheckReport {
  double max_rel_err = 0.0;
  double analytic = 0.0;  // at the worst coordinate
  double numeric = 0.0;
  int worst_input = -1;
  int64_t worst_coord = -1;
  int64_t coords_checked = 0;
  bool passed = false;
};

// Central finite differences (f(x+h) - f(x-h)) / 2h against the reverse-mode
// gradient, per coordinate of every listed input. f must rebuild its graph on
// each call from the same underlying buffers. max_coords_per_input == 0 checks
// every coordinate; otherwise a seeded subset per input.
GradCheckReport grad_check(const std::function<Tensor()>& f, const std::vector<Tensor>& inputs,
                           double h = 1e-5, double tol = 1e-4,
                           int64_t max_coords_per_input = 0, uint64_t subset_seed = 7);

}  // namespace hcpm
