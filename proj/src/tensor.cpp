#include "hcpm/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>
#include <unordered_set>

namespace hcpm {

namespace {

std::string shape_str(const Shape& s) {
  std::string out = "(";
  for (size_t i = 0; i < s.size(); ++i) {
    if (i) out += "x";
    out += std::to_string(s[i]);
  }
  return out + ")";
}

int64_t shape_numel(const Shape& s) {
  int64_t n = 1;
  for (int d : s) {
    if (d < 0) throw std::invalid_argument("tensor: negative dimension in shape " + shape_str(s));
    n *= d;
  }
  return n;
}

bool want_grad(const Tensor& t) { return t.requires_grad; }

void ensure_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape != b.shape) {
    throw std::invalid_argument(std::string(op) + ": shape mismatch " + shape_str(a.shape) +
                                " vs " + shape_str(b.shape));
  }
}

void ensure_rank2(const Tensor& a, const char* op) {
  if (a.rank() != 2) {
    throw std::invalid_argument(std::string(op) + ": expected 2-D tensor, got " + shape_str(a.shape));
  }
}

// Treats 1-D [n] as a single-column matrix for the row-indexed ops.
void row_view(const Tensor& a, const char* op, int* rows, int* cols) {
  if (a.rank() == 1) {
    *rows = a.dim(0);
    *cols = 1;
  } else if (a.rank() == 2) {
    *rows = a.dim(0);
    *cols = a.dim(1);
  } else {
    throw std::invalid_argument(std::string(op) + ": expected 1-D or 2-D tensor, got " +
                                shape_str(a.shape));
  }
}

void check_finite(const Tensor& t, const char* op) {
  for (double v : *t.data) {
    if (!std::isfinite(v)) {
      throw std::runtime_error(std::string(op) + ": non-finite value produced");
    }
  }
}

std::shared_ptr<Node> make_node(const char* op, std::vector<Tensor> parents,
                                std::function<void()> backward) {
  auto n = std::make_shared<Node>();
  n->op = op;
  n->parents = std::move(parents);
  n->backward = std::move(backward);
  return n;
}

}  // namespace

Tensor Tensor::zeros(const Shape& shape, bool requires_grad) {
  Tensor t;
  t.shape = shape;
  t.data = std::make_shared<std::vector<double>>(static_cast<size_t>(shape_numel(shape)), 0.0);
  t.requires_grad = requires_grad;
  if (requires_grad) t.grad = std::make_shared<std::vector<double>>(t.data->size(), 0.0);
  return t;
}

Tensor Tensor::full(const Shape& shape, double value, bool requires_grad) {
  Tensor t = zeros(shape, requires_grad);
  std::fill(t.data->begin(), t.data->end(), value);
  return t;
}

Tensor Tensor::from(const Shape& shape, std::vector<double> values, bool requires_grad) {
  if (static_cast<int64_t>(values.size()) != shape_numel(shape)) {
    throw std::invalid_argument("Tensor::from: " + std::to_string(values.size()) +
                                " values for shape " + shape_str(shape));
  }
  Tensor t;
  t.shape = shape;
  t.data = std::make_shared<std::vector<double>>(std::move(values));
  t.requires_grad = requires_grad;
  if (requires_grad) t.grad = std::make_shared<std::vector<double>>(t.data->size(), 0.0);
  return t;
}

Tensor Tensor::scalar(double value, bool requires_grad) {
  return from({1}, {value}, requires_grad);
}

int64_t Tensor::numel() const { return data ? static_cast<int64_t>(data->size()) : 0; }

double Tensor::value() const {
  if (numel() != 1) {
    throw std::logic_error("Tensor::value: tensor has " + std::to_string(numel()) + " elements");
  }
  return (*data)[0];
}

Tensor Tensor::detach() const {
  Tensor t;
  t.shape = shape;
  t.data = std::make_shared<std::vector<double>>(*data);
  return t;
}

void zero_grad(Tensor& t) {
  if (t.grad) std::fill(t.grad->begin(), t.grad->end(), 0.0);
}

void backward(const Tensor& root) {
  if (root.numel() != 1) {
    throw std::invalid_argument("backward: root must be scalar, got " + shape_str(root.shape));
  }
  if (!root.requires_grad) return;
  (*root.grad)[0] += 1.0;
  if (!root.node) return;

  // Reverse topological order; iterative DFS keeps deep graphs safe.
  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<std::pair<Node*, size_t>> stack;
  stack.emplace_back(root.node.get(), 0);
  seen.insert(root.node.get());
  while (!stack.empty()) {
    auto& [node, next_parent] = stack.back();
    if (next_parent < node->parents.size()) {
      Node* p = node->parents[next_parent].node.get();
      ++next_parent;
      if (p && !seen.count(p)) {
        seen.insert(p);
        stack.emplace_back(p, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    if ((*it)->backward) (*it)->backward();
  }
}

// ---- elementwise ----

Tensor add(const Tensor& a, const Tensor& b) {
  ensure_same_shape(a, b, "add");
  Tensor out = Tensor::zeros(a.shape, want_grad(a) || want_grad(b));
  const size_t n = out.data->size();
  for (size_t i = 0; i < n; ++i) (*out.data)[i] = (*a.data)[i] + (*b.data)[i];
  if (out.requires_grad) {
    out.node = make_node("add", {a, b}, [a, b, og = out.grad, n]() {
      if (a.requires_grad)
        for (size_t i = 0; i < n; ++i) (*a.grad)[i] += (*og)[i];
      if (b.requires_grad)
        for (size_t i = 0; i < n; ++i) (*b.grad)[i] += (*og)[i];
    });
  }
  return out;
}

Tensor sub(const Tensor& a, const Tensor& b) {
  ensure_same_shape(a, b, "sub");
  Tensor out = Tensor::zeros(a.shape, want_grad(a) || want_grad(b));
  const size_t n = out.data->size();
  for (size_t i = 0; i < n; ++i) (*out.data)[i] = (*a.data)[i] - (*b.data)[i];
  if (out.requires_grad) {
    out.node = make_node("sub", {a, b}, [a, b, og = out.grad, n]() {
      if (a.requires_grad)
        for (size_t i = 0; i < n; ++i) (*a.grad)[i] += (*og)[i];
      if (b.requires_grad)
        for (size_t i = 0; i < n; ++i) (*b.grad)[i] -= (*og)[i];
    });
  }
  return out;
}

Tensor mul(const Tensor& a, const Tensor& b) {
  ensure_same_shape(a, b, "mul");
  Tensor out = Tensor::zeros(a.shape, want_grad(a) || want_grad(b));
  const size_t n = out.data->size();
  for (size_t i = 0; i < n; ++i) (*out.data)[i] = (*a.data)[i] * (*b.data)[i];
  if (out.requires_grad) {
    out.node = make_node("mul", {a, b}, [a, b, og = out.grad, n]() {
      if (a.requires_grad)
        for (size_t i = 0; i < n; ++i) (*a.grad)[i] += (*og)[i] * (*b.data)[i];
      if (b.requires_grad)
        for (size_t i = 0; i < n; ++i) (*b.grad)[i] += (*og)[i] * (*a.data)[i];
    });
  }
  return out;
}

Tensor neg(const Tensor& a) { return scale(a, -1.0); }

Tensor scale(const Tensor& a, double s) {
  Tensor out = Tensor::zeros(a.shape, want_grad(a));
  const size_t n = out.data->size();
  for (size_t i = 0; i < n; ++i) (*out.data)[i] = (*a.data)[i] * s;
  if (out.requires_grad) {
    out.node = make_node("scale", {a}, [a, og = out.grad, s, n]() {
      for (size_t i = 0; i < n; ++i) (*a.grad)[i] += (*og)[i] * s;
    });
  }
  return out;
}

Tensor add_scalar(const Tensor& a, double s) {
  Tensor out = Tensor::zeros(a.shape, want_grad(a));
  const size_t n = out.data->size();
  for (size_t i = 0; i < n; ++i) (*out.data)[i] = (*a.data)[i] + s;
  if (out.requires_grad) {
    out.node = make_node("add_scalar", {a}, [a, og = out.grad, n]() {
      for (size_t i = 0; i < n; ++i) (*a.grad)[i] += (*og)[i];
    });
  }
  return out;
}

Tensor sigmoid(const Tensor& a) {
  Tensor out = Tensor::zeros(a.shape, want_grad(a));
  const size_t n = out.data->size();
  for (size_t i = 0; i < n; ++i) {
    const double x = (*a.data)[i];
    (*out.data)[i] = x >= 0.0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
  }
  if (out.requires_grad) {
    out.node = make_node("sigmoid", {a}, [a, og = out.grad, od = out.data, n]() {
      for (size_t i = 0; i < n; ++i) {
        const double y = (*od)[i];
        (*a.grad)[i] += (*og)[i] * y * (1.0 - y);
      }
    });
  }
  return out;
}

Tensor gelu(const Tensor& a) {
  static const double inv_sqrt2 = 1.0 / std::sqrt(2.0);
  static const double inv_sqrt2pi = 1.0 / std::sqrt(2.0 * M_PI);
  Tensor out = Tensor::zeros(a.shape, want_grad(a));
  const size_t n = out.data->size();
  for (size_t i = 0; i < n; ++i) {
    const double x = (*a.data)[i];
    (*out.data)[i] = 0.5 * x * (1.0 + std::erf(x * inv_sqrt2));
  }
  if (out.requires_grad) {
    out.node = make_node("gelu", {a}, [a, og = out.grad, n]() {
      for (size_t i = 0; i < n; ++i) {
        const double x = (*a.data)[i];
        const double cdf = 0.5 * (1.0 + std::erf(x * inv_sqrt2));
        const double pdf = inv_sqrt2pi * std::exp(-0.5 * x * x);
        (*a.grad)[i] += (*og)[i] * (cdf + x * pdf);
      }
    });
  }
  return out;
}

Tensor elu_plus_one(const Tensor& a) {
  Tensor out = Tensor::zeros(a.shape, want_grad(a));
  const size_t n = out.data->size();
  for (size_t i = 0; i < n; ++i) {
    const double x = (*a.data)[i];
    (*out.data)[i] = x > 0.0 ? x + 1.0 : std::exp(x);
  }
  if (out.requires_grad) {
    out.node = make_node("elu_plus_one", {a}, [a, og = out.grad, n]() {
      for (size_t i = 0; i < n; ++i) {
        const double x = (*a.data)[i];
        (*a.grad)[i] += (*og)[i] * (x > 0.0 ? 1.0 : std::exp(x));
      }
    });
  }
  return out;
}

Tensor exp_op(const Tensor& a) {
  Tensor out = Tensor::zeros(a.shape, want_grad(a));
  const size_t n = out.data->size();
  for (size_t i = 0; i < n; ++i) (*out.data)[i] = std::exp((*a.data)[i]);
  check_finite(out, "exp");
  if (out.requires_grad) {
    out.node = make_node("exp", {a}, [a, og = out.grad, od = out.data, n]() {
      for (size_t i = 0; i < n; ++i) (*a.grad)[i] += (*og)[i] * (*od)[i];
    });
  }
  return out;
}

Tensor log_clamped(const Tensor& a, double floor) {
  if (floor <= 0.0) throw std::invalid_argument("log_clamped: floor must be positive");
  Tensor out = Tensor::zeros(a.shape, want_grad(a));
  const size_t n = out.data->size();
  for (size_t i = 0; i < n; ++i) (*out.data)[i] = std::log(std::max((*a.data)[i], floor));
  if (out.requires_grad) {
    out.node = make_node("log_clamped", {a}, [a, og = out.grad, floor, n]() {
      for (size_t i = 0; i < n; ++i) {
        const double x = (*a.data)[i];
        if (x > floor) (*a.grad)[i] += (*og)[i] / x;
      }
    });
  }
  return out;
}

Tensor pow_const(const Tensor& a, double p) {
  Tensor out = Tensor::zeros(a.shape, want_grad(a));
  const size_t n = out.data->size();
  const bool integral = p == std::floor(p);
  for (size_t i = 0; i < n; ++i) {
    const double x = (*a.data)[i];
    if (!integral && x < 0.0) {
      throw std::runtime_error("pow_const: negative base " + std::to_string(x) +
                               " with non-integer exponent");
    }
    (*out.data)[i] = std::pow(x, p);
  }
  check_finite(out, "pow_const");
  if (out.requires_grad) {
    out.node = make_node("pow_const", {a}, [a, og = out.grad, p, n]() {
      for (size_t i = 0; i < n; ++i) {
        const double x = (*a.data)[i];
        const double d = p == 0.0 ? 0.0 : p * std::pow(x, p - 1.0);
        (*a.grad)[i] += (*og)[i] * d;
      }
    });
  }
  return out;
}

// ---- linear algebra ----

Tensor matmul(const Tensor& a, const Tensor& b) {
  ensure_rank2(a, "matmul");
  ensure_rank2(b, "matmul");
  if (a.dim(1) != b.dim(0)) {
    throw std::invalid_argument("matmul: inner dimensions disagree " + shape_str(a.shape) +
                                " vs " + shape_str(b.shape));
  }
  const int m = a.dim(0), k = a.dim(1), n = b.dim(1);
  Tensor out = Tensor::zeros({m, n}, want_grad(a) || want_grad(b));
  {
    const double* A = a.data->data();
    const double* B = b.data->data();
    double* C = out.data->data();
    for (int i = 0; i < m; ++i) {
      double* Ci = C + static_cast<size_t>(i) * n;
      for (int l = 0; l < k; ++l) {
        const double ail = A[static_cast<size_t>(i) * k + l];
        if (ail == 0.0) continue;
        const double* Bl = B + static_cast<size_t>(l) * n;
        for (int j = 0; j < n; ++j) Ci[j] += ail * Bl[j];
      }
    }
  }
  if (out.requires_grad) {
    out.node = make_node("matmul", {a, b}, [a, b, og = out.grad, m, k, n]() {
      const double* G = og->data();
      if (a.requires_grad) {  // dA = dC * B^T
        const double* B = b.data->data();
        double* dA = a.grad->data();
        for (int i = 0; i < m; ++i) {
          const double* Gi = G + static_cast<size_t>(i) * n;
          double* dAi = dA + static_cast<size_t>(i) * k;
          for (int l = 0; l < k; ++l) {
            const double* Bl = B + static_cast<size_t>(l) * n;
            double acc = 0.0;
            for (int j = 0; j < n; ++j) acc += Gi[j] * Bl[j];
            dAi[l] += acc;
          }
        }
      }
      if (b.requires_grad) {  // dB = A^T * dC
        const double* A = a.data->data();
        double* dB = b.grad->data();
        for (int i = 0; i < m; ++i) {
          const double* Gi = G + static_cast<size_t>(i) * n;
          const double* Ai = A + static_cast<size_t>(i) * k;
          for (int l = 0; l < k; ++l) {
            const double ail = Ai[l];
            if (ail == 0.0) continue;
            double* dBl = dB + static_cast<size_t>(l) * n;
            for (int j = 0; j < n; ++j) dBl[j] += ail * Gi[j];
          }
        }
      }
    });
  }
  return out;
}

Tensor transpose(const Tensor& a) {
  ensure_rank2(a, "transpose");
  const int m = a.dim(0), n = a.dim(1);
  Tensor out = Tensor::zeros({n, m}, want_grad(a));
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j)
      (*out.data)[static_cast<size_t>(j) * m + i] = (*a.data)[static_cast<size_t>(i) * n + j];
  if (out.requires_grad) {
    out.node = make_node("transpose", {a}, [a, og = out.grad, m, n]() {
      for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j)
          (*a.grad)[static_cast<size_t>(i) * n + j] += (*og)[static_cast<size_t>(j) * m + i];
    });
  }
  return out;
}

// ---- reductions / normalizations ----

namespace {

// Iterates the slices a 2-D (or 1-D) tensor normalizes over: axis=1 walks
// rows (stride 1), axis=0 walks columns (stride = row width).
struct SliceIter {
  int slices, len;
  int64_t slice_stride, elem_stride;
};

SliceIter slice_iter(const Tensor& a, int axis, const char* op) {
  if (a.rank() == 1) {
    if (axis != 0) throw std::invalid_argument(std::string(op) + ": axis out of range for 1-D tensor");
    return {1, a.dim(0), 0, 1};
  }
  if (a.rank() != 2) {
    throw std::invalid_argument(std::string(op) + ": expected 1-D or 2-D tensor, got " +
                                shape_str(a.shape));
  }
  const int m = a.dim(0), n = a.dim(1);
  if (axis == 1) return {m, n, n, 1};
  if (axis == 0) return {n, m, 1, n};
  throw std::invalid_argument(std::string(op) + ": axis must be 0 or 1");
}

}  // namespace

Tensor softmax(const Tensor& a, int axis) {
  const SliceIter it = slice_iter(a, axis, "softmax");
  if (it.len == 0) throw std::invalid_argument("softmax: empty axis");
  Tensor out = Tensor::zeros(a.shape, want_grad(a));
  for (int s = 0; s < it.slices; ++s) {
    const int64_t base = s * it.slice_stride;
    double mx = (*a.data)[static_cast<size_t>(base)];
    for (int i = 1; i < it.len; ++i)
      mx = std::max(mx, (*a.data)[static_cast<size_t>(base + i * it.elem_stride)]);
    double denom = 0.0;
    for (int i = 0; i < it.len; ++i) {
      const double e = std::exp((*a.data)[static_cast<size_t>(base + i * it.elem_stride)] - mx);
      (*out.data)[static_cast<size_t>(base + i * it.elem_stride)] = e;
      denom += e;
    }
    for (int i = 0; i < it.len; ++i)
      (*out.data)[static_cast<size_t>(base + i * it.elem_stride)] /= denom;
  }
  if (out.requires_grad) {
    out.node = make_node("softmax", {a}, [a, og = out.grad, od = out.data, it]() {
      for (int s = 0; s < it.slices; ++s) {
        const int64_t base = s * it.slice_stride;
        double dot = 0.0;
        for (int i = 0; i < it.len; ++i) {
          const size_t k = static_cast<size_t>(base + i * it.elem_stride);
          dot += (*og)[k] * (*od)[k];
        }
        for (int i = 0; i < it.len; ++i) {
          const size_t k = static_cast<size_t>(base + i * it.elem_stride);
          (*a.grad)[k] += (*od)[k] * ((*og)[k] - dot);
        }
      }
    });
  }
  return out;
}

Tensor log_softmax(const Tensor& a, int axis) {
  const SliceIter it = slice_iter(a, axis, "log_softmax");
  if (it.len == 0) throw std::invalid_argument("log_softmax: empty axis");
  Tensor out = Tensor::zeros(a.shape, want_grad(a));
  for (int s = 0; s < it.slices; ++s) {
    const int64_t base = s * it.slice_stride;
    double mx = (*a.data)[static_cast<size_t>(base)];
    for (int i = 1; i < it.len; ++i)
      mx = std::max(mx, (*a.data)[static_cast<size_t>(base + i * it.elem_stride)]);
    double denom = 0.0;
    for (int i = 0; i < it.len; ++i)
      denom += std::exp((*a.data)[static_cast<size_t>(base + i * it.elem_stride)] - mx);
    const double lse = mx + std::log(denom);
    for (int i = 0; i < it.len; ++i) {
      const size_t k = static_cast<size_t>(base + i * it.elem_stride);
      (*out.data)[k] = (*a.data)[k] - lse;
    }
  }
  if (out.requires_grad) {
    out.node = make_node("log_softmax", {a}, [a, og = out.grad, od = out.data, it]() {
      for (int s = 0; s < it.slices; ++s) {
        const int64_t base = s * it.slice_stride;
        double gsum = 0.0;
        for (int i = 0; i < it.len; ++i)
          gsum += (*og)[static_cast<size_t>(base + i * it.elem_stride)];
        for (int i = 0; i < it.len; ++i) {
          const size_t k = static_cast<size_t>(base + i * it.elem_stride);
          (*a.grad)[k] += (*og)[k] - std::exp((*od)[k]) * gsum;
        }
      }
    });
  }
  return out;
}

Tensor layer_norm(const Tensor& a, int axis, double eps) {
  const SliceIter it = slice_iter(a, axis, "layer_norm");
  if (it.len == 0) throw std::invalid_argument("layer_norm: empty axis");
  Tensor out = Tensor::zeros(a.shape, want_grad(a));
  std::vector<double> inv_std(static_cast<size_t>(it.slices));
  for (int s = 0; s < it.slices; ++s) {
    const int64_t base = s * it.slice_stride;
    double mean = 0.0;
    for (int i = 0; i < it.len; ++i) mean += (*a.data)[static_cast<size_t>(base + i * it.elem_stride)];
    mean /= it.len;
    double var = 0.0;
    for (int i = 0; i < it.len; ++i) {
      const double d = (*a.data)[static_cast<size_t>(base + i * it.elem_stride)] - mean;
      var += d * d;
    }
    var /= it.len;
    const double is = 1.0 / std::sqrt(var + eps);
    inv_std[static_cast<size_t>(s)] = is;
    for (int i = 0; i < it.len; ++i) {
      const size_t k = static_cast<size_t>(base + i * it.elem_stride);
      (*out.data)[k] = ((*a.data)[k] - mean) * is;
    }
  }
  if (out.requires_grad) {
    out.node = make_node("layer_norm", {a},
                         [a, og = out.grad, od = out.data, it, inv_std = std::move(inv_std)]() {
      for (int s = 0; s < it.slices; ++s) {
        const int64_t base = s * it.slice_stride;
        double mean_dy = 0.0, mean_dyy = 0.0;
        for (int i = 0; i < it.len; ++i) {
          const size_t k = static_cast<size_t>(base + i * it.elem_stride);
          mean_dy += (*og)[k];
          mean_dyy += (*og)[k] * (*od)[k];
        }
        mean_dy /= it.len;
        mean_dyy /= it.len;
        const double is = inv_std[static_cast<size_t>(s)];
        for (int i = 0; i < it.len; ++i) {
          const size_t k = static_cast<size_t>(base + i * it.elem_stride);
          (*a.grad)[k] += is * ((*og)[k] - mean_dy - (*od)[k] * mean_dyy);
        }
      }
    });
  }
  return out;
}

Tensor sum_all(const Tensor& a) {
  Tensor out = Tensor::zeros({1}, want_grad(a));
  double acc = 0.0;
  for (double v : *a.data) acc += v;
  (*out.data)[0] = acc;
  if (out.requires_grad) {
    out.node = make_node("sum_all", {a}, [a, og = out.grad]() {
      const double g = (*og)[0];
      for (double& v : *a.grad) v += g;
    });
  }
  return out;
}

Tensor mean_all(const Tensor& a) {
  if (a.numel() == 0) throw std::invalid_argument("mean_all: empty tensor");
  return scale(sum_all(a), 1.0 / static_cast<double>(a.numel()));
}

Tensor sum_axis(const Tensor& a, int axis) {
  ensure_rank2(a, "sum_axis");
  const int m = a.dim(0), n = a.dim(1);
  if (axis == 0) {
    Tensor out = Tensor::zeros({n}, want_grad(a));
    for (int i = 0; i < m; ++i)
      for (int j = 0; j < n; ++j) (*out.data)[static_cast<size_t>(j)] += (*a.data)[static_cast<size_t>(i) * n + j];
    if (out.requires_grad) {
      out.node = make_node("sum_axis", {a}, [a, og = out.grad, m, n]() {
        for (int i = 0; i < m; ++i)
          for (int j = 0; j < n; ++j) (*a.grad)[static_cast<size_t>(i) * n + j] += (*og)[static_cast<size_t>(j)];
      });
    }
    return out;
  }
  if (axis == 1) {
    Tensor out = Tensor::zeros({m}, want_grad(a));
    for (int i = 0; i < m; ++i) {
      double acc = 0.0;
      for (int j = 0; j < n; ++j) acc += (*a.data)[static_cast<size_t>(i) * n + j];
      (*out.data)[static_cast<size_t>(i)] = acc;
    }
    if (out.requires_grad) {
      out.node = make_node("sum_axis", {a}, [a, og = out.grad, m, n]() {
        for (int i = 0; i < m; ++i) {
          const double g = (*og)[static_cast<size_t>(i)];
          for (int j = 0; j < n; ++j) (*a.grad)[static_cast<size_t>(i) * n + j] += g;
        }
      });
    }
    return out;
  }
  throw std::invalid_argument("sum_axis: axis must be 0 or 1");
}

// ---- shape and indexing ----

Tensor reshape_copy(const Tensor& a, const Shape& shape) {
  if (shape_numel(shape) != a.numel()) {
    throw std::invalid_argument("reshape_copy: cannot reshape " + shape_str(a.shape) + " to " +
                                shape_str(shape));
  }
  Tensor out = Tensor::zeros(shape, want_grad(a));
  std::copy(a.data->begin(), a.data->end(), out.data->begin());
  if (out.requires_grad) {
    out.node = make_node("reshape", {a}, [a, og = out.grad]() {
      for (size_t i = 0; i < og->size(); ++i) (*a.grad)[i] += (*og)[i];
    });
  }
  return out;
}

Tensor gather_rows(const Tensor& a, const std::vector<int>& idx) {
  int rows = 0, cols = 0;
  row_view(a, "gather_rows", &rows, &cols);
  for (int i : idx) {
    if (i < 0 || i >= rows) {
      throw std::out_of_range("gather_rows: index " + std::to_string(i) + " outside [0, " +
                              std::to_string(rows) + ")");
    }
  }
  const int k = static_cast<int>(idx.size());
  Shape out_shape = a.rank() == 1 ? Shape{k} : Shape{k, cols};
  Tensor out = Tensor::zeros(out_shape, want_grad(a));
  for (int r = 0; r < k; ++r)
    std::copy_n(a.data->begin() + static_cast<int64_t>(idx[static_cast<size_t>(r)]) * cols, cols,
                out.data->begin() + static_cast<int64_t>(r) * cols);
  if (out.requires_grad) {
    out.node = make_node("gather_rows", {a}, [a, og = out.grad, idx, cols, k]() {
      for (int r = 0; r < k; ++r) {
        const int64_t src = static_cast<int64_t>(r) * cols;
        const int64_t dst = static_cast<int64_t>(idx[static_cast<size_t>(r)]) * cols;
        for (int c = 0; c < cols; ++c) (*a.grad)[static_cast<size_t>(dst + c)] += (*og)[static_cast<size_t>(src + c)];
      }
    });
  }
  return out;
}

Tensor scatter_rows(const Tensor& compact, const std::vector<int>& idx, const Tensor& carry) {
  int rows = 0, cols = 0;
  row_view(carry, "scatter_rows", &rows, &cols);
  int crows = 0, ccols = 0;
  row_view(compact, "scatter_rows", &crows, &ccols);
  if (ccols != cols) {
    throw std::invalid_argument("scatter_rows: column mismatch " + shape_str(compact.shape) +
                                " vs " + shape_str(carry.shape));
  }
  if (static_cast<int>(idx.size()) != crows) {
    throw std::invalid_argument("scatter_rows: " + std::to_string(idx.size()) + " indices for " +
                                std::to_string(crows) + " rows");
  }
  std::unordered_set<int> seen;
  for (int i : idx) {
    if (i < 0 || i >= rows) {
      throw std::out_of_range("scatter_rows: index " + std::to_string(i) + " outside [0, " +
                              std::to_string(rows) + ")");
    }
    if (!seen.insert(i).second) {
      throw std::invalid_argument("scatter_rows: duplicate index " + std::to_string(i));
    }
  }
  Tensor out = Tensor::zeros(carry.shape, want_grad(compact) || want_grad(carry));
  std::copy(carry.data->begin(), carry.data->end(), out.data->begin());
  for (size_t r = 0; r < idx.size(); ++r)
    std::copy_n(compact.data->begin() + static_cast<int64_t>(r) * cols, cols,
                out.data->begin() + static_cast<int64_t>(idx[r]) * cols);
  if (out.requires_grad) {
    out.node = make_node("scatter_rows", {compact, carry},
                         [compact, carry, og = out.grad, idx, rows, cols]() {
      if (compact.requires_grad) {
        for (size_t r = 0; r < idx.size(); ++r) {
          const int64_t src = static_cast<int64_t>(idx[r]) * cols;
          const int64_t dst = static_cast<int64_t>(r) * cols;
          for (int c = 0; c < cols; ++c)
            (*compact.grad)[static_cast<size_t>(dst + c)] += (*og)[static_cast<size_t>(src + c)];
        }
      }
      if (carry.requires_grad) {
        std::vector<char> hit(static_cast<size_t>(rows), 0);
        for (int i : idx) hit[static_cast<size_t>(i)] = 1;
        for (int r = 0; r < rows; ++r) {
          if (hit[static_cast<size_t>(r)]) continue;
          const int64_t base = static_cast<int64_t>(r) * cols;
          for (int c = 0; c < cols; ++c)
            (*carry.grad)[static_cast<size_t>(base + c)] += (*og)[static_cast<size_t>(base + c)];
        }
      }
    });
  }
  return out;
}

Tensor slice_cols(const Tensor& a, int c0, int c1) {
  ensure_rank2(a, "slice_cols");
  const int m = a.dim(0), n = a.dim(1);
  if (c0 < 0 || c1 > n || c0 >= c1) {
    throw std::invalid_argument("slice_cols: range [" + std::to_string(c0) + ", " +
                                std::to_string(c1) + ") invalid for " + shape_str(a.shape));
  }
  const int w = c1 - c0;
  Tensor out = Tensor::zeros({m, w}, want_grad(a));
  for (int i = 0; i < m; ++i)
    std::copy_n(a.data->begin() + static_cast<int64_t>(i) * n + c0, w,
                out.data->begin() + static_cast<int64_t>(i) * w);
  if (out.requires_grad) {
    out.node = make_node("slice_cols", {a}, [a, og = out.grad, m, n, c0, w]() {
      for (int i = 0; i < m; ++i)
        for (int j = 0; j < w; ++j)
          (*a.grad)[static_cast<size_t>(i) * n + c0 + j] += (*og)[static_cast<size_t>(i) * w + j];
    });
  }
  return out;
}

Tensor concat_cols(const Tensor& a, const Tensor& b) {
  ensure_rank2(a, "concat_cols");
  ensure_rank2(b, "concat_cols");
  if (a.dim(0) != b.dim(0)) {
    throw std::invalid_argument("concat_cols: row mismatch " + shape_str(a.shape) + " vs " +
                                shape_str(b.shape));
  }
  const int m = a.dim(0), na = a.dim(1), nb = b.dim(1);
  Tensor out = Tensor::zeros({m, na + nb}, want_grad(a) || want_grad(b));
  for (int i = 0; i < m; ++i) {
    std::copy_n(a.data->begin() + static_cast<int64_t>(i) * na, na,
                out.data->begin() + static_cast<int64_t>(i) * (na + nb));
    std::copy_n(b.data->begin() + static_cast<int64_t>(i) * nb, nb,
                out.data->begin() + static_cast<int64_t>(i) * (na + nb) + na);
  }
  if (out.requires_grad) {
    out.node = make_node("concat_cols", {a, b}, [a, b, og = out.grad, m, na, nb]() {
      for (int i = 0; i < m; ++i) {
        const int64_t base = static_cast<int64_t>(i) * (na + nb);
        if (a.requires_grad)
          for (int j = 0; j < na; ++j)
            (*a.grad)[static_cast<size_t>(i) * na + j] += (*og)[static_cast<size_t>(base + j)];
        if (b.requires_grad)
          for (int j = 0; j < nb; ++j)
            (*b.grad)[static_cast<size_t>(i) * nb + j] += (*og)[static_cast<size_t>(base + na + j)];
      }
    });
  }
  return out;
}

namespace {

void check_row_scaler(const Tensor& a, const Tensor& s, const char* op, int* rows, int* cols) {
  row_view(a, op, rows, cols);
  if (s.rank() != 1 || s.dim(0) != *rows) {
    throw std::invalid_argument(std::string(op) + ": scaler shape " + shape_str(s.shape) +
                                " does not match " + std::to_string(*rows) + " rows");
  }
}

}  // namespace

Tensor mul_rows(const Tensor& a, const Tensor& s) {
  int rows = 0, cols = 0;
  check_row_scaler(a, s, "mul_rows", &rows, &cols);
  Tensor out = Tensor::zeros(a.shape, want_grad(a) || want_grad(s));
  for (int i = 0; i < rows; ++i) {
    const double si = (*s.data)[static_cast<size_t>(i)];
    for (int j = 0; j < cols; ++j) {
      const size_t k = static_cast<size_t>(i) * cols + j;
      (*out.data)[k] = (*a.data)[k] * si;
    }
  }
  if (out.requires_grad) {
    out.node = make_node("mul_rows", {a, s}, [a, s, og = out.grad, rows, cols]() {
      for (int i = 0; i < rows; ++i) {
        const double si = (*s.data)[static_cast<size_t>(i)];
        double acc = 0.0;
        for (int j = 0; j < cols; ++j) {
          const size_t k = static_cast<size_t>(i) * cols + j;
          if (a.requires_grad) (*a.grad)[k] += (*og)[k] * si;
          acc += (*og)[k] * (*a.data)[k];
        }
        if (s.requires_grad) (*s.grad)[static_cast<size_t>(i)] += acc;
      }
    });
  }
  return out;
}

Tensor div_rows(const Tensor& a, const Tensor& s) {
  int rows = 0, cols = 0;
  check_row_scaler(a, s, "div_rows", &rows, &cols);
  Tensor out = Tensor::zeros(a.shape, want_grad(a) || want_grad(s));
  for (int i = 0; i < rows; ++i) {
    const double si = (*s.data)[static_cast<size_t>(i)];
    if (std::abs(si) < 1e-300 || !std::isfinite(si)) {
      throw std::runtime_error("div_rows: divisor " + std::to_string(si) + " at row " +
                               std::to_string(i));
    }
    for (int j = 0; j < cols; ++j) {
      const size_t k = static_cast<size_t>(i) * cols + j;
      (*out.data)[k] = (*a.data)[k] / si;
    }
  }
  if (out.requires_grad) {
    out.node = make_node("div_rows", {a, s}, [a, s, og = out.grad, od = out.data, rows, cols]() {
      for (int i = 0; i < rows; ++i) {
        const double si = (*s.data)[static_cast<size_t>(i)];
        double acc = 0.0;
        for (int j = 0; j < cols; ++j) {
          const size_t k = static_cast<size_t>(i) * cols + j;
          if (a.requires_grad) (*a.grad)[k] += (*og)[k] / si;
          acc += (*og)[k] * (*od)[k];
        }
        if (s.requires_grad) (*s.grad)[static_cast<size_t>(i)] -= acc / si;
      }
    });
  }
  return out;
}

Tensor mul_cols(const Tensor& a, const Tensor& g) {
  ensure_rank2(a, "mul_cols");
  const int m = a.dim(0), n = a.dim(1);
  if (g.rank() != 1 || g.dim(0) != n) {
    throw std::invalid_argument("mul_cols: scaler shape " + shape_str(g.shape) +
                                " does not match " + std::to_string(n) + " columns");
  }
  Tensor out = Tensor::zeros(a.shape, want_grad(a) || want_grad(g));
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j) {
      const size_t k = static_cast<size_t>(i) * n + j;
      (*out.data)[k] = (*a.data)[k] * (*g.data)[static_cast<size_t>(j)];
    }
  if (out.requires_grad) {
    out.node = make_node("mul_cols", {a, g}, [a, g, og = out.grad, m, n]() {
      for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j) {
          const size_t k = static_cast<size_t>(i) * n + j;
          if (a.requires_grad) (*a.grad)[k] += (*og)[k] * (*g.data)[static_cast<size_t>(j)];
          if (g.requires_grad) (*g.grad)[static_cast<size_t>(j)] += (*og)[k] * (*a.data)[k];
        }
    });
  }
  return out;
}

Tensor add_rows(const Tensor& a, const Tensor& b) {
  ensure_rank2(a, "add_rows");
  const int m = a.dim(0), n = a.dim(1);
  if (b.rank() != 1 || b.dim(0) != n) {
    throw std::invalid_argument("add_rows: bias shape " + shape_str(b.shape) +
                                " does not match " + std::to_string(n) + " columns");
  }
  Tensor out = Tensor::zeros(a.shape, want_grad(a) || want_grad(b));
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j) {
      const size_t k = static_cast<size_t>(i) * n + j;
      (*out.data)[k] = (*a.data)[k] + (*b.data)[static_cast<size_t>(j)];
    }
  if (out.requires_grad) {
    out.node = make_node("add_rows", {a, b}, [a, b, og = out.grad, m, n]() {
      for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j) {
          const size_t k = static_cast<size_t>(i) * n + j;
          if (a.requires_grad) (*a.grad)[k] += (*og)[k];
          if (b.requires_grad) (*b.grad)[static_cast<size_t>(j)] += (*og)[k];
        }
    });
  }
  return out;
}

// ---- image ops ----

Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b, int stride) {
  if (x.rank() != 3) throw std::invalid_argument("conv2d: input must be h x w x c, got " + shape_str(x.shape));
  if (w.rank() != 4) throw std::invalid_argument("conv2d: weight must be kh x kw x cin x cout, got " + shape_str(w.shape));
  const int h = x.dim(0), wd = x.dim(1), cin = x.dim(2);
  const int kh = w.dim(0), kw = w.dim(1), wcin = w.dim(2), cout = w.dim(3);
  if (wcin != cin) {
    throw std::invalid_argument("conv2d: input channels " + std::to_string(cin) +
                                " vs weight channels " + std::to_string(wcin));
  }
  if (b.rank() != 1 || b.dim(0) != cout) {
    throw std::invalid_argument("conv2d: bias shape " + shape_str(b.shape) + " for " +
                                std::to_string(cout) + " output channels");
  }
  if (stride < 1) throw std::invalid_argument("conv2d: stride must be >= 1");
  const int ph = kh / 2, pw = kw / 2;
  const int oh = (h + 2 * ph - kh) / stride + 1;
  const int ow = (wd + 2 * pw - kw) / stride + 1;
  Tensor out = Tensor::zeros({oh, ow, cout}, want_grad(x) || want_grad(w) || want_grad(b));

  const double* X = x.data->data();
  const double* W = w.data->data();
  const double* B = b.data->data();
  double* O = out.data->data();
  auto clampi = [](int v, int hi) { return v < 0 ? 0 : (v >= hi ? hi - 1 : v); };
  for (int oy = 0; oy < oh; ++oy) {
    for (int ox = 0; ox < ow; ++ox) {
      double* opx = O + (static_cast<size_t>(oy) * ow + ox) * cout;
      for (int co = 0; co < cout; ++co) opx[co] = B[co];
      for (int ky = 0; ky < kh; ++ky) {
        const int iy = clampi(oy * stride - ph + ky, h);
        for (int kx = 0; kx < kw; ++kx) {
          const int ix = clampi(ox * stride - pw + kx, wd);
          const double* xpx = X + (static_cast<size_t>(iy) * wd + ix) * cin;
          const double* wk = W + (static_cast<size_t>(ky) * kw + kx) * cin * cout;
          for (int ci = 0; ci < cin; ++ci) {
            const double xv = xpx[ci];
            if (xv == 0.0) continue;
            const double* wrow = wk + static_cast<size_t>(ci) * cout;
            for (int co = 0; co < cout; ++co) opx[co] += xv * wrow[co];
          }
        }
      }
    }
  }

  if (out.requires_grad) {
    out.node = make_node("conv2d", {x, w, b},
                         [x, w, b, og = out.grad, h, wd, cin, kh, kw, cout, stride, ph, pw, oh, ow]() {
      const double* G = og->data();
      const double* X = x.data->data();
      const double* W = w.data->data();
      auto clampi = [](int v, int hi) { return v < 0 ? 0 : (v >= hi ? hi - 1 : v); };
      if (b.requires_grad) {
        double* dB = b.grad->data();
        for (int oy = 0; oy < oh; ++oy)
          for (int ox = 0; ox < ow; ++ox) {
            const double* gpx = G + (static_cast<size_t>(oy) * ow + ox) * cout;
            for (int co = 0; co < cout; ++co) dB[co] += gpx[co];
          }
      }
      double* dX = x.requires_grad ? x.grad->data() : nullptr;
      double* dW = w.requires_grad ? w.grad->data() : nullptr;
      for (int oy = 0; oy < oh; ++oy) {
        for (int ox = 0; ox < ow; ++ox) {
          const double* gpx = G + (static_cast<size_t>(oy) * ow + ox) * cout;
          for (int ky = 0; ky < kh; ++ky) {
            const int iy = clampi(oy * stride - ph + ky, h);
            for (int kx = 0; kx < kw; ++kx) {
              const int ix = clampi(ox * stride - pw + kx, wd);
              const double* xpx = X + (static_cast<size_t>(iy) * wd + ix) * cin;
              const double* wk = W + (static_cast<size_t>(ky) * kw + kx) * cin * cout;
              for (int ci = 0; ci < cin; ++ci) {
                const double* wrow = wk + static_cast<size_t>(ci) * cout;
                if (dX) {
                  double acc = 0.0;
                  for (int co = 0; co < cout; ++co) acc += gpx[co] * wrow[co];
                  dX[(static_cast<size_t>(iy) * wd + ix) * cin + ci] += acc;
                }
                if (dW) {
                  const double xv = xpx[ci];
                  if (xv != 0.0) {
                    double* dwrow = dW + ((static_cast<size_t>(ky) * kw + kx) * cin + ci) * cout;
                    for (int co = 0; co < cout; ++co) dwrow[co] += xv * gpx[co];
                  }
                }
              }
            }
          }
        }
      }
    });
  }
  return out;
}

Tensor upsample_nearest(const Tensor& x, int factor) {
  if (x.rank() != 3) throw std::invalid_argument("upsample_nearest: input must be h x w x c");
  if (factor < 1) throw std::invalid_argument("upsample_nearest: factor must be >= 1");
  const int h = x.dim(0), w = x.dim(1), c = x.dim(2);
  Tensor out = Tensor::zeros({h * factor, w * factor, c}, want_grad(x));
  for (int oy = 0; oy < h * factor; ++oy)
    for (int ox = 0; ox < w * factor; ++ox) {
      const int64_t src = (static_cast<int64_t>(oy / factor) * w + ox / factor) * c;
      const int64_t dst = (static_cast<int64_t>(oy) * w * factor + ox) * c;
      std::copy_n(x.data->begin() + src, c, out.data->begin() + dst);
    }
  if (out.requires_grad) {
    out.node = make_node("upsample_nearest", {x}, [x, og = out.grad, h, w, c, factor]() {
      for (int oy = 0; oy < h * factor; ++oy)
        for (int ox = 0; ox < w * factor; ++ox) {
          const int64_t src = (static_cast<int64_t>(oy / factor) * w + ox / factor) * c;
          const int64_t dst = (static_cast<int64_t>(oy) * w * factor + ox) * c;
          for (int ch = 0; ch < c; ++ch)
            (*x.grad)[static_cast<size_t>(src + ch)] += (*og)[static_cast<size_t>(dst + ch)];
        }
    });
  }
  return out;
}

// ---- verification ----

GradCheckReport grad_check(const std::function<Tensor()>& f, const std::vector<Tensor>& inputs,
                           double h, double tol, int64_t max_coords_per_input,
                           uint64_t subset_seed) {
  if (h <= 0.0) throw std::invalid_argument("grad_check: step must be positive");
  for (const Tensor& t : inputs) {
    if (!t.requires_grad) throw std::invalid_argument("grad_check: all inputs must require grad");
  }
  std::vector<Tensor> ins = inputs;
  for (Tensor& t : ins) zero_grad(t);

  Tensor out = f();
  if (out.numel() != 1) throw std::invalid_argument("grad_check: f must return a scalar");
  backward(out);

  std::vector<std::vector<double>> analytic;
  analytic.reserve(ins.size());
  for (const Tensor& t : ins) analytic.push_back(*t.grad);

  GradCheckReport rep;
  uint64_t rng = subset_seed * 0x9e3779b97f4a7c15ULL + 1;
  auto next = [&rng]() {
    rng ^= rng << 13;
    rng ^= rng >> 7;
    rng ^= rng << 17;
    return rng;
  };

  for (size_t ti = 0; ti < ins.size(); ++ti) {
    Tensor& t = ins[ti];
    const int64_t n = t.numel();
    std::vector<int64_t> coords;
    if (max_coords_per_input > 0 && n > max_coords_per_input) {
      std::unordered_set<int64_t> picked;
      while (static_cast<int64_t>(picked.size()) < max_coords_per_input)
        picked.insert(static_cast<int64_t>(next() % static_cast<uint64_t>(n)));
      coords.assign(picked.begin(), picked.end());
      std::sort(coords.begin(), coords.end());
    } else {
      coords.resize(static_cast<size_t>(n));
      std::iota(coords.begin(), coords.end(), 0);
    }
    for (int64_t c : coords) {
      const double saved = t.at(c);
      t.at(c) = saved + h;
      const double fp = f().value();
      t.at(c) = saved - h;
      const double fm = f().value();
      t.at(c) = saved;
      const double num = (fp - fm) / (2.0 * h);
      const double ana = analytic[ti][static_cast<size_t>(c)];
      const double denom = std::max({1.0, std::abs(num), std::abs(ana)});
      const double rel = std::abs(num - ana) / denom;
      ++rep.coords_checked;
      if (rel > rep.max_rel_err) {
        rep.max_rel_err = rel;
        rep.analytic = ana;
        rep.numeric = num;
        rep.worst_input = static_cast<int>(ti);
        rep.worst_coord = c;
      }
    }
  }
  rep.passed = rep.max_rel_err < tol;
  return rep;
}

}  // namespace hcpm
