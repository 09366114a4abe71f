// Parameter bookkeeping, initialization, and the desk-scale optimizer.

#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "hcpm/tensor.hpp"

namespace hcpm {

// Deterministic scalar RNG: splitmix64 stream with hand-rolled transforms,
// so draws are bit-identical across platforms and standard libraries.
struct Rng {
  explicit Rng(uint64_t seed) : state(seed * 0x9e3779b97f4a7c15ULL + 0x2545f4914f6cdd1dULL) {}

  uint64_t next_u64();
  double uniform01();                       // [0, 1)
  double uniform(double lo, double hi);
  double normal();                          // Box-Muller, mean 0, sd 1
  double gumbel();                          // -ln(-ln U), standard Gumbel

 private:
  uint64_t state;
  bool have_spare = false;
  double spare = 0.0;
};

// Ordered, named parameter registry. Declaration order defines the
// checkpoint layout, so construction order must stay stable.
struct ParamStore {
  std::vector<std::pair<std::string, Tensor>> items;

  Tensor& add(const std::string& name, const Shape& shape);
  Tensor& get(const std::string& name);
  const Tensor& get(const std::string& name) const;
  int64_t scalar_count() const;
  void zero_grad();
  std::vector<double> flatten_values() const;
  void load_values(const std::vector<double>& values);
};

// Uniform Xavier/Glorot: U(-s, s), s = sqrt(6 / (fan_in + fan_out)).
void init_xavier(Tensor& t, int fan_in, int fan_out, Rng& rng);

struct Linear {
  Tensor w;  // [in x out]
  Tensor b;  // [out]
  Tensor operator()(const Tensor& x) const { return add_rows(matmul(x, w), b); }
};

// Momentum-free adaptive step: v <- beta*v + (1-beta)*g^2,
// theta <- theta - lr * g / (sqrt(v) + eps). Gradients are rescaled first
// when their global L2 norm exceeds clip_norm (clip_norm <= 0 disables).
struct AdaptiveStep {
  double lr = 1e-3;
  double beta = 0.99;
  double eps = 1e-8;
  double clip_norm = 10.0;

  explicit AdaptiveStep(ParamStore& store, double lr = 1e-3);
  void step();

 private:
  ParamStore* store_;
  std::vector<std::vector<double>> v_;
};

}  // namespace hcpm
