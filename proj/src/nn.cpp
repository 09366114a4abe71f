#include "hcpm/nn.hpp"

#include <cmath>
#include <stdexcept>

namespace hcpm {

uint64_t Rng::next_u64() {
  // splitmix64; stable across platforms and good enough for synthetic data.
  state += 0x9e3779b97f4a7c15ULL;
  uint64_t z = state;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

double Rng::uniform01() {
  return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
}

double Rng::uniform(double lo, double hi) { return lo + (hi - lo) * uniform01(); }

double Rng::normal() {
  if (have_spare) {
    have_spare = false;
    return spare;
  }
  double u1 = uniform01();
  while (u1 <= 0.0) u1 = uniform01();
  const double u2 = uniform01();
  const double r = std::sqrt(-2.0 * std::log(u1));
  const double a = 2.0 * M_PI * u2;
  spare = r * std::sin(a);
  have_spare = true;
  return r * std::cos(a);
}

double Rng::gumbel() {
  double u = uniform01();
  while (u <= 0.0) u = uniform01();
  return -std::log(-std::log(u) + 1e-300);
}

Tensor& ParamStore::add(const std::string& name, const Shape& shape) {
  for (const auto& [n, t] : items) {
    if (n == name) throw std::invalid_argument("ParamStore: duplicate parameter " + name);
  }
  items.emplace_back(name, Tensor::zeros(shape, true));
  return items.back().second;
}

Tensor& ParamStore::get(const std::string& name) {
  for (auto& [n, t] : items)
    if (n == name) return t;
  throw std::out_of_range("ParamStore: no parameter named " + name);
}

const Tensor& ParamStore::get(const std::string& name) const {
  for (const auto& [n, t] : items)
    if (n == name) return t;
  throw std::out_of_range("ParamStore: no parameter named " + name);
}

int64_t ParamStore::scalar_count() const {
  int64_t n = 0;
  for (const auto& [name, t] : items) n += t.numel();
  return n;
}

void ParamStore::zero_grad() {
  for (auto& [name, t] : items) hcpm::zero_grad(t);
}

std::vector<double> ParamStore::flatten_values() const {
  std::vector<double> out;
  out.reserve(static_cast<size_t>(scalar_count()));
  for (const auto& [name, t] : items) out.insert(out.end(), t.data->begin(), t.data->end());
  return out;
}

void ParamStore::load_values(const std::vector<double>& values) {
  if (static_cast<int64_t>(values.size()) != scalar_count()) {
    throw std::invalid_argument("ParamStore: " + std::to_string(values.size()) +
                                " values for " + std::to_string(scalar_count()) + " parameters");
  }
  size_t off = 0;
  for (auto& [name, t] : items) {
    std::copy_n(values.begin() + static_cast<int64_t>(off), t.data->size(), t.data->begin());
    off += t.data->size();
  }
}

void init_xavier(Tensor& t, int fan_in, int fan_out, Rng& rng) {
  const double s = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  for (double& v : *t.data) v = rng.uniform(-s, s);
}

AdaptiveStep::AdaptiveStep(ParamStore& store, double lr) : lr(lr), store_(&store) {
  v_.reserve(store.items.size());
  for (const auto& [name, t] : store.items)
    v_.emplace_back(t.data->size(), 0.0);
}

void AdaptiveStep::step() {
  if (v_.size() != store_->items.size()) {
    throw std::logic_error("AdaptiveStep: parameter count changed after construction");
  }
  double sq = 0.0;
  for (const auto& [name, t] : store_->items)
    for (double g : *t.grad) sq += g * g;
  const double norm = std::sqrt(sq);
  const double rescale = (clip_norm > 0.0 && norm > clip_norm) ? clip_norm / norm : 1.0;

  for (size_t i = 0; i < v_.size(); ++i) {
    Tensor& t = store_->items[i].second;
    std::vector<double>& v = v_[i];
    for (size_t j = 0; j < v.size(); ++j) {
      const double g = (*t.grad)[j] * rescale;
      v[j] = beta * v[j] + (1.0 - beta) * g * g;
      (*t.data)[j] -= lr * g / (std::sqrt(v[j]) + eps);
    }
  }
}

}  // namespace hcpm
