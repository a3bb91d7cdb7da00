#pragma once

#include <algorithm>
#include <cmath>
#include <cstring>
#include <cstddef>
#include <random>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "dfad/tensor.hpp"

namespace dfad {

/// Ordered, named collection of trainable tensors.
class ParamSet {
 public:
  void add(std::string name, Tensor t) {
    for (const auto& [n, _] : entries_) {
      if (n == name) throw std::invalid_argument("duplicate parameter name '" + name + "'");
    }
    entries_.emplace_back(std::move(name), std::move(t));
  }

  const Tensor& get(const std::string& name) const {
    for (const auto& [n, t] : entries_) {
      if (n == name) return t;
    }
    throw std::out_of_range("no parameter named '" + name + "'");
  }
  bool contains(const std::string& name) const {
    for (const auto& [n, _] : entries_) {
      if (n == name) return true;
    }
    return false;
  }

  std::size_t size() const { return entries_.size(); }
  bool empty() const { return entries_.empty(); }
  const std::vector<std::pair<std::string, Tensor>>& entries() const { return entries_; }
  std::vector<std::pair<std::string, Tensor>>& entries() { return entries_; }

  std::size_t total_count() const {
    std::size_t n = 0;
    for (const auto& [_, t] : entries_) n += t.size();
    return n;
  }

  /// Deep copy: the result shares no storage with *this.
  ParamSet clone() const {
    ParamSet out;
    for (const auto& [n, t] : entries_) out.entries_.emplace_back(n, t.clone());
    return out;
  }

  void set_requires_grad(bool on) {
    for (auto& [_, t] : entries_) t.set_requires_grad(on);
  }
  void zero_grad() {
    for (auto& [_, t] : entries_) t.zero_grad();
  }

  /// Flattened concatenation of all values, in entry order.
  std::vector<double> flat_values() const {
    std::vector<double> out;
    out.reserve(total_count());
    for (const auto& [_, t] : entries_) out.insert(out.end(), t.values().begin(), t.values().end());
    return out;
  }

  /// Bitwise equality of names, shapes and values.
  bool identical_to(const ParamSet& other) const {
    if (entries_.size() != other.entries_.size()) return false;
    for (std::size_t i = 0; i < entries_.size(); ++i) {
      const auto& [na, ta] = entries_[i];
      const auto& [nb, tb] = other.entries_[i];
      if (na != nb || ta.shape() != tb.shape()) return false;
      auto va = ta.values();
      auto vb = tb.values();
      if (!std::equal(va.begin(), va.end(), vb.begin(), [](double x, double y) {
            return std::memcmp(&x, &y, sizeof(double)) == 0;
          }))
        return false;
    }
    return true;
  }

 private:
  std::vector<std::pair<std::string, Tensor>> entries_;
};

/// Glorot-uniform tensor of shape [fan_in, fan_out].
inline Tensor glorot_uniform(std::size_t fan_in, std::size_t fan_out, std::mt19937_64& rng) {
  double bound = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  std::uniform_real_distribution<double> dist(-bound, bound);
  std::vector<double> v(fan_in * fan_out);
  for (auto& x : v) x = dist(rng);
  return Tensor({fan_in, fan_out}, std::move(v), true);
}

struct AdamState {
  explicit AdamState(double lr = 1e-3, double wd = 0.0) : learning_rate(lr), weight_decay(wd) {}

  std::vector<std::vector<double>> first_moment;
  std::vector<std::vector<double>> second_moment;
  std::size_t step = 0;
  double learning_rate;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  double weight_decay;
};

/// One bias-corrected Adam update followed by decoupled weight decay
/// (-lr * wd * p). Gradients are zeroed afterwards.
inline void adam_step(ParamSet& params, AdamState& state) {
  auto& entries = params.entries();
  for (const auto& [name, t] : entries) {
    if (!t.has_grad()) throw std::logic_error("adam_step: parameter '" + name + "' has no gradient");
  }
  if (state.first_moment.empty()) {
    for (const auto& [_, t] : entries) {
      state.first_moment.emplace_back(t.size(), 0.0);
      state.second_moment.emplace_back(t.size(), 0.0);
    }
  }
  if (state.first_moment.size() != entries.size()) {
    throw std::logic_error("adam_step: optimizer state tracks " +
                           std::to_string(state.first_moment.size()) + " tensors, got " +
                           std::to_string(entries.size()));
  }
  ++state.step;
  const double lr = state.learning_rate;
  const double c1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step));
  for (std::size_t p = 0; p < entries.size(); ++p) {
    auto& [name, t] = entries[p];
    auto& m = state.first_moment[p];
    auto& v = state.second_moment[p];
    if (m.size() != t.size()) {
      throw std::logic_error("adam_step: moment shape mismatch for '" + name + "'");
    }
    auto w = t.mutable_values();
    auto g = t.mutable_grad();
    for (std::size_t i = 0; i < w.size(); ++i) {
      m[i] = state.beta1 * m[i] + (1.0 - state.beta1) * g[i];
      v[i] = state.beta2 * v[i] + (1.0 - state.beta2) * g[i] * g[i];
      double mhat = m[i] / c1;
      double vhat = v[i] / c2;
      double decay = state.weight_decay > 0.0 ? lr * state.weight_decay * w[i] : 0.0;
      w[i] -= lr * mhat / (std::sqrt(vhat) + state.epsilon) + decay;
      g[i] = 0.0;
    }
  }
}

/// Multiplies the learning rate by `factor` once each milestone (a fraction
/// of the total epoch count) has been reached.
struct LrSchedule {
  std::vector<double> milestones{0.10, 0.30, 0.50};
  double factor = 0.3;

  std::size_t milestone_epoch(double fraction, std::size_t total_epochs) const {
    auto e = static_cast<std::size_t>(std::floor(fraction * static_cast<double>(total_epochs)));
    return std::max<std::size_t>(e, 1);
  }

  /// Learning rate in effect during 0-based `epoch`.
  double rate(double base_lr, std::size_t epoch, std::size_t total_epochs) const {
    double lr = base_lr;
    for (double m : milestones) {
      if (epoch >= milestone_epoch(m, total_epochs)) lr *= factor;
    }
    return lr;
  }
};

}  // namespace dfad
