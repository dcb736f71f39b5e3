#pragma once

#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "kvmem/error.hpp"
#include "kvmem/tensor.hpp"

namespace kvmem {

/// A named parameter handed to the optimiser. Its gradient is read from the
/// tensor's grad slot; an absent slot counts as zero.
template <class T>
struct ParamRef {
  std::string name;
  Tensor<T>* tensor = nullptr;
};

/// Per-parameter trainable coordinates. Parameters not listed are frozen.
struct ParamMask {
  std::map<std::string, std::vector<bool>> entries;

  bool contains(const std::string& name) const { return entries.count(name) > 0; }
  std::size_t count() const {
    std::size_t n = 0;
    for (const auto& [name, bits] : entries)
      for (bool b : bits) n += b;
    return n;
  }
};

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
};

template <class T>
struct AdamState {
  AdamConfig config;
  std::size_t t = 0;
  std::map<std::string, std::vector<T>> m, v;

  AdamState() = default;
  explicit AdamState(AdamConfig c) : config(c) {}
};

namespace detail {

template <class T>
void check_grads_finite(const std::vector<ParamRef<T>>& params) {
  for (const auto& p : params) {
    if (!p.tensor) throw std::invalid_argument("adam_step: null tensor for " + p.name);
    if (!p.tensor->has_grad()) continue;
    if (p.tensor->grad().size() != p.tensor->size()) {
      throw ShapeError("adam_step: gradient of " + p.name + " does not match its shape");
    }
    for (T g : p.tensor->grad()) {
      if (!std::isfinite(static_cast<double>(g))) {
        throw NonFiniteError("adam_step: non-finite gradient in " + p.name);
      }
    }
  }
}

template <class T>
void adam_update(const std::vector<ParamRef<T>>& params, const ParamMask* mask,
                 AdamState<T>& state) {
  check_grads_finite(params);
  if (mask) {
    for (const auto& p : params) {
      auto it = mask->entries.find(p.name);
      if (it != mask->entries.end() && it->second.size() != p.tensor->size()) {
        throw ShapeError("masked_adam_step: mask for " + p.name + " has " +
                         std::to_string(it->second.size()) + " entries, tensor " +
                         shape_str(p.tensor->shape()));
      }
    }
  }
  const auto& c = state.config;
  ++state.t;
  const double bc1 = 1.0 - std::pow(c.beta1, double(state.t));
  const double bc2 = 1.0 - std::pow(c.beta2, double(state.t));
  const double decay = 1.0 - c.lr * c.weight_decay;
  for (const auto& p : params) {
    const std::vector<bool>* bits = nullptr;
    if (mask) {
      auto it = mask->entries.find(p.name);
      if (it == mask->entries.end()) continue;
      bits = &it->second;
    }
    auto& w = *p.tensor;
    auto& m = state.m[p.name];
    auto& v = state.v[p.name];
    if (m.empty()) {
      m.assign(w.size(), T(0));
      v.assign(w.size(), T(0));
    } else if (m.size() != w.size()) {
      throw ShapeError("adam_step: moment shape mismatch for " + p.name);
    }
    const bool has_grad = w.has_grad();
    auto data = w.data();
    for (std::size_t k = 0; k < w.size(); ++k) {
      if (bits && !(*bits)[k]) continue;
      const double g = has_grad ? static_cast<double>(w.grad()[k]) : 0.0;
      const double mk = c.beta1 * m[k] + (1.0 - c.beta1) * g;
      const double vk = c.beta2 * v[k] + (1.0 - c.beta2) * g * g;
      m[k] = static_cast<T>(mk);
      v[k] = static_cast<T>(vk);
      const double step = c.lr * (mk / bc1) / (std::sqrt(vk / bc2) + c.eps);
      data[k] = static_cast<T>(static_cast<double>(data[k]) * decay - step);
    }
  }
}

}  // namespace detail

/// Bias-corrected Adam with decoupled weight decay: w <- w (1 - lr wd),
/// then w <- w - lr m_hat / (sqrt(v_hat) + eps). Non-finite gradients
/// abort before any parameter is touched.
template <class T>
void adam_step(const std::vector<ParamRef<T>>& params, AdamState<T>& state) {
  detail::adam_update(params, nullptr, state);
}

/// adam_step restricted to masked coordinates. Unmasked coordinates, their
/// moments and their weight decay are left untouched.
template <class T>
void masked_adam_step(const std::vector<ParamRef<T>>& params, const ParamMask& mask,
                      AdamState<T>& state) {
  detail::adam_update(params, &mask, state);
}

}  // namespace kvmem
