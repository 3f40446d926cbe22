#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "vesselforge/common.hpp"
#include "vesselforge/tensor.hpp"

namespace vesselforge {

/// Bias-corrected Adam moments for a fixed, ordered parameter list.
template <class T>
struct AdamStateT {
  std::vector<std::vector<T>> m;
  std::vector<std::vector<T>> v;
  std::int64_t t = 0;

  static AdamStateT make(const std::vector<TensorT<T>>& params) {
    AdamStateT s;
    s.m.reserve(params.size());
    s.v.reserve(params.size());
    for (const auto& p : params) {
      s.m.emplace_back(p.data().size(), T(0));
      s.v.emplace_back(p.data().size(), T(0));
    }
    return s;
  }
};

using AdamState = AdamStateT<float>;

// In-place Adam update. Parameters with no grad buffer are treated as having
// zero gradient (their moments still decay).
template <class T>
void adam_step(std::vector<TensorT<T>>& params, AdamStateT<T>& state, double lr,
               double beta1, double beta2, double eps = 1e-8) {
  if (eps <= 0.0) throw ValueError(detail::msg("adam_step: eps must be positive, got ", eps));
  if (beta1 < 0.0 || beta1 >= 1.0 || beta2 < 0.0 || beta2 >= 1.0) {
    throw ValueError(detail::msg("adam_step: betas must lie in [0,1), got ", beta1, "/", beta2));
  }
  if (params.size() != state.m.size()) {
    throw ValueError(detail::msg("adam_step: state tracks ", state.m.size(),
                                 " parameters, got ", params.size()));
  }
  state.t += 1;
  const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(state.t));
  const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(state.t));
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    auto& value = params[pi].data();
    auto& m = state.m[pi];
    auto& v = state.v[pi];
    const bool has_grad = params[pi].has_grad();
    const T* g = has_grad ? params[pi].grad().data() : nullptr;
    for (std::size_t i = 0; i < value.size(); ++i) {
      const double gi = g ? static_cast<double>(g[i]) : 0.0;
      const double mi = beta1 * static_cast<double>(m[i]) + (1.0 - beta1) * gi;
      const double vi = beta2 * static_cast<double>(v[i]) + (1.0 - beta2) * gi * gi;
      m[i] = static_cast<T>(mi);
      v[i] = static_cast<T>(vi);
      const double mhat = mi / bc1;
      const double vhat = vi / bc2;
      value[i] = static_cast<T>(static_cast<double>(value[i]) - lr * mhat / (std::sqrt(vhat) + eps));
    }
  }
}

template <class T>
void zero_grads(std::vector<TensorT<T>>& params) {
  for (auto& p : params) p.zero_grad();
}

}  // namespace vesselforge
