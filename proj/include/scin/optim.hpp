#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "scin/error.hpp"
#include "scin/tensor.hpp"

namespace scin {

struct AdamMoments {
  std::vector<double> m;
  std::vector<double> v;
  std::uint64_t steps = 0;  // per-parameter count, drives bias correction
};

struct OptimState {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::uint64_t step = 0;
  std::map<std::string, AdamMoments> moments;
};

/// Adam update applied to exactly the listed parameters. Parameters not in
/// the list are never read or written, which is what lets norm-only
/// fine-tuning freeze the backbone. Gradients are left as they are.
template <typename T>
void adam_step(std::span<const Parameter<T>> params, OptimState& state) {
  if (params.empty()) return;
  for (const auto& p : params) {
    if (!p.tensor.has_grad()) throw UsageError("adam_step: parameter '" + p.id + "' has no gradient");
  }
  ++state.step;
  for (const auto& p : params) {
    auto& mom = state.moments[p.id];
    const std::size_t n = p.tensor.numel();
    if (mom.m.size() != n) {
      mom.m.assign(n, 0.0);
      mom.v.assign(n, 0.0);
      mom.steps = 0;
    }
    ++mom.steps;
    const double c1 = 1.0 - std::pow(state.beta1, static_cast<double>(mom.steps));
    const double c2 = 1.0 - std::pow(state.beta2, static_cast<double>(mom.steps));
    Tensor<T> t = p.tensor;
    auto w = t.data();
    auto g = t.grad();
    for (std::size_t i = 0; i < n; ++i) {
      const double gi = g[i];
      mom.m[i] = state.beta1 * mom.m[i] + (1.0 - state.beta1) * gi;
      mom.v[i] = state.beta2 * mom.v[i] + (1.0 - state.beta2) * gi * gi;
      const double mhat = mom.m[i] / c1;
      const double vhat = mom.v[i] / c2;
      w[i] = static_cast<T>(static_cast<double>(w[i]) - state.lr * mhat / (std::sqrt(vhat) + state.eps));
    }
  }
}

template <typename T>
void adam_step(const std::vector<Parameter<T>>& params, OptimState& state) {
  adam_step(std::span<const Parameter<T>>(params), state);
}

template <typename T>
void zero_grad(std::span<const Parameter<T>> params) {
  for (const auto& p : params) {
    Tensor<T> t = p.tensor;
    t.zero_grad();
  }
}

template <typename T>
void zero_grad(const std::vector<Parameter<T>>& params) {
  zero_grad(std::span<const Parameter<T>>(params));
}

}  // namespace scin
