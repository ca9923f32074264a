#pragma once

#include <algorithm>
#include <cmath>
#include <cstring>
#include <functional>
#include <map>
#include <string>

#include "saccader/errors.hpp"
#include "saccader/params.hpp"
#include "saccader/tensor.hpp"

namespace saccader {

// Per-parameter velocity buffers plus a step counter.
template <typename T>
struct OptimizerState {
  std::map<std::string, Tensor<T>> velocity;
  int64_t step = 0;
};

// Nesterov momentum update:
//   v <- mu*v + g
//   p <- p - lr*(g + mu*v)
// With mu = 0 this reduces to plain SGD, p <- p - lr*g.
template <typename T>
void sgd_nesterov_step(ParameterSet<T>& params, const std::map<std::string, Tensor<T>>& grads,
                       T lr, T momentum, OptimizerState<T>& state) {
  for (auto& e : params.entries()) {
    if (!e.trainable) continue;
    auto git = grads.find(e.name);
    if (git == grads.end()) continue;  // parameter not trained this step
    const Tensor<T>& g = git->second;
    if (!same_shape(g, e.value)) {
      throw std::invalid_argument("sgd_nesterov_step: grad shape " + shape_str(g.shape) +
                                  " does not match parameter " + e.name + " " +
                                  shape_str(e.value.shape));
    }
    if (!g.all_finite()) {
      throw NumericError("sgd_nesterov_step: non-finite gradient for parameter " + e.name);
    }
    auto [it, inserted] = state.velocity.try_emplace(e.name, Tensor<T>(e.value.shape));
    Tensor<T>& v = it->second;
    for (int64_t i = 0; i < g.numel(); ++i) {
      v[i] = momentum * v[i] + g[i];
      e.value[i] -= lr * (g[i] + momentum * v[i]);
    }
  }
  ++state.step;
}

// Linear warmup from 0 to base_lr over warmup_steps, then cosine decay to 0
// over the remaining steps.
inline double cosine_lr(int64_t step, int64_t total_steps, int64_t warmup_steps, double base_lr) {
  if (step < 0 || step > total_steps || warmup_steps >= total_steps) {
    throw std::invalid_argument("cosine_lr: need 0 <= step <= total_steps and warmup < total");
  }
  if (warmup_steps > 0 && step < warmup_steps) {
    return base_lr * static_cast<double>(step) / static_cast<double>(warmup_steps);
  }
  const double progress = static_cast<double>(step - warmup_steps) /
                          static_cast<double>(total_steps - warmup_steps);
  return base_lr * 0.5 * (1.0 + std::cos(M_PI * progress));
}

// Central-difference gradient check. f must be a deterministic scalar
// function of the parameter set (seed any internal sampling externally and
// freeze the sampled indices). Returns the worst relative error over every
// element of every trainable parameter, with denominator max(|a|,|b|,1e-8).
template <typename T>
struct GradCheckReport {
  T max_rel_error = 0;
  std::string worst_param;
  int64_t worst_index = -1;
};

template <typename T>
GradCheckReport<T> grad_check(
    const std::function<T(ParameterSet<T>&)>& f_value,
    const std::function<std::map<std::string, Tensor<T>>(ParameterSet<T>&)>& f_grads,
    const ParameterSet<T>& params, T eps) {
  // determinism probe: two evaluations must agree bit-for-bit
  {
    ParameterSet<T> p1 = params;
    ParameterSet<T> p2 = params;
    const T v1 = f_value(p1);
    const T v2 = f_value(p2);
    if (std::memcmp(&v1, &v2, sizeof(T)) != 0) {
      throw std::invalid_argument("grad_check: function is not deterministic (" +
                                  std::to_string(v1) + " vs " + std::to_string(v2) + ")");
    }
  }
  ParameterSet<T> base = params;
  std::map<std::string, Tensor<T>> ad = f_grads(base);
  GradCheckReport<T> report;
  for (const auto& e : params.entries()) {
    if (!e.trainable) continue;
    auto it = ad.find(e.name);
    if (it == ad.end()) continue;
    for (int64_t i = 0; i < e.value.numel(); ++i) {
      ParameterSet<T> plus = params;
      plus.at(e.name)[i] += eps;
      ParameterSet<T> minus = params;
      minus.at(e.name)[i] -= eps;
      const T fd = (f_value(plus) - f_value(minus)) / (T(2) * eps);
      const T a = it->second[i];
      const T denom = std::max({std::abs(a), std::abs(fd), T(1e-8)});
      const T rel = std::abs(a - fd) / denom;
      if (rel > report.max_rel_error) {
        report.max_rel_error = rel;
        report.worst_param = e.name;
        report.worst_index = i;
      }
    }
  }
  return report;
}

}  // namespace saccader
