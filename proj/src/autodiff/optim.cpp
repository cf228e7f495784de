#include "mtalk/autodiff/optim.hpp"

#include <cmath>
#include <numbers>

namespace mtalk::ad {

template <typename T>
AdamWState<T>::AdamWState(const ParamSet<T>& params, AdamWSettings s) : settings(s) {
  for (const auto& p : params) {
    m.emplace_back(p.value.shape);
    v.emplace_back(p.value.shape);
  }
}

template <typename T>
void adamw_step(ParamSet<T>& params, AdamWState<T>& state, double lr) {
  require(lr > 0.0, "adamw: learning rate must be positive");
  require<ShapeError>(state.m.size() == params.size(), "adamw: state does not match parameter count");
  const auto& s = state.settings;
  state.t += 1;
  const double bc1 = 1.0 - std::pow(s.beta1, static_cast<double>(state.t));
  const double bc2 = 1.0 - std::pow(s.beta2, static_cast<double>(state.t));
  std::size_t idx = 0;
  for (auto& p : params) {
    auto& m = state.m[idx];
    auto& v = state.v[idx];
    ++idx;
    require<ShapeError>(m.shape == p.value.shape && p.grad.shape == p.value.shape,
                        "adamw: shape mismatch for '" + p.name + "'");
    for (std::size_t i = 0; i < p.value.size(); ++i) {
      const double g = p.grad[i];
      const double mi = s.beta1 * m[i] + (1.0 - s.beta1) * g;
      const double vi = s.beta2 * v[i] + (1.0 - s.beta2) * g * g;
      m[i] = static_cast<T>(mi);
      v[i] = static_cast<T>(vi);
      const double mhat = mi / bc1;
      const double vhat = vi / bc2;
      double w = p.value[i];
      w -= lr * s.weight_decay * w;
      w -= lr * mhat / (std::sqrt(vhat) + s.eps);
      p.value[i] = static_cast<T>(w);
    }
  }
}

template <typename T>
double clip_grad_norm(ParamSet<T>& params, double max_norm) {
  double sq = 0.0;
  for (const auto& p : params)
    for (T g : p.grad.data) sq += static_cast<double>(g) * g;
  const double norm = std::sqrt(sq);
  if (norm > max_norm && norm > 0.0) {
    const double f = max_norm / norm;
    for (auto& p : params)
      for (auto& g : p.grad.data) g = static_cast<T>(g * f);
  }
  return norm;
}

CosineSchedule CosineSchedule::with_default_warmup(double base, double min, std::int64_t total) {
  CosineSchedule s;
  s.base_lr = base;
  s.min_lr = min;
  s.total_steps = total;
  s.warmup_steps = total / 100;
  return s;
}

double schedule_rate(const CosineSchedule& s, std::int64_t step) {
  require(s.total_steps >= 1 && s.warmup_steps >= 0 && s.warmup_steps <= s.total_steps,
          "schedule: inconsistent step counts");
  require(step >= 0 && step <= s.total_steps, "schedule: step " + std::to_string(step) + " outside [0, " +
                                                  std::to_string(s.total_steps) + "]");
  if (step < s.warmup_steps) return s.base_lr * static_cast<double>(step) / static_cast<double>(s.warmup_steps);
  const std::int64_t span = s.total_steps - s.warmup_steps;
  if (span == 0) return s.base_lr;
  const double progress = static_cast<double>(step - s.warmup_steps) / static_cast<double>(span);
  return s.min_lr + (s.base_lr - s.min_lr) * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

template struct AdamWState<float>;
template struct AdamWState<double>;
template void adamw_step(ParamSet<float>&, AdamWState<float>&, double);
template void adamw_step(ParamSet<double>&, AdamWState<double>&, double);
template double clip_grad_norm(ParamSet<float>&, double);
template double clip_grad_norm(ParamSet<double>&, double);

}  // namespace mtalk::ad
