#pragma once

#include <cstdint>
#include <vector>

#include "mtalk/autodiff/tensor.hpp"

namespace mtalk::ad {

struct AdamWSettings {
  double beta1 = 0.9;
  double beta2 = 0.99;
  double eps = 1e-8;
  double weight_decay = 0.0;
};

// Per-parameter moments, in ParamSet order.
template <typename T>
struct AdamWState {
  AdamWSettings settings;
  std::vector<Tensor<T>> m;
  std::vector<Tensor<T>> v;
  std::int64_t t = 0;

  AdamWState() = default;
  AdamWState(const ParamSet<T>& params, AdamWSettings s);
};

// One decoupled-weight-decay Adam step over every parameter in `params`
// using the gradients stored alongside them.
template <typename T>
void adamw_step(ParamSet<T>& params, AdamWState<T>& state, double lr);

// Clips the global L2 norm of all gradients to `max_norm`; returns the norm before clipping.
template <typename T>
double clip_grad_norm(ParamSet<T>& params, double max_norm);

struct CosineSchedule {
  double base_lr = 1e-4;
  double min_lr = 0.0;
  std::int64_t total_steps = 1;
  std::int64_t warmup_steps = 0;

  // Warmup defaults to 1% of the run.
  static CosineSchedule with_default_warmup(double base, double min, std::int64_t total);
};

double schedule_rate(const CosineSchedule& s, std::int64_t step);

}  // namespace mtalk::ad
