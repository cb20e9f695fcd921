#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "empathrl/gpt_model.hpp"

namespace empathrl {

struct AdamWConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
};

/// Decoupled-weight-decay Adam over a flat parameter vector. Decay applies
/// only where `decay_mask` is set.
class AdamW {
 public:
  AdamW(std::size_t n_params, AdamWConfig config, std::vector<std::uint8_t> decay_mask = {});

  void step(std::span<double> params, std::span<const double> grads, double lr);
  std::size_t steps_taken() const noexcept { return t_; }
  const AdamWConfig& config() const noexcept { return config_; }

 private:
  AdamWConfig config_;
  std::vector<std::uint8_t> decay_mask_;
  std::vector<double> m_;
  std::vector<double> v_;
  std::size_t t_ = 0;
};

/// Per-parameter decay flags built from the model's tensor layout.
std::vector<std::uint8_t> decay_mask(const GptModel& model);

/// Linear warmup from 0 to peak over `warmup_steps`, then linear decay to 0
/// at `total_steps`.
class LinearSchedule {
 public:
  LinearSchedule(double peak_lr, std::size_t warmup_steps, std::size_t total_steps);

  double at(std::size_t step) const noexcept;
  std::size_t warmup_steps() const noexcept { return warmup_; }
  std::size_t total_steps() const noexcept { return total_; }

 private:
  double peak_;
  std::size_t warmup_;
  std::size_t total_;
};

/// Scales `grads` in place so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
double clip_grad_norm(std::span<double> grads, double max_norm);

}  // namespace empathrl
