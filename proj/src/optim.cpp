#include "empathrl/optim.hpp"

#include <cmath>

#include "empathrl/error.hpp"

namespace empathrl {

AdamW::AdamW(std::size_t n_params, AdamWConfig config, std::vector<std::uint8_t> decay_mask)
    : config_(config), decay_mask_(std::move(decay_mask)), m_(n_params, 0.0), v_(n_params, 0.0) {
  if (!decay_mask_.empty() && decay_mask_.size() != n_params) {
    throw InvalidArgument("decay mask size does not match parameter count");
  }
}

void AdamW::step(std::span<double> params, std::span<const double> grads, double lr) {
  if (params.size() != m_.size() || grads.size() != m_.size()) {
    throw InvalidArgument("optimizer state does not match parameter count");
  }
  ++t_;
  const double b1 = config_.beta1;
  const double b2 = config_.beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(t_));
  const bool all_decay = decay_mask_.empty();
  for (std::size_t i = 0; i < params.size(); ++i) {
    const double g = grads[i];
    m_[i] = b1 * m_[i] + (1.0 - b1) * g;
    v_[i] = b2 * v_[i] + (1.0 - b2) * g * g;
    const double mhat = m_[i] / c1;
    const double vhat = v_[i] / c2;
    double update = mhat / (std::sqrt(vhat) + config_.eps);
    if (config_.weight_decay != 0.0 && (all_decay || decay_mask_[i] != 0)) {
      update += config_.weight_decay * params[i];
    }
    params[i] -= lr * update;
  }
}

std::vector<std::uint8_t> decay_mask(const GptModel& model) {
  std::vector<std::uint8_t> mask(model.num_parameters(), 0);
  for (const auto& t : model.layout()) {
    if (!t.decay) continue;
    std::fill(mask.begin() + static_cast<std::ptrdiff_t>(t.offset),
              mask.begin() + static_cast<std::ptrdiff_t>(t.offset + t.size), 1);
  }
  return mask;
}

LinearSchedule::LinearSchedule(double peak_lr, std::size_t warmup_steps, std::size_t total_steps)
    : peak_(peak_lr), warmup_(warmup_steps), total_(total_steps) {
  if (total_steps == 0) throw InvalidArgument("schedule needs at least one step");
  if (warmup_steps > total_steps) throw InvalidArgument("warmup longer than the schedule");
}

double LinearSchedule::at(std::size_t step) const noexcept {
  if (step < warmup_) {
    return peak_ * static_cast<double>(step) / static_cast<double>(warmup_);
  }
  if (step >= total_) return 0.0;
  const std::size_t decay_steps = total_ - warmup_;
  return peak_ * static_cast<double>(total_ - step) / static_cast<double>(decay_steps);
}

double clip_grad_norm(std::span<double> grads, double max_norm) {
  double sq = 0.0;
  for (double g : grads) sq += g * g;
  const double norm = std::sqrt(sq);
  if (max_norm > 0.0 && norm > max_norm) {
    const double scale = max_norm / (norm + 1e-6);
    for (double& g : grads) g *= scale;
  }
  return norm;
}

}  // namespace empathrl
