#include "creat/train/optimizer.hpp"

#include <cmath>

#include "creat/common.hpp"

namespace creat::train {

AdamW::AdamW(std::vector<ad::Tensor> params, AdamWConfig config)
    : params_(std::move(params)), config_(config) {
  for (const auto& p : params_) {
    if (!p.requires_grad()) {
      throw ConfigError("AdamW: parameter " + p.describe() + " does not require grad");
    }
    m_.emplace_back(p.numel(), 0.0);
    v_.emplace_back(p.numel(), 0.0);
  }
}

void AdamW::step(double lr) {
  ++step_;
  const double t = static_cast<double>(step_);
  const double correction1 = 1.0 - std::pow(config_.beta1, t);
  const double correction2 = 1.0 - std::pow(config_.beta2, t);
  for (std::size_t i = 0; i < params_.size(); ++i) {
    ad::Tensor& p = params_[i];
    auto values = p.mutable_data();
    const auto g = p.grad();
    auto& m = m_[i];
    auto& v = v_[i];
    const bool decay = config_.weight_decay != 0.0 && p.rank() >= 2;
    for (std::size_t j = 0; j < values.size(); ++j) {
      m[j] = config_.beta1 * m[j] + (1.0 - config_.beta1) * g[j];
      v[j] = config_.beta2 * v[j] + (1.0 - config_.beta2) * g[j] * g[j];
      if (decay) values[j] *= 1.0 - lr * config_.weight_decay;
      const double m_hat = m[j] / correction1;
      const double v_hat = v[j] / correction2;
      values[j] -= lr * m_hat / (std::sqrt(v_hat) + config_.eps);
    }
  }
}

double lr_multiplier(std::size_t step, std::size_t max_steps, double warmup_proportion) {
  if (max_steps == 0) throw ConfigError("lr_multiplier: max_steps must be positive");
  const auto warmup = static_cast<std::size_t>(
      std::floor(warmup_proportion * static_cast<double>(max_steps)));
  if (step < warmup) {
    return static_cast<double>(step + 1) / static_cast<double>(warmup);
  }
  if (step >= max_steps) return 0.0;
  return static_cast<double>(max_steps - step) / static_cast<double>(max_steps - warmup);
}

double global_grad_norm(const std::vector<ad::Tensor>& params) {
  double sq = 0.0;
  for (const auto& p : params) {
    for (double g : p.grad()) sq += g * g;
  }
  return std::sqrt(sq);
}

double clip_gradients(const std::vector<ad::Tensor>& params, double max_norm) {
  const double norm = global_grad_norm(params);
  if (max_norm <= 0.0 || norm <= max_norm) return norm;
  const double factor = max_norm / (norm + 1e-6);
  for (auto p : params) {
    for (double& g : p.mutable_grad()) g *= factor;
  }
  return norm;
}

}  // namespace creat::train
