#pragma once

#include <cstddef>
#include <vector>

#include "creat/autodiff/tensor.hpp"

namespace creat::train {

struct AdamWConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;  // decoupled; skipped for rank-1 tensors (biases, gains)
};

// Adaptive moment estimation with decoupled weight decay. One moment pair per
// parameter tensor, in the order the tensors were registered.
class AdamW {
 public:
  AdamW(std::vector<ad::Tensor> params, AdamWConfig config);

  // Applies one update with learning rate lr using the current grad fields.
  void step(double lr);

  std::size_t steps_taken() const { return step_; }
  const std::vector<std::vector<double>>& first_moments() const { return m_; }
  const std::vector<std::vector<double>>& second_moments() const { return v_; }
  const std::vector<ad::Tensor>& params() const { return params_; }

 private:
  std::vector<ad::Tensor> params_;
  AdamWConfig config_;
  std::vector<std::vector<double>> m_;
  std::vector<std::vector<double>> v_;
  std::size_t step_ = 0;
};

// Linear warmup over floor(warmup_proportion * max_steps) steps, then linear
// decay towards zero at max_steps. step is 0-based.
double lr_multiplier(std::size_t step, std::size_t max_steps, double warmup_proportion);

// Global L2 norm over every grad field.
double global_grad_norm(const std::vector<ad::Tensor>& params);

// Rescales all grads by max_norm / (norm + 1e-6) when the global norm exceeds
// max_norm. max_norm <= 0 disables clipping. Returns the pre-clip norm.
double clip_gradients(const std::vector<ad::Tensor>& params, double max_norm);

}  // namespace creat::train
