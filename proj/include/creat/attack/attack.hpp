#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "creat/autodiff/graph.hpp"
#include "creat/model/transformer.hpp"

namespace creat::attack {

enum class AttackMode { none, RPT, AT, CreAT, CreAT_minus };

std::string to_string(AttackMode mode);
AttackMode attack_mode_from_string(const std::string& text);

struct AttackConfig {
  AttackMode mode = AttackMode::AT;
  double ascent_step_size = 1e-1;   // alpha
  double decision_boundary = 1e-1;  // epsilon, per-example Frobenius radius
  std::size_t ascent_steps = 1;     // k
  double temperature = 1.0;         // tau, CreAT only

  void validate() const;
  // Ascent iterations actually run: 0 for RPT and none.
  std::size_t effective_steps() const;
  bool operator==(const AttackConfig&) const = default;
};

// Additive perturbation on the embedded batch, [batch, seq, d]. Entries at
// padding positions are exactly zero.
struct Perturbation {
  ad::Tensor delta;
  std::vector<std::uint8_t> mask;  // [batch, seq]

  std::size_t batch() const { return delta.dim(0); }
  std::size_t seq_len() const { return delta.dim(1); }
  std::size_t width() const { return delta.dim(2); }
  std::vector<double> example_norms() const;
  double max_norm() const;
  // Number of nonzero entries at padding positions (always 0 for valid values).
  std::size_t padding_violations() const;

  static Perturbation zeros(std::size_t batch, std::size_t seq, std::size_t width,
                            std::span<const std::uint8_t> mask);
};

// Uniform entries in +-epsilon/sqrt(seq*d), projected, padding zeroed.
Perturbation init_perturbation(std::size_t batch, std::size_t seq, std::size_t width,
                               std::span<const std::uint8_t> mask, double epsilon,
                               std::uint64_t seed);

// Scales each example with norm > epsilon back onto the ball.
Perturbation project(Perturbation delta, double epsilon);

struct PgdStepInfo {
  std::size_t zero_gradient_examples = 0;
};

// delta + alpha * g / (|g|_F + 1e-12) per example, projected, padding re-zeroed.
Perturbation pgd_step(const Perturbation& previous, std::span<const double> gradient,
                      double alpha, double epsilon, PgdStepInfo* info = nullptr);

// Everything the inner maximization needs that stays fixed within one step.
struct AttackProblem {
  const model::ModelParams& params;
  const model::Batch& batch;
  ad::Tensor embedded;                // benign x, treated as a constant
  const model::EncodeOutput& anchor;  // benign forward, dropout disabled
  model::ForwardCounter* counter = nullptr;
};

// Mean over examples of the per-example masked mean of per-token cosine
// similarity between two [batch, seq, d] hidden-state tensors. Scalar.
ad::Tensor masked_mean_similarity(ad::Graph& graph, const ad::Tensor& benign,
                                  const ad::Tensor& perturbed,
                                  std::span<const std::uint8_t> mask);

// Scalar objective maximized by the attack, differentiable w.r.t. `delta`.
//   AT:          L(x + delta)
//   CreAT:       L(x + delta) - tau * S(h(x), h(x + delta))
//   CreAT_minus: -S(h(x), h(x + delta))
ad::Tensor attack_objective(ad::Graph& graph, const AttackProblem& problem,
                            const ad::Tensor& delta, const AttackConfig& config);

struct AttackTrace {
  std::size_t forward_passes = 0;
  std::size_t backward_passes = 0;
  std::size_t zero_gradient_examples = 0;
  std::vector<double> objective_values;  // value at delta_{j-1}, j = 1..k
};

// Init, then k rounds of {adversarial forward, backward w.r.t. delta only,
// pgd_step}. Parameter gradients are never touched.
Perturbation run_attack(const AttackProblem& problem, const AttackConfig& config,
                        std::uint64_t seed, AttackTrace* trace = nullptr);

}  // namespace creat::attack
