#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "creat/attack/attack.hpp"
#include "creat/metrics/metrics.hpp"
#include "creat/model/transformer.hpp"
#include "creat/tasks/tasks.hpp"
#include "creat/train/optimizer.hpp"

namespace creat::train {

struct TrainConfig {
  double learning_rate = 1e-3;
  double lambda = 0.5;          // weight of the benign loss
  std::size_t batch_size = 16;
  std::size_t max_steps = 2000;
  double warmup_proportion = 0.06;
  double weight_decay = 0.01;
  double gradient_clip = 1.0;   // <= 0 disables clipping
  std::uint64_t seed = 0;
  attack::AttackConfig attack;
  tasks::TaskSpec task;

  void validate() const;
  bool operator==(const TrainConfig&) const = default;
};

// Decoder matching the task: a classifier head or a vocabulary head.
model::DecoderConfig decoder_for(const tasks::TaskSpec& task);
// Checks that the encoder can read the task's sequences.
void check_compatible(const model::EncoderConfig& encoder, const tasks::TaskSpec& task);

// Thrown when a step produces a non-finite loss or activation. The message
// carries the step, both losses and the perturbation norm.
class TrainingAborted : public std::runtime_error {
 public:
  TrainingAborted(std::size_t step, double benign_loss, double adv_loss,
                  double delta_norm, const std::string& reason);
  std::size_t step() const { return step_; }

 private:
  std::size_t step_;
};

// Instrumentation of one training step.
struct StepDiagnostics {
  std::size_t forward_passes = 0;   // encoder passes on the training path (k + 2)
  std::size_t probe_passes = 0;     // extra dropout-free passes for anchor and metrics
  std::size_t attack_backward_passes = 0;
  double total_loss = 0.0;
  double grad_norm_before_clip = 0.0;
  double grad_norm_after_clip = 0.0;
  double learning_rate = 0.0;
  std::size_t padding_violations = 0;
  std::vector<double> delta_example_norms;
  attack::Perturbation delta;       // delta* used in the adversarial forward
  bool theta_unchanged_during_attack = true;
  std::size_t degenerate_similarity_tokens = 0;
};

// One training iteration: benign forward, attack, adversarial forward,
// lambda-mixed loss, backward, clipping and an optimizer update. `step` is the
// 0-based step index used for seeding and the schedule.
metrics::MetricsRecord training_step(const model::Batch& batch, model::ModelParams& params,
                                     AdamW& optimizer, const TrainConfig& config,
                                     std::size_t step, StepDiagnostics* diagnostics = nullptr);

struct EvalResult {
  double accuracy = 0.0;
  double loss = 0.0;
  std::size_t count = 0;  // examples (classification) or masked sites (MLM)
};

// Dropout disabled, no recording. Empty input throws InputError.
EvalResult evaluate(const model::ModelParams& params, std::span<const tasks::Example> examples,
                    std::size_t batch_size = 64);

struct TrainHooks {
  // Called after each step with the record and its instrumentation.
  std::function<void(const metrics::MetricsRecord&, const StepDiagnostics&,
                     const model::ModelParams&)>
      on_step;
};

struct TrainResult {
  model::ModelParams params;
  std::vector<metrics::MetricsRecord> records;
  metrics::RunSummary summary;
};

// Runs config.max_steps steps over seeded shuffled batches of the generated
// task. With `initial` the encoder starts from those weights; a decoder that
// does not fit the task is re-initialized.
TrainResult train(const TrainConfig& config, const model::EncoderConfig& encoder,
                  const TrainHooks& hooks = {},
                  const model::ModelParams* initial = nullptr);

// Same, on an already generated dataset.
TrainResult train_on(const TrainConfig& config, const model::EncoderConfig& encoder,
                     const tasks::Dataset& data, const TrainHooks& hooks = {},
                     const model::ModelParams* initial = nullptr);

// Batch order for one epoch: a seeded permutation cut into full batches.
std::vector<std::vector<std::size_t>> epoch_batches(std::size_t num_examples,
                                                    std::size_t batch_size,
                                                    std::uint64_t seed, std::size_t epoch);

}  // namespace creat::train
