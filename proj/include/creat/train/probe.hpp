#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "creat/attack/attack.hpp"
#include "creat/model/transformer.hpp"
#include "creat/tasks/tasks.hpp"

namespace creat::train {

// Layer-wise response of a fixed model to one attack configuration,
// averaged over examples.
struct ProbeResult {
  std::string label;
  attack::AttackMode mode = attack::AttackMode::none;
  std::size_t examples = 0;
  double sim_lb = 0.0;
  double sim_mean = 0.0;
  std::vector<double> layer_sim;  // num_layers + 1
  std::vector<double> attn_kl;    // num_layers
};

// Attacks each batch of `examples` without updating the model. Both forwards
// run with dropout disabled. Attack seeds derive from `seed` and the batch index.
ProbeResult probe(const model::ModelParams& params, std::span<const tasks::Example> examples,
                  const attack::AttackConfig& config, std::size_t batch_size,
                  std::uint64_t seed);

}  // namespace creat::train
