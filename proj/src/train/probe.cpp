#include "creat/train/probe.hpp"

#include <numeric>

#include "creat/common.hpp"
#include "creat/metrics/metrics.hpp"

namespace creat::train {

ProbeResult probe(const model::ModelParams& params, std::span<const tasks::Example> examples,
                  const attack::AttackConfig& config, std::size_t batch_size,
                  std::uint64_t seed) {
  if (examples.empty()) throw InputError("probe: no examples");
  if (batch_size == 0) throw ConfigError("probe: batch_size must be positive");
  config.validate();
  const std::size_t layers = params.config.encoder.num_layers;
  ProbeResult out;
  out.mode = config.mode;
  out.label = attack::to_string(config.mode);
  out.layer_sim.assign(layers + 1, 0.0);
  out.attn_kl.assign(layers, 0.0);

  std::size_t batch_index = 0;
  for (std::size_t start = 0; start < examples.size(); start += batch_size, ++batch_index) {
    const std::size_t end = std::min(examples.size(), start + batch_size);
    std::vector<std::size_t> idx(end - start);
    std::iota(idx.begin(), idx.end(), start);
    const model::Batch batch = tasks::make_batch(examples, idx);

    ad::Graph graph(false);
    ad::Tensor x = model::embed(graph, params, batch);
    const model::EncodeOutput benign =
        model::encode(graph, x, batch.mask, params, model::DropoutMode::disabled());
    attack::AttackProblem problem{params, batch, x, benign, nullptr};
    const attack::Perturbation delta = attack::run_attack(
        problem, config, derive_seed(seed, seed_stream::kPerturbation, batch_index));
    const model::EncodeOutput adv =
        model::encode(graph, graph.add(x, delta.delta), batch.mask, params,
                      model::DropoutMode::disabled());

    const auto sims = metrics::token_similarity(benign.final_hidden, adv.final_hidden,
                                                batch.mask);
    const auto n = static_cast<double>(batch.size);
    for (std::size_t b = 0; b < batch.size; ++b) {
      out.sim_lb += sims.lower_bound[b];
      out.sim_mean += sims.mean[b];
    }
    const auto layer_sim = metrics::layerwise_hidden_similarity(benign, adv);
    const auto attn_kl = metrics::attention_divergence(benign, adv);
    for (std::size_t l = 0; l < layer_sim.size(); ++l) out.layer_sim[l] += layer_sim[l] * n;
    for (std::size_t l = 0; l < attn_kl.size(); ++l) out.attn_kl[l] += attn_kl[l] * n;
    out.examples += batch.size;
  }
  const auto total = static_cast<double>(out.examples);
  out.sim_lb /= total;
  out.sim_mean /= total;
  for (double& v : out.layer_sim) v /= total;
  for (double& v : out.attn_kl) v /= total;
  return out;
}

}  // namespace creat::train
