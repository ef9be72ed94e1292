#include "creat/attack/attack.hpp"

#include <cmath>

#include "creat/common.hpp"
#include "creat/log.hpp"

namespace creat::attack {

namespace {

constexpr double kGradientNormEps = 1e-12;

void zero_padding(std::span<double> values, std::span<const std::uint8_t> mask,
                  std::size_t width) {
  for (std::size_t t = 0; t < mask.size(); ++t) {
    if (mask[t] == 0) std::fill_n(values.begin() + t * width, width, 0.0);
  }
}

}  // namespace

std::string to_string(AttackMode mode) {
  switch (mode) {
    case AttackMode::none: return "none";
    case AttackMode::RPT: return "RPT";
    case AttackMode::AT: return "AT";
    case AttackMode::CreAT: return "CreAT";
    case AttackMode::CreAT_minus: return "CreAT_minus";
  }
  return "unknown";
}

AttackMode attack_mode_from_string(const std::string& text) {
  for (AttackMode m : {AttackMode::none, AttackMode::RPT, AttackMode::AT,
                       AttackMode::CreAT, AttackMode::CreAT_minus}) {
    if (text == to_string(m)) return m;
  }
  throw ConfigError("unknown attack mode '" + text +
                    "' (expected none, RPT, AT, CreAT or CreAT_minus)");
}

void AttackConfig::validate() const {
  if (!(ascent_step_size > 0.0)) throw ConfigError("attack.ascent_step_size must be > 0");
  if (!(decision_boundary > 0.0)) throw ConfigError("attack.decision_boundary must be > 0");
  if (!(temperature >= 0.0)) {
    throw ConfigError("attack.temperature must be >= 0, got " + std::to_string(temperature));
  }
}

std::size_t AttackConfig::effective_steps() const {
  if (mode == AttackMode::none || mode == AttackMode::RPT) return 0;
  return ascent_steps;
}

std::vector<double> Perturbation::example_norms() const {
  const std::size_t n = seq_len() * width();
  std::vector<double> norms(batch());
  for (std::size_t b = 0; b < batch(); ++b) {
    norms[b] = ad::kernels::norm(delta.data().subspan(b * n, n));
  }
  return norms;
}

double Perturbation::max_norm() const {
  double m = 0.0;
  for (double v : example_norms()) m = std::max(m, v);
  return m;
}

std::size_t Perturbation::padding_violations() const {
  std::size_t count = 0;
  const std::size_t w = width();
  for (std::size_t t = 0; t < mask.size(); ++t) {
    if (mask[t] != 0) continue;
    for (std::size_t j = 0; j < w; ++j) count += delta.data()[t * w + j] != 0.0;
  }
  return count;
}

Perturbation Perturbation::zeros(std::size_t batch, std::size_t seq, std::size_t width,
                                 std::span<const std::uint8_t> mask) {
  if (mask.size() != batch * seq) {
    throw ConfigError("perturbation mask has " + std::to_string(mask.size()) +
                      " entries for [" + std::to_string(batch) + ", " +
                      std::to_string(seq) + "]");
  }
  return Perturbation{ad::Tensor::zeros({batch, seq, width}),
                      std::vector<std::uint8_t>(mask.begin(), mask.end())};
}

Perturbation init_perturbation(std::size_t batch, std::size_t seq, std::size_t width,
                               std::span<const std::uint8_t> mask, double epsilon,
                               std::uint64_t seed) {
  if (!(epsilon > 0.0)) throw ConfigError("init_perturbation: epsilon must be > 0");
  Perturbation p = Perturbation::zeros(batch, seq, width, mask);
  const double bound = epsilon / std::sqrt(static_cast<double>(seq * width));
  Rng rng(seed);
  auto values = p.delta.mutable_data();
  for (double& v : values) v = (2.0 * uniform01(rng) - 1.0) * bound;
  zero_padding(values, p.mask, width);
  return project(std::move(p), epsilon);
}

Perturbation project(Perturbation delta, double epsilon) {
  const std::size_t n = delta.seq_len() * delta.width();
  auto values = delta.delta.mutable_data();
  zero_padding(values, delta.mask, delta.width());
  const auto norms = delta.example_norms();
  for (std::size_t b = 0; b < norms.size(); ++b) {
    if (norms[b] <= epsilon) continue;
    const double factor = epsilon / norms[b];
    for (std::size_t i = 0; i < n; ++i) values[b * n + i] *= factor;
  }
  return delta;
}

Perturbation pgd_step(const Perturbation& previous, std::span<const double> gradient,
                      double alpha, double epsilon, PgdStepInfo* info) {
  if (gradient.size() != previous.delta.numel()) {
    throw ConfigError("pgd_step: gradient has " + std::to_string(gradient.size()) +
                      " entries for perturbation " + ad::shape_str(previous.delta.shape()));
  }
  Perturbation next{previous.delta.clone(), previous.mask};
  const std::size_t n = previous.seq_len() * previous.width();
  auto values = next.delta.mutable_data();
  std::size_t zero_examples = 0;
  for (std::size_t b = 0; b < previous.batch(); ++b) {
    const auto g = gradient.subspan(b * n, n);
    const double norm = ad::kernels::norm(g);
    if (norm == 0.0) {
      ++zero_examples;
      continue;
    }
    const double step = alpha / (norm + kGradientNormEps);
    for (std::size_t i = 0; i < n; ++i) values[b * n + i] += step * g[i];
  }
  if (zero_examples > 0) {
    log::warn("pgd_step: zero attack gradient for " + std::to_string(zero_examples) +
              " example(s); perturbation left unchanged");
  }
  if (info) info->zero_gradient_examples += zero_examples;
  return project(std::move(next), epsilon);
}

ad::Tensor masked_mean_similarity(ad::Graph& graph, const ad::Tensor& benign,
                                  const ad::Tensor& perturbed,
                                  std::span<const std::uint8_t> mask) {
  const std::size_t batch = benign.dim(0);
  const std::size_t seq = benign.dim(1);
  if (mask.size() != batch * seq) {
    throw ConfigError("masked_mean_similarity: mask does not match " +
                      ad::shape_str(benign.shape()));
  }
  std::vector<double> weights(batch * seq, 0.0);
  for (std::size_t b = 0; b < batch; ++b) {
    std::size_t real = 0;
    for (std::size_t s = 0; s < seq; ++s) real += mask[b * seq + s] != 0;
    if (real == 0) throw InputError("example " + std::to_string(b) + " has no real tokens");
    for (std::size_t s = 0; s < seq; ++s) {
      if (mask[b * seq + s] != 0) {
        weights[b * seq + s] = 1.0 / (static_cast<double>(real) * static_cast<double>(batch));
      }
    }
  }
  ad::Tensor sims = graph.cosine_similarity(benign, perturbed);
  ad::Tensor w = ad::Tensor::from({batch, seq}, std::move(weights));
  return graph.sum_all(graph.mul(sims, w));
}

ad::Tensor attack_objective(ad::Graph& graph, const AttackProblem& problem,
                            const ad::Tensor& delta, const AttackConfig& config) {
  config.validate();
  if (config.mode == AttackMode::none || config.mode == AttackMode::RPT) {
    throw ConfigError("attack_objective: mode " + to_string(config.mode) +
                      " has no ascent objective");
  }
  ad::Tensor x = graph.add(problem.embedded, delta);
  model::EncodeOutput adv = model::encode(graph, x, problem.batch.mask, problem.params,
                                          model::DropoutMode::disabled(), problem.counter);
  if (config.mode == AttackMode::CreAT_minus) {
    return graph.scale(masked_mean_similarity(graph, problem.anchor.final_hidden,
                                              adv.final_hidden, problem.batch.mask),
                       -1.0);
  }
  ad::Tensor risk = model::task_loss(graph, adv, problem.params, problem.batch);
  if (config.mode == AttackMode::AT) return risk;
  ad::Tensor sim = masked_mean_similarity(graph, problem.anchor.final_hidden,
                                          adv.final_hidden, problem.batch.mask);
  return graph.sub(risk, graph.scale(sim, config.temperature));
}

Perturbation run_attack(const AttackProblem& problem, const AttackConfig& config,
                        std::uint64_t seed, AttackTrace* trace) {
  config.validate();
  const auto& x = problem.embedded;
  if (x.rank() != 3) {
    throw ConfigError("run_attack: embedded batch must be [batch, seq, d], got " +
                      ad::shape_str(x.shape()));
  }
  if (config.mode == AttackMode::none) {
    return Perturbation::zeros(x.dim(0), x.dim(1), x.dim(2), problem.batch.mask);
  }
  Perturbation delta = init_perturbation(x.dim(0), x.dim(1), x.dim(2), problem.batch.mask,
                                         config.decision_boundary, seed);
  model::ForwardCounter local;
  AttackProblem counted = problem;
  counted.counter = &local;
  for (std::size_t step = 1; step <= config.effective_steps(); ++step) {
    ad::Graph graph;
    ad::Tensor d = delta.delta.clone();
    d.set_requires_grad(true);
    d.set_name("delta");
    ad::Tensor objective = attack_objective(graph, counted, d, config);
    if (!std::isfinite(objective.item())) {
      throw NumericError("attack objective is non-finite at ascent step " +
                         std::to_string(step));
    }
    graph.backward(objective, {d});
    PgdStepInfo info;
    delta = pgd_step(delta, d.grad(), config.ascent_step_size, config.decision_boundary, &info);
    if (trace) {
      ++trace->backward_passes;
      trace->zero_gradient_examples += info.zero_gradient_examples;
      trace->objective_values.push_back(objective.item());
    }
  }
  if (trace) trace->forward_passes += local.count;
  if (problem.counter) problem.counter->count += local.count;
  return delta;
}

}  // namespace creat::attack
