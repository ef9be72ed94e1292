#include "creat/train/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include "creat/common.hpp"

namespace creat::train {

namespace {

double batch_mean(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

std::vector<std::vector<double>> snapshot(const std::vector<ad::Tensor>& tensors) {
  std::vector<std::vector<double>> out;
  out.reserve(tensors.size());
  for (const auto& t : tensors) out.emplace_back(t.data().begin(), t.data().end());
  return out;
}

bool same_values(const std::vector<ad::Tensor>& tensors,
                 const std::vector<std::vector<double>>& saved) {
  for (std::size_t i = 0; i < tensors.size(); ++i) {
    const auto d = tensors[i].data();
    if (!std::equal(d.begin(), d.end(), saved[i].begin(), saved[i].end())) return false;
  }
  return true;
}

std::string abort_message(std::size_t step, double lb, double la, double norm,
                          const std::string& reason) {
  std::ostringstream out;
  out.precision(17);
  out << "training aborted at step " << step << ": " << reason << " (benign_loss=" << lb
      << ", adv_loss=" << la << ", delta_norm=" << norm << ")";
  return out.str();
}

}  // namespace

void TrainConfig::validate() const {
  if (!(learning_rate > 0.0)) throw ConfigError("train.learning_rate must be > 0");
  if (!(lambda >= 0.0 && lambda <= 1.0)) throw ConfigError("train.lambda must be in [0, 1]");
  if (batch_size == 0) throw ConfigError("train.batch_size must be positive");
  if (max_steps == 0) throw ConfigError("train.max_steps must be positive");
  if (!(warmup_proportion >= 0.0 && warmup_proportion < 1.0)) {
    throw ConfigError("train.warmup_proportion must be in [0, 1)");
  }
  if (!(weight_decay >= 0.0)) throw ConfigError("train.weight_decay must be >= 0");
  if (!std::isfinite(gradient_clip)) throw ConfigError("train.gradient_clip must be finite");
  attack.validate();
  task.validate();
}

model::DecoderConfig decoder_for(const tasks::TaskSpec& task) {
  if (task.kind == tasks::TaskKind::sequence_classification) {
    return model::DecoderConfig{model::DecoderKind::classifier, task.num_classes};
  }
  return model::DecoderConfig{model::DecoderKind::mlm, 2};
}

void check_compatible(const model::EncoderConfig& encoder, const tasks::TaskSpec& task) {
  if (encoder.vocab_size != task.vocab_size) {
    throw ConfigError("model.vocab_size (" + std::to_string(encoder.vocab_size) +
                      ") must equal task.vocab_size (" + std::to_string(task.vocab_size) + ")");
  }
  if (encoder.max_seq_len < task.seq_len) {
    throw ConfigError("model.max_seq_len (" + std::to_string(encoder.max_seq_len) +
                      ") is shorter than task.seq_len (" + std::to_string(task.seq_len) + ")");
  }
}

TrainingAborted::TrainingAborted(std::size_t step, double benign_loss, double adv_loss,
                                 double delta_norm, const std::string& reason)
    : std::runtime_error(abort_message(step, benign_loss, adv_loss, delta_norm, reason)),
      step_(step) {}

metrics::MetricsRecord training_step(const model::Batch& batch, model::ModelParams& params,
                                     AdamW& optimizer, const TrainConfig& config,
                                     std::size_t step, StepDiagnostics* diagnostics) {
  const model::EncoderConfig& enc = params.config.encoder;
  const std::uint64_t dropout_seed = derive_seed(config.seed, seed_stream::kDropout, step);
  const auto train_dropout = model::DropoutMode::seeded(dropout_seed);
  // With dropout active the attack anchor and the metrics need their own
  // dropout-free passes; otherwise the training passes already are that.
  const bool probes = enc.dropout_rate > 0.0;

  metrics::MetricsRecord record;
  record.step = step + 1;
  record.mode = attack::to_string(config.attack.mode);

  StepDiagnostics local;
  StepDiagnostics& diag = diagnostics ? *diagnostics : local;
  diag = StepDiagnostics{};
  model::ForwardCounter train_counter;
  model::ForwardCounter probe_counter;
  const std::vector<ad::Tensor> theta = params.all();

  double lb = std::nan("");
  double la = std::nan("");
  attack::Perturbation delta;
  try {
    ad::Graph graph;
    ad::Graph probe(false);

    // Benign forward.
    ad::Tensor x = model::embed(graph, params, batch);
    model::EncodeOutput benign =
        model::encode(graph, x, batch.mask, params, train_dropout, &train_counter);
    ad::Tensor loss_b = model::task_loss(graph, benign, params, batch);
    lb = loss_b.item();

    model::EncodeOutput anchor_probe;
    if (probes) {
      anchor_probe = model::encode(probe, x, batch.mask, params,
                                   model::DropoutMode::disabled(), &probe_counter);
    }
    const model::EncodeOutput& anchor = probes ? anchor_probe : benign;

    std::vector<std::vector<double>> before;
    if (diagnostics) before = snapshot(theta);

    // Inner maximization.
    attack::AttackProblem problem{params, batch, x, anchor, &train_counter};
    attack::AttackTrace trace;
    delta = attack::run_attack(problem, config.attack,
                               derive_seed(config.seed, seed_stream::kPerturbation, step),
                               &trace);
    diag.attack_backward_passes = trace.backward_passes;

    // Adversarial forward with the same dropout masks as the benign one.
    ad::Tensor x_adv = graph.add(x, delta.delta);
    model::EncodeOutput adv =
        model::encode(graph, x_adv, batch.mask, params, train_dropout, &train_counter);
    ad::Tensor loss_a = model::task_loss(graph, adv, params, batch);
    la = loss_a.item();

    if (diagnostics) diag.theta_unchanged_during_attack = same_values(theta, before);

    // Mode none is standard training on the benign loss, whatever lambda is.
    ad::Tensor total;
    if (config.lambda == 1.0 || config.attack.mode == attack::AttackMode::none) {
      total = loss_b;
    } else if (config.lambda == 0.0) {
      total = loss_a;
    } else {
      total = graph.add(graph.scale(loss_b, config.lambda),
                        graph.scale(loss_a, 1.0 - config.lambda));
    }
    diag.total_loss = total.item();
    if (!std::isfinite(diag.total_loss)) {
      throw TrainingAborted(step + 1, lb, la, delta.max_norm(), "non-finite total loss");
    }

    model::EncodeOutput adv_probe;
    if (probes) {
      adv_probe = model::encode(probe, x_adv, batch.mask, params,
                                model::DropoutMode::disabled(), &probe_counter);
    }
    const model::EncodeOutput& adv_view = probes ? adv_probe : adv;
    const auto sims = metrics::token_similarity(anchor.final_hidden, adv_view.final_hidden,
                                                batch.mask);
    record.benign_loss = lb;
    record.adv_loss = la;
    record.sim_lb = batch_mean(sims.lower_bound);
    record.sim_mean = batch_mean(sims.mean);
    record.layer_sim = metrics::layerwise_hidden_similarity(anchor, adv_view);
    record.attn_kl = metrics::attention_divergence(anchor, adv_view);
    diag.degenerate_similarity_tokens = sims.degenerate_tokens;

    params.zero_grad();
    graph.backward(total, theta);
  } catch (const NumericError& e) {
    throw TrainingAborted(step + 1, lb, la, delta.delta.defined() ? delta.max_norm() : 0.0,
                          e.what());
  }

  diag.delta_example_norms = delta.example_norms();
  record.delta_norm = delta.max_norm();
  diag.padding_violations = delta.padding_violations();
  diag.delta = std::move(delta);

  diag.grad_norm_before_clip = clip_gradients(theta, config.gradient_clip);
  diag.grad_norm_after_clip = global_grad_norm(theta);
  diag.learning_rate = config.learning_rate *
                       lr_multiplier(step, config.max_steps, config.warmup_proportion);
  optimizer.step(diag.learning_rate);

  diag.forward_passes = train_counter.count;
  diag.probe_passes = probe_counter.count;
  return record;
}

EvalResult evaluate(const model::ModelParams& params, std::span<const tasks::Example> examples,
                    std::size_t batch_size) {
  if (examples.empty()) throw InputError("evaluate: empty evaluation set");
  if (batch_size == 0) throw ConfigError("evaluate: batch_size must be positive");
  const bool classifier = params.config.decoder.kind == model::DecoderKind::classifier;
  EvalResult result;
  double loss_sum = 0.0;
  std::size_t correct = 0;
  for (std::size_t start = 0; start < examples.size(); start += batch_size) {
    const std::size_t end = std::min(examples.size(), start + batch_size);
    std::vector<std::size_t> idx(end - start);
    std::iota(idx.begin(), idx.end(), start);
    const model::Batch batch = tasks::make_batch(examples, idx);
    ad::Graph graph(false);
    ad::Tensor x = model::embed(graph, params, batch);
    model::EncodeOutput out =
        model::encode(graph, x, batch.mask, params, model::DropoutMode::disabled());
    ad::Tensor logits;
    std::vector<std::size_t> labels;
    if (classifier) {
      logits = model::classify(graph, out, params);
      labels = batch.labels;
    } else {
      if (batch.targets.empty()) continue;
      logits = model::mlm_head(graph, out, params, batch.targets);
      for (const auto& t : batch.targets) labels.push_back(t.token);
    }
    ad::Tensor losses = graph.cross_entropy(logits, labels);
    const std::size_t classes = logits.dim(1);
    for (std::size_t r = 0; r < labels.size(); ++r) {
      const auto row = logits.data().subspan(r * classes, classes);
      const auto best = static_cast<std::size_t>(
          std::max_element(row.begin(), row.end()) - row.begin());
      correct += best == labels[r];
      loss_sum += losses.data()[r];
    }
    result.count += labels.size();
  }
  if (result.count == 0) throw InputError("evaluate: no prediction sites");
  result.accuracy = static_cast<double>(correct) / static_cast<double>(result.count);
  result.loss = loss_sum / static_cast<double>(result.count);
  return result;
}

std::vector<std::vector<std::size_t>> epoch_batches(std::size_t num_examples,
                                                    std::size_t batch_size,
                                                    std::uint64_t seed, std::size_t epoch) {
  if (num_examples == 0) throw InputError("no training examples");
  const std::size_t b = std::min(batch_size, num_examples);
  std::vector<std::size_t> order(num_examples);
  std::iota(order.begin(), order.end(), 0);
  Rng rng(derive_seed(seed, seed_stream::kBatchOrder, epoch));
  std::shuffle(order.begin(), order.end(), rng);
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t start = 0; start + b <= num_examples; start += b) {
    out.emplace_back(order.begin() + start, order.begin() + start + b);
  }
  return out;
}

TrainResult train(const TrainConfig& config, const model::EncoderConfig& encoder,
                  const TrainHooks& hooks, const model::ModelParams* initial) {
  config.validate();
  return train_on(config, encoder, tasks::generate(config.task), hooks, initial);
}

TrainResult train_on(const TrainConfig& config, const model::EncoderConfig& encoder,
                     const tasks::Dataset& data, const TrainHooks& hooks,
                     const model::ModelParams* initial) {
  config.validate();
  encoder.validate();
  check_compatible(encoder, config.task);
  const model::ModelConfig model_config{encoder, decoder_for(config.task)};

  TrainResult result;
  if (initial) {
    if (initial->config.encoder != encoder) {
      throw ConfigError("initial checkpoint encoder does not match model config");
    }
    result.params = initial->clone();
    if (initial->config.decoder != model_config.decoder) {
      model::reinit_decoder(result.params, model_config.decoder, config.seed);
    }
  } else {
    result.params = model::init_params(model_config, config.seed);
  }

  AdamW optimizer(result.params.all(),
                  AdamWConfig{0.9, 0.999, 1e-8, config.weight_decay});
  std::size_t degenerate = 0;
  std::vector<std::vector<std::size_t>> batches;
  std::size_t epoch = 0;
  std::size_t cursor = 0;
  for (std::size_t step = 0; step < config.max_steps; ++step) {
    if (cursor == batches.size()) {
      batches = epoch_batches(data.train.size(), config.batch_size, config.seed, epoch++);
      cursor = 0;
    }
    const model::Batch batch = tasks::make_batch(data.train, batches[cursor++]);
    StepDiagnostics diag;
    auto record = training_step(batch, result.params, optimizer, config, step, &diag);
    degenerate += diag.degenerate_similarity_tokens;
    if (hooks.on_step) hooks.on_step(record, diag, result.params);
    result.records.push_back(std::move(record));
  }

  result.summary = metrics::summarize(result.records, config.max_steps);
  result.summary.degenerate_similarity_tokens = degenerate;
  const EvalResult train_eval = evaluate(result.params, data.train);
  const EvalResult held_out = evaluate(result.params, data.eval);
  result.summary.train_accuracy = train_eval.accuracy;
  result.summary.eval_accuracy = held_out.accuracy;
  result.summary.eval_loss = held_out.loss;
  return result;
}

}  // namespace creat::train
