#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

#include "creat/autodiff/graph.hpp"
#include "creat/model/transformer.hpp"
#include "creat/tasks/tasks.hpp"

namespace testing {

inline creat::ad::Tensor randn(creat::ad::Shape shape, std::mt19937_64& rng,
                               bool requires_grad = false, double scale = 1.0) {
  std::normal_distribution<double> dist(0.0, scale);
  std::vector<double> v(creat::ad::shape_numel(shape));
  for (double& x : v) x = dist(rng);
  return creat::ad::Tensor::from(std::move(shape), std::move(v), requires_grad);
}

inline std::vector<double> values(const creat::ad::Tensor& t) {
  return {t.data().begin(), t.data().end()};
}

inline std::vector<double> grads(const creat::ad::Tensor& t) {
  return {t.grad().begin(), t.grad().end()};
}

inline double max_abs_diff(std::span<const double> a, std::span<const double> b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

inline creat::model::ModelConfig small_model(std::size_t layers = 2, std::size_t width = 8,
                                             std::size_t heads = 2, double dropout = 0.0) {
  creat::model::ModelConfig c;
  c.encoder.num_layers = layers;
  c.encoder.hidden_size = width;
  c.encoder.num_heads = heads;
  c.encoder.intermediate_size = 2 * width;
  c.encoder.vocab_size = 16;
  c.encoder.max_seq_len = 8;
  c.encoder.dropout_rate = dropout;
  c.decoder.num_classes = 3;
  return c;
}

// Larger than init scale so attention is not uniform and gradients are generic.
inline void scale_params(creat::model::ModelParams& p, double factor, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> dist(0.0, factor);
  for (auto& t : p.all()) {
    if (t.rank() < 2) continue;
    for (double& v : t.mutable_data()) v = dist(rng);
  }
}

// Two padded sequences; the second has two padding slots.
inline creat::model::Batch small_batch(std::size_t seq = 6, std::size_t vocab = 16) {
  creat::model::Batch b;
  b.size = 2;
  b.seq_len = seq;
  for (std::size_t s = 0; s < seq; ++s) {
    b.ids.push_back(1 + (3 * s + 2) % (vocab - 1));
    b.mask.push_back(1);
  }
  for (std::size_t s = 0; s < seq; ++s) {
    const bool real = s + 2 < seq;
    b.ids.push_back(real ? 1 + (5 * s + 1) % (vocab - 1) : 0);
    b.mask.push_back(real ? 1 : 0);
  }
  b.labels = {1, 2};
  return b;
}

inline creat::tasks::TaskSpec tiny_task(std::size_t train = 64, std::size_t eval = 32) {
  creat::tasks::TaskSpec t;
  t.vocab_size = 16;
  t.seq_len = 8;
  t.num_classes = 2;
  t.num_train = train;
  t.num_eval = eval;
  t.pattern_length = 3;
  t.min_length = 6;
  t.generator_seed = 11;
  return t;
}

}  // namespace testing
