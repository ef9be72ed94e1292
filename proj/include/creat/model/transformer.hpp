#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "creat/autodiff/graph.hpp"
#include "creat/model/batch.hpp"
#include "creat/model/config.hpp"

namespace creat::model {

struct Linear {
  ad::Tensor weight;  // [in, out]
  ad::Tensor bias;    // [out]
};

struct LayerParams {
  Linear query;
  Linear key;
  Linear value;
  Linear output;
  ad::Tensor attention_norm_gain;
  ad::Tensor attention_norm_bias;
  Linear ffn_in;
  Linear ffn_out;
  ad::Tensor ffn_norm_gain;
  ad::Tensor ffn_norm_bias;
};

// All learnable weights: encoder (embeddings + layers) and the task decoder.
struct ModelParams {
  ModelConfig config;
  ad::Tensor token_embedding;     // [vocab, d]
  ad::Tensor position_embedding;  // [max_seq_len, d]
  std::vector<LayerParams> layers;
  Linear decoder;                 // [d, classes or vocab]

  // Every tensor in a fixed order; names are stable checkpoint keys.
  std::vector<ad::Tensor> all() const;
  std::vector<ad::Tensor> encoder_tensors() const;
  std::vector<ad::Tensor> decoder_tensors() const;
  // Deep copy; gradients are re-allocated as zeros.
  ModelParams clone() const;
  void zero_grad();
};

// normal(0, 0.02) weight matrices and embeddings, zero biases, unit
// layer-norm gains. Every tensor requires grad.
ModelParams init_params(const ModelConfig& config, std::uint64_t seed);

// Fresh decoder for `decoder`; encoder tensors are left untouched.
void reinit_decoder(ModelParams& params, const DecoderConfig& decoder,
                    std::uint64_t seed);

class DropoutMode {
 public:
  static DropoutMode disabled() { return DropoutMode(false, 0); }
  static DropoutMode seeded(std::uint64_t mask_seed) {
    return DropoutMode(true, mask_seed);
  }
  bool enabled() const { return enabled_; }
  std::uint64_t seed() const { return seed_; }

 private:
  DropoutMode(bool enabled, std::uint64_t seed) : enabled_(enabled), seed_(seed) {}
  bool enabled_;
  std::uint64_t seed_;
};

struct EncodeOutput {
  std::size_t batch = 0;
  std::size_t seq_len = 0;
  ad::Tensor final_hidden;             // [batch, seq, d]
  std::vector<ad::Tensor> hidden;      // num_layers + 1 entries, [0] is the input
  std::vector<ad::Tensor> attention;   // num_layers entries, [batch, heads, seq, seq]
  std::vector<std::uint8_t> mask;      // [batch, seq]
};

// Counts encoder forward passes; owned by whoever wants the instrumentation.
struct ForwardCounter {
  std::size_t count = 0;
};

// Token + position embeddings, [batch, seq, d]. This is the tensor the input
// perturbation is added to.
ad::Tensor embed(ad::Graph& graph, const ModelParams& params, const Batch& batch);

// Post-layer-norm encoder stack over already embedded input x [batch, seq, d].
// Padding keys get zero attention weight.
EncodeOutput encode(ad::Graph& graph, const ad::Tensor& x,
                    std::span<const std::uint8_t> mask, const ModelParams& params,
                    DropoutMode dropout, ForwardCounter* counter = nullptr);

// First-token pooling followed by the linear decoder -> [batch, classes].
ad::Tensor classify(ad::Graph& graph, const EncodeOutput& encoded,
                    const ModelParams& params);

// Vocabulary logits at each masked site -> [targets, vocab].
ad::Tensor mlm_head(ad::Graph& graph, const EncodeOutput& encoded,
                    const ModelParams& params,
                    std::span<const MaskedTarget> targets);

// Mean cross-entropy for the decoder's task (per example for classification,
// per masked site for the masked LM). Scalar.
ad::Tensor task_loss(ad::Graph& graph, const EncodeOutput& encoded,
                     const ModelParams& params, const Batch& batch);

}  // namespace creat::model
