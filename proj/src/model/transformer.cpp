#include "creat/model/transformer.hpp"

#include <cmath>
#include <random>

#include "creat/common.hpp"

namespace creat::model {

namespace {

using ad::Graph;
using ad::Tensor;

constexpr double kInitStd = 0.02;

Tensor normal_tensor(ad::Shape shape, Rng& rng, std::string name) {
  std::normal_distribution<double> dist(0.0, kInitStd);
  std::vector<double> values(ad::shape_numel(shape));
  for (double& v : values) v = dist(rng);
  Tensor t = Tensor::from(std::move(shape), std::move(values), true);
  t.set_name(std::move(name));
  return t;
}

Tensor constant_tensor(ad::Shape shape, double value, std::string name) {
  Tensor t = Tensor::full(std::move(shape), value, true);
  t.set_name(std::move(name));
  return t;
}

Linear make_linear(std::size_t in, std::size_t out, Rng& rng, const std::string& name) {
  return Linear{normal_tensor({in, out}, rng, name + ".weight"),
                constant_tensor({out}, 0.0, name + ".bias")};
}

Tensor apply_linear(Graph& graph, const Tensor& x, const Linear& linear) {
  return graph.add_bias(graph.matmul(x, linear.weight), linear.bias);
}

void check_finite(const Tensor& t, const std::string& where) {
  for (double v : t.data()) {
    if (!std::isfinite(v)) throw NumericError(where + " produced a non-finite activation");
  }
}

// [B, S, d] -> [B*H, S, dh]
Tensor split_heads(Graph& graph, const Tensor& x, std::size_t batch, std::size_t seq,
                   std::size_t heads, std::size_t head_size) {
  Tensor t = graph.reshape(x, {batch, seq, heads, head_size});
  t = graph.permute(t, {0, 2, 1, 3});
  return graph.reshape(t, {batch * heads, seq, head_size});
}

// [B*H, S, dh] -> [B, S, d]
Tensor merge_heads(Graph& graph, const Tensor& x, std::size_t batch, std::size_t seq,
                   std::size_t heads, std::size_t head_size) {
  Tensor t = graph.reshape(x, {batch, heads, seq, head_size});
  t = graph.permute(t, {0, 2, 1, 3});
  return graph.reshape(t, {batch, seq, heads * head_size});
}

}  // namespace

std::vector<Tensor> ModelParams::encoder_tensors() const {
  std::vector<Tensor> out{token_embedding, position_embedding};
  for (const auto& layer : layers) {
    for (const Linear* l : {&layer.query, &layer.key, &layer.value, &layer.output}) {
      out.push_back(l->weight);
      out.push_back(l->bias);
    }
    out.push_back(layer.attention_norm_gain);
    out.push_back(layer.attention_norm_bias);
    for (const Linear* l : {&layer.ffn_in, &layer.ffn_out}) {
      out.push_back(l->weight);
      out.push_back(l->bias);
    }
    out.push_back(layer.ffn_norm_gain);
    out.push_back(layer.ffn_norm_bias);
  }
  return out;
}

std::vector<Tensor> ModelParams::decoder_tensors() const {
  return {decoder.weight, decoder.bias};
}

std::vector<Tensor> ModelParams::all() const {
  std::vector<Tensor> out = encoder_tensors();
  for (auto& t : decoder_tensors()) out.push_back(t);
  return out;
}

ModelParams ModelParams::clone() const {
  auto copy = [](const Tensor& t) {
    Tensor c = t.clone();
    c.set_name(t.name());
    c.set_requires_grad(true);
    return c;
  };
  auto copy_linear = [&](const Linear& l) { return Linear{copy(l.weight), copy(l.bias)}; };
  ModelParams out;
  out.config = config;
  out.token_embedding = copy(token_embedding);
  out.position_embedding = copy(position_embedding);
  for (const auto& layer : layers) {
    LayerParams l;
    l.query = copy_linear(layer.query);
    l.key = copy_linear(layer.key);
    l.value = copy_linear(layer.value);
    l.output = copy_linear(layer.output);
    l.attention_norm_gain = copy(layer.attention_norm_gain);
    l.attention_norm_bias = copy(layer.attention_norm_bias);
    l.ffn_in = copy_linear(layer.ffn_in);
    l.ffn_out = copy_linear(layer.ffn_out);
    l.ffn_norm_gain = copy(layer.ffn_norm_gain);
    l.ffn_norm_bias = copy(layer.ffn_norm_bias);
    out.layers.push_back(std::move(l));
  }
  out.decoder = copy_linear(decoder);
  return out;
}

void ModelParams::zero_grad() {
  for (auto& t : all()) t.zero_grad();
}

ModelParams init_params(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  const EncoderConfig& e = config.encoder;
  Rng rng(derive_seed(seed, seed_stream::kInit));
  ModelParams p;
  p.config = config;
  p.token_embedding = normal_tensor({e.vocab_size, e.hidden_size}, rng, "embeddings.token");
  p.position_embedding =
      normal_tensor({e.max_seq_len, e.hidden_size}, rng, "embeddings.position");
  for (std::size_t i = 0; i < e.num_layers; ++i) {
    const std::string prefix = "layer" + std::to_string(i) + ".";
    LayerParams l;
    l.query = make_linear(e.hidden_size, e.hidden_size, rng, prefix + "attention.query");
    l.key = make_linear(e.hidden_size, e.hidden_size, rng, prefix + "attention.key");
    l.value = make_linear(e.hidden_size, e.hidden_size, rng, prefix + "attention.value");
    l.output = make_linear(e.hidden_size, e.hidden_size, rng, prefix + "attention.output");
    l.attention_norm_gain = constant_tensor({e.hidden_size}, 1.0, prefix + "attention.norm.gain");
    l.attention_norm_bias = constant_tensor({e.hidden_size}, 0.0, prefix + "attention.norm.bias");
    l.ffn_in = make_linear(e.hidden_size, e.intermediate_size, rng, prefix + "ffn.in");
    l.ffn_out = make_linear(e.intermediate_size, e.hidden_size, rng, prefix + "ffn.out");
    l.ffn_norm_gain = constant_tensor({e.hidden_size}, 1.0, prefix + "ffn.norm.gain");
    l.ffn_norm_bias = constant_tensor({e.hidden_size}, 0.0, prefix + "ffn.norm.bias");
    p.layers.push_back(std::move(l));
  }
  reinit_decoder(p, config.decoder, seed);
  return p;
}

void reinit_decoder(ModelParams& params, const DecoderConfig& decoder, std::uint64_t seed) {
  decoder.validate();
  params.config.decoder = decoder;
  Rng rng(derive_seed(seed, seed_stream::kDecoderInit));
  params.decoder = make_linear(params.config.encoder.hidden_size,
                               params.config.decoder_outputs(), rng, "decoder");
}

Tensor embed(Graph& graph, const ModelParams& params, const Batch& batch) {
  batch.validate();
  const EncoderConfig& e = params.config.encoder;
  if (batch.seq_len > e.max_seq_len) {
    throw InputError("sequence length " + std::to_string(batch.seq_len) +
                     " exceeds max_seq_len " + std::to_string(e.max_seq_len));
  }
  for (std::size_t i = 0; i < batch.ids.size(); ++i) {
    if (batch.ids[i] >= e.vocab_size) {
      throw InputError("token id " + std::to_string(batch.ids[i]) + " at example " +
                       std::to_string(i / batch.seq_len) + ", position " +
                       std::to_string(i % batch.seq_len) + " is >= vocab_size " +
                       std::to_string(e.vocab_size));
    }
  }
  std::vector<std::size_t> positions(batch.ids.size());
  for (std::size_t i = 0; i < positions.size(); ++i) positions[i] = i % batch.seq_len;
  Tensor tokens = graph.embedding(params.token_embedding, batch.ids);
  Tensor pos = graph.embedding(params.position_embedding, positions);
  return graph.reshape(graph.add(tokens, pos), {batch.size, batch.seq_len, e.hidden_size});
}

EncodeOutput encode(Graph& graph, const Tensor& x, std::span<const std::uint8_t> mask,
                    const ModelParams& params, DropoutMode dropout,
                    ForwardCounter* counter) {
  const EncoderConfig& e = params.config.encoder;
  if (x.rank() != 3 || x.dim(2) != e.hidden_size) {
    throw ConfigError("encode: input " + ad::shape_str(x.shape()) +
                      " is not [batch, seq, " + std::to_string(e.hidden_size) + "]");
  }
  const std::size_t batch = x.dim(0);
  const std::size_t seq = x.dim(1);
  if (mask.size() != batch * seq) {
    throw ConfigError("encode: mask has " + std::to_string(mask.size()) +
                      " entries for input " + ad::shape_str(x.shape()));
  }
  if (counter) ++counter->count;

  const std::size_t heads = e.num_heads;
  const std::size_t head_size = e.head_size();
  const double rate = dropout.enabled() ? e.dropout_rate : 0.0;
  Rng rng(dropout.enabled() ? dropout.seed() : 0);

  std::vector<std::uint8_t> key_mask(batch * heads * seq * seq);
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t h = 0; h < heads; ++h)
      for (std::size_t q = 0; q < seq; ++q)
        for (std::size_t k = 0; k < seq; ++k)
          key_mask[((b * heads + h) * seq + q) * seq + k] = mask[b * seq + k] == 0;

  EncodeOutput out;
  out.batch = batch;
  out.seq_len = seq;
  out.mask.assign(mask.begin(), mask.end());
  out.hidden.push_back(x);

  Tensor h = x;
  const double score_scale = 1.0 / std::sqrt(static_cast<double>(head_size));
  for (std::size_t li = 0; li < params.layers.size(); ++li) {
    const LayerParams& layer = params.layers[li];
    Tensor q = split_heads(graph, apply_linear(graph, h, layer.query), batch, seq, heads, head_size);
    Tensor k = split_heads(graph, apply_linear(graph, h, layer.key), batch, seq, heads, head_size);
    Tensor v = split_heads(graph, apply_linear(graph, h, layer.value), batch, seq, heads, head_size);

    Tensor scores = graph.scale(graph.bmm(q, k, true), score_scale);
    scores = graph.reshape(scores, {batch, heads, seq, seq});
    scores = graph.masked_fill(scores, key_mask, ad::kMaskedLogit);
    Tensor probs = graph.softmax(scores);
    out.attention.push_back(probs);

    Tensor attended = graph.dropout(probs, rate, rng);
    attended = graph.reshape(attended, {batch * heads, seq, seq});
    Tensor context = merge_heads(graph, graph.bmm(attended, v), batch, seq, heads, head_size);
    Tensor attn_out = graph.dropout(apply_linear(graph, context, layer.output), rate, rng);
    Tensor h1 = graph.layer_norm(graph.add(h, attn_out), layer.attention_norm_gain,
                                 layer.attention_norm_bias);

    Tensor inner = graph.gelu(apply_linear(graph, h1, layer.ffn_in));
    Tensor ffn = graph.dropout(apply_linear(graph, inner, layer.ffn_out), rate, rng);
    h = graph.layer_norm(graph.add(h1, ffn), layer.ffn_norm_gain, layer.ffn_norm_bias);
    check_finite(h, "encoder layer " + std::to_string(li));
    out.hidden.push_back(h);
  }
  out.final_hidden = h;
  return out;
}

Tensor classify(Graph& graph, const EncodeOutput& encoded, const ModelParams& params) {
  if (params.config.decoder.kind != DecoderKind::classifier) {
    throw ConfigError("classify: model decoder is " + to_string(params.config.decoder.kind));
  }
  const std::size_t d = params.config.encoder.hidden_size;
  Tensor pooled = graph.slice(encoded.final_hidden, 1, 0, 1);
  pooled = graph.reshape(pooled, {encoded.batch, d});
  return apply_linear(graph, pooled, params.decoder);
}

Tensor mlm_head(Graph& graph, const EncodeOutput& encoded, const ModelParams& params,
                std::span<const MaskedTarget> targets) {
  if (params.config.decoder.kind != DecoderKind::mlm) {
    throw ConfigError("mlm_head: model decoder is " + to_string(params.config.decoder.kind));
  }
  if (targets.empty()) throw InputError("mlm_head: no masked positions");
  const std::size_t d = params.config.encoder.hidden_size;
  std::vector<std::size_t> rows;
  rows.reserve(targets.size());
  for (const auto& t : targets) {
    if (t.example >= encoded.batch || t.position >= encoded.seq_len ||
        encoded.mask[t.example * encoded.seq_len + t.position] == 0) {
      throw InputError("mlm_head: masked position (" + std::to_string(t.example) + ", " +
                       std::to_string(t.position) + ") is not a real token");
    }
    rows.push_back(t.example * encoded.seq_len + t.position);
  }
  Tensor flat = graph.reshape(encoded.final_hidden, {encoded.batch * encoded.seq_len, d});
  Tensor picked = graph.embedding(flat, rows);
  return apply_linear(graph, picked, params.decoder);
}

Tensor task_loss(Graph& graph, const EncodeOutput& encoded, const ModelParams& params,
                 const Batch& batch) {
  if (params.config.decoder.kind == DecoderKind::classifier) {
    Tensor logits = classify(graph, encoded, params);
    return graph.mean_all(graph.cross_entropy(logits, batch.labels));
  }
  Tensor logits = mlm_head(graph, encoded, params, batch.targets);
  std::vector<std::size_t> tokens;
  tokens.reserve(batch.targets.size());
  for (const auto& t : batch.targets) tokens.push_back(t.token);
  return graph.mean_all(graph.cross_entropy(logits, tokens));
}

}  // namespace creat::model
