#pragma once

#include <cstddef>
#include <string>

#include <json.hpp>

namespace creat::model {

struct EncoderConfig {
  std::size_t num_layers = 2;
  std::size_t hidden_size = 32;
  std::size_t num_heads = 4;
  std::size_t intermediate_size = 64;
  std::size_t vocab_size = 64;
  std::size_t max_seq_len = 32;
  double dropout_rate = 0.1;

  std::size_t head_size() const { return hidden_size / num_heads; }
  // Throws ConfigError. num_layers == 0 is allowed (identity encoder).
  void validate() const;
  bool operator==(const EncoderConfig&) const = default;
};

enum class DecoderKind { classifier, mlm };

struct DecoderConfig {
  DecoderKind kind = DecoderKind::classifier;
  std::size_t num_classes = 2;  // classifier only

  void validate() const;
  bool operator==(const DecoderConfig&) const = default;
};

struct ModelConfig {
  EncoderConfig encoder;
  DecoderConfig decoder;

  std::size_t decoder_outputs() const {
    return decoder.kind == DecoderKind::classifier ? decoder.num_classes
                                                   : encoder.vocab_size;
  }
  void validate() const;
  bool operator==(const ModelConfig&) const = default;
};

std::string to_string(DecoderKind kind);
DecoderKind decoder_kind_from_string(const std::string& text);

void to_json(nlohmann::json& j, const EncoderConfig& c);
void to_json(nlohmann::json& j, const DecoderConfig& c);
void to_json(nlohmann::json& j, const ModelConfig& c);
// Strict readers used for checkpoint headers: every field must be present.
void from_json(const nlohmann::json& j, EncoderConfig& c);
void from_json(const nlohmann::json& j, DecoderConfig& c);
void from_json(const nlohmann::json& j, ModelConfig& c);

}  // namespace creat::model
