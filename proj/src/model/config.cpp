#include "creat/model/config.hpp"

#include "creat/common.hpp"
#include "creat/model/batch.hpp"

namespace creat::model {

void EncoderConfig::validate() const {
  auto positive = [](std::size_t v, const char* field) {
    if (v == 0) throw ConfigError(std::string("model.") + field + " must be positive");
  };
  positive(hidden_size, "hidden_size");
  positive(num_heads, "num_heads");
  positive(intermediate_size, "intermediate_size");
  positive(vocab_size, "vocab_size");
  positive(max_seq_len, "max_seq_len");
  if (hidden_size % num_heads != 0) {
    throw ConfigError("model.hidden_size (" + std::to_string(hidden_size) +
                      ") must be divisible by model.num_heads (" +
                      std::to_string(num_heads) + ")");
  }
  if (!(dropout_rate >= 0.0 && dropout_rate < 1.0)) {
    throw ConfigError("model.dropout_rate must be in [0, 1)");
  }
}

void DecoderConfig::validate() const {
  if (kind == DecoderKind::classifier && num_classes < 2) {
    throw ConfigError("decoder.num_classes must be at least 2");
  }
}

void ModelConfig::validate() const {
  encoder.validate();
  decoder.validate();
}

std::string to_string(DecoderKind kind) {
  return kind == DecoderKind::classifier ? "classifier" : "mlm";
}

DecoderKind decoder_kind_from_string(const std::string& text) {
  if (text == "classifier") return DecoderKind::classifier;
  if (text == "mlm") return DecoderKind::mlm;
  throw ConfigError("unknown decoder kind '" + text + "'");
}

void to_json(nlohmann::json& j, const EncoderConfig& c) {
  j = nlohmann::json{{"num_layers", c.num_layers},
                     {"hidden_size", c.hidden_size},
                     {"num_heads", c.num_heads},
                     {"intermediate_size", c.intermediate_size},
                     {"vocab_size", c.vocab_size},
                     {"max_seq_len", c.max_seq_len},
                     {"dropout_rate", c.dropout_rate}};
}

void to_json(nlohmann::json& j, const DecoderConfig& c) {
  j = nlohmann::json{{"kind", to_string(c.kind)}, {"num_classes", c.num_classes}};
}

void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = nlohmann::json{{"encoder", c.encoder}, {"decoder", c.decoder}};
}

void from_json(const nlohmann::json& j, EncoderConfig& c) {
  j.at("num_layers").get_to(c.num_layers);
  j.at("hidden_size").get_to(c.hidden_size);
  j.at("num_heads").get_to(c.num_heads);
  j.at("intermediate_size").get_to(c.intermediate_size);
  j.at("vocab_size").get_to(c.vocab_size);
  j.at("max_seq_len").get_to(c.max_seq_len);
  j.at("dropout_rate").get_to(c.dropout_rate);
}

void from_json(const nlohmann::json& j, DecoderConfig& c) {
  c.kind = decoder_kind_from_string(j.at("kind").get<std::string>());
  j.at("num_classes").get_to(c.num_classes);
}

void from_json(const nlohmann::json& j, ModelConfig& c) {
  j.at("encoder").get_to(c.encoder);
  j.at("decoder").get_to(c.decoder);
}

std::size_t Batch::real_tokens(std::size_t b) const {
  std::size_t n = 0;
  for (auto m : example_mask(b)) n += m != 0;
  return n;
}

void Batch::validate() const {
  if (size == 0 || seq_len == 0) throw InputError("batch is empty");
  if (ids.size() != size * seq_len || mask.size() != size * seq_len) {
    throw InputError("batch ids/mask do not match [" + std::to_string(size) + ", " +
                     std::to_string(seq_len) + "]");
  }
  for (std::size_t b = 0; b < size; ++b) {
    if (real_tokens(b) == 0) {
      throw InputError("batch example " + std::to_string(b) + " has no real tokens");
    }
  }
  if (!labels.empty() && labels.size() != size) {
    throw InputError("batch has " + std::to_string(labels.size()) + " labels for " +
                     std::to_string(size) + " examples");
  }
  for (const auto& t : targets) {
    if (t.example >= size || t.position >= seq_len ||
        mask[t.example * seq_len + t.position] == 0) {
      throw InputError("masked target at example " + std::to_string(t.example) +
                       ", position " + std::to_string(t.position) +
                       " is not a real token");
    }
  }
}

}  // namespace creat::model
