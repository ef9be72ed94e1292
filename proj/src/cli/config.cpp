#include "creat/cli/config.hpp"

#include <concepts>
#include <fstream>
#include <set>

#include "creat/common.hpp"

namespace creat::cli {

namespace {

using nlohmann::json;

// Literals built in code are signed even when non-negative.
bool is_non_negative_integer(const json& v) {
  return v.is_number_unsigned() || (v.is_number_integer() && v.get<std::int64_t>() >= 0);
}

// Walks one JSON object, remembering which keys were consumed so leftovers
// can be reported as unknown fields.
class ObjectReader {
 public:
  ObjectReader(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError(where() + " must be a JSON object");
  }

  bool has(const std::string& key) const { return j_.contains(key); }

  const json* field(const std::string& key, bool required) {
    seen_.insert(key);
    auto it = j_.find(key);
    if (it == j_.end()) {
      if (required) throw ConfigError("missing required field '" + child(key) + "'");
      return nullptr;
    }
    return &*it;
  }

  template <std::unsigned_integral T>
  void read(const std::string& key, T& out, bool required = false) {
    if (const json* v = field(key, required)) {
      if (!is_non_negative_integer(*v)) {
        throw ConfigError("field '" + child(key) + "' must be a non-negative integer");
      }
      out = v->get<T>();
    }
  }

  void read(const std::string& key, double& out, bool required = false) {
    if (const json* v = field(key, required)) {
      if (!v->is_number()) throw ConfigError("field '" + child(key) + "' must be a number");
      out = v->get<double>();
    }
  }

  void read(const std::string& key, std::string& out, bool required = false) {
    if (const json* v = field(key, required)) {
      if (!v->is_string()) throw ConfigError("field '" + child(key) + "' must be a string");
      out = v->get<std::string>();
    }
  }

  void finish() const {
    for (const auto& [key, value] : j_.items()) {
      if (!seen_.contains(key)) throw ConfigError("unknown field '" + child(key) + "'");
    }
  }

  std::string child(const std::string& key) const {
    return path_.empty() ? key : path_ + "." + key;
  }
  std::string where() const { return path_.empty() ? "config" : "'" + path_ + "'"; }

 private:
  const json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

// Re-labels a validation error so it names the offending config path.
template <typename F>
void with_context(const std::string& path, F&& f) {
  try {
    f();
  } catch (const ConfigError& e) {
    const std::string msg = e.what();
    if (msg.find(path) != std::string::npos) throw;
    throw ConfigError(path + ": " + msg);
  }
}

model::EncoderConfig read_model(const json& j) {
  model::EncoderConfig c;
  ObjectReader r(j, "model");
  r.read("num_layers", c.num_layers);
  r.read("hidden_size", c.hidden_size);
  r.read("num_heads", c.num_heads);
  r.read("intermediate_size", c.intermediate_size);
  r.read("vocab_size", c.vocab_size);
  r.read("max_seq_len", c.max_seq_len);
  r.read("dropout_rate", c.dropout_rate);
  r.finish();
  return c;
}

tasks::TaskSpec read_task(const json& j) {
  tasks::TaskSpec t;
  ObjectReader r(j, "task");
  std::string kind;
  r.read("kind", kind, true);
  with_context("task.kind", [&] { t.kind = tasks::task_kind_from_string(kind); });
  r.read("vocab_size", t.vocab_size);
  r.read("seq_len", t.seq_len);
  r.read("num_classes", t.num_classes);
  r.read("num_train", t.num_train);
  r.read("num_eval", t.num_eval);
  r.read("generator_seed", t.generator_seed);
  r.read("pattern_length", t.pattern_length);
  r.read("noise_rate", t.noise_rate);
  r.read("min_length", t.min_length);
  r.finish();
  return t;
}

void read_attack_fields(ObjectReader& r, attack::AttackConfig& a, bool mode_required,
                        const std::string& path) {
  std::string mode;
  r.read("mode", mode, mode_required);
  if (!mode.empty() || mode_required) {
    with_context(path + ".mode", [&] { a.mode = attack::attack_mode_from_string(mode); });
  }
  r.read("ascent_step_size", a.ascent_step_size);
  r.read("decision_boundary", a.decision_boundary);
  r.read("ascent_steps", a.ascent_steps);
  r.read("temperature", a.temperature);
}

attack::AttackConfig read_attack(const json& j) {
  attack::AttackConfig a;
  ObjectReader r(j, "attack");
  read_attack_fields(r, a, true, "attack");
  r.finish();
  return a;
}

void read_train(const json& j, train::TrainConfig& t) {
  ObjectReader r(j, "train");
  r.read("learning_rate", t.learning_rate);
  r.read("lambda", t.lambda);
  r.read("batch_size", t.batch_size);
  r.read("max_steps", t.max_steps, true);
  r.read("warmup_proportion", t.warmup_proportion);
  r.read("weight_decay", t.weight_decay);
  r.read("gradient_clip", t.gradient_clip);
  r.read("seed", t.seed);
  r.finish();
}

std::vector<GridEntry> read_grid(const json& j, const attack::AttackConfig& base) {
  if (!j.is_array()) throw ConfigError("field 'modes' must be an array");
  std::vector<GridEntry> out;
  for (std::size_t i = 0; i < j.size(); ++i) {
    const std::string path = "modes[" + std::to_string(i) + "]";
    GridEntry e;
    e.attack = base;
    if (j[i].is_string()) {
      with_context(path, [&] { e.attack.mode = attack::attack_mode_from_string(j[i]); });
      e.label = j[i].get<std::string>();
    } else {
      ObjectReader r(j[i], path);
      r.read("label", e.label);
      read_attack_fields(r, e.attack, true, path);
      r.finish();
      if (e.label.empty()) e.label = attack::to_string(e.attack.mode);
    }
    with_context(path, [&] { e.attack.validate(); });
    out.push_back(std::move(e));
  }
  return out;
}

}  // namespace

void ExperimentConfig::validate() const {
  model.validate();
  train.validate();
  train::check_compatible(model, train.task);
  if (seeds.empty()) throw ConfigError("seeds must not be empty");
  const std::set<std::uint64_t> unique(seeds.begin(), seeds.end());
  if (unique.size() != seeds.size()) throw ConfigError("seeds must be distinct");
  std::set<std::string> labels;
  for (const auto& g : grid) {
    if (!labels.insert(g.label).second) {
      throw ConfigError("modes: duplicate label '" + g.label + "'");
    }
  }
}

ExperimentConfig parse_config(const json& j) {
  ExperimentConfig c;
  ObjectReader r(j, "");
  if (const json* m = r.field("model", false)) c.model = read_model(*m);
  c.train.task = read_task(*r.field("task", true));
  c.train.attack = read_attack(*r.field("attack", true));
  read_train(*r.field("train", true), c.train);
  r.read("output_dir", c.output_dir);
  r.read("init_checkpoint", c.init_checkpoint);
  if (const json* s = r.field("seeds", false)) {
    if (!s->is_array()) throw ConfigError("field 'seeds' must be an array");
    for (std::size_t i = 0; i < s->size(); ++i) {
      if (!is_non_negative_integer((*s)[i])) {
        throw ConfigError("field 'seeds[" + std::to_string(i) +
                          "]' must be a non-negative integer");
      }
      c.seeds.push_back((*s)[i].get<std::uint64_t>());
    }
  } else {
    c.seeds = {c.train.seed};
  }
  if (const json* g = r.field("modes", false)) {
    c.grid = read_grid(*g, c.train.attack);
  } else {
    c.grid = {GridEntry{attack::to_string(c.train.attack.mode), c.train.attack}};
  }
  r.finish();
  c.validate();
  return c;
}

ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file " + path.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError(path.string() + ": invalid JSON: " + e.what());
  }
  return parse_config(j);
}

json to_json(const attack::AttackConfig& a) {
  return json{{"mode", attack::to_string(a.mode)},
              {"ascent_step_size", a.ascent_step_size},
              {"decision_boundary", a.decision_boundary},
              {"ascent_steps", a.ascent_steps},
              {"temperature", a.temperature}};
}

json to_json(const train::TrainConfig& t) {
  return json{{"learning_rate", t.learning_rate},
              {"lambda", t.lambda},
              {"batch_size", t.batch_size},
              {"max_steps", t.max_steps},
              {"warmup_proportion", t.warmup_proportion},
              {"weight_decay", t.weight_decay},
              {"gradient_clip", t.gradient_clip},
              {"seed", t.seed}};
}

json serialize(const ExperimentConfig& c) {
  json modes = json::array();
  for (const auto& g : c.grid) {
    json e = to_json(g.attack);
    e["label"] = g.label;
    modes.push_back(std::move(e));
  }
  json j{{"model", c.model},
         {"task", c.train.task},
         {"attack", to_json(c.train.attack)},
         {"train", to_json(c.train)},
         {"output_dir", c.output_dir},
         {"seeds", c.seeds},
         {"modes", std::move(modes)}};
  if (!c.init_checkpoint.empty()) j["init_checkpoint"] = c.init_checkpoint;
  return j;
}

}  // namespace creat::cli
