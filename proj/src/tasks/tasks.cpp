#include "creat/tasks/tasks.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <numeric>
#include <set>

#include "creat/common.hpp"

namespace creat::tasks {

namespace {

constexpr double kMaskFraction = 0.15;
constexpr std::size_t kSuccessorsPerContext = 3;

std::size_t uniform_index(Rng& rng, std::size_t n) {
  return std::uniform_int_distribution<std::size_t>(0, n - 1)(rng);
}

std::size_t content_tokens(const TaskSpec& spec) {
  return spec.vocab_size - kFirstContentId - 1;
}

Example pad(std::vector<std::size_t> real, std::size_t seq_len) {
  Example e;
  e.ids.assign(seq_len, kPadId);
  e.mask.assign(seq_len, 0);
  std::copy(real.begin(), real.end(), e.ids.begin());
  std::fill_n(e.mask.begin(), real.size(), 1);
  return e;
}

}  // namespace

std::string to_string(TaskKind kind) {
  return kind == TaskKind::sequence_classification ? "sequence_classification" : "toy_mlm";
}

TaskKind task_kind_from_string(const std::string& text) {
  if (text == "sequence_classification") return TaskKind::sequence_classification;
  if (text == "toy_mlm") return TaskKind::toy_mlm;
  throw ConfigError("unknown task kind '" + text +
                    "' (expected sequence_classification or toy_mlm)");
}

void TaskSpec::validate() const {
  if (num_train == 0 || num_eval == 0) {
    throw ConfigError("task.num_train and task.num_eval must be positive");
  }
  if (!(noise_rate >= 0.0 && noise_rate < 0.5)) {
    throw ConfigError("task.noise_rate must be in [0, 0.5)");
  }
  if (seq_len < 2) throw ConfigError("task.seq_len must be at least 2");
  if (min_length < 2 || min_length > seq_len) {
    throw ConfigError("task.min_length must be in [2, seq_len]");
  }
  if (vocab_size < kFirstContentId + 2) throw ConfigError("task.vocab_size is too small");
  if (kind == TaskKind::sequence_classification) {
    if (pattern_length == 0) throw ConfigError("task.pattern_length must be positive");
    if (pattern_length > seq_len - 1) {
      throw ConfigError("task.pattern_length (" + std::to_string(pattern_length) +
                        ") does not fit in task.seq_len (" + std::to_string(seq_len) +
                        ") after the CLS token");
    }
    if (pattern_length > min_length - 1) {
      throw ConfigError("task.pattern_length does not fit in task.min_length");
    }
    if (num_classes < 2) throw ConfigError("task.num_classes must be at least 2");
    double orders = 1.0;
    for (std::size_t i = 2; i <= pattern_length; ++i) orders *= static_cast<double>(i);
    if (static_cast<double>(num_classes) > orders) {
      throw ConfigError("task.num_classes exceeds the number of motif orderings");
    }
    if (content_tokens(*this) <= pattern_length) {
      throw ConfigError("task.vocab_size leaves no filler tokens besides the motif");
    }
  }
}

Dataset generate_classification(const TaskSpec& spec, MotifSet* motifs) {
  spec.validate();
  if (spec.kind != TaskKind::sequence_classification) {
    throw ConfigError("generate_classification needs task.kind sequence_classification");
  }
  Rng rng(spec.generator_seed);

  std::vector<std::size_t> content(content_tokens(spec));
  std::iota(content.begin(), content.end(), kFirstContentId);
  std::shuffle(content.begin(), content.end(), rng);
  MotifSet set;
  set.tokens.assign(content.begin(), content.begin() + spec.pattern_length);
  const std::vector<std::size_t> filler(content.begin() + spec.pattern_length, content.end());

  set.class_orders.push_back(set.tokens);
  while (set.class_orders.size() < spec.num_classes) {
    std::vector<std::size_t> order = set.tokens;
    std::shuffle(order.begin(), order.end(), rng);
    if (std::find(set.class_orders.begin(), set.class_orders.end(), order) ==
        set.class_orders.end()) {
      set.class_orders.push_back(std::move(order));
    }
  }

  std::set<std::vector<std::size_t>> seen;
  auto make_split = [&](std::size_t count) {
    std::vector<Example> out;
    out.reserve(count);
    for (std::size_t i = 0; i < count; ++i) {
      const std::size_t cls = i % spec.num_classes;
      Example e;
      do {
        const std::size_t length =
            spec.min_length + uniform_index(rng, spec.seq_len - spec.min_length + 1);
        const std::size_t body = length - 1;
        const std::size_t offset = uniform_index(rng, body - spec.pattern_length + 1);
        std::vector<std::size_t> real{kClsId};
        for (std::size_t p = 0; p < body; ++p) {
          if (p >= offset && p < offset + spec.pattern_length) {
            real.push_back(set.class_orders[cls][p - offset]);
          } else {
            real.push_back(filler[uniform_index(rng, filler.size())]);
          }
        }
        e = pad(std::move(real), spec.seq_len);
      } while (!seen.insert(e.ids).second);
      e.label = cls;
      if (spec.noise_rate > 0.0 && uniform01(rng) < spec.noise_rate) {
        e.label = (cls + 1 + uniform_index(rng, spec.num_classes - 1)) % spec.num_classes;
      }
      out.push_back(std::move(e));
    }
    return out;
  };

  Dataset data;
  data.train = make_split(spec.num_train);
  data.eval = make_split(spec.num_eval);
  if (motifs) *motifs = std::move(set);
  return data;
}

Dataset generate_toy_mlm(const TaskSpec& spec) {
  spec.validate();
  if (spec.kind != TaskKind::toy_mlm) {
    throw ConfigError("generate_toy_mlm needs task.kind toy_mlm");
  }
  Rng rng(spec.generator_seed);
  const std::size_t k = content_tokens(spec);

  // Sparse second-order transition table: each (prev2, prev1) context has a
  // few successors with random weights.
  std::vector<std::array<std::size_t, kSuccessorsPerContext>> successors(k * k);
  std::vector<std::array<double, kSuccessorsPerContext>> cumulative(k * k);
  for (std::size_t c = 0; c < k * k; ++c) {
    double total = 0.0;
    for (std::size_t s = 0; s < kSuccessorsPerContext; ++s) {
      successors[c][s] = uniform_index(rng, k);
      const double w = -std::log(1.0 - uniform01(rng));
      total += w;
      cumulative[c][s] = total;
    }
    for (auto& v : cumulative[c]) v /= total;
  }

  std::set<std::vector<std::size_t>> seen;
  const std::size_t mask_token = mask_id(spec.vocab_size);
  auto make_split = [&](std::size_t count) {
    std::vector<Example> out;
    out.reserve(count);
    while (out.size() < count) {
      const std::size_t length =
          spec.min_length + uniform_index(rng, spec.seq_len - spec.min_length + 1);
      std::vector<std::size_t> body;
      body.push_back(uniform_index(rng, k));
      body.push_back(uniform_index(rng, k));
      while (body.size() < length - 1) {
        const std::size_t context = body[body.size() - 2] * k + body.back();
        const double u = uniform01(rng);
        std::size_t s = 0;
        while (s + 1 < kSuccessorsPerContext && u >= cumulative[context][s]) ++s;
        body.push_back(successors[context][s]);
      }
      body.resize(length - 1);
      std::vector<std::size_t> real{kClsId};
      for (std::size_t t : body) real.push_back(t + kFirstContentId);
      if (!seen.insert(real).second) continue;

      const std::size_t maskable = real.size() - 1;
      const std::size_t n_mask = std::max<std::size_t>(
          1, static_cast<std::size_t>(std::lround(kMaskFraction * static_cast<double>(maskable))));
      std::vector<std::size_t> positions(maskable);
      std::iota(positions.begin(), positions.end(), 1);
      std::shuffle(positions.begin(), positions.end(), rng);
      positions.resize(n_mask);
      std::sort(positions.begin(), positions.end());

      Example e = pad(real, spec.seq_len);
      for (std::size_t p : positions) {
        e.targets.push_back(model::MaskedTarget{0, p, e.ids[p]});
        e.ids[p] = mask_token;
      }
      out.push_back(std::move(e));
    }
    return out;
  };

  Dataset data;
  data.train = make_split(spec.num_train);
  data.eval = make_split(spec.num_eval);
  return data;
}

Dataset generate(const TaskSpec& spec) {
  return spec.kind == TaskKind::sequence_classification ? generate_classification(spec)
                                                        : generate_toy_mlm(spec);
}

model::Batch make_batch(std::span<const Example> examples,
                        std::span<const std::size_t> indices) {
  if (indices.empty()) throw InputError("make_batch: no examples");
  model::Batch batch;
  batch.size = indices.size();
  batch.seq_len = examples[indices[0]].ids.size();
  for (std::size_t row = 0; row < indices.size(); ++row) {
    const Example& e = examples[indices[row]];
    if (e.ids.size() != batch.seq_len || e.mask.size() != batch.seq_len) {
      throw InputError("make_batch: examples have different lengths");
    }
    batch.ids.insert(batch.ids.end(), e.ids.begin(), e.ids.end());
    batch.mask.insert(batch.mask.end(), e.mask.begin(), e.mask.end());
    batch.labels.push_back(e.label);
    for (const auto& t : e.targets) {
      batch.targets.push_back(model::MaskedTarget{row, t.position, t.token});
    }
  }
  return batch;
}

model::Batch make_batch(std::span<const Example> examples) {
  std::vector<std::size_t> all(examples.size());
  std::iota(all.begin(), all.end(), 0);
  return make_batch(examples, all);
}

void save_examples(const std::filesystem::path& path, std::span<const Example> examples,
                   TaskKind kind) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw InputError("cannot open dataset for writing: " + path.string());
  for (const auto& e : examples) {
    nlohmann::json j{{"ids", e.ids}, {"mask", e.mask}};
    if (kind == TaskKind::sequence_classification) {
      j["label"] = e.label;
    } else {
      auto targets = nlohmann::json::array();
      for (const auto& t : e.targets) targets.push_back({t.position, t.token});
      j["targets"] = std::move(targets);
    }
    out << j.dump() << '\n';
  }
}

std::vector<Example> load_examples(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw InputError("cannot open dataset: " + path.string());
  std::vector<Example> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      Example e;
      j.at("ids").get_to(e.ids);
      j.at("mask").get_to(e.mask);
      if (e.ids.size() != e.mask.size()) throw InputError("ids and mask differ in length");
      if (j.contains("label")) j.at("label").get_to(e.label);
      if (j.contains("targets")) {
        for (const auto& t : j.at("targets")) {
          e.targets.push_back(model::MaskedTarget{0, t.at(0).get<std::size_t>(),
                                                  t.at(1).get<std::size_t>()});
        }
      }
      out.push_back(std::move(e));
    } catch (const std::exception& ex) {
      throw InputError(path.string() + ":" + std::to_string(line_no) + ": " + ex.what());
    }
  }
  return out;
}

void to_json(nlohmann::json& j, const TaskSpec& spec) {
  j = nlohmann::json{{"kind", to_string(spec.kind)},
                     {"vocab_size", spec.vocab_size},
                     {"seq_len", spec.seq_len},
                     {"num_classes", spec.num_classes},
                     {"num_train", spec.num_train},
                     {"num_eval", spec.num_eval},
                     {"generator_seed", spec.generator_seed},
                     {"pattern_length", spec.pattern_length},
                     {"noise_rate", spec.noise_rate},
                     {"min_length", spec.min_length}};
}

}  // namespace creat::tasks
