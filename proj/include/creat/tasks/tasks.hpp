#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include <json.hpp>

#include "creat/model/batch.hpp"

namespace creat::tasks {

// Reserved token ids. Content tokens are [kFirstContentId, vocab_size - 1).
inline constexpr std::size_t kPadId = 0;
inline constexpr std::size_t kClsId = 1;
inline constexpr std::size_t kFirstContentId = 2;
inline std::size_t mask_id(std::size_t vocab_size) { return vocab_size - 1; }

enum class TaskKind { sequence_classification, toy_mlm };

std::string to_string(TaskKind kind);
TaskKind task_kind_from_string(const std::string& text);

struct TaskSpec {
  TaskKind kind = TaskKind::sequence_classification;
  std::size_t vocab_size = 64;
  std::size_t seq_len = 16;       // padded length, including the leading CLS token
  std::size_t num_classes = 2;    // classification only
  std::size_t num_train = 2000;
  std::size_t num_eval = 500;
  std::uint64_t generator_seed = 0;
  std::size_t pattern_length = 3; // motif length (classification)
  double noise_rate = 0.0;        // label-flip probability
  std::size_t min_length = 8;     // shortest real sequence, including CLS

  void validate() const;
  bool operator==(const TaskSpec&) const = default;
};

struct Example {
  std::vector<std::size_t> ids;     // padded to seq_len
  std::vector<std::uint8_t> mask;   // 1 = real token
  std::size_t label = 0;            // classification
  std::vector<model::MaskedTarget> targets;  // masked LM; example index is 0

  bool operator==(const Example&) const = default;
};

struct Dataset {
  std::vector<Example> train;
  std::vector<Example> eval;
};

// The hidden structure behind a classification dataset.
struct MotifSet {
  std::vector<std::size_t> tokens;                    // shared token multiset
  std::vector<std::vector<std::size_t>> class_orders; // one ordering per class
};

// Each class is an ordering of the same motif tokens, planted contiguously at
// a random offset among filler tokens that never use motif tokens. Class of
// example i is i mod num_classes before label noise. No id sequence repeats
// within or across the two splits.
Dataset generate_classification(const TaskSpec& spec, MotifSet* motifs = nullptr);

// Sequences from a seeded order-2 Markov chain over content tokens; 15% of
// the non-CLS positions (rounded, at least one) are replaced by the mask id.
Dataset generate_toy_mlm(const TaskSpec& spec);

Dataset generate(const TaskSpec& spec);

// Stacks examples[indices] into a padded batch. Masked-LM target example
// indices are rewritten to batch rows.
model::Batch make_batch(std::span<const Example> examples,
                        std::span<const std::size_t> indices);
model::Batch make_batch(std::span<const Example> examples);

// Line-delimited JSON: {"ids": [...], "mask": [...], "label": n} or
// {"ids": [...], "mask": [...], "targets": [[position, token], ...]}.
void save_examples(const std::filesystem::path& path, std::span<const Example> examples,
                   TaskKind kind);
std::vector<Example> load_examples(const std::filesystem::path& path);

void to_json(nlohmann::json& j, const TaskSpec& spec);

}  // namespace creat::tasks
