#pragma once

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "creat/autodiff/tensor.hpp"
#include "creat/model/transformer.hpp"

namespace creat::metrics {

// One training step's diagnostics; exactly the columns of the metrics CSV.
struct MetricsRecord {
  std::size_t step = 0;
  std::string mode;
  double benign_loss = 0.0;
  double adv_loss = 0.0;
  double sim_lb = 1.0;    // batch mean of the per-example token minimum
  double sim_mean = 1.0;  // batch mean of the per-example token mean
  double delta_norm = 0.0;  // largest per-example Frobenius norm of delta*
  std::vector<double> layer_sim;  // num_layers + 1, index 0 is the embedding output
  std::vector<double> attn_kl;    // num_layers

  bool operator==(const MetricsRecord&) const = default;
};

struct TokenSimilarity {
  std::vector<double> lower_bound;  // per example, min over real tokens
  std::vector<double> mean;         // per example, mean over real tokens
  std::size_t degenerate_tokens = 0;  // tokens where either vector has ~zero norm
};

// Per-token cosine similarity between benign and perturbed [batch, seq, d]
// hidden states, reduced over real tokens of each example.
TokenSimilarity token_similarity(const ad::Tensor& benign, const ad::Tensor& perturbed,
                                 std::span<const std::uint8_t> mask);

std::vector<double> sentence_similarity_lower_bound(const ad::Tensor& benign,
                                                    const ad::Tensor& perturbed,
                                                    std::span<const std::uint8_t> mask);

// Per layer (embedding output included): batch mean of the per-example masked
// mean token similarity. Length num_layers + 1.
std::vector<double> layerwise_hidden_similarity(const model::EncodeOutput& benign,
                                                const model::EncodeOutput& perturbed);

// Per layer: mean over examples, heads and real query positions of
// KL(benign row || perturbed row) over real key positions. Length num_layers.
std::vector<double> attention_divergence(const model::EncodeOutput& benign,
                                         const model::EncodeOutput& perturbed);

// floor(0.2 * max_steps), at least 1.
std::size_t early_phase_window(std::size_t max_steps);
double early_phase_average(std::span<const double> series, std::size_t max_steps);

// --- CSV -------------------------------------------------------------------

std::string csv_header(std::size_t num_layers);
std::string csv_row(const MetricsRecord& record);
MetricsRecord parse_csv_row(const std::string& line, std::size_t num_layers);
// Reads a whole metrics CSV; the layer count is taken from the header.
std::vector<MetricsRecord> read_csv(std::istream& in);
// %.17g, enough digits to round-trip any double.
std::string format_double(double value);

// --- run summary -------------------------------------------------------------

struct RunSummary {
  std::string mode;
  std::size_t max_steps = 0;
  std::size_t early_window = 0;
  // Early-phase means, keyed like the CSV columns.
  double benign_loss = 0.0;
  double adv_loss = 0.0;
  double sim_lb = 0.0;
  double sim_mean = 0.0;
  double delta_norm = 0.0;
  std::vector<double> layer_sim;
  std::vector<double> attn_kl;
  double train_accuracy = 0.0;
  double eval_accuracy = 0.0;
  double eval_loss = 0.0;
  std::size_t degenerate_similarity_tokens = 0;
  nlohmann::json config;
};

RunSummary summarize(std::span<const MetricsRecord> records, std::size_t max_steps);
void to_json(nlohmann::json& j, const RunSummary& summary);

}  // namespace creat::metrics
