#include "creat/metrics/metrics.hpp"

#include <algorithm>
#include <charconv>
#include <cstdio>
#include <istream>
#include <limits>
#include <sstream>

#include "creat/autodiff/graph.hpp"
#include "creat/common.hpp"

namespace creat::metrics {

namespace {

double clamp_unit(double v) { return std::clamp(v, -1.0, 1.0); }

double mean_of(std::span<const double> v) {
  double s = 0.0;
  for (double x : v) s += x;
  return v.empty() ? 0.0 : s / static_cast<double>(v.size());
}

void require_outputs_match(const model::EncodeOutput& a, const model::EncodeOutput& b,
                           const char* what) {
  if (a.hidden.size() != b.hidden.size() || a.attention.size() != b.attention.size()) {
    throw InputError(std::string(what) + ": layer count mismatch (" +
                     std::to_string(a.attention.size()) + " vs " +
                     std::to_string(b.attention.size()) + ")");
  }
  if (a.batch != b.batch || a.seq_len != b.seq_len || a.mask != b.mask) {
    throw InputError(std::string(what) + ": batch shape or mask mismatch");
  }
}

double parse_double(const std::string& field, const std::string& column) {
  try {
    std::size_t used = 0;
    const double v = std::stod(field, &used);
    if (used != field.size()) throw std::invalid_argument("trailing characters");
    return v;
  } catch (const std::exception&) {
    throw InputError("metrics CSV: cannot parse " + column + " value '" + field + "'");
  }
}

}  // namespace

TokenSimilarity token_similarity(const ad::Tensor& benign, const ad::Tensor& perturbed,
                                 std::span<const std::uint8_t> mask) {
  if (benign.shape() != perturbed.shape() || benign.rank() != 3) {
    throw InputError("token_similarity: shapes " + ad::shape_str(benign.shape()) + " and " +
                     ad::shape_str(perturbed.shape()) + " are not matching [batch, seq, d]");
  }
  const std::size_t batch = benign.dim(0);
  const std::size_t seq = benign.dim(1);
  const std::size_t d = benign.dim(2);
  if (mask.size() != batch * seq) throw InputError("token_similarity: mask size mismatch");
  TokenSimilarity out;
  out.lower_bound.resize(batch);
  out.mean.resize(batch);
  for (std::size_t b = 0; b < batch; ++b) {
    double lowest = std::numeric_limits<double>::infinity();
    double total = 0.0;
    std::size_t real = 0;
    for (std::size_t s = 0; s < seq; ++s) {
      if (mask[b * seq + s] == 0) continue;
      const auto a = benign.data().subspan((b * seq + s) * d, d);
      const auto p = perturbed.data().subspan((b * seq + s) * d, d);
      if (ad::kernels::norm(a) <= ad::kNormFloor || ad::kernels::norm(p) <= ad::kNormFloor) {
        ++out.degenerate_tokens;
      }
      const double c = clamp_unit(ad::kernels::cosine(a, p));
      lowest = std::min(lowest, c);
      total += c;
      ++real;
    }
    if (real == 0) {
      throw InputError("similarity: example " + std::to_string(b) + " has no real tokens");
    }
    out.lower_bound[b] = lowest;
    out.mean[b] = total / static_cast<double>(real);
  }
  return out;
}

std::vector<double> sentence_similarity_lower_bound(const ad::Tensor& benign,
                                                    const ad::Tensor& perturbed,
                                                    std::span<const std::uint8_t> mask) {
  return token_similarity(benign, perturbed, mask).lower_bound;
}

std::vector<double> layerwise_hidden_similarity(const model::EncodeOutput& benign,
                                                const model::EncodeOutput& perturbed) {
  require_outputs_match(benign, perturbed, "layerwise_hidden_similarity");
  std::vector<double> out;
  for (std::size_t l = 0; l < benign.hidden.size(); ++l) {
    const auto sims = token_similarity(benign.hidden[l], perturbed.hidden[l], benign.mask);
    out.push_back(mean_of(sims.mean));
  }
  return out;
}

std::vector<double> attention_divergence(const model::EncodeOutput& benign,
                                         const model::EncodeOutput& perturbed) {
  require_outputs_match(benign, perturbed, "attention_divergence");
  const std::size_t batch = benign.batch;
  const std::size_t seq = benign.seq_len;
  std::vector<double> out;
  std::vector<double> q_row;
  std::vector<double> p_row;
  for (std::size_t l = 0; l < benign.attention.size(); ++l) {
    const auto& qa = benign.attention[l];
    const auto& pa = perturbed.attention[l];
    if (qa.shape() != pa.shape() || qa.rank() != 4 || qa.dim(0) != batch ||
        qa.dim(2) != seq || qa.dim(3) != seq) {
      throw InputError("attention_divergence: attention shape mismatch at layer " +
                       std::to_string(l));
    }
    const std::size_t heads = qa.dim(1);
    double total = 0.0;
    for (std::size_t b = 0; b < batch; ++b) {
      double example_total = 0.0;
      std::size_t rows = 0;
      for (std::size_t h = 0; h < heads; ++h) {
        for (std::size_t q = 0; q < seq; ++q) {
          if (benign.mask[b * seq + q] == 0) continue;
          q_row.clear();
          p_row.clear();
          const std::size_t base = ((b * heads + h) * seq + q) * seq;
          for (std::size_t k = 0; k < seq; ++k) {
            if (benign.mask[b * seq + k] == 0) continue;
            q_row.push_back(qa.data()[base + k]);
            p_row.push_back(pa.data()[base + k]);
          }
          example_total += ad::kernels::kl(q_row, p_row);
          ++rows;
        }
      }
      total += example_total / static_cast<double>(rows);
    }
    out.push_back(total / static_cast<double>(batch));
  }
  return out;
}

std::size_t early_phase_window(std::size_t max_steps) {
  return std::max<std::size_t>(1, (max_steps * 2) / 10);
}

double early_phase_average(std::span<const double> series, std::size_t max_steps) {
  if (series.empty()) throw InputError("early_phase_average: empty series");
  const std::size_t window = early_phase_window(max_steps);
  if (series.size() < window) {
    throw InputError("early_phase_average: series has " + std::to_string(series.size()) +
                     " entries, window needs " + std::to_string(window));
  }
  return mean_of(series.first(window));
}

// --- CSV -------------------------------------------------------------------

std::string format_double(double value) {
  char buffer[64];
  std::snprintf(buffer, sizeof(buffer), "%.17g", value);
  return buffer;
}

std::string csv_header(std::size_t num_layers) {
  std::string h = "step,mode,benign_loss,adv_loss,sim_lb,sim_mean,delta_norm";
  for (std::size_t l = 0; l <= num_layers; ++l) h += ",layer_sim_" + std::to_string(l);
  for (std::size_t l = 1; l <= num_layers; ++l) h += ",attn_kl_" + std::to_string(l);
  return h;
}

std::string csv_row(const MetricsRecord& r) {
  std::string row = std::to_string(r.step) + "," + r.mode;
  for (double v : {r.benign_loss, r.adv_loss, r.sim_lb, r.sim_mean, r.delta_norm}) {
    row += "," + format_double(v);
  }
  for (double v : r.layer_sim) row += "," + format_double(v);
  for (double v : r.attn_kl) row += "," + format_double(v);
  return row;
}

MetricsRecord parse_csv_row(const std::string& line, std::size_t num_layers) {
  std::vector<std::string> fields;
  std::stringstream in(line);
  std::string field;
  while (std::getline(in, field, ',')) fields.push_back(field);
  const std::size_t expected = 7 + (num_layers + 1) + num_layers;
  if (fields.size() != expected) {
    throw InputError("metrics CSV row has " + std::to_string(fields.size()) +
                     " fields, expected " + std::to_string(expected));
  }
  MetricsRecord r;
  std::size_t step = 0;
  const auto [ptr, ec] =
      std::from_chars(fields[0].data(), fields[0].data() + fields[0].size(), step);
  if (ec != std::errc() || ptr != fields[0].data() + fields[0].size()) {
    throw InputError("metrics CSV: bad step '" + fields[0] + "'");
  }
  r.step = step;
  r.mode = fields[1];
  r.benign_loss = parse_double(fields[2], "benign_loss");
  r.adv_loss = parse_double(fields[3], "adv_loss");
  r.sim_lb = parse_double(fields[4], "sim_lb");
  r.sim_mean = parse_double(fields[5], "sim_mean");
  r.delta_norm = parse_double(fields[6], "delta_norm");
  std::size_t i = 7;
  for (std::size_t l = 0; l <= num_layers; ++l) {
    r.layer_sim.push_back(parse_double(fields[i++], "layer_sim_" + std::to_string(l)));
  }
  for (std::size_t l = 1; l <= num_layers; ++l) {
    r.attn_kl.push_back(parse_double(fields[i++], "attn_kl_" + std::to_string(l)));
  }
  return r;
}

std::vector<MetricsRecord> read_csv(std::istream& in) {
  std::string header;
  if (!std::getline(in, header)) throw InputError("metrics CSV is empty");
  const std::size_t columns =
      static_cast<std::size_t>(std::count(header.begin(), header.end(), ',')) + 1;
  if (columns < 8 || (columns - 8) % 2 != 0) {
    throw InputError("metrics CSV header has an unexpected column count");
  }
  const std::size_t num_layers = (columns - 8) / 2;
  if (header != csv_header(num_layers)) throw InputError("metrics CSV header mismatch");
  std::vector<MetricsRecord> out;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty()) out.push_back(parse_csv_row(line, num_layers));
  }
  return out;
}

// --- summary ---------------------------------------------------------------

RunSummary summarize(std::span<const MetricsRecord> records, std::size_t max_steps) {
  if (records.empty()) throw InputError("summarize: no metrics records");
  RunSummary s;
  s.mode = records.front().mode;
  s.max_steps = max_steps;
  s.early_window = early_phase_window(max_steps);
  auto series = [&](auto field) {
    std::vector<double> v;
    for (const auto& r : records) v.push_back(field(r));
    return early_phase_average(v, max_steps);
  };
  s.benign_loss = series([](const MetricsRecord& r) { return r.benign_loss; });
  s.adv_loss = series([](const MetricsRecord& r) { return r.adv_loss; });
  s.sim_lb = series([](const MetricsRecord& r) { return r.sim_lb; });
  s.sim_mean = series([](const MetricsRecord& r) { return r.sim_mean; });
  s.delta_norm = series([](const MetricsRecord& r) { return r.delta_norm; });
  for (std::size_t l = 0; l < records.front().layer_sim.size(); ++l) {
    s.layer_sim.push_back(series([l](const MetricsRecord& r) { return r.layer_sim[l]; }));
  }
  for (std::size_t l = 0; l < records.front().attn_kl.size(); ++l) {
    s.attn_kl.push_back(series([l](const MetricsRecord& r) { return r.attn_kl[l]; }));
  }
  return s;
}

void to_json(nlohmann::json& j, const RunSummary& s) {
  j = nlohmann::json{{"mode", s.mode},
                     {"max_steps", s.max_steps},
                     {"early_window", s.early_window},
                     {"benign_loss", s.benign_loss},
                     {"adv_loss", s.adv_loss},
                     {"sim_lb", s.sim_lb},
                     {"sim_mean", s.sim_mean},
                     {"delta_norm", s.delta_norm},
                     {"train_accuracy", s.train_accuracy},
                     {"eval_accuracy", s.eval_accuracy},
                     {"eval_loss", s.eval_loss},
                     {"degenerate_similarity_tokens", s.degenerate_similarity_tokens},
                     {"config", s.config}};
  for (std::size_t l = 0; l < s.layer_sim.size(); ++l) {
    j["layer_sim_" + std::to_string(l)] = s.layer_sim[l];
  }
  for (std::size_t l = 0; l < s.attn_kl.size(); ++l) {
    j["attn_kl_" + std::to_string(l + 1)] = s.attn_kl[l];
  }
}

}  // namespace creat::metrics
