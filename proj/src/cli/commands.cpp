#include "creat/cli/commands.hpp"

#include <atomic>
#include <cctype>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <iomanip>
#include <mutex>
#include <ostream>
#include <sstream>
#include <thread>

#include "creat/cli/gradcheck.hpp"
#include "creat/common.hpp"
#include "creat/log.hpp"
#include "creat/model/checkpoint.hpp"
#include "creat/train/probe.hpp"

#ifndef CREAT_VERSION
#define CREAT_VERSION "0.0.0"
#endif
#ifndef CREAT_BUILD_ID
#define CREAT_BUILD_ID "unknown"
#endif

namespace creat::cli {

namespace fs = std::filesystem;
using metrics::format_double;

namespace {

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw InputError("cannot write " + path.string());
  out << text;
  if (!out) throw InputError("write failed: " + path.string());
}

std::string dir_name(const std::string& label) {
  std::string out = label;
  for (char& c : out) {
    const bool plain = std::isalnum(static_cast<unsigned char>(c)) || c == '-' || c == '_' ||
                       c == '.';
    if (!plain) c = '_';
  }
  return out;
}

ExperimentConfig load_for(const CommandOptions& options) {
  if (options.config_path.empty()) throw ConfigError("--config is required");
  return apply_overrides(load_config(options.config_path), options);
}

fs::path output_root(const ExperimentConfig& config) {
  if (config.output_dir.empty()) {
    throw ConfigError("no output directory: set output_dir in the config or pass --out");
  }
  return config.output_dir;
}

model::ModelParams load_initial(const ExperimentConfig& config) {
  return model::load_checkpoint(config.init_checkpoint);
}

double mean_of(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x;
  return v.empty() ? std::nan("") : s / static_cast<double>(v.size());
}

// Unbiased sample variance; 0 for a single run.
double variance_of(const std::vector<double>& v) {
  if (v.size() < 2) return v.empty() ? std::nan("") : 0.0;
  const double m = mean_of(v);
  double s = 0.0;
  for (double x : v) s += (x - m) * (x - m);
  return s / static_cast<double>(v.size() - 1);
}

}  // namespace

std::string version_string() {
  return std::string("creat ") + CREAT_VERSION + " (" + CREAT_BUILD_ID + ")";
}

ExperimentConfig apply_overrides(ExperimentConfig config, const CommandOptions& options) {
  if (options.seed) {
    config.train.seed = *options.seed;
    config.seeds = {*options.seed};
  }
  if (!options.out_dir.empty()) config.output_dir = options.out_dir;
  config.validate();
  return config;
}

std::size_t grid_threads() {
  const char* env = std::getenv("CREAT_THREADS");
  if (env == nullptr || *env == '\0') return 1;
  char* end = nullptr;
  const long v = std::strtol(env, &end, 10);
  if (*end != '\0' || v < 1) {
    throw ConfigError(std::string("CREAT_THREADS must be a positive integer, got '") + env +
                      "'");
  }
  return static_cast<std::size_t>(v);
}

RunOutcome run_experiment(const ExperimentConfig& config, const fs::path& dir,
                          const tasks::Dataset* data) {
  RunOutcome outcome;
  fs::create_directories(dir);
  write_text(dir / kConfigEcho, serialize(config).dump(2) + "\n");

  std::ofstream csv(dir / kMetricsFile, std::ios::binary | std::ios::trunc);
  if (!csv) throw InputError("cannot write " + (dir / kMetricsFile).string());
  csv << metrics::csv_header(config.model.num_layers) << '\n';

  train::TrainHooks hooks;
  hooks.on_step = [&csv](const metrics::MetricsRecord& r, const train::StepDiagnostics&,
                         const model::ModelParams&) {
    csv << metrics::csv_row(r) << '\n';
  };

  std::optional<model::ModelParams> initial;
  if (!config.init_checkpoint.empty()) initial = load_initial(config);

  try {
    const tasks::Dataset generated = data ? tasks::Dataset{} : tasks::generate(config.train.task);
    const tasks::Dataset& dataset = data ? *data : generated;
    train::TrainResult result = train::train_on(config.train, config.model, dataset, hooks,
                                                initial ? &*initial : nullptr);
    csv.flush();
    result.summary.config = serialize(config);
    nlohmann::json summary = result.summary;
    write_text(dir / kSummaryFile, summary.dump(2) + "\n");
    model::save_checkpoint(dir / kCheckpointFile, result.params);
    outcome.ok = true;
    outcome.summary = std::move(result.summary);
  } catch (const train::TrainingAborted& e) {
    csv.flush();
    outcome.aborted = true;
    outcome.error = e.what();
  }
  return outcome;
}

int cmd_train(const CommandOptions& options, std::ostream& out, std::ostream& err) {
  ExperimentConfig config;
  fs::path dir;
  try {
    config = load_for(options);
    dir = output_root(config);
  } catch (const std::invalid_argument& e) {
    err << "error: " << e.what() << '\n';
    return kExitConfig;
  }
  try {
    const RunOutcome outcome = run_experiment(config, dir);
    if (!outcome.ok) {
      err << "error: " << outcome.error << '\n'
          << "partial metrics kept in " << (dir / kMetricsFile).string() << '\n';
      return kExitAborted;
    }
    if (!options.quiet) {
      out << "run directory: " << dir.string() << '\n'
          << "train_accuracy " << format_double(outcome.summary.train_accuracy)
          << " eval_accuracy " << format_double(outcome.summary.eval_accuracy) << '\n';
    }
    return kExitOk;
  } catch (const ConfigError& e) {
    err << "error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kExitFailed;
  }
}

int cmd_compare(const CommandOptions& options, std::ostream& out, std::ostream& err) {
  ExperimentConfig config;
  fs::path root;
  std::size_t threads = 1;
  try {
    config = load_for(options);
    root = output_root(config);
    threads = grid_threads();
    if (config.grid.size() < 2) throw ConfigError("compare needs at least 2 entries in modes");
  } catch (const std::invalid_argument& e) {
    err << "error: " << e.what() << '\n';
    return kExitConfig;
  }

  struct Cell {
    std::size_t entry;
    std::uint64_t seed;
    RunOutcome outcome;
  };
  std::vector<Cell> cells;
  for (std::size_t e = 0; e < config.grid.size(); ++e) {
    for (std::uint64_t s : config.seeds) cells.push_back(Cell{e, s, {}});
  }

  tasks::Dataset data;
  try {
    data = tasks::generate(config.train.task);
  } catch (const std::invalid_argument& e) {
    err << "error: " << e.what() << '\n';
    return kExitConfig;
  }

  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i = next++; i < cells.size(); i = next++) {
      Cell& cell = cells[i];
      const GridEntry& entry = config.grid[cell.entry];
      ExperimentConfig run = config;
      run.train.attack = entry.attack;
      run.train.seed = cell.seed;
      run.seeds = {cell.seed};
      run.grid = {entry};
      const fs::path dir = root / dir_name(entry.label) / ("seed-" + std::to_string(cell.seed));
      run.output_dir = dir.string();
      try {
        cell.outcome = run_experiment(run, dir, &data);
      } catch (const std::exception& e) {
        cell.outcome.ok = false;
        cell.outcome.error = e.what();
      }
    }
  };
  std::vector<std::thread> pool;
  for (std::size_t t = 1; t < std::min(threads, cells.size()); ++t) pool.emplace_back(worker);
  worker();
  for (auto& t : pool) t.join();

  std::ostringstream report;
  report << "label,mode,runs,failed,eval_acc_mean,eval_acc_var,train_acc_mean,"
            "benign_loss_early,adv_loss_early,sim_lb_early,sim_mean_early,failed_seeds\n";
  std::ostringstream scatter;
  scatter << "label,seed,sim_lb,sim_mean,benign_loss,adv_loss,eval_accuracy\n";
  bool all_ok = true;
  for (std::size_t e = 0; e < config.grid.size(); ++e) {
    std::vector<double> eval_acc, train_acc, benign, adv, sim_lb, sim_mean;
    std::string failed_seeds;
    std::size_t failed = 0;
    for (const Cell& cell : cells) {
      if (cell.entry != e) continue;
      if (!cell.outcome.ok) {
        ++failed;
        all_ok = false;
        failed_seeds += (failed_seeds.empty() ? "" : ";") + std::to_string(cell.seed);
        err << "run " << config.grid[e].label << " seed " << cell.seed
            << " failed: " << cell.outcome.error << '\n';
        continue;
      }
      const auto& s = cell.outcome.summary;
      eval_acc.push_back(s.eval_accuracy);
      train_acc.push_back(s.train_accuracy);
      benign.push_back(s.benign_loss);
      adv.push_back(s.adv_loss);
      sim_lb.push_back(s.sim_lb);
      sim_mean.push_back(s.sim_mean);
      scatter << config.grid[e].label << ',' << cell.seed << ',' << format_double(s.sim_lb)
              << ',' << format_double(s.sim_mean) << ',' << format_double(s.benign_loss)
              << ',' << format_double(s.adv_loss) << ',' << format_double(s.eval_accuracy)
              << '\n';
    }
    report << config.grid[e].label << ',' << attack::to_string(config.grid[e].attack.mode)
           << ',' << config.seeds.size() << ',' << failed << ','
           << format_double(mean_of(eval_acc)) << ',' << format_double(variance_of(eval_acc))
           << ',' << format_double(mean_of(train_acc)) << ',' << format_double(mean_of(benign))
           << ',' << format_double(mean_of(adv)) << ',' << format_double(mean_of(sim_lb))
           << ',' << format_double(mean_of(sim_mean)) << ',' << failed_seeds << '\n';
  }
  try {
    fs::create_directories(root);
    write_text(root / "report.csv", report.str());
    write_text(root / "scatter.csv", scatter.str());
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kExitFailed;
  }
  if (!options.quiet) out << report.str();
  return all_ok ? kExitOk : kExitFailed;
}

int cmd_gradcheck(const CommandOptions& options, std::ostream& out, std::ostream&) {
  const auto results = run_gradcheck();
  bool ok = true;
  for (const auto& r : results) {
    ok = ok && r.passed;
    if (options.quiet && r.passed) continue;
    out << std::left << std::setw(34) << r.name << ' ' << std::setw(24)
        << format_double(r.max_relative_error) << (r.passed ? "PASS" : "FAIL") << '\n';
  }
  out << (ok ? "gradcheck passed" : "gradcheck FAILED") << " (" << results.size()
      << " checks, tolerance " << format_double(kGradcheckTolerance) << ")\n";
  return ok ? kExitOk : kExitFailed;
}

int cmd_probe(const CommandOptions& options, std::ostream& out, std::ostream& err) {
  ExperimentConfig config;
  model::ModelParams params;
  tasks::Dataset data;
  try {
    config = load_for(options);
    if (options.checkpoint.empty()) throw ConfigError("--checkpoint is required for probe");
    const model::ModelConfig expected{config.model, train::decoder_for(config.train.task)};
    params = model::load_checkpoint(options.checkpoint, expected);
    data = tasks::generate(config.train.task);
  } catch (const std::invalid_argument& e) {
    err << "error: " << e.what() << '\n';
    return kExitConfig;
  }

  const std::size_t layers = config.model.num_layers;
  std::ostringstream csv;
  csv << "label,mode,examples,sim_lb,sim_mean";
  for (std::size_t l = 0; l <= layers; ++l) csv << ",layer_sim_" << l;
  for (std::size_t l = 1; l <= layers; ++l) csv << ",attn_kl_" << l;
  csv << '\n';
  try {
    for (const auto& entry : config.grid) {
      train::ProbeResult r = train::probe(params, data.eval, entry.attack,
                                          config.train.batch_size, config.train.seed);
      csv << entry.label << ',' << attack::to_string(r.mode) << ',' << r.examples << ','
          << format_double(r.sim_lb) << ',' << format_double(r.sim_mean);
      for (double v : r.layer_sim) csv << ',' << format_double(v);
      for (double v : r.attn_kl) csv << ',' << format_double(v);
      csv << '\n';
    }
    if (!config.output_dir.empty()) {
      fs::create_directories(config.output_dir);
      write_text(fs::path(config.output_dir) / "probe.csv", csv.str());
    }
  } catch (const NumericError& e) {
    err << "error: " << e.what() << '\n';
    return kExitAborted;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kExitFailed;
  }
  if (!options.quiet || config.output_dir.empty()) out << csv.str();
  return kExitOk;
}

}  // namespace creat::cli
