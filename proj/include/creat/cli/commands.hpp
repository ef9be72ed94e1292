#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "creat/cli/config.hpp"
#include "creat/metrics/metrics.hpp"

namespace creat::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitFailed = 1;   // work ran but did not all succeed
inline constexpr int kExitConfig = 2;   // invalid config, arguments or checkpoint
inline constexpr int kExitAborted = 3;  // a training run hit a non-finite value

struct CommandOptions {
  std::string config_path;
  std::string out_dir;                 // overrides output_dir
  std::optional<std::uint64_t> seed;   // overrides train.seed and the seed list
  std::string checkpoint;              // probe only
  bool quiet = false;
};

std::string version_string();

// File names inside a run directory.
inline constexpr const char* kMetricsFile = "metrics.csv";
inline constexpr const char* kSummaryFile = "summary.json";
inline constexpr const char* kCheckpointFile = "checkpoint.bin";
inline constexpr const char* kConfigEcho = "config.json";

struct RunOutcome {
  bool ok = false;
  bool aborted = false;
  std::string error;
  metrics::RunSummary summary;
};

// Trains one configuration into `dir`: metrics CSV (streamed row by row, so a
// failed run keeps its rows), summary JSON, checkpoint and a config echo.
RunOutcome run_experiment(const ExperimentConfig& config, const std::filesystem::path& dir,
                          const tasks::Dataset* data = nullptr);

// Applies --seed and --out to a loaded config.
ExperimentConfig apply_overrides(ExperimentConfig config, const CommandOptions& options);

// Number of grid workers from CREAT_THREADS (default 1).
std::size_t grid_threads();

int cmd_train(const CommandOptions& options, std::ostream& out, std::ostream& err);
int cmd_compare(const CommandOptions& options, std::ostream& out, std::ostream& err);
int cmd_gradcheck(const CommandOptions& options, std::ostream& out, std::ostream& err);
int cmd_probe(const CommandOptions& options, std::ostream& out, std::ostream& err);

}  // namespace creat::cli
