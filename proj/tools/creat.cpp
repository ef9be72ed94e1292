#include <iostream>

#include <CLI11.hpp>

#include "creat/cli/commands.hpp"
#include "creat/log.hpp"

int main(int argc, char** argv) {
  using namespace creat::cli;

  CLI::App app{"Embedding-space adversarial training laboratory"};
  app.set_version_flag("--version", version_string());
  app.require_subcommand(1);

  CommandOptions options;
  std::uint64_t seed = 0;
  auto add_common = [&](CLI::App* cmd, bool needs_config) {
    auto* config = cmd->add_option("--config", options.config_path, "JSON config file");
    if (needs_config) config->required()->check(CLI::ExistingFile);
    cmd->add_option("--out", options.out_dir, "Output directory (overrides output_dir)");
    cmd->add_option("--seed", seed, "Seed (overrides train.seed and the seed list)");
    cmd->add_flag("--quiet", options.quiet, "Suppress progress output and warnings");
  };

  CLI::App* train = app.add_subcommand("train", "Train one configuration");
  add_common(train, true);
  CLI::App* compare = app.add_subcommand("compare", "Run a mode x seed grid and report");
  add_common(compare, true);
  CLI::App* gradcheck = app.add_subcommand("gradcheck", "Finite-difference gradient checks");
  gradcheck->add_flag("--quiet", options.quiet, "Only print failures and the verdict");
  CLI::App* probe = app.add_subcommand("probe", "Layer-wise attack probe of a checkpoint");
  add_common(probe, true);
  probe->add_option("--checkpoint", options.checkpoint, "Checkpoint to probe")
      ->required()
      ->check(CLI::ExistingFile);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitConfig;
  }

  for (CLI::App* cmd : {train, compare, probe}) {
    if (cmd->parsed() && cmd->count("--seed") > 0) options.seed = seed;
  }
  creat::log::set_quiet(options.quiet);

  if (train->parsed()) return cmd_train(options, std::cout, std::cerr);
  if (compare->parsed()) return cmd_compare(options, std::cout, std::cerr);
  if (gradcheck->parsed()) return cmd_gradcheck(options, std::cout, std::cerr);
  return cmd_probe(options, std::cout, std::cerr);
}
