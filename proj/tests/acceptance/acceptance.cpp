// Acceptance run: one PASS/FAIL line per criterion. Usage: acceptance [work_dir]

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "creat/attack/attack.hpp"
#include "creat/cli/commands.hpp"
#include "creat/cli/gradcheck.hpp"
#include "creat/log.hpp"
#include "creat/model/transformer.hpp"
#include "creat/tasks/tasks.hpp"
#include "creat/train/probe.hpp"
#include "creat/train/trainer.hpp"

using namespace creat;
namespace fs = std::filesystem;
using attack::AttackMode;

namespace {

// Toy setting shared by every training criterion.
constexpr double kEpsilon = 0.005;
constexpr double kTemperature = 1000.0;
constexpr std::size_t kSteps = 2000;
const std::vector<std::uint64_t> kSeeds = {0, 1, 2, 3, 4};

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point start) {
  return std::chrono::duration<double>(Clock::now() - start).count();
}

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.4g", v);
  return buf;
}

train::TrainConfig toy_config(AttackMode mode, std::uint64_t seed, std::size_t steps = kSteps) {
  train::TrainConfig c;
  c.max_steps = steps;
  c.seed = seed;
  c.attack.mode = mode;
  c.attack.decision_boundary = kEpsilon;
  c.attack.ascent_step_size = kEpsilon;
  c.attack.temperature = mode == AttackMode::CreAT ? kTemperature : 1.0;
  return c;
}

std::vector<double> flat_values(const model::ModelParams& p) {
  std::vector<double> out;
  for (const auto& t : p.all()) out.insert(out.end(), t.data().begin(), t.data().end());
  return out;
}

double max_abs_diff(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size()) return INFINITY;
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

double mean(const std::vector<double>& v) {
  return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

double sample_variance(const std::vector<double>& v) {
  const double m = mean(v);
  double s = 0.0;
  for (double x : v) s += (x - m) * (x - m);
  return s / static_cast<double>(v.size() - 1);
}

// One-sided comparison "low < high" (or <= when `allow_equal`) over seeds:
// every seed ordered, or the mean gap above twice the pooled standard error.
struct Ordering {
  bool pass = false;
  std::size_t ordered = 0;
  double gap = 0.0;
  double pooled_se = 0.0;
};

Ordering ordered(const std::vector<double>& low, const std::vector<double>& high,
                 bool allow_equal) {
  Ordering o;
  for (std::size_t i = 0; i < low.size(); ++i) {
    o.ordered += allow_equal ? low[i] <= high[i] : low[i] < high[i];
  }
  o.gap = mean(high) - mean(low);
  const double n = static_cast<double>(low.size());
  o.pooled_se = std::sqrt(sample_variance(low) / n + sample_variance(high) / n);
  o.pass = o.ordered == low.size() || o.gap > 2.0 * o.pooled_se;
  return o;
}

std::string describe(const Ordering& o, std::size_t n) {
  return std::to_string(o.ordered) + "/" + std::to_string(n) + " seeds ordered, gap " +
         fmt(o.gap) + ", 2*SE " + fmt(2.0 * o.pooled_se);
}

// Criteria finish out of order; the verdicts are printed sorted at the end.
struct Report {
  std::map<int, std::pair<bool, std::string>> lines;
  void line(int id, bool pass, const std::string& what) {
    lines[id] = {pass, what};
    std::cout << "  criterion " << id << " evaluated" << std::endl;
  }
  int print() const {
    int failed = 0;
    for (const auto& [id, entry] : lines) {
      std::cout << "criterion " << id << ": " << (entry.first ? "PASS" : "FAIL") << "  "
                << entry.second << '\n';
      failed += !entry.first;
    }
    std::cout << lines.size() - failed << "/" << lines.size() << " criteria passed"
              << std::endl;
    return failed;
  }
};

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

// --- criterion 1 -------------------------------------------------------------

void gradient_integrity(Report& r) {
  const auto start = Clock::now();
  const auto results = cli::run_gradcheck();
  const double elapsed = seconds_since(start);
  double worst = 0.0;
  std::size_t failed = 0;
  for (const auto& g : results) {
    worst = std::max(worst, g.max_relative_error);
    failed += !(g.passed && g.max_relative_error <= 1e-5);
  }
  r.line(1, failed == 0 && elapsed < 120.0,
         std::to_string(results.size()) + " checks, " + std::to_string(failed) +
             " failed, max relative error " + fmt(worst) + ", " + fmt(elapsed) + " s");
}

// --- criteria 2, 6, 7, 8, 10: the seeded grid --------------------------------

struct BallAudit {
  std::size_t checked = 0;
  std::size_t norm_violations = 0;
  std::size_t padding_violations = 0;
  double largest = 0.0;

  void inspect(const train::StepDiagnostics& d) {
    const auto& p = d.delta;
    const auto values = p.delta.data();
    const std::size_t width = p.width();
    const std::size_t seq = p.mask.size() / d.delta_example_norms.size();
    for (std::size_t b = 0; b < d.delta_example_norms.size(); ++b) {
      double sq = 0.0;
      for (std::size_t t = 0; t < seq; ++t) {
        for (std::size_t i = 0; i < width; ++i) {
          const double v = values[(b * seq + t) * width + i];
          sq += v * v;
          if (!p.mask[b * seq + t] && v != 0.0) ++padding_violations;
        }
      }
      const double norm = std::sqrt(sq);
      largest = std::max({largest, norm, d.delta_example_norms[b]});
      norm_violations += norm > kEpsilon + 1e-9 || d.delta_example_norms[b] > kEpsilon + 1e-9;
      ++checked;
    }
    padding_violations += d.padding_violations;
  }
};

struct NullAudit {
  std::size_t steps = 0;
  double worst_sim = 0.0;
  double worst_kl = 0.0;

  void sims(const std::vector<double>& v) {
    for (double s : v) worst_sim = std::max(worst_sim, std::abs(s - 1.0));
  }
  void kls(const std::vector<double>& v) {
    for (double k : v) worst_kl = std::max(worst_kl, std::abs(k));
  }
  void inspect(const metrics::MetricsRecord& rec) {
    ++steps;
    sims({rec.sim_lb, rec.sim_mean});
    sims(rec.layer_sim);
    kls(rec.attn_kl);
  }
  bool ok() const { return worst_sim <= 1e-12 && worst_kl <= 1e-12; }
};

struct RunRecord {
  train::TrainResult result;
  double seconds = 0.0;
  bool finite = true;
};

struct Grid {
  std::map<std::string, std::vector<RunRecord>> runs;  // label -> per seed
  BallAudit ball;
  NullAudit null_steps;
  double seconds = 0.0;
};

bool all_finite(const std::vector<metrics::MetricsRecord>& records) {
  for (const auto& r : records) {
    for (double v : {r.benign_loss, r.adv_loss, r.sim_lb, r.sim_mean, r.delta_norm}) {
      if (!std::isfinite(v)) return false;
    }
    for (double v : r.layer_sim) if (!std::isfinite(v)) return false;
    for (double v : r.attn_kl) if (!std::isfinite(v)) return false;
  }
  return true;
}

Grid run_grid() {
  Grid g;
  const model::EncoderConfig encoder;
  const auto data = tasks::generate(train::TrainConfig{}.task);
  const auto start = Clock::now();
  struct Cell {
    std::string label;
    AttackMode mode;
    std::vector<std::uint64_t> seeds;
  };
  const std::vector<Cell> cells = {{"none", AttackMode::none, kSeeds},
                                   {"RPT", AttackMode::RPT, kSeeds},
                                   {"AT", AttackMode::AT, kSeeds},
                                   {"CreAT", AttackMode::CreAT, kSeeds},
                                   {"CreAT_minus", AttackMode::CreAT_minus, {0}}};
  for (const auto& cell : cells) {
    for (std::uint64_t seed : cell.seeds) {
      train::TrainHooks hooks;
      hooks.on_step = [&](const metrics::MetricsRecord& rec, const train::StepDiagnostics& d,
                          const model::ModelParams&) {
        if (cell.mode == AttackMode::AT || cell.mode == AttackMode::CreAT) g.ball.inspect(d);
        if (cell.mode == AttackMode::none) g.null_steps.inspect(rec);
      };
      const auto run_start = Clock::now();
      RunRecord run;
      try {
        run.result = train::train_on(toy_config(cell.mode, seed), encoder, data, hooks);
        run.finite = all_finite(run.result.records) &&
                     run.result.records.size() == kSteps;
      } catch (const std::exception& e) {
        std::cerr << cell.label << " seed " << seed << ": " << e.what() << '\n';
        run.finite = false;
      }
      run.seconds = seconds_since(run_start);
      std::cout << "  trained " << cell.label << " seed " << seed << " in " << fmt(run.seconds)
                << " s, train acc " << fmt(run.result.summary.train_accuracy) << ", eval acc "
                << fmt(run.result.summary.eval_accuracy) << std::endl;
      g.runs[cell.label].push_back(std::move(run));
    }
  }
  g.seconds = seconds_since(start);
  return g;
}

std::vector<double> early(const Grid& g, const std::string& label,
                          double metrics::RunSummary::*field) {
  std::vector<double> out;
  for (const auto& run : g.runs.at(label)) out.push_back(run.result.summary.*field);
  return out;
}

void ball_invariant(Report& r, const Grid& g) {
  const auto& b = g.ball;
  r.line(2, b.checked > 0 && b.norm_violations == 0 && b.padding_violations == 0,
         std::to_string(b.checked) + " per-example norms checked, largest " + fmt(b.largest) +
             ", " + std::to_string(b.norm_violations) + " norm and " +
             std::to_string(b.padding_violations) + " padding violations");
}

void trend_similarity_and_loss(Report& r, const Grid& g) {
  const auto sim = ordered(early(g, "CreAT", &metrics::RunSummary::sim_lb),
                           early(g, "AT", &metrics::RunSummary::sim_lb), false);
  const auto loss = ordered(early(g, "RPT", &metrics::RunSummary::adv_loss),
                            early(g, "AT", &metrics::RunSummary::adv_loss), true);
  // single-core figure; the grid budget is stated for four cores
  r.line(6, sim.pass && loss.pass,
         "sim_lb CreAT < AT: " + describe(sim, kSeeds.size()) + "; adv_loss AT >= RPT: " +
             describe(loss, kSeeds.size()) + "; grid " + fmt(g.seconds / 60.0) +
             " min on one core");
}

void trend_attention(Report& r, const Grid& g, NullAudit& probe_null) {
  const auto& data = tasks::generate(train::TrainConfig{}.task);
  std::vector<double> at_kl, creat_kl;
  for (std::size_t i = 0; i < kSeeds.size(); ++i) {
    const auto& params = g.runs.at("none")[i].result.params;
    const auto at = toy_config(AttackMode::AT, kSeeds[i]).attack;
    const auto cre = toy_config(AttackMode::CreAT, kSeeds[i]).attack;
    const auto p_at = train::probe(params, data.eval, at, 64, kSeeds[i]);
    const auto p_cre = train::probe(params, data.eval, cre, 64, kSeeds[i]);
    at_kl.push_back(p_at.attn_kl.back());
    creat_kl.push_back(p_cre.attn_kl.back());

    attack::AttackConfig none = at;
    none.mode = AttackMode::none;
    const auto p_none = train::probe(params, data.eval, none, 64, kSeeds[i]);
    probe_null.sims({p_none.sim_lb, p_none.sim_mean});
    probe_null.sims(p_none.layer_sim);
    probe_null.kls(p_none.attn_kl);
  }
  const auto o = ordered(at_kl, creat_kl, true);
  r.line(7, o.pass,
         "final-layer attention KL CreAT >= AT on trained baselines: " +
             describe(o, kSeeds.size()) + ", means " + fmt(mean(creat_kl)) + " vs " +
             fmt(mean(at_kl)));
}

void null_checks(Report& r, const Grid& g, const NullAudit& probe_null) {
  const auto& s = g.null_steps;
  r.line(8, s.steps > 0 && s.ok() && probe_null.ok(),
         std::to_string(s.steps) + " training steps and " + std::to_string(kSeeds.size()) +
             " probes, max |sim-1| " + fmt(std::max(s.worst_sim, probe_null.worst_sim)) +
             ", max |KL| " + fmt(std::max(s.worst_kl, probe_null.worst_kl)));
}

void learnability(Report& r, const Grid& g) {
  const auto& base = g.runs.at("none").front().result.summary;
  bool all_complete = true;
  std::string incomplete;
  for (const auto& [label, runs] : g.runs) {
    for (std::size_t i = 0; i < runs.size(); ++i) {
      if (!runs[i].finite) {
        all_complete = false;
        incomplete += " " + label + "/seed-" + std::to_string(i);
      }
    }
  }
  r.line(10, base.train_accuracy >= 0.95 && base.eval_accuracy >= 0.90 && all_complete,
         "none seed 0: train " + fmt(base.train_accuracy) + ", eval " +
             fmt(base.eval_accuracy) + "; " +
             (all_complete ? std::string("every run finished ") + std::to_string(kSteps) +
                                 " finite steps"
                           : "incomplete:" + incomplete));
}

// --- criterion 3 -------------------------------------------------------------

void zero_temperature(Report& r) {
  const model::EncoderConfig encoder;
  struct Trace {
    std::vector<std::vector<double>> deltas, params;
  };
  auto traced = [&](AttackMode mode) {
    Trace t;
    auto cfg = toy_config(mode, 7, 100);
    cfg.attack.temperature = 0.0;
    train::TrainHooks hooks;
    hooks.on_step = [&](const metrics::MetricsRecord&, const train::StepDiagnostics& d,
                        const model::ModelParams& p) {
      t.deltas.emplace_back(d.delta.delta.data().begin(), d.delta.delta.data().end());
      t.params.push_back(flat_values(p));
    };
    train::train(cfg, encoder, hooks);
    return t;
  };
  const auto cre = traced(AttackMode::CreAT);
  const auto at = traced(AttackMode::AT);
  double delta_diff = 0.0, param_diff = 0.0;
  const bool same_length = cre.deltas.size() == 100 && at.deltas.size() == 100;
  for (std::size_t s = 0; same_length && s < 100; ++s) {
    delta_diff = std::max(delta_diff, max_abs_diff(cre.deltas[s], at.deltas[s]));
    param_diff = std::max(param_diff, max_abs_diff(cre.params[s], at.params[s]));
  }
  r.line(3, same_length && delta_diff <= 1e-12 && param_diff <= 1e-12,
         "100 steps, max |delta diff| " + fmt(delta_diff) + ", max |param diff| " +
             fmt(param_diff));
}

// --- criterion 4 -------------------------------------------------------------

void degenerate_equivalences(Report& r) {
  const model::EncoderConfig encoder;
  constexpr std::size_t steps = 200;
  auto run = [&](AttackMode mode, auto&& tweak) {
    auto cfg = toy_config(mode, 5, steps);
    tweak(cfg);
    return train::train(cfg, encoder);
  };
  const auto none = run(AttackMode::none, [](auto&) {});
  const auto lambda_one = run(AttackMode::CreAT, [](auto& c) { c.lambda = 1.0; });
  bool lambda_ok = flat_values(none.params) == flat_values(lambda_one.params);
  for (std::size_t i = 0; lambda_ok && i < steps; ++i) {
    lambda_ok = none.records[i].benign_loss == lambda_one.records[i].benign_loss;
  }

  const auto rpt = run(AttackMode::RPT, [](auto&) {});
  const auto at0 = run(AttackMode::AT, [](auto& c) { c.attack.ascent_steps = 0; });
  bool k0_ok = flat_values(rpt.params) == flat_values(at0.params);
  for (std::size_t i = 0; k0_ok && i < steps; ++i) {
    auto a = rpt.records[i];
    auto b = at0.records[i];
    a.mode = b.mode;
    k0_ok = a == b;
  }
  r.line(4, lambda_ok && k0_ok,
         std::string("lambda=1 vs none: ") + (lambda_ok ? "identical" : "differ") +
             "; AT k=0 vs RPT: " + (k0_ok ? "identical" : "differ") + " over " +
             std::to_string(steps) + " steps");
}

// --- criterion 5 -------------------------------------------------------------

void convex_monotonicity(Report& r) {
  model::ModelConfig cfg;
  cfg.encoder.num_layers = 0;
  cfg.encoder.dropout_rate = 0.0;
  tasks::TaskSpec spec;
  spec.num_train = 400;
  spec.num_eval = 10;
  const auto data = tasks::generate(spec);

  attack::AttackConfig at;
  at.mode = AttackMode::AT;
  at.ascent_steps = 5;
  at.decision_boundary = 1.0;
  at.ascent_step_size = 0.3;

  std::size_t monotone = 0;
  double worst = INFINITY;
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    auto params = model::init_params(cfg, seed);
    std::vector<std::size_t> idx(8);
    std::iota(idx.begin(), idx.end(), (seed * 8) % (spec.num_train - 8));
    const auto batch = tasks::make_batch(data.train, idx);
    ad::Graph graph(false);
    const auto x = model::embed(graph, params, batch);
    const auto anchor =
        model::encode(graph, x, batch.mask, params, model::DropoutMode::disabled());
    const attack::AttackProblem problem{params, batch, x, anchor};
    attack::AttackTrace trace;
    const auto delta = attack::run_attack(problem, at, seed, &trace);
    ad::Graph g(false);
    auto values = trace.objective_values;
    values.push_back(attack::attack_objective(g, problem, delta.delta, at).item());
    bool ok = values.size() == 6;
    for (std::size_t j = 1; j < values.size(); ++j) {
      worst = std::min(worst, values[j] - values[j - 1]);
      ok &= values[j] - values[j - 1] >= -1e-10;
    }
    monotone += ok;
  }
  r.line(5, monotone == 100,
         std::to_string(monotone) + "/100 identity-encoder instances non-decreasing over 5 "
         "steps, smallest increment " + fmt(worst));
}

// --- criterion 9 -------------------------------------------------------------

void determinism(Report& r, const fs::path& work) {
  nlohmann::json config = {
      {"task", {{"kind", "sequence_classification"}}},
      {"attack",
       {{"mode", "CreAT"},
        {"decision_boundary", kEpsilon},
        {"ascent_step_size", kEpsilon},
        {"temperature", kTemperature}}},
      {"train", {{"max_steps", 300}, {"seed", 11}}}};
  const auto path = work / "determinism.json";
  std::ofstream(path) << config.dump(2) << '\n';
  std::vector<fs::path> dirs = {work / "determinism-a", work / "determinism-b"};
  bool ran = true;
  for (const auto& d : dirs) {
    fs::remove_all(d);
    const std::string cmd = "CREAT_THREADS=1 \"" CREAT_CLI_PATH "\" train --quiet --config \"" +
                            path.string() + "\" --out \"" + d.string() + "\"";
    ran &= std::system(cmd.c_str()) == 0;
  }
  const bool csv = ran && slurp(dirs[0] / cli::kMetricsFile) == slurp(dirs[1] / cli::kMetricsFile) &&
                   !slurp(dirs[0] / cli::kMetricsFile).empty();
  const bool ckpt = ran &&
                    slurp(dirs[0] / cli::kCheckpointFile) == slurp(dirs[1] / cli::kCheckpointFile) &&
                    !slurp(dirs[0] / cli::kCheckpointFile).empty();
  r.line(9, csv && ckpt,
         std::string("two CLI train runs: ") + (ran ? "both exit 0" : "a run failed") +
             ", metrics CSV " + (csv ? "identical" : "differs") + ", checkpoint " +
             (ckpt ? "identical" : "differs"));
}

}  // namespace

int main(int argc, char** argv) {
  log::set_quiet(true);
  const fs::path work = argc > 1 ? fs::path(argv[1]) : fs::temp_directory_path() / "creat_acceptance";
  fs::create_directories(work);
  std::cout << "toy setting: epsilon = alpha = " << kEpsilon << ", tau = " << kTemperature
            << ", " << kSteps << " steps, seeds 0-4" << std::endl;

  Report r;
  gradient_integrity(r);
  zero_temperature(r);
  degenerate_equivalences(r);
  convex_monotonicity(r);
  determinism(r, work);

  const Grid grid = run_grid();
  NullAudit probe_null;
  ball_invariant(r, grid);
  trend_similarity_and_loss(r, grid);
  trend_attention(r, grid, probe_null);
  null_checks(r, grid, probe_null);
  learnability(r, grid);

  return r.print() == 0 ? 0 : 1;
}
