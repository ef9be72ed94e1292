#include <doctest.h>

#include "creat/attack/attack.hpp"
#include "creat/cli/gradcheck.hpp"
#include "support.hpp"

using namespace creat;
using ad::Graph;
using ad::Tensor;
using attack::AttackConfig;
using attack::AttackMode;
using attack::Perturbation;

namespace {

// Benign pass plus everything run_attack needs, kept alive together.
struct Fixture {
  model::ModelParams params;
  model::Batch batch;
  Graph graph{false};
  Tensor x;
  model::EncodeOutput anchor;

  explicit Fixture(model::ModelConfig cfg, std::uint64_t seed = 1, double scale = 0.5)
      : params(model::init_params(cfg, seed)), batch(testing::small_batch()) {
    testing::scale_params(params, scale, seed);
    x = model::embed(graph, params, batch);
    anchor = model::encode(graph, x, batch.mask, params, model::DropoutMode::disabled());
  }
  attack::AttackProblem problem() { return {params, batch, x, anchor}; }
  double objective(const Tensor& delta, const AttackConfig& cfg) {
    Graph g(false);
    return attack::attack_objective(g, problem(), delta, cfg).item();
  }
};

AttackConfig make(AttackMode mode, std::size_t k = 1, double eps = 0.1, double alpha = 0.1,
                  double tau = 1.0) {
  AttackConfig c;
  c.mode = mode;
  c.ascent_steps = k;
  c.decision_boundary = eps;
  c.ascent_step_size = alpha;
  c.temperature = tau;
  return c;
}

Perturbation from_values(std::vector<double> v, std::size_t batch, std::size_t seq,
                         std::size_t width) {
  std::vector<std::uint8_t> mask(batch * seq, 1);
  return {Tensor::from({batch, seq, width}, std::move(v)), mask};
}

}  // namespace

TEST_CASE("init_perturbation stays in the ball and respects padding") {
  const std::vector<std::uint8_t> mask = {1, 1, 1, 0, 1, 1, 0, 0};
  auto a = attack::init_perturbation(2, 4, 8, mask, 0.1, 7);
  auto b = attack::init_perturbation(2, 4, 8, mask, 0.1, 7);
  auto c = attack::init_perturbation(2, 4, 8, mask, 0.1, 8);
  CHECK(testing::values(a.delta) == testing::values(b.delta));
  CHECK(testing::values(a.delta) != testing::values(c.delta));
  CHECK(a.padding_violations() == 0);
  for (double n : a.example_norms()) CHECK(n <= 0.1 + 1e-9);

  SUBCASE("1000 draws of shape [1,4,8]") {
    const std::vector<std::uint8_t> full(4, 1);
    for (std::uint64_t s = 0; s < 1000; ++s) {
      auto d = attack::init_perturbation(1, 4, 8, full, 0.1, s);
      CHECK(d.max_norm() <= 0.1);
      for (double v : d.delta.data()) CHECK(std::abs(v) <= 0.1 / std::sqrt(32.0));
    }
  }
}

TEST_CASE("project examples") {
  // norm 0.05 and norm 0.2 examples side by side
  auto p = from_values({0.03, 0.04, 0.12, 0.16}, 2, 1, 2);
  auto q = attack::project(p, 0.1);
  CHECK(q.delta.at(0) == 0.03);
  CHECK(q.delta.at(1) == 0.04);
  const auto norms = q.example_norms();
  CHECK(std::abs(norms[1] - 0.1) <= 1e-12);
  CHECK(std::abs(q.delta.at(2) / q.delta.at(3) - 0.75) < 1e-15);

  auto z = attack::project(from_values({0.0, 0.0}, 1, 1, 2), 0.1);
  CHECK(z.delta.at(0) == 0.0);
  CHECK(z.delta.at(1) == 0.0);

  SUBCASE("padding stays zero") {
    Perturbation r{Tensor::from({1, 2, 1}, {5.0, 3.0}), {1, 0}};
    auto s = attack::project(r, 1.0);
    CHECK(s.delta.at(1) == 0.0);
    CHECK(s.delta.at(0) == 1.0);  // norm measured over real tokens only
  }
}

TEST_CASE("pgd_step") {
  SUBCASE("zero gradient leaves delta unchanged") {
    auto d = from_values({0.01, -0.02, 0.03, 0.0}, 1, 2, 2);
    attack::PgdStepInfo info;
    const std::vector<double> g(4, 0.0);
    auto n = attack::pgd_step(d, g, 0.1, 0.1, &info);
    CHECK(testing::values(n.delta) == testing::values(d.delta));
    CHECK(info.zero_gradient_examples == 1);
  }
  SUBCASE("linear objective: one normalized step along c") {
    const std::vector<double> c = {3.0, -4.0, 0.0, 12.0};  // norm 13
    auto zero = from_values(std::vector<double>(4, 0.0), 1, 2, 2);
    auto n = attack::pgd_step(zero, c, 0.05, 0.1);
    for (std::size_t i = 0; i < 4; ++i) CHECK(std::abs(n.delta.at(i) - 0.05 * c[i] / 13.0) < 1e-14);
    // alpha past the boundary: lands on the sphere in the same direction
    auto far = attack::pgd_step(zero, c, 0.5, 0.1);
    for (std::size_t i = 0; i < 4; ++i) CHECK(std::abs(far.delta.at(i) - 0.1 * c[i] / 13.0) < 1e-14);
  }
  SUBCASE("result is in the ball and padding is re-zeroed") {
    std::mt19937_64 rng(3);
    Perturbation d{Tensor::zeros({2, 3, 4}), {1, 1, 0, 1, 0, 0}};
    for (int it = 0; it < 20; ++it) {
      auto g = testing::randn({2, 3, 4}, rng);
      d = attack::pgd_step(d, g.data(), 0.07, 0.1);
      CHECK(d.padding_violations() == 0);
      for (double n : d.example_norms()) CHECK(n <= 0.1 + 1e-9);
    }
  }
  SUBCASE("wrong gradient size") {
    auto d = from_values({0.0, 0.0}, 1, 1, 2);
    const std::vector<double> g(3, 1.0);
    CHECK_THROWS_AS(attack::pgd_step(d, g, 0.1, 0.1), ConfigError);
  }
}

TEST_CASE("attack objective identities") {
  Fixture f(testing::small_model());
  const Tensor zero = Tensor::zeros({2, 6, 8});
  Graph g(false);
  const double benign = model::task_loss(g, f.anchor, f.params, f.batch).item();

  CHECK(std::abs(f.objective(zero, make(AttackMode::AT)) - benign) < 1e-15);
  CHECK(std::abs(f.objective(zero, make(AttackMode::CreAT, 1, 0.1, 0.1, 2.5)) - (benign - 2.5)) < 1e-12);
  CHECK(std::abs(f.objective(zero, make(AttackMode::CreAT_minus)) + 1.0) < 1e-12);

  auto d = attack::init_perturbation(2, 6, 8, f.batch.mask, 0.5, 3);
  CHECK(f.objective(d.delta, make(AttackMode::CreAT, 1, 0.1, 0.1, 0.0)) ==
        f.objective(d.delta, make(AttackMode::AT)));

  CHECK_THROWS_AS(f.objective(zero, make(AttackMode::RPT)), ConfigError);
  CHECK_THROWS_AS(f.objective(zero, make(AttackMode::CreAT, 1, 0.1, 0.1, -1.0)), ConfigError);
}

TEST_CASE("attack objective gradient with respect to delta") {
  Fixture f(testing::small_model(2, 8, 2), 5);
  auto d0 = attack::init_perturbation(2, 6, 8, f.batch.mask, 1.0, 5);
  for (auto mode : {AttackMode::AT, AttackMode::CreAT, AttackMode::CreAT_minus}) {
    CAPTURE(attack::to_string(mode));
    Tensor d = d0.delta.clone();
    d.set_requires_grad(true);
    const auto cfg = make(mode, 1, 1.0, 1.0, 1.5);
    const double err = cli::max_relative_error(
        [&](Graph& g, const std::vector<Tensor>& in) {
          return attack::attack_objective(g, f.problem(), in[0], cfg);
        },
        {d});
    CHECK(err <= 1e-5);
  }
}

TEST_CASE("run_attack degenerate modes") {
  Fixture f(testing::small_model());
  model::ForwardCounter counter;
  auto problem = f.problem();
  problem.counter = &counter;

  attack::AttackTrace none_trace;
  auto none = attack::run_attack(problem, make(AttackMode::none), 1, &none_trace);
  for (double v : none.delta.data()) CHECK(v == 0.0);

  attack::AttackTrace rpt_trace;
  auto rpt = attack::run_attack(problem, make(AttackMode::RPT, 3), 9, &rpt_trace);
  CHECK(rpt_trace.backward_passes == 0);
  CHECK(rpt_trace.forward_passes == 0);
  auto init = attack::init_perturbation(2, 6, 8, f.batch.mask, 0.1, 9);
  CHECK(testing::values(rpt.delta) == testing::values(init.delta));

  auto at0 = attack::run_attack(problem, make(AttackMode::AT, 0), 9);
  CHECK(testing::values(at0.delta) == testing::values(rpt.delta));
  CHECK(counter.count == 0);

  attack::AttackTrace at_trace;
  attack::run_attack(problem, make(AttackMode::AT, 4), 9, &at_trace);
  CHECK(at_trace.forward_passes == 4);
  CHECK(at_trace.backward_passes == 4);
  CHECK(at_trace.objective_values.size() == 4);
  CHECK(counter.count == 4);
}

TEST_CASE("CreAT at zero temperature reproduces AT") {
  Fixture f(testing::small_model(), 12);
  for (std::size_t k : {1u, 2u, 5u}) {
    auto a = attack::run_attack(f.problem(), make(AttackMode::AT, k), 77);
    auto c = attack::run_attack(f.problem(), make(AttackMode::CreAT, k, 0.1, 0.1, 0.0), 77);
    CHECK(testing::max_abs_diff(a.delta.data(), c.delta.data()) <= 1e-12);
  }
}

TEST_CASE("run_attack keeps the ball, the padding and the parameters") {
  Fixture f(testing::small_model(), 14);
  for (const auto& p : f.params.all()) {
    for (double& v : p.impl()->grad) v = 0.25;
  }
  std::vector<std::vector<double>> values_before, grads_before;
  for (const auto& p : f.params.all()) {
    values_before.push_back(testing::values(p));
    grads_before.push_back(testing::grads(p));
  }
  for (auto mode : {AttackMode::AT, AttackMode::CreAT, AttackMode::CreAT_minus}) {
    auto d = attack::run_attack(f.problem(), make(mode, 3, 0.1, 0.1, 2.0), 4);
    CHECK(d.padding_violations() == 0);
    for (double n : d.example_norms()) CHECK(n <= 0.1 + 1e-9);
  }
  const auto after = f.params.all();
  for (std::size_t i = 0; i < after.size(); ++i) {
    CHECK(testing::values(after[i]) == values_before[i]);
    CHECK(testing::grads(after[i]) == grads_before[i]);
  }
}

TEST_CASE("CreAT moves the representation further than AT") {
  Fixture f(testing::small_model(2, 8, 2), 15, 0.6);
  auto at = attack::run_attack(f.problem(), make(AttackMode::AT, 3, 1.0, 0.5), 2);
  auto cre = attack::run_attack(f.problem(), make(AttackMode::CreAT_minus, 3, 1.0, 0.5), 2);
  auto sim = [&](const Perturbation& d) {
    Graph g(false);
    auto out = model::encode(g, g.add(f.x, d.delta), f.batch.mask, f.params,
                             model::DropoutMode::disabled());
    return attack::masked_mean_similarity(g, f.anchor.final_hidden, out.final_hidden,
                                          f.batch.mask).item();
  };
  CHECK(sim(cre) < sim(at));
}

TEST_CASE("convex case: ascent never lowers the objective") {
  // identity encoder + linear classifier: cross-entropy is convex in delta
  auto cfg = testing::small_model(0);
  int monotone = 0;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Fixture f(cfg, seed, 1.0);
    const auto at = make(AttackMode::AT, 1, 0.5, 0.2);
    auto d = attack::init_perturbation(2, 6, 8, f.batch.mask, 0.5, seed);
    double prev = f.objective(d.delta, at);
    const double first = prev;
    bool ok = true;
    for (int j = 0; j < 5; ++j) {
      d = attack::run_attack(f.problem(), make(AttackMode::AT, j + 1, 0.5, 0.2), seed);
      const double v = f.objective(d.delta, at);
      ok &= v - prev >= -1e-10;
      prev = v;
    }
    ok &= prev >= first;
    monotone += ok;
  }
  CHECK(monotone == 20);
}

TEST_CASE("attack config") {
  CHECK(make(AttackMode::RPT, 5).effective_steps() == 0);
  CHECK(make(AttackMode::none, 5).effective_steps() == 0);
  CHECK(make(AttackMode::CreAT, 2).effective_steps() == 2);
  CHECK_THROWS_AS(make(AttackMode::AT, 1, 0.0).validate(), ConfigError);
  CHECK_THROWS_AS(make(AttackMode::AT, 1, 0.1, -0.1).validate(), ConfigError);
  for (auto m : {AttackMode::none, AttackMode::RPT, AttackMode::AT, AttackMode::CreAT,
                 AttackMode::CreAT_minus}) {
    CHECK(attack::attack_mode_from_string(attack::to_string(m)) == m);
  }
  CHECK_THROWS_AS(attack::attack_mode_from_string("PGD"), ConfigError);
}
