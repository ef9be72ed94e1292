#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>

#include "creat/common.hpp"
#include "creat/tasks/tasks.hpp"

using namespace creat;
using tasks::TaskKind;
using tasks::TaskSpec;

namespace {

TaskSpec classification(std::size_t train = 2000, std::size_t eval = 1000) {
  TaskSpec s;
  s.num_train = train;
  s.num_eval = eval;
  s.generator_seed = 3;
  return s;
}

TaskSpec mlm(std::size_t train = 2000, std::size_t eval = 500) {
  TaskSpec s;
  s.kind = TaskKind::toy_mlm;
  s.num_train = train;
  s.num_eval = eval;
  s.generator_seed = 4;
  return s;
}

std::vector<double> histogram(const tasks::Example& e, std::size_t vocab) {
  std::vector<double> h(vocab, 0.0);
  for (std::size_t i = 0; i < e.ids.size(); ++i) {
    if (e.mask[i]) h[e.ids[i]] += 1.0;
  }
  return h;
}

bool contains_run(const std::vector<std::size_t>& ids, const std::vector<std::size_t>& run) {
  return std::search(ids.begin(), ids.end(), run.begin(), run.end()) != ids.end();
}

}  // namespace

TEST_CASE("classification data is a pure function of its TaskSpec") {
  const auto spec = classification(300, 100);
  const auto a = tasks::generate(spec);
  const auto b = tasks::generate(spec);
  CHECK(a.train == b.train);
  CHECK(a.eval == b.eval);
  auto other = spec;
  other.generator_seed = 4;
  CHECK(tasks::generate(other).train != a.train);
}

TEST_CASE("classification splits are disjoint, balanced and well formed") {
  const auto spec = classification();
  tasks::MotifSet motifs;
  const auto data = tasks::generate_classification(spec, &motifs);
  CHECK(data.train.size() == 2000);
  CHECK(data.eval.size() == 1000);
  std::set<std::vector<std::size_t>> train_ids;
  for (const auto& e : data.train) train_ids.insert(e.ids);
  CHECK(train_ids.size() == data.train.size());
  for (const auto& e : data.eval) CHECK(train_ids.count(e.ids) == 0);

  std::vector<std::size_t> counts(spec.num_classes, 0);
  for (const auto& e : data.train) ++counts[e.label];
  CHECK(std::max(counts[0], counts[1]) - std::min(counts[0], counts[1]) <= 1);

  REQUIRE(motifs.class_orders.size() == 2);
  CHECK(motifs.class_orders[0] != motifs.class_orders[1]);
  for (const auto& e : data.train) {
    CHECK(e.ids[0] == tasks::kClsId);
    std::size_t real = 0;
    for (std::size_t i = 0; i < e.ids.size(); ++i) {
      CHECK(e.ids[i] < spec.vocab_size);
      if (e.mask[i]) {
        ++real;
        CHECK(e.ids[i] != tasks::kPadId);
        CHECK(e.ids[i] != tasks::mask_id(spec.vocab_size));
      } else {
        CHECK(e.ids[i] == tasks::kPadId);
      }
    }
    CHECK(real >= spec.min_length);
    // noise-free: the example carries its own class ordering
    CHECK(contains_run(e.ids, motifs.class_orders[e.label]));
  }
}

TEST_CASE("token histograms carry no label signal") {
  // Multinomial naive Bayes over token counts, fit on train, scored on eval.
  const auto spec = classification();
  const auto data = tasks::generate(spec);
  const std::size_t V = spec.vocab_size;
  std::vector<std::vector<double>> counts(2, std::vector<double>(V, 1.0));
  for (const auto& e : data.train) {
    const auto h = histogram(e, V);
    for (std::size_t v = 0; v < V; ++v) counts[e.label][v] += h[v];
  }
  std::vector<std::vector<double>> log_p(2, std::vector<double>(V));
  for (std::size_t c = 0; c < 2; ++c) {
    double total = 0.0;
    for (double x : counts[c]) total += x;
    for (std::size_t v = 0; v < V; ++v) log_p[c][v] = std::log(counts[c][v] / total);
  }
  std::size_t correct = 0;
  for (const auto& e : data.eval) {
    const auto h = histogram(e, V);
    double s0 = 0.0, s1 = 0.0;
    for (std::size_t v = 0; v < V; ++v) {
      s0 += h[v] * log_p[0][v];
      s1 += h[v] * log_p[1][v];
    }
    correct += (s1 > s0 ? 1u : 0u) == e.label;
  }
  const double acc = static_cast<double>(correct) / static_cast<double>(data.eval.size());
  MESSAGE("histogram oracle accuracy " << acc);
  CHECK(acc < 0.56);
  CHECK(acc > 0.44);
}

TEST_CASE("label noise flips about the configured fraction") {
  auto spec = classification(4000, 10);
  spec.noise_rate = 0.2;
  tasks::MotifSet motifs;
  const auto data = tasks::generate_classification(spec, &motifs);
  std::size_t flipped = 0;
  for (std::size_t i = 0; i < data.train.size(); ++i) flipped += data.train[i].label != i % 2;
  const double rate = static_cast<double>(flipped) / 4000.0;
  CHECK(rate > 0.17);
  CHECK(rate < 0.23);
}

TEST_CASE("task spec validation") {
  auto s = classification();
  s.pattern_length = 16;
  CHECK_THROWS_AS(tasks::generate(s), ConfigError);
  s = classification();
  s.noise_rate = 0.5;
  CHECK_THROWS_AS(s.validate(), ConfigError);
  s = classification();
  s.num_eval = 0;
  CHECK_THROWS_AS(s.validate(), ConfigError);
  s = classification();
  s.pattern_length = 2;
  s.num_classes = 3;
  CHECK_THROWS_AS(s.validate(), ConfigError);
  CHECK_THROWS_AS(tasks::task_kind_from_string("regression"), ConfigError);
}

TEST_CASE("toy MLM masking") {
  const auto spec = mlm();
  const auto a = tasks::generate(spec);
  CHECK(a.train == tasks::generate(spec).train);
  const std::size_t mask_token = tasks::mask_id(spec.vocab_size);
  for (const auto& e : a.train) {
    std::size_t real = 0;
    for (auto m : e.mask) real += m;
    const double expected = 0.15 * static_cast<double>(real - 1);
    CHECK(std::abs(static_cast<double>(e.targets.size()) - expected) <= 1.0);
    CHECK(!e.targets.empty());
    std::size_t masked = 0;
    for (std::size_t i = 0; i < e.ids.size(); ++i) masked += e.ids[i] == mask_token;
    CHECK(masked == e.targets.size());
    for (const auto& t : e.targets) {
      CHECK(t.position >= 1);
      CHECK(t.position < real);
      CHECK(e.ids[t.position] == mask_token);
      CHECK(t.token >= tasks::kFirstContentId);
      CHECK(t.token < mask_token);
    }
  }
}

TEST_CASE("a bigram oracle beats chance on masked targets") {
  const auto spec = mlm();
  const auto data = tasks::generate(spec);
  const std::size_t mask_token = tasks::mask_id(spec.vocab_size);
  // Unmask the training stream, then count successor frequencies.
  std::map<std::size_t, std::map<std::size_t, std::size_t>> next;
  for (const auto& e : data.train) {
    auto ids = e.ids;
    for (const auto& t : e.targets) ids[t.position] = t.token;
    for (std::size_t i = 2; i < ids.size(); ++i) {
      if (e.mask[i]) ++next[ids[i - 1]][ids[i]];
    }
  }
  std::size_t hits = 0, total = 0;
  for (const auto& e : data.eval) {
    for (const auto& t : e.targets) {
      const std::size_t prev = e.ids[t.position - 1];
      if (prev == mask_token || prev == tasks::kClsId) continue;
      ++total;
      const auto it = next.find(prev);
      if (it == next.end()) continue;
      const auto best = std::max_element(it->second.begin(), it->second.end(),
                                         [](auto& x, auto& y) { return x.second < y.second; });
      hits += best->first == t.token;
    }
  }
  const double acc = static_cast<double>(hits) / static_cast<double>(total);
  const double chance = 1.0 / static_cast<double>(spec.vocab_size - 3);
  MESSAGE("bigram oracle " << acc << " vs chance " << chance);
  CHECK(total > 100);
  CHECK(acc > 2.0 * chance);
}

TEST_CASE("make_batch stacks examples and renumbers targets") {
  const auto data = tasks::generate(mlm(10, 2));
  const std::size_t idx[] = {4, 7};
  const auto batch = tasks::make_batch(data.train, idx);
  CHECK(batch.size == 2);
  CHECK(batch.ids.size() == 2 * batch.seq_len);
  CHECK(std::equal(data.train[7].ids.begin(), data.train[7].ids.end(),
                   batch.ids.begin() + static_cast<std::ptrdiff_t>(batch.seq_len)));
  CHECK(batch.targets.size() == data.train[4].targets.size() + data.train[7].targets.size());
  CHECK(batch.targets.back().example == 1);
  CHECK(batch.targets.front().example == 0);
  CHECK_NOTHROW(batch.validate());
  CHECK_THROWS_AS(tasks::make_batch(data.train, std::span<const std::size_t>{}), InputError);
}

TEST_CASE("dataset dump and load round trip") {
  const auto dir = std::filesystem::temp_directory_path() / "creat_task_tests";
  std::filesystem::create_directories(dir);
  const auto cls = tasks::generate(classification(20, 5));
  tasks::save_examples(dir / "cls.jsonl", cls.train, TaskKind::sequence_classification);
  CHECK(tasks::load_examples(dir / "cls.jsonl") == cls.train);
  const auto lm = tasks::generate(mlm(20, 5));
  tasks::save_examples(dir / "mlm.jsonl", lm.train, TaskKind::toy_mlm);
  CHECK(tasks::load_examples(dir / "mlm.jsonl") == lm.train);

  std::ofstream(dir / "bad.jsonl") << "{\"ids\": [1, 2], \"mask\": [1]}\n";
  CHECK_THROWS_AS(tasks::load_examples(dir / "bad.jsonl"), InputError);
}
