#include "creat/cli/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <random>

#include "creat/attack/attack.hpp"
#include "creat/common.hpp"
#include "creat/model/transformer.hpp"

namespace creat::cli {

namespace {

using ad::Graph;
using ad::Shape;
using ad::Tensor;

class Inputs {
 public:
  explicit Inputs(std::uint64_t seed) : rng_(seed) {}

  Tensor normal(Shape shape, double scale = 1.0) {
    std::normal_distribution<double> dist(0.0, scale);
    std::vector<double> v(ad::shape_numel(shape));
    for (double& x : v) x = dist(rng_);
    return Tensor::from(std::move(shape), std::move(v), true);
  }

  // Rows drawn from a softmax of normal logits: strictly positive, sum to 1.
  Tensor distribution(std::size_t rows, std::size_t n) {
    std::normal_distribution<double> dist(0.0, 1.0);
    std::vector<double> v(rows * n);
    for (std::size_t r = 0; r < rows; ++r) {
      double total = 0.0;
      for (std::size_t i = 0; i < n; ++i) total += v[r * n + i] = std::exp(dist(rng_));
      for (std::size_t i = 0; i < n; ++i) v[r * n + i] /= total;
    }
    return Tensor::from({rows, n}, std::move(v), true);
  }

  Tensor constant(Shape shape) {
    Tensor t = normal(std::move(shape));
    t.set_requires_grad(false);
    return t;
  }

  Rng& rng() { return rng_; }

 private:
  Rng rng_;
};

// Random linear functional of a non-scalar output.
Tensor project(Graph& g, const Tensor& out, const Tensor& weights) {
  return g.sum_all(g.mul(out, weights));
}

double evaluate(const ScalarFn& fn, const std::vector<Tensor>& inputs) {
  Graph g(false);
  return fn(g, inputs).item();
}

struct Case {
  std::string name;
  ScalarFn fn;
  std::vector<Tensor> inputs;
};

model::Batch small_batch(std::size_t vocab, std::size_t seq, Rng& rng) {
  model::Batch b;
  b.size = 2;
  b.seq_len = seq;
  for (std::size_t e = 0; e < b.size; ++e) {
    const std::size_t real = e == 0 ? seq : seq - 2;
    for (std::size_t s = 0; s < seq; ++s) {
      b.ids.push_back(s < real ? 1 + rng() % (vocab - 1) : 0);
      b.mask.push_back(s < real ? 1 : 0);
    }
    b.labels.push_back(e % 2);
  }
  b.targets = {{0, 1, 3}, {0, 3, 4}, {1, 2, 5}};
  return b;
}

// Parameters drawn at unit-ish scale so the check is not dominated by the
// near-linear regime of a freshly initialized model.
void randomize(model::ModelParams& p, Rng& rng) {
  std::normal_distribution<double> dist(0.0, 0.5);
  for (auto t : p.all()) {
    for (double& v : t.mutable_data()) v = dist(rng);
  }
}

std::vector<Case> primitive_cases(Inputs& in) {
  std::vector<Case> cases;
  auto add_case = [&](std::string name, ScalarFn fn, std::vector<Tensor> inputs) {
    cases.push_back(Case{std::move(name), std::move(fn), std::move(inputs)});
  };

  {
    Tensor w = in.constant({2, 3, 5});
    add_case("matmul", [w](Graph& g, const std::vector<Tensor>& x) {
      return project(g, g.matmul(x[0], x[1]), w);
    }, {in.normal({2, 3, 4}), in.normal({4, 5})});
  }
  {
    Tensor w = in.constant({2, 3, 5});
    add_case("bmm", [w](Graph& g, const std::vector<Tensor>& x) {
      return g.add(project(g, g.bmm(x[0], x[1]), w),
                   project(g, g.bmm(x[0], x[2], true), w));
    }, {in.normal({2, 3, 4}), in.normal({2, 4, 5}), in.normal({2, 5, 4})});
  }
  for (const char* op : {"add", "sub", "mul"}) {
    Tensor w = in.constant({3, 4});
    const std::string name = op;
    add_case(name, [w, name](Graph& g, const std::vector<Tensor>& x) {
      Tensor out = name == "add" ? g.add(x[0], x[1])
                   : name == "sub" ? g.sub(x[0], x[1])
                                   : g.mul(x[0], x[1]);
      return project(g, out, w);
    }, {in.normal({3, 4}), in.normal({3, 4})});
  }
  {
    Tensor w = in.constant({2, 3, 4});
    add_case("add_bias", [w](Graph& g, const std::vector<Tensor>& x) {
      return project(g, g.add_bias(x[0], x[1]), w);
    }, {in.normal({2, 3, 4}), in.normal({4})});
  }
  {
    Tensor w = in.constant({3, 4});
    add_case("scale", [w](Graph& g, const std::vector<Tensor>& x) {
      return project(g, g.scale(x[0], -1.7), w);
    }, {in.normal({3, 4})});
  }
  {
    Tensor w = in.constant({3, 5});
    add_case("gelu", [w](Graph& g, const std::vector<Tensor>& x) {
      return project(g, g.gelu(x[0]), w);
    }, {in.normal({3, 5}, 2.0)});
  }
  {
    Tensor w = in.constant({3, 4});
    const std::vector<std::uint8_t> mask{0, 1, 0, 0, 1, 0, 0, 1, 0, 0, 1, 1};
    add_case("masked_fill", [w, mask](Graph& g, const std::vector<Tensor>& x) {
      return project(g, g.masked_fill(x[0], mask, -3.0), w);
    }, {in.normal({3, 4})});
  }
  {
    Tensor w = in.constant({4, 5});
    add_case("dropout", [w](Graph& g, const std::vector<Tensor>& x) {
      Rng rng(7);
      return project(g, g.dropout(x[0], 0.3, rng), w);
    }, {in.normal({4, 5})});
  }
  {
    Tensor w = in.constant({3, 4});
    add_case("reshape", [w](Graph& g, const std::vector<Tensor>& x) {
      return project(g, g.reshape(x[0], {3, 4}), w);
    }, {in.normal({2, 6})});
  }
  {
    Tensor w = in.constant({4, 2, 3});
    add_case("permute", [w](Graph& g, const std::vector<Tensor>& x) {
      return project(g, g.permute(x[0], {2, 0, 1}), w);
    }, {in.normal({2, 3, 4})});
  }
  {
    Tensor w = in.constant({4, 3, 2});
    add_case("transpose", [w](Graph& g, const std::vector<Tensor>& x) {
      return project(g, g.transpose(x[0], 0, 2), w);
    }, {in.normal({2, 3, 4})});
  }
  {
    Tensor w = in.constant({2, 5});
    add_case("concat", [w](Graph& g, const std::vector<Tensor>& x) {
      return project(g, g.concat({x[0], x[1]}, 1), w);
    }, {in.normal({2, 3}), in.normal({2, 2})});
  }
  {
    Tensor w = in.constant({3, 3});
    add_case("slice", [w](Graph& g, const std::vector<Tensor>& x) {
      return project(g, g.slice(x[0], 1, 1, 4), w);
    }, {in.normal({3, 5})});
  }
  {
    Tensor w = in.constant({4, 3});
    const std::vector<std::size_t> ids{0, 2, 2, 5};
    add_case("embedding", [w, ids](Graph& g, const std::vector<Tensor>& x) {
      return project(g, g.embedding(x[0], ids), w);
    }, {in.normal({6, 3})});
  }
  {
    Tensor w = in.constant({2, 4});
    add_case("sum", [w](Graph& g, const std::vector<Tensor>& x) {
      return project(g, g.sum(x[0], 1), w);
    }, {in.normal({2, 3, 4})});
  }
  {
    Tensor w = in.constant({3, 4});
    add_case("mean", [w](Graph& g, const std::vector<Tensor>& x) {
      return project(g, g.mean(x[0], 0), w);
    }, {in.normal({2, 3, 4})});
  }
  {
    Tensor w = in.constant({2, 3});
    add_case("min", [w](Graph& g, const std::vector<Tensor>& x) {
      return project(g, g.min(x[0], 2), w);
    }, {in.normal({2, 3, 4})});
  }
  {
    Tensor w = in.constant({3, 4});
    add_case("sum_all", [w](Graph& g, const std::vector<Tensor>& x) {
      return g.sum_all(g.mul(g.mul(x[0], x[0]), w));
    }, {in.normal({3, 4})});
    add_case("mean_all", [w](Graph& g, const std::vector<Tensor>& x) {
      return g.mean_all(g.mul(g.mul(x[0], x[0]), w));
    }, {in.normal({3, 4})});
  }
  {
    Tensor w = in.constant({3, 5});
    add_case("softmax", [w](Graph& g, const std::vector<Tensor>& x) {
      return project(g, g.softmax(x[0]), w);
    }, {in.normal({3, 5})});
  }
  {
    Tensor w = in.constant({3, 6});
    add_case("layer_norm", [w](Graph& g, const std::vector<Tensor>& x) {
      return project(g, g.layer_norm(x[0], x[1], x[2]), w);
    }, {in.normal({3, 6}), in.normal({6}), in.normal({6})});
  }
  {
    Tensor w = in.constant({3});
    add_case("cosine_similarity", [w](Graph& g, const std::vector<Tensor>& x) {
      return project(g, g.cosine_similarity(x[0], x[1]), w);
    }, {in.normal({3, 5}), in.normal({3, 5})});
  }
  {
    Tensor w = in.constant({3});
    add_case("kl_divergence", [w](Graph& g, const std::vector<Tensor>& x) {
      return project(g, g.kl_divergence(x[0], x[1]), w);
    }, {in.distribution(3, 4), in.distribution(3, 4)});
  }
  {
    Tensor w = in.constant({4});
    const std::vector<std::size_t> labels{0, 2, 1, 2};
    add_case("cross_entropy", [w, labels](Graph& g, const std::vector<Tensor>& x) {
      return project(g, g.cross_entropy(x[0], labels), w);
    }, {in.normal({4, 3}, 2.0)});
  }
  add_case("frobenius_norm", [](Graph& g, const std::vector<Tensor>& x) {
    return g.frobenius_norm(x[0]);
  }, {in.normal({3, 4})});
  return cases;
}

std::vector<Case> model_cases(Inputs& in) {
  std::vector<Case> cases;

  // Every parameter of a 2-layer, width-8 encoder with both decoders.
  for (auto kind : {model::DecoderKind::classifier, model::DecoderKind::mlm}) {
    model::ModelConfig cfg;
    cfg.encoder = model::EncoderConfig{2, 8, 2, 16, 10, 8, 0.0};
    cfg.decoder = model::DecoderConfig{kind, 3};
    auto params = std::make_shared<model::ModelParams>(model::init_params(cfg, 11));
    randomize(*params, in.rng());
    auto batch = std::make_shared<model::Batch>(small_batch(10, 5, in.rng()));
    batch->labels = {0, 2};
    const std::string name = kind == model::DecoderKind::classifier
                                 ? "model.classifier.parameters"
                                 : "model.mlm.parameters";
    cases.push_back(Case{name, [params, batch](Graph& g, const std::vector<Tensor>&) {
      Tensor x = model::embed(g, *params, *batch);
      auto out = model::encode(g, x, batch->mask, *params, model::DropoutMode::disabled());
      return model::task_loss(g, out, *params, *batch);
    }, params->all()});
  }

  // Attack objectives w.r.t. delta on the toy-size encoder (2 layers, width 32).
  for (auto mode : {attack::AttackMode::AT, attack::AttackMode::CreAT,
                    attack::AttackMode::CreAT_minus}) {
    model::ModelConfig cfg;
    cfg.encoder = model::EncoderConfig{2, 32, 4, 64, 16, 8, 0.0};
    cfg.decoder = model::DecoderConfig{model::DecoderKind::classifier, 2};
    auto params = std::make_shared<model::ModelParams>(model::init_params(cfg, 13));
    randomize(*params, in.rng());
    for (auto t : params->all()) {
      for (double& v : t.mutable_data()) v *= 0.4;
    }
    auto batch = std::make_shared<model::Batch>(small_batch(16, 6, in.rng()));
    Graph setup(false);
    Tensor x = model::embed(setup, *params, *batch);
    auto anchor = std::make_shared<model::EncodeOutput>(model::encode(
        setup, x, batch->mask, *params, model::DropoutMode::disabled()));
    attack::AttackConfig config;
    config.mode = mode;
    config.temperature = 1.5;
    attack::Perturbation start =
        attack::init_perturbation(2, 6, 32, batch->mask, 1.0, in.rng()());
    Tensor delta = start.delta.clone();
    delta.set_requires_grad(true);
    cases.push_back(Case{"attack." + attack::to_string(mode) + ".delta",
                         [params, batch, x, anchor, config](Graph& g,
                                                            const std::vector<Tensor>& d) {
      attack::AttackProblem problem{*params, *batch, x, *anchor, nullptr};
      return attack::attack_objective(g, problem, d[0], config);
    }, {delta}});
  }
  return cases;
}

}  // namespace

double max_relative_error(const ScalarFn& fn, std::vector<Tensor> inputs, double step) {
  for (auto& t : inputs) {
    if (!t.requires_grad()) throw ConfigError("gradcheck: input " + t.describe() +
                                              " does not require grad");
    t.zero_grad();
  }
  {
    Graph g;
    Tensor loss = fn(g, inputs);
    g.backward(loss, inputs);
  }
  double worst = 0.0;
  for (auto& t : inputs) {
    const std::vector<double> analytic(t.grad().begin(), t.grad().end());
    std::vector<double> numeric(t.numel());
    for (std::size_t i = 0; i < t.numel(); ++i) {
      const double saved = t.data()[i];
      t.mutable_data()[i] = saved + step;
      const double up = evaluate(fn, inputs);
      t.mutable_data()[i] = saved - step;
      const double down = evaluate(fn, inputs);
      t.mutable_data()[i] = saved;
      numeric[i] = (up - down) / (2.0 * step);
    }
    double diff = 0.0;
    for (std::size_t i = 0; i < numeric.size(); ++i) {
      diff += (analytic[i] - numeric[i]) * (analytic[i] - numeric[i]);
    }
    diff = std::sqrt(diff);
    const double scale = std::max(ad::kernels::norm(analytic), ad::kernels::norm(numeric));
    const double rel = scale < 1e-10 ? diff : diff / scale;
    worst = std::max(worst, rel);
    t.zero_grad();
  }
  return worst;
}

std::vector<GradcheckResult> run_gradcheck(std::uint64_t seed) {
  Inputs in(seed);
  std::vector<Case> cases = primitive_cases(in);
  for (auto& c : model_cases(in)) cases.push_back(std::move(c));

  std::vector<GradcheckResult> results;
  std::map<std::string, bool> covered;
  for (const auto& name : ad::primitive_names()) covered[name] = false;
  for (const auto& c : cases) {
    GradcheckResult r;
    r.name = c.name;
    for (const auto& t : c.inputs) r.entries += t.numel();
    r.max_relative_error = max_relative_error(c.fn, c.inputs);
    r.passed = std::isfinite(r.max_relative_error) && r.max_relative_error <= r.tolerance;
    if (covered.contains(c.name)) covered[c.name] = true;
    results.push_back(std::move(r));
  }
  for (const auto& [name, seen] : covered) {
    if (!seen) {
      results.push_back(GradcheckResult{name, std::numeric_limits<double>::infinity(),
                                        kGradcheckTolerance, 0, false});
    }
  }
  return results;
}

}  // namespace creat::cli
