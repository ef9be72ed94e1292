#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "creat/autodiff/tensor.hpp"
#include "creat/common.hpp"

namespace creat::ad {

// Numeric floors shared by the graph ops and the metric code.
inline constexpr double kLayerNormEps = 1e-12;
inline constexpr double kProbabilityFloor = 1e-12;
inline constexpr double kNormFloor = 1e-12;
inline constexpr double kMaskedLogit = -1e9;

// Define-by-run tape. Every op appends one record; backward() walks the
// records in reverse. A tensor produced by a different graph (or by no graph)
// is a leaf here. Tensors read by a live record are read-only until the graph
// is cleared or destroyed.
//
// A graph constructed with recording disabled only evaluates values; it keeps
// no records and cannot run backward().
class Graph {
 public:
  explicit Graph(bool recording = true) : recording_(recording) {}
  ~Graph();
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  bool recording() const { return recording_; }
  std::size_t size() const { return records_.size(); }
  const std::string& op_name(std::size_t index) const {
    return records_.at(index).name;
  }
  // Drops all records and releases the read locks on inputs.
  void clear();

  // --- linear algebra --------------------------------------------------
  // a [..., k] x b [k, n] -> [..., n]
  Tensor matmul(const Tensor& a, const Tensor& b);
  // a [N, m, k] x b [N, k, n] -> [N, m, n]; with transpose_b, b is [N, n, k].
  Tensor bmm(const Tensor& a, const Tensor& b, bool transpose_b = false);

  // --- elementwise -----------------------------------------------------
  Tensor add(const Tensor& a, const Tensor& b);
  Tensor sub(const Tensor& a, const Tensor& b);
  Tensor mul(const Tensor& a, const Tensor& b);
  // x [..., n] + bias [n]
  Tensor add_bias(const Tensor& x, const Tensor& bias);
  Tensor scale(const Tensor& x, double factor);
  Tensor gelu(const Tensor& x);
  // Entries where mask != 0 are replaced by value and receive no gradient.
  Tensor masked_fill(const Tensor& x, std::span<const std::uint8_t> mask,
                     double value);
  // Inverted dropout with keep probability 1 - rate.
  Tensor dropout(const Tensor& x, double rate, Rng& rng);

  // --- shape -----------------------------------------------------------
  Tensor reshape(const Tensor& x, Shape shape);
  Tensor permute(const Tensor& x, const std::vector<std::size_t>& order);
  Tensor transpose(const Tensor& x, std::size_t axis0, std::size_t axis1);
  Tensor concat(const std::vector<Tensor>& parts, std::size_t axis);
  Tensor slice(const Tensor& x, std::size_t axis, std::size_t begin,
               std::size_t end);
  // Rows of table [V, d] selected by ids -> [ids.size(), d].
  Tensor embedding(const Tensor& table, std::span<const std::size_t> ids);

  // --- reductions ------------------------------------------------------
  Tensor sum(const Tensor& x, std::size_t axis);
  Tensor mean(const Tensor& x, std::size_t axis);
  // Gradient flows to the first minimal entry.
  Tensor min(const Tensor& x, std::size_t axis);
  Tensor sum_all(const Tensor& x);
  Tensor mean_all(const Tensor& x);

  // --- normalization / probability -------------------------------------
  Tensor softmax(const Tensor& x);
  // Normalizes over the last axis: (x - mean) / sqrt(var + eps) * gain + bias.
  Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias);

  // --- losses and similarity ---------------------------------------------
  // Row-wise over the last axis; output drops the last axis.
  Tensor cosine_similarity(const Tensor& a, const Tensor& b);
  // Row-wise KL(q || p) over the last axis.
  Tensor kl_divergence(const Tensor& q, const Tensor& p);
  // logits [N, C] -> per-row -log softmax(logits)[label], shape [N].
  Tensor cross_entropy(const Tensor& logits,
                       std::span<const std::size_t> labels);
  // sqrt of the sum of squares, scalar.
  Tensor frobenius_norm(const Tensor& x);

  // Accumulates d(loss)/d(target) into each target's grad field. Only paths
  // that reach a target are visited. Targets must have requires_grad set and
  // take part in this graph.
  void backward(const Tensor& loss, const std::vector<Tensor>& targets);

 private:
  using BackwardFn = std::function<void(std::span<const double> grad_out,
                                        std::span<std::vector<double>*> grad_in)>;

  struct Record {
    std::string name;
    std::shared_ptr<detail::TensorImpl> output;
    std::vector<std::shared_ptr<detail::TensorImpl>> inputs;
    BackwardFn backward;
  };

  Tensor emit(std::string name, Shape shape, std::vector<double> values,
              std::vector<Tensor> inputs, BackwardFn backward);
  bool produced_here(const detail::TensorImpl* impl) const {
    return impl->producer == this;
  }

  bool recording_;
  std::vector<Record> records_;
};

// Names of every public differentiable op on Graph, in declaration order.
const std::vector<std::string>& primitive_names();

// Plain-value kernels shared by graph ops and by metric code that works on
// snapshots outside any graph.
namespace kernels {
double dot(std::span<const double> a, std::span<const double> b);
double norm(std::span<const double> a);
// a.b / (max(|a|, floor) * max(|b|, floor))
double cosine(std::span<const double> a, std::span<const double> b);
// sum_i q_i ln(q~_i / p~_i) with both arguments floored inside the log;
// terms with q_i == 0 contribute 0.
double kl(std::span<const double> q, std::span<const double> p);
double gelu(double x);
double gelu_derivative(double x);
// C[m,n] (+)= A[m,k] * B[k,n], optional transposes of the stored operands.
void gemm(const double* a, const double* b, double* c, std::size_t m,
          std::size_t k, std::size_t n, bool transpose_a, bool transpose_b,
          bool accumulate);
}  // namespace kernels

}  // namespace creat::ad
