#include "creat/autodiff/graph.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <stdexcept>
#include <unordered_map>
#include <unordered_set>

#include <Eigen/Core>

namespace creat::ad {

namespace {

using Impl = detail::TensorImpl;

[[noreturn]] void shape_error(const std::string& op, const std::string& what) {
  throw ConfigError(op + ": " + what);
}

void require_same_shape(const std::string& op, const Tensor& a,
                        const Tensor& b) {
  if (a.shape() != b.shape()) {
    shape_error(op, "shape mismatch " + shape_str(a.shape()) + " vs " +
                        shape_str(b.shape()));
  }
}

void require_defined(const std::string& op, const Tensor& t) {
  if (!t.defined()) shape_error(op, "undefined input tensor");
}

// Splits a shape around `axis` into (outer, axis length, inner).
struct AxisSplit {
  std::size_t outer = 1;
  std::size_t length = 1;
  std::size_t inner = 1;
};

AxisSplit split_axis(const std::string& op, const Shape& shape,
                     std::size_t axis) {
  if (axis >= shape.size()) {
    shape_error(op, "axis " + std::to_string(axis) + " out of range for " +
                        shape_str(shape));
  }
  AxisSplit s;
  for (std::size_t i = 0; i < axis; ++i) s.outer *= shape[i];
  s.length = shape[axis];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
  return s;
}

Shape drop_axis(const Shape& shape, std::size_t axis) {
  Shape out;
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i != axis) out.push_back(shape[i]);
  }
  if (out.empty()) out.push_back(1);
  return out;
}

void accumulate(std::vector<double>* dst, std::span<const double> src) {
  if (dst == nullptr) return;
  double* d = dst->data();
  for (std::size_t i = 0; i < src.size(); ++i) d[i] += src[i];
}

}  // namespace

// --- kernels ---------------------------------------------------------------

namespace kernels {

double dot(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

double norm(std::span<const double> a) { return std::sqrt(dot(a, a)); }

double cosine(std::span<const double> a, std::span<const double> b) {
  const double na = std::max(norm(a), kNormFloor);
  const double nb = std::max(norm(b), kNormFloor);
  return dot(a, b) / (na * nb);
}

double kl(std::span<const double> q, std::span<const double> p) {
  double s = 0.0;
  for (std::size_t i = 0; i < q.size(); ++i) {
    if (q[i] == 0.0) continue;
    s += q[i] * (std::log(std::max(q[i], kProbabilityFloor)) -
                 std::log(std::max(p[i], kProbabilityFloor)));
  }
  return s;
}

double gelu(double x) {
  return 0.5 * x * (1.0 + std::erf(x / std::numbers::sqrt2));
}

double gelu_derivative(double x) {
  const double cdf = 0.5 * (1.0 + std::erf(x / std::numbers::sqrt2));
  const double pdf = std::exp(-0.5 * x * x) / std::sqrt(2.0 * std::numbers::pi);
  return cdf + x * pdf;
}

void gemm(const double* a, const double* b, double* c, std::size_t m,
          std::size_t k, std::size_t n, bool transpose_a, bool transpose_b,
          bool accumulate) {
  using Mat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  const auto rows = static_cast<Eigen::Index>(m);
  const auto inner = static_cast<Eigen::Index>(k);
  const auto cols = static_cast<Eigen::Index>(n);
  Eigen::Map<Mat> cm(c, rows, cols);
  if (!accumulate) cm.setZero();
  // Stored shapes: a is [m, k] or [k, m], b is [k, n] or [n, k].
  Eigen::Map<const Mat> am(a, transpose_a ? inner : rows, transpose_a ? rows : inner);
  Eigen::Map<const Mat> bm(b, transpose_b ? cols : inner, transpose_b ? inner : cols);
  if (!transpose_a && !transpose_b) {
    cm.noalias() += am * bm;
  } else if (!transpose_a) {
    cm.noalias() += am * bm.transpose();
  } else if (!transpose_b) {
    cm.noalias() += am.transpose() * bm;
  } else {
    cm.noalias() += am.transpose() * bm.transpose();
  }
}

}  // namespace kernels

const std::vector<std::string>& primitive_names() {
  static const std::vector<std::string> names{
      "matmul",         "bmm",          "add",           "sub",
      "mul",            "add_bias",     "scale",         "gelu",
      "masked_fill",    "dropout",      "reshape",       "permute",
      "transpose",      "concat",       "slice",         "embedding",
      "sum",            "mean",         "min",           "sum_all",
      "mean_all",       "softmax",      "layer_norm",    "cosine_similarity",
      "kl_divergence",  "cross_entropy", "frobenius_norm"};
  return names;
}

// --- graph plumbing --------------------------------------------------------

Graph::~Graph() { clear(); }

void Graph::clear() {
  for (auto& record : records_) {
    for (auto& input : record.inputs) --input->readers;
    record.output->producer = nullptr;
  }
  records_.clear();
}

Tensor Graph::emit(std::string name, Shape shape, std::vector<double> values,
                   std::vector<Tensor> inputs, BackwardFn backward) {
  auto impl = std::make_shared<Impl>();
  impl->shape = std::move(shape);
  impl->data = std::move(values);
  if (!recording_) return Tensor(std::move(impl));

  Record record;
  record.name = std::move(name);
  record.inputs.reserve(inputs.size());
  for (auto& input : inputs) {
    ++input.impl()->readers;
    record.inputs.push_back(input.handle());
  }
  impl->producer = this;
  impl->producer_index = records_.size();
  record.output = impl;
  record.backward = std::move(backward);
  records_.push_back(std::move(record));
  return Tensor(std::move(impl));
}

// --- linear algebra ----------------------------------------------------------

Tensor Graph::matmul(const Tensor& a, const Tensor& b) {
  require_defined("matmul", a);
  require_defined("matmul", b);
  if (b.rank() != 2 || a.shape().back() != b.dim(0)) {
    shape_error("matmul", "cannot multiply " + shape_str(a.shape()) + " by " +
                              shape_str(b.shape()));
  }
  const std::size_t k = b.dim(0);
  const std::size_t n = b.dim(1);
  const std::size_t m = a.numel() / k;
  Shape shape = a.shape();
  shape.back() = n;
  std::vector<double> out(m * n);
  kernels::gemm(a.data().data(), b.data().data(), out.data(), m, k, n, false,
                false, false);
  if (!recording_) return emit("matmul", std::move(shape), std::move(out), {}, {});
  const Impl* ai = a.impl();
  const Impl* bi = b.impl();
  return emit("matmul", std::move(shape), std::move(out), {a, b},
              [ai, bi, m, k, n](std::span<const double> g,
                                std::span<std::vector<double>*> gin) {
                if (gin[0]) {
                  kernels::gemm(g.data(), bi->data.data(), gin[0]->data(), m,
                                n, k, false, true, true);
                }
                if (gin[1]) {
                  kernels::gemm(ai->data.data(), g.data(), gin[1]->data(), k,
                                m, n, true, false, true);
                }
              });
}

Tensor Graph::bmm(const Tensor& a, const Tensor& b, bool transpose_b) {
  require_defined("bmm", a);
  require_defined("bmm", b);
  if (a.rank() != 3 || b.rank() != 3 || a.dim(0) != b.dim(0) ||
      a.dim(2) != (transpose_b ? b.dim(2) : b.dim(1))) {
    shape_error("bmm", "cannot batch-multiply " + shape_str(a.shape()) +
                           " by " + shape_str(b.shape()) +
                           (transpose_b ? " (transposed)" : ""));
  }
  const std::size_t batch = a.dim(0);
  const std::size_t m = a.dim(1);
  const std::size_t k = a.dim(2);
  const std::size_t n = transpose_b ? b.dim(1) : b.dim(2);
  std::vector<double> out(batch * m * n);
  for (std::size_t i = 0; i < batch; ++i) {
    kernels::gemm(a.data().data() + i * m * k, b.data().data() + i * k * n,
                  out.data() + i * m * n, m, k, n, false, transpose_b, false);
  }
  Shape shape{batch, m, n};
  if (!recording_) return emit("bmm", std::move(shape), std::move(out), {}, {});
  const Impl* ai = a.impl();
  const Impl* bi = b.impl();
  return emit(
      "bmm", std::move(shape), std::move(out), {a, b},
      [ai, bi, batch, m, k, n, transpose_b](std::span<const double> g,
                                            std::span<std::vector<double>*> gin) {
        for (std::size_t i = 0; i < batch; ++i) {
          const double* gi = g.data() + i * m * n;
          const double* av = ai->data.data() + i * m * k;
          const double* bv = bi->data.data() + i * k * n;
          if (gin[0]) {
            // dA = G * B^T   (or G * B when B is stored transposed)
            kernels::gemm(gi, bv, gin[0]->data() + i * m * k, m, n, k, false,
                          !transpose_b, true);
          }
          if (gin[1]) {
            if (transpose_b) {
              // dB[n,k] = G^T A
              kernels::gemm(gi, av, gin[1]->data() + i * k * n, n, m, k, true,
                            false, true);
            } else {
              // dB[k,n] = A^T G
              kernels::gemm(av, gi, gin[1]->data() + i * k * n, k, m, n, true,
                            false, true);
            }
          }
        }
      });
}

// --- elementwise -------------------------------------------------------------

Tensor Graph::add(const Tensor& a, const Tensor& b) {
  require_defined("add", a);
  require_defined("add", b);
  require_same_shape("add", a, b);
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] + b.data()[i];
  return emit("add", a.shape(), std::move(out), {a, b},
              [](std::span<const double> g, std::span<std::vector<double>*> gin) {
                accumulate(gin[0], g);
                accumulate(gin[1], g);
              });
}

Tensor Graph::sub(const Tensor& a, const Tensor& b) {
  require_defined("sub", a);
  require_defined("sub", b);
  require_same_shape("sub", a, b);
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] - b.data()[i];
  return emit("sub", a.shape(), std::move(out), {a, b},
              [](std::span<const double> g, std::span<std::vector<double>*> gin) {
                accumulate(gin[0], g);
                if (gin[1]) {
                  for (std::size_t i = 0; i < g.size(); ++i) (*gin[1])[i] -= g[i];
                }
              });
}

Tensor Graph::mul(const Tensor& a, const Tensor& b) {
  require_defined("mul", a);
  require_defined("mul", b);
  require_same_shape("mul", a, b);
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * b.data()[i];
  const Impl* ai = a.impl();
  const Impl* bi = b.impl();
  return emit("mul", a.shape(), std::move(out), {a, b},
              [ai, bi](std::span<const double> g,
                       std::span<std::vector<double>*> gin) {
                if (gin[0]) {
                  for (std::size_t i = 0; i < g.size(); ++i)
                    (*gin[0])[i] += g[i] * bi->data[i];
                }
                if (gin[1]) {
                  for (std::size_t i = 0; i < g.size(); ++i)
                    (*gin[1])[i] += g[i] * ai->data[i];
                }
              });
}

Tensor Graph::add_bias(const Tensor& x, const Tensor& bias) {
  require_defined("add_bias", x);
  require_defined("add_bias", bias);
  if (bias.rank() != 1 || bias.dim(0) != x.shape().back()) {
    shape_error("add_bias", "bias " + shape_str(bias.shape()) +
                                " does not match last axis of " +
                                shape_str(x.shape()));
  }
  const std::size_t n = bias.dim(0);
  const std::size_t rows = x.numel() / n;
  std::vector<double> out(x.numel());
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t j = 0; j < n; ++j) {
      out[r * n + j] = x.data()[r * n + j] + bias.data()[j];
    }
  }
  return emit("add_bias", x.shape(), std::move(out), {x, bias},
              [rows, n](std::span<const double> g,
                        std::span<std::vector<double>*> gin) {
                accumulate(gin[0], g);
                if (gin[1]) {
                  for (std::size_t r = 0; r < rows; ++r)
                    for (std::size_t j = 0; j < n; ++j)
                      (*gin[1])[j] += g[r * n + j];
                }
              });
}

Tensor Graph::scale(const Tensor& x, double factor) {
  require_defined("scale", x);
  std::vector<double> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x.data()[i] * factor;
  return emit("scale", x.shape(), std::move(out), {x},
              [factor](std::span<const double> g,
                       std::span<std::vector<double>*> gin) {
                if (gin[0]) {
                  for (std::size_t i = 0; i < g.size(); ++i)
                    (*gin[0])[i] += g[i] * factor;
                }
              });
}

Tensor Graph::gelu(const Tensor& x) {
  require_defined("gelu", x);
  std::vector<double> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = kernels::gelu(x.data()[i]);
  const Impl* xi = x.impl();
  return emit("gelu", x.shape(), std::move(out), {x},
              [xi](std::span<const double> g, std::span<std::vector<double>*> gin) {
                if (gin[0]) {
                  for (std::size_t i = 0; i < g.size(); ++i)
                    (*gin[0])[i] += g[i] * kernels::gelu_derivative(xi->data[i]);
                }
              });
}

Tensor Graph::masked_fill(const Tensor& x, std::span<const std::uint8_t> mask,
                          double value) {
  require_defined("masked_fill", x);
  if (mask.size() != x.numel()) {
    shape_error("masked_fill", "mask has " + std::to_string(mask.size()) +
                                   " entries for tensor " + shape_str(x.shape()));
  }
  std::vector<double> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = mask[i] ? value : x.data()[i];
  if (!recording_) return emit("masked_fill", x.shape(), std::move(out), {}, {});
  std::vector<std::uint8_t> keep(mask.begin(), mask.end());
  return emit("masked_fill", x.shape(), std::move(out), {x},
              [keep = std::move(keep)](std::span<const double> g,
                                       std::span<std::vector<double>*> gin) {
                if (gin[0]) {
                  for (std::size_t i = 0; i < g.size(); ++i)
                    if (!keep[i]) (*gin[0])[i] += g[i];
                }
              });
}

Tensor Graph::dropout(const Tensor& x, double rate, Rng& rng) {
  require_defined("dropout", x);
  if (rate < 0.0 || rate >= 1.0) {
    shape_error("dropout", "rate " + std::to_string(rate) + " outside [0, 1)");
  }
  if (rate == 0.0) return x;
  const double keep_scale = 1.0 / (1.0 - rate);
  std::vector<double> factor(x.numel());
  for (auto& f : factor) f = uniform01(rng) < rate ? 0.0 : keep_scale;
  std::vector<double> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x.data()[i] * factor[i];
  if (!recording_) return emit("dropout", x.shape(), std::move(out), {}, {});
  return emit("dropout", x.shape(), std::move(out), {x},
              [factor = std::move(factor)](std::span<const double> g,
                                           std::span<std::vector<double>*> gin) {
                if (gin[0]) {
                  for (std::size_t i = 0; i < g.size(); ++i)
                    (*gin[0])[i] += g[i] * factor[i];
                }
              });
}

// --- shape ---------------------------------------------------------------

Tensor Graph::reshape(const Tensor& x, Shape shape) {
  require_defined("reshape", x);
  if (shape_numel(shape) != x.numel()) {
    shape_error("reshape", "cannot reshape " + shape_str(x.shape()) + " to " +
                               shape_str(shape));
  }
  std::vector<double> out(x.data().begin(), x.data().end());
  return emit("reshape", std::move(shape), std::move(out), {x},
              [](std::span<const double> g, std::span<std::vector<double>*> gin) {
                accumulate(gin[0], g);
              });
}

Tensor Graph::permute(const Tensor& x, const std::vector<std::size_t>& order) {
  require_defined("permute", x);
  const std::size_t rank = x.rank();
  if (order.size() != rank) {
    shape_error("permute", "order has " + std::to_string(order.size()) +
                               " axes for " + shape_str(x.shape()));
  }
  std::vector<bool> seen(rank, false);
  for (std::size_t axis : order) {
    if (axis >= rank || seen[axis]) {
      shape_error("permute", "invalid axis order for " + shape_str(x.shape()));
    }
    seen[axis] = true;
  }
  Shape out_shape(rank);
  std::vector<std::size_t> in_strides(rank, 1);
  for (std::size_t i = rank; i-- > 1;) in_strides[i - 1] = in_strides[i] * x.dim(i);
  // Stride in the input for each output axis.
  std::vector<std::size_t> gather_strides(rank);
  for (std::size_t i = 0; i < rank; ++i) {
    out_shape[i] = x.dim(order[i]);
    gather_strides[i] = in_strides[order[i]];
  }
  // source[i] = flat input offset of output element i.
  std::vector<std::size_t> source(x.numel());
  std::vector<std::size_t> index(rank, 0);
  std::size_t offset = 0;
  for (std::size_t i = 0; i < source.size(); ++i) {
    source[i] = offset;
    for (std::size_t axis = rank; axis-- > 0;) {
      ++index[axis];
      offset += gather_strides[axis];
      if (index[axis] < out_shape[axis]) break;
      offset -= gather_strides[axis] * out_shape[axis];
      index[axis] = 0;
    }
  }
  std::vector<double> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x.data()[source[i]];
  if (!recording_) return emit("permute", std::move(out_shape), std::move(out), {}, {});
  return emit("permute", std::move(out_shape), std::move(out), {x},
              [source = std::move(source)](std::span<const double> g,
                                           std::span<std::vector<double>*> gin) {
                if (gin[0]) {
                  for (std::size_t i = 0; i < g.size(); ++i)
                    (*gin[0])[source[i]] += g[i];
                }
              });
}

Tensor Graph::transpose(const Tensor& x, std::size_t axis0, std::size_t axis1) {
  require_defined("transpose", x);
  if (axis0 >= x.rank() || axis1 >= x.rank()) {
    shape_error("transpose", "axes out of range for " + shape_str(x.shape()));
  }
  std::vector<std::size_t> order(x.rank());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::swap(order[axis0], order[axis1]);
  return permute(x, order);
}

Tensor Graph::concat(const std::vector<Tensor>& parts, std::size_t axis) {
  if (parts.empty()) shape_error("concat", "no inputs");
  for (const auto& p : parts) require_defined("concat", p);
  const Shape& first = parts.front().shape();
  const AxisSplit base = split_axis("concat", first, axis);
  std::vector<std::size_t> lengths;
  std::size_t total = 0;
  for (const auto& p : parts) {
    Shape a = p.shape();
    Shape b = first;
    if (a.size() != b.size()) {
      shape_error("concat", "rank mismatch " + shape_str(a) + " vs " + shape_str(b));
    }
    a[axis] = b[axis] = 0;
    if (a != b) {
      shape_error("concat", "shape mismatch " + shape_str(p.shape()) + " vs " +
                                shape_str(first));
    }
    lengths.push_back(p.dim(axis));
    total += p.dim(axis);
  }
  Shape shape = first;
  shape[axis] = total;
  const std::size_t outer = base.outer;
  const std::size_t inner = base.inner;
  std::vector<double> out(outer * total * inner);
  std::size_t start = 0;
  for (std::size_t pi = 0; pi < parts.size(); ++pi) {
    const auto src = parts[pi].data();
    const std::size_t len = lengths[pi];
    for (std::size_t o = 0; o < outer; ++o) {
      std::copy_n(src.data() + o * len * inner, len * inner,
                  out.data() + (o * total + start) * inner);
    }
    start += len;
  }
  return emit("concat", std::move(shape), std::move(out), parts,
              [lengths, outer, inner, total](std::span<const double> g,
                                             std::span<std::vector<double>*> gin) {
                std::size_t begin = 0;
                for (std::size_t pi = 0; pi < lengths.size(); ++pi) {
                  const std::size_t len = lengths[pi];
                  if (gin[pi]) {
                    for (std::size_t o = 0; o < outer; ++o) {
                      const double* src = g.data() + (o * total + begin) * inner;
                      double* dst = gin[pi]->data() + o * len * inner;
                      for (std::size_t i = 0; i < len * inner; ++i) dst[i] += src[i];
                    }
                  }
                  begin += len;
                }
              });
}

Tensor Graph::slice(const Tensor& x, std::size_t axis, std::size_t begin,
                    std::size_t end) {
  require_defined("slice", x);
  const AxisSplit s = split_axis("slice", x.shape(), axis);
  if (begin >= end || end > s.length) {
    shape_error("slice", "range [" + std::to_string(begin) + ", " +
                             std::to_string(end) + ") invalid for axis " +
                             std::to_string(axis) + " of " + shape_str(x.shape()));
  }
  const std::size_t len = end - begin;
  Shape shape = x.shape();
  shape[axis] = len;
  std::vector<double> out(s.outer * len * s.inner);
  for (std::size_t o = 0; o < s.outer; ++o) {
    std::copy_n(x.data().data() + (o * s.length + begin) * s.inner, len * s.inner,
                out.data() + o * len * s.inner);
  }
  return emit("slice", std::move(shape), std::move(out), {x},
              [s, begin, len](std::span<const double> g,
                              std::span<std::vector<double>*> gin) {
                if (!gin[0]) return;
                for (std::size_t o = 0; o < s.outer; ++o) {
                  const double* src = g.data() + o * len * s.inner;
                  double* dst = gin[0]->data() + (o * s.length + begin) * s.inner;
                  for (std::size_t i = 0; i < len * s.inner; ++i) dst[i] += src[i];
                }
              });
}

Tensor Graph::embedding(const Tensor& table, std::span<const std::size_t> ids) {
  require_defined("embedding", table);
  if (table.rank() != 2) {
    shape_error("embedding", "table must be 2-D, got " + shape_str(table.shape()));
  }
  if (ids.empty()) shape_error("embedding", "no ids");
  const std::size_t vocab = table.dim(0);
  const std::size_t width = table.dim(1);
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] >= vocab) {
      throw InputError("embedding: id " + std::to_string(ids[i]) +
                       " at position " + std::to_string(i) +
                       " is out of range for table " + table.describe());
    }
  }
  std::vector<double> out(ids.size() * width);
  for (std::size_t i = 0; i < ids.size(); ++i) {
    std::copy_n(table.data().data() + ids[i] * width, width, out.data() + i * width);
  }
  Shape shape{ids.size(), width};
  if (!recording_) return emit("embedding", std::move(shape), std::move(out), {}, {});
  std::vector<std::size_t> rows(ids.begin(), ids.end());
  return emit("embedding", std::move(shape), std::move(out), {table},
              [rows = std::move(rows), width](std::span<const double> g,
                                              std::span<std::vector<double>*> gin) {
                if (!gin[0]) return;
                for (std::size_t i = 0; i < rows.size(); ++i) {
                  double* dst = gin[0]->data() + rows[i] * width;
                  const double* src = g.data() + i * width;
                  for (std::size_t j = 0; j < width; ++j) dst[j] += src[j];
                }
              });
}

// --- reductions ------------------------------------------------------------

Tensor Graph::sum(const Tensor& x, std::size_t axis) {
  require_defined("sum", x);
  const AxisSplit s = split_axis("sum", x.shape(), axis);
  std::vector<double> out(s.outer * s.inner, 0.0);
  for (std::size_t o = 0; o < s.outer; ++o)
    for (std::size_t l = 0; l < s.length; ++l)
      for (std::size_t i = 0; i < s.inner; ++i)
        out[o * s.inner + i] += x.data()[(o * s.length + l) * s.inner + i];
  return emit("sum", drop_axis(x.shape(), axis), std::move(out), {x},
              [s](std::span<const double> g, std::span<std::vector<double>*> gin) {
                if (!gin[0]) return;
                for (std::size_t o = 0; o < s.outer; ++o)
                  for (std::size_t l = 0; l < s.length; ++l)
                    for (std::size_t i = 0; i < s.inner; ++i)
                      (*gin[0])[(o * s.length + l) * s.inner + i] += g[o * s.inner + i];
              });
}

Tensor Graph::mean(const Tensor& x, std::size_t axis) {
  require_defined("mean", x);
  const AxisSplit s = split_axis("mean", x.shape(), axis);
  return scale(sum(x, axis), 1.0 / static_cast<double>(s.length));
}

Tensor Graph::min(const Tensor& x, std::size_t axis) {
  require_defined("min", x);
  const AxisSplit s = split_axis("min", x.shape(), axis);
  std::vector<double> out(s.outer * s.inner);
  std::vector<std::size_t> argmin(s.outer * s.inner);
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t i = 0; i < s.inner; ++i) {
      std::size_t best = (o * s.length) * s.inner + i;
      for (std::size_t l = 1; l < s.length; ++l) {
        const std::size_t idx = (o * s.length + l) * s.inner + i;
        if (x.data()[idx] < x.data()[best]) best = idx;
      }
      out[o * s.inner + i] = x.data()[best];
      argmin[o * s.inner + i] = best;
    }
  }
  return emit("min", drop_axis(x.shape(), axis), std::move(out), {x},
              [argmin = std::move(argmin)](std::span<const double> g,
                                           std::span<std::vector<double>*> gin) {
                if (!gin[0]) return;
                for (std::size_t i = 0; i < g.size(); ++i) (*gin[0])[argmin[i]] += g[i];
              });
}

Tensor Graph::sum_all(const Tensor& x) {
  require_defined("sum_all", x);
  double total = 0.0;
  for (double v : x.data()) total += v;
  return emit("sum_all", {1}, {total}, {x},
              [](std::span<const double> g, std::span<std::vector<double>*> gin) {
                if (!gin[0]) return;
                for (double& v : *gin[0]) v += g[0];
              });
}

Tensor Graph::mean_all(const Tensor& x) {
  return scale(sum_all(x), 1.0 / static_cast<double>(x.numel()));
}

// --- normalization / probability -------------------------------------------

Tensor Graph::softmax(const Tensor& x) {
  require_defined("softmax", x);
  const std::size_t n = x.shape().back();
  const std::size_t rows = x.numel() / n;
  std::vector<double> out(x.numel());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* in = x.data().data() + r * n;
    double* y = out.data() + r * n;
    const double mx = *std::max_element(in, in + n);
    double total = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      y[j] = std::exp(in[j] - mx);
      total += y[j];
    }
    for (std::size_t j = 0; j < n; ++j) y[j] /= total;
  }
  if (!recording_) return emit("softmax", x.shape(), std::move(out), {}, {});
  Tensor result = emit("softmax", x.shape(), std::move(out), {x}, {});
  const Impl* yi = result.impl();
  records_.back().backward = [yi, rows, n](std::span<const double> g,
                                           std::span<std::vector<double>*> gin) {
    if (!gin[0]) return;
    for (std::size_t r = 0; r < rows; ++r) {
      const double* y = yi->data.data() + r * n;
      const double* gr = g.data() + r * n;
      double inner = 0.0;
      for (std::size_t j = 0; j < n; ++j) inner += gr[j] * y[j];
      double* dst = gin[0]->data() + r * n;
      for (std::size_t j = 0; j < n; ++j) dst[j] += y[j] * (gr[j] - inner);
    }
  };
  return result;
}

Tensor Graph::layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias) {
  require_defined("layer_norm", x);
  require_defined("layer_norm", gain);
  require_defined("layer_norm", bias);
  const std::size_t n = x.shape().back();
  if (gain.rank() != 1 || gain.dim(0) != n || bias.rank() != 1 || bias.dim(0) != n) {
    shape_error("layer_norm", "gain " + shape_str(gain.shape()) + " / bias " +
                                  shape_str(bias.shape()) +
                                  " do not match last axis of " + shape_str(x.shape()));
  }
  const std::size_t rows = x.numel() / n;
  std::vector<double> normalized(x.numel());
  std::vector<double> inv_std(rows);
  std::vector<double> out(x.numel());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* in = x.data().data() + r * n;
    double mu = 0.0;
    for (std::size_t j = 0; j < n; ++j) mu += in[j];
    mu /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t j = 0; j < n; ++j) var += (in[j] - mu) * (in[j] - mu);
    var /= static_cast<double>(n);
    const double is = 1.0 / std::sqrt(var + kLayerNormEps);
    inv_std[r] = is;
    for (std::size_t j = 0; j < n; ++j) {
      const double xh = (in[j] - mu) * is;
      normalized[r * n + j] = xh;
      out[r * n + j] = xh * gain.data()[j] + bias.data()[j];
    }
  }
  if (!recording_) return emit("layer_norm", x.shape(), std::move(out), {}, {});
  const Impl* gi = gain.impl();
  return emit(
      "layer_norm", x.shape(), std::move(out), {x, gain, bias},
      [gi, rows, n, normalized = std::move(normalized), inv_std = std::move(inv_std)](
          std::span<const double> g, std::span<std::vector<double>*> gin) {
        std::vector<double> gxh(n);
        for (std::size_t r = 0; r < rows; ++r) {
          const double* gr = g.data() + r * n;
          const double* xh = normalized.data() + r * n;
          if (gin[1]) {
            for (std::size_t j = 0; j < n; ++j) (*gin[1])[j] += gr[j] * xh[j];
          }
          if (gin[2]) {
            for (std::size_t j = 0; j < n; ++j) (*gin[2])[j] += gr[j];
          }
          if (gin[0]) {
            double mean_g = 0.0;
            double mean_gx = 0.0;
            for (std::size_t j = 0; j < n; ++j) {
              gxh[j] = gr[j] * gi->data[j];
              mean_g += gxh[j];
              mean_gx += gxh[j] * xh[j];
            }
            mean_g /= static_cast<double>(n);
            mean_gx /= static_cast<double>(n);
            double* dst = gin[0]->data() + r * n;
            for (std::size_t j = 0; j < n; ++j) {
              dst[j] += inv_std[r] * (gxh[j] - mean_g - xh[j] * mean_gx);
            }
          }
        }
      });
}

// --- losses and similarity ---------------------------------------------------

Tensor Graph::cosine_similarity(const Tensor& a, const Tensor& b) {
  require_defined("cosine_similarity", a);
  require_defined("cosine_similarity", b);
  require_same_shape("cosine_similarity", a, b);
  const std::size_t n = a.shape().back();
  const std::size_t rows = a.numel() / n;
  std::vector<double> out(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    out[r] = kernels::cosine(a.data().subspan(r * n, n), b.data().subspan(r * n, n));
  }
  Shape shape = a.shape();
  shape.pop_back();
  if (shape.empty()) shape.push_back(1);
  if (!recording_) return emit("cosine_similarity", std::move(shape), std::move(out), {}, {});
  const Impl* ai = a.impl();
  const Impl* bi = b.impl();
  return emit(
      "cosine_similarity", std::move(shape), std::move(out), {a, b},
      [ai, bi, rows, n](std::span<const double> g, std::span<std::vector<double>*> gin) {
        for (std::size_t r = 0; r < rows; ++r) {
          std::span<const double> av(ai->data.data() + r * n, n);
          std::span<const double> bv(bi->data.data() + r * n, n);
          const double na = kernels::norm(av);
          const double nb = kernels::norm(bv);
          const double fa = std::max(na, kNormFloor);
          const double fb = std::max(nb, kNormFloor);
          const double ab = kernels::dot(av, bv);
          const double c = ab / (fa * fb);
          // The floored norm is constant, so its derivative term vanishes.
          const double ka = na > kNormFloor ? c / (na * na) : 0.0;
          const double kb = nb > kNormFloor ? c / (nb * nb) : 0.0;
          if (gin[0]) {
            double* dst = gin[0]->data() + r * n;
            for (std::size_t j = 0; j < n; ++j)
              dst[j] += g[r] * (bv[j] / (fa * fb) - ka * av[j]);
          }
          if (gin[1]) {
            double* dst = gin[1]->data() + r * n;
            for (std::size_t j = 0; j < n; ++j)
              dst[j] += g[r] * (av[j] / (fa * fb) - kb * bv[j]);
          }
        }
      });
}

Tensor Graph::kl_divergence(const Tensor& q, const Tensor& p) {
  require_defined("kl_divergence", q);
  require_defined("kl_divergence", p);
  require_same_shape("kl_divergence", q, p);
  const std::size_t n = q.shape().back();
  const std::size_t rows = q.numel() / n;
  std::vector<double> out(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    out[r] = kernels::kl(q.data().subspan(r * n, n), p.data().subspan(r * n, n));
  }
  Shape shape = q.shape();
  shape.pop_back();
  if (shape.empty()) shape.push_back(1);
  if (!recording_) return emit("kl_divergence", std::move(shape), std::move(out), {}, {});
  const Impl* qi = q.impl();
  const Impl* pi = p.impl();
  return emit("kl_divergence", std::move(shape), std::move(out), {q, p},
              [qi, pi, rows, n](std::span<const double> g,
                                std::span<std::vector<double>*> gin) {
                for (std::size_t r = 0; r < rows; ++r) {
                  for (std::size_t j = 0; j < n; ++j) {
                    const std::size_t idx = r * n + j;
                    const double qv = qi->data[idx];
                    const double pv = pi->data[idx];
                    if (gin[0] && qv != 0.0) {
                      double d = std::log(std::max(qv, kProbabilityFloor)) -
                                 std::log(std::max(pv, kProbabilityFloor));
                      if (qv > kProbabilityFloor) d += 1.0;
                      (*gin[0])[idx] += g[r] * d;
                    }
                    if (gin[1] && pv > kProbabilityFloor) {
                      (*gin[1])[idx] -= g[r] * qv / pv;
                    }
                  }
                }
              });
}

Tensor Graph::cross_entropy(const Tensor& logits, std::span<const std::size_t> labels) {
  require_defined("cross_entropy", logits);
  if (logits.rank() != 2 || logits.dim(0) != labels.size()) {
    shape_error("cross_entropy", "logits " + shape_str(logits.shape()) + " with " +
                                     std::to_string(labels.size()) + " labels");
  }
  const std::size_t rows = logits.dim(0);
  const std::size_t n = logits.dim(1);
  std::vector<double> out(rows);
  std::vector<double> probs(rows * n);
  for (std::size_t r = 0; r < rows; ++r) {
    if (labels[r] >= n) {
      shape_error("cross_entropy", "label " + std::to_string(labels[r]) +
                                       " out of range for " + std::to_string(n) +
                                       " classes");
    }
    const double* in = logits.data().data() + r * n;
    const double mx = *std::max_element(in, in + n);
    double total = 0.0;
    for (std::size_t j = 0; j < n; ++j) total += std::exp(in[j] - mx);
    const double lse = mx + std::log(total);
    out[r] = lse - in[labels[r]];
    for (std::size_t j = 0; j < n; ++j) probs[r * n + j] = std::exp(in[j] - lse);
  }
  if (!recording_) return emit("cross_entropy", {rows}, std::move(out), {}, {});
  std::vector<std::size_t> targets(labels.begin(), labels.end());
  return emit("cross_entropy", {rows}, std::move(out), {logits},
              [probs = std::move(probs), targets = std::move(targets), rows, n](
                  std::span<const double> g, std::span<std::vector<double>*> gin) {
                if (!gin[0]) return;
                for (std::size_t r = 0; r < rows; ++r) {
                  double* dst = gin[0]->data() + r * n;
                  for (std::size_t j = 0; j < n; ++j) dst[j] += g[r] * probs[r * n + j];
                  dst[targets[r]] -= g[r];
                }
              });
}

Tensor Graph::frobenius_norm(const Tensor& x) {
  require_defined("frobenius_norm", x);
  const double value = kernels::norm(x.data());
  const Impl* xi = x.impl();
  return emit("frobenius_norm", {1}, {value}, {x},
              [xi, value](std::span<const double> g, std::span<std::vector<double>*> gin) {
                if (!gin[0] || value == 0.0) return;
                for (std::size_t i = 0; i < xi->data.size(); ++i)
                  (*gin[0])[i] += g[0] * xi->data[i] / value;
              });
}

// --- backward ----------------------------------------------------------------

void Graph::backward(const Tensor& loss, const std::vector<Tensor>& targets) {
  if (!recording_) throw std::logic_error("backward on a non-recording graph");
  if (!loss.defined() || !produced_here(loss.impl())) {
    throw ConfigError("backward: loss was not produced by this graph");
  }
  if (loss.numel() != 1) {
    throw ConfigError("backward: loss must be scalar, got " + shape_str(loss.shape()));
  }

  std::unordered_set<const Impl*> target_set;
  std::unordered_set<const Impl*> used_leaves;
  for (const auto& record : records_) {
    for (const auto& input : record.inputs) used_leaves.insert(input.get());
  }
  for (const auto& t : targets) {
    if (!t.defined()) throw ConfigError("backward: undefined target");
    if (!t.requires_grad()) {
      throw ConfigError("backward: target " + t.describe() + " does not require grad");
    }
    if (!produced_here(t.impl()) && !used_leaves.contains(t.impl())) {
      throw ConfigError("backward: target " + t.describe() + " is not part of the graph");
    }
    target_set.insert(t.impl());
  }

  const std::size_t count = records_.size();
  auto needs = [&](const Impl* input, const std::vector<char>& reach) {
    return target_set.contains(input) ||
           (produced_here(input) && reach[input->producer_index]);
  };
  std::vector<char> reach(count, 0);
  for (std::size_t i = 0; i < count; ++i) {
    for (const auto& input : records_[i].inputs) {
      if (needs(input.get(), reach)) {
        reach[i] = 1;
        break;
      }
    }
  }

  std::vector<std::vector<double>> adjoint(count);
  std::unordered_map<const Impl*, std::vector<double>> leaf_adjoint;
  const std::size_t loss_index = loss.impl()->producer_index;
  adjoint[loss_index].assign(1, 1.0);

  std::vector<std::vector<double>*> grad_in;
  for (std::size_t i = loss_index + 1; i-- > 0;) {
    if (!reach[i] || adjoint[i].empty()) continue;
    Record& record = records_[i];
    grad_in.assign(record.inputs.size(), nullptr);
    for (std::size_t j = 0; j < record.inputs.size(); ++j) {
      const Impl* input = record.inputs[j].get();
      if (!needs(input, reach)) continue;
      std::vector<double>& buffer = produced_here(input)
                                        ? adjoint[input->producer_index]
                                        : leaf_adjoint[input];
      if (buffer.empty()) buffer.assign(input->data.size(), 0.0);
      grad_in[j] = &buffer;
    }
    record.backward(adjoint[i], grad_in);
    if (!target_set.contains(record.output.get())) {
      std::vector<double>().swap(adjoint[i]);
    }
  }

  for (const auto& t : targets) {
    Impl* impl = t.impl();
    const std::vector<double>* buffer = nullptr;
    if (produced_here(impl)) {
      buffer = &adjoint[impl->producer_index];
    } else if (auto it = leaf_adjoint.find(impl); it != leaf_adjoint.end()) {
      buffer = &it->second;
    }
    if (buffer == nullptr || buffer->empty()) continue;
    for (std::size_t k = 0; k < buffer->size(); ++k) impl->grad[k] += (*buffer)[k];
  }
}

}  // namespace creat::ad
