#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "creat/autodiff/graph.hpp"

namespace creat::cli {

inline constexpr double kGradcheckTolerance = 1e-5;
inline constexpr double kFiniteDifferenceStep = 1e-5;

// Scalar function of some leaf tensors, rebuilt on each evaluation.
using ScalarFn = std::function<ad::Tensor(ad::Graph&, const std::vector<ad::Tensor>&)>;

// Per-tensor relative error |analytic - numeric|_2 / max(|analytic|_2, |numeric|_2),
// maximized over the inputs; two vectors below 1e-10 in norm count as equal.
// Inputs must require grad; their values are restored afterwards.
double max_relative_error(const ScalarFn& fn, std::vector<ad::Tensor> inputs,
                          double step = kFiniteDifferenceStep);

struct GradcheckResult {
  std::string name;
  double max_relative_error = 0.0;
  double tolerance = kGradcheckTolerance;
  std::size_t entries = 0;  // number of scalar inputs perturbed
  bool passed = false;
};

// Central-difference check of every registered primitive plus whole-model
// cases (all parameters of a small encoder, and the attack objectives with
// respect to the perturbation on the toy-size encoder). Entries for
// primitives without a case are reported as failures.
std::vector<GradcheckResult> run_gradcheck(std::uint64_t seed = 2024);

}  // namespace creat::cli
