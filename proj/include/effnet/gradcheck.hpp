#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "effnet/tensor.hpp"

namespace effnet {

/// Builds a scalar from the given leaves. Called once with gradients
/// recorded and then repeatedly under NoGradGuard with perturbed inputs.
using GraphBuilder = std::function<Tensor(const std::vector<Tensor>&)>;

struct GradCheckOptions {
  double epsilon = 1e-5;
  /// Below this analytic magnitude the absolute error is reported instead.
  double absolute_below = 1e-8;
  /// Added to every analytic gradient before comparison; used to confirm the
  /// harness flags a wrong backward pass.
  double injected_fault = 0.0;
};

/// Worst elementwise relative error between backward() and central
/// differences (f(x+e) - f(x-e)) / 2e over every element of every input.
double grad_check(const GraphBuilder& build, const std::vector<Tensor>& inputs,
                  const GradCheckOptions& options = {});

struct GradCheckResult {
  std::string name;
  std::size_t instances = 0;
  double max_error = 0.0;
  bool passed = false;
};

/// Every op covered by `gradcheck --all`, plus the composed SE block.
std::vector<std::string> gradcheck_ops();

/// Checks `instances` random shapes and values of one registered op.
/// Throws UsageError for an unknown name.
GradCheckResult run_gradcheck(const std::string& op, std::size_t instances = 100,
                              std::uint64_t seed = 0, double tolerance = 1e-4);

}  // namespace effnet
