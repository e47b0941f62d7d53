#include "effnet/gradcheck.hpp"

#include <algorithm>
#include <cmath>

#include "effnet/errors.hpp"

namespace effnet {

double grad_check(const GraphBuilder& build, const std::vector<Tensor>& inputs,
                  const GradCheckOptions& options) {
  std::vector<Tensor> leaves;
  leaves.reserve(inputs.size());
  for (const auto& in : inputs) {
    for (double v : in.data()) {
      if (!std::isfinite(v)) throw UsageError("grad_check: non-finite input");
    }
    leaves.push_back(Tensor::from(in.shape(),
                                  std::vector<double>(in.data().begin(), in.data().end()),
                                  true));
  }

  Tensor out = build(leaves);
  if (out.numel() != 1) {
    throw UsageError("grad_check: builder must return a scalar, got shape " +
                     shape_str(out.shape()));
  }
  out.backward();

  std::vector<std::vector<double>> analytic;
  for (auto& leaf : leaves) {
    std::vector<double> g(leaf.numel(), 0.0);
    if (leaf.has_grad()) std::copy(leaf.grad().begin(), leaf.grad().end(), g.begin());
    for (double& v : g) v += options.injected_fault;
    analytic.push_back(std::move(g));
  }

  NoGradGuard no_grad;
  const double eps = options.epsilon;
  double worst = 0.0;
  for (std::size_t k = 0; k < leaves.size(); ++k) {
    auto values = leaves[k].mutable_data();
    for (std::size_t i = 0; i < values.size(); ++i) {
      const double saved = values[i];
      values[i] = saved + eps;
      const double plus = build(leaves).item();
      values[i] = saved - eps;
      const double minus = build(leaves).item();
      values[i] = saved;
      const double numeric = (plus - minus) / (2.0 * eps);
      const double a = analytic[k][i];
      const double diff = std::abs(a - numeric);
      const double err = std::abs(a) < options.absolute_below ? diff : diff / std::abs(a);
      worst = std::max(worst, err);
    }
  }
  return worst;
}

}  // namespace effnet
