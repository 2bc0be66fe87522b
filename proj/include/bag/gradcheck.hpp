#pragma once

#include <functional>
#include <string>

#include "bag/autodiff.hpp"

namespace bag {

struct GradCheckReport {
  double max_rel_err = 0.0;
  std::string worst_param;
  int64_t worst_index = -1;
};

// Central finite differences against reverse-mode gradients. The loss
// builder must construct a fresh scalar tape from the graph's current
// parameter values on every call.
inline GradCheckReport grad_check(Graph& graph, const std::function<Tensor()>& loss_builder,
                                  const std::vector<std::string>& param_names,
                                  double step = 1e-5) {
  if (step <= 0.0) throw std::invalid_argument("grad_check: step must be positive");
  Tensor loss = loss_builder();
  graph.backward(loss);

  GradCheckReport report;
  for (const std::string& name : param_names) {
    Tensor p = graph.get(name);
    Array autodiff_grad = p->grad;
    for (int64_t i = 0; i < p->value.numel(); ++i) {
      double x0 = p->value.data[i];
      if (x0 + step == x0 && x0 - step == x0)
        throw std::runtime_error("grad_check: step underflow at " + name);
      p->value.data[i] = x0 + step;
      double up = loss_builder()->value.data[0];
      p->value.data[i] = x0 - step;
      double down = loss_builder()->value.data[0];
      p->value.data[i] = x0;
      double fd = (up - down) / (2.0 * step);
      double ad = autodiff_grad.data[i];
      double rel = std::abs(ad - fd) / std::max({1.0, std::abs(ad), std::abs(fd)});
      if (rel > report.max_rel_err) {
        report.max_rel_err = rel;
        report.worst_param = name;
        report.worst_index = i;
      }
    }
  }
  return report;
}

}  // namespace bag
