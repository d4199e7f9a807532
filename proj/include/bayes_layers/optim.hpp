#pragma once

#include <cmath>
#include <span>
#include <unordered_map>
#include <vector>

#include "bayes_layers/tensor.hpp"

namespace bayes_layers {

struct AdamOptions {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

/// Moment estimates for one parameter.
struct AdamSlot {
  std::vector<double> m, v;
  std::size_t steps = 0;
};

/// One bias-corrected Adam update of `value` in place.
inline void adam_update(std::span<double> value, std::span<const double> grad, AdamSlot& slot,
                        const AdamOptions& o) {
  if (value.size() != grad.size()) {
    fail(ErrorKind::kShape, "adam: gradient has " + std::to_string(grad.size()) + " entries, parameter has " +
                                std::to_string(value.size()));
  }
  if (slot.m.empty()) {
    slot.m.assign(value.size(), 0.0);
    slot.v.assign(value.size(), 0.0);
  }
  ++slot.steps;
  const double c1 = 1.0 - std::pow(o.beta1, static_cast<double>(slot.steps));
  const double c2 = 1.0 - std::pow(o.beta2, static_cast<double>(slot.steps));
  for (std::size_t i = 0; i < value.size(); ++i) {
    slot.m[i] = o.beta1 * slot.m[i] + (1.0 - o.beta1) * grad[i];
    slot.v[i] = o.beta2 * slot.v[i] + (1.0 - o.beta2) * grad[i] * grad[i];
    value[i] -= o.learning_rate * (slot.m[i] / c1) / (std::sqrt(slot.v[i] / c2) + o.epsilon);
  }
}

/// Adam over a set of parameters that may grow between steps (layers that
/// create state lazily on their first call).
class Adam {
 public:
  explicit Adam(AdamOptions options = {}) : options_(options) {}

  const AdamOptions& options() const { return options_; }
  void set_learning_rate(double lr) { options_.learning_rate = lr; }

  void step(const std::vector<Parameter>& params, const std::vector<Tensor>& grads) {
    if (params.size() != grads.size()) fail(ErrorKind::kInvalidArgument, "adam: one gradient per parameter");
    for (std::size_t i = 0; i < params.size(); ++i) {
      Parameter p = params[i];
      if (!p.trainable()) continue;
      if (grads[i].shape() != p.shape()) {
        fail(ErrorKind::kShape, "adam: gradient for '" + p.name() + "' has shape " + shape_string(grads[i].shape()));
      }
      Tensor next = p.value().detach();
      adam_update(next.mutable_data(), grads[i].data(), slots_[p.id()], options_);
      p.assign(next);
    }
  }

 private:
  AdamOptions options_;
  std::unordered_map<const Parameter::State*, AdamSlot> slots_;
};

}  // namespace bayes_layers
