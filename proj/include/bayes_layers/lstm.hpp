#pragma once

#include <string>
#include <utility>

#include "bayes_layers/dense.hpp"

namespace bayes_layers {

struct LSTMOptions {
  Initializer input_initializer = initializers::glorot_uniform();
  Initializer recurrent_initializer = initializers::glorot_uniform();
  Initializer bias_initializer = initializers::zeros();
  Regularizer input_regularizer;
  Regularizer recurrent_regularizer;
  Regularizer bias_regularizer;
};

inline LSTMOptions variational_lstm_options(double prior_scale = 1.0) {
  LSTMOptions o;
  o.input_initializer = initializers::trainable_normal();
  o.recurrent_initializer = initializers::trainable_normal();
  o.bias_initializer = initializers::trainable_normal();
  o.input_regularizer = regularizers::normal_kl_divergence(prior_scale);
  o.recurrent_regularizer = regularizers::normal_kl_divergence(prior_scale);
  o.bias_regularizer = regularizers::normal_kl_divergence(prior_scale);
  return o;
}

/// LSTM cell with gate order (input, forget, candidate, output). Weights are
/// sampled once per sequence by begin_sequence() and reused at every step.
/// Calling the layer on [b, T, d] unrolls from a zero state and returns the
/// hidden states [b, T, units].
class LSTMCell : public WeightedLayer {
 public:
  LSTMCell(std::size_t units, LSTMOptions options, std::string name = "lstm")
      : WeightedLayer(std::move(name)), units_(units), options_(std::move(options)) {
    detail::require_units(units_, "lstm");
  }

  std::size_t units() const { return units_; }
  const Weight& input_kernel() const { return wx_; }
  const Weight& recurrent_kernel() const { return wh_; }
  const Weight& bias() const { return b_; }

  /// Builds for `features` inputs if needed, samples this sequence's weights
  /// and replaces the losses with their regularizers.
  void begin_sequence(std::size_t features, Seed seed) {
    ensure_built({1, 1, features}, seed);
    clear_losses();
    sx_ = wx_.realize(seed.derive(0)).tensor();
    sh_ = wh_.realize(seed.derive(1)).tensor();
    sb_ = b_.realize(seed.derive(2)).tensor();
    // regularizers see the same draws as the forward pass
    regularize(options_.input_regularizer, realized(wx_, sx_));
    regularize(options_.recurrent_regularizer, realized(wh_, sh_));
    regularize(options_.bias_regularizer, realized(b_, sb_));
    in_sequence_ = true;
  }

  /// One step: (x_t [b,d], h [b,u], c [b,u]) -> (h', c').
  std::pair<Tensor, Tensor> step(const Tensor& x, const Tensor& h, const Tensor& c) const {
    if (!in_sequence_) fail(ErrorKind::kInvalidArgument, "lstm step before begin_sequence");
    if (x.rank() != 2 || x.dim(1) != sx_.dim(0)) {
      fail(ErrorKind::kShape, "lstm step expects input [b," + std::to_string(sx_.dim(0)) + "], got " +
                                  shape_string(x.shape()));
    }
    const Shape state{x.dim(0), units_};
    if (h.shape() != state || c.shape() != state) {
      fail(ErrorKind::kShape, "lstm state must be " + shape_string(state) + ", got h " + shape_string(h.shape()) +
                                  " and c " + shape_string(c.shape()));
    }
    const Tensor z = add(add(matmul(x, sx_), matmul(h, sh_)), sb_);
    const Tensor i = sigmoid(slice(z, 1, 0, units_));
    const Tensor f = sigmoid(slice(z, 1, units_, units_));
    const Tensor g = tanh(slice(z, 1, 2 * units_, units_));
    const Tensor o = sigmoid(slice(z, 1, 3 * units_, units_));
    const Tensor c_next = add(mul(f, c), mul(i, g));
    return {mul(o, tanh(c_next)), c_next};
  }

 protected:
  void build(const Shape& input, Seed seed) override {
    if (input.size() != 3) fail(ErrorKind::kShape, "lstm expects [batch, time, features], got " + shape_string(input));
    wx_ = make_weight("input_kernel", {input[2], 4 * units_}, options_.input_initializer, seed.derive(0));
    wh_ = make_weight("recurrent_kernel", {units_, 4 * units_}, options_.recurrent_initializer, seed.derive(1));
    b_ = make_weight("bias", {4 * units_}, options_.bias_initializer, seed.derive(2));
  }

  Value call(const Value& in, Seed seed) override {
    const Tensor& x = in.tensor();
    if (x.rank() != 3) fail(ErrorKind::kShape, "lstm expects [batch, time, features], got " + shape_string(x.shape()));
    const std::size_t b = x.dim(0), steps = x.dim(1), d = x.dim(2);
    begin_sequence(d, seed);
    Tensor h = Tensor::zeros({b, units_}), c = Tensor::zeros({b, units_});
    std::vector<Tensor> outputs;
    for (std::size_t t = 0; t < steps; ++t) {
      std::tie(h, c) = step(reshape(slice(x, 1, t, 1), {b, d}), h, c);
      outputs.push_back(reshape(h, {b, 1, units_}));
    }
    if (outputs.empty()) return Tensor::zeros({b, 0, units_});
    return concat(outputs, 1);
  }

 private:
  static Value realized(const Weight& w, const Tensor& value) {
    if (!w.stochastic()) return value;
    return RandomVariable(w.posterior(), value);
  }

  std::size_t units_;
  LSTMOptions options_;
  Weight wx_, wh_, b_;
  Tensor sx_, sh_, sb_;
  bool in_sequence_ = false;
};

inline std::shared_ptr<LSTMCell> lstm_cell(std::size_t units, LSTMOptions options = {}) {
  return std::make_shared<LSTMCell>(units, std::move(options));
}

inline std::shared_ptr<LSTMCell> variational_lstm_cell(std::size_t units,
                                                       LSTMOptions options = variational_lstm_options()) {
  return std::make_shared<LSTMCell>(units, std::move(options), "variational_lstm");
}

}  // namespace bayes_layers
