#pragma once

// Dense and conv2d layers. The deterministic and variational versions are the
// same class; only the default initializers and regularizers differ.

#include <array>
#include <string>

#include "bayes_layers/conv.hpp"
#include "bayes_layers/layer.hpp"

namespace bayes_layers {

enum class Estimator {
  kReparameterization,  // one weight sample per call, shared across the batch
  kFlipout,             // shared perturbation decorrelated per example with random signs
};

struct DenseOptions {
  Activation activation;  // empty means identity
  Initializer kernel_initializer = initializers::glorot_uniform();
  Initializer bias_initializer = initializers::zeros();
  Regularizer kernel_regularizer;
  Regularizer bias_regularizer;
  bool use_bias = true;
  Estimator estimator = Estimator::kReparameterization;
};

/// Defaults of the variational counterparts: normal posteriors on kernel and
/// bias, KL to N(0, prior_scale^2) on both.
inline DenseOptions variational_options(double prior_scale = 1.0) {
  DenseOptions o;
  o.kernel_initializer = initializers::trainable_normal();
  o.bias_initializer = initializers::trainable_normal();
  o.kernel_regularizer = regularizers::normal_kl_divergence(prior_scale);
  o.bias_regularizer = regularizers::normal_kl_divergence(prior_scale);
  return o;
}

namespace detail {

inline void require_units(std::size_t units, std::string_view what) {
  if (units == 0) fail(ErrorKind::kInvalidArgument, std::string(what) + " needs units >= 1");
}

inline Tensor apply(const Activation& act, Tensor x) { return act ? act(x) : x; }

}  // namespace detail

class Dense : public WeightedLayer {
 public:
  Dense(std::size_t units, DenseOptions options, std::string name = "dense")
      : WeightedLayer(std::move(name)), units_(units), options_(std::move(options)) {
    detail::require_units(units_, "dense");
  }

  std::size_t units() const { return units_; }
  const Weight& kernel() const { return kernel_; }
  const Weight& bias() const { return bias_; }
  const DenseOptions& options() const { return options_; }

 protected:
  void build(const Shape& input, Seed seed) override {
    check_input(input);
    kernel_ = make_weight("kernel", {input[1], units_}, options_.kernel_initializer, seed.derive(0));
    if (options_.use_bias) bias_ = make_weight("bias", {units_}, options_.bias_initializer, seed.derive(1));
    if (options_.estimator == Estimator::kFlipout && !kernel_.stochastic()) {
      fail(ErrorKind::kInvalidArgument, "flipout needs a stochastic kernel initializer");
    }
  }

  Value call(const Value& in, Seed seed) override {
    const Tensor& x = in.tensor();
    check_input(x.shape());
    Tensor out;
    if (options_.estimator == Estimator::kFlipout) {
      const auto q = kernel_.posterior();
      const Tensor eps(kernel_.shape(), standard_normal(seed.derive(0), num_elements(kernel_.shape())));
      const Tensor perturbation = mul(q->scale(), eps);
      const std::size_t b = x.dim(0);
      const Tensor s({b, x.dim(1)}, rademacher(seed.derive(2), b * x.dim(1)));
      const Tensor r({b, units_}, rademacher(seed.derive(3), b * units_));
      out = add(matmul(x, q->loc()), mul(matmul(mul(x, s), perturbation), r));
      regularize(options_.kernel_regularizer, RandomVariable(q, add(q->loc(), perturbation)));
    } else {
      const Value w = kernel_.realize(seed.derive(0));
      out = matmul(x, w.tensor());
      regularize(options_.kernel_regularizer, w);
    }
    if (options_.use_bias) {
      const Value b = bias_.realize(seed.derive(1));
      out = add(out, b.tensor());
      regularize(options_.bias_regularizer, b);
    }
    return detail::apply(options_.activation, out);
  }

 private:
  void check_input(const Shape& s) const {
    if (s.size() != 2) {
      fail(ErrorKind::kShape, "dense expects input [batch, features], got " + shape_string(s) + " (flatten first)");
    }
    if (built() && s[1] != kernel_.shape()[0]) {
      fail(ErrorKind::kShape, "dense built for " + std::to_string(kernel_.shape()[0]) + " features, got " +
                                  shape_string(s));
    }
  }

  std::size_t units_;
  DenseOptions options_;
  Weight kernel_, bias_;
};

inline std::shared_ptr<Dense> dense(std::size_t units, Activation activation = {}, DenseOptions options = {}) {
  if (activation) options.activation = std::move(activation);
  return std::make_shared<Dense>(units, std::move(options));
}

inline std::shared_ptr<Dense> variational_dense(std::size_t units, Activation activation = {},
                                                DenseOptions options = variational_options()) {
  if (activation) options.activation = std::move(activation);
  return std::make_shared<Dense>(units, std::move(options), "variational_dense");
}

inline std::shared_ptr<Dense> flipout_dense(std::size_t units, Activation activation = {},
                                            DenseOptions options = variational_options()) {
  if (activation) options.activation = std::move(activation);
  options.estimator = Estimator::kFlipout;
  return std::make_shared<Dense>(units, std::move(options), "flipout_dense");
}

struct Conv2DOptions {
  std::array<std::size_t, 2> kernel_size{3, 3};
  std::size_t stride = 1;
  Padding padding = Padding::kSame;
  Activation activation;
  Initializer kernel_initializer = initializers::glorot_uniform();
  Initializer bias_initializer = initializers::zeros();
  Regularizer kernel_regularizer;
  Regularizer bias_regularizer;
  bool use_bias = true;
};

inline Conv2DOptions variational_conv2d_options(double prior_scale = 1.0) {
  Conv2DOptions o;
  o.kernel_initializer = initializers::trainable_normal();
  o.bias_initializer = initializers::trainable_normal();
  o.kernel_regularizer = regularizers::normal_kl_divergence(prior_scale);
  o.bias_regularizer = regularizers::normal_kl_divergence(prior_scale);
  return o;
}

class Conv2D : public WeightedLayer {
 public:
  Conv2D(std::size_t filters, Conv2DOptions options, std::string name = "conv2d")
      : WeightedLayer(std::move(name)), filters_(filters), options_(std::move(options)) {
    detail::require_units(filters_, "conv2d");
  }

  const Weight& kernel() const { return kernel_; }
  const Weight& bias() const { return bias_; }

 protected:
  void build(const Shape& input, Seed seed) override {
    if (input.size() != 4) fail(ErrorKind::kShape, "conv2d expects [b,h,w,c], got " + shape_string(input));
    const Shape k{options_.kernel_size[0], options_.kernel_size[1], input[3], filters_};
    conv2d_geometry(input, k, options_.stride, options_.padding);
    kernel_ = make_weight("kernel", k, options_.kernel_initializer, seed.derive(0));
    if (options_.use_bias) bias_ = make_weight("bias", {filters_}, options_.bias_initializer, seed.derive(1));
  }

  Value call(const Value& in, Seed seed) override {
    const Value w = kernel_.realize(seed.derive(0));
    Tensor out = conv2d(in.tensor(), w.tensor(), options_.stride, options_.padding);
    regularize(options_.kernel_regularizer, w);
    if (options_.use_bias) {
      const Value b = bias_.realize(seed.derive(1));
      out = add(out, b.tensor());
      regularize(options_.bias_regularizer, b);
    }
    return detail::apply(options_.activation, out);
  }

 private:
  std::size_t filters_;
  Conv2DOptions options_;
  Weight kernel_, bias_;
};

inline std::shared_ptr<Conv2D> conv2d_layer(std::size_t filters, Conv2DOptions options = {}) {
  return std::make_shared<Conv2D>(filters, std::move(options));
}

inline std::shared_ptr<Conv2D> variational_conv2d(std::size_t filters,
                                                  Conv2DOptions options = variational_conv2d_options()) {
  return std::make_shared<Conv2D>(filters, std::move(options), "variational_conv2d");
}

}  // namespace bayes_layers
