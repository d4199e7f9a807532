#pragma once

// Reversible layers: call, reverse and log_det_jacobian. Called on a
// RandomVariable they return the pushforward RandomVariable.

#include <string>

#include "bayes_layers/dense.hpp"

namespace bayes_layers {

/// Pushes `rv` through a reversible layer. The result's log_prob needs the
/// layer's log_det_jacobian.
inline RandomVariable propagate(const RandomVariable& rv, const LayerPtr& layer, Seed seed = Seed()) {
  if (!layer->reversible()) {
    fail(ErrorKind::kNotReversible, "cannot propagate a RandomVariable through non-reversible layer '" +
                                        layer->name() + "'");
  }
  const Tensor y = (*layer)(rv.value(), seed).tensor();
  return RandomVariable(
      std::make_shared<TransformedDistribution>(rv.distribution_ptr(), std::make_shared<LayerBijector>(layer)), y);
}

class ReversibleLayer : public Layer {
 public:
  using Layer::Layer;
  bool reversible() const override { return true; }

 protected:
  virtual Tensor forward(const Tensor& x, Seed seed) = 0;

  Value call(const Value& x, Seed seed) override {
    if (!x.is_random()) return forward(x.tensor(), seed);
    return propagate(x.random(), shared_from_this(), seed);
  }
};

namespace detail {

inline Tensor event_sum(const Tensor& t) { return sum(t, t.rank() - 1); }

}  // namespace detail

/// y = scale * x + shift with fixed scalars; mostly for tests and examples.
class ElementwiseAffine : public ReversibleLayer {
 public:
  ElementwiseAffine(double scale, double shift = 0.0)
      : ReversibleLayer("elementwise_affine"), scale_(scale), shift_(shift) {
    if (scale_ == 0.0 || !std::isfinite(scale_)) fail(ErrorKind::kDomain, "affine scale must be finite and nonzero");
  }

  Tensor reverse(const Tensor& y) override { return (y - shift_) / scale_; }
  Tensor log_det_jacobian(const Tensor& x) override {
    if (x.rank() == 0) return Tensor::scalar(std::log(std::abs(scale_)));
    return detail::event_sum(Tensor::full(x.shape(), std::log(std::abs(scale_))));
  }

 protected:
  Tensor forward(const Tensor& x, Seed) override { return x * scale_ + shift_; }

 private:
  double scale_, shift_;
};

struct MadeOptions {
  std::vector<std::size_t> hidden_sizes{16};
  Activation activation = activations::tanh();
  bool zero_init_output = true;
  /// Uses input order d, d-1, ..., 1 instead of 1, ..., d.
  bool reverse_order = false;
};

/// Masked autoencoder: a dense stack whose masks make output i (shift and
/// log-scale for input i) depend only on inputs earlier in the ordering.
/// Output is [b, 2d] = [shift | log_scale].
class Made : public Layer {
 public:
  Made(std::size_t dims, MadeOptions options) : Layer("made"), dims_(dims), options_(std::move(options)) {
    if (dims_ < 2) fail(ErrorKind::kInvalidArgument, "made needs dims >= 2");
    for (std::size_t h : options_.hidden_sizes) {
      if (h < dims_ - 1) {
        warnings_.push_back("made hidden layer of width " + std::to_string(h) + " is narrower than the " +
                            std::to_string(dims_ - 1) + " degrees it needs; some inputs cannot reach outputs");
      }
    }
    make_masks();
  }

  std::size_t dims() const { return dims_; }
  const std::vector<Tensor>& masks() const { return masks_; }
  const std::vector<std::size_t>& input_degrees() const { return input_degrees_; }
  const std::vector<std::string>& warnings() const { return warnings_; }

 protected:
  void build(const Shape& input, Seed seed) override {
    check_input(input);
    for (std::size_t l = 0; l < masks_.size(); ++l) {
      const Shape k = masks_[l].shape();
      const bool last = l + 1 == masks_.size();
      Tensor w = last && options_.zero_init_output
                     ? Tensor::zeros(k)
                     : std::get<Tensor>(initializers::glorot_uniform()(k, seed.derive(l)));
      kernels_.push_back(add_parameter("kernel_" + std::to_string(l), w));
      biases_.push_back(add_parameter("bias_" + std::to_string(l), Tensor::zeros({k[1]})));
    }
  }

  Value call(const Value& in, Seed) override {
    check_input(in.shape());
    Tensor h = in.tensor();
    for (std::size_t l = 0; l < masks_.size(); ++l) {
      h = add(matmul(h, mul(kernels_[l].read(), masks_[l])), biases_[l].read());
      if (l + 1 < masks_.size()) h = detail::apply(options_.activation, h);
    }
    return h;
  }

 private:
  void check_input(const Shape& s) const {
    if (s.size() != 2 || s[1] != dims_) {
      fail(ErrorKind::kShape, "made expects [b, " + std::to_string(dims_) + "], got " + shape_string(s));
    }
  }

  void make_masks() {
    input_degrees_.resize(dims_);
    for (std::size_t i = 0; i < dims_; ++i) input_degrees_[i] = options_.reverse_order ? dims_ - i : i + 1;
    std::vector<std::size_t> prev = input_degrees_;
    for (std::size_t width : options_.hidden_sizes) {
      std::vector<std::size_t> deg(width);
      for (std::size_t k = 0; k < width; ++k) deg[k] = 1 + k % (dims_ - 1);
      std::vector<double> m(prev.size() * width);
      for (std::size_t j = 0; j < prev.size(); ++j)
        for (std::size_t k = 0; k < width; ++k) m[j * width + k] = prev[j] <= deg[k] ? 1.0 : 0.0;
      masks_.emplace_back(Shape{prev.size(), width}, std::move(m));
      prev = std::move(deg);
    }
    // outputs: shift for each input, then log-scale for each input
    std::vector<double> m(prev.size() * 2 * dims_);
    for (std::size_t j = 0; j < prev.size(); ++j)
      for (std::size_t o = 0; o < 2 * dims_; ++o) {
        m[j * 2 * dims_ + o] = prev[j] < input_degrees_[o % dims_] ? 1.0 : 0.0;
      }
    masks_.emplace_back(Shape{prev.size(), 2 * dims_}, std::move(m));
  }

  std::size_t dims_;
  MadeOptions options_;
  std::vector<std::size_t> input_degrees_;
  std::vector<Tensor> masks_;
  std::vector<Parameter> kernels_, biases_;
  std::vector<std::string> warnings_;
};

inline std::shared_ptr<Made> made_conditioner(std::size_t dims, MadeOptions options = {}) {
  return std::make_shared<Made>(dims, std::move(options));
}

/// Affine coupling. Entries with mask 1 pass through and condition the
/// others: y = x_a + (1 - mask) (x exp(s) + t) with (t, raw) = conditioner(x_a)
/// and s = bound * tanh(raw).
class CouplingLayer : public ReversibleLayer {
 public:
  CouplingLayer(std::vector<double> mask, LayerPtr conditioner, double scale_bound = 3.0)
      : ReversibleLayer("coupling"), conditioner_(std::move(conditioner)), bound_(scale_bound) {
    bool any_zero = false, any_one = false;
    for (double m : mask) {
      if (m != 0.0 && m != 1.0) fail(ErrorKind::kInvalidArgument, "coupling mask must be binary");
      (m == 0.0 ? any_zero : any_one) = true;
    }
    if (!any_zero || !any_one) fail(ErrorKind::kInvalidArgument, "coupling mask needs both zeros and ones");
    if (!(bound_ > 0)) fail(ErrorKind::kDomain, "scale bound must be positive");
    mask_ = Tensor::vector(mask);
    inverse_mask_ = 1.0 - mask_;
  }

  std::vector<LayerPtr> children() const override { return {conditioner_}; }
  std::size_t dims() const { return mask_.size(); }

  Tensor reverse(const Tensor& y) override {
    check_input(y.shape());
    const Tensor y_a = mul(y, mask_);
    const auto [t, s] = shift_and_log_scale(y_a, Seed());
    return add(y_a, mul(inverse_mask_, mul(sub(y, t), exp(neg(s)))));
  }

  Tensor log_det_jacobian(const Tensor& x) override {
    check_input(x.shape());
    return detail::event_sum(mul(inverse_mask_, shift_and_log_scale(mul(x, mask_), Seed()).second));
  }

  Tensor inverse_log_det_jacobian(const Tensor& y) override {
    check_input(y.shape());
    // y_a == x_a, so the conditioner sees the same input either way
    return neg(detail::event_sum(mul(inverse_mask_, shift_and_log_scale(mul(y, mask_), Seed()).second)));
  }

 protected:
  void build(const Shape& input, Seed seed) override {
    check_input(input);
    conditioner_->ensure_built(input, seed);
  }

  Tensor forward(const Tensor& x, Seed seed) override {
    check_input(x.shape());
    const Tensor x_a = mul(x, mask_);
    const auto [t, s] = shift_and_log_scale(x_a, seed);
    return add(x_a, mul(inverse_mask_, add(mul(x, exp(s)), t)));
  }

 private:
  void check_input(const Shape& s) const {
    if (s.size() != 2 || s[1] != dims()) {
      fail(ErrorKind::kShape, "coupling expects [b, " + std::to_string(dims()) + "], got " + shape_string(s));
    }
  }

  std::pair<Tensor, Tensor> shift_and_log_scale(const Tensor& x_a, Seed seed) {
    const Tensor h = (*conditioner_)(x_a, seed).tensor();
    const std::size_t d = dims();
    if (h.shape() != Shape{x_a.dim(0), 2 * d}) {
      fail(ErrorKind::kShape, "conditioner must return [b, " + std::to_string(2 * d) + "], got " +
                                  shape_string(h.shape()));
    }
    return {slice(h, 1, 0, d), bound_ * tanh(slice(h, 1, d, d))};
  }

  LayerPtr conditioner_;
  double bound_;
  Tensor mask_, inverse_mask_;
};

inline std::shared_ptr<CouplingLayer> coupling_layer(std::vector<double> mask, LayerPtr conditioner,
                                                     double scale_bound = 3.0) {
  return std::make_shared<CouplingLayer>(std::move(mask), std::move(conditioner), scale_bound);
}

/// Alternating mask: 1 on even indices when `parity` is 0, on odd otherwise.
inline std::vector<double> alternating_mask(std::size_t dims, std::size_t parity) {
  std::vector<double> m(dims);
  for (std::size_t i = 0; i < dims; ++i) m[i] = (i % 2 == parity % 2) ? 1.0 : 0.0;
  return m;
}

/// Swaps call and reverse of the wrapped layer. Construction never fails;
/// calling it errors if the inner layer has no reverse.
class ReverseWrapper : public ReversibleLayer {
 public:
  explicit ReverseWrapper(LayerPtr inner) : ReversibleLayer("reverse"), inner_(std::move(inner)) {}

  std::vector<LayerPtr> children() const override { return {inner_}; }
  Tensor reverse(const Tensor& y) override { return (*inner_)(y).tensor(); }
  Tensor log_det_jacobian(const Tensor& x) override { return inner_->inverse_log_det_jacobian(x); }
  Tensor inverse_log_det_jacobian(const Tensor& y) override { return inner_->log_det_jacobian(y); }

 protected:
  Tensor forward(const Tensor& x, Seed seed) override {
    inner_->ensure_built(x.shape(), seed);
    return inner_->reverse(x);
  }

 private:
  LayerPtr inner_;
};

inline std::shared_ptr<ReverseWrapper> reverse_wrapper(LayerPtr inner) {
  return std::make_shared<ReverseWrapper>(std::move(inner));
}

/// Integer-valued RandomVariable from a continuous one with a CDF: mass of
/// each integer in [low, high] is the base probability of its unit bin.
inline RandomVariable discretize(const RandomVariable& base, Seed seed, double low = 0.0, double high = 255.0) {
  return sample(std::make_shared<Discretized>(base.distribution_ptr(), low, high), seed);
}

class Discretize : public Layer {
 public:
  explicit Discretize(double low = 0.0, double high = 255.0) : Layer("discretize"), low_(low), high_(high) {}

 protected:
  Value call(const Value& x, Seed seed) override {
    if (!x.is_random()) fail(ErrorKind::kInvalidArgument, "discretize needs a RandomVariable input");
    return discretize(x.random(), seed, low_, high_);
  }

 private:
  double low_, high_;
};

/// RealNVP-style flow on `dims` inputs: couplings with alternating masks and
/// MADE conditioners (ordering flipped with the mask so every coupling's
/// transformed entries see the fixed ones).
inline std::shared_ptr<Sequential> realnvp_flow(std::size_t dims, std::size_t num_couplings,
                                                MadeOptions options = {}, double scale_bound = 3.0) {
  std::vector<LayerPtr> layers;
  for (std::size_t i = 0; i < num_couplings; ++i) {
    MadeOptions o = options;
    o.reverse_order = (i % 2 == 1);
    layers.push_back(coupling_layer(alternating_mask(dims, i % 2), made_conditioner(dims, o), scale_bound));
  }
  return std::make_shared<Sequential>(std::move(layers), "flow");
}

}  // namespace bayes_layers
