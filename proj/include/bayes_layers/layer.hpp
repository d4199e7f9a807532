#pragma once

// Layer contract: tensor-in / tensor-out calls, lazily built parameters,
// initializer and regularizer callables, and per-call loss side effects.

#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <utility>
#include <variant>
#include <vector>

#include "bayes_layers/distributions.hpp"

namespace bayes_layers {

/// What flows between layers: a plain tensor or a RandomVariable. Numeric
/// code reads `tensor()`, which for a RandomVariable is its sample.
class Value {
 public:
  Value(Tensor t) : tensor_(std::move(t)) {}  // NOLINT: implicit by design
  Value(RandomVariable rv) : tensor_(rv.value()), random_(std::move(rv)) {}  // NOLINT

  const Tensor& tensor() const { return tensor_; }
  const Shape& shape() const { return tensor_.shape(); }
  bool is_random() const { return random_.has_value(); }
  const RandomVariable& random() const {
    if (!random_) fail(ErrorKind::kInvalidArgument, "value is a plain tensor, not a RandomVariable");
    return *random_;
  }
  DistributionPtr distribution() const { return random_ ? random_->distribution_ptr() : nullptr; }
  operator const Tensor&() const { return tensor_; }  // NOLINT

 private:
  Tensor tensor_;
  std::optional<RandomVariable> random_;
};

using LayerPtr = std::shared_ptr<class Layer>;

class Layer : public std::enable_shared_from_this<Layer> {
 public:
  explicit Layer(std::string name) : name_(std::move(name)) {}
  virtual ~Layer() = default;
  Layer(const Layer&) = delete;
  Layer& operator=(const Layer&) = delete;

  /// Clears losses, builds parameters on first use (from `seed`), then runs
  /// the layer. Same parameters and seed give the same result.
  Value operator()(const Value& x, Seed seed = Seed()) {
    losses_.clear();
    ensure_built(x.shape(), seed);
    return call(x, seed);
  }

  void ensure_built(const Shape& input_shape, Seed seed = Seed()) {
    if (built_) return;
    build(input_shape, seed.derive(kBuildTag));
    built_ = true;
  }
  bool built() const { return built_; }

  virtual bool reversible() const { return false; }
  virtual Tensor reverse(const Tensor&) { not_reversible("reverse"); }
  /// log |det d call / dx| per example (the last axis is the event).
  virtual Tensor log_det_jacobian(const Tensor&) { not_reversible("log_det_jacobian"); }
  /// log |det d reverse / dy| per example.
  virtual Tensor inverse_log_det_jacobian(const Tensor& y) { return neg(log_det_jacobian(reverse(y))); }

  /// Regularizer scalars from the most recent call.
  const std::vector<Tensor>& losses() const { return losses_; }
  const std::string& name() const { return name_; }
  virtual std::vector<LayerPtr> children() const { return {}; }

  /// Own and nested parameters with hierarchical names (stable across runs).
  std::vector<std::pair<std::string, Parameter>> named_parameters(const std::string& prefix = "") const {
    std::vector<std::pair<std::string, Parameter>> out;
    for (const auto& p : params_) out.emplace_back(prefix + name_ + "/" + p.name(), p);
    const auto kids = children();
    for (std::size_t i = 0; i < kids.size(); ++i) {
      auto sub = kids[i]->named_parameters(prefix + name_ + "." + std::to_string(i) + ".");
      out.insert(out.end(), sub.begin(), sub.end());
    }
    return out;
  }
  std::vector<Parameter> parameters() const {
    std::vector<Parameter> out;
    for (auto& [n, p] : named_parameters()) out.push_back(p);
    return out;
  }
  std::vector<Parameter> trainable_parameters() const {
    std::vector<Parameter> out;
    for (auto& p : parameters())
      if (p.trainable()) out.push_back(p);
    return out;
  }
  /// Looks up one of this layer's own parameters by short name.
  Parameter parameter(const std::string& short_name) const {
    for (const auto& p : params_)
      if (p.name() == short_name) return p;
    fail(ErrorKind::kInvalidArgument, "layer '" + name_ + "' has no parameter '" + short_name + "'");
  }

  static constexpr std::uint64_t kBuildTag = 0xB01D;

 protected:
  virtual void build(const Shape&, Seed) {}
  virtual Value call(const Value& x, Seed seed) = 0;

  Parameter add_parameter(std::string short_name, Tensor value, bool trainable = true) {
    params_.emplace_back(std::move(short_name), std::move(value), trainable);
    return params_.back();
  }
  void add_loss(Tensor loss) {
    if (loss.rank() != 0) fail(ErrorKind::kShape, "layer losses must be scalars, got " + shape_string(loss.shape()));
    losses_.push_back(std::move(loss));
  }
  void clear_losses() { losses_.clear(); }

  [[noreturn]] void not_reversible(std::string_view what) const {
    fail(ErrorKind::kNotReversible, "layer '" + name_ + "' does not implement " + std::string(what));
  }

 private:
  std::string name_;
  bool built_ = false;
  std::vector<Parameter> params_;
  std::vector<Tensor> losses_;
};

/// Flat list of the model's regularizer scalars from its last call.
inline std::vector<Tensor> collect_losses(const Layer& model) { return model.losses(); }

inline Tensor total_loss(const std::vector<Tensor>& losses) {
  Tensor total = Tensor::scalar(0.0);
  for (const auto& l : losses) total = add(total, l);
  return total;
}

/// Composition in list order. Child i is called with seed.derive(i).
class Sequential : public Layer {
 public:
  explicit Sequential(std::vector<LayerPtr> layers, std::string name = "sequential")
      : Layer(std::move(name)), layers_(std::move(layers)) {
    if (layers_.empty()) fail(ErrorKind::kInvalidArgument, "sequential needs at least one layer");
  }

  std::vector<LayerPtr> children() const override { return layers_; }
  const LayerPtr& layer(std::size_t i) const { return layers_.at(i); }
  std::size_t size() const { return layers_.size(); }

  bool reversible() const override {
    for (const auto& l : layers_)
      if (!l->reversible()) return false;
    return true;
  }

  Tensor reverse(const Tensor& y) override {
    Tensor x = y;
    for (std::size_t i = layers_.size(); i-- > 0;) {
      x = guarded(i, [&] {
        layers_[i]->ensure_built(x.shape());
        return layers_[i]->reverse(x);
      });
    }
    return x;
  }

  Tensor log_det_jacobian(const Tensor& x) override {
    Tensor h = x;
    std::optional<Tensor> total;
    for (std::size_t i = 0; i < layers_.size(); ++i) {
      guarded(i, [&] {
        layers_[i]->ensure_built(h.shape());
        const Tensor ldj = layers_[i]->log_det_jacobian(h);
        total = total ? add(*total, ldj) : ldj;
        h = (*layers_[i])(h).tensor();
        return h;
      });
    }
    return *total;
  }

 protected:
  Value call(const Value& x, Seed seed) override {
    Value h = x;
    for (std::size_t i = 0; i < layers_.size(); ++i) {
      h = guarded(i, [&] { return (*layers_[i])(h, seed.derive(i)); });
      for (const auto& l : layers_[i]->losses()) add_loss(l);
    }
    return h;
  }

 private:
  template <typename F>
  auto guarded(std::size_t i, F&& f) -> decltype(f()) {
    try {
      return f();
    } catch (const Error& e) {
      fail(e.kind(), "layer " + std::to_string(i) + " (" + layers_[i]->name() + "): " + e.message());
    }
  }

  std::vector<LayerPtr> layers_;
};

inline std::shared_ptr<Sequential> sequential(std::vector<LayerPtr> layers) {
  return std::make_shared<Sequential>(std::move(layers));
}

using Activation = std::function<Tensor(const Tensor&)>;

namespace activations {
inline Activation relu() { return [](const Tensor& x) { return bayes_layers::relu(x); }; }
inline Activation tanh() { return [](const Tensor& x) { return bayes_layers::tanh(x); }; }
inline Activation sigmoid() { return [](const Tensor& x) { return bayes_layers::sigmoid(x); }; }
inline Activation softplus() { return [](const Tensor& x) { return bayes_layers::softplus(x); }; }
}  // namespace activations

/// Applies a fixed function; no parameters, no losses.
class Lambda : public Layer {
 public:
  Lambda(std::function<Value(const Value&)> fn, std::string name = "lambda")
      : Layer(std::move(name)), fn_(std::move(fn)) {}

 protected:
  Value call(const Value& x, Seed) override { return fn_(x); }

 private:
  std::function<Value(const Value&)> fn_;
};

inline LayerPtr identity_layer() {
  return std::make_shared<Lambda>([](const Value& x) { return x; }, "identity");
}

/// Reshapes [b, ...] to [b, prod(...)].
inline LayerPtr flatten() {
  return std::make_shared<Lambda>(
      [](const Value& x) -> Value {
        const Tensor& t = x.tensor();
        if (t.rank() < 1) fail(ErrorKind::kShape, "flatten needs a batch axis");
        return reshape(t, {t.dim(0), t.size() / std::max<std::size_t>(t.dim(0), 1)});
      },
      "flatten");
}

// ---------------------------------------------------------------------------
// Initializers and regularizers

/// Initial state of a mean-field normal posterior: loc and pre-softplus scale.
struct TrainableNormal {
  Tensor loc;
  Tensor rho;
};

using InitialValue = std::variant<Tensor, TrainableNormal>;
using Initializer = std::function<InitialValue(const Shape&, Seed)>;
/// Maps a parameter (a plain tensor or a RandomVariable) to a scalar loss.
using Regularizer = std::function<Tensor(const Value&)>;

inline std::pair<double, double> fans(const Shape& shape) {
  if (shape.empty()) return {1.0, 1.0};
  if (shape.size() == 1) return {static_cast<double>(shape[0]), static_cast<double>(shape[0])};
  double receptive = 1.0;
  for (std::size_t i = 0; i + 2 < shape.size(); ++i) receptive *= static_cast<double>(shape[i]);
  return {receptive * static_cast<double>(shape[shape.size() - 2]), receptive * static_cast<double>(shape.back())};
}

inline double inverse_softplus(double y) { return y > 30.0 ? y : std::log(std::expm1(y)); }

namespace initializers {

inline Initializer zeros() {
  return [](const Shape& s, Seed) -> InitialValue { return Tensor::zeros(s); };
}

inline Initializer constant(Tensor value) {
  return [value](const Shape& s, Seed) -> InitialValue {
    if (value.shape() != s) {
      fail(ErrorKind::kShape, "constant initializer has shape " + shape_string(value.shape()) + ", need " +
                                  shape_string(s));
    }
    return value;
  };
}

/// Uniform in +-sqrt(6 / (fan_in + fan_out)).
inline Initializer glorot_uniform() {
  return [](const Shape& s, Seed seed) -> InitialValue {
    const auto [fi, fo] = fans(s);
    const double bound = std::sqrt(6.0 / (fi + fo));
    return Tensor(s, uniform(seed, num_elements(s), -bound, bound));
  };
}

/// Mean-field normal posterior: loc ~ N(0, (mean_scale * sqrt(2/(fan_in+fan_out)))^2),
/// scale = initial_scale everywhere (stored as rho = softplus^-1(initial_scale)).
inline Initializer trainable_normal(double mean_scale = 0.1, double initial_scale = 0.1) {
  return [=](const Shape& s, Seed seed) -> InitialValue {
    const auto [fi, fo] = fans(s);
    const double sd = mean_scale * std::sqrt(2.0 / (fi + fo));
    auto loc = standard_normal(seed, num_elements(s));
    for (auto& v : loc) v *= sd;
    return TrainableNormal{Tensor(s, std::move(loc)), Tensor::full(s, inverse_softplus(initial_scale))};
  };
}

/// Posterior with fixed initial loc and scale (rho = -inf gives scale 0).
inline Initializer trainable_normal_from(Tensor loc, double rho) {
  return [loc, rho](const Shape& s, Seed) -> InitialValue {
    if (loc.shape() != s) {
      fail(ErrorKind::kShape, "initial loc has shape " + shape_string(loc.shape()) + ", need " + shape_string(s));
    }
    return TrainableNormal{loc, Tensor::full(s, rho)};
  };
}

}  // namespace initializers

namespace regularizers {

/// KL(q || N(0, prior_scale^2)) for a parameter with a Normal posterior.
inline Regularizer normal_kl_divergence(double prior_scale = 1.0) {
  return [prior_scale](const Value& w) {
    const auto* q = dynamic_cast<const Normal*>(w.distribution().get());
    if (q == nullptr) {
      fail(ErrorKind::kInvalidArgument, "KL regularizer needs a parameter with a Normal posterior");
    }
    return kl_divergence(*q, Normal(Tensor::scalar(0.0), Tensor::scalar(prior_scale)));
  };
}

inline Regularizer l2(double weight) {
  return [weight](const Value& w) { return weight * sum(pow2(w.tensor())); };
}

}  // namespace regularizers

/// A layer weight: either a point estimate or a mean-field normal posterior
/// with trainable loc and rho (scale = softplus(rho)).
class Weight {
 public:
  Weight() = default;
  Weight(Parameter loc, std::optional<Parameter> rho) : loc_(std::move(loc)), rho_(std::move(rho)) {}

  bool stochastic() const { return rho_.has_value(); }
  const Parameter& loc() const { return loc_; }
  const Parameter& rho() const {
    if (!rho_) fail(ErrorKind::kInvalidArgument, "weight '" + loc_.name() + "' is a point estimate");
    return *rho_;
  }
  const Shape& shape() const { return loc_.shape(); }

  std::shared_ptr<Normal> posterior() const {
    return std::make_shared<Normal>(loc_.read(), softplus(rho().read()));
  }

  /// Point weights read as-is; stochastic weights draw one reparameterized sample.
  Value realize(Seed seed) const {
    if (!rho_) return loc_.read();
    return sample(posterior(), seed);
  }

 private:
  Parameter loc_;
  std::optional<Parameter> rho_;
};

/// Shared helper for layers holding Weights: creates parameters from an
/// initializer and applies regularizers.
class WeightedLayer : public Layer {
 public:
  using Layer::Layer;

 protected:
  Weight make_weight(const std::string& short_name, const Shape& shape, const Initializer& init, Seed seed) {
    InitialValue v = init(shape, seed);
    if (auto* t = std::get_if<Tensor>(&v)) {
      if (t->shape() != shape) {
        fail(ErrorKind::kShape, "initializer for '" + short_name + "' returned " + shape_string(t->shape()) +
                                    ", need " + shape_string(shape));
      }
      return Weight(add_parameter(short_name, *t), std::nullopt);
    }
    auto& n = std::get<TrainableNormal>(v);
    if (n.loc.shape() != shape || n.rho.shape() != shape) {
      fail(ErrorKind::kShape, "initializer for '" + short_name + "' returned the wrong shape, need " +
                                  shape_string(shape));
    }
    Parameter loc = add_parameter(short_name + "_loc", n.loc);
    Parameter rho = add_parameter(short_name + "_rho", n.rho);
    return Weight(loc, rho);
  }

  void regularize(const Regularizer& reg, const Value& w) {
    if (!reg) return;
    Tensor loss = reg(w);
    add_loss(std::move(loss));
  }
};

/// Adapts a reversible layer to the Bijector interface used by
/// TransformedDistribution.
class LayerBijector : public Bijector {
 public:
  explicit LayerBijector(LayerPtr layer) : layer_(std::move(layer)) {}
  Tensor forward(const Tensor& x) const override { return (*layer_)(x).tensor(); }
  Tensor inverse(const Tensor& y) const override { return layer_->reverse(y); }
  Tensor forward_log_det_jacobian(const Tensor& x) const override { return layer_->log_det_jacobian(x); }
  Tensor inverse_log_det_jacobian(const Tensor& y) const override { return layer_->inverse_log_det_jacobian(y); }

 private:
  LayerPtr layer_;
};

}  // namespace bayes_layers
