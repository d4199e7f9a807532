#pragma once

// Layers that return a RandomVariable: likelihood heads. None add losses.

#include <optional>
#include <string>

#include "bayes_layers/dense.hpp"

namespace bayes_layers {

inline constexpr double kScaleFloor = 1e-5;

/// Optional trainable linear projection shared by the heads.
class OutputHead : public Layer {
 public:
  OutputHead(std::string name, std::optional<std::size_t> units, std::size_t params_per_unit)
      : Layer(std::move(name)), units_(units) {
    if (units_) {
      detail::require_units(*units_, Layer::name());
      projection_ = dense(*units_ * params_per_unit);
    }
  }

  std::vector<LayerPtr> children() const override {
    if (projection_) return {projection_};
    return {};
  }
  std::optional<std::size_t> units() const { return units_; }

 protected:
  Tensor project(const Value& x, Seed seed) {
    if (!projection_) return x.tensor();
    return (*projection_)(x.tensor(), seed).tensor();
  }

 private:
  std::optional<std::size_t> units_;
  std::shared_ptr<Dense> projection_;
};

/// Splits the last axis into loc and raw scale halves:
/// Normal(loc, softplus(raw) + 1e-5).
class NormalOutput : public OutputHead {
 public:
  explicit NormalOutput(std::optional<std::size_t> units = std::nullopt) : OutputHead("normal_output", units, 2) {}

  std::shared_ptr<Normal> distribution(const Tensor& params) const {
    if (params.rank() == 0 || params.shape().back() % 2 != 0) {
      fail(ErrorKind::kShape, "normal_output needs an even last axis (loc | scale), got " +
                                  shape_string(params.shape()));
    }
    const std::size_t axis = params.rank() - 1, half = params.shape().back() / 2;
    return std::make_shared<Normal>(slice(params, axis, 0, half),
                                    softplus(slice(params, axis, half, half)) + kScaleFloor);
  }

 protected:
  Value call(const Value& x, Seed seed) override {
    return sample(distribution(project(x, seed.derive(0))), seed.derive(1));
  }
};

/// Normal(x, softplus(rho) + 1e-5) with one trainable scalar rho: a
/// regression likelihood with learned homoscedastic noise.
class HomoscedasticNormalOutput : public Layer {
 public:
  explicit HomoscedasticNormalOutput(double initial_scale = 1.0) : Layer("homoscedastic_normal_output") {
    if (!(initial_scale > kScaleFloor)) fail(ErrorKind::kDomain, "initial scale must exceed the 1e-5 floor");
    rho_ = add_parameter("scale_rho", Tensor::scalar(inverse_softplus(initial_scale - kScaleFloor)));
  }

  Tensor scale() const { return softplus(rho_.read()) + kScaleFloor; }

 protected:
  Value call(const Value& x, Seed seed) override {
    return sample(std::make_shared<Normal>(x.tensor(), scale()), seed);
  }

 private:
  Parameter rho_;
};

class CategoricalOutput : public OutputHead {
 public:
  explicit CategoricalOutput(std::optional<std::size_t> units = std::nullopt)
      : OutputHead("categorical_output", units, 1) {}

 protected:
  Value call(const Value& x, Seed seed) override {
    return sample(std::make_shared<Categorical>(project(x, seed.derive(0))), seed.derive(1));
  }
};

/// Discretized logistic mixture over 0..255 per output element. Without
/// units the input's last axis must hold the 3K parameters; with units the
/// projection produces [b, units, 3K].
class MixtureLogisticOutput : public OutputHead {
 public:
  explicit MixtureLogisticOutput(std::optional<std::size_t> units = std::nullopt, std::size_t num_components = 5)
      : OutputHead("mixture_logistic_output", units, 3 * num_components), k_(num_components) {
    if (k_ == 0) fail(ErrorKind::kInvalidArgument, "mixture needs at least one component");
  }

  std::size_t num_components() const { return k_; }

 protected:
  Value call(const Value& x, Seed seed) override {
    Tensor params = project(x, seed.derive(0));
    if (units()) params = reshape(params, {params.dim(0), *units(), 3 * k_});
    return sample(std::make_shared<DiscretizedLogisticMixture>(params, k_), seed.derive(1));
  }

 private:
  std::size_t k_;
};

inline std::shared_ptr<NormalOutput> normal_output(std::optional<std::size_t> units = std::nullopt) {
  return std::make_shared<NormalOutput>(units);
}
inline std::shared_ptr<HomoscedasticNormalOutput> homoscedastic_normal_output(double initial_scale = 1.0) {
  return std::make_shared<HomoscedasticNormalOutput>(initial_scale);
}
inline std::shared_ptr<CategoricalOutput> categorical_output(std::optional<std::size_t> units = std::nullopt) {
  return std::make_shared<CategoricalOutput>(units);
}
inline std::shared_ptr<MixtureLogisticOutput> mixture_logistic_output(std::optional<std::size_t> units = std::nullopt,
                                                                      std::size_t num_components = 5) {
  return std::make_shared<MixtureLogisticOutput>(units, num_components);
}

}  // namespace bayes_layers
