#pragma once

// Gaussian-process layers: exact GP, sparse variational GP with inducing
// points, and random Fourier features.

#include <numbers>
#include <optional>
#include <string>

#include "bayes_layers/dense.hpp"
#include "bayes_layers/linalg.hpp"

namespace bayes_layers {

/// k_ij = amplitude^2 * exp(-|x_i - x2_j|^2 / (2 lengthscale^2)); amplitude
/// and lengthscale are scalar tensors.
inline Tensor se_kernel(const Tensor& x, const Tensor& x2, const Tensor& amplitude, const Tensor& lengthscale) {
  return mul(pow2(amplitude), exp(div(squared_distance(x, x2), -2.0 * pow2(lengthscale))));
}

struct KernelOptions {
  double amplitude = 1.0;
  double lengthscale = 1.0;
  bool trainable = true;
};

/// Squared-exponential kernel with log-parameterized amplitude and lengthscale.
class SEKernel {
 public:
  SEKernel() = default;
  SEKernel(Parameter log_amplitude, Parameter log_lengthscale)
      : log_amplitude_(std::move(log_amplitude)), log_lengthscale_(std::move(log_lengthscale)) {}

  Tensor amplitude() const { return exp(log_amplitude_.read()); }
  Tensor lengthscale() const { return exp(log_lengthscale_.read()); }
  Tensor operator()(const Tensor& x, const Tensor& x2) const { return se_kernel(x, x2, amplitude(), lengthscale()); }
  const Parameter& log_amplitude() const { return log_amplitude_; }
  const Parameter& log_lengthscale() const { return log_lengthscale_; }

 private:
  Parameter log_amplitude_, log_lengthscale_;
};

namespace detail {

inline void require_features(const Tensor& x, std::string_view layer) {
  if (x.rank() != 2) fail(ErrorKind::kShape, std::string(layer) + " expects [n, d] inputs, got " + shape_string(x.shape()));
}

inline Tensor column(const Tensor& m, std::size_t j) { return reshape(slice(m, 1, j, 1), {m.dim(0)}); }

}  // namespace detail

class KernelLayer : public WeightedLayer {
 public:
  KernelLayer(std::string name, const KernelOptions& k) : WeightedLayer(std::move(name)) {
    if (!(k.amplitude > 0) || !(k.lengthscale > 0)) {
      fail(ErrorKind::kDomain, "kernel amplitude and lengthscale must be positive");
    }
    kernel_ = SEKernel(add_parameter("log_amplitude", Tensor::scalar(std::log(k.amplitude)), k.trainable),
                       add_parameter("log_lengthscale", Tensor::scalar(std::log(k.lengthscale)), k.trainable));
  }
  const SEKernel& kernel() const { return kernel_; }

 protected:
  SEKernel kernel_;
};

struct GaussianProcessOptions {
  KernelOptions kernel;
  /// [n, d] -> [n, units]; zero when empty.
  std::function<Tensor(const Tensor&)> mean_fn;
  /// Replaces the SE kernel when set.
  std::function<Tensor(const Tensor&, const Tensor&)> covariance_fn;
  std::optional<Tensor> conditional_inputs;   // [n, d]
  std::optional<Tensor> conditional_outputs;  // [n, units]
  double observation_noise = 1e-3;
  bool trainable_noise = false;
  JitterPolicy jitter;
};

/// Exact GP over `units` independent outputs sharing one kernel. Returns the
/// prior at x, or the posterior predictive given the conditioning data.
/// Adds no losses.
class GaussianProcess : public KernelLayer {
 public:
  GaussianProcess(std::size_t units, GaussianProcessOptions options)
      : KernelLayer("gaussian_process", options.kernel), units_(units), options_(std::move(options)) {
    detail::require_units(units_, "gaussian_process");
    if (options_.conditional_inputs.has_value() != options_.conditional_outputs.has_value()) {
      fail(ErrorKind::kInvalidArgument, "conditioning needs both inputs and outputs");
    }
    if (options_.conditional_inputs) {
      const Tensor& xs = *options_.conditional_inputs;
      const Tensor& ys = *options_.conditional_outputs;
      detail::require_features(xs, "gaussian_process conditioning");
      if (ys.shape() != Shape{xs.dim(0), units_}) {
        fail(ErrorKind::kShape, "conditional outputs must be " + shape_string({xs.dim(0), units_}) + ", got " +
                                    shape_string(ys.shape()));
      }
    }
    if (!(options_.observation_noise >= 0)) fail(ErrorKind::kDomain, "observation noise must be >= 0");
    log_noise_ = add_parameter("log_noise", Tensor::scalar(std::log(options_.observation_noise)),
                               options_.trainable_noise);
  }

  /// Predictive distribution at x without sampling.
  std::shared_ptr<MultivariateNormalFull> predictive(const Tensor& x) const {
    detail::require_features(x, "gaussian_process");
    const std::size_t n = x.dim(0);
    Tensor mean = options_.mean_fn ? options_.mean_fn(x) : Tensor::zeros({n, units_});
    if (mean.shape() != Shape{n, units_}) {
      fail(ErrorKind::kShape, "mean_fn returned " + shape_string(mean.shape()) + ", need " +
                                  shape_string({n, units_}));
    }
    Tensor cov = k(x, x);
    if (options_.conditional_inputs) {
      const Tensor& xs = *options_.conditional_inputs;
      const Tensor& ys = *options_.conditional_outputs;
      const Tensor noise_var = exp(2.0 * log_noise_.read());
      const Tensor knn = add(k(xs, xs), mul(Tensor::identity(xs.dim(0)), noise_var));
      const Tensor l = cholesky_with_jitter(knn, options_.jitter);
      const Tensor a = solve_lower(l, k(xs, x));  // [n_train, n]
      const Tensor resid = options_.mean_fn ? sub(ys, options_.mean_fn(xs)) : ys;
      mean = add(mean, matmul(transpose(a), solve_lower(l, resid)));
      cov = sub(cov, matmul(transpose(a), a));
    }
    return MultivariateNormalFull::from_covariance(mean, cov, options_.jitter);
  }

 protected:
  Value call(const Value& in, Seed seed) override { return sample(predictive(in.tensor()), seed); }

 private:
  Tensor k(const Tensor& a, const Tensor& b) const {
    return options_.covariance_fn ? options_.covariance_fn(a, b) : kernel_(a, b);
  }

  std::size_t units_;
  GaussianProcessOptions options_;
  Parameter log_noise_;
};

inline std::shared_ptr<GaussianProcess> gaussian_process(std::size_t units, GaussianProcessOptions options = {}) {
  return std::make_shared<GaussianProcess>(units, std::move(options));
}

struct SparseGaussianProcessOptions {
  KernelOptions kernel;
  /// Prior mean added to the predictive mean; zero when empty. Must return
  /// something that broadcasts to [n, units].
  std::function<Tensor(const Tensor&)> mean_fn;
  /// Initial inducing inputs [m, d]; drawn uniformly over the first batch's
  /// bounding box when absent.
  std::optional<Tensor> inducing_inputs;
  bool trainable_inducing_inputs = true;
  bool trainable_variational = true;
  JitterPolicy jitter;
  double min_variance = 1e-12;
  /// Constant added to the diagonal of K_zz in every use (prior, conditional
  /// and KL). Bounds the smallest eigenvalue away from zero when inducing
  /// inputs crowd together.
  double inducing_jitter = 0.0;
  /// Initial S = initial_scale^2 * K_zz; 1 starts q(u) at the prior.
  double initial_scale = 1.0;
};

/// Sparse variational GP with unwhitened q(u) = N(m_u, L_S L_S^T) per unit.
/// Returns a reparameterized sample from the per-point marginals and adds
/// KL(q(u) || p(u)) summed over units as its loss.
class SparseGaussianProcess : public KernelLayer {
 public:
  SparseGaussianProcess(std::size_t units, std::size_t num_inducing, SparseGaussianProcessOptions options)
      : KernelLayer("sparse_gaussian_process", options.kernel),
        units_(units),
        num_inducing_(num_inducing),
        options_(std::move(options)) {
    detail::require_units(units_, "sparse_gaussian_process");
    if (num_inducing_ == 0) fail(ErrorKind::kInvalidArgument, "sparse_gaussian_process needs num_inducing >= 1");
    if (options_.inducing_inputs && options_.inducing_inputs->dim(0) != num_inducing_) {
      fail(ErrorKind::kShape, "inducing inputs have " + std::to_string(options_.inducing_inputs->dim(0)) +
                                  " rows, expected " + std::to_string(num_inducing_));
    }
  }

  std::size_t units() const { return units_; }
  std::size_t num_inducing() const { return num_inducing_; }
  const Parameter& inducing_inputs() const { return z_; }
  const Parameter& variational_mean() const { return m_u_; }
  const Parameter& scale_tril(std::size_t unit) const { return l_s_.at(unit); }

  /// Initializes the variational state from a batch if not done yet.
  void initialize(const Tensor& x, Seed seed) {
    if (initialized_) return;
    detail::require_features(x, "sparse_gaussian_process");
    const std::size_t d = x.dim(1);
    Tensor z;
    if (options_.inducing_inputs) {
      z = *options_.inducing_inputs;
      if (z.shape() != Shape{num_inducing_, d}) {
        fail(ErrorKind::kShape, "inducing inputs " + shape_string(z.shape()) + " do not match input " +
                                    shape_string(x.shape()));
      }
    } else {
      std::vector<double> lo(d, INFINITY), hi(d, -INFINITY);
      for (std::size_t i = 0; i < x.dim(0); ++i)
        for (std::size_t j = 0; j < d; ++j) {
          lo[j] = std::min(lo[j], x[i * d + j]);
          hi[j] = std::max(hi[j], x[i * d + j]);
        }
      auto u = uniform(seed, num_inducing_ * d, 0.0, 1.0);
      for (std::size_t i = 0; i < num_inducing_; ++i)
        for (std::size_t j = 0; j < d; ++j) u[i * d + j] = lo[j] + (hi[j] - lo[j]) * u[i * d + j];
      z = Tensor({num_inducing_, d}, std::move(u));
    }
    z_ = add_parameter("inducing_inputs", z, options_.trainable_inducing_inputs);
    m_u_ = add_parameter("variational_mean", Tensor::zeros({num_inducing_, units_}), options_.trainable_variational);
    const Tensor lz = cholesky_with_jitter(kzz(z).detach(), options_.jitter).detach();
    for (std::size_t j = 0; j < units_; ++j) {
      l_s_.push_back(add_parameter("scale_tril_" + std::to_string(j), lz * options_.initial_scale,
                                   options_.trainable_variational));
    }
    initialized_ = true;
  }

  /// Marginal predictive N(mean, var) at each row of x, per unit.
  std::shared_ptr<Normal> predictive(const Tensor& x) const {
    detail::require_features(x, "sparse_gaussian_process");
    if (!initialized_) fail(ErrorKind::kInvalidArgument, "sparse_gaussian_process used before initialization");
    const Tensor z = z_.read();
    if (x.dim(1) != z.dim(1)) {
      fail(ErrorKind::kShape, "input has " + std::to_string(x.dim(1)) + " features, inducing inputs have " +
                                  std::to_string(z.dim(1)));
    }
    const Tensor lz = cholesky_with_jitter(kzz(z), options_.jitter);
    const Tensor a = solve_lower(lz, kernel_(z, x));  // [m, n]
    Tensor mean = matmul(transpose(a), solve_lower(lz, m_u_.read()));
    if (options_.mean_fn) mean = add(mean, options_.mean_fn(x));
    const Tensor w = solve_lower_transposed(lz, a);  // Kzz^-1 Kzx
    const Tensor prior_var = sub(pow2(kernel_.amplitude()), sum(pow2(a), 0));
    std::vector<Tensor> cols;
    for (std::size_t j = 0; j < units_; ++j) {
      const Tensor b = matmul(transpose(tril(l_s_[j].read())), w);
      cols.push_back(reshape(add(prior_var, sum(pow2(b), 0)), {x.dim(0), 1}));
    }
    const Tensor var = clamp_min(concat(cols, 1), options_.min_variance);
    return std::make_shared<Normal>(mean, sqrt(var));
  }

  /// KL(q(u) || p(u)) summed over units.
  Tensor kl() const {
    const Tensor z = z_.read();
    const Tensor lz = cholesky_with_jitter(kzz(z), options_.jitter);
    const MultivariateNormalFull prior(Tensor::zeros({num_inducing_}), lz);
    const Tensor m = m_u_.read();
    Tensor total = Tensor::scalar(0.0);
    for (std::size_t j = 0; j < units_; ++j) {
      const MultivariateNormalFull q(detail::column(m, j), tril(l_s_[j].read()));
      total = add(total, kl_divergence(q, prior));
    }
    return total;
  }

 protected:
  Value call(const Value& in, Seed seed) override {
    initialize(in.tensor(), seed.derive(Layer::kBuildTag));
    const RandomVariable out = sample(predictive(in.tensor()), seed);
    add_loss(kl());
    return out;
  }

 private:
  Tensor kzz(const Tensor& z) const {
    const Tensor k = kernel_(z, z);
    if (options_.inducing_jitter == 0.0) return k;
    return add(k, Tensor::identity(num_inducing_) * options_.inducing_jitter);
  }

  std::size_t units_, num_inducing_;
  SparseGaussianProcessOptions options_;
  bool initialized_ = false;
  Parameter z_, m_u_;
  std::vector<Parameter> l_s_;
};

inline std::shared_ptr<SparseGaussianProcess> sparse_gaussian_process(std::size_t units, std::size_t num_inducing,
                                                                      SparseGaussianProcessOptions options = {}) {
  return std::make_shared<SparseGaussianProcess>(units, num_inducing, std::move(options));
}

struct RandomFourierFeaturesOptions {
  KernelOptions kernel;
  Initializer kernel_initializer = initializers::trainable_normal();
  Regularizer kernel_regularizer = regularizers::normal_kl_divergence();
};

/// phi(x) = sqrt(2 a^2 / D) cos(x Omega / l + beta) with Omega ~ N(0, I) and
/// beta ~ U[0, 2 pi) fixed at build; output phi(x) W with W variational.
class RandomFourierFeatures : public KernelLayer {
 public:
  RandomFourierFeatures(std::size_t units, std::size_t num_features, RandomFourierFeaturesOptions options)
      : KernelLayer("random_fourier_features", options.kernel),
        units_(units),
        num_features_(num_features),
        options_(std::move(options)) {
    detail::require_units(units_, "random_fourier_features");
    if (num_features_ == 0) fail(ErrorKind::kInvalidArgument, "random_fourier_features needs num_features >= 1");
  }

  const Weight& output_kernel() const { return w_; }

  Tensor features(const Tensor& x) const {
    detail::require_features(x, "random_fourier_features");
    const Tensor omega = omega_.read();
    if (x.dim(1) != omega.dim(0)) {
      fail(ErrorKind::kShape, "random_fourier_features built for " + std::to_string(omega.dim(0)) +
                                  " features, got " + shape_string(x.shape()));
    }
    const Tensor proj = add(div(matmul(x, omega), kernel_.lengthscale()), phase_.read());
    const Tensor scale = mul(kernel_.amplitude(), Tensor::scalar(std::sqrt(2.0 / static_cast<double>(num_features_))));
    return mul(scale, cos(proj));
  }

 protected:
  void build(const Shape& input, Seed seed) override {
    if (input.size() != 2) fail(ErrorKind::kShape, "random_fourier_features expects [n, d], got " + shape_string(input));
    omega_ = add_parameter("omega", Tensor({input[1], num_features_}, standard_normal(seed.derive(0), input[1] * num_features_)),
                           false);
    phase_ = add_parameter("phase", Tensor({num_features_}, uniform(seed.derive(1), num_features_, 0.0, 2 * std::numbers::pi)),
                           false);
    w_ = make_weight("output_kernel", {num_features_, units_}, options_.kernel_initializer, seed.derive(2));
  }

  Value call(const Value& in, Seed seed) override {
    const Value w = w_.realize(seed.derive(0));
    regularize(options_.kernel_regularizer, w);
    return matmul(features(in.tensor()), w.tensor());
  }

 private:
  std::size_t units_, num_features_;
  RandomFourierFeaturesOptions options_;
  Parameter omega_, phase_;
  Weight w_;
};

inline std::shared_ptr<RandomFourierFeatures> random_fourier_features(std::size_t units, std::size_t num_features,
                                                                      RandomFourierFeaturesOptions options = {}) {
  return std::make_shared<RandomFourierFeatures>(units, num_features, std::move(options));
}

}  // namespace bayes_layers
