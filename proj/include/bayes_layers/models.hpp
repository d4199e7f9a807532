#pragma once

// Small demo models and synthetic datasets used by the CLI and the tests.

#include <cmath>
#include <numbers>

#include "bayes_layers/data.hpp"
#include "bayes_layers/dense.hpp"
#include "bayes_layers/gp.hpp"
#include "bayes_layers/lstm.hpp"
#include "bayes_layers/output_layers.hpp"
#include "bayes_layers/reversible.hpp"

namespace bayes_layers {

namespace models {

struct BnnOptions {
  std::size_t hidden_units = 32;
  double prior_scale = 1.0;
  double initial_posterior_scale = 0.1;
  double initial_noise_scale = 0.5;
  Estimator estimator = Estimator::kReparameterization;
};

/// 1 -> hidden (relu) -> 1 mean-field network with a learned-noise Normal
/// likelihood.
inline std::shared_ptr<Sequential> bnn_regression(const BnnOptions& o = {}) {
  DenseOptions opts = variational_options(o.prior_scale);
  opts.kernel_initializer = initializers::trainable_normal(1.0, o.initial_posterior_scale);
  opts.bias_initializer = initializers::trainable_normal(1.0, o.initial_posterior_scale);
  opts.estimator = o.estimator;
  return sequential({variational_dense(o.hidden_units, activations::relu(), opts), variational_dense(1, {}, opts),
                     homoscedastic_normal_output(o.initial_noise_scale)});
}

struct DeepGpOptions {
  std::size_t hidden_units = 2;
  std::size_t num_inducing = 8;
  double inducing_jitter = 1e-4;
  /// Initial q(u) scale of the hidden layers relative to their prior.
  double hidden_initial_scale = 0.01;
};

/// Three stacked sparse GPs; the last one's predictive distribution is the
/// likelihood. Hidden layers have an identity mean (inputs broadcast over
/// units) so the stack starts near the identity map instead of at the
/// zero-signal point where every hidden output is prior noise.
inline std::shared_ptr<Sequential> deep_gp(const DeepGpOptions& o = {}) {
  SparseGaussianProcessOptions hidden;
  hidden.inducing_jitter = o.inducing_jitter;
  hidden.initial_scale = o.hidden_initial_scale;
  hidden.mean_fn = [](const Tensor& x) { return x; };
  SparseGaussianProcessOptions last;
  last.inducing_jitter = o.inducing_jitter;
  return sequential({sparse_gaussian_process(o.hidden_units, o.num_inducing, hidden),
                     sparse_gaussian_process(o.hidden_units, o.num_inducing, hidden),
                     sparse_gaussian_process(1, o.num_inducing, last)});
}

/// Ignores its input's values and returns a standard normal sample of the
/// same shape, so a flow stacked on top defines a density over the inputs.
class StandardNormalSource : public Layer {
 public:
  StandardNormalSource() : Layer("standard_normal") {}

 protected:
  Value call(const Value& x, Seed seed) override {
    const Shape& s = x.shape();
    return sample(std::make_shared<Normal>(Tensor::zeros(s), Tensor::ones(s)), seed);
  }
};

struct FlowOptions {
  std::size_t dims = 2;
  std::size_t num_couplings = 4;
  std::vector<std::size_t> hidden_sizes = {32, 32};
};

inline std::shared_ptr<Sequential> flow_density(const FlowOptions& o = {}) {
  MadeOptions made;
  made.hidden_sizes = o.hidden_sizes;
  return sequential({std::make_shared<StandardNormalSource>(), realnvp_flow(o.dims, o.num_couplings, made)});
}

struct LstmOptions {
  std::size_t vocab = 4;
  std::size_t hidden_units = 16;
  double prior_scale = 1.0;
};

/// One-hot sequences [b, T, vocab] -> categorical over the next token at
/// every position, flattened to [b * T].
inline std::shared_ptr<Sequential> bayesian_lstm(const LstmOptions& o = {}) {
  auto merge_time = std::make_shared<Lambda>(
      [](const Value& h) -> Value {
        const Tensor& t = h.tensor();
        if (t.rank() != 3) fail(ErrorKind::kShape, "expected [b, T, units], got " + shape_string(t.shape()));
        return reshape(t, {t.dim(0) * t.dim(1), t.dim(2)});
      },
      "merge_time");
  return sequential({variational_lstm_cell(o.hidden_units, variational_lstm_options(o.prior_scale)), merge_time,
                     categorical_output(o.vocab)});
}

}  // namespace models

namespace toy {

/// y = sin(3x) + noise with x uniform on [lo, hi].
inline Dataset regression_1d(std::size_t n, std::uint64_t seed, double noise = 0.1, double lo = -1.0, double hi = 1.0) {
  const auto x = uniform(Seed(seed).derive(1), n, lo, hi);
  const auto e = standard_normal(Seed(seed).derive(2), n);
  std::vector<double> y(n);
  for (std::size_t i = 0; i < n; ++i) y[i] = std::sin(3.0 * x[i]) + noise * e[i];
  return {Tensor({n, 1}, x), Tensor({n, 1}, std::move(y)), {}, {}};
}

/// Two interleaved half circles, centred; features and targets are both the points.
inline Dataset two_moons(std::size_t n, std::uint64_t seed, double noise = 0.05) {
  const auto t = uniform(Seed(seed).derive(1), n, 0.0, std::numbers::pi);
  const auto side = uniform(Seed(seed).derive(2), n);
  const auto e = standard_normal(Seed(seed).derive(3), 2 * n);
  std::vector<double> pts(2 * n);
  for (std::size_t i = 0; i < n; ++i) {
    const bool upper = side[i] < 0.5;
    pts[2 * i] = (upper ? std::cos(t[i]) : 1.0 - std::cos(t[i])) - 0.5 + noise * e[2 * i];
    pts[2 * i + 1] = (upper ? std::sin(t[i]) : 0.5 - std::sin(t[i])) - 0.25 + noise * e[2 * i + 1];
  }
  const Tensor p({n, 2}, std::move(pts));
  return {p, p, {}, {}};
}

/// Sequences where each token is the previous one plus 1 (mod vocab) with
/// probability `regularity`, otherwise uniform. Features are the one-hot
/// inputs [n, T, vocab] and targets the next tokens [n, T].
inline Dataset token_sequences(std::size_t n, std::size_t length, std::size_t vocab, std::uint64_t seed,
                               double regularity = 0.9) {
  const auto u = uniform(Seed(seed).derive(1), n * (length + 1));
  const auto r = uniform(Seed(seed).derive(2), n * (length + 1));
  std::vector<double> onehot(n * length * vocab, 0.0), next(n * length);
  for (std::size_t i = 0; i < n; ++i) {
    std::size_t tok = static_cast<std::size_t>(r[i * (length + 1)] * static_cast<double>(vocab)) % vocab;
    for (std::size_t t = 0; t < length; ++t) {
      onehot[(i * length + t) * vocab + tok] = 1.0;
      const std::size_t k = i * (length + 1) + t + 1;
      tok = u[k] < regularity ? (tok + 1) % vocab
                              : static_cast<std::size_t>(r[k] * static_cast<double>(vocab)) % vocab;
      next[i * length + t] = static_cast<double>(tok);
    }
  }
  return {Tensor({n, length, vocab}, std::move(onehot)), Tensor({n, length}, std::move(next)), {}, {}};
}

}  // namespace toy

}  // namespace bayes_layers
