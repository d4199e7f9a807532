#pragma once

// Distributions and the RandomVariable wrapper: a realized sample bound to the
// distribution it came from. Numeric ops on a RandomVariable see its sample.

#include <cmath>
#include <memory>
#include <numbers>
#include <string>
#include <string_view>
#include <vector>

#include "bayes_layers/linalg.hpp"
#include "bayes_layers/ops.hpp"
#include "bayes_layers/random.hpp"

namespace bayes_layers {

inline constexpr double kHalfLog2Pi = 0.91893853320467274178;

class Distribution {
 public:
  virtual ~Distribution() = default;

  virtual std::string_view kind() const = 0;
  /// Shape of one realized sample.
  virtual Shape sample_shape() const = 0;
  /// Draws a sample; reparameterized (differentiable in the parameters) where
  /// the family allows it, detached otherwise.
  virtual Tensor draw(Seed seed) const = 0;
  virtual Tensor log_prob(const Tensor& x) const = 0;
  /// Number of trailing axes that form one event; log_prob reduces over them.
  virtual std::size_t event_rank() const { return 0; }

  virtual bool has_cdf() const { return false; }
  virtual Tensor cdf(const Tensor&) const {
    fail(ErrorKind::kUnsupported, std::string(kind()) + " has no CDF");
  }
  virtual Tensor mean() const { fail(ErrorKind::kUnsupported, std::string(kind()) + " has no closed-form mean"); }
  virtual Tensor stddev() const {
    fail(ErrorKind::kUnsupported, std::string(kind()) + " has no closed-form standard deviation");
  }
};

using DistributionPtr = std::shared_ptr<const Distribution>;

class RandomVariable {
 public:
  RandomVariable(DistributionPtr distribution, Tensor value)
      : distribution_(std::move(distribution)), value_(std::move(value)) {
    if (!distribution_) fail(ErrorKind::kInvalidArgument, "RandomVariable needs a distribution");
  }

  const Distribution& distribution() const { return *distribution_; }
  const DistributionPtr& distribution_ptr() const { return distribution_; }
  const Tensor& value() const { return value_; }
  const Shape& shape() const { return value_.shape(); }

  operator const Tensor&() const { return value_; }  // NOLINT: tensor-like by design of the API

  Tensor log_prob(const Tensor& x) const { return distribution_->log_prob(x); }
  Tensor log_prob() const { return distribution_->log_prob(value_); }

 private:
  DistributionPtr distribution_;
  Tensor value_;
};

inline RandomVariable sample(const DistributionPtr& d, Seed seed) { return RandomVariable(d, d->draw(seed)); }

namespace detail {

inline void require_nonnegative_scale(const Tensor& scale, std::string_view family) {
  for (double s : scale.data()) {
    if (!(s >= 0.0)) {
      fail(ErrorKind::kDomain, std::string(family) + " scale must be >= 0, got " + std::to_string(s));
    }
  }
}

inline Tensor broadcast_like(const Tensor& t, const Shape& shape) {
  if (t.shape() == shape) return t;
  return add(t, Tensor::zeros(shape));
}

inline std::vector<std::size_t> integer_values(const Tensor& x, double low, double high, std::string_view family) {
  std::vector<std::size_t> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double v = x[i];
    if (v != std::round(v) || v < low || v > high) {
      fail(ErrorKind::kDomain, std::string(family) + ": value " + std::to_string(v) + " outside support [" +
                                   std::to_string(low) + ", " + std::to_string(high) + "]");
    }
    out[i] = static_cast<std::size_t>(v - low);
  }
  return out;
}

}  // namespace detail

/// Diagonal normal with elementwise loc / scale (broadcast together).
class Normal : public Distribution {
 public:
  Normal(Tensor loc, Tensor scale) : loc_(std::move(loc)), scale_(std::move(scale)) {
    detail::require_nonnegative_scale(scale_, "Normal");
    shape_ = detail::broadcast_shape(loc_.shape(), scale_.shape(), "Normal");
  }

  std::string_view kind() const override { return "Normal"; }
  Shape sample_shape() const override { return shape_; }
  const Tensor& loc() const { return loc_; }
  const Tensor& scale() const { return scale_; }

  Tensor draw(Seed seed) const override {
    const Tensor eps(shape_, standard_normal(seed, num_elements(shape_)));
    return add(loc_, mul(scale_, eps));
  }

  Tensor log_prob(const Tensor& x) const override {
    const Tensor z = div(sub(x, loc_), scale_);
    return sub(sub(-0.5 * pow2(z), log(scale_)), Tensor::scalar(kHalfLog2Pi));
  }

  bool has_cdf() const override { return true; }
  Tensor cdf(const Tensor& x) const override { return normal_cdf(div(sub(x, loc_), scale_)); }
  Tensor mean() const override { return detail::broadcast_like(loc_, shape_); }
  Tensor stddev() const override { return detail::broadcast_like(scale_, shape_); }

 private:
  Tensor loc_, scale_;
  Shape shape_;
};

class Logistic : public Distribution {
 public:
  Logistic(Tensor loc, Tensor scale) : loc_(std::move(loc)), scale_(std::move(scale)) {
    detail::require_nonnegative_scale(scale_, "Logistic");
    shape_ = detail::broadcast_shape(loc_.shape(), scale_.shape(), "Logistic");
  }

  std::string_view kind() const override { return "Logistic"; }
  Shape sample_shape() const override { return shape_; }

  Tensor draw(Seed seed) const override {
    auto u = uniform(seed, num_elements(shape_), 1e-300, 1.0);
    for (auto& v : u) v = std::log(v) - std::log1p(-v);
    return add(loc_, mul(scale_, Tensor(shape_, std::move(u))));
  }

  Tensor log_prob(const Tensor& x) const override {
    const Tensor z = div(sub(x, loc_), scale_);
    return sub(sub(neg(z), log(scale_)), 2.0 * softplus(neg(z)));
  }

  bool has_cdf() const override { return true; }
  Tensor cdf(const Tensor& x) const override { return sigmoid(div(sub(x, loc_), scale_)); }
  Tensor mean() const override { return detail::broadcast_like(loc_, shape_); }
  Tensor stddev() const override {
    return detail::broadcast_like(scale_ * (std::numbers::pi / std::sqrt(3.0)), shape_);
  }

 private:
  Tensor loc_, scale_;
  Shape shape_;
};

/// Categorical over the last axis of `logits`; samples are class indices
/// stored as doubles and carry no gradient.
class Categorical : public Distribution {
 public:
  explicit Categorical(Tensor logits) : logits_(std::move(logits)) {
    if (logits_.rank() == 0) fail(ErrorKind::kShape, "Categorical logits need rank >= 1");
    for (double v : logits_.data()) {
      if (!std::isfinite(v)) fail(ErrorKind::kDomain, "Categorical logits must be finite");
    }
  }

  std::string_view kind() const override { return "Categorical"; }
  Shape sample_shape() const override { return Shape(logits_.shape().begin(), logits_.shape().end() - 1); }
  std::size_t num_classes() const { return logits_.shape().back(); }
  const Tensor& logits() const { return logits_; }

  Tensor draw(Seed seed) const override {
    // Gumbel-max
    const std::size_t k = num_classes();
    const std::size_t rows = logits_.size() / k;
    const auto u = uniform(seed, logits_.size(), 1e-300, 1.0);
    std::vector<double> out(rows);
    for (std::size_t r = 0; r < rows; ++r) {
      double best = -INFINITY;
      for (std::size_t j = 0; j < k; ++j) {
        const double g = logits_[r * k + j] - std::log(-std::log(u[r * k + j]));
        if (g > best) {
          best = g;
          out[r] = static_cast<double>(j);
        }
      }
    }
    return Tensor(sample_shape(), std::move(out));
  }

  Tensor log_prob(const Tensor& x) const override {
    if (x.shape() != sample_shape()) {
      fail(ErrorKind::kShape, "Categorical log_prob expects " + shape_string(sample_shape()) + ", got " +
                                  shape_string(x.shape()));
    }
    const auto idx = detail::integer_values(x, 0.0, static_cast<double>(num_classes() - 1), "Categorical");
    return take_last(log_softmax(logits_), idx);
  }

 private:
  Tensor logits_;
};

/// Mixture of K logistics discretized to integers 0..L-1 (pixel intensities).
/// params[..., 3K] packs mixture logits, means and log-scales; intensities are
/// rescaled to [-1, 1] and the extreme bins absorb the tails.
class DiscretizedLogisticMixture : public Distribution {
 public:
  DiscretizedLogisticMixture(Tensor params, std::size_t num_components, std::size_t num_bins = 256)
      : params_(std::move(params)), k_(num_components), bins_(num_bins) {
    if (k_ == 0) fail(ErrorKind::kInvalidArgument, "need at least one mixture component");
    if (bins_ < 2) fail(ErrorKind::kInvalidArgument, "need at least two bins");
    if (params_.rank() == 0 || params_.shape().back() != 3 * k_) {
      fail(ErrorKind::kShape, "mixture parameters must end in 3K = " + std::to_string(3 * k_) + ", got " +
                                  shape_string(params_.shape()));
    }
  }

  std::string_view kind() const override { return "DiscretizedLogisticMixture"; }
  Shape sample_shape() const override { return Shape(params_.shape().begin(), params_.shape().end() - 1); }
  std::size_t num_components() const { return k_; }
  std::size_t num_bins() const { return bins_; }

  Tensor mixture_logits() const { return slice(params_, params_.rank() - 1, 0, k_); }
  Tensor means() const { return slice(params_, params_.rank() - 1, k_, k_); }
  Tensor log_scales() const { return slice(params_, params_.rank() - 1, 2 * k_, k_); }

  Tensor log_prob(const Tensor& x) const override {
    if (x.shape() != sample_shape()) {
      fail(ErrorKind::kShape, "mixture log_prob expects " + shape_string(sample_shape()) + ", got " +
                                  shape_string(x.shape()));
    }
    const double top = static_cast<double>(bins_ - 1);
    detail::integer_values(x, 0.0, top, "DiscretizedLogisticMixture");
    const double half_bin = 1.0 / top;
    Shape column = x.shape();
    column.push_back(1);
    std::vector<double> rescaled(x.size()), upper_open(x.size()), lower_open(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) {
      rescaled[i] = 2.0 * x[i] / top - 1.0;
      upper_open[i] = x[i] == top ? INFINITY : 0.0;
      lower_open[i] = x[i] == 0.0 ? -INFINITY : 0.0;
    }
    const Tensor centered = sub(Tensor(column, rescaled), means());
    const Tensor inv_scale = exp(neg(log_scales()));
    const Tensor hi = add(mul(inv_scale, centered + half_bin), Tensor(column, upper_open));
    const Tensor lo = add(mul(inv_scale, centered - half_bin), Tensor(column, lower_open));
    return logsumexp(add(log_softmax(mixture_logits()), log_sigmoid_diff(hi, lo)));
  }

  Tensor draw(Seed seed) const override {
    const Tensor component = Categorical(mixture_logits().detach()).draw(seed.derive(0));
    const auto u = uniform(seed.derive(1), component.size(), 1e-300, 1.0);
    const Tensor mu = means(), log_s = log_scales();
    const double top = static_cast<double>(bins_ - 1);
    std::vector<double> out(component.size());
    for (std::size_t i = 0; i < out.size(); ++i) {
      const std::size_t c = i * k_ + static_cast<std::size_t>(component[i]);
      const double v = mu[c] + std::exp(log_s[c]) * (std::log(u[i]) - std::log1p(-u[i]));
      out[i] = std::clamp(std::round((v + 1.0) * top / 2.0), 0.0, top);
    }
    return Tensor(sample_shape(), std::move(out));
  }

 private:
  Tensor params_;
  std::size_t k_, bins_;
};

/// Gaussian with full covariance. `loc` is [n] (one event) or [n, c] (c
/// independent events sharing the covariance, one per column); log_prob
/// returns a scalar or [c] accordingly.
class MultivariateNormalFull : public Distribution {
 public:
  static std::shared_ptr<MultivariateNormalFull> from_covariance(Tensor loc, const Tensor& covariance,
                                                                 const JitterPolicy& jitter = {}) {
    return std::make_shared<MultivariateNormalFull>(std::move(loc), cholesky_with_jitter(covariance, jitter));
  }

  /// Builds from a lower-triangular scale factor L (covariance L L^T).
  MultivariateNormalFull(Tensor loc, Tensor scale_tril) : loc_(std::move(loc)), scale_tril_(std::move(scale_tril)) {
    if (loc_.rank() != 1 && loc_.rank() != 2) fail(ErrorKind::kShape, "MVN loc must be [n] or [n,c]");
    const std::size_t n = loc_.dim(0);
    if (scale_tril_.shape() != Shape{n, n}) {
      fail(ErrorKind::kShape, "MVN scale factor " + shape_string(scale_tril_.shape()) + " does not match loc " +
                                  shape_string(loc_.shape()));
    }
  }

  std::string_view kind() const override { return "MultivariateNormalFull"; }
  Shape sample_shape() const override { return loc_.shape(); }
  std::size_t event_rank() const override { return 1; }
  std::size_t dimension() const { return loc_.dim(0); }
  std::size_t columns() const { return loc_.rank() == 2 ? loc_.dim(1) : 1; }
  const Tensor& loc() const { return loc_; }
  const Tensor& scale_tril() const { return scale_tril_; }
  Tensor covariance() const { return matmul(scale_tril_, transpose(scale_tril_)); }

  Tensor draw(Seed seed) const override {
    const Tensor eps({dimension(), columns()}, standard_normal(seed, dimension() * columns()));
    return add(loc_, reshape(matmul(scale_tril_, eps), loc_.shape()));
  }

  Tensor log_prob(const Tensor& x) const override {
    if (x.shape() != loc_.shape()) {
      fail(ErrorKind::kShape, "MVN log_prob expects " + shape_string(loc_.shape()) + ", got " +
                                  shape_string(x.shape()));
    }
    const std::size_t n = dimension();
    const Tensor diff = reshape(sub(x, loc_), {n, columns()});
    const Tensor z = solve_lower(scale_tril_, diff);
    const Tensor half_log_det = sum(0.5 * log(pow2(diag_part(scale_tril_))));
    Tensor lp = sub(-0.5 * sum(pow2(z), 0), half_log_det + static_cast<double>(n) * kHalfLog2Pi);
    return loc_.rank() == 1 ? reshape(lp, {}) : lp;
  }

  Tensor mean() const override { return loc_; }
  Tensor stddev() const override {
    const Tensor var = sum(pow2(scale_tril_), 1, true);  // [n,1] row norms = diag(L L^T)
    return loc_.rank() == 1 ? reshape(sqrt(var), {dimension()}) : detail::broadcast_like(sqrt(var), loc_.shape());
  }

 private:
  Tensor loc_, scale_tril_;
};

/// Invertible map with log-determinants, used by TransformedDistribution.
class Bijector {
 public:
  virtual ~Bijector() = default;
  virtual Tensor forward(const Tensor& x) const = 0;
  virtual Tensor inverse(const Tensor& y) const = 0;
  /// log |det d forward / dx| per event.
  virtual Tensor forward_log_det_jacobian(const Tensor& x) const = 0;
  /// log |det d inverse / dy| per event.
  virtual Tensor inverse_log_det_jacobian(const Tensor& y) const = 0;
};

/// Pushforward of `base` through a bijection acting on the last axis.
class TransformedDistribution : public Distribution {
 public:
  TransformedDistribution(DistributionPtr base, std::shared_ptr<const Bijector> bijector)
      : base_(std::move(base)), bijector_(std::move(bijector)) {}

  std::string_view kind() const override { return "TransformedDistribution"; }
  Shape sample_shape() const override { return base_->sample_shape(); }
  std::size_t event_rank() const override { return 1; }
  const Distribution& base() const { return *base_; }

  Tensor draw(Seed seed) const override { return bijector_->forward(base_->draw(seed)); }

  Tensor log_prob(const Tensor& y) const override {
    const Tensor x = bijector_->inverse(y);
    Tensor base_lp = base_->log_prob(x);
    if (base_->event_rank() == 0) base_lp = sum(base_lp, base_lp.rank() - 1);
    return add(base_lp, bijector_->inverse_log_det_jacobian(y));
  }

 private:
  DistributionPtr base_;
  std::shared_ptr<const Bijector> bijector_;
};

/// Integer-valued variable obtained by integrating a continuous base density
/// over unit bins centred on low..high; the extreme bins absorb the tails.
class Discretized : public Distribution {
 public:
  Discretized(DistributionPtr base, double low = 0.0, double high = 255.0)
      : base_(std::move(base)), low_(low), high_(high) {
    if (!base_->has_cdf()) {
      fail(ErrorKind::kUnsupported, "cannot discretize " + std::string(base_->kind()) + ": it has no CDF");
    }
    if (!(high_ > low_) || low_ != std::round(low_) || high_ != std::round(high_)) {
      fail(ErrorKind::kInvalidArgument, "discretization range must be integers with low < high");
    }
  }

  std::string_view kind() const override { return "Discretized"; }
  Shape sample_shape() const override { return base_->sample_shape(); }
  double low() const { return low_; }
  double high() const { return high_; }

  /// Probability mass at integer values x.
  Tensor prob(const Tensor& x) const {
    detail::integer_values(x, low_, high_, "Discretized");
    std::vector<double> at_low(x.size()), at_high(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) {
      at_low[i] = x[i] == low_ ? 1.0 : 0.0;
      at_high[i] = x[i] == high_ ? 1.0 : 0.0;
    }
    const Tensor lo_mask(x.shape(), at_low), hi_mask(x.shape(), at_high);
    const Tensor upper = add(mul(base_->cdf(x + 0.5), 1.0 - hi_mask), hi_mask);
    const Tensor lower = mul(base_->cdf(x - 0.5), 1.0 - lo_mask);
    return sub(upper, lower);
  }

  Tensor log_prob(const Tensor& x) const override { return log(clamp_min(prob(x), 0.0)); }

  Tensor draw(Seed seed) const override {
    Tensor v = base_->draw(seed).detach();
    for (auto& e : v.mutable_data()) e = std::clamp(std::round(e), low_, high_);
    return v;
  }

 private:
  DistributionPtr base_;
  double low_, high_;
};

/// KL[q || p] summed to a scalar. Supported pairs: Normal || Normal and
/// MultivariateNormalFull || MultivariateNormalFull.
inline Tensor kl_divergence(const Distribution& q, const Distribution& p) {
  if (const auto* qn = dynamic_cast<const Normal*>(&q)) {
    if (const auto* pn = dynamic_cast<const Normal*>(&p)) {
      const Tensor var_ratio = div(pow2(qn->scale()), pow2(pn->scale()));
      const Tensor mean_term = div(pow2(sub(qn->loc(), pn->loc())), pow2(pn->scale()));
      return 0.5 * sum(sub(sub(add(var_ratio, mean_term), Tensor::scalar(1.0)), log(var_ratio)));
    }
  }
  if (const auto* qm = dynamic_cast<const MultivariateNormalFull*>(&q)) {
    if (const auto* pm = dynamic_cast<const MultivariateNormalFull*>(&p)) {
      if (qm->loc().shape() != pm->loc().shape()) {
        fail(ErrorKind::kShape, "KL between MVNs of shapes " + shape_string(qm->loc().shape()) + " and " +
                                    shape_string(pm->loc().shape()));
      }
      const std::size_t n = qm->dimension();
      const auto c = static_cast<double>(qm->columns());
      const Tensor& lp = pm->scale_tril();
      const Tensor trace = sum(pow2(solve_lower(lp, qm->scale_tril())));
      const Tensor mahalanobis = sum(pow2(solve_lower(lp, reshape(sub(pm->loc(), qm->loc()), {n, qm->columns()}))));
      const Tensor log_det_p = sum(log(pow2(diag_part(lp))));
      const Tensor log_det_q = sum(log(pow2(diag_part(qm->scale_tril()))));
      return 0.5 * add(mahalanobis, c * (trace - static_cast<double>(n) + log_det_p - log_det_q));
    }
  }
  fail(ErrorKind::kUnsupported,
       "no KL divergence between " + std::string(q.kind()) + " and " + std::string(p.kind()));
}

}  // namespace bayes_layers
