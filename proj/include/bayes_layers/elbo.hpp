#pragma once

// Variational training: the minibatch ELBO estimate, its gradient, and a
// single-threaded loop fed by an optional prefetch thread.

#include <condition_variable>
#include <deque>
#include <functional>
#include <mutex>
#include <numeric>
#include <optional>
#include <thread>

#include "bayes_layers/data.hpp"
#include "bayes_layers/layer.hpp"
#include "bayes_layers/optim.hpp"

namespace bayes_layers {

/// How the summed regularizer losses are weighted against the mean
/// per-example negative log-likelihood.
struct KlScale {
  enum class Policy { kOneOverN, kConstant };
  Policy policy = Policy::kOneOverN;
  double value = 1.0;

  static KlScale one_over_n() { return {}; }
  static KlScale constant(double c) { return {Policy::kConstant, c}; }

  /// Accepts "one_over_n" or a number.
  static KlScale parse(const std::string& s) {
    if (s == "one_over_n" || s == "1/N") return one_over_n();
    const auto v = detail::parse_double(s);
    if (!v || !(*v >= 0)) fail(ErrorKind::kParse, "kl_scale must be one_over_n or a non-negative number, got '" + s + "'");
    return constant(*v);
  }

  double factor(std::size_t num_train_examples) const {
    return policy == Policy::kOneOverN ? 1.0 / static_cast<double>(num_train_examples) : value;
  }
};

struct ElboConfig {
  std::size_t num_train_examples = 1;
  std::size_t batch_size = 1;
  std::size_t mc_samples = 1;
  KlScale kl_scale;
  double learning_rate = 1e-2;
  /// Geometric decay from learning_rate to this over max_steps; unset keeps
  /// the rate constant.
  std::optional<double> final_learning_rate;
  std::size_t max_steps = 1000;
  std::uint64_t seed = 0;
  /// Batches buffered by the loader thread; 0 loads inline.
  std::size_t prefetch_capacity = 4;

  void validate() const {
    if (num_train_examples == 0) fail(ErrorKind::kInvalidArgument, "num_train_examples must be positive");
    if (batch_size == 0 || batch_size > num_train_examples) {
      fail(ErrorKind::kInvalidArgument, "batch_size must be in [1, " + std::to_string(num_train_examples) +
                                            "], got " + std::to_string(batch_size));
    }
    if (mc_samples == 0) fail(ErrorKind::kInvalidArgument, "mc_samples must be at least 1");
    if (!(learning_rate > 0)) fail(ErrorKind::kInvalidArgument, "learning_rate must be positive");
    if (final_learning_rate && !(*final_learning_rate > 0)) {
      fail(ErrorKind::kInvalidArgument, "final_learning_rate must be positive");
    }
  }

  double learning_rate_at(std::size_t step) const {
    if (!final_learning_rate || max_steps <= 1) return learning_rate;
    const double frac = static_cast<double>(step) / static_cast<double>(max_steps - 1);
    return learning_rate * std::pow(*final_learning_rate / learning_rate, frac);
  }
};

/// Per-example log-likelihood of targets under a model output, shape [b] or
/// anything whose sum is the batch total.
using LogLikelihood = std::function<Tensor(const Value& output, const Tensor& targets)>;

/// The default: the output must be a RandomVariable; targets are reshaped to
/// its sample shape when only the layout differs.
inline Tensor output_log_prob(const Value& output, const Tensor& targets) {
  if (!output.is_random()) {
    fail(ErrorKind::kInvalidArgument,
         "model output is a plain tensor; end the model with a likelihood layer or pass a log-likelihood function");
  }
  Tensor y = targets;
  if (y.shape() != output.shape() && y.size() == output.tensor().size()) y = reshape(y, output.shape());
  return output.random().log_prob(y);
}

struct ElboStep {
  double loss = 0.0;
  double nll = 0.0;  // mean over MC samples of the per-example mean
  double kl = 0.0;   // unscaled sum of regularizer losses, mean over MC samples
  std::vector<Parameter> params;
  std::vector<Tensor> grads;
};

namespace detail {

inline bool all_finite(const Tensor& t) {
  for (double v : t.data())
    if (!std::isfinite(v)) return false;
  return true;
}

/// Hierarchical name of the deepest layer holding a non-finite loss.
inline std::optional<std::string> nonfinite_loss_owner(const Layer& layer, const std::string& prefix) {
  const auto kids = layer.children();
  for (std::size_t i = 0; i < kids.size(); ++i) {
    if (auto hit = nonfinite_loss_owner(*kids[i], prefix + layer.name() + "." + std::to_string(i) + ".")) return hit;
  }
  for (const auto& l : layer.losses())
    if (!all_finite(l)) return prefix + layer.name();
  return std::nullopt;
}

}  // namespace detail

/// loss = -(1/S) sum_s mean_batch log p(y | f_s(x)) + kl_scale * sum(losses).
inline ElboStep elbo_step(Layer& model, const Tensor& x, const Tensor& y, const ElboConfig& cfg, Seed step_seed,
                          const LogLikelihood& log_likelihood = output_log_prob) {
  if (x.rank() == 0) fail(ErrorKind::kShape, "elbo_step needs batched inputs");
  const double batch = static_cast<double>(x.dim(0));
  const double kl_factor = cfg.kl_scale.factor(cfg.num_train_examples);
  const double inv_s = 1.0 / static_cast<double>(cfg.mc_samples);

  Tape tape;
  auto active = tape.activate();
  Tensor loss = Tensor::scalar(0.0);
  ElboStep out;
  for (std::size_t s = 0; s < cfg.mc_samples; ++s) {
    const Value pred = model(x, step_seed.derive(s));
    const Tensor nll = neg(sum(log_likelihood(pred, y))) * (1.0 / batch);
    const Tensor kl = total_loss(collect_losses(model));
    if (!std::isfinite(kl.item())) {
      const auto owner = detail::nonfinite_loss_owner(model, "");
      fail(ErrorKind::kNonFinite, "regularizer loss is " + std::to_string(kl.item()) + " in layer '" +
                                      owner.value_or(model.name()) + "'");
    }
    if (!std::isfinite(nll.item())) {
      fail(ErrorKind::kNonFinite, "negative log-likelihood is " + std::to_string(nll.item()) +
                                      " at the output of '" + model.name() + "'");
    }
    loss = add(loss, add(nll, kl * kl_factor) * inv_s);
    out.nll += nll.item() * inv_s;
    out.kl += kl.item() * inv_s;
  }
  out.loss = loss.item();
  const Gradients g = tape.backward(loss);
  for (const auto& p : model.trainable_parameters()) {
    out.params.push_back(p);
    out.grads.push_back(g.wrt(p));
  }
  return out;
}

struct Batch {
  std::size_t step = 0;
  Tensor x, y;
};

/// Deterministic minibatches: each epoch is a fresh permutation drawn from
/// the seed; the trailing partial batch of an epoch is dropped.
class BatchSampler {
 public:
  BatchSampler(const Dataset& data, std::size_t batch_size, std::uint64_t seed)
      : data_(data), batch_(batch_size), seed_(Seed(seed).derive(0xDA7A)) {
    if (batch_ == 0 || batch_ > data_.size()) fail(ErrorKind::kInvalidArgument, "batch size out of range");
  }

  Batch at(std::size_t step) const {
    const std::size_t n = data_.size();
    if (batch_ == n) return {step, data_.features, data_.targets};
    const std::size_t per_epoch = n / batch_;
    const std::size_t epoch = step / per_epoch, offset = (step % per_epoch) * batch_;
    const auto keys = uniform(seed_.derive(epoch), n);
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return keys[a] < keys[b]; });
    std::vector<std::size_t> rows(order.begin() + static_cast<std::ptrdiff_t>(offset),
                                  order.begin() + static_cast<std::ptrdiff_t>(offset + batch_));
    return {step, gather_rows(data_.features, rows), gather_rows(data_.targets, rows)};
  }

  static Tensor gather_rows(const Tensor& t, const std::vector<std::size_t>& rows) {
    Shape shape = t.shape();
    const std::size_t width = t.size() / shape[0];
    shape[0] = rows.size();
    std::vector<double> out;
    out.reserve(rows.size() * width);
    for (std::size_t r : rows) {
      const auto row = t.data().subspan(r * width, width);
      out.insert(out.end(), row.begin(), row.end());
    }
    return Tensor(std::move(shape), std::move(out));
  }

 private:
  const Dataset& data_;
  std::size_t batch_;
  Seed seed_;
};

/// Blocking single-producer single-consumer queue with a fixed capacity.
template <typename T>
class BoundedQueue {
 public:
  explicit BoundedQueue(std::size_t capacity) : capacity_(std::max<std::size_t>(capacity, 1)) {}

  /// Returns false if the queue was closed while waiting.
  bool push(T value) {
    std::unique_lock lock(mu_);
    not_full_.wait(lock, [&] { return closed_ || items_.size() < capacity_; });
    if (closed_) return false;
    items_.push_back(std::move(value));
    not_empty_.notify_one();
    return true;
  }

  /// Empty once the queue is closed and drained.
  std::optional<T> pop() {
    std::unique_lock lock(mu_);
    not_empty_.wait(lock, [&] { return closed_ || !items_.empty(); });
    if (items_.empty()) return std::nullopt;
    T v = std::move(items_.front());
    items_.pop_front();
    not_full_.notify_one();
    return v;
  }

  void close() {
    std::lock_guard lock(mu_);
    closed_ = true;
    not_full_.notify_all();
    not_empty_.notify_all();
  }

 private:
  std::size_t capacity_;
  std::mutex mu_;
  std::condition_variable not_full_, not_empty_;
  std::deque<T> items_;
  bool closed_ = false;
};

struct TrainRecord {
  std::size_t step = 0;
  double loss = 0.0;
  double kl = 0.0;
};

using StepCallback = std::function<void(const TrainRecord&)>;

/// Runs cfg.max_steps Adam steps on minibatch ELBO estimates. Step k uses
/// Seed::for_step(cfg.seed, k) and the sampler's batch k, so the trace depends
/// only on the config and the data.
inline std::vector<TrainRecord> fit(Layer& model, const Dataset& data, ElboConfig cfg, const StepCallback& on_step = {},
                                    const LogLikelihood& log_likelihood = output_log_prob, Adam* optimizer = nullptr) {
  cfg.num_train_examples = data.size();
  cfg.batch_size = std::min(cfg.batch_size, data.size());
  cfg.validate();
  Adam local(AdamOptions{cfg.learning_rate});
  Adam& opt = optimizer ? *optimizer : local;
  const BatchSampler sampler(data, cfg.batch_size, cfg.seed);

  std::vector<TrainRecord> trace;
  auto train_on = [&](const Batch& b) {
    const ElboStep s = elbo_step(model, b.x, b.y, cfg, Seed::for_step(cfg.seed, b.step), log_likelihood);
    opt.set_learning_rate(cfg.learning_rate_at(b.step));
    opt.step(s.params, s.grads);
    trace.push_back({b.step, s.loss, s.kl});
    if (on_step) on_step(trace.back());
  };

  if (cfg.prefetch_capacity == 0) {
    for (std::size_t k = 0; k < cfg.max_steps; ++k) train_on(sampler.at(k));
    return trace;
  }
  BoundedQueue<Batch> queue(cfg.prefetch_capacity);
  std::jthread loader([&](std::stop_token stop) {
    for (std::size_t k = 0; k < cfg.max_steps && !stop.stop_requested(); ++k) {
      if (!queue.push(sampler.at(k))) return;
    }
    queue.close();
  });
  try {
    while (auto b = queue.pop()) train_on(*b);
  } catch (...) {
    loader.request_stop();
    queue.close();
    throw;
  }
  return trace;
}

}  // namespace bayes_layers
