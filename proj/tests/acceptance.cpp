// Acceptance run: one PASS/FAIL line per criterion, nonzero exit if any fail.

#include <Eigen/Dense>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <string>
#include <vector>

#include "bayes_layers/bayes_layers.hpp"
#include "support/gp_oracle.hpp"
#include "support/gradcheck.hpp"

namespace bl = bayes_layers;
using bl::Seed;
using bl::Tensor;
using bl::testing::random_tensor;

namespace {

struct Verdict {
  bool pass = true;
  std::string detail;
};

char buf[512];

template <typename... Args>
std::string format(const char* f, Args... args) {
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

// --- 1: gradients --------------------------------------------------------------

// Scalar used for every layer: the output's log-density of fixed targets when
// the output is random, plus a smooth function of the realized value, plus
// the collected regularizer losses.
Tensor probe_loss(bl::Layer& layer, const Tensor& x, Seed seed, const std::optional<Tensor>& target) {
  const bl::Value out = layer(x, seed);
  Tensor loss = sum(bl::tanh(out.tensor()));
  if (target) loss = add(loss, sum(out.random().log_prob(*target)));
  return add(loss, bl::total_loss(bl::collect_losses(layer)));
}

struct GradCase {
  std::string name;
  bl::LayerPtr layer;
  Tensor x;
  std::optional<Tensor> target;
  std::function<Tensor()> loss;  // overrides probe_loss when set
};

std::vector<GradCase> gradient_cases(std::uint64_t s) {
  std::vector<GradCase> cases;
  const Tensor x2 = random_tensor({4, 3}, s + 1);
  cases.push_back({"dense", bl::dense(3, bl::activations::tanh()), x2, {}, {}});
  cases.push_back({"variational_dense", bl::variational_dense(3, bl::activations::tanh()), x2, {}, {}});
  cases.push_back({"flipout_dense", bl::flipout_dense(3, bl::activations::tanh()), x2, {}, {}});

  bl::Conv2DOptions co;
  co.kernel_size = {2, 2};
  bl::Conv2DOptions vco = bl::variational_conv2d_options();
  vco.kernel_size = {2, 2};
  const Tensor xc = random_tensor({1, 3, 3, 2}, s + 2);
  cases.push_back({"conv2d", bl::conv2d_layer(2, co), xc, {}, {}});
  cases.push_back({"variational_conv2d", bl::variational_conv2d(2, vco), xc, {}, {}});

  const Tensor xl = random_tensor({2, 3, 2}, s + 3);
  cases.push_back({"lstm_cell", bl::lstm_cell(2), xl, {}, {}});
  cases.push_back({"variational_lstm_cell", bl::variational_lstm_cell(2), xl, {}, {}});

  bl::GaussianProcessOptions gpo;
  gpo.conditional_inputs = random_tensor({4, 1}, s + 4, -1, 1);
  gpo.conditional_outputs = random_tensor({4, 2}, s + 5);
  gpo.observation_noise = 0.3;
  gpo.trainable_noise = true;
  const Tensor xg = random_tensor({3, 1}, s + 6, -1.5, 1.5);
  cases.push_back({"gaussian_process", bl::gaussian_process(2, gpo), xg, random_tensor({3, 2}, s + 7), {}});

  bl::SparseGaussianProcessOptions so;
  so.kernel.lengthscale = 0.7;
  so.inducing_inputs = Tensor::matrix(3, 1, {-1.0, 0.0, 1.0});
  cases.push_back({"sparse_gaussian_process", bl::sparse_gaussian_process(2, 3, so), xg, random_tensor({3, 2}, s + 8), {}});

  bl::RandomFourierFeaturesOptions ro;
  ro.kernel.trainable = true;
  cases.push_back({"random_fourier_features", bl::random_fourier_features(2, 6, ro), x2, {}, {}});

  const Tensor y1 = random_tensor({4, 1}, s + 9);
  cases.push_back({"normal_output", bl::sequential({bl::dense(2), bl::normal_output()}), x2, y1, {}});
  cases.push_back({"homoscedastic_normal_output", bl::sequential({bl::dense(1), bl::homoscedastic_normal_output(0.7)}),
                   x2, y1, {}});
  cases.push_back({"categorical_output", bl::categorical_output(4), x2, Tensor::vector({0, 3, 1, 2}), {}});
  cases.push_back({"mixture_logistic_output", bl::mixture_logistic_output(2, 2), x2,
                   Tensor::matrix(4, 2, {0, 255, 30, 128, 200, 7, 64, 99}), {}});

  bl::MadeOptions mo;
  mo.hidden_sizes = {5};
  mo.zero_init_output = false;
  const Tensor xf = random_tensor({3, 4}, s + 10);
  cases.push_back({"made", bl::made_conditioner(4, mo), xf, {}, {}});
  auto coupling = bl::coupling_layer(bl::alternating_mask(4, 0), bl::made_conditioner(4, mo));
  cases.push_back({"coupling", coupling, xf, {}, [coupling, xf] {
                     const Tensor y = (*coupling)(xf).tensor();
                     return add(add(sum(bl::tanh(y)), sum(coupling->log_det_jacobian(xf))),
                                sum(bl::tanh(coupling->reverse(xf))));
                   }});
  auto rev = bl::reverse_wrapper(bl::coupling_layer(bl::alternating_mask(4, 1), bl::made_conditioner(4, mo)));
  cases.push_back({"reverse", rev, xf, {}, [rev, xf] {
                     return add(sum(bl::tanh((*rev)(xf).tensor())), sum(rev->log_det_jacobian(xf)));
                   }});
  auto flow = bl::realnvp_flow(2, 3, mo);
  const Tensor pts = random_tensor({5, 2}, s + 11);
  cases.push_back({"flow_density", flow, random_tensor({5, 2}, s + 12), {}, [flow, pts] {
                     auto base = std::make_shared<bl::Normal>(Tensor::zeros({5, 2}), Tensor::ones({5, 2}));
                     const bl::Value out = (*flow)(bl::sample(base, Seed(3)));
                     return sum(out.random().log_prob(pts));
                   }});
  return cases;
}

Verdict criterion_gradients() {
  const auto t0 = std::chrono::steady_clock::now();
  double worst = 0.0;
  std::string where;
  std::size_t checked = 0;
  for (std::uint64_t s = 0; s < 20; ++s) {
    for (auto& c : gradient_cases(s)) {
      (*c.layer)(c.x, Seed(s));  // build
      auto params = c.layer->trainable_parameters();
      // move parameters off their initial values so no gradient is trivially zero
      for (auto& p : params) {
        const Tensor v = p.value();
        p.assign(add(v, random_tensor(v.shape(), 7000 + 31 * s + checked, -0.3, 0.3)));
      }
      auto loss = c.loss ? c.loss : [&] { return probe_loss(*c.layer, c.x, Seed(s), c.target); };
      const auto r = bl::testing::check_parameter_gradients(loss, params, 1e-5);
      ++checked;
      if (params.empty()) return {false, c.name + " has no trainable parameters"};
      if (r.max_rel_error > worst) {
        worst = r.max_rel_error;
        where = c.name + " seed " + std::to_string(s) + ": " + r.worst;
      }
    }
  }
  const double secs = seconds_since(t0);
  return {worst < 1e-4 && secs < 60,
          format("%zu layer checks, max rel error %.2e (%s), %.1f s", checked, worst, where.c_str(), secs)};
}

// --- 2: KL oracle --------------------------------------------------------------

Verdict criterion_kl() {
  const std::size_t n = 1000000;
  int within = 0;
  double worst_z = 0.0;
  bool exact_zero = true;
  for (std::uint64_t s = 0; s < 50; ++s) {
    const auto p = bl::uniform(Seed(s).derive(0xC1), 4, 0.0, 1.0);
    const double mq = 4 * p[0] - 2, sq = 0.2 + 2 * p[1], mp = 4 * p[2] - 2, sp = 0.2 + 2 * p[3];
    const double analytic = bl::kl_divergence(bl::Normal(Tensor::scalar(mq), Tensor::scalar(sq)),
                                              bl::Normal(Tensor::scalar(mp), Tensor::scalar(sp))).item();
    const auto eps = bl::standard_normal(Seed(s).derive(0xC2), n);
    double m = 0.0, m2 = 0.0;
    for (double e : eps) {
      const double zp = (mq + sq * e - mp) / sp;
      const double term = -0.5 * e * e - std::log(sq) + 0.5 * zp * zp + std::log(sp);
      m += term;
      m2 += term * term;
    }
    m /= n;
    const double se = std::sqrt((m2 / n - m * m) / n);
    const double z = std::abs(m - analytic) / se;
    worst_z = std::max(worst_z, z);
    within += z <= 3.0;
    const bl::Normal d(Tensor::vector({mq, mp}), Tensor::vector({sq, sp}));
    const Tensor self = bl::kl_divergence(d, d);
    for (double v : self.data()) exact_zero = exact_zero && v == 0.0;
  }
  return {within == 50 && exact_zero,
          format("%d/50 within 3 SE (max %.2f SE), KL(d||d) exactly 0: %s", within, worst_z, exact_zero ? "yes" : "no")};
}

// --- 3: drop-in equivalence ------------------------------------------------------

bool same(const Tensor& a, const Tensor& b) { return a.shape() == b.shape() && a.values() == b.values(); }

Verdict criterion_drop_in() {
  int ok = 0, total = 0;
  for (std::uint64_t s = 0; s < 10; ++s) {
    const Tensor k = random_tensor({4, 3}, s), b = random_tensor({3}, s + 1), x = random_tensor({6, 4}, s + 2);
    bl::DenseOptions det;
    det.kernel_initializer = bl::initializers::constant(k);
    det.bias_initializer = bl::initializers::constant(b);
    bl::DenseOptions var = bl::variational_options();
    var.kernel_initializer = bl::initializers::trainable_normal_from(k, -INFINITY);
    var.bias_initializer = bl::initializers::trainable_normal_from(b, -INFINITY);
    const Tensor expected = (*bl::dense(3, bl::activations::tanh(), det))(x).tensor();
    ok += same((*bl::variational_dense(3, bl::activations::tanh(), var))(x, Seed(s)).tensor(), expected);
    ok += same((*bl::flipout_dense(3, bl::activations::tanh(), var))(x, Seed(s)).tensor(), expected);

    const Tensor ck = random_tensor({3, 3, 2, 4}, s + 3), cb = random_tensor({4}, s + 4);
    const Tensor xc = random_tensor({2, 5, 5, 2}, s + 5);
    bl::Conv2DOptions cdet;
    cdet.kernel_initializer = bl::initializers::constant(ck);
    cdet.bias_initializer = bl::initializers::constant(cb);
    bl::Conv2DOptions cvar = bl::variational_conv2d_options();
    cvar.kernel_initializer = bl::initializers::trainable_normal_from(ck, -INFINITY);
    cvar.bias_initializer = bl::initializers::trainable_normal_from(cb, -INFINITY);
    ok += same((*bl::variational_conv2d(4, cvar))(xc, Seed(s)).tensor(), (*bl::conv2d_layer(4, cdet))(xc).tensor());

    const Tensor wx = random_tensor({3, 8}, s + 6), wh = random_tensor({2, 8}, s + 7), lb = random_tensor({8}, s + 8);
    const Tensor xl = random_tensor({2, 4, 3}, s + 9);
    bl::LSTMOptions ldet;
    ldet.input_initializer = bl::initializers::constant(wx);
    ldet.recurrent_initializer = bl::initializers::constant(wh);
    ldet.bias_initializer = bl::initializers::constant(lb);
    bl::LSTMOptions lvar = bl::variational_lstm_options();
    lvar.input_initializer = bl::initializers::trainable_normal_from(wx, -INFINITY);
    lvar.recurrent_initializer = bl::initializers::trainable_normal_from(wh, -INFINITY);
    lvar.bias_initializer = bl::initializers::trainable_normal_from(lb, -INFINITY);
    ok += same((*bl::variational_lstm_cell(2, lvar))(xl, Seed(s)).tensor(), (*bl::lstm_cell(2, ldet))(xl).tensor());

    const Tensor w = random_tensor({30, 2}, s + 10);
    bl::RandomFourierFeaturesOptions ro;
    ro.kernel_initializer = bl::initializers::trainable_normal_from(w, -INFINITY);
    auto rff = bl::random_fourier_features(2, 30, ro);
    const Tensor out = (*rff)(x, Seed(s)).tensor();
    ok += same(out, bl::matmul(rff->features(x), w));
    total += 5;
  }
  return {ok == total, format("%d/%d layer comparisons bit-identical (dense, flipout, conv2d, lstm, rff)", ok, total)};
}

// --- 4: sparse GP collapse ------------------------------------------------------

Verdict criterion_sparse_collapse() {
  double worst = 0.0;
  for (std::uint64_t s = 0; s < 5; ++s) {
    const double amp = 0.8 + 0.1 * s, ls = 0.4 + 0.1 * s, noise = 0.2;
    // jittered grid: near-duplicate inputs make K_zz singular to working precision
    const Tensor offsets = random_tensor({5, 1}, 21 + s, -0.1, 0.1);
    const Tensor x = add(Tensor::matrix(5, 1, {-0.9, -0.45, 0.0, 0.45, 0.9}), offsets);
    const Tensor y = random_tensor({5, 1}, 40 + s);
    const Tensor xs = random_tensor({7, 1}, 60 + s, -2, 2);
    bl::SparseGaussianProcessOptions o;
    o.kernel = {amp, ls, true};
    o.inducing_inputs = x;
    auto gp = bl::sparse_gaussian_process(1, 5, o);
    gp->initialize(x, Seed(0));
    const auto opt = bl::testing::optimal_inducing(bl::testing::to_eigen(x), bl::testing::to_eigen(y),
                                                   bl::testing::to_eigen(x), amp, ls, noise);
    bl::Parameter(gp->variational_mean()).assign(bl::testing::from_eigen(opt.mean));
    bl::Parameter(gp->scale_tril(0)).assign(bl::testing::from_eigen(opt.scale_tril));
    const auto p = gp->predictive(xs);
    const auto oracle = bl::testing::exact_gp_oracle(bl::testing::to_eigen(x), bl::testing::to_eigen(y),
                                                     bl::testing::to_eigen(xs), amp, ls, noise);
    const Tensor mean = p->mean(), sd = p->stddev();
    for (std::size_t i = 0; i < 7; ++i) {
      worst = std::max(worst, std::abs(mean[i] - oracle.mean(i, 0)));
      worst = std::max(worst, std::abs(sd[i] * sd[i] - oracle.var(i)));
    }
  }
  return {worst < 1e-6, format("max |sparse - exact| over mean and variance %.2e (5 problems)", worst)};
}

// --- 5: random Fourier features --------------------------------------------------

Verdict criterion_rff() {
  const Tensor a = random_tensor({100, 2}, 1, -1, 1), b = random_tensor({100, 2}, 2, -1, 1);
  const Tensor k = bl::se_kernel(a, b, Tensor::scalar(1), Tensor::scalar(1));
  std::vector<double> errs;
  std::string text;
  for (std::size_t d : {10u, 100u, 1000u, 10000u}) {
    auto rff = bl::random_fourier_features(1, d);
    rff->ensure_built(a.shape(), Seed(5));
    const Tensor approx = bl::matmul(rff->features(a), bl::transpose(rff->features(b)));
    double worst = 0.0;
    for (std::size_t i = 0; i < 100; ++i) worst = std::max(worst, std::abs(approx[i * 100 + i] - k[i * 100 + i]));
    errs.push_back(worst);
    text += format("D=%zu: %.4f  ", d, worst);
  }
  bool decreasing = true;
  for (std::size_t i = 1; i < errs.size(); ++i) decreasing = decreasing && errs[i] < errs[i - 1];
  return {decreasing && errs.back() < 0.05, text + (decreasing ? "(decreasing)" : "(not decreasing)")};
}

// --- 6: flows -------------------------------------------------------------------

std::shared_ptr<bl::Sequential> random_flow(std::size_t dims, std::size_t couplings, std::uint64_t seed, double spread) {
  bl::MadeOptions o;
  o.hidden_sizes = {8, 8};
  o.zero_init_output = false;
  auto flow = bl::realnvp_flow(dims, couplings, o);
  (*flow)(Tensor::zeros({1, dims}), Seed(seed));
  for (auto p : flow->parameters()) p.assign(random_tensor(p.shape(), seed * 1000 + p.value().size(), -spread, spread));
  return flow;
}

Verdict criterion_flows() {
  double round_trip = 0.0, log_det = 0.0;
  for (std::uint64_t s = 0; s < 20; ++s) {
    for (std::size_t dims : {2u, 4u, 6u}) {
      auto flow = random_flow(dims, 4, s + 100 * dims, 0.6);
      const Tensor x = random_tensor({8, dims}, s + 1);
      const Tensor y = (*flow)(x).tensor();
      const Tensor back = flow->reverse(y);
      for (std::size_t i = 0; i < x.size(); ++i) round_trip = std::max(round_trip, std::abs(back[i] - x[i]));

      const Tensor row = random_tensor({1, dims}, s + 2);
      const double h = 1e-6;
      Eigen::MatrixXd jac(dims, dims);
      for (std::size_t c = 0; c < dims; ++c) {
        Tensor up = row, down = row;
        up.mutable_data()[c] += h;
        down.mutable_data()[c] -= h;
        const Tensor yu = (*flow)(up).tensor(), yd = (*flow)(down).tensor();
        for (std::size_t r = 0; r < dims; ++r) jac(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) = (yu[r] - yd[r]) / (2 * h);
      }
      const double numeric = std::log(std::abs(jac.determinant()));
      log_det = std::max(log_det, std::abs(flow->log_det_jacobian(row).item() - numeric));
    }
  }

  // Mild conditioner weights keep the pushed-forward mass inside the box.
  const std::size_t n = 200;
  const double lo = -8.0, hi = 8.0, step = (hi - lo) / n;
  std::vector<double> grid;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) grid.insert(grid.end(), {lo + (i + 0.5) * step, lo + (j + 0.5) * step});
  const Tensor pts({n * n, 2}, grid);
  double worst_mass = 0.0;
  std::string masses;
  for (std::uint64_t s = 0; s < 3; ++s) {
    auto flow = random_flow(2, 4, s + 11, 0.15);
    auto base = std::make_shared<bl::Normal>(Tensor::zeros({1, 2}), Tensor::ones({1, 2}));
    const Tensor lp = (*flow)(bl::sample(base, Seed(s))).random().log_prob(pts);
    double mass = 0.0;
    for (double v : lp.data()) mass += std::exp(v) * step * step;
    worst_mass = std::max(worst_mass, std::abs(mass - 1.0));
    masses += format("%.5f ", mass);
  }
  return {round_trip < 1e-8 && log_det < 1e-5 && worst_mass < 1e-2,
          format("round trip %.2e, log-det vs numerical Jacobian %.2e, grid mass %s", round_trip, log_det,
                 masses.c_str())};
}

// --- 7: discretized likelihoods -------------------------------------------------

Verdict criterion_discretized() {
  std::vector<double> bins(256);
  for (std::size_t i = 0; i < 256; ++i) bins[i] = static_cast<double>(i);
  double worst_sum = 0.0;
  for (std::uint64_t s = 0; s < 100; ++s) {
    const std::size_t k = 1 + s % 5;
    const auto u = bl::uniform(Seed(s).derive(0xD1), 3 * k, 0.0, 1.0);
    // one row per bin, each [logits | means | log-scales]
    std::vector<double> row;
    for (std::size_t c = 0; c < k; ++c) row.push_back(4 * u[c] - 2);
    for (std::size_t c = 0; c < k; ++c) row.push_back(2.4 * u[k + c] - 1.2);
    for (std::size_t c = 0; c < k; ++c) row.push_back(-7 + 7 * u[2 * k + c]);
    std::vector<double> params;
    for (std::size_t i = 0; i < 256; ++i) params.insert(params.end(), row.begin(), row.end());
    const bl::DiscretizedLogisticMixture d(Tensor({256, 3 * k}, params), k);
    const Tensor p = bl::exp(d.log_prob(Tensor::vector(bins)));
    double total = 0.0;
    for (double v : p.data()) total += v;
    worst_sum = std::max(worst_sum, std::abs(total - 1.0));
  }

  double worst_cross = 0.0;
  for (std::uint64_t s = 0; s < 100; ++s) {
    const auto p = bl::uniform(Seed(s).derive(0xD2), 2, 0.0, 1.0);
    const double mu = -1.2 + 2.4 * p[0], log_s = -6.0 + 5.0 * p[1];
    auto base = std::make_shared<bl::Logistic>(Tensor::scalar((mu + 1.0) * 127.5), Tensor::scalar(std::exp(log_s) * 127.5));
    const Tensor a = bl::Discretized(base).prob(Tensor::vector(bins));
    std::vector<double> params;
    for (std::size_t i = 0; i < 256; ++i) params.insert(params.end(), {0.0, mu, log_s});
    const Tensor b = bl::exp(bl::DiscretizedLogisticMixture(Tensor({256, 3}, params), 1).log_prob(Tensor::vector(bins)));
    for (std::size_t i = 0; i < 256; ++i) worst_cross = std::max(worst_cross, std::abs(a[i] - b[i]));
  }
  return {worst_sum < 1e-6 && worst_cross < 1e-10,
          format("max |sum pmf - 1| %.2e over 100 draws, Discretize vs mixture pmf %.2e", worst_sum, worst_cross)};
}

// --- 8: conjugate recovery ------------------------------------------------------

Verdict criterion_conjugate() {
  const auto t0 = std::chrono::steady_clock::now();
  const double noise = 0.5, true_w = 0.8;
  const std::size_t n = 100, steps = 3000;
  const auto xs = bl::uniform(Seed(7).derive(1), n, -1, 1);
  const auto e = bl::standard_normal(Seed(7).derive(2), n);
  std::vector<double> ys(n);
  double sxx = 0, sxy = 0;
  for (std::size_t i = 0; i < n; ++i) {
    ys[i] = true_w * xs[i] + noise * e[i];
    sxx += xs[i] * xs[i];
    sxy += xs[i] * ys[i];
  }
  const double precision = 1 + sxx / (noise * noise), post_mean = sxy / (noise * noise) / precision;
  const bl::Dataset data{Tensor({n, 1}, xs), Tensor({n, 1}, ys), {}, {}};

  bl::DenseOptions o = bl::variational_options(1.0);
  o.use_bias = false;
  auto layer = bl::variational_dense(1, {}, o);
  auto model = bl::sequential({layer});
  const bl::LogLikelihood gaussian = [&](const bl::Value& out, const Tensor& y) {
    return bl::Normal(out.tensor(), Tensor::scalar(noise)).log_prob(y);
  };
  bl::ElboConfig cfg;
  cfg.batch_size = n;
  cfg.learning_rate = 1e-2;
  cfg.final_learning_rate = 1e-4;
  cfg.max_steps = steps;
  bl::fit(*model, data, cfg, {}, gaussian);
  const double mean_err = std::abs(layer->parameter("kernel_loc").value().item() - post_mean);

  // posterior predictive mean at test inputs, by Monte Carlo through the layer
  const Tensor xq = Tensor::matrix(3, 1, {-1.0, 0.5, 1.5});
  std::vector<double> pred(3, 0.0);
  const std::size_t draws = 100000;
  for (std::size_t s = 0; s < draws; ++s) {
    const Tensor f = (*model)(xq, Seed(0xF00D).derive(s)).tensor();
    for (std::size_t i = 0; i < 3; ++i) pred[i] += f[i] / draws;
  }
  double pred_err = 0.0;
  for (std::size_t i = 0; i < 3; ++i) pred_err = std::max(pred_err, std::abs(pred[i] - post_mean * xq[i]));
  const double secs = seconds_since(t0);
  return {mean_err < 1e-2 && pred_err < 1e-2 && secs < 30,
          format("%zu steps: posterior mean error %.2e, predictive mean error %.2e, %.1f s", steps, mean_err, pred_err,
                 secs)};
}

// --- 9: epistemic uncertainty ---------------------------------------------------

// Predictive stddev by moment matching over forward passes: mixture of the
// per-pass Normal likelihoods.
std::vector<double> predictive_stddev(bl::Layer& model, const Tensor& x, std::size_t passes, Seed seed) {
  const std::size_t n = x.dim(0);
  std::vector<double> m(n, 0.0), m2(n, 0.0);
  for (std::size_t s = 0; s < passes; ++s) {
    const bl::Value out = model(x, seed.derive(s));
    const Tensor mu = out.random().distribution().mean(), sd = out.random().distribution().stddev();
    for (std::size_t i = 0; i < n; ++i) {
      m[i] += mu[i] / passes;
      m2[i] += (mu[i] * mu[i] + sd[i] * sd[i]) / passes;
    }
  }
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = std::sqrt(std::max(m2[i] - m[i] * m[i], 0.0));
  return out;
}

Verdict criterion_epistemic() {
  int wins = 0;
  std::string text;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    auto model = bl::models::bnn_regression();
    const bl::Dataset data = bl::toy::regression_1d(128, seed);
    bl::ElboConfig cfg;
    cfg.batch_size = 32;
    cfg.max_steps = 2000;
    cfg.learning_rate = 1e-2;
    cfg.final_learning_rate = 1e-3;
    cfg.seed = seed;
    bl::fit(*model, data, cfg);
    const auto sd = predictive_stddev(*model, Tensor::matrix(3, 1, {-3.0, 0.0, 3.0}), 200, Seed(seed).derive(0x9ED1C7));
    const bool win = sd[0] > sd[1] && sd[2] > sd[1];
    wins += win;
    text += format("%.2f/%.2f/%.2f ", sd[0], sd[1], sd[2]);
  }
  return {wins >= 8, format("%d/10 seeds with stddev(+-3) > stddev(0); sd(-3)/sd(0)/sd(3): %s", wins, text.c_str())};
}

// --- 10: flipout ----------------------------------------------------------------

void share_parameters(bl::Dense& from, bl::Dense& to) {
  for (const char* name : {"kernel_loc", "kernel_rho", "bias_loc", "bias_rho"}) {
    to.parameter(name).assign(from.parameter(name).value());
  }
}

Verdict criterion_flipout() {
  // marginal means
  const std::size_t n = 20000;
  auto fd = bl::flipout_dense(2);
  auto vd = bl::variational_dense(2);
  const Tensor x = random_tensor({3, 4}, 5);
  (*fd)(x, Seed(0));
  (*vd)(x, Seed(0));
  fd->parameter("kernel_rho").assign(add(fd->parameter("kernel_rho").value(), Tensor::scalar(3.0)));
  fd->parameter("bias_rho").assign(add(fd->parameter("bias_rho").value(), Tensor::scalar(3.0)));
  share_parameters(*fd, *vd);
  std::vector<double> mf(6, 0.0), mr(6, 0.0), vf(6, 0.0), vr(6, 0.0);
  for (std::size_t t = 0; t < n; ++t) {
    const Tensor yf = (*fd)(x, Seed(1000 + t)).tensor();
    const Tensor yr = (*vd)(x, Seed(900000 + t)).tensor();
    for (std::size_t i = 0; i < 6; ++i) {
      mf[i] += yf[i];
      vf[i] += yf[i] * yf[i];
      mr[i] += yr[i];
      vr[i] += yr[i] * yr[i];
    }
  }
  double worst_z = 0.0;
  for (std::size_t i = 0; i < 6; ++i) {
    const double a = mf[i] / n, b = mr[i] / n;
    const double se = std::sqrt((vf[i] / n - a * a) / n + (vr[i] / n - b * b) / n);
    worst_z = std::max(worst_z, std::abs(a - b) / se);
  }

  // Gradient variance: each trial is a fresh problem (inputs, targets and
  // posterior); the variance of the batch-mean gradient over 50 weight draws
  // is compared between the two estimators on identical parameters.
  int not_larger = 0;
  const std::size_t trials = 200, draws = 50, batch = 32;
  for (std::uint64_t t = 0; t < trials; ++t) {
    const Tensor xb = random_tensor({batch, 5}, 10 * t + 1), yb = random_tensor({batch, 1}, 10 * t + 2);
    auto f = bl::flipout_dense(1);
    auto r = bl::variational_dense(1);
    (*f)(xb, Seed(t));
    (*r)(xb, Seed(t));
    f->parameter("kernel_loc").assign(random_tensor({5, 1}, 10 * t + 3, -1, 1));
    f->parameter("kernel_rho").assign(random_tensor({5, 1}, 10 * t + 4, -2, 0));
    share_parameters(*f, *r);
    auto grad_variance = [&](bl::Dense& layer, std::uint64_t tag) {
      std::vector<double> m, m2;
      for (std::size_t k = 0; k < draws; ++k) {
        bl::Tape tape;
        auto active = tape.activate();
        const Tensor out = layer(xb, Seed(tag).derive(t).derive(k)).tensor();
        const Tensor loss = bl::mean(bl::pow2(bl::sub(out, yb)));
        const bl::Gradients g = tape.backward(loss);
        std::vector<double> flat;
        for (const auto& p : layer.trainable_parameters()) {
          const Tensor gp = g.wrt(p);
          flat.insert(flat.end(), gp.data().begin(), gp.data().end());
        }
        if (m.empty()) m.assign(flat.size(), 0.0), m2.assign(flat.size(), 0.0);
        for (std::size_t i = 0; i < flat.size(); ++i) {
          m[i] += flat[i] / draws;
          m2[i] += flat[i] * flat[i] / draws;
        }
      }
      double total = 0.0;
      for (std::size_t i = 0; i < m.size(); ++i) total += m2[i] - m[i] * m[i];
      return total;
    };
    not_larger += grad_variance(*f, 1) <= grad_variance(*r, 2);
  }
  const double frac = static_cast<double>(not_larger) / trials;
  return {worst_z <= 4.0 && frac >= 0.9,
          format("marginal means max %.2f SE; flipout gradient variance not larger in %d/%zu trials", worst_z,
                 not_larger, trials)};
}

// --- 11: determinism and persistence ---------------------------------------------

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  return std::string(std::istreambuf_iterator<char>(in), {});
}

Verdict criterion_determinism() {
  struct Demo {
    const char* name;
    std::function<std::shared_ptr<bl::Sequential>()> make;
    bl::Dataset data;
  };
  const std::vector<Demo> demos = {
      {"bnn", [] { return bl::models::bnn_regression(); }, bl::toy::regression_1d(64, 1)},
      {"deep-gp", [] { return bl::models::deep_gp(); }, bl::toy::regression_1d(64, 1)},
      {"flow", [] { return bl::models::flow_density({.hidden_sizes = {16}}); }, bl::toy::two_moons(64, 1)},
      {"lstm", [] { return bl::models::bayesian_lstm(); }, bl::toy::token_sequences(64, 8, 4, 1)}};
  const auto dir = std::filesystem::temp_directory_path();
  int traces_ok = 0, files_ok = 0;
  for (const auto& d : demos) {
    bl::ElboConfig cfg;
    cfg.batch_size = 16;
    cfg.max_steps = 25;
    cfg.seed = 42;
    std::vector<std::vector<double>> traces;
    std::shared_ptr<bl::Sequential> trained;
    for (std::size_t prefetch : {4u, 4u, 0u}) {
      cfg.prefetch_capacity = prefetch;
      trained = d.make();
      std::vector<double> t;
      for (const auto& r : bl::fit(*trained, d.data, cfg)) t.insert(t.end(), {r.loss, r.kl});
      traces.push_back(t);
    }
    traces_ok += traces[0] == traces[1] && traces[0] == traces[2];

    const std::string a = (dir / (std::string("accept_") + d.name + "_a.ckpt")).string();
    const std::string b = (dir / (std::string("accept_") + d.name + "_b.ckpt")).string();
    bl::save_checkpoint(a, bl::model_checkpoint(*trained));
    auto fresh = d.make();
    (*fresh)(bl::BatchSampler::gather_rows(d.data.features, {0}), Seed(1));
    bl::restore(*fresh, bl::load_checkpoint(a));
    bl::save_checkpoint(b, bl::model_checkpoint(*fresh));
    files_ok += slurp(a) == slurp(b) && !slurp(a).empty();
    std::filesystem::remove(a);
    std::filesystem::remove(b);
  }
  return {traces_ok == 4 && files_ok == 4,
          format("%d/4 demo models with bit-identical traces (prefetch on/off), %d/4 byte-identical save/load/save",
                 traces_ok, files_ok)};
}

// --- 12: deep GP ----------------------------------------------------------------

Verdict criterion_deep_gp() {
  int improved = 0;
  bool finite = true;
  std::string text;
  const std::size_t window = 50;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    auto model = bl::models::deep_gp();
    const bl::Dataset data = bl::toy::regression_1d(64, seed);
    bl::ElboConfig cfg;
    cfg.batch_size = 64;
    cfg.max_steps = 1500;
    cfg.learning_rate = 1e-2;
    cfg.seed = seed;
    const auto trace = bl::fit(*model, data, cfg);
    double first = 0.0, last = 0.0;
    for (std::size_t i = 0; i < window; ++i) {
      first += trace[i].loss / window;
      last += trace[trace.size() - 1 - i].loss / window;
    }
    for (const auto& r : trace) finite = finite && std::isfinite(r.kl) && std::isfinite(r.loss);
    improved += last < first;
    text += format("%.2f->%.2f ", first, last);
  }
  return {improved == 10 && finite, format("%d/10 seeds end below their start (mean of first/last %zu steps: %s), KL finite: %s",
                                           improved, window, text.c_str(), finite ? "yes" : "no")};
}

}  // namespace

int main() {
  const std::vector<std::pair<const char*, std::function<Verdict()>>> criteria = {
      {"gradient suite", criterion_gradients},
      {"KL oracle", criterion_kl},
      {"drop-in equivalence", criterion_drop_in},
      {"sparse GP collapse", criterion_sparse_collapse},
      {"RFF convergence", criterion_rff},
      {"flow suite", criterion_flows},
      {"discretized likelihoods", criterion_discretized},
      {"conjugate recovery", criterion_conjugate},
      {"epistemic uncertainty", criterion_epistemic},
      {"flipout", criterion_flipout},
      {"determinism and persistence", criterion_determinism},
      {"deep GP end-to-end", criterion_deep_gp},
  };
  int failures = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    Verdict v;
    try {
      v = criteria[i].second();
    } catch (const std::exception& e) {
      v = {false, std::string("threw: ") + e.what()};
    }
    failures += !v.pass;
    std::printf("%s %2zu %s: %s\n", v.pass ? "PASS" : "FAIL", i + 1, criteria[i].first, v.detail.c_str());
    std::fflush(stdout);
  }
  return failures == 0 ? 0 : 1;
}
