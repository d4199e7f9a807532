#pragma once

// Command-line front end. Every flag maps onto a config key of the same name
// (dashes become underscores); flags override values from --config.

#include <CLI11.hpp>

#include <cstdio>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "bayes_layers/bayes_layers.hpp"

namespace bayes_layers::cli {

/// Bad flags or config values: exit code 2.
class UsageError : public std::runtime_error {
  using std::runtime_error::runtime_error;
};

enum class Task { kBnn = 1, kDeepGp = 2, kFlow = 3, kLstm = 4 };

inline const char* task_name(Task t) {
  switch (t) {
    case Task::kBnn: return "bnn";
    case Task::kDeepGp: return "deep-gp";
    case Task::kFlow: return "flow";
    case Task::kLstm: return "lstm";
  }
  return "?";
}

inline std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.10g", v);
  return buf;
}

inline std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ','))
    if (!detail::trim(item).empty()) out.push_back(detail::trim(item));
  return out;
}

/// Typed settings for one run. Construction validates every value so bad
/// input is reported before any work starts.
struct Settings {
  Task task = Task::kBnn;
  ElboConfig elbo;
  std::size_t log_every = 1;
  std::size_t num_examples = 128;
  bool normalize = false;
  std::vector<std::string> features, targets;
  std::string data, checkpoint;
  // architecture
  std::size_t hidden_units = 32;
  double prior_scale = 1.0;
  Estimator estimator = Estimator::kReparameterization;
  std::size_t num_inducing = 8;
  std::size_t couplings = 4;
  std::size_t vocab = 4;
  std::size_t sequence_length = 12;

  static Settings from(Task task, const Config& c) {
    Settings s;
    s.task = task;
    try {
      const bool gp = task == Task::kDeepGp, flow = task == Task::kFlow, lstm = task == Task::kLstm;
      s.elbo.seed = c.get_uint("seed", 0);
      s.elbo.max_steps = c.get_uint("steps", gp ? 1500 : flow ? 1000 : lstm ? 500 : 2000);
      s.elbo.learning_rate = c.get_double("learning_rate", flow ? 3e-3 : 1e-2);
      if (c.has("final_learning_rate")) {
        s.elbo.final_learning_rate = c.get_double("final_learning_rate", 0.0);
      } else if (task == Task::kBnn) {
        s.elbo.final_learning_rate = 1e-3;
      }
      s.elbo.batch_size = c.get_uint("batch_size", gp ? 64 : flow ? 128 : 32);
      s.elbo.mc_samples = c.get_uint("mc_samples", 1);
      s.elbo.kl_scale = KlScale::parse(c.get_string("kl_scale", "one_over_n"));
      s.elbo.prefetch_capacity = c.get_uint("prefetch_capacity", 4);
      s.log_every = c.get_uint("log_every", 1);
      s.num_examples = c.get_uint("num_examples", gp ? 64 : flow ? 512 : lstm ? 256 : 128);
      s.normalize = c.get_bool("normalize", false);
      s.features = split_list(c.get_string("features", flow ? "x1,x2" : "x"));
      s.targets = split_list(c.get_string("targets", "y"));
      s.data = c.get_string("data", "");
      s.checkpoint = c.get_string("checkpoint", std::string(task_name(task)) + ".ckpt");
      s.hidden_units = c.get_uint("hidden_units", gp ? 2 : flow ? 32 : lstm ? 16 : 32);
      s.prior_scale = c.get_double("prior_scale", 1.0);
      const std::string est = c.get_string("estimator", "reparameterization");
      if (est == "flipout") {
        s.estimator = Estimator::kFlipout;
      } else if (est != "reparameterization") {
        throw UsageError("estimator must be reparameterization or flipout, got '" + est + "'");
      }
      s.num_inducing = c.get_uint("num_inducing", 8);
      s.couplings = c.get_uint("couplings", 4);
      s.vocab = c.get_uint("vocab", 4);
      s.sequence_length = c.get_uint("sequence_length", 12);
    } catch (const Error& e) {
      throw UsageError(e.message());
    }
    if (s.elbo.mc_samples == 0 || s.elbo.batch_size == 0 || s.log_every == 0 || s.num_examples == 0 ||
        s.hidden_units == 0 || s.num_inducing == 0 || s.couplings == 0 || s.vocab < 2 || s.sequence_length == 0) {
      throw UsageError("counts must be positive (vocab at least 2)");
    }
    if (!(s.elbo.learning_rate > 0) || (s.elbo.final_learning_rate && !(*s.elbo.final_learning_rate > 0))) {
      throw UsageError("learning rates must be positive");
    }
    if (s.features.empty()) throw UsageError("features must name at least one column");
    return s;
  }
};

// --- models and data ---------------------------------------------------------

inline std::shared_ptr<Sequential> build_model(const Settings& s) {
  switch (s.task) {
    case Task::kBnn: {
      models::BnnOptions o;
      o.hidden_units = s.hidden_units;
      o.prior_scale = s.prior_scale;
      o.estimator = s.estimator;
      return models::bnn_regression(o);
    }
    case Task::kDeepGp: {
      models::DeepGpOptions o;
      o.hidden_units = s.hidden_units;
      o.num_inducing = s.num_inducing;
      return models::deep_gp(o);
    }
    case Task::kFlow: {
      models::FlowOptions o;
      o.dims = s.features.size();
      o.num_couplings = s.couplings;
      o.hidden_sizes = {s.hidden_units, s.hidden_units};
      return models::flow_density(o);
    }
    case Task::kLstm: {
      models::LstmOptions o;
      o.vocab = s.vocab;
      o.hidden_units = s.hidden_units;
      o.prior_scale = s.prior_scale;
      return models::bayesian_lstm(o);
    }
  }
  throw UsageError("unknown task");
}

/// Rows of integer tokens -> one-hot inputs [n, T, vocab] and next-token
/// targets [n, T] (teacher forcing).
inline Dataset sequences_from_rows(const Tensor& rows, std::size_t vocab) {
  const std::size_t n = rows.dim(0), width = rows.dim(1);
  if (width < 2) fail(ErrorKind::kShape, "sequences need at least two tokens");
  const std::size_t len = width - 1;
  std::vector<double> onehot(n * len * vocab, 0.0), next(n * len);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t t = 0; t < width; ++t) {
      const double v = rows[i * width + t];
      if (v != std::floor(v) || v < 0 || v >= static_cast<double>(vocab)) {
        fail(ErrorKind::kDomain, "token " + fmt(v) + " in row " + std::to_string(i + 1) + " is not in [0, " +
                                     std::to_string(vocab) + ")");
      }
      if (t < len) onehot[(i * len + t) * vocab + static_cast<std::size_t>(v)] = 1.0;
      if (t > 0) next[i * len + t - 1] = v;
    }
  return {Tensor({n, len, vocab}, std::move(onehot)), Tensor({n, len}, std::move(next)), {}, {}};
}

inline Dataset load_dataset(const Settings& s) {
  switch (s.task) {
    case Task::kBnn:
    case Task::kDeepGp:
      if (s.data.empty()) return toy::regression_1d(s.num_examples, s.elbo.seed);
      return load_csv(s.data, s.features, s.targets, s.normalize);
    case Task::kFlow: {
      if (s.data.empty()) return toy::two_moons(s.num_examples, s.elbo.seed);
      Dataset d = load_csv(s.data, s.features, {}, s.normalize);
      d.targets = d.features;
      d.target_norm.reset();
      return d;
    }
    case Task::kLstm: {
      if (s.data.empty()) return toy::token_sequences(s.num_examples, s.sequence_length, s.vocab, s.elbo.seed);
      std::ifstream in(s.data);
      if (!in) fail(ErrorKind::kIo, "cannot open '" + s.data + "'");
      std::string header;
      std::getline(in, header);
      in.seekg(0);
      return sequences_from_rows(load_csv(in, detail::split_csv_line(header), {}, false, s.data).features, s.vocab);
    }
  }
  throw UsageError("unknown task");
}

/// Shape of a single-example input, used to create parameters before a
/// checkpoint is restored.
inline Tensor probe_input(const Settings& s) {
  switch (s.task) {
    case Task::kFlow: return Tensor::zeros({1, s.features.size()});
    case Task::kLstm: return Tensor::zeros({1, 1, s.vocab});
    default: return Tensor::zeros({1, 1});
  }
}

// --- checkpoint metadata -------------------------------------------------------

inline void put_meta(Checkpoint& c, const std::string& key, std::vector<double> v) {
  c.push_back({"meta/" + key, Tensor::vector(std::move(v))});
}

inline Checkpoint with_metadata(const Layer& model, const Settings& s, const Dataset& d) {
  Checkpoint c = model_checkpoint(model);
  put_meta(c, "task", {static_cast<double>(s.task)});
  put_meta(c, "hidden_units", {static_cast<double>(s.hidden_units)});
  put_meta(c, "num_inducing", {static_cast<double>(s.num_inducing)});
  put_meta(c, "couplings", {static_cast<double>(s.couplings)});
  put_meta(c, "vocab", {static_cast<double>(s.vocab)});
  put_meta(c, "dims", {static_cast<double>(d.features.rank() == 2 ? d.features.dim(1) : 1)});
  put_meta(c, "estimator", {s.estimator == Estimator::kFlipout ? 1.0 : 0.0});
  if (d.feature_norm) {
    put_meta(c, "feature_mean", d.feature_norm->mean);
    put_meta(c, "feature_std", d.feature_norm->stddev);
  }
  if (d.target_norm) {
    put_meta(c, "target_mean", d.target_norm->mean);
    put_meta(c, "target_std", d.target_norm->stddev);
  }
  return c;
}

inline double meta_scalar(const Checkpoint& c, const std::string& key) {
  const CheckpointEntry* e = find_entry(c, "meta/" + key);
  if (e == nullptr || e->value.size() != 1) fail(ErrorKind::kParse, "checkpoint lacks metadata '" + key + "'");
  return e->value[0];
}

inline std::optional<Standardization> meta_norm(const Checkpoint& c, const std::string& which) {
  const CheckpointEntry* m = find_entry(c, "meta/" + which + "_mean");
  const CheckpointEntry* s = find_entry(c, "meta/" + which + "_std");
  if (m == nullptr || s == nullptr) return std::nullopt;
  return Standardization{m->value.values(), s->value.values()};
}

struct LoadedModel {
  Settings settings;
  std::shared_ptr<Sequential> model;
  std::optional<Standardization> feature_norm, target_norm;
};

inline LoadedModel load_model(const std::string& path) {
  const Checkpoint ckpt = load_checkpoint(path);
  const auto code = static_cast<int>(meta_scalar(ckpt, "task"));
  if (code < 1 || code > 4) fail(ErrorKind::kParse, path + ": unknown task code " + std::to_string(code));
  LoadedModel out;
  Settings& s = out.settings;
  s.task = static_cast<Task>(code);
  s.hidden_units = static_cast<std::size_t>(meta_scalar(ckpt, "hidden_units"));
  s.num_inducing = static_cast<std::size_t>(meta_scalar(ckpt, "num_inducing"));
  s.couplings = static_cast<std::size_t>(meta_scalar(ckpt, "couplings"));
  s.vocab = static_cast<std::size_t>(meta_scalar(ckpt, "vocab"));
  s.features.assign(static_cast<std::size_t>(meta_scalar(ckpt, "dims")), "x");
  s.estimator = meta_scalar(ckpt, "estimator") == 1.0 ? Estimator::kFlipout : Estimator::kReparameterization;
  out.model = build_model(s);
  (*out.model)(probe_input(s), Seed(0));
  restore(*out.model, ckpt);
  out.feature_norm = meta_norm(ckpt, "feature");
  out.target_norm = meta_norm(ckpt, "target");
  return out;
}

// --- subcommands -------------------------------------------------------------

inline int train(Task task, const Config& config, std::ostream& out) {
  const Settings s = Settings::from(task, config);
  const Dataset data = load_dataset(s);
  auto model = build_model(s);
  if (s.elbo.max_steps == 0) {
    // initialize exactly as the first training step would
    (*model)(BatchSampler(data, std::min(s.elbo.batch_size, data.size()), s.elbo.seed).at(0).x,
             Seed::for_step(s.elbo.seed, 0).derive(0));
  } else {
    fit(*model, data, s.elbo, [&](const TrainRecord& r) {
      if (r.step % s.log_every == 0 || r.step + 1 == s.elbo.max_steps) {
        out << "step=" << r.step << " loss=" << fmt(r.loss) << " kl=" << fmt(r.kl) << "\n";
      }
    });
  }
  save_checkpoint(s.checkpoint, with_metadata(*model, s, data));
  return 0;
}

/// Moment-matched predictive mean and stddev over MC forward passes.
inline std::pair<Tensor, Tensor> predictive_moments(Layer& model, const Tensor& x, std::size_t samples,
                                                    std::uint64_t seed) {
  std::vector<double> m1(x.dim(0), 0.0), m2(x.dim(0), 0.0);
  for (std::size_t s = 0; s < samples; ++s) {
    const Value v = model(x, Seed(seed).derive(0x9ED1C7, s));
    if (!v.is_random()) fail(ErrorKind::kInvalidArgument, "model output has no distribution");
    const Tensor mu = v.random().distribution().mean(), sd = v.random().distribution().stddev();
    for (std::size_t i = 0; i < m1.size(); ++i) {
      m1[i] += mu[i];
      m2[i] += mu[i] * mu[i] + sd[i] * sd[i];
    }
  }
  const double n = static_cast<double>(samples);
  std::vector<double> sd(m1.size());
  for (std::size_t i = 0; i < m1.size(); ++i) {
    m1[i] /= n;
    sd[i] = std::sqrt(std::max(m2[i] / n - m1[i] * m1[i], 0.0));
  }
  return {Tensor({m1.size(), 1}, m1), Tensor({m1.size(), 1}, sd)};
}

inline Tensor query_points(const Config& c) {
  try {
    if (c.has("data")) {
      const auto cols = split_list(c.get_string("features", "x"));
      return load_csv(c.get_string("data", ""), cols, {}, false).features;
    }
    const double lo = c.get_double("x_min", -3.0), hi = c.get_double("x_max", 3.0);
    const std::size_t n = c.get_uint("points", 61);
    if (n == 0 || !(hi >= lo)) throw UsageError("need points >= 1 and x_max >= x_min");
    std::vector<double> xs(n);
    for (std::size_t i = 0; i < n; ++i) xs[i] = n == 1 ? lo : lo + (hi - lo) * static_cast<double>(i) / static_cast<double>(n - 1);
    return Tensor({n, 1}, std::move(xs));
  } catch (const Error& e) {
    if (e.kind() == ErrorKind::kIo || e.kind() == ErrorKind::kParse) throw;
    throw UsageError(e.message());
  }
}

inline int predict(const Config& c, std::ostream& out) {
  LoadedModel m = load_model(c.get_string("checkpoint", "bnn.ckpt"));
  if (m.settings.task != Task::kBnn && m.settings.task != Task::kDeepGp) {
    fail(ErrorKind::kUnsupported, std::string("predict needs a bnn or deep-gp checkpoint, got ") +
                                      task_name(m.settings.task));
  }
  const Tensor x = query_points(c);
  if (x.dim(1) != 1) fail(ErrorKind::kShape, "predict handles one input column");
  const Tensor xin = m.feature_norm ? m.feature_norm->apply(x) : x;
  auto [mean, sd] = predictive_moments(*m.model, xin, c.get_uint("samples", 200), c.get_uint("seed", 0));
  if (m.target_norm) {
    mean = m.target_norm->invert(mean);
    sd = mul(sd, Tensor::vector(m.target_norm->stddev));
  }
  out << "x,mean,stddev\n";
  for (std::size_t i = 0; i < x.dim(0); ++i) out << fmt(x[i]) << "," << fmt(mean[i]) << "," << fmt(sd[i]) << "\n";
  return 0;
}

inline int sample_cmd(const Config& c, std::ostream& out) {
  LoadedModel m = load_model(c.get_string("checkpoint", "flow.ckpt"));
  const std::size_t count = c.get_uint("count", 10);
  const Seed seed(c.get_uint("seed", 0));
  switch (m.settings.task) {
    case Task::kFlow: {
      const std::size_t d = m.settings.features.size();
      const Value v = (*m.model)(Tensor::zeros({count, d}), seed);
      const Tensor pts = m.feature_norm ? m.feature_norm->invert(v.tensor()) : v.tensor();
      for (std::size_t j = 0; j < d; ++j) out << (j ? "," : "") << "x" << j + 1;
      out << "\n";
      for (std::size_t i = 0; i < count; ++i) {
        for (std::size_t j = 0; j < d; ++j) out << (j ? "," : "") << fmt(pts[i * d + j]);
        out << "\n";
      }
      return 0;
    }
    case Task::kLstm: {
      // One posterior draw per sequence; tokens are generated left to right by
      // re-running the prefix, so earlier positions keep their values.
      const std::size_t length = c.get_uint("length", 12), v = m.settings.vocab;
      for (std::size_t i = 0; i < count; ++i) {
        const Seed s = seed.derive(i);
        std::vector<std::size_t> tokens{static_cast<std::size_t>(uniform(s.derive(1), 1)[0] * static_cast<double>(v)) % v};
        while (tokens.size() < length) {
          std::vector<double> onehot(tokens.size() * v, 0.0);
          for (std::size_t t = 0; t < tokens.size(); ++t) onehot[t * v + tokens[t]] = 1.0;
          const Value next = (*m.model)(Tensor({1, tokens.size(), v}, std::move(onehot)), s);
          tokens.push_back(static_cast<std::size_t>(next.tensor()[tokens.size() - 1]));
        }
        for (std::size_t t = 0; t < tokens.size(); ++t) out << (t ? " " : "") << tokens[t];
        out << "\n";
      }
      return 0;
    }
    case Task::kBnn:
    case Task::kDeepGp: {
      const Tensor x = query_points(c);
      const Tensor xin = m.feature_norm ? m.feature_norm->apply(x) : x;
      std::vector<Tensor> draws;
      for (std::size_t k = 0; k < count; ++k) {
        Tensor f = (*m.model)(xin, seed.derive(k)).random().distribution().mean();
        draws.push_back(m.target_norm ? m.target_norm->invert(f) : f);
      }
      out << "x";
      for (std::size_t k = 0; k < count; ++k) out << ",draw_" << k;
      out << "\n";
      for (std::size_t i = 0; i < x.dim(0); ++i) {
        out << fmt(x[i]);
        for (const auto& f : draws) out << "," << fmt(f[i]);
        out << "\n";
      }
      return 0;
    }
  }
  return 1;
}

// --- argument parsing ----------------------------------------------------------

struct Key {
  std::string name, help;
};

inline const std::vector<Key>& training_keys() {
  static const std::vector<Key> keys = {
      {"steps", "number of optimizer steps"},
      {"learning_rate", "Adam step size"},
      {"final_learning_rate", "decay the step size geometrically to this value"},
      {"batch_size", "minibatch size"},
      {"mc_samples", "Monte Carlo samples per step"},
      {"kl_scale", "one_over_n or a constant weight for the regularizer sum"},
      {"prefetch_capacity", "batches buffered by the loader thread (0 loads inline)"},
      {"log_every", "print every k-th step"},
      {"num_examples", "size of the synthetic dataset when --data is absent"},
      {"features", "comma-separated feature columns"},
      {"hidden_units", "hidden width"},
  };
  return keys;
}

inline std::vector<Key> task_keys(Task t) {
  switch (t) {
    case Task::kBnn: return {{"targets", "comma-separated target columns"}, {"prior_scale", "weight prior stddev"},
                             {"estimator", "reparameterization or flipout"}};
    case Task::kDeepGp: return {{"targets", "comma-separated target columns"}, {"num_inducing", "inducing points per layer"}};
    case Task::kFlow: return {{"couplings", "number of coupling layers"}};
    case Task::kLstm: return {{"vocab", "number of token values"}, {"sequence_length", "synthetic sequence length"},
                              {"prior_scale", "weight prior stddev"}};
  }
  return {};
}

inline std::string flag_for(const std::string& key) {
  std::string f = "--" + key;
  std::replace(f.begin(), f.end(), '_', '-');
  return f;
}

/// Runs the CLI; returns the process exit code.
inline int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Bayesian layers: train and query small variational models"};
  app.name("bayes-layers");
  app.require_subcommand(1);

  std::map<std::string, std::string> values;
  std::map<CLI::App*, std::vector<std::string>> keys_of;
  bool normalize = false;
  auto add_key = [&](CLI::App* sub, const std::string& key, const std::string& help) {
    sub->add_option(flag_for(key), values[key], help);
    keys_of[sub].push_back(key);
  };
  auto add_common = [&](CLI::App* sub) {
    add_key(sub, "config", "key = value config file");
    add_key(sub, "data", "CSV input");
    add_key(sub, "checkpoint", "checkpoint path");
    add_key(sub, "seed", "global seed");
  };

  std::map<CLI::App*, Task> trainers;
  for (Task t : {Task::kBnn, Task::kDeepGp, Task::kFlow, Task::kLstm}) {
    const std::string name = std::string("train-") + task_name(t);
    CLI::App* sub = app.add_subcommand(name, std::string("train the ") + task_name(t) + " demo model");
    add_common(sub);
    for (const auto& k : training_keys()) add_key(sub, k.name, k.help);
    for (const auto& k : task_keys(t)) add_key(sub, k.name, k.help);
    sub->add_flag("--normalize", normalize, "standardize CSV columns");
    trainers[sub] = t;
  }
  CLI::App* pred = app.add_subcommand("predict", "predictive mean and stddev as CSV x,mean,stddev");
  add_common(pred);
  for (const auto& k : std::vector<Key>{{"x_min", "grid start"}, {"x_max", "grid end"}, {"points", "grid size"},
                                        {"samples", "Monte Carlo passes"}, {"features", "input column of --data"}}) {
    add_key(pred, k.name, k.help);
  }
  CLI::App* samp = app.add_subcommand("sample", "draw samples from a trained model");
  add_common(samp);
  for (const auto& k : std::vector<Key>{{"count", "number of samples"}, {"length", "tokens per sequence"},
                                        {"x_min", "grid start"}, {"x_max", "grid end"}, {"points", "grid size"},
                                        {"features", "input column of --data"}}) {
    add_key(samp, k.name, k.help);
  }

  if (!args.empty() && !args[0].empty() && args[0][0] != '-') {
    const auto subs = app.get_subcommands([&](CLI::App* a) { return a->get_name() == args[0]; });
    if (subs.empty()) {
      err << "error: unknown subcommand '" << args[0] << "'\n" << app.help();
      return 2;
    }
  }
  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::CallForHelp& e) {
    out << app.help();
    return 0;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n" << app.help();
    return 2;
  }

  CLI::App* sub = app.get_subcommands().front();
  try {
    Config config;
    if (sub->get_option("--config")->count() > 0) config = Config::load(values["config"]);
    for (const auto& key : keys_of[sub]) {
      if (key != "config" && sub->get_option(flag_for(key))->count() > 0) config.set(key, values[key]);
    }
    if (normalize) config.set("normalize", "true");
    if (sub == pred || sub == samp) {
      try {
        for (const char* k : {"seed", "points", "samples", "count", "length"}) config.get_uint(k, 0);
        for (const char* k : {"x_min", "x_max"}) config.get_double(k, 0.0);
      } catch (const Error& e) {
        throw UsageError(e.message());
      }
    }
    if (auto it = trainers.find(sub); it != trainers.end()) return train(it->second, config, out);
    if (sub == pred) return predict(config, out);
    return sample_cmd(config, out);
  } catch (const UsageError& e) {
    err << "error: " << e.what() << "\n" << sub->help();
    return 2;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return 1;
  }
}

}  // namespace bayes_layers::cli
