#pragma once

// Meta-adversarial training (MAML, FOMAML, Reptile), online adaptation and
// the conventional baselines.
//
// The core routines are templates over a loss functor
//   ad::Var loss(std::span<const ad::Var> params, const Data& d)
// so they run unchanged on closed-form toy problems and on classifiers.

#include <chrono>
#include <cmath>
#include <functional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "amc/autodiff.hpp"
#include "amc/error.hpp"
#include "amc/models.hpp"
#include "amc/signals.hpp"
#include "amc/tasks.hpp"

namespace amc::meta {

using Params = std::vector<Tensor>;

enum class Algorithm : std::uint8_t { MAML, FOMAML, Reptile };

inline std::string algorithm_name(Algorithm a) {
  switch (a) {
    case Algorithm::MAML: return "maml";
    case Algorithm::FOMAML: return "fomaml";
    case Algorithm::Reptile: return "reptile";
  }
  return "?";
}

inline Algorithm parse_algorithm(const std::string& s) {
  if (s == "maml") return Algorithm::MAML;
  if (s == "fomaml") return Algorithm::FOMAML;
  if (s == "reptile") return Algorithm::Reptile;
  throw ConfigError("unknown meta algorithm '" + s + "'");
}

struct MetaConfig {
  Algorithm algorithm = Algorithm::MAML;
  double alpha = 0.01;  // inner learning rate
  double beta = 0.001;  // outer learning rate
  std::size_t inner_steps = 5;
  std::size_t outer_iters = 2000;
  std::size_t task_batch = 4;
  std::uint64_t seed = 1;
  // Episode sizes drawn from each sampled meta-train task, per class.
  std::size_t support_shots = 5;
  std::size_t query_shots = 15;
  // SGD applies theta - beta * g exactly; Adam rescales the meta-gradient.
  models::OptimizerKind outer_optimizer = models::OptimizerKind::SGD;

  void validate() const {
    if (!(alpha > 0.0)) throw ConfigError("meta: alpha must be > 0");
    if (!(beta > 0.0)) throw ConfigError("meta: beta must be > 0");
    if (inner_steps < 1) throw ConfigError("meta: inner_steps must be >= 1");
    if (outer_iters < 1) throw ConfigError("meta: outer_iters must be >= 1");
    if (task_batch < 1) throw ConfigError("meta: task_batch must be >= 1");
    if (support_shots < 1 || query_shots < 1) throw ConfigError("meta: episode shots must be >= 1");
  }
};

template <class Data>
struct Episode {
  Data support;
  Data query;
};

template <class Loss, class Data>
concept LossOn = requires(const Loss& l, std::span<const ad::Var> p, const Data& d) {
  { l(p, d) } -> std::convertible_to<ad::Var>;
};

namespace detail {

inline std::vector<ad::Var> bind(ad::Tape& t, const Params& p) {
  std::vector<ad::Var> v;
  v.reserve(p.size());
  for (const auto& x : p) v.push_back(t.variable(x));
  return v;
}

inline void axpy(Params& y, double a, const Params& x) {
  for (std::size_t i = 0; i < y.size(); ++i) {
    auto yd = y[i].data();
    auto xd = x[i].data();
    for (std::size_t j = 0; j < yd.size(); ++j) yd[j] += a * xd[j];
  }
}

inline Params zeros_like(const Params& p) {
  Params z;
  for (const auto& t : p) z.emplace_back(t.shape(), 0.0);
  return z;
}

inline void check_finite(double v, const char* what, std::size_t step) {
  if (!std::isfinite(v)) {
    throw DivergenceError(std::string(what) + ": non-finite loss at step " + std::to_string(step));
  }
}

}  // namespace detail

/// Value and gradient of the loss at p.
template <class Data, LossOn<Data> Loss>
std::pair<double, Params> value_and_grad(const Loss& loss, const Params& p, const Data& d) {
  ad::Tape t;
  auto v = detail::bind(t, p);
  ad::Var l = loss(std::span<const ad::Var>(v), d);
  const double lv = l.value()[0];
  if (!std::isfinite(lv)) return {lv, {}};
  return {lv, ad::gradients(l, v)};
}

template <class Data, LossOn<Data> Loss>
double evaluate_loss(const Loss& loss, const Params& p, const Data& d) {
  ad::Tape t;
  ad::Tape::NoGradGuard ng(t);
  auto v = detail::bind(t, p);
  return loss(std::span<const ad::Var>(v), d).value()[0];
}

/// k full-batch SGD steps on the support loss. Returns a copy; `trace`
/// receives the loss before each step.
template <class Data, LossOn<Data> Loss>
Params inner_adapt(const Loss& loss, const Params& theta, const Data& support, double alpha,
                   std::size_t k, std::vector<double>* trace = nullptr) {
  Params cur = theta;
  for (std::size_t s = 0; s < k; ++s) {
    auto [l, g] = value_and_grad(loss, cur, support);
    detail::check_finite(l, "inner_adapt", s);
    if (trace) trace->push_back(l);
    detail::axpy(cur, -alpha, g);
  }
  return cur;
}

struct MetaGradient {
  Params grad;
  double loss = 0.0;  // query loss after adaptation; support loss for Reptile
};

/// Exact gradient of L_query(adapt_k(theta)) with respect to theta, by
/// differentiating through the unrolled inner loop.
template <class Data, LossOn<Data> Loss>
MetaGradient maml_gradient(const Loss& loss, const Params& theta, const Episode<Data>& ep,
                           double alpha, std::size_t k) {
  ad::Tape t(true);
  auto th = detail::bind(t, theta);
  std::vector<ad::Var> cur = th;
  for (std::size_t s = 0; s < k; ++s) {
    ad::Var l = loss(std::span<const ad::Var>(cur), ep.support);
    detail::check_finite(l.value()[0], "maml inner loop", s);
    auto g = ad::grad(l, cur, true);
    for (std::size_t i = 0; i < cur.size(); ++i) cur[i] = ad::sub(cur[i], ad::scale(g[i], alpha));
  }
  ad::Var q = loss(std::span<const ad::Var>(cur), ep.query);
  detail::check_finite(q.value()[0], "maml query", k);
  return {ad::gradients(q, th), q.value()[0]};
}

/// Query gradient at the adapted weights, applied at theta.
template <class Data, LossOn<Data> Loss>
MetaGradient fomaml_gradient(const Loss& loss, const Params& theta, const Episode<Data>& ep,
                             double alpha, std::size_t k) {
  const Params adapted = inner_adapt(loss, theta, ep.support, alpha, k);
  auto [q, g] = value_and_grad(loss, adapted, ep.query);
  detail::check_finite(q, "fomaml query", k);
  return {std::move(g), q};
}

/// theta - theta', so that theta - beta * g moves toward the adapted weights.
template <class Data, LossOn<Data> Loss>
MetaGradient reptile_gradient(const Loss& loss, const Params& theta, const Episode<Data>& ep,
                              double alpha, std::size_t k) {
  const Params adapted = inner_adapt(loss, theta, ep.support, alpha, k);
  MetaGradient out{theta, evaluate_loss(loss, adapted, ep.support)};
  detail::check_finite(out.loss, "reptile", k);
  detail::axpy(out.grad, -1.0, adapted);
  return out;
}

template <class Data, LossOn<Data> Loss>
MetaGradient meta_gradient(Algorithm a, const Loss& loss, const Params& theta,
                           const Episode<Data>& ep, double alpha, std::size_t k) {
  switch (a) {
    case Algorithm::MAML: return maml_gradient(loss, theta, ep, alpha, k);
    case Algorithm::FOMAML: return fomaml_gradient(loss, theta, ep, alpha, k);
    case Algorithm::Reptile: return reptile_gradient(loss, theta, ep, alpha, k);
  }
  throw ValueError("meta_gradient: unknown algorithm");
}

/// Mean meta-gradient over a task batch, accumulated in batch order.
template <class Data, LossOn<Data> Loss>
MetaGradient batch_meta_gradient(Algorithm a, const Loss& loss, const Params& theta,
                                 std::span<const Episode<Data>> batch, double alpha,
                                 std::size_t k) {
  if (batch.empty()) throw ValueError("meta: empty task batch");
  MetaGradient acc{detail::zeros_like(theta), 0.0};
  for (const auto& ep : batch) {
    auto g = meta_gradient(a, loss, theta, ep, alpha, k);
    detail::axpy(acc.grad, 1.0, g.grad);
    acc.loss += g.loss;
  }
  const double inv = 1.0 / static_cast<double>(batch.size());
  for (auto& t : acc.grad) {
    for (auto& v : t.data()) v *= inv;
  }
  acc.loss *= inv;
  return acc;
}

/// One plain outer update theta - beta * mean meta-gradient.
template <class Data, LossOn<Data> Loss>
Params outer_step(Algorithm a, const Loss& loss, const Params& theta,
                  std::span<const Episode<Data>> batch, double alpha, std::size_t k,
                  double beta) {
  Params out = theta;
  detail::axpy(out, -beta, batch_meta_gradient(a, loss, theta, batch, alpha, k).grad);
  return out;
}

template <class Data, LossOn<Data> Loss>
Params maml_outer_step(const Loss& loss, const Params& theta, std::span<const Episode<Data>> b,
                       double alpha, std::size_t k, double beta) {
  return outer_step(Algorithm::MAML, loss, theta, b, alpha, k, beta);
}

template <class Data, LossOn<Data> Loss>
Params fomaml_outer_step(const Loss& loss, const Params& theta, std::span<const Episode<Data>> b,
                         double alpha, std::size_t k, double beta) {
  return outer_step(Algorithm::FOMAML, loss, theta, b, alpha, k, beta);
}

/// theta + beta * mean(theta' - theta).
template <class Data, LossOn<Data> Loss>
Params reptile_outer_step(const Loss& loss, const Params& theta, std::span<const Episode<Data>> b,
                          double alpha, std::size_t k, double beta) {
  return outer_step(Algorithm::Reptile, loss, theta, b, alpha, k, beta);
}

class MetaDivergence : public DivergenceError {
 public:
  MetaDivergence(const std::string& what, std::vector<double> trace)
      : DivergenceError(what), trace(std::move(trace)) {}
  std::vector<double> trace;
};

template <class P>
struct MetaTrainResult {
  P params;
  std::vector<double> trace;  // meta-loss per outer iteration
  double seconds = 0.0;
};

/// `sample(task, rng)` draws an episode of meta-train task `task`; tasks are
/// picked uniformly with replacement. n = 0 returns init.
template <class Data, LossOn<Data> Loss, class Sampler>
MetaTrainResult<Params> meta_train(const Loss& loss, const Params& init, std::size_t num_tasks,
                                   const Sampler& sample, const MetaConfig& cfg,
                                   std::size_t outer_iters) {
  if (num_tasks == 0) throw ValueError("meta_train: no meta-train tasks");
  const auto t0 = std::chrono::steady_clock::now();
  MetaTrainResult<Params> r{init, {}, 0.0};
  std::size_t n = 0;
  for (const auto& t : init) n += t.size();
  models::Optimizer opt({cfg.outer_optimizer, cfg.beta}, n);
  std::mt19937_64 rng(cfg.seed);
  std::vector<Episode<Data>> batch;
  std::vector<double> flat_theta, flat_grad;
  for (std::size_t it = 0; it < outer_iters; ++it) {
    batch.clear();
    for (std::size_t b = 0; b < cfg.task_batch; ++b) {
      const std::size_t task = rng() % num_tasks;
      batch.push_back(sample(task, rng));
    }
    MetaGradient g;
    try {
      g = batch_meta_gradient(cfg.algorithm, loss, r.params,
                              std::span<const Episode<Data>>(batch), cfg.alpha,
                              cfg.inner_steps);
    } catch (const DivergenceError& e) {
      throw MetaDivergence("meta_train: iteration " + std::to_string(it) + ": " + e.what(),
                           r.trace);
    }
    r.trace.push_back(g.loss);
    flat_theta = models::flatten(r.params);
    flat_grad = models::flatten(g.grad);
    opt.step(flat_theta, flat_grad);
    std::size_t off = 0;
    for (auto& t : r.params) {
      std::copy_n(flat_theta.begin() + off, t.size(), t.data().begin());
      off += t.size();
    }
  }
  r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return r;
}

// ---------------------------------------------------------------------------
// Classifier instantiation

struct Batch {
  Tensor x;  // [n, 2, L]
  std::vector<std::size_t> y;
  std::size_t size() const { return y.size(); }
  bool empty() const { return y.empty(); }
};

inline Batch batch_of(const signals::LabeledDataset& ds) {
  return {signals::to_tensor(ds), signals::labels_of(ds)};
}

inline Batch gather(const Batch& b, std::span<const std::size_t> idx) {
  Batch out{models::gather(b.x, idx), {}};
  out.y.reserve(idx.size());
  for (auto i : idx) out.y.push_back(b.y.at(i));
  return out;
}

/// Mean cross-entropy of a classifier; inputs enter as constants.
struct ModelLoss {
  models::Architecture arch;
  ad::Var operator()(std::span<const ad::Var> p, const Batch& b) const {
    ad::Var x = p[0].tape()->constant(b.x);
    return models::loss(arch, p, x, b.y);
  }
};

inline Params params_of(const models::ModelParams& m) { return models::unflatten(m.arch, m.theta); }

inline models::ModelParams model_of(const models::Architecture& arch, const Params& p) {
  return {arch, models::flatten(p)};
}

/// `shots` frames per class drawn without replacement, class-major.
inline std::vector<std::size_t> draw_shots(std::span<const std::size_t> labels,
                                           std::size_t num_classes, std::size_t shots,
                                           std::mt19937_64& rng) {
  std::vector<std::vector<std::size_t>> by(num_classes);
  for (std::size_t i = 0; i < labels.size(); ++i) by.at(labels[i]).push_back(i);
  std::vector<std::size_t> out;
  out.reserve(shots * num_classes);
  for (std::size_t c = 0; c < num_classes; ++c) {
    auto& idx = by[c];
    if (idx.size() < shots) {
      throw ValueError("shot count " + std::to_string(shots) + " exceeds the " +
                       std::to_string(idx.size()) + " support frames of class " +
                       std::to_string(c));
    }
    for (std::size_t i = 0; i < shots; ++i) {
      std::swap(idx[i], idx[i + rng() % (idx.size() - i)]);
      out.push_back(idx[i]);
    }
  }
  return out;
}

/// Per-class shot count of a class-balanced batch; 0 when empty.
inline std::size_t shots_of(const Batch& b, std::size_t num_classes) {
  return b.empty() ? 0 : b.size() / num_classes;
}

/// Meta-training over the library's meta-train tasks. Each episode draws
/// cfg.support_shots per class from the task's support set and
/// cfg.query_shots per class from its query set.
inline MetaTrainResult<models::ModelParams> meta_train(const models::ModelParams& init,
                                                       const tasks::TaskLibrary& lib,
                                                       const MetaConfig& cfg) {
  cfg.validate();
  init.validate();
  if (lib.meta_train.empty()) throw ValueError("meta_train: no meta-train tasks");
  std::vector<Episode<Batch>> pools;
  for (auto k : lib.meta_train) {
    const auto& t = lib.tasks.at(k);
    pools.push_back({batch_of(t.support), batch_of(t.query)});
  }
  const std::size_t C = init.arch.num_classes;
  auto sample = [&](std::size_t task, std::mt19937_64& rng) {
    const auto& p = pools[task];
    auto si = draw_shots(p.support.y, C, cfg.support_shots, rng);
    Episode<Batch> ep{gather(p.support, si), {}};
    if (cfg.algorithm != Algorithm::Reptile) {
      auto qi = draw_shots(p.query.y, C, cfg.query_shots, rng);
      ep.query = gather(p.query, qi);
    }
    return ep;
  };
  auto r = meta_train<Batch>(ModelLoss{init.arch}, params_of(init), pools.size(), sample, cfg,
                             cfg.outer_iters);
  return {model_of(init.arch, r.params), std::move(r.trace), r.seconds};
}

struct AdaptResult {
  models::ModelParams model;
  std::vector<double> trace;  // support loss before each inner step
  std::size_t shots = 0;
  double seconds = 0.0;
};

/// The online phase: plain inner-loop adaptation on the few shots given.
/// An empty support returns theta unchanged.
inline AdaptResult online_adapt(const models::ModelParams& theta, const Batch& support,
                                double alpha, std::size_t k) {
  const auto t0 = std::chrono::steady_clock::now();
  AdaptResult r{theta, {}, shots_of(support, theta.arch.num_classes), 0.0};
  if (!support.empty()) {
    auto p = inner_adapt(ModelLoss{theta.arch}, params_of(theta), support, alpha, k, &r.trace);
    r.model = model_of(theta.arch, p);
  }
  r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return r;
}

/// Conventional training: the Transfer-Clean and Transfer-Adversarial
/// baselines differ only in the data passed here.
inline models::TrainResult transfer_train(const models::ModelParams& init,
                                          const signals::LabeledDataset& ds,
                                          const models::TrainConfig& cfg) {
  if (ds.empty()) throw ValueError("transfer_train: empty dataset");
  return models::train(init, ds, cfg);
}

/// Support and query frames of the given tasks, concatenated in order.
inline signals::LabeledDataset adversarial_training_set(const tasks::TaskLibrary& lib,
                                                        std::span<const std::size_t> task_idx) {
  if (task_idx.empty()) throw ValueError("adversarial_training_set: no tasks");
  signals::LabeledDataset out = signals::empty_like(lib.tasks.at(task_idx[0]).support);
  for (auto k : task_idx) {
    for (const auto* half : {&lib.tasks.at(k).support, &lib.tasks.at(k).query}) {
      out.samples.insert(out.samples.end(), half->samples.begin(), half->samples.end());
      out.labels.insert(out.labels.end(), half->labels.begin(), half->labels.end());
      out.snr_db.insert(out.snr_db.end(), half->snr_db.begin(), half->snr_db.end());
    }
  }
  return out;
}

/// Scratch baseline: a fresh initialization, trained only on the shots.
inline AdaptResult scratch_train(const models::Architecture& arch, std::uint64_t seed,
                                 const Batch& shots, const models::TrainConfig& cfg) {
  const auto t0 = std::chrono::steady_clock::now();
  AdaptResult r{models::init_model(arch, seed), {}, shots_of(shots, arch.num_classes), 0.0};
  if (!shots.empty()) {
    auto tr = models::train(r.model, shots.x, shots.y, cfg);
    r.model = std::move(tr.model);
    r.trace = std::move(tr.history);
  }
  r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return r;
}

}  // namespace amc::meta
