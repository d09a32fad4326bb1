#pragma once

// Adversarial perturbations under L_p budgets: FGSM, PGD, MIM, C&W-L2 and a
// universal principal-component attack, plus PSR power bookkeeping and the
// AMCP perturbation cache.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "amc/autodiff.hpp"
#include "amc/error.hpp"
#include "amc/io.hpp"
#include "amc/models.hpp"
#include "amc/signals.hpp"

namespace amc::attacks {

/// White-box access to a classifier: logits and vector-Jacobian products.
class Classifier {
 public:
  virtual ~Classifier() = default;
  virtual std::size_t num_classes() const = 0;
  /// [B, C] logits for a [B, 2, L] batch.
  virtual Tensor logits(const Tensor& x) const = 0;
  /// Cotangent for a block of logits whose first row is frame `first` of x.
  using Cotangent = std::function<Tensor(const Tensor& z, std::size_t first)>;
  /// d/dx sum_r <c_r, z_r(x)> where c = cot(z(x)) is computed from the logits.
  /// Implementations may evaluate x in blocks and call cot once per block.
  virtual Tensor pullback(const Tensor& x, const Cotangent& cot) const = 0;
};

class ModelClassifier final : public Classifier {
 public:
  explicit ModelClassifier(const models::ModelParams& m, std::size_t chunk = 256)
      : model_(m), params_(models::unflatten(m.arch, m.theta)), chunk_(chunk) {}

  std::size_t num_classes() const override { return model_.arch.num_classes; }

  Tensor logits(const Tensor& x) const override { return models::logits(model_, x, chunk_); }

  Tensor pullback(const Tensor& x, const Cotangent& cot) const override {
    models::check_input(model_.arch, x);
    const std::size_t n = x.dim(0), stride = x.size() / std::max<std::size_t>(n, 1);
    Tensor out(x.shape());
    for (std::size_t start = 0; start < n; start += chunk_) {
      const std::size_t len = std::min(chunk_, n - start);
      ad::Tape tape;
      std::vector<ad::Var> p;
      for (const auto& t : params_) p.push_back(tape.constant(t));
      Tensor xb(Shape{len, x.dim(1), x.dim(2)},
                std::vector<double>(x.data().begin() + start * stride,
                                    x.data().begin() + (start + len) * stride));
      ad::Var xv = tape.variable(std::move(xb));
      ad::Var z = models::forward(model_.arch, p, xv);
      Tensor c = cot(z.value(), start);
      if (c.shape() != z.shape()) throw ShapeError("pullback: cotangent shape mismatch");
      ad::Var root = ad::sum(ad::mul(z, tape.constant(std::move(c))));
      const Tensor g = ad::gradients(root, {xv})[0];
      std::copy(g.data().begin(), g.data().end(), out.data().begin() + start * stride);
    }
    return out;
  }

  const models::ModelParams& model() const { return model_; }

 private:
  models::ModelParams model_;
  std::vector<Tensor> params_;
  std::size_t chunk_;
};

// ---------------------------------------------------------------------------
// Per-frame helpers on [B, ...] batches.

inline std::size_t frames_of(const Tensor& x) { return x.rank() == 0 ? 0 : x.dim(0); }
inline std::size_t stride_of(const Tensor& x) {
  return frames_of(x) == 0 ? 0 : x.size() / frames_of(x);
}

inline std::span<const double> frame_span(const Tensor& x, std::size_t r) {
  return x.data().subspan(r * stride_of(x), stride_of(x));
}
inline std::span<double> frame_span(Tensor& x, std::size_t r) {
  const std::size_t s = stride_of(x);
  return x.data().subspan(r * s, s);
}

inline double norm_of(std::span<const double> v, double p) {
  if (std::isinf(p)) return linf_norm(v);
  if (p == 2.0) return l2_norm(v);
  if (p == 1.0) return l1_norm(v);
  throw ValueError("norm: p must be 1, 2 or inf");
}

inline std::vector<double> frame_norms(const Tensor& d, double p) {
  std::vector<double> out(frames_of(d));
  for (std::size_t r = 0; r < out.size(); ++r) out[r] = norm_of(frame_span(d, r), p);
  return out;
}

/// Projection of every frame onto the eps-ball: componentwise clamp for
/// p = inf, radial rescale for p = 2.
inline void project(Tensor& d, double eps, double p) {
  if (std::isinf(eps)) return;
  for (std::size_t r = 0; r < frames_of(d); ++r) {
    auto f = frame_span(d, r);
    if (std::isinf(p)) {
      for (auto& v : f) v = std::clamp(v, -eps, eps);
    } else if (p == 2.0) {
      const double n = l2_norm(f);
      if (n > eps) {
        const double s = eps / n;
        for (auto& v : f) v *= s;
      }
    } else {
      throw ValueError("project: p must be 2 or inf");
    }
  }
}

inline double sgn(double v) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); }

/// Steepest ascent direction of unit p-norm per frame: sign(g) for p = inf,
/// g / ||g||_2 for p = 2 (zero where g = 0).
inline Tensor ascent_direction(const Tensor& g, double p) {
  Tensor s(g.shape());
  for (std::size_t r = 0; r < frames_of(g); ++r) {
    auto gi = frame_span(g, r);
    auto si = frame_span(s, r);
    if (std::isinf(p)) {
      for (std::size_t i = 0; i < gi.size(); ++i) si[i] = sgn(gi[i]);
    } else {
      const double n = l2_norm(gi);
      if (n > 0.0) {
        for (std::size_t i = 0; i < gi.size(); ++i) si[i] = gi[i] / n;
      }
    }
  }
  return s;
}

inline Tensor add(const Tensor& a, const Tensor& b) {
  Tensor c = a;
  for (std::size_t i = 0; i < c.size(); ++i) c[i] += b[i];
  return c;
}

/// d/dx of the summed cross-entropy, i.e. each frame's own loss gradient.
inline Tensor loss_gradient(const Classifier& f, const Tensor& x,
                            std::span<const std::size_t> y) {
  if (y.size() != frames_of(x)) throw ShapeError("loss_gradient: label count mismatch");
  return f.pullback(x, [&](const Tensor& z, std::size_t first) {
    const std::size_t c = z.dim(1);
    Tensor g(z.shape());
    for (std::size_t r = 0; r < z.dim(0); ++r) {
      const double* row = z.data().data() + r * c;
      const double lse = kernels::logsumexp(row, c);
      for (std::size_t j = 0; j < c; ++j) g[r * c + j] = std::exp(row[j] - lse);
      g[r * c + y[first + r]] -= 1.0;
    }
    return g;
  });
}

inline std::vector<double> frame_losses(const Classifier& f, const Tensor& x,
                                        std::span<const std::size_t> y) {
  const Tensor z = f.logits(x);
  const std::size_t c = z.dim(1);
  std::vector<double> out(y.size());
  for (std::size_t r = 0; r < y.size(); ++r) {
    const double* row = z.data().data() + r * c;
    out[r] = kernels::logsumexp(row, c) - row[y[r]];
  }
  return out;
}

inline double mean_loss(const Classifier& f, const Tensor& x, std::span<const std::size_t> y) {
  const auto l = frame_losses(f, x, y);
  double s = 0.0;
  for (double v : l) s += v;
  return s / static_cast<double>(l.size());
}

inline std::vector<std::size_t> predictions(const Classifier& f, const Tensor& x) {
  const Tensor z = f.logits(x);
  const std::size_t c = z.dim(1);
  std::vector<std::size_t> out(z.dim(0));
  for (std::size_t r = 0; r < out.size(); ++r) out[r] = models::argmax(z.data().subspan(r * c, c));
  return out;
}

// ---------------------------------------------------------------------------

enum class Method : std::uint8_t { FGSM, PGD, MIM, CW_L2, PCA };

inline constexpr Method kAllMethods[] = {Method::FGSM, Method::PGD, Method::MIM, Method::CW_L2,
                                         Method::PCA};

inline std::string method_name(Method m) {
  switch (m) {
    case Method::FGSM: return "FGSM";
    case Method::PGD: return "PGD";
    case Method::MIM: return "MIM";
    case Method::CW_L2: return "CW_L2";
    case Method::PCA: return "PCA";
  }
  return "?";
}

inline Method parse_method(const std::string& s) {
  for (auto m : kAllMethods) {
    if (method_name(m) == s) return m;
  }
  throw ConfigError("unknown attack method '" + s + "'");
}

inline constexpr double kInf = std::numeric_limits<double>::infinity();

struct AttackSpec {
  Method method = Method::FGSM;
  double eps = 0.1;
  double norm = kInf;  // 2 or inf
  double step = 0.0;   // alpha_atk; 0 selects the per-method default
  std::size_t steps = 10;
  double mu = 1.0;
  double c = 1.0;
  double cw_lr = 0.01;
  std::optional<double> psr_db;  // when set, eps is derived from the data power

  static AttackSpec defaults(Method m) {
    AttackSpec s;
    s.method = m;
    s.norm = (m == Method::CW_L2 || m == Method::PCA) ? 2.0 : kInf;
    if (m == Method::FGSM || m == Method::PCA) s.steps = 1;
    if (m == Method::CW_L2) s.steps = 100;
    return s;
  }

  void validate() const {
    if (!(eps > 0.0)) throw ConfigError("attack: eps must be > 0");
    if (!(std::isinf(norm) || norm == 2.0)) throw ConfigError("attack: norm must be 2 or inf");
    if (steps < 1) throw ConfigError("attack: steps must be >= 1");
    if (!(mu >= 0.0)) throw ConfigError("attack: mu must be >= 0");
    if (!(c >= 0.0)) throw ConfigError("attack: c must be >= 0");
    if (!(step >= 0.0) || !(cw_lr >= 0.0)) throw ConfigError("attack: step sizes must be >= 0");
    if ((method == Method::CW_L2 || method == Method::PCA) && norm != 2.0) {
      throw ConfigError("attack: " + method_name(method) + " requires p = 2");
    }
  }

  /// Defaults to eps / T.
  double step_size() const { return step > 0.0 ? step : eps / static_cast<double>(steps); }

  std::string describe() const {
    std::string s = method_name(method) + "(eps=" + std::to_string(eps) +
                    ",p=" + (std::isinf(norm) ? std::string("inf") : std::string("2")) +
                    ",alpha=" + std::to_string(step_size()) + ",T=" + std::to_string(steps);
    if (method == Method::MIM) s += ",mu=" + std::to_string(mu);
    if (method == Method::CW_L2) s += ",c=" + std::to_string(c) + ",lr=" + std::to_string(cw_lr);
    if (psr_db) s += ",psr=" + std::to_string(*psr_db);
    return s + ")";
  }
};

// ---------------------------------------------------------------------------
// Power bookkeeping. Power is mean |x|^2 per complex sample (I^2 + Q^2).

/// Mean power of a [B, 2, L] batch or a [2, L] frame.
inline double power(const Tensor& d) {
  const std::size_t samples = d.size() / 2;
  if (samples == 0) return 0.0;
  double s = 0.0;
  for (double v : d.data()) s += v * v;
  return s / static_cast<double>(samples);
}

/// Budget whose saturating perturbation has power P_x * 10^(psr/10):
/// sqrt(P/2) per component for p = inf, sqrt(L * P) per frame for p = 2.
inline double eps_for_psr(double signal_power, double psr_db, double p, std::size_t frame_len) {
  if (!(signal_power > 0.0)) throw ValueError("eps_for_psr: signal power must be > 0");
  const double target = signal_power * std::pow(10.0, psr_db / 10.0);
  if (std::isinf(p)) return std::sqrt(target / 2.0);
  if (p == 2.0) return std::sqrt(static_cast<double>(frame_len) * target);
  throw ValueError("eps_for_psr: p must be 2 or inf");
}

/// Rescales d by one factor so that 10 log10(P_d / P_x) = psr_db.
inline Tensor scale_to_psr(const Tensor& d, double signal_power, double psr_db) {
  if (!(signal_power > 0.0)) throw ValueError("scale_to_psr: signal power must be > 0");
  const double pd = power(d);
  if (!(pd > 0.0)) throw ValueError("scale_to_psr: zero perturbation");
  const double s = std::sqrt(signal_power * std::pow(10.0, psr_db / 10.0) / pd);
  Tensor out = d;
  for (auto& v : out.data()) v *= s;
  return out;
}

inline Tensor scale_to_psr(const Tensor& d, const signals::LabeledDataset& ref, double psr_db) {
  return scale_to_psr(d, signals::mean_power(ref), psr_db);
}

/// Resolves psr_db into eps against a reference power.
inline AttackSpec resolve(AttackSpec spec, double signal_power, std::size_t frame_len) {
  if (spec.psr_db) spec.eps = eps_for_psr(signal_power, *spec.psr_db, spec.norm, frame_len);
  spec.validate();
  return spec;
}

// ---------------------------------------------------------------------------
// Per-frame attacks. Inputs are [B, 2, L] batches with labels y.

inline Tensor fgsm(const Classifier& f, const Tensor& x, std::span<const std::size_t> y,
                   double eps, double p = kInf) {
  Tensor d = ascent_direction(loss_gradient(f, x, y), p);
  for (auto& v : d.data()) v = eps * v;
  return d;
}

/// delta^{t+1} = Proj(delta^t + alpha * dir(grad L(x + delta^t))), delta^0 = 0.
inline Tensor pgd(const Classifier& f, const Tensor& x, std::span<const std::size_t> y,
                  double eps, double alpha, std::size_t steps, double p = kInf) {
  if (steps < 1) throw ValueError("pgd: steps must be >= 1");
  Tensor d(x.shape());
  for (std::size_t t = 0; t < steps; ++t) {
    const Tensor s = ascent_direction(loss_gradient(f, t == 0 ? x : add(x, d), y), p);
    for (std::size_t i = 0; i < d.size(); ++i) d[i] = d[i] + alpha * s[i];
    project(d, eps, p);
  }
  return d;
}

/// g^{t+1} = mu g^t + grad / ||grad||_1 (per frame), delta^{t+1} = delta^t +
/// alpha * dir(g^{t+1}); projected onto the eps-ball at the end. A frame with
/// zero gradient keeps its momentum; if that is zero too the step is zero.
inline Tensor mim(const Classifier& f, const Tensor& x, std::span<const std::size_t> y,
                  double eps, double alpha, double mu, std::size_t steps, double p = kInf) {
  if (steps < 1) throw ValueError("mim: steps must be >= 1");
  Tensor d(x.shape());
  Tensor g(x.shape());
  for (std::size_t t = 0; t < steps; ++t) {
    const Tensor grad = loss_gradient(f, t == 0 ? x : add(x, d), y);
    for (std::size_t r = 0; r < frames_of(x); ++r) {
      auto gr = frame_span(grad, r);
      auto mr = frame_span(g, r);
      const double n1 = l1_norm(gr);
      for (std::size_t i = 0; i < mr.size(); ++i) {
        mr[i] = mu * mr[i] + (n1 > 0.0 ? gr[i] / n1 : 0.0);
      }
    }
    const Tensor s = ascent_direction(g, p);
    for (std::size_t i = 0; i < d.size(); ++i) d[i] = d[i] + alpha * s[i];
  }
  project(d, eps, p);
  return d;
}

/// Plain gradient descent on ||delta||_2^2 + c * max(z_y - max_{i!=y} z_i, 0)
/// from delta = 0. Per frame, returns the lowest-objective iterate that
/// changes the prediction, else the last iterate; then optionally projected
/// onto the L2 eps-ball.
inline Tensor cw_l2(const Classifier& f, const Tensor& x, std::span<const std::size_t> y,
                    double c, double lr, std::size_t steps, double eps = kInf) {
  if (steps < 1) throw ValueError("cw_l2: steps must be >= 1");
  const std::size_t n = frames_of(x), cls = f.num_classes();
  Tensor d(x.shape());
  Tensor best(x.shape());
  std::vector<double> best_obj(n, kInf);
  std::vector<char> found(n, 0);
  // Margin of frame k given its logit row; `other` receives the runner-up class.
  auto margin = [&](const double* row, std::size_t k, std::size_t& other) {
    other = y[k] == 0 ? 1 : 0;
    for (std::size_t j = 0; j < cls; ++j) {
      if (j != y[k] && row[j] > row[other]) other = j;
    }
    return row[y[k]] - row[other];
  };
  // z holds rows for frames first .. first + z.dim(0) - 1 of the current iterate.
  auto record = [&](const Tensor& z, std::size_t first) {
    for (std::size_t r = 0; r < z.dim(0); ++r) {
      const std::size_t k = first + r;
      const double* row = z.data().data() + r * cls;
      if (models::argmax(std::span<const double>(row, cls)) == y[k]) continue;
      std::size_t other;
      const double norm = l2_norm(frame_span(d, k));
      const double obj = norm * norm + c * std::max(margin(row, k, other), 0.0);
      if (obj < best_obj[k]) {
        best_obj[k] = obj;
        found[k] = 1;
        std::copy_n(frame_span(d, k).begin(), stride_of(d), frame_span(best, k).begin());
      }
    }
  };
  for (std::size_t t = 0; t < steps; ++t) {
    const Tensor gm = f.pullback(add(x, d), [&](const Tensor& z, std::size_t first) {
      record(z, first);  // iterate t, before its update
      Tensor cot(z.shape());
      for (std::size_t r = 0; r < z.dim(0); ++r) {
        std::size_t other;
        if (margin(z.data().data() + r * cls, first + r, other) > 0.0) {
          cot[r * cls + y[first + r]] = c;
          cot[r * cls + other] = -c;
        }
      }
      return cot;
    });
    for (std::size_t i = 0; i < d.size(); ++i) d[i] -= lr * (2.0 * d[i] + gm[i]);
  }
  record(f.logits(add(x, d)), 0);
  for (std::size_t r = 0; r < n; ++r) {
    if (found[r]) std::copy_n(frame_span(best, r).begin(), stride_of(d), frame_span(d, r).begin());
  }
  project(d, eps, 2.0);
  return d;
}

// ---------------------------------------------------------------------------
// Universal perturbation along the first principal component of the
// normalized per-frame gradient matrix G.

struct PrincipalComponent {
  std::vector<double> v;
  std::size_t iterations = 0;
};

/// Leading eigenvector of M = G^T G for G with `rows` rows of width `dim`.
/// Power iteration, started on M^(2^squarings) (so early iterations already
/// see a widened eigengap), for at most `max_iters` iterations or until the
/// relative change falls below `tol`.
inline PrincipalComponent principal_component(std::span<const double> g, std::size_t rows,
                                              std::size_t dim, std::size_t max_iters = 100,
                                              double tol = 1e-10, std::size_t squarings = 24) {
  if (rows == 0 || g.size() != rows * dim) throw ShapeError("principal_component: bad shape");
  std::vector<double> m(dim * dim);
  kernels::gemm(true, false, dim, dim, rows, g.data(), g.data(), m.data());
  double fro = 0.0;
  for (double v : m) fro += v * v;
  if (!(fro > 0.0)) throw ValueError("pca: degenerate gradient matrix");
  std::vector<double> a = m, tmp(dim * dim);
  for (std::size_t s = 0; s < squarings; ++s) {
    kernels::gemm(false, false, dim, dim, dim, a.data(), a.data(), tmp.data());
    double nrm = 0.0;
    for (double v : tmp) nrm = std::max(nrm, std::abs(v));
    if (!(nrm > 0.0) || !std::isfinite(nrm)) break;
    for (std::size_t i = 0; i < tmp.size(); ++i) a[i] = tmp[i] / nrm;
  }
  // Start from the largest-norm column of the powered matrix.
  std::size_t col = 0;
  double best = -1.0;
  for (std::size_t j = 0; j < dim; ++j) {
    double s = 0.0;
    for (std::size_t i = 0; i < dim; ++i) s += a[i * dim + j] * a[i * dim + j];
    if (s > best) {
      best = s;
      col = j;
    }
  }
  PrincipalComponent pc;
  pc.v.resize(dim);
  for (std::size_t i = 0; i < dim; ++i) pc.v[i] = a[i * dim + col] / std::sqrt(best);
  std::vector<double> w(dim);
  for (pc.iterations = 0; pc.iterations < max_iters;) {
    ++pc.iterations;
    kernels::gemm(false, false, dim, 1, dim, m.data(), pc.v.data(), w.data());
    const double nrm = l2_norm(w);
    if (!(nrm > 0.0)) throw ValueError("pca: degenerate gradient matrix");
    double change = 0.0;
    for (std::size_t i = 0; i < dim; ++i) {
      w[i] /= nrm;
      change = std::max(change, std::abs(w[i] - pc.v[i]));
    }
    pc.v.swap(w);
    if (change < tol) break;
  }
  return pc;
}

/// Universal [2, L] perturbation eps * sigma * v1, sigma maximizing mean loss.
inline Tensor pca_attack(const Classifier& f, const Tensor& x, std::span<const std::size_t> y,
                         double eps) {
  const std::size_t n = frames_of(x);
  if (n < 2) throw ValueError("pca: need at least 2 frames");
  const Tensor g = loss_gradient(f, x, y);
  const std::size_t dim = stride_of(x);
  std::vector<double> rows;
  rows.reserve(g.size());
  std::size_t kept = 0;
  for (std::size_t r = 0; r < n; ++r) {
    auto gr = frame_span(g, r);
    const double nrm = l2_norm(gr);
    if (!(nrm > 0.0)) continue;
    for (double v : gr) rows.push_back(v / nrm);
    ++kept;
  }
  if (kept == 0) throw ValueError("pca: degenerate gradient matrix");
  const auto pc = principal_component(rows, kept, dim);
  Shape s(x.shape().begin() + 1, x.shape().end());
  Tensor d(s);
  for (std::size_t i = 0; i < dim; ++i) d[i] = eps * pc.v[i];
  auto shifted = [&](double sign) {
    Tensor xs = x;
    for (std::size_t r = 0; r < n; ++r) {
      auto fr = frame_span(xs, r);
      for (std::size_t i = 0; i < dim; ++i) fr[i] += sign * d[i];
    }
    return xs;
  };
  if (mean_loss(f, shifted(-1.0), y) > mean_loss(f, shifted(1.0), y)) {
    for (auto& v : d.data()) v = -v;
  }
  return d;
}

/// Broadcasts a universal [2, L] perturbation over n frames.
inline Tensor broadcast_universal(const Tensor& u, std::size_t n) {
  Shape s{n};
  s.insert(s.end(), u.shape().begin(), u.shape().end());
  Tensor d(s);
  for (std::size_t r = 0; r < n; ++r) std::copy(u.data().begin(), u.data().end(), frame_span(d, r).begin());
  return d;
}

// ---------------------------------------------------------------------------

struct Perturbation {
  AttackSpec spec;  // eps resolved
  std::string substitute;  // checkpoint hash of the model attacked
  std::uint64_t seed = 0;
  bool universal = false;
  std::vector<std::uint64_t> frames;  // dataset indices the perturbation applies to
  Tensor delta;  // [n, 2, L], or [2, L] when universal

  /// Perturbation for the r-th listed frame.
  std::span<const double> frame_delta(std::size_t r) const {
    return universal ? delta.data() : frame_span(delta, r);
  }

  std::vector<double> norms() const {
    if (universal) return {norm_of(delta.data(), spec.norm)};
    return frame_norms(delta, spec.norm);
  }
};

/// Runs `spec` (already resolved) against f on x.
inline Tensor craft(const Classifier& f, const Tensor& x, std::span<const std::size_t> y,
                    const AttackSpec& spec) {
  spec.validate();
  switch (spec.method) {
    case Method::FGSM: return fgsm(f, x, y, spec.eps, spec.norm);
    case Method::PGD: return pgd(f, x, y, spec.eps, spec.step_size(), spec.steps, spec.norm);
    case Method::MIM:
      return mim(f, x, y, spec.eps, spec.step_size(), spec.mu, spec.steps, spec.norm);
    case Method::CW_L2: return cw_l2(f, x, y, spec.c, spec.cw_lr, spec.steps, spec.eps);
    case Method::PCA: return pca_attack(f, x, y, spec.eps);
  }
  throw ValueError("craft: unknown method");
}

// AMCP file:
//   "AMCP" | version u32 | method u8 | eps f64 | norm f64 | step f64 | steps u32 |
//   mu f64 | c f64 | cw_lr f64 | has_psr u8 | psr f64 | substitute str | seed u64 |
//   universal u8 | n_frames u64 | n_frames x u64 index | n_delta u64 | n_delta x f32 |
//   dims u32 | dims x u32 | CRC32
inline constexpr std::uint32_t kPerturbationVersion = 1;

inline void write_spec(io::Writer& w, const AttackSpec& s) {
  w.u8(static_cast<std::uint8_t>(s.method));
  w.f64(s.eps);
  w.f64(s.norm);
  w.f64(s.step);
  w.u32(static_cast<std::uint32_t>(s.steps));
  w.f64(s.mu);
  w.f64(s.c);
  w.f64(s.cw_lr);
  w.u8(s.psr_db ? 1 : 0);
  w.f64(s.psr_db.value_or(0.0));
}

inline AttackSpec read_spec(io::Reader& r) {
  AttackSpec s;
  const auto m = r.u8();
  if (m > static_cast<std::uint8_t>(Method::PCA)) throw FormatError("perturbation: bad method tag");
  s.method = static_cast<Method>(m);
  s.eps = r.f64();
  s.norm = r.f64();
  s.step = r.f64();
  s.steps = r.u32();
  s.mu = r.f64();
  s.c = r.f64();
  s.cw_lr = r.f64();
  const bool has = r.u8() != 0;
  const double psr = r.f64();
  if (has) s.psr_db = psr;
  return s;
}

/// Stable digest of a spec, used in cache keys.
inline std::string spec_hash(const AttackSpec& s) {
  io::Writer w;
  write_spec(w, s);
  return io::sha256_hex(w.bytes());
}

inline io::Bytes encode_perturbation(const Perturbation& p) {
  io::Writer w;
  w.magic("AMCP");
  w.u32(kPerturbationVersion);
  write_spec(w, p.spec);
  w.str(p.substitute);
  w.u64(p.seed);
  w.u8(p.universal ? 1 : 0);
  w.u64(p.frames.size());
  for (auto f : p.frames) w.u64(f);
  w.u64(p.delta.size());
  for (double v : p.delta.data()) w.f32(static_cast<float>(v));
  w.u32(static_cast<std::uint32_t>(p.delta.rank()));
  for (auto d : p.delta.shape()) w.u32(static_cast<std::uint32_t>(d));
  return w.finish();
}

inline Perturbation decode_perturbation(const io::Bytes& bytes) {
  io::Reader r(bytes, "AMCP", "perturbation");
  if (r.u32() != kPerturbationVersion) throw FormatError("perturbation: version mismatch");
  Perturbation p;
  p.spec = read_spec(r);
  p.substitute = r.str();
  p.seed = r.u64();
  p.universal = r.u8() != 0;
  const auto nf = r.u64();
  if (nf > bytes.size()) throw FormatError("perturbation: truncated file");
  r.ensure(nf * 8);
  p.frames.resize(nf);
  for (auto& f : p.frames) f = r.u64();
  const auto nd = r.u64();
  if (nd > bytes.size()) throw FormatError("perturbation: truncated file");
  r.ensure(nd * 4);
  std::vector<double> data(nd);
  for (auto& v : data) v = r.f32();
  const auto rank = r.u32();
  r.ensure(std::uint64_t{rank} * 4);
  Shape shape(rank);
  for (auto& d : shape) d = r.u32();
  r.finish();
  if (numel(shape) != nd) throw FormatError("perturbation: shape does not match data");
  p.delta = Tensor(std::move(shape), std::move(data));
  return p;
}

inline void write_perturbation(const Perturbation& p, const std::filesystem::path& path) {
  io::write_file(path, encode_perturbation(p));
}

inline Perturbation read_perturbation(const std::filesystem::path& path) {
  return decode_perturbation(io::read_file(path));
}

}  // namespace amc::attacks
