#pragma once

// Classifier family f_theta: R^{2 x frame_len} -> R^C over a flat parameter
// vector, plain supervised training, and input gradients for attacks.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <map>
#include <numeric>
#include <random>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "amc/autodiff.hpp"
#include "amc/error.hpp"
#include "amc/io.hpp"
#include "amc/signals.hpp"

namespace amc::models {

enum class ArchKind : std::uint8_t { MLP, CNN1D };
enum class Activation : std::uint8_t { ReLU, Tanh };

struct ConvLayer {
  std::size_t channels = 16;
  std::size_t kernel = 7;
  friend bool operator==(const ConvLayer&, const ConvLayer&) = default;
};

struct Architecture {
  ArchKind kind = ArchKind::CNN1D;
  std::vector<ConvLayer> conv;      // CNN1D only
  std::vector<std::size_t> hidden;  // dense hidden widths
  Activation activation = Activation::ReLU;
  std::size_t input_channels = 2;
  std::size_t frame_len = 128;
  std::size_t num_classes = 8;

  friend bool operator==(const Architecture&, const Architecture&) = default;

  std::size_t input_size() const { return input_channels * frame_len; }

  void validate() const {
    if (num_classes < 2) throw ConfigError("architecture: need at least 2 classes");
    if (input_channels == 0 || frame_len == 0) throw ConfigError("architecture: zero-size input");
    if (kind == ArchKind::MLP) {
      if (!conv.empty()) throw ConfigError("architecture: MLP with conv layers");
      if (hidden.empty()) throw ConfigError("architecture: at least one hidden layer required");
    } else if (conv.empty()) {
      throw ConfigError("architecture: CNN1D needs at least one conv layer");
    }
    for (const auto& c : conv) {
      if (c.channels == 0 || c.kernel == 0) throw ConfigError("architecture: zero-size layer");
      if (c.kernel % 2 == 0) throw ConfigError("architecture: conv kernels must be odd");
    }
    for (auto h : hidden) {
      if (h == 0) throw ConfigError("architecture: zero-size layer");
    }
  }

  std::string describe() const {
    std::ostringstream os;
    if (kind == ArchKind::MLP) {
      os << "mlp(" << input_size();
    } else {
      os << "cnn1d(" << input_channels << "x" << frame_len;
      for (const auto& c : conv) os << ",c" << c.channels << "k" << c.kernel;
    }
    for (auto h : hidden) os << "," << h;
    os << "->" << num_classes << (activation == Activation::ReLU ? ",relu)" : ",tanh)");
    return os.str();
  }
};

/// conv(2->16,k7) relu conv(16->16,k5) relu dense(64) relu dense(C)
inline Architecture vtcnn_lite(std::size_t num_classes, std::size_t frame_len = 128) {
  Architecture a;
  a.kind = ArchKind::CNN1D;
  a.conv = {{16, 7}, {16, 5}};
  a.hidden = {64};
  a.num_classes = num_classes;
  a.frame_len = frame_len;
  return a;
}

inline Architecture mlp(std::vector<std::size_t> hidden, std::size_t num_classes,
                        std::size_t frame_len = 128, Activation act = Activation::ReLU) {
  Architecture a;
  a.kind = ArchKind::MLP;
  a.hidden = std::move(hidden);
  a.num_classes = num_classes;
  a.frame_len = frame_len;
  a.activation = act;
  return a;
}

inline constexpr const char* kZooMembers[] = {"mlp-small", "mlp-wide", "cnn1d-lite"};

/// Named members of the substitute family.
inline Architecture zoo_architecture(const std::string& name, std::size_t num_classes,
                                     std::size_t frame_len = 128) {
  if (name == "mlp-small") return mlp({64}, num_classes, frame_len);
  if (name == "mlp-wide") return mlp({256, 64}, num_classes, frame_len);
  if (name == "mlp-tanh") return mlp({64}, num_classes, frame_len, Activation::Tanh);
  if (name == "cnn1d-lite") return vtcnn_lite(num_classes, frame_len);
  if (name == "cnn1d-small" || name == "cnn1d-tanh") {
    Architecture a = vtcnn_lite(num_classes, frame_len);
    a.conv = {{8, 5}, {8, 5}};
    a.hidden = {32};
    if (name == "cnn1d-tanh") a.activation = Activation::Tanh;
    return a;
  }
  throw ConfigError("unknown architecture '" + name + "'");
}

struct ParamSlice {
  std::string name;
  std::size_t offset = 0;
  Shape shape;
  bool is_bias = false;
  std::size_t fan_in = 0;
  std::size_t size() const { return numel(shape); }
};

/// Parameter slices in theta order: conv (w [out,in,k], b) then dense
/// (w [in,out], b).
inline std::vector<ParamSlice> layout(const Architecture& arch) {
  arch.validate();
  std::vector<ParamSlice> out;
  std::size_t off = 0;
  auto add = [&](std::string name, Shape shape, bool bias, std::size_t fan_in) {
    ParamSlice s{std::move(name), off, std::move(shape), bias, fan_in};
    off += s.size();
    out.push_back(std::move(s));
  };
  std::size_t in_ch = arch.input_channels;
  for (std::size_t i = 0; i < arch.conv.size(); ++i) {
    const auto& c = arch.conv[i];
    add("conv" + std::to_string(i) + ".w", {c.channels, in_ch, c.kernel}, false, in_ch * c.kernel);
    add("conv" + std::to_string(i) + ".b", {c.channels}, true, in_ch * c.kernel);
    in_ch = c.channels;
  }
  std::size_t width = arch.kind == ArchKind::MLP ? arch.input_size() : in_ch * arch.frame_len;
  std::vector<std::size_t> dims = arch.hidden;
  dims.push_back(arch.num_classes);
  for (std::size_t i = 0; i < dims.size(); ++i) {
    add("dense" + std::to_string(i) + ".w", {width, dims[i]}, false, width);
    add("dense" + std::to_string(i) + ".b", {dims[i]}, true, width);
    width = dims[i];
  }
  return out;
}

inline std::size_t param_count(const Architecture& arch) {
  const auto l = layout(arch);
  return l.back().offset + l.back().size();
}

struct ModelParams {
  Architecture arch;
  std::vector<double> theta;

  void validate() const {
    if (theta.size() != param_count(arch)) throw ShapeError("model: parameter count mismatch");
    for (double v : theta) {
      if (!std::isfinite(v)) throw ValueError("model: non-finite parameter");
    }
  }
  friend bool operator==(const ModelParams&, const ModelParams&) = default;
};

namespace detail {

inline double uniform(std::mt19937_64& rng, double lo, double hi) {
  // 53-bit mantissa draw; fixed across standard libraries.
  const double u = static_cast<double>(rng() >> 11) * 0x1.0p-53;
  return lo + (hi - lo) * u;
}

}  // namespace detail

/// Fan-in scaled uniform weights (He for ReLU, LeCun for tanh), zero biases.
inline ModelParams init_model(const Architecture& arch, std::uint64_t seed) {
  ModelParams m{arch, std::vector<double>(param_count(arch), 0.0)};
  std::mt19937_64 rng(seed);
  const double gain = arch.activation == Activation::ReLU ? 6.0 : 3.0;
  for (const auto& s : layout(arch)) {
    if (s.is_bias) continue;
    const double bound = std::sqrt(gain / static_cast<double>(s.fan_in));
    for (std::size_t i = 0; i < s.size(); ++i) {
      m.theta[s.offset + i] = detail::uniform(rng, -bound, bound);
    }
  }
  return m;
}

/// theta split into per-layer tensors following `layout`.
inline std::vector<Tensor> unflatten(const Architecture& arch, std::span<const double> theta) {
  const auto l = layout(arch);
  if (theta.size() != l.back().offset + l.back().size()) {
    throw ShapeError("unflatten: parameter count mismatch");
  }
  std::vector<Tensor> out;
  out.reserve(l.size());
  for (const auto& s : l) {
    out.emplace_back(s.shape, std::vector<double>(theta.begin() + s.offset,
                                                  theta.begin() + s.offset + s.size()));
  }
  return out;
}

inline std::vector<double> flatten(std::span<const Tensor> parts) {
  std::vector<double> out;
  for (const auto& t : parts) out.insert(out.end(), t.data().begin(), t.data().end());
  return out;
}

/// Records the parameters on `tape` as variables, one per layout slice.
inline std::vector<ad::Var> bind_params(ad::Tape& tape, const ModelParams& m) {
  std::vector<ad::Var> vars;
  for (auto& t : unflatten(m.arch, m.theta)) vars.push_back(tape.variable(std::move(t)));
  return vars;
}

/// Logits [B, C] for inputs x of shape [B, input_channels, frame_len].
inline ad::Var forward(const Architecture& arch, std::span<const ad::Var> p, const ad::Var& x) {
  const auto& xs = x.shape();
  if (xs.size() != 3 || xs[1] != arch.input_channels || xs[2] != arch.frame_len) {
    throw ShapeError("forward: input " + to_string(xs) + " does not match " + arch.describe());
  }
  const std::size_t batch = xs[0];
  auto act = [&](const ad::Var& v) {
    return arch.activation == Activation::ReLU ? ad::relu(v) : ad::tanh(v);
  };
  std::size_t k = 0;
  ad::Var h = x;
  for (std::size_t i = 0; i < arch.conv.size(); ++i, k += 2) {
    h = act(ad::add_bias(ad::conv1d(h, p[k]), p[k + 1]));
  }
  h = ad::reshape(h, Shape{batch, numel(h.shape()) / std::max<std::size_t>(batch, 1)});
  const std::size_t dense = arch.hidden.size() + 1;
  for (std::size_t i = 0; i < dense; ++i, k += 2) {
    h = ad::add_bias(ad::matmul(h, p[k]), p[k + 1]);
    if (i + 1 < dense) h = act(h);
  }
  return h;
}

/// Mean softmax cross-entropy over a batch.
inline ad::Var loss(const Architecture& arch, std::span<const ad::Var> p, const ad::Var& x,
                    std::span<const std::size_t> labels,
                    ad::Reduction reduction = ad::Reduction::Mean) {
  return ad::softmax_cross_entropy(forward(arch, p, x), labels, reduction);
}

/// Lowest index among the maxima.
inline std::size_t argmax(std::span<const double> z) {
  if (z.empty()) throw ShapeError("argmax: empty");
  std::size_t best = 0;
  for (std::size_t i = 1; i < z.size(); ++i) {
    if (z[i] > z[best]) best = i;
  }
  return best;
}

inline void check_input(const Architecture& arch, const Tensor& x) {
  if (x.rank() != 3 || x.dim(1) != arch.input_channels || x.dim(2) != arch.frame_len) {
    throw ShapeError("input " + to_string(x.shape()) + " does not match " + arch.describe());
  }
}

/// Logits for a [B, 2, frame_len] batch, evaluated in chunks.
inline Tensor logits(const ModelParams& m, const Tensor& x, std::size_t chunk = 256) {
  check_input(m.arch, x);
  const std::size_t n = x.dim(0), stride = x.size() / std::max<std::size_t>(n, 1);
  const std::size_t c = m.arch.num_classes;
  Tensor out(Shape{n, c});
  const auto params = unflatten(m.arch, m.theta);
  for (std::size_t start = 0; start < n; start += chunk) {
    const std::size_t len = std::min(chunk, n - start);
    ad::Tape tape;
    ad::Tape::NoGradGuard guard(tape);
    std::vector<ad::Var> p;
    for (const auto& t : params) p.push_back(tape.constant(t));
    Tensor xb(Shape{len, x.dim(1), x.dim(2)},
              std::vector<double>(x.data().begin() + start * stride,
                                  x.data().begin() + (start + len) * stride));
    auto z = forward(m.arch, p, tape.constant(std::move(xb)));
    std::copy(z.value().data().begin(), z.value().data().end(),
              out.data().begin() + start * c);
  }
  return out;
}

inline std::vector<std::size_t> predict_batch(const ModelParams& m, const Tensor& x) {
  const Tensor z = logits(m, x);
  const std::size_t c = m.arch.num_classes;
  std::vector<std::size_t> out(z.dim(0));
  for (std::size_t r = 0; r < out.size(); ++r) out[r] = argmax(z.data().subspan(r * c, c));
  return out;
}

/// argmax of softmax(f_theta(x)) for one [2, frame_len] frame.
inline std::size_t predict(const ModelParams& m, const Tensor& frame) {
  if (frame.rank() != 2) throw ShapeError("predict: expected a [2, frame_len] frame");
  return predict_batch(m, frame.reshaped(Shape{1, frame.dim(0), frame.dim(1)}))[0];
}

inline std::size_t predict(const ModelParams& m, const signals::IQFrame& f) {
  Tensor t(Shape{2, f.length()});
  std::copy(f.i.begin(), f.i.end(), t.data().begin());
  std::copy(f.q.begin(), f.q.end(), t.data().begin() + f.length());
  return predict(m, t);
}

/// Mean cross-entropy of a batch, no gradients.
inline double mean_loss(const ModelParams& m, const Tensor& x, std::span<const std::size_t> y) {
  const Tensor z = logits(m, x);
  const std::size_t c = m.arch.num_classes;
  if (y.size() != z.dim(0)) throw ShapeError("mean_loss: label count mismatch");
  double total = 0.0;
  for (std::size_t r = 0; r < y.size(); ++r) {
    const double* row = z.data().data() + r * c;
    total += kernels::logsumexp(row, c) - row[y[r]];
  }
  return total / static_cast<double>(y.size());
}

/// Per-frame cross-entropy values.
inline std::vector<double> frame_losses(const ModelParams& m, const Tensor& x,
                                        std::span<const std::size_t> y) {
  const Tensor z = logits(m, x);
  const std::size_t c = m.arch.num_classes;
  std::vector<double> out(y.size());
  for (std::size_t r = 0; r < y.size(); ++r) {
    const double* row = z.data().data() + r * c;
    out[r] = kernels::logsumexp(row, c) - row[y[r]];
  }
  return out;
}

/// d/dx of the per-frame cross-entropy for every frame of a [B, 2, L] batch
/// (the summed loss, so each row is that frame's own gradient).
inline Tensor input_gradient(const ModelParams& m, const Tensor& x,
                             std::span<const std::size_t> y) {
  check_input(m.arch, x);
  if (y.size() != x.dim(0)) throw ShapeError("input_gradient: label count mismatch");
  for (auto l : y) {
    if (l >= m.arch.num_classes) throw ValueError("input_gradient: label out of range");
  }
  ad::Tape tape;
  std::vector<ad::Var> p;
  for (auto& t : unflatten(m.arch, m.theta)) p.push_back(tape.constant(std::move(t)));
  ad::Var xv = tape.variable(x);
  auto l = loss(m.arch, p, xv, y, ad::Reduction::Sum);
  return ad::gradients(l, {xv})[0];
}

/// Gradient of the mean batch loss w.r.t. the flat parameters; also returns the loss.
inline double param_gradient(const ModelParams& m, const Tensor& x,
                             std::span<const std::size_t> y, std::vector<double>& grad) {
  ad::Tape tape;
  auto p = bind_params(tape, m);
  auto l = loss(m.arch, p, tape.constant(x), y);
  if (!std::isfinite(l.value().item())) {
    grad.clear();
    return l.value().item();
  }
  const auto g = ad::gradients(l, p);
  grad = flatten(g);
  return l.value().item();
}

// ---------------------------------------------------------------------------
// Optimizers over flat parameter vectors.

enum class OptimizerKind : std::uint8_t { SGD, Adam };

struct OptimizerConfig {
  OptimizerKind kind = OptimizerKind::Adam;
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

class Optimizer {
 public:
  Optimizer(OptimizerConfig cfg, std::size_t n) : cfg_(cfg) {
    if (cfg.kind == OptimizerKind::Adam) {
      m_.assign(n, 0.0);
      v_.assign(n, 0.0);
    }
  }

  /// theta <- theta - update(grad)
  void step(std::span<double> theta, std::span<const double> grad) {
    if (grad.size() != theta.size()) throw ShapeError("optimizer: gradient size mismatch");
    if (cfg_.kind == OptimizerKind::SGD) {
      for (std::size_t i = 0; i < theta.size(); ++i) theta[i] -= cfg_.lr * grad[i];
      return;
    }
    ++t_;
    const double c1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (std::size_t i = 0; i < theta.size(); ++i) {
      m_[i] = cfg_.beta1 * m_[i] + (1.0 - cfg_.beta1) * grad[i];
      v_[i] = cfg_.beta2 * v_[i] + (1.0 - cfg_.beta2) * grad[i] * grad[i];
      theta[i] -= cfg_.lr * (m_[i] / c1) / (std::sqrt(v_[i] / c2) + cfg_.eps);
    }
  }

 private:
  OptimizerConfig cfg_;
  std::vector<double> m_, v_;
  std::size_t t_ = 0;
};

struct TrainConfig {
  OptimizerConfig optimizer;
  std::size_t batch_size = 64;
  std::size_t epochs = 10;
  std::uint64_t seed = 1;

  void validate() const {
    if (!(optimizer.lr >= 0.0)) throw ConfigError("train: learning rate must be >= 0");
    if (batch_size == 0) throw ConfigError("train: batch size must be positive");
    if (epochs == 0) throw ConfigError("train: epochs must be positive");
  }
};

struct TrainResult {
  ModelParams model;
  std::vector<double> history;  // mean minibatch loss per epoch
  double seconds = 0.0;
};

/// Copies of frames `idx` of x into a new batch tensor.
inline Tensor gather(const Tensor& x, std::span<const std::size_t> idx) {
  const std::size_t stride = x.size() / std::max<std::size_t>(x.dim(0), 1);
  Shape s = x.shape();
  s[0] = idx.size();
  Tensor out(s);
  for (std::size_t r = 0; r < idx.size(); ++r) {
    std::copy_n(x.data().begin() + idx[r] * stride, stride, out.data().begin() + r * stride);
  }
  return out;
}

/// Minibatch training on (x, y), reshuffling every epoch.
inline TrainResult train(const ModelParams& init, const Tensor& x, std::span<const std::size_t> y,
                         const TrainConfig& cfg) {
  cfg.validate();
  init.validate();
  check_input(init.arch, x);
  if (x.dim(0) == 0) throw ValueError("train: empty dataset");
  if (y.size() != x.dim(0)) throw ShapeError("train: label count mismatch");
  for (auto l : y) {
    if (l >= init.arch.num_classes) throw ValueError("train: label out of range");
  }
  const auto t0 = std::chrono::steady_clock::now();
  TrainResult r{init, {}, 0.0};
  Optimizer opt(cfg.optimizer, init.theta.size());
  std::mt19937_64 rng(cfg.seed);
  std::vector<std::size_t> order(x.dim(0));
  std::iota(order.begin(), order.end(), 0);
  std::vector<double> g;
  for (std::size_t e = 0; e < cfg.epochs; ++e) {
    // Fisher-Yates with the raw 64-bit stream, stable across standard libraries.
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng() % i]);
    double total = 0.0;
    std::size_t batches = 0;
    for (std::size_t s = 0; s < order.size(); s += cfg.batch_size) {
      std::span<const std::size_t> idx(order.data() + s, std::min(cfg.batch_size, order.size() - s));
      std::vector<std::size_t> yb;
      for (auto i : idx) yb.push_back(y[i]);
      const double l = param_gradient(r.model, gather(x, idx), yb, g);
      if (!std::isfinite(l)) {
        throw DivergenceError("train: non-finite loss at epoch " + std::to_string(e) +
                              ", batch " + std::to_string(batches));
      }
      opt.step(r.model.theta, g);
      if (!std::all_of(r.model.theta.begin(), r.model.theta.end(),
                       [](double v) { return std::isfinite(v); })) {
        throw DivergenceError("train: non-finite parameters at epoch " + std::to_string(e) +
                              ", batch " + std::to_string(batches));
      }
      total += l;
      ++batches;
    }
    r.history.push_back(total / static_cast<double>(batches));
  }
  r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return r;
}

inline TrainResult train(const ModelParams& init, const signals::LabeledDataset& ds,
                         const TrainConfig& cfg) {
  if (ds.frame_len != init.arch.frame_len || ds.num_classes() != init.arch.num_classes) {
    throw ShapeError("train: dataset geometry does not match " + init.arch.describe());
  }
  const auto y = signals::labels_of(ds);
  return train(init, signals::to_tensor(ds), y, cfg);
}

inline double accuracy(const ModelParams& m, const Tensor& x, std::span<const std::size_t> y) {
  if (y.empty()) throw ValueError("accuracy: empty set");
  const auto p = predict_batch(m, x);
  std::size_t hit = 0;
  for (std::size_t i = 0; i < y.size(); ++i) hit += p[i] == y[i];
  return static_cast<double>(hit) / static_cast<double>(y.size());
}

// ---------------------------------------------------------------------------
// AMCM checkpoint:
//   "AMCM" | version u32 | kind u8 | activation u8 | input_channels u32 |
//   frame_len u32 | C u32 | n_conv u32 | n_conv x (channels u32, kernel u32) |
//   n_hidden u32 | n_hidden x u32 | n_meta u32 | n_meta x (key str, value str) |
//   n_theta u64 | theta f64 | CRC32

inline constexpr std::uint32_t kCheckpointVersion = 1;

using Metadata = std::map<std::string, std::string>;

struct Checkpoint {
  ModelParams model;
  Metadata metadata;
};

inline void write_architecture(io::Writer& w, const Architecture& a) {
  w.u8(static_cast<std::uint8_t>(a.kind));
  w.u8(static_cast<std::uint8_t>(a.activation));
  w.u32(static_cast<std::uint32_t>(a.input_channels));
  w.u32(static_cast<std::uint32_t>(a.frame_len));
  w.u32(static_cast<std::uint32_t>(a.num_classes));
  w.u32(static_cast<std::uint32_t>(a.conv.size()));
  for (const auto& c : a.conv) {
    w.u32(static_cast<std::uint32_t>(c.channels));
    w.u32(static_cast<std::uint32_t>(c.kernel));
  }
  w.u32(static_cast<std::uint32_t>(a.hidden.size()));
  for (auto h : a.hidden) w.u32(static_cast<std::uint32_t>(h));
}

inline Architecture read_architecture(io::Reader& r) {
  Architecture a;
  const auto kind = r.u8();
  const auto act = r.u8();
  if (kind > 1 || act > 1) throw FormatError("checkpoint: unknown architecture tag");
  a.kind = static_cast<ArchKind>(kind);
  a.activation = static_cast<Activation>(act);
  a.input_channels = r.u32();
  a.frame_len = r.u32();
  a.num_classes = r.u32();
  const auto nc = r.u32();
  r.ensure(std::uint64_t{nc} * 8);
  a.conv.resize(nc);
  for (auto& c : a.conv) {
    c.channels = r.u32();
    c.kernel = r.u32();
  }
  const auto nh = r.u32();
  r.ensure(std::uint64_t{nh} * 4);
  a.hidden.resize(nh);
  for (auto& h : a.hidden) h = r.u32();
  return a;
}

inline io::Bytes encode_checkpoint(const ModelParams& m, const Metadata& meta = {}) {
  m.validate();
  io::Writer w;
  w.magic("AMCM");
  w.u32(kCheckpointVersion);
  write_architecture(w, m.arch);
  w.u32(static_cast<std::uint32_t>(meta.size()));
  for (const auto& [k, v] : meta) {
    w.str(k);
    w.str(v);
  }
  w.u64(m.theta.size());
  for (double v : m.theta) w.f64(v);
  return w.finish();
}

inline Checkpoint decode_checkpoint(const io::Bytes& bytes) {
  io::Reader r(bytes, "AMCM", "checkpoint");
  if (r.u32() != kCheckpointVersion) throw FormatError("checkpoint: version mismatch");
  Checkpoint c;
  c.model.arch = read_architecture(r);
  const auto nm = r.u32();
  for (std::uint32_t i = 0; i < nm; ++i) {
    auto k = r.str();
    c.metadata[k] = r.str();
  }
  const auto n = r.u64();
  if (n > (std::uint64_t{1} << 40)) throw FormatError("checkpoint: truncated file");
  r.ensure(n * 8);
  c.model.theta.resize(n);
  for (auto& v : c.model.theta) v = r.f64();
  r.finish();
  try {
    c.model.arch.validate();
    c.model.validate();
  } catch (const Error& e) {
    throw FormatError(std::string("checkpoint: ") + e.what());
  }
  return c;
}

inline void save_checkpoint(const ModelParams& m, const std::filesystem::path& path,
                            const Metadata& meta = {}) {
  io::write_file(path, encode_checkpoint(m, meta));
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  return decode_checkpoint(io::read_file(path));
}

/// SHA-256 of the checkpoint encoding without metadata.
inline std::string model_hash(const ModelParams& m) { return io::sha256_hex(encode_checkpoint(m)); }

}  // namespace amc::models
