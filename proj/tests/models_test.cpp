#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "amc/models.hpp"
#include "support/finite_difference.hpp"

using namespace amc;
using namespace amc::models;

namespace {

Tensor random_batch(std::size_t n, std::size_t len, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  return Tensor(Shape{n, 2, len}, amc::testing::random_vector(n * 2 * len, rng));
}

std::vector<Architecture> small_zoo(std::size_t len) {
  std::vector<Architecture> z;
  for (const char* name : kZooMembers) z.push_back(zoo_architecture(name, 4, len));
  z.push_back(zoo_architecture("mlp-tanh", 4, len));
  Architecture c = vtcnn_lite(4, len);
  c.activation = Activation::Tanh;
  z.push_back(c);
  return z;
}

// Model whose logits equal `bias` for every input.
ModelParams constant_logits(std::vector<double> bias) {
  auto arch = mlp({4}, bias.size(), 8);
  ModelParams m{arch, std::vector<double>(param_count(arch), 0.0)};
  const auto l = layout(arch);
  std::copy(bias.begin(), bias.end(), m.theta.begin() + l.back().offset);
  return m;
}

}  // namespace

TEST(Models, ParamCountArithmetic) {
  EXPECT_EQ(param_count(mlp({64}, 8)), 256u * 64 + 64 + 64 * 8 + 8);
  EXPECT_EQ(param_count(mlp({64}, 8)), 16968u);
  EXPECT_EQ(param_count(vtcnn_lite(8)),
            16u * 2 * 7 + 16 + 16 * 16 * 5 + 16 + 16 * 128 * 64 + 64 + 64 * 8 + 8);
}

TEST(Models, InitDeterministicBiasesZero) {
  for (const auto& arch : small_zoo(16)) {
    auto a = init_model(arch, 5), b = init_model(arch, 5), c = init_model(arch, 6);
    EXPECT_EQ(a, b);
    EXPECT_NE(a.theta, c.theta);
    for (const auto& s : layout(arch)) {
      for (std::size_t i = 0; i < s.size(); ++i) {
        const double v = a.theta[s.offset + i];
        if (s.is_bias) {
          EXPECT_EQ(v, 0.0);
        } else {
          const double gain = arch.activation == Activation::ReLU ? 6.0 : 3.0;
          EXPECT_LE(std::abs(v), std::sqrt(gain / s.fan_in));
        }
      }
    }
  }
}

TEST(Models, ArchitectureValidation) {
  EXPECT_THROW(mlp({}, 8).validate(), ConfigError);
  EXPECT_THROW(mlp({0}, 8).validate(), ConfigError);
  auto c = vtcnn_lite(8);
  c.conv[0].channels = 0;
  EXPECT_THROW(init_model(c, 1), ConfigError);
  EXPECT_THROW(zoo_architecture("resnet", 8), ConfigError);
}

TEST(Models, PredictTieRules) {
  Tensor frame(Shape{2, 8}, 0.3);
  EXPECT_EQ(predict(constant_logits({0.1, 2.0, -1.0}), frame), 1u);
  EXPECT_EQ(predict(constant_logits({0.5, 0.5, 0.5}), frame), 0u);
  EXPECT_THROW(predict(constant_logits({1, 2}), Tensor(Shape{2, 7})), ShapeError);
}

TEST(Models, ArgmaxOfSoftmaxEqualsArgmax) {
  std::mt19937_64 rng(11);
  for (int t = 0; t < 200; ++t) {
    auto z = amc::testing::random_vector(8, rng, -5, 5);
    std::vector<double> s(z.size());
    const double m = *std::max_element(z.begin(), z.end());
    double tot = 0;
    for (std::size_t i = 0; i < z.size(); ++i) tot += s[i] = std::exp(z[i] - m);
    for (auto& v : s) v /= tot;
    EXPECT_EQ(argmax(s), argmax(z));
  }
}

TEST(Models, PredictInvariantToLogitRescaling) {
  auto m = init_model(mlp({16}, 5, 16), 3);
  auto x = random_batch(50, 16, 4);
  const auto before = predict_batch(m, x);
  const auto l = layout(m.arch);
  for (std::size_t s : {l.size() - 2, l.size() - 1}) {
    for (std::size_t i = 0; i < l[s].size(); ++i) m.theta[l[s].offset + i] *= 3.7;
  }
  EXPECT_EQ(predict_batch(m, x), before);
}

TEST(Models, InputGradientMatchesFiniteDifferences) {
  for (const auto& arch : small_zoo(16)) {
    auto m = init_model(arch, 21);
    auto x = random_batch(3, 16, 22);
    std::vector<std::size_t> y{0, 3, 1};
    auto g = input_gradient(m, x, y);
    auto f = [&](const std::vector<double>& v) {
      return mean_loss(m, Tensor(x.shape(), v), y) * 3.0;
    };
    auto fd = amc::testing::central_difference(f, x.storage());
    EXPECT_LE(amc::testing::relative_error(g.storage(), fd), 1e-6) << arch.describe();
  }
}

TEST(Models, ParamGradientMatchesFiniteDifferences) {
  // Every coordinate of the small models; a fixed random subset of the
  // large dense layers.
  std::mt19937_64 rng(30);
  for (const auto& arch : small_zoo(8)) {
    auto m = init_model(arch, 31);
    auto x = random_batch(4, 8, 32);
    std::vector<std::size_t> y{0, 1, 2, 3};
    std::vector<double> g;
    param_gradient(m, x, y, g);
    std::vector<std::size_t> coords(m.theta.size());
    std::iota(coords.begin(), coords.end(), 0);
    if (coords.size() > 1500) {
      std::shuffle(coords.begin(), coords.end(), rng);
      coords.resize(1500);
    }
    const double h = 1e-5;
    std::vector<double> got, want;
    for (auto i : coords) {
      auto p = m, q = m;
      p.theta[i] += h;
      q.theta[i] -= h;
      got.push_back(g[i]);
      want.push_back((mean_loss(p, x, y) - mean_loss(q, x, y)) / (2 * h));
    }
    EXPECT_LE(amc::testing::relative_error(got, want), 1e-6) << arch.describe();
  }
}

TEST(Models, FullSizeGradientsOnSampledCoordinates) {
  // Full 2x128 geometry; FD on a random subset of coordinates.
  std::mt19937_64 rng(41);
  for (const char* name : kZooMembers) {
    auto arch = zoo_architecture(name, 8);
    auto m = init_model(arch, 42);
    auto x = random_batch(2, 128, 43);
    std::vector<std::size_t> y{5, 2};
    std::vector<double> g;
    param_gradient(m, x, y, g);
    auto gx = input_gradient(m, x, y);
    const double h = 1e-5;
    std::vector<double> got, want, got_x, want_x;
    for (int t = 0; t < 24; ++t) {
      const std::size_t i = rng() % m.theta.size();
      auto p = m, q = m;
      p.theta[i] += h;
      q.theta[i] -= h;
      got.push_back(g[i]);
      want.push_back((mean_loss(p, x, y) - mean_loss(q, x, y)) / (2 * h));
      const std::size_t j = rng() % x.size();
      Tensor xp = x, xm = x;
      xp[j] += h;
      xm[j] -= h;
      got_x.push_back(gx[j]);
      want_x.push_back((mean_loss(m, xp, y) - mean_loss(m, xm, y)) * 2 / (2 * h));
    }
    EXPECT_LE(amc::testing::relative_error(got, want), 1e-6) << name;
    EXPECT_LE(amc::testing::relative_error(got_x, want_x), 1e-6) << name;
  }
}

TEST(Models, ConfidentPredictionHasVanishingInputGradient) {
  auto m = init_model(mlp({16}, 4, 16), 7);
  auto x = random_batch(1, 16, 8);
  const auto y = predict_batch(m, x)[0];
  const auto l = layout(m.arch);
  m.theta[l.back().offset + y] += 100.0;
  auto g = input_gradient(m, x, std::vector<std::size_t>{y});
  EXPECT_LE(l2_norm(g.data()), 1e-6);
}

TEST(Models, ZeroFirstLayerGivesZeroInputGradient) {
  for (const auto& arch : small_zoo(16)) {
    auto m = init_model(arch, 9);
    const auto l = layout(arch);
    std::fill_n(m.theta.begin() + l[0].offset, l[0].size(), 0.0);
    Tensor x(Shape{1, 2, 16}, 0.0);
    auto g = input_gradient(m, x, std::vector<std::size_t>{2});
    for (double v : g.data()) EXPECT_EQ(v, 0.0);
  }
}

namespace {

// Two Gaussian blobs in a 2x8 frame: class c has mean (2c - 1) * 0.8 on every entry.
void blobs(std::size_t n, std::uint64_t seed, Tensor& x, std::vector<std::size_t>& y) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> noise(0.0, 1.0);
  x = Tensor(Shape{n, 2, 8});
  y.resize(n);
  for (std::size_t k = 0; k < n; ++k) {
    y[k] = k % 2;
    for (std::size_t j = 0; j < 16; ++j) x[k * 16 + j] = (2.0 * y[k] - 1.0) * 0.8 + noise(rng);
  }
}

// Independent oracle: plain batch-gradient logistic regression on the same data.
double logistic_oracle_accuracy(const Tensor& x, const std::vector<std::size_t>& y) {
  const std::size_t n = y.size(), d = 16;
  std::vector<double> w(d, 0.0);
  double b = 0.0;
  for (int it = 0; it < 2000; ++it) {
    std::vector<double> gw(d, 0.0);
    double gb = 0.0;
    for (std::size_t k = 0; k < n; ++k) {
      double z = b;
      for (std::size_t j = 0; j < d; ++j) z += w[j] * x[k * d + j];
      const double r = 1.0 / (1.0 + std::exp(-z)) - static_cast<double>(y[k]);
      for (std::size_t j = 0; j < d; ++j) gw[j] += r * x[k * d + j];
      gb += r;
    }
    for (std::size_t j = 0; j < d; ++j) w[j] -= 0.5 * gw[j] / n;
    b -= 0.5 * gb / n;
  }
  std::size_t hit = 0;
  for (std::size_t k = 0; k < n; ++k) {
    double z = b;
    for (std::size_t j = 0; j < d; ++j) z += w[j] * x[k * d + j];
    hit += (z > 0) == (y[k] == 1);
  }
  return static_cast<double>(hit) / n;
}

}  // namespace

TEST(Models, TrainSeparableBlobs) {
  Tensor x;
  std::vector<std::size_t> y;
  blobs(200, 1, x, y);
  ASSERT_EQ(logistic_oracle_accuracy(x, y), 1.0) << "toy problem is not linearly separable";
  TrainConfig cfg;
  cfg.optimizer.lr = 1e-2;
  cfg.epochs = 200;
  cfg.batch_size = 32;
  auto r = train(init_model(mlp({8}, 2, 8), 1), x, y, cfg);
  EXPECT_GE(accuracy(r.model, x, y), 0.99);
  EXPECT_EQ(r.history.size(), 200u);
  EXPECT_LT(r.history.back(), r.history.front());
}

TEST(Models, TrainZeroLearningRate) {
  Tensor x;
  std::vector<std::size_t> y;
  blobs(64, 2, x, y);
  TrainConfig cfg;
  cfg.optimizer = {OptimizerKind::SGD, 0.0};
  cfg.epochs = 5;
  cfg.batch_size = 64;
  auto init = init_model(mlp({8}, 2, 8), 1);
  auto r = train(init, x, y, cfg);
  EXPECT_EQ(r.model, init);
  // Minibatch order changes summation order only.
  for (double h : r.history) EXPECT_NEAR(h, r.history.front(), 1e-14);
}

TEST(Models, TrainDeterministic) {
  Tensor x;
  std::vector<std::size_t> y;
  blobs(64, 3, x, y);
  TrainConfig cfg;
  cfg.epochs = 3;
  cfg.batch_size = 16;
  auto init = init_model(vtcnn_lite(2, 8), 4);
  auto a = train(init, x, y, cfg), b = train(init, x, y, cfg);
  EXPECT_EQ(a.model, b.model);
  EXPECT_EQ(a.history, b.history);
}

TEST(Models, TrainDivergenceReported) {
  Tensor x;
  std::vector<std::size_t> y;
  blobs(32, 4, x, y);
  for (auto& v : x.storage()) v *= 1e150;
  TrainConfig cfg;
  cfg.optimizer = {OptimizerKind::SGD, 1e10};
  cfg.epochs = 5;
  EXPECT_THROW(train(init_model(mlp({8}, 2, 8), 1), x, y, cfg), Error);
}

TEST(Models, SgdAndAdamSteps) {
  std::vector<double> th{1.0, -2.0};
  std::vector<double> g{0.5, -1.0};
  Optimizer sgd({OptimizerKind::SGD, 0.1}, 2);
  sgd.step(th, g);
  EXPECT_DOUBLE_EQ(th[0], 0.95);
  EXPECT_DOUBLE_EQ(th[1], -1.9);
  // First Adam step moves each coordinate by lr * sign(g) (up to eps).
  std::vector<double> a{0.0, 0.0};
  Optimizer adam({OptimizerKind::Adam, 0.01}, 2);
  adam.step(a, g);
  EXPECT_NEAR(a[0], -0.01, 1e-9);
  EXPECT_NEAR(a[1], 0.01, 1e-9);
}

TEST(Models, CheckpointRoundTrip) {
  for (const auto& arch : small_zoo(16)) {
    auto m = init_model(arch, 13);
    Metadata meta{{"algorithm", "maml"}, {"cfg_hash", "abc"}};
    auto p = std::filesystem::temp_directory_path() / "amc_models_ckpt.amcm";
    save_checkpoint(m, p, meta);
    auto c = load_checkpoint(p);
    EXPECT_EQ(c.model, m);
    EXPECT_EQ(c.metadata, meta);
  }
}

TEST(Models, CheckpointCorruption) {
  auto bytes = encode_checkpoint(init_model(mlp({4}, 3, 8), 1));
  auto bad = bytes;
  bad[bad.size() / 2] ^= 1;
  EXPECT_THROW(decode_checkpoint(bad), FormatError);
  auto shortb = bytes;
  shortb.resize(shortb.size() - 9);
  EXPECT_THROW(decode_checkpoint(shortb), FormatError);
  bad = bytes;
  bad[1] = 'X';
  EXPECT_THROW(decode_checkpoint(bad), FormatError);
}

TEST(Models, ModelHashDistinguishesParameters) {
  auto a = init_model(mlp({4}, 3, 8), 1);
  auto b = init_model(mlp({4}, 3, 8), 2);
  EXPECT_EQ(model_hash(a), model_hash(a));
  EXPECT_NE(model_hash(a), model_hash(b));
}
