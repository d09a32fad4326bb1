#include <gtest/gtest.h>

#include <cmath>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "amc/autodiff.hpp"
#include "support/finite_difference.hpp"

namespace amc::ad {
namespace {

using amc::testing::central_difference;
using amc::testing::random_vector;
using amc::testing::relative_error;

using OpFn = std::function<Var(Tape&, const std::vector<Var>&)>;

struct OpCase {
  std::string name;
  std::vector<Shape> inputs;
  OpFn fn;
  double lo = -1.0;
  double hi = 1.0;
  bool second_order = true;
};

// Contracts the op output with a fixed random tensor so the scalar loss
// exercises the whole Jacobian.
Var contracted(Tape& t, const OpFn& fn, const std::vector<Var>& in, std::uint64_t seed) {
  Var y = fn(t, in);
  std::mt19937_64 rng(seed);
  Tensor r(y.shape(), random_vector(y.value().size(), rng));
  return sum(mul(y, t.constant(std::move(r))));
}

std::vector<Tensor> random_inputs(const OpCase& c, std::mt19937_64& rng) {
  std::vector<Tensor> xs;
  for (const auto& s : c.inputs) xs.emplace_back(s, random_vector(numel(s), rng, c.lo, c.hi));
  return xs;
}

double eval_loss(const OpCase& c, const std::vector<Tensor>& xs) {
  Tape t;
  std::vector<Var> in;
  for (const auto& x : xs) in.push_back(t.variable(x));
  return contracted(t, c.fn, in, 99).value().item();
}

void check_first_order(const OpCase& c, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  auto xs = random_inputs(c, rng);
  Tape t;
  std::vector<Var> in;
  for (const auto& x : xs) in.push_back(t.variable(x));
  auto g = gradients(contracted(t, c.fn, in, 99), in);
  for (std::size_t k = 0; k < xs.size(); ++k) {
    auto f = [&](const std::vector<double>& v) {
      auto ys = xs;
      ys[k] = Tensor(xs[k].shape(), v);
      return eval_loss(c, ys);
    };
    auto fd = central_difference(f, xs[k].storage());
    EXPECT_LE(relative_error(g[k].storage(), fd), 1e-6) << c.name << " input " << k;
  }
}

// Hessian-vector product from grad2 against finite differences of the
// first-order gradient along the same direction.
void check_second_order(const OpCase& c, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  auto xs = random_inputs(c, rng);
  std::vector<Tensor> dirs;
  for (const auto& x : xs) dirs.emplace_back(x.shape(), random_vector(x.size(), rng));

  Tape t(true);
  std::vector<Var> in;
  for (const auto& x : xs) in.push_back(t.variable(x));
  Var loss = contracted(t, c.fn, in, 99);
  auto hvp = grad2(loss, in, in, [&](std::span<const Var> g) {
    Var acc;
    for (std::size_t k = 0; k < g.size(); ++k) {
      Var term = sum(mul(g[k], t.constant(dirs[k])));
      acc = acc.valid() ? add(acc, term) : term;
    }
    return acc;
  });

  auto grad_at = [&](double step) {
    Tape tt;
    std::vector<Var> v;
    for (std::size_t k = 0; k < xs.size(); ++k) {
      Tensor shifted = xs[k];
      for (std::size_t i = 0; i < shifted.size(); ++i) shifted[i] += step * dirs[k][i];
      v.push_back(tt.variable(shifted));
    }
    return gradients(contracted(tt, c.fn, v, 99), v);
  };
  const double h = 1e-5;
  auto gp = grad_at(h);
  auto gm = grad_at(-h);
  for (std::size_t k = 0; k < xs.size(); ++k) {
    std::vector<double> fd(xs[k].size());
    for (std::size_t i = 0; i < fd.size(); ++i) fd[i] = (gp[k][i] - gm[k][i]) / (2 * h);
    EXPECT_LE(relative_error(hvp[k].storage(), fd, 1e-8), 1e-6) << c.name << " input " << k;
  }
}

std::vector<OpCase> op_cases() {
  std::vector<OpCase> cs;
  cs.push_back({"add", {{3, 4}, {3, 4}}, [](Tape&, auto& v) { return add(v[0], v[1]); }});
  cs.push_back({"sub", {{5}, {5}}, [](Tape&, auto& v) { return sub(v[0], v[1]); }});
  cs.push_back({"mul", {{2, 3}, {2, 3}}, [](Tape&, auto& v) { return mul(v[0], v[1]); }});
  cs.push_back({"affine", {{4}}, [](Tape&, auto& v) { return affine(v[0], -2.5, 0.3); }});
  cs.push_back({"scale_by", {{3, 2}, {1}}, [](Tape&, auto& v) { return scale_by(v[0], v[1]); }});
  cs.push_back({"sum", {{2, 5}}, [](Tape&, auto& v) { return sum(mul(v[0], v[0])); }});
  cs.push_back({"broadcast", {{1}}, [](Tape&, auto& v) {
                  return mul(broadcast(v[0], {3, 2}), broadcast(v[0], {3, 2}));
                }});
  cs.push_back({"reshape", {{2, 6}}, [](Tape&, auto& v) {
                  return mul(reshape(v[0], {3, 4}), reshape(v[0], {3, 4}));
                }});
  for (int flags = 0; flags < 4; ++flags) {
    const bool ta = flags & 1, tb = flags & 2;
    Shape sa = ta ? Shape{4, 3} : Shape{3, 4};
    Shape sb = tb ? Shape{5, 4} : Shape{4, 5};
    cs.push_back({"matmul" + std::to_string(flags), {sa, sb},
                  [=](Tape&, auto& v) { return matmul(v[0], v[1], ta, tb); }});
  }
  cs.push_back({"add_bias2d", {{4, 3}, {3}}, [](Tape&, auto& v) {
                  Var y = add_bias(v[0], v[1]);
                  return mul(y, y);
                }});
  cs.push_back({"add_bias3d", {{2, 3, 5}, {3}}, [](Tape&, auto& v) {
                  Var y = add_bias(v[0], v[1]);
                  return mul(y, y);
                }});
  cs.push_back({"bias_grad", {{2, 3, 4}}, [](Tape&, auto& v) {
                  Var y = bias_grad(v[0]);
                  return mul(y, y);
                }});
  cs.push_back({"expand_bias", {{3}}, [](Tape&, auto& v) {
                  Var y = expand_bias(v[0], {2, 3, 4});
                  return mul(y, y);
                }});
  cs.push_back({"conv1d", {{2, 3, 9}, {4, 3, 5}}, [](Tape&, auto& v) { return conv1d(v[0], v[1]); }});
  cs.push_back({"conv1d_k1", {{2, 2, 6}, {3, 2, 1}}, [](Tape&, auto& v) { return conv1d(v[0], v[1]); }});
  cs.push_back({"conv1d_even_kernel", {{1, 2, 7}, {2, 2, 4}},
                [](Tape&, auto& v) { return conv1d(v[0], v[1]); }});
  cs.push_back({"conv1d_input_grad", {{2, 4, 8}, {4, 3, 3}},
                [](Tape&, auto& v) { return conv1d_input_grad(v[0], v[1]); }});
  cs.push_back({"conv1d_weight_grad", {{2, 3, 8}, {2, 4, 8}},
                [](Tape&, auto& v) { return conv1d_weight_grad(v[0], v[1], 5); }});
  cs.push_back({"relu", {{12}}, [](Tape&, auto& v) { return mul(relu(v[0]), v[0]); }});
  cs.push_back({"tanh", {{3, 3}}, [](Tape&, auto& v) { return tanh(v[0]); }});
  cs.push_back({"abs", {{10}}, [](Tape&, auto& v) { return mul(abs(v[0]), v[0]); }});
  cs.push_back({"sqrt", {{6}}, [](Tape&, auto& v) { return sqrt(v[0]); }, 0.5, 2.0});
  cs.push_back({"recip", {{6}}, [](Tape&, auto& v) { return recip(v[0]); }, 0.5, 2.0});
  cs.push_back({"clamp", {{10}}, [](Tape&, auto& v) { return mul(clamp(v[0], -0.5, 0.5), v[0]); }});
  cs.push_back({"softmax", {{3, 4}}, [](Tape&, auto& v) { return softmax(v[0]); }});
  cs.push_back({"rowsum_broadcast", {{3, 4}}, [](Tape&, auto& v) {
                  return mul(rowsum_broadcast(v[0]), v[0]);
                }});
  cs.push_back({"softmax_cross_entropy", {{4, 5}}, [](Tape&, auto& v) {
                  std::vector<std::size_t> labels{0, 3, 4, 1};
                  return softmax_cross_entropy(v[0], labels);
                }});
  cs.push_back({"softmax_cross_entropy_sum", {{3, 3}}, [](Tape&, auto& v) {
                  std::vector<std::size_t> labels{2, 0, 1};
                  return softmax_cross_entropy(v[0], labels, Reduction::Sum);
                }});
  cs.push_back({"pick", {{3, 4}}, [](Tape&, auto& v) {
                  std::vector<std::size_t> idx{1, 3, 0};
                  Var p = pick(v[0], idx);
                  return mul(p, p);
                }});
  cs.push_back({"scatter", {{3}}, [](Tape&, auto& v) {
                  auto idx = std::make_shared<const std::vector<std::size_t>>(
                      std::vector<std::size_t>{2, 0, 1});
                  Var s = scatter(v[0], idx, 4);
                  return mul(s, s);
                }});
  cs.push_back({"max_abs", {{7}}, [](Tape&, auto& v) {
                  Var m = max_abs(v[0]);
                  return mul(m, m);
                }});
  cs.push_back({"norm1", {{6}}, [](Tape&, auto& v) { return norm_p(v[0], 1.0); }});
  cs.push_back({"norm2", {{6}}, [](Tape&, auto& v) { return norm_p(v[0], 2.0); }});
  cs.push_back({"norm_inf", {{6}}, [](Tape&, auto& v) {
                  return norm_p(v[0], std::numeric_limits<double>::infinity());
                }});
  return cs;
}

TEST(Autodiff, EveryOpMatchesFiniteDifferences) {
  const auto cases = op_cases();
  for (const auto& c : cases) {
    for (std::uint64_t seed = 1; seed <= 3; ++seed) check_first_order(c, seed * 7919);
  }
}

TEST(Autodiff, EveryOpHasCorrectSecondOrderSweep) {
  const auto cases = op_cases();
  for (const auto& c : cases) {
    if (!c.second_order) continue;
    for (std::uint64_t seed = 1; seed <= 2; ++seed) check_second_order(c, seed * 104729);
  }
}

TEST(Autodiff, ForwardExamples) {
  Graph square([](Inputs& in) {
    Var x = in("x");
    return x * x;
  });
  EXPECT_DOUBLE_EQ(forward(square, {{"x", Tensor::scalar(3.0)}}).value().item(), 9.0);

  Graph clamped([](Inputs& in) { return sum(clamp(in("x"), -1.0, 1.0)); });
  EXPECT_DOUBLE_EQ(forward(clamped, {{"x", Tensor::vector({-2.0, 0.5, 2.0})}}).value().item(),
                   0.5);

  Graph ce([](Inputs& in) {
    std::vector<std::size_t> label{1};
    return softmax_cross_entropy(reshape(in("z"), {1, 3}), label);
  });
  auto ev = forward(ce, {{"z", Tensor::vector({0.0, 0.0, 0.0})}});
  EXPECT_NEAR(ev.value().item(), std::log(3.0), 1e-15);
  auto g = grad(ev, {"z"});
  EXPECT_NEAR(g[0][0], 1.0 / 3.0, 1e-15);
  EXPECT_NEAR(g[0][1], -2.0 / 3.0, 1e-15);
  EXPECT_NEAR(g[0][2], 1.0 / 3.0, 1e-15);
}

TEST(Autodiff, ForwardErrors) {
  Graph g([](Inputs& in) { return add(in("a"), in("b")); });
  EXPECT_THROW(forward(g, {{"a", Tensor::vector({1.0})}}), ValueError);
  EXPECT_THROW(forward(g, {{"a", Tensor::vector({1.0})}, {"b", Tensor::vector({1.0, 2.0})}}),
               ShapeError);
  EXPECT_THROW(forward(g, {{"a", Tensor::vector({NAN})}, {"b", Tensor::vector({1.0})}}),
               ValueError);
}

TEST(Autodiff, GradOfSquare) {
  Graph square([](Inputs& in) {
    Var x = in("x");
    return x * x;
  });
  auto ev = forward(square, {{"x", Tensor::scalar(3.0)}});
  EXPECT_DOUBLE_EQ(grad(ev, {"x"})[0].item(), 6.0);
}

TEST(Autodiff, GradErrors) {
  Tape t;
  Var x = t.variable(Tensor::vector({1.0, 2.0}));
  Var y = mul(x, x);
  EXPECT_THROW(grad(y, {x}), ShapeError);  // non-scalar root

  Tape other;
  Var z = other.variable(Tensor::scalar(1.0));
  EXPECT_THROW(grad(sum(y), {z}), ValueError);

  EXPECT_THROW(grad(sum(y), {x}, true), ValueError);  // tape is first-order
}

TEST(Autodiff, UnreachableVariableGetsZeroGradient) {
  Tape t;
  Var x = t.variable(Tensor::vector({1.0, 2.0}));
  Var unused = t.variable(Tensor(Shape{2, 2}, 5.0));
  auto g = gradients(sum(mul(x, x)), {x, unused});
  EXPECT_EQ(g[1], Tensor(Shape{2, 2}, 0.0));
}

TEST(Autodiff, GradientsLeaveTapeSizeUnchanged) {
  Tape t;
  Var x = t.variable(Tensor::vector({1.0, 2.0, 3.0}));
  Var loss = sum(tanh(mul(x, x)));
  const auto before = t.size();
  gradients(loss, {x});
  EXPECT_EQ(t.size(), before);
}

TEST(Autodiff, GradientIsLinearInTheRoot) {
  std::mt19937_64 rng(5);
  Tensor xv(Shape{6}, random_vector(6, rng));
  auto f = [](Var x) { return sum(tanh(x)); };
  auto g = [](Var x) { return sum(mul(x, affine(x, 3.0, 1.0))); };

  Tape t1;
  Var x1 = t1.variable(xv);
  auto gf = gradients(f(x1), {x1})[0];
  Tape t2;
  Var x2 = t2.variable(xv);
  auto gg = gradients(g(x2), {x2})[0];
  Tape t3;
  Var x3 = t3.variable(xv);
  auto gs = gradients(add(f(x3), g(x3)), {x3})[0];
  for (std::size_t i = 0; i < xv.size(); ++i) EXPECT_EQ(gs[i], gf[i] + gg[i]);
}

TEST(Autodiff, SignHasZeroAdjoint) {
  Tape t;
  Var x = t.variable(Tensor::vector({-1.5, 0.0, 2.0}));
  EXPECT_EQ(sign(x).value(), Tensor::vector({-1.0, 0.0, 1.0}));
  auto g = gradients(sum(mul(sign(x), t.constant(Tensor::vector({1.0, 2.0, 3.0})))), {x});
  EXPECT_EQ(g[0], Tensor(Shape{3}, 0.0));
}

TEST(Autodiff, Grad2Cubic) {
  Tape t(true);
  Var th = t.variable(Tensor::scalar(2.0));
  Var loss = mul(mul(th, th), th);
  auto second = grad2(loss, std::vector<Var>{th}, std::vector<Var>{th},
                      [](std::span<const Var> g) { return g[0]; });
  EXPECT_DOUBLE_EQ(second[0].item(), 12.0);
}

TEST(Autodiff, Grad2QuadraticFormIsExactHessianAction) {
  Tape t(true);
  Var th = t.variable(Tensor::vector({0.7, -1.3}));
  Var a = t.constant(Tensor(Shape{2, 2}, std::vector<double>{2.0, 0.0, 0.0, 4.0}));
  Var thc = reshape(th, {2, 1});
  Var loss = scale(sum(mul(thc, matmul(a, thc))), 0.5);
  Var v = t.constant(Tensor::vector({1.0, 1.0}));
  auto hv = grad2(loss, std::vector<Var>{th}, std::vector<Var>{th},
                  [&](std::span<const Var> g) { return sum(mul(g[0], v)); });
  EXPECT_EQ(hv[0], Tensor::vector({2.0, 4.0}));
}

TEST(Autodiff, Grad2Errors) {
  {
    Tape t;
    Var th = t.variable(Tensor::scalar(1.0));
    EXPECT_THROW(grad2(mul(th, th), std::vector<Var>{th}, std::vector<Var>{th},
                       [](std::span<const Var> g) { return g[0]; }),
                 ValueError);
  }
  {
    Tape t(true);
    Var th = t.variable(Tensor::vector({1.0, -2.0}));
    Var loss = sum(mul(mul(th, th), th));
    EXPECT_THROW(grad2(loss, std::vector<Var>{th}, std::vector<Var>{th},
                       [](std::span<const Var> g) { return sum(sign(g[0])); }),
                 ValueError);
  }
}

// Small MLP, gradient of the loss with respect to every parameter.
TEST(Autodiff, SmallMlpMatchesFiniteDifferences) {
  std::mt19937_64 rng(11);
  const std::size_t batch = 5, in = 6, hidden = 7, classes = 3;
  std::vector<Tensor> params{Tensor({in, hidden}, random_vector(in * hidden, rng)),
                             Tensor({hidden}, random_vector(hidden, rng)),
                             Tensor({hidden, classes}, random_vector(hidden * classes, rng)),
                             Tensor({classes}, random_vector(classes, rng))};
  Tensor x({batch, in}, random_vector(batch * in, rng));
  std::vector<std::size_t> labels{0, 2, 1, 1, 0};
  auto loss_of = [&](Tape& t, const std::vector<Var>& p) {
    Var h = tanh(add_bias(matmul(t.constant(x), p[0]), p[1]));
    return softmax_cross_entropy(add_bias(matmul(h, p[2]), p[3]), labels);
  };
  Tape t;
  std::vector<Var> p;
  for (auto& v : params) p.push_back(t.variable(v));
  auto g = gradients(loss_of(t, p), p);
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto f = [&](const std::vector<double>& v) {
      Tape tt;
      std::vector<Var> q;
      for (std::size_t j = 0; j < params.size(); ++j) {
        q.push_back(tt.variable(j == k ? Tensor(params[k].shape(), v) : params[j]));
      }
      return loss_of(tt, q).value().item();
    };
    EXPECT_LE(relative_error(g[k].storage(), central_difference(f, params[k].storage())), 1e-6);
  }
}

}  // namespace
}  // namespace amc::ad
