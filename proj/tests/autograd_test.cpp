#include <gtest/gtest.h>

#include <random>

#include "kvmem/gradcheck.hpp"
#include "support/gradient_cases.hpp"

using namespace kvmem;
using kvmem::testing::random_tensor;

TEST(Backward, SumGivesAllOnes) {
  Tensor<double> x({2, 3}, 0.25);
  x.set_requires_grad(true);
  x.zero_grad();
  Tape<double> tape;
  tape.backward(sum(tape, tape.param(x)));
  for (double g : x.grad()) EXPECT_EQ(g, 1.0);
}

TEST(Backward, KeyGradientReplicatesHiddenState) {
  // loss = sum(h K^T), h = [[1, 2]]: every key row gets h.
  Tensor<double> h = Tensor<double>::matrix({{1, 2}});
  Tensor<double> K = Tensor<double>::matrix({{0.5, -1}, {3, 2}, {0, 7}});
  K.set_requires_grad(true);
  K.zero_grad();
  Tape<double> tape;
  tape.backward(sum(tape, matmul_bt(tape, tape.input(h), tape.param(K))));
  for (std::size_t r = 0; r < 3; ++r) {
    EXPECT_EQ(K.grad()[r * 2 + 0], 1.0);
    EXPECT_EQ(K.grad()[r * 2 + 1], 2.0);
  }
}

TEST(Backward, GradientsAccumulateUntilZeroed) {
  Tensor<double> x({3}, 1.0);
  x.set_requires_grad(true);
  x.zero_grad();
  for (int i = 0; i < 2; ++i) {
    Tape<double> tape;
    tape.backward(sum(tape, tape.param(x)));
  }
  for (double g : x.grad()) EXPECT_EQ(g, 2.0);
  x.zero_grad();
  for (double g : x.grad()) EXPECT_EQ(g, 0.0);
}

TEST(Backward, FanOutAddsContributions) {
  // loss = sum(x * x) -> grad 2x.
  Tensor<double> x = Tensor<double>::vector({1.5, -2});
  x.set_requires_grad(true);
  x.zero_grad();
  Tape<double> tape;
  Var v = tape.param(x);
  tape.backward(sum(tape, mul(tape, v, v)));
  EXPECT_DOUBLE_EQ(x.grad()[0], 3.0);
  EXPECT_DOUBLE_EQ(x.grad()[1], -4.0);
}

TEST(Backward, RejectsNonScalarAndForeignLoss) {
  Tensor<double> x({2, 2}, 1.0);
  x.set_requires_grad(true);
  Tape<double> tape;
  Var v = tape.param(x);
  EXPECT_THROW(tape.backward(v), ShapeError);
  EXPECT_THROW(tape.backward(Var{99}), std::out_of_range);
}

TEST(Backward, FrozenLeavesGetNoGradient) {
  Tensor<double> w({2, 2}, 1.0);
  Tensor<double> x({1, 2}, 1.0);
  x.set_requires_grad(true);
  Tape<double> tape;
  tape.backward(sum(tape, matmul(tape, tape.param(x), tape.param(w))));
  EXPECT_TRUE(x.has_grad());
  EXPECT_FALSE(w.has_grad());
}

TEST(GradCheck, QuadraticIsExact) {
  const double err = grad_check(
      [](Tape<double>& t, Var x) { return sum(t, mul(t, x, x)); },
      Tensor<double>::vector({3.0}));
  EXPECT_LT(err, 1e-9);
}

TEST(GradCheck, RejectsNonScalarFunction) {
  EXPECT_THROW(grad_check([](Tape<double>&, Var x) { return x; },
                          Tensor<double>::vector({1.0, 2.0})),
               ShapeError);
}

TEST(GradCheck, DetectsAWrongGradient) {
  // A primitive whose backward is deliberately off by a factor of two.
  auto broken = [](Tape<double>& t, Var x) {
    const std::size_t xi = x.id;
    Var y = t.record(
        "broken_square", {xi},
        [xi](const Tape<double>& tp) {
          auto out = tp.value(xi).detached();
          for (auto& v : out.data()) v = v * v;
          return out;
        },
        [xi](Tape<double>& tp, std::size_t self) {
          auto g = tp.grad(self);
          auto d = tp.grad(xi);
          for (std::size_t k = 0; k < d.size(); ++k) d[k] += g[k] * 4.0 * tp.value(xi)[k];
        });
    return sum(t, y);
  };
  EXPECT_GT(grad_check(broken, Tensor<double>::vector({1.0, 2.0})), 0.4);
}

class PrimitiveGradients : public ::testing::TestWithParam<std::size_t> {};

TEST_P(PrimitiveGradients, MatchFiniteDifferencesOnHundredSeeds) {
  const auto cases = kvmem::testing::primitive_cases();
  const auto& c = cases.at(GetParam());
  double worst = 0.0;
  for (std::uint64_t seed = 0; seed < 100; ++seed) worst = std::max(worst, c.max_error(seed));
  EXPECT_LT(worst, 1e-6) << c.name;
}

INSTANTIATE_TEST_SUITE_P(
    AllPrimitives, PrimitiveGradients,
    ::testing::Range<std::size_t>(0, kvmem::testing::primitive_cases().size()),
    [](const auto& info) { return kvmem::testing::primitive_cases()[info.param].name; });

TEST(ComposedGradients, StandardFfnFourByFour) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    EXPECT_LT(kvmem::testing::standard_ffn_case(seed), 1e-6) << seed;
  }
}

TEST(ComposedGradients, SwigluBlock) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    EXPECT_LT(kvmem::testing::swiglu_case(seed), 1e-6) << seed;
  }
}

TEST(Tape, NodesAreTopologicallyOrdered) {
  std::mt19937_64 rng(3);
  Tensor<double> a = random_tensor(rng, {3, 4});
  Tensor<double> b = random_tensor(rng, {5, 4});
  a.set_requires_grad(true);
  Tape<double> tape;
  Var y = relu(tape, matmul_bt(tape, tape.param(a), tape.input(b)));
  sum(tape, mul(tape, y, y));
  for (std::size_t i = 0; i < tape.size(); ++i)
    for (auto in : tape.inputs(i)) EXPECT_LT(in, i);
}

TEST(Tape, ReplayIsBitExact) {
  std::mt19937_64 rng(11);
  Tensor<float> x = random_tensor(rng, {4, 6}).cast<float>();
  Tensor<float> g = random_tensor(rng, {6}).cast<float>();
  Tensor<float> b = random_tensor(rng, {6}).cast<float>();
  Tape<float> tape;
  Var n = layer_norm(tape, tape.input(x), tape.input(g), tape.input(b));
  Var a = causal_attention(tape, n, n, n, 2);
  cross_entropy(tape, swish(tape, a), {RowTarget{3, 1}, RowTarget{0, 5}});
  const auto replayed = tape.replay();
  ASSERT_EQ(replayed.size(), tape.size());
  for (std::size_t i = 0; i < tape.size(); ++i) {
    EXPECT_TRUE(replayed[i].same_values(tape.value(i))) << tape.rule(i);
  }
}

TEST(Tape, NonFiniteValueIsRejected) {
  Tape<double> tape;
  auto big = tape.constant(Tensor<double>::scalar(1e308));
  EXPECT_THROW(scale(tape, big, 10.0), NonFiniteError);
}

TEST(CausalAttention, FutureTokensDoNotLeak) {
  std::mt19937_64 rng(2);
  Tensor<double> q = random_tensor(rng, {5, 4});
  Tensor<double> k = random_tensor(rng, {5, 4});
  Tensor<double> v = random_tensor(rng, {5, 4});
  Tape<double> t1;
  auto before = t1.value(causal_attention(t1, t1.input(q), t1.input(k), t1.input(v), 2)).detached();
  for (std::size_t c = 0; c < 4; ++c) {
    k(4, c) += 3.0;
    v(4, c) -= 5.0;
  }
  Tape<double> t2;
  auto after = t2.value(causal_attention(t2, t2.input(q), t2.input(k), t2.input(v), 2)).detached();
  for (std::size_t r = 0; r < 4; ++r)
    for (std::size_t c = 0; c < 4; ++c) EXPECT_EQ(before(r, c), after(r, c));
}
