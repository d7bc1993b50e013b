#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "fd.hpp"
#include "oracles.hpp"
#include "scin/ops.hpp"

using scin::Shape;
using scin::Tensor;
using T = Tensor<double>;

using fd::max_grad_error;
using fd::random_tensor;

TEST(Conv3d, ZeroInputGivesBias) {
  std::mt19937_64 rng(1);
  T x(Shape{1, 2, 4, 4, 4});
  auto w = random_tensor({3, 2, 3, 3, 3}, rng, false);
  T b(Shape{3}, std::vector<double>{0.5, -1.0, 2.0});
  auto y = scin::conv3d(x, w, b, 1, 1);
  ASSERT_EQ(y.shape(), (Shape{1, 3, 4, 4, 4}));
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t i = 0; i < 64; ++i) EXPECT_EQ(y.data()[c * 64 + i], b.data()[c]);
}

TEST(Conv3d, DeltaKernelIsIdentity) {
  std::mt19937_64 rng(2);
  auto x = random_tensor({2, 2, 4, 5, 3}, rng, false);
  T w(Shape{2, 2, 3, 3, 3});
  for (std::size_t c = 0; c < 2; ++c) w.data()[((c * 2 + c) * 27) + 13] = 1.0;
  auto y = scin::conv3d(x, w, T(Shape{2}), 1, 1);
  ASSERT_EQ(y.shape(), x.shape());
  for (std::size_t i = 0; i < x.numel(); ++i) EXPECT_EQ(y.data()[i], x.data()[i]);
}

TEST(Conv3d, MatchesNaiveOracle) {
  struct Case {
    std::size_t B, Cin, Cout, D, H, W, stride, pad;
  };
  const Case cases[] = {{1, 1, 1, 4, 4, 4, 1, 1}, {2, 3, 2, 5, 4, 6, 1, 1}, {1, 2, 3, 6, 6, 5, 2, 1},
                        {1, 2, 2, 5, 5, 5, 1, 0}, {2, 1, 2, 7, 6, 5, 2, 0}};
  std::mt19937_64 rng(3);
  for (const auto& c : cases) {
    auto x = random_tensor({c.B, c.Cin, c.D, c.H, c.W}, rng, false);
    auto w = random_tensor({c.Cout, c.Cin, 3, 3, 3}, rng, false);
    auto b = random_tensor({c.Cout}, rng, false);
    std::array<std::size_t, 3> od{};
    const auto want = oracle::conv3d(x.values(), c.B, c.Cin, c.D, c.H, c.W, w.values(), c.Cout, 3, b.values(),
                                     c.stride, c.pad, od);
    auto y = scin::conv3d(x, w, b, c.stride, c.pad);
    ASSERT_EQ(y.shape(), (Shape{c.B, c.Cout, od[0], od[1], od[2]}));
    for (std::size_t i = 0; i < want.size(); ++i) EXPECT_NEAR(y.data()[i], want[i], 1e-12);
  }
}

TEST(Conv3d, PointwiseMatchesOracle) {
  std::mt19937_64 rng(4);
  auto x = random_tensor({2, 3, 3, 4, 5}, rng, false);
  auto w = random_tensor({2, 3, 1, 1, 1}, rng, false);
  auto b = random_tensor({2}, rng, false);
  std::array<std::size_t, 3> od{};
  const auto want = oracle::conv3d(x.values(), 2, 3, 3, 4, 5, w.values(), 2, 1, b.values(), 1, 0, od);
  auto y = scin::conv3d(x, w, b, 1, 0);
  for (std::size_t i = 0; i < want.size(); ++i) EXPECT_NEAR(y.data()[i], want[i], 1e-12);
}

TEST(Conv3d, ShapeErrors) {
  T x(Shape{1, 2, 4, 4, 4});
  EXPECT_THROW(scin::conv3d(x, T(Shape{1, 3, 3, 3, 3}), T(Shape{1})), scin::ShapeError);
  EXPECT_THROW(scin::conv3d(T(Shape{1, 2, 2, 2, 2}), T(Shape{1, 2, 3, 3, 3}), T(Shape{1}), 1, 0),
               scin::ShapeError);
  EXPECT_THROW(scin::conv3d(x, T(Shape{1, 2, 3, 3, 3}), T(Shape{1}), 3, 1), scin::ShapeError);
  EXPECT_THROW(scin::conv3d(x, T(Shape{1, 2, 3, 3, 3}), T(Shape{1}), 1, 2), scin::ShapeError);
  EXPECT_THROW(scin::conv3d(x, T(Shape{1, 2, 5, 5, 5}), T(Shape{1})), scin::ShapeError);
}

TEST(Conv3d, GradientsMatchFiniteDifferences) {
  std::mt19937_64 rng(5);
  for (std::size_t stride : {1u, 2u}) {
    std::vector<T> in{random_tensor({1, 2, 8, 8, 8}, rng), random_tensor({2, 2, 3, 3, 3}, rng, true, 0.3),
                      random_tensor({2}, rng)};
    const double err =
        max_grad_error([stride](std::vector<T>& v) { return scin::conv3d(v[0], v[1], v[2], stride, 1); }, in, 6);
    EXPECT_LT(err, 1e-4) << "stride " << stride;
  }
}

TEST(LeakyRelu, Definition) {
  T x(Shape{3}, std::vector<double>{-1.0, 0.0, 2.0});
  auto y = scin::leaky_relu(x, 0.01);
  EXPECT_DOUBLE_EQ(y.data()[0], -0.01);
  EXPECT_DOUBLE_EQ(y.data()[1], 0.0);
  EXPECT_DOUBLE_EQ(y.data()[2], 2.0);
}

TEST(LeakyRelu, PositiveInputUnchanged) {
  T x(Shape{4}, std::vector<double>{0.1, 1.0, 5.0, 1e-9});
  auto y = scin::leaky_relu(x, 0.2);
  for (std::size_t i = 0; i < 4; ++i) EXPECT_EQ(y.data()[i], x.data()[i]);
}

TEST(LeakyRelu, GradientAwayFromZero) {
  std::mt19937_64 rng(7);
  auto x = random_tensor({1, 1, 8, 8, 8}, rng);
  for (auto& v : x.values())
    if (std::abs(v) < 1e-2) v = 0.5;
  const double err = max_grad_error([](std::vector<T>& v) { return scin::leaky_relu(v[0], 0.01); }, {x}, 8, 256);
  EXPECT_LT(err, 1e-6);
}

TEST(LeakyRelu, TieAtZeroUsesSlope) {
  T x(Shape{1}, std::vector<double>{0.0});
  x.set_requires_grad(true);
  scin::backward(scin::sum(scin::leaky_relu(x, 0.25)));
  EXPECT_DOUBLE_EQ(x.grad()[0], 0.25);
}

TEST(Dropout, IdentityCases) {
  std::mt19937_64 rng(9);
  auto x = random_tensor({1000}, rng, false);
  auto a = scin::dropout(x, 0.0, true, rng);
  auto b = scin::dropout(x, 0.5, false, rng);
  for (std::size_t i = 0; i < x.numel(); ++i) {
    EXPECT_EQ(a.data()[i], x.data()[i]);
    EXPECT_EQ(b.data()[i], x.data()[i]);
  }
}

TEST(Dropout, LawOfLargeNumbers) {
  std::mt19937_64 rng(10);
  std::uniform_real_distribution<double> u(1.0, 2.0);
  std::vector<double> v(100000);
  for (auto& e : v) e = u(rng);
  T x(Shape{v.size()}, v);
  auto y = scin::dropout(x, 0.5, true, rng);
  std::size_t zeros = 0;
  double in_sum = 0, out_sum = 0;
  for (std::size_t i = 0; i < v.size(); ++i) {
    zeros += y.data()[i] == 0.0;
    in_sum += v[i];
    out_sum += y.data()[i];
  }
  EXPECT_NEAR(double(zeros) / double(v.size()), 0.5, 0.01);
  EXPECT_NEAR(out_sum / in_sum, 1.0, 0.02);
}

TEST(Dropout, InvalidRate) {
  std::mt19937_64 rng(11);
  T x(Shape{4}, 1.0);
  EXPECT_THROW(scin::dropout(x, 1.0, true, rng), scin::ParameterError);
  EXPECT_THROW(scin::dropout(x, -0.1, true, rng), scin::ParameterError);
}

TEST(Dropout, BackwardUsesStoredMask) {
  std::mt19937_64 rng(12);
  T x(Shape{64}, 1.0);
  x.set_requires_grad(true);
  auto y = scin::dropout(x, 0.3, true, rng);
  scin::backward(scin::sum(y));
  for (std::size_t i = 0; i < 64; ++i) EXPECT_DOUBLE_EQ(x.grad()[i], y.data()[i]);
}

TEST(TransposedConv3d, OnesCountContributions) {
  T x(Shape{1, 1, 2, 2, 2}, 1.0);
  T w(Shape{1, 1, 2, 2, 2}, 1.0);
  auto y = scin::transposed_conv3d(x, w, T(Shape{1}));
  ASSERT_EQ(y.shape(), (Shape{1, 1, 4, 4, 4}));
  const auto want = oracle::transposed_conv3d(x.values(), 1, 1, 2, 2, 2, w.values(), 1, {0.0});
  for (std::size_t i = 0; i < 64; ++i) EXPECT_EQ(y.data()[i], want[i]);
}

TEST(TransposedConv3d, RandomMatchesScatterOracle) {
  std::mt19937_64 rng(13);
  auto x = random_tensor({2, 3, 3, 2, 4}, rng, false);
  auto w = random_tensor({3, 2, 2, 2, 2}, rng, false);
  auto b = random_tensor({2}, rng, false);
  const auto want = oracle::transposed_conv3d(x.values(), 2, 3, 3, 2, 4, w.values(), 2, b.values());
  auto y = scin::transposed_conv3d(x, w, b);
  ASSERT_EQ(y.shape(), (Shape{2, 2, 6, 4, 8}));
  for (std::size_t i = 0; i < want.size(); ++i) EXPECT_NEAR(y.data()[i], want[i], 1e-12);
}

TEST(TransposedConv3d, ZeroInputGivesBias) {
  T x(Shape{1, 2, 2, 2, 2});
  std::mt19937_64 rng(14);
  auto w = random_tensor({2, 3, 2, 2, 2}, rng, false);
  T b(Shape{3}, std::vector<double>{1.0, 2.0, 3.0});
  auto y = scin::transposed_conv3d(x, w, b);
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t i = 0; i < 64; ++i) EXPECT_EQ(y.data()[c * 64 + i], b.data()[c]);
}

TEST(TransposedConv3d, ShapeErrorsAndGradients) {
  EXPECT_THROW(scin::transposed_conv3d(T(Shape{1, 2, 2, 2, 2}), T(Shape{3, 1, 2, 2, 2}), T(Shape{1})),
               scin::ShapeError);
  EXPECT_THROW(scin::transposed_conv3d(T(Shape{1, 1, 2, 2, 2}), T(Shape{1, 1, 3, 3, 3}), T(Shape{1})),
               scin::ShapeError);
  std::mt19937_64 rng(15);
  std::vector<T> in{random_tensor({1, 2, 4, 4, 4}, rng), random_tensor({2, 2, 2, 2, 2}, rng),
                    random_tensor({2}, rng)};
  const double err =
      max_grad_error([](std::vector<T>& v) { return scin::transposed_conv3d(v[0], v[1], v[2]); }, in, 16);
  EXPECT_LT(err, 1e-5);
}

TEST(Bce, SymmetricPointAndSaturation) {
  T l0(Shape{1}, std::vector<double>{0.0}), t0(Shape{1}, std::vector<double>{0.5});
  EXPECT_NEAR(scin::bce_with_logits(l0, t0).item(), std::log(2.0), 1e-12);
  T l1(Shape{1}, std::vector<double>{50.0}), t1(Shape{1}, std::vector<double>{1.0});
  const double v = scin::bce_with_logits(l1, t1).item();
  EXPECT_TRUE(std::isfinite(v));
  EXPECT_LT(v, 1e-20);
  T l2(Shape{1}, std::vector<double>{-800.0}), t2(Shape{1}, std::vector<double>{1.0});
  EXPECT_NEAR(scin::bce_with_logits(l2, t2).item(), 800.0, 1e-9);
}

TEST(Bce, GradientIsSigmoidMinusTargetOverN) {
  std::mt19937_64 rng(17);
  auto logits = random_tensor({1, 1, 8, 8, 8}, rng, true, 3.0);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<double> tv(logits.numel());
  for (auto& t : tv) t = u(rng);
  T targets(logits.shape(), tv);
  scin::backward(scin::bce_with_logits(logits, targets));
  const double n = double(logits.numel());
  double worst_fd = 0.0;
  for (std::size_t i = 0; i < logits.numel(); ++i) {
    const double s = 1.0 / (1.0 + std::exp(-logits.data()[i]));
    EXPECT_NEAR(logits.grad()[i], (s - tv[i]) / n, 1e-15);
    if (i % 7 == 0) {
      const double num = oracle::central_diff([&] { return scin::bce_with_logits(logits, targets).item(); },
                                              logits.data()[i]);
      worst_fd = std::max(worst_fd, oracle::rel_error(logits.grad()[i], num, 1e-9));
    }
  }
  EXPECT_LT(worst_fd, 1e-6);
}

TEST(Bce, TargetDomainAndShape) {
  T l(Shape{2}, 0.0);
  EXPECT_THROW(scin::bce_with_logits(l, T(Shape{2}, std::vector<double>{0.5, 1.5})), scin::DomainError);
  EXPECT_THROW(scin::bce_with_logits(l, T(Shape{3}, 0.5)), scin::ShapeError);
}

TEST(ConcatChannels, LayoutAndGradient) {
  std::mt19937_64 rng(19);
  auto a = random_tensor({2, 1, 2, 2, 2}, rng);
  auto b = random_tensor({2, 3, 2, 2, 2}, rng);
  auto y = scin::concat_channels(a, b);
  ASSERT_EQ(y.shape(), (Shape{2, 4, 2, 2, 2}));
  for (std::size_t n = 0; n < 2; ++n) {
    for (std::size_t i = 0; i < 8; ++i) EXPECT_EQ(y.data()[n * 32 + i], a.data()[n * 8 + i]);
    for (std::size_t i = 0; i < 24; ++i) EXPECT_EQ(y.data()[n * 32 + 8 + i], b.data()[n * 24 + i]);
  }
  const double err =
      max_grad_error([](std::vector<T>& v) { return scin::concat_channels(v[0], v[1]); }, {a, b}, 20);
  EXPECT_LT(err, 1e-8);
}
