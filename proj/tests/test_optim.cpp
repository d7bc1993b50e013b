#include <gtest/gtest.h>

#include <cmath>

#include "scin/optim.hpp"

using scin::Parameter;
using scin::Shape;
using scin::Tensor;

namespace {

Parameter<double> scalar_param(const std::string& id, double value, double grad) {
  Tensor<double> t(Shape{1}, value);
  t.set_requires_grad(true);
  t.zero_grad();
  t.grad()[0] = grad;
  return {id, t, scin::ParamGroup::Backbone};
}

// Adam recurrence written out by hand for one scalar.
double adam_reference(double w, const std::vector<double>& grads, double lr, double b1 = 0.9, double b2 = 0.999,
                      double eps = 1e-8) {
  double m = 0, v = 0;
  for (std::size_t t = 1; t <= grads.size(); ++t) {
    const double g = grads[t - 1];
    m = b1 * m + (1 - b1) * g;
    v = b2 * v + (1 - b2) * g * g;
    const double mh = m / (1 - std::pow(b1, double(t)));
    const double vh = v / (1 - std::pow(b2, double(t)));
    w -= lr * mh / (std::sqrt(vh) + eps);
  }
  return w;
}

}  // namespace

TEST(Adam, FirstStepMovesByLearningRate) {
  auto p = scalar_param("w", 1.0, 1.0);
  scin::OptimState st;
  st.lr = 0.1;
  scin::adam_step(std::vector{p}, st);
  EXPECT_NEAR(p.tensor.data()[0], 0.9, 1e-6);
  EXPECT_EQ(st.step, 1u);
  EXPECT_EQ(p.tensor.grad()[0], 1.0);
}

TEST(Adam, MatchesHandRecurrence) {
  auto p = scalar_param("w", 0.3, 0.0);
  scin::OptimState st;
  st.lr = 0.05;
  const std::vector<double> grads{0.5, -1.5, 2.0, 0.1, -0.7};
  for (double g : grads) {
    p.tensor.grad()[0] = g;
    scin::adam_step(std::vector{p}, st);
  }
  EXPECT_NEAR(p.tensor.data()[0], adam_reference(0.3, grads, 0.05), 1e-12);
}

TEST(Adam, EmptyListLeavesStateAlone) {
  scin::OptimState st;
  scin::adam_step(std::vector<Parameter<double>>{}, st);
  EXPECT_EQ(st.step, 0u);
  EXPECT_TRUE(st.moments.empty());
}

TEST(Adam, ExcludedParameterBitIdentical) {
  auto a = scalar_param("a", 0.123456789, 1.0);
  auto b = scalar_param("b", 0.987654321, 1.0);
  scin::OptimState st;
  for (int i = 0; i < 5; ++i) scin::adam_step(std::vector{a}, st);
  EXPECT_EQ(b.tensor.data()[0], 0.987654321);
  EXPECT_NE(a.tensor.data()[0], 0.123456789);
  EXPECT_EQ(st.moments.count("b"), 0u);
}

TEST(Adam, MissingGradIsUsageError) {
  Tensor<double> t(Shape{2}, 1.0);
  t.set_requires_grad(true);
  scin::OptimState st;
  EXPECT_THROW(scin::adam_step(std::vector<Parameter<double>>{{"x", t, scin::ParamGroup::Backbone}}, st),
               scin::UsageError);
  EXPECT_EQ(st.step, 0u);
}

TEST(Adam, ZeroGradClearsValues) {
  auto p = scalar_param("w", 1.0, 3.0);
  scin::zero_grad(std::vector{p});
  EXPECT_EQ(p.tensor.grad()[0], 0.0);
}
