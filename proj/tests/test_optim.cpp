#include "teata/errors.hpp"
#include "teata/optim.hpp"
#include "testing.hpp"

#include <gtest/gtest.h>

#include <cmath>

using namespace teata;

TEST(Adam, MatchesScalarReference) {
  AdamConfig cfg;
  Adam opt(cfg);
  ag::Var p(Matrix::Constant(1, 2, 0.5), true);
  opt.add_group("g", {p}, 0.01);

  double ref[2] = {0.5, 0.5}, m[2] = {0, 0}, v[2] = {0, 0};
  for (int t = 1; t <= 5; ++t) {
    const double grads[2] = {0.3 * t, -1.0 / t};
    p.node()->grad = Matrix(1, 2);
    p.node()->grad << grads[0], grads[1];
    opt.step();
    for (int i = 0; i < 2; ++i) {
      m[i] = 0.9 * m[i] + 0.1 * grads[i];
      v[i] = 0.999 * v[i] + 0.001 * grads[i] * grads[i];
      const double mh = m[i] / (1 - std::pow(0.9, t)), vh = v[i] / (1 - std::pow(0.999, t));
      ref[i] -= 0.01 * 1e-4 * ref[i];
      ref[i] -= 0.01 * mh / (std::sqrt(vh) + 1e-8);
    }
    EXPECT_NEAR(p.value()(0, 0), ref[0], 1e-14);
    EXPECT_NEAR(p.value()(0, 1), ref[1], 1e-14);
    EXPECT_FALSE(p.has_grad());
  }
}

TEST(Adam, GroupsHaveIndependentRatesAndSkipMissingGrads) {
  Adam opt;
  ag::Var a(Matrix::Ones(1, 1), true), b(Matrix::Ones(1, 1), true);
  opt.add_group("a", {a}, 0.1);
  opt.add_group("b", {b});
  EXPECT_DOUBLE_EQ(opt.lr("a"), 0.1);
  EXPECT_DOUBLE_EQ(opt.lr("b"), 0.0);
  opt.set_lr("b", 0.2);
  a.node()->grad = Matrix::Ones(1, 1);
  opt.step();
  EXPECT_LT(a.value()(0, 0), 1.0);
  EXPECT_EQ(b.value()(0, 0), 1.0);
  EXPECT_THROW(opt.add_group("a", {}), InvalidArgument);
  EXPECT_THROW(opt.set_lr("c", 1.0), KeyError);
  EXPECT_FALSE(opt.has_group("c"));
}

TEST(Adam, ZeroLearningRateLeavesParameters) {
  Adam opt;
  ag::Var a(Matrix::Constant(2, 2, 3.0), true);
  opt.add_group("a", {a}, 0.0);
  a.node()->grad = Matrix::Ones(2, 2);
  opt.step();
  EXPECT_EQ(a.value(), Matrix::Constant(2, 2, 3.0));
}
