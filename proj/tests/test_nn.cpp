#include <gtest/gtest.h>

#include <cmath>

#include "gmptl/error.hpp"
#include "gmptl/nn.hpp"
#include "test_util.hpp"

using namespace gmptl;
using gmptl::testing::grad_check;
using gmptl::testing::probe;
using gmptl::testing::random_mat;

TEST(SoftmaxCe, UniformLogitsGiveLogK) {
  const Eigen::RowVectorXd logits = Eigen::RowVectorXd::Constant(4, 0.7);
  EXPECT_NEAR(nn::softmax_ce(logits, 2), std::log(4.0), 1e-12);
}

TEST(SoftmaxCe, ShiftInvariance) {
  Eigen::RowVectorXd logits(5);
  logits << 0.3, -1.2, 2.0, 0.0, 0.9;
  const Mat p = nn::softmax_rows(logits);
  const Mat q = nn::softmax_rows((logits.array() + 123.456).matrix());
  EXPECT_LT((p - q).cwiseAbs().maxCoeff(), 1e-9);
  EXPECT_NEAR(nn::softmax_ce(logits, 1), nn::softmax_ce((logits.array() - 50.0).matrix(), 1), 1e-9);
}

TEST(SoftmaxCe, GradientIsSoftmaxMinusOneHot) {
  Eigen::RowVectorXd logits(3);
  logits << 1.0, 2.0, -0.5;
  Eigen::RowVectorXd g;
  nn::softmax_ce(logits, 0, &g);
  const Eigen::RowVectorXd p = nn::softmax_rows(logits).row(0);
  EXPECT_NEAR(g(0), p(0) - 1.0, 1e-15);
  EXPECT_NEAR(g(1), p(1), 1e-15);
  EXPECT_NEAR(g(2), p(2), 1e-15);
}

TEST(SoftmaxCe, LargeLogitsStayFinite) {
  Eigen::RowVectorXd logits(2);
  logits << 1000.0, -1000.0;
  EXPECT_NEAR(nn::softmax_ce(logits, 0), 0.0, 1e-12);
  EXPECT_NEAR(nn::softmax_ce(logits, 1), 2000.0, 1e-9);
  logits(0) = std::nan("");
  try {
    nn::softmax_ce(logits, 0);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::NonFiniteLogits);
  }
}

TEST(Linear, GradientsMatchFiniteDifferences) {
  Rng rng(1);
  nn::Linear lin("l", 5, 3, rng);
  const Mat x = random_mat(4, 5, 2);
  const Mat w = random_mat(4, 3, 3);
  nn::ParamList ps;
  lin.collect(ps);
  nn::zero_grad(ps);
  const Mat dx = lin.backward(x, w);
  auto loss = [&] { return probe(lin.forward(x), w); };
  EXPECT_LT(grad_check(lin.weight(), loss, 10, 4), 1e-6);
  EXPECT_LT(grad_check(lin.bias(), loss, 3, 5), 1e-6);

  nn::Param xp("x", x);
  xp.grad = dx;
  auto loss_x = [&] { return probe(lin.forward(xp.value), w); };
  EXPECT_LT(grad_check(xp, loss_x, 10, 6), 1e-6);
}

TEST(Mlp, GradientsMatchFiniteDifferences) {
  Rng rng(7);
  nn::Mlp mlp("m", 4, 6, 2, rng);
  const Mat x = random_mat(3, 4, 8);
  const Mat w = random_mat(3, 2, 9);
  nn::ParamList ps;
  mlp.collect(ps);
  nn::zero_grad(ps);
  nn::Mlp::Cache cache;
  mlp.forward(x, &cache);
  mlp.backward(x, cache, w);
  auto loss = [&] { return probe(mlp.forward(x), w); };
  for (auto* p : ps) EXPECT_LT(grad_check(*p, loss, 8, 10), 1e-5) << p->name;
}

TEST(LayerNorm, NormalizesRowsAndGradientsMatch) {
  nn::LayerNorm ln("ln", 6);
  const Mat x = random_mat(5, 6, 11, 3.0);
  nn::LayerNorm::Cache cache;
  const Mat y = ln.forward(x, &cache);
  for (int i = 0; i < 5; ++i) {
    EXPECT_NEAR(y.row(i).mean(), 0.0, 1e-12);
    EXPECT_NEAR((y.row(i).array() - y.row(i).mean()).square().mean(), 1.0, 1e-3);
  }
  const Mat w = random_mat(5, 6, 12);
  nn::ParamList ps;
  ln.collect(ps);
  nn::zero_grad(ps);
  const Mat dx = ln.backward(cache, w);
  auto loss = [&] { return probe(ln.forward(x, nullptr), w); };
  for (auto* p : ps) EXPECT_LT(grad_check(*p, loss, 6, 13), 1e-6) << p->name;
  nn::Param xp("x", x);
  xp.grad = dx;
  auto loss_x = [&] { return probe(ln.forward(xp.value, nullptr), w); };
  EXPECT_LT(grad_check(xp, loss_x, 15, 14), 1e-5);
}

TEST(Adam, FirstStepMovesBySignTimesLr) {
  nn::Param p("p", Mat::Zero(1, 3));
  p.grad << 2.0, -0.5, 0.0;
  nn::Adam adam({.lr = 0.1});
  adam.step({&p});
  // With bias correction, step 1 is lr * g / (|g| + eps).
  EXPECT_NEAR(p.value(0, 0), -0.1 * 2.0 / (2.0 + 1e-8), 1e-15);
  EXPECT_NEAR(p.value(0, 1), 0.1 * 0.5 / (0.5 + 1e-8), 1e-15);
  EXPECT_EQ(p.value(0, 2), 0.0);
}

TEST(Adam, ClipBoundsTheUpdateScale) {
  nn::Param a("a", Mat::Zero(1, 1)), b("b", Mat::Zero(1, 1));
  a.grad << 3.0;
  b.grad << 4.0;
  nn::Adam adam({.lr = 1.0, .clip_norm = 1.0});
  adam.step({&a, &b});
  // Clipping rescales g to norm 1 before the moments; first-step update still ~ sign.
  EXPECT_NEAR(a.m(0, 0), 0.1 * 0.6, 1e-12);
  EXPECT_NEAR(b.m(0, 0), 0.1 * 0.8, 1e-12);
}

TEST(Params, ImportRejectsShapeMismatch) {
  nn::Param p("enc.w", Mat::Zero(2, 2));
  nn::ParamBundle good{{"enc.w", Mat::Ones(2, 2)}};
  nn::import_params({&p}, good, "enc.");
  EXPECT_EQ(p.value.sum(), 4.0);
  nn::ParamBundle bad{{"enc.w", Mat::Ones(3, 2)}};
  try {
    nn::import_params({&p}, bad, "enc.");
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::IncompatibleConfig);
  }
}
