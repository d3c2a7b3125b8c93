#include <gtest/gtest.h>

#include "gmptl/error.hpp"
#include "gmptl/pooling.hpp"
#include "test_util.hpp"

using namespace gmptl;
using gmptl::testing::grad_check;
using gmptl::testing::probe;
using gmptl::testing::random_mat;

namespace {

PoolingHead make_head(std::uint64_t seed) {
  Rng rng(seed);
  return PoolingHead("head", 6, PoolingHeadConfig{5, 7, 4}, rng);
}

}  // namespace

TEST(PoolingHead, SingleFrameIsProjectionOfBiLstmOutput) {
  PoolingHead head = make_head(1);
  const Mat x = random_mat(1, 6, 2);
  const Mat seq = head.lstm().forward(x, nullptr);
  const Mat expected = head.projection().forward(seq);
  EXPECT_EQ((head.forward(x) - expected).cwiseAbs().maxCoeff(), 0.0);
}

TEST(PoolingHead, FrameOrderMatters) {
  PoolingHead head = make_head(3);
  const Mat x = random_mat(6, 6, 4);
  Mat reversed = x.colwise().reverse();
  EXPECT_GT((head.forward(x) - head.forward(reversed)).cwiseAbs().maxCoeff(), 1e-6);
}

TEST(PoolingHead, MeanPoolingIgnoresDuplication) {
  // Identity stand-in for the BiLSTM: feed the sequence straight to the pooling step.
  Rng rng(5);
  PoolingHead head("head", 3, PoolingHeadConfig{3, 7, 4}, rng);
  const Mat s = random_mat(5, 6, 6);
  Mat doubled(10, 6);
  doubled << s, s;
  EXPECT_LT((head.embed_from_sequence(s) - head.embed_from_sequence(doubled)).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(PoolingHead, EmptySequenceIsRejected) {
  PoolingHead head = make_head(7);
  try {
    head.forward(Mat(0, 6));
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::EmptySequence);
  }
}

TEST(PoolingHead, GradientsMatchFiniteDifferences) {
  PoolingHead head = make_head(8);
  const Mat x = random_mat(5, 6, 9);
  const Mat w = random_mat(1, 4, 10);
  nn::ParamList ps;
  head.collect(ps);
  nn::zero_grad(ps);
  PoolingHead::Cache cache;
  head.forward(x, &cache);
  const Mat dx = head.backward(cache, w);
  auto loss = [&] { return probe(head.forward(x), w); };
  std::uint64_t seed = 20;
  for (auto* p : ps) EXPECT_LT(grad_check(*p, loss, 6, seed++), 1e-4) << p->name;

  nn::Param xp("x", x);
  xp.grad = dx;
  auto loss_x = [&] { return probe(head.forward(xp.value), w); };
  EXPECT_LT(grad_check(xp, loss_x, 10, 40), 1e-4);
}
