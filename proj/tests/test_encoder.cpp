#include <gtest/gtest.h>

#include <cmath>
#include <cstring>
#include <fstream>
#include <set>

#include "gmptl/encoder.hpp"
#include "gmptl/error.hpp"
#include "test_util.hpp"

using namespace gmptl;
using gmptl::testing::grad_check;
using gmptl::testing::probe;
using gmptl::testing::random_mat;
using gmptl::testing::TempDir;

namespace {

EncoderConfig small_config(int layers = 6) {
  EncoderConfig c;
  c.n_layers = layers;
  c.model_dim = 8;
  c.n_heads = 2;
  c.ff_dim = 16;
  c.input_dim = 5;
  c.seed = 3;
  return c;
}

bool bitwise_equal(const Mat& a, const Mat& b) {
  return a.rows() == b.rows() && a.cols() == b.cols() && std::memcmp(a.data(), b.data(), sizeof(double) * a.size()) == 0;
}

}  // namespace

TEST(LayerTap, NegativeIdsCountFromTheEnd) {
  EXPECT_EQ(resolve_tap(LayerTap{-3}, 12), 10);
  EXPECT_EQ(resolve_tap(LayerTap{-1}, 4), 4);
  EXPECT_EQ(resolve_tap(LayerTap{4}, 4), 4);
  EXPECT_EQ(resolve_tap(LayerTap{-6}, 6), 1);
  for (int bad : {0, 7, -7}) {
    try {
      resolve_tap(LayerTap{bad}, 6);
      FAIL() << bad;
    } catch (const Error& e) {
      EXPECT_EQ(e.code(), ErrorCode::TapOutOfRange);
    }
  }
}

TEST(Encoder, TapEquivalenceForEveryDepth) {
  const EncoderConfig cfg = small_config(6);
  Encoder enc(cfg);
  const Mat x = random_mat(9, cfg.input_dim, 1);
  const auto all = enc.forward_layers(x, cfg.n_layers);
  for (int k = 1; k <= cfg.n_layers; ++k) {
    const Mat neg = enc.forward_with_tap(x, LayerTap{-k});
    const Mat pos = enc.forward_with_tap(x, LayerTap{cfg.n_layers - k + 1});
    EXPECT_TRUE(bitwise_equal(neg, pos)) << k;
    EXPECT_TRUE(bitwise_equal(neg, all[static_cast<std::size_t>(cfg.n_layers - k)])) << k;
  }
}

TEST(Encoder, EmptyMaskIsIdentity) {
  const EncoderConfig cfg = small_config(3);
  Encoder enc(cfg);
  const Mat x = random_mat(7, cfg.input_dim, 2);
  MaskSpec empty;
  EXPECT_TRUE(bitwise_equal(enc.forward_with_tap(x, LayerTap{-1}, &empty), enc.forward_with_tap(x, LayerTap{-1})));
  MaskSpec some;
  some.masked_indices = {2, 3};
  EXPECT_FALSE(bitwise_equal(enc.forward_with_tap(x, LayerTap{-1}, &some), enc.forward_with_tap(x, LayerTap{-1})));
}

TEST(Encoder, DeterministicForward) {
  const EncoderConfig cfg = small_config(2);
  const Mat x = random_mat(5, cfg.input_dim, 3);
  Encoder a(cfg), b(cfg);
  EXPECT_TRUE(bitwise_equal(a.forward_with_tap(x, LayerTap{-1}), b.forward_with_tap(x, LayerTap{-1})));
}

TEST(Encoder, GradientsMatchFiniteDifferences) {
  const EncoderConfig cfg = small_config(2);
  Encoder enc(cfg);
  const Mat x = random_mat(6, cfg.input_dim, 4);
  const Mat w = random_mat(6, cfg.model_dim, 5);
  MaskSpec mask;
  mask.masked_indices = {1, 2};
  auto params = enc.params();
  nn::zero_grad(params);
  Encoder::Cache cache;
  enc.forward_train(x, &mask, cache, nullptr);
  enc.backward(cache, w);
  auto loss = [&] { return probe(enc.forward_with_tap(x, LayerTap{-1}, &mask), w); };
  std::uint64_t seed = 100;
  for (auto* p : params) EXPECT_LT(grad_check(*p, loss, 4, seed++), 1e-4) << p->name;
}

TEST(MaskSpans, FractionMatchesMonteCarloOracle) {
  // Oracle: simulate the sampling rule directly (independent starts, clamped spans).
  const int T = 100, span = 10;
  const double p = 0.08;
  std::mt19937_64 rng(2024);
  std::bernoulli_distribution start(p);
  double oracle = 0.0;
  const int oracle_runs = 20000;
  for (int r = 0; r < oracle_runs; ++r) {
    std::vector<bool> m(T, false);
    for (int t = 0; t < T; ++t)
      if (start(rng))
        for (int j = t; j < std::min(T, t + span); ++j) m[static_cast<std::size_t>(j)] = true;
    oracle += static_cast<double>(std::count(m.begin(), m.end(), true)) / T;
  }
  oracle /= oracle_runs;

  double empirical = 0.0;
  for (std::uint64_t seed = 0; seed < 1000; ++seed)
    empirical += static_cast<double>(sample_mask_spans(T, p, span, seed).masked_indices.size()) / T;
  empirical /= 1000.0;
  EXPECT_NEAR(empirical, oracle, 0.03);
  // Interior closed form for reference; edge effects keep the oracle slightly below it.
  EXPECT_NEAR(oracle, 1.0 - std::pow(1.0 - p, span), 0.05);
}

TEST(MaskSpans, DegenerateAndBoundaryCases) {
  int empty = 0;
  for (std::uint64_t s = 0; s < 200; ++s) empty += sample_mask_spans(100, 1e-9, 10, s).empty();
  EXPECT_EQ(empty, 200);
  for (std::uint64_t s = 0; s < 200; ++s) {
    const auto m = sample_mask_spans(5, 0.5, 10, s);
    for (int i : m.masked_indices) {
      EXPECT_GE(i, 0);
      EXPECT_LT(i, 5);
    }
    EXPECT_TRUE(std::is_sorted(m.masked_indices.begin(), m.masked_indices.end()));
    EXPECT_EQ(std::set<int>(m.masked_indices.begin(), m.masked_indices.end()).size(), m.masked_indices.size());
  }
  try {
    sample_mask_spans(10, 1.5, 10, 0);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::InvalidProbability);
  }
}

TEST(Checkpoint, RoundTripPreservesForward) {
  TempDir dir;
  const EncoderConfig cfg = small_config(2);
  Encoder enc(cfg);
  Checkpoint ck;
  ck.weights = enc.export_params();
  ck.config = cfg;
  ck.stage_tag = StageTag::Stage1;
  ck.metadata["note"] = "x";
  save_checkpoint(ck, dir / "a.ckpt");
  const Checkpoint back = load_checkpoint(dir / "a.ckpt");
  EXPECT_EQ(checkpoint_hash(back), checkpoint_hash(ck));
  EXPECT_EQ(back.metadata.at("note"), "x");
  Encoder enc2(small_config(2));
  enc2.import_params(back.weights, back.config);
  const Mat x = random_mat(4, cfg.input_dim, 9);
  EXPECT_EQ((enc.forward_with_tap(x, LayerTap{-1}) - enc2.forward_with_tap(x, LayerTap{-1})).cwiseAbs().maxCoeff(), 0.0);

  require_compatible(back, cfg);
  EncoderConfig wider = cfg;
  wider.model_dim = 12;
  try {
    require_compatible(back, wider);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::IncompatibleConfig);
  }
}

TEST(Checkpoint, CorruptionIsDetected) {
  TempDir dir;
  const EncoderConfig cfg = small_config(1);
  Encoder enc(cfg);
  Checkpoint ck;
  ck.weights = enc.export_params();
  ck.config = cfg;
  save_checkpoint(ck, dir / "a.ckpt");
  {
    std::fstream f(dir / "a.ckpt", std::ios::in | std::ios::out | std::ios::binary);
    f.seekp(-3, std::ios::end);
    f.put('\x7f');
  }
  try {
    load_checkpoint(dir / "a.ckpt");
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::CorruptCheckpoint);
  }
}
