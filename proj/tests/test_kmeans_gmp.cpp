#include <gtest/gtest.h>

#include <cmath>
#include <cstring>
#include <fstream>
#include <set>

#include "gmptl/error.hpp"
#include "gmptl/gmp.hpp"
#include "gmptl/kmeans.hpp"
#include "gmptl/stage1.hpp"
#include "test_util.hpp"

using namespace gmptl;
using gmptl::testing::random_mat;
using gmptl::testing::TempDir;

namespace {

template <typename F>
ErrorCode code_of(F&& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.code();
  }
  ADD_FAILURE() << "expected an Error";
  return ErrorCode::Io;
}

bool bitwise_equal(const Mat& a, const Mat& b) {
  return a.rows() == b.rows() && a.cols() == b.cols() && std::memcmp(a.data(), b.data(), sizeof(double) * a.size()) == 0;
}

Mat blobs(int per_blob, double sigma, std::uint64_t seed, std::vector<int>* identity) {
  const double centers[4][2] = {{0, 0}, {10, 0}, {0, 10}, {10, 10}};
  Mat pts = random_mat(4 * per_blob, 2, seed, sigma);
  for (int b = 0; b < 4; ++b)
    for (int i = 0; i < per_blob; ++i) {
      pts(b * per_blob + i, 0) += centers[b][0];
      pts(b * per_blob + i, 1) += centers[b][1];
      if (identity) identity->push_back(b);
    }
  return pts;
}

EncoderConfig tiny_encoder(int input_dim) {
  EncoderConfig c;
  c.n_layers = 4;
  c.model_dim = 16;
  c.n_heads = 2;
  c.ff_dim = 32;
  c.input_dim = input_dim;
  c.seed = 2;
  return c;
}

Checkpoint untrained_stage1(const EncoderConfig& enc) {
  Stage1Config cfg;
  cfg.head = {8, 8, 8};
  Stage1Model m(enc, cfg, 1);
  return m.to_checkpoint({});
}

SyntheticCorpusSpec small_corpus(int n, int frames) {
  SyntheticCorpusSpec s;
  s.n_utterances = n;
  s.feature_dim = 16;
  s.frames_min = frames;
  s.frames_max = frames;
  return s;
}

}  // namespace

TEST(KMeans, OneDimensionalOptimumMatchesBruteForce) {
  Mat pts(4, 1);
  pts << 0, 1, 10, 11;
  // Brute force over all 2-partitions.
  double best = 1e300;
  for (int mask = 1; mask < 15; ++mask) {
    double sum[2] = {0, 0}, cnt[2] = {0, 0};
    for (int i = 0; i < 4; ++i) sum[(mask >> i) & 1] += pts(i, 0), cnt[(mask >> i) & 1] += 1;
    double d = 0;
    for (int i = 0; i < 4; ++i) {
      const int c = (mask >> i) & 1;
      d += std::pow(pts(i, 0) - sum[c] / cnt[c], 2);
    }
    best = std::min(best, d);
  }
  EXPECT_DOUBLE_EQ(best, 1.0);

  const auto r = fit_kmeans(pts, 2, 100, 1e-4, 7);
  std::vector<double> c = {r.centroids(0, 0), r.centroids(1, 0)};
  std::sort(c.begin(), c.end());
  EXPECT_NEAR(c[0], 0.5, 1e-12);
  EXPECT_NEAR(c[1], 10.5, 1e-12);
  EXPECT_NEAR(distortion(pts, r.centroids, r.assignments), best, 1e-12);
}

TEST(KMeans, DistinctPointsEachOwnCluster) {
  const Mat pts = random_mat(6, 3, 1);
  const auto r = fit_kmeans(pts, 6, 50, 1e-6, 3);
  EXPECT_NEAR(distortion(pts, r.centroids, r.assignments), 0.0, 1e-20);
  EXPECT_EQ(std::set<int>(r.assignments.begin(), r.assignments.end()).size(), 6u);
}

TEST(KMeans, DistortionNeverIncreases) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const Mat pts = random_mat(300, 4, seed + 40);
    const auto r = fit_kmeans(pts, 12, 100, 0.0, seed);
    for (std::size_t i = 1; i < r.distortion.size(); ++i) EXPECT_LE(r.distortion[i], r.distortion[i - 1] + 1e-9);
  }
}

TEST(KMeans, ConvergedAssignmentsAreStable) {
  const Mat pts = random_mat(500, 3, 9);
  const auto r = fit_kmeans(pts, 8, 500, 0.0, 2);
  ASSERT_TRUE(r.converged);
  EXPECT_EQ(assign_nearest(pts, r.centroids), r.assignments);
}

TEST(KMeans, SeparatedBlobsGivePurityOne) {
  std::vector<int> identity;
  const Mat pts = blobs(100, 1.0, 5, &identity);
  const auto r = fit_kmeans(pts, 4, 100, 1e-4, 11);
  EXPECT_DOUBLE_EQ(purity(r.assignments, identity), 1.0);
}

TEST(KMeans, SameSeedIsBitwiseIdentical) {
  const Mat pts = random_mat(400, 5, 13);
  const auto a = fit_kmeans(pts, 10, 100, 1e-4, 99);
  const auto b = fit_kmeans(pts, 10, 100, 1e-4, 99);
  EXPECT_TRUE(bitwise_equal(a.centroids, b.centroids));
  EXPECT_EQ(a.assignments, b.assignments);
}

TEST(KMeans, Guards) {
  EXPECT_EQ(code_of([] { fit_kmeans(random_mat(3, 2, 1), 4, 10, 1e-4, 0); }), ErrorCode::TooFewPoints);
  EXPECT_EQ(code_of([] { fit_kmeans(random_mat(3, 2, 1), 0, 10, 1e-4, 0); }), ErrorCode::ConfigInvalid);
}

TEST(ClusterMetrics, PerfectAlignmentAndSingleCluster) {
  const std::vector<int> classes = {0, 0, 1, 1, 2, 3, 3, 3};
  EXPECT_DOUBLE_EQ(purity(classes, classes), 1.0);
  EXPECT_NEAR(normalized_mutual_information(classes, classes), 1.0, 1e-12);
  const std::vector<int> one(classes.size(), 0);
  EXPECT_DOUBLE_EQ(purity(one, classes), 3.0 / 8.0);
}

TEST(ClusterMetrics, RandomLabelsHaveNearZeroNmi) {
  Rng rng(17);
  std::uniform_int_distribution<int> k8(0, 7), k4(0, 3);
  std::vector<int> a(10000), b(10000);
  for (auto& x : a) x = k8(rng);
  for (auto& x : b) x = k4(rng);
  EXPECT_LT(normalized_mutual_information(a, b), 0.02);
}

TEST(ClusterMetrics, ClusterQualityOnFrameInheritedEmotion) {
  Corpus corpus;
  GMPMap labels;
  for (int u = 0; u < 8; ++u) {
    const auto e = emotion_from_index(u % 4);
    corpus.push_back(gmptl::testing::inline_record("u" + std::to_string(u), Mat::Zero(3, 2), e, GenderLabel::Male, "s", "Ses01"));
    GMPLabelSet l;
    l.utterance_id = corpus.back().id;
    l.scale_sizes = {4};
    l.labels = Eigen::Matrix<int, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>::Constant(3, 1, u % 4);
    labels[l.utterance_id] = l;
  }
  const auto q = cluster_quality(labels, corpus);
  EXPECT_DOUBLE_EQ(q.purity[0], 1.0);
  EXPECT_NEAR(q.nmi[0], 1.0, 1e-12);
}

TEST(GmpFile, RoundTripAndGuards) {
  TempDir dir;
  GMPLabelSet l;
  l.utterance_id = "u";
  l.scale_sizes = {4, 16};
  l.labels.resize(3, 2);
  l.labels << 0, 15, 3, 2, 1, 9;
  write_gmp(l, dir / "u.gmp");
  const auto back = read_gmp(dir / "u.gmp");
  EXPECT_EQ(back.scale_sizes, l.scale_sizes);
  EXPECT_EQ(back.labels, l.labels);

  std::filesystem::copy_file(dir / "u.gmp", dir / "t.gmp");
  std::filesystem::resize_file(dir / "t.gmp", std::filesystem::file_size(dir / "u.gmp") - 2);
  EXPECT_EQ(code_of([&] { read_gmp(dir / "t.gmp"); }), ErrorCode::CorruptFile);

  {
    std::ofstream os(dir / "r.gmp", std::ios::binary);
    bin::write_magic(os, "GMP1");
    bin::write_u32(os, 1);
    bin::write_u32(os, 4);
    bin::write_u32(os, 2);
    bin::write_u32(os, 1);
    bin::write_u32(os, 4);
  }
  EXPECT_EQ(code_of([&] { read_gmp(dir / "r.gmp"); }), ErrorCode::RangeViolation);
}

TEST(ExtractGmp, LabelRangesAndScaleConsistency) {
  const Corpus corpus = generate_synthetic_corpus(small_corpus(200, 50));  // 10 000 frames
  const Checkpoint ck = untrained_stage1(tiny_encoder(16));
  GMPConfig cfg;
  cfg.scales = {8, 32, 128};
  cfg.tap = LayerTap{-3};
  const auto ex = extract_gmp(corpus, ck, cfg);
  ASSERT_EQ(ex.labels.size(), corpus.size());
  std::vector<std::set<int>> used(3);
  for (const auto& rec : corpus) {
    const auto& l = ex.labels.at(rec.id);
    EXPECT_EQ(l.num_frames(), load_features(rec).num_frames());
    ASSERT_EQ(l.num_scales(), 3);
    for (int s = 0; s < 3; ++s)
      for (int t = 0; t < l.num_frames(); ++t) {
        EXPECT_GE(l.labels(t, s), 0);
        EXPECT_LT(l.labels(t, s), cfg.scales[static_cast<std::size_t>(s)]);
        used[static_cast<std::size_t>(s)].insert(l.labels(t, s));
      }
  }
  EXPECT_EQ(used[0].size(), 8u);
  EXPECT_EQ(ex.codebooks.stage1_hash, checkpoint_hash(ck));
  EXPECT_EQ(ex.codebooks.tap, -3);
}

TEST(ExtractGmp, SingleScaleOfOneIsAllZero) {
  const Corpus corpus = generate_synthetic_corpus(small_corpus(20, 10));
  GMPConfig cfg;
  cfg.scales = {1};
  const auto ex = extract_gmp(corpus, untrained_stage1(tiny_encoder(16)), cfg);
  for (const auto& [id, l] : ex.labels) EXPECT_EQ(l.labels.cwiseAbs().maxCoeff(), 0) << id;
}

TEST(ExtractGmp, SeedDeterminismAndCodebookFile) {
  TempDir dir;
  const Corpus corpus = generate_synthetic_corpus(small_corpus(40, 20));
  const Checkpoint ck = untrained_stage1(tiny_encoder(16));
  GMPConfig cfg;
  cfg.scales = {4, 8};
  const auto a = extract_gmp(corpus, ck, cfg);
  const auto b = extract_gmp(corpus, ck, cfg);
  for (int s = 0; s < 2; ++s)
    EXPECT_TRUE(bitwise_equal(a.codebooks.codebooks[static_cast<std::size_t>(s)], b.codebooks.codebooks[static_cast<std::size_t>(s)]));

  write_codebooks(a.codebooks, dir / "c.cbk");
  const auto back = read_codebooks(dir / "c.cbk");
  EXPECT_EQ(back.scale_sizes(), (std::vector<int>{4, 8}));
  EXPECT_EQ(back.stage1_hash, a.codebooks.stage1_hash);
  EXPECT_EQ(back.fit_sessions, a.codebooks.fit_sessions);
  EXPECT_EQ(back.fit_corpus_hash, corpus_hash(corpus));
  for (int s = 0; s < 2; ++s)
    EXPECT_LT((back.codebooks[static_cast<std::size_t>(s)] - a.codebooks.codebooks[static_cast<std::size_t>(s)]).cwiseAbs().maxCoeff(), 1e-5);

  write_gmp_dir(a.labels, dir / "g");
  const auto labels = read_gmp_dir(corpus, dir / "g");
  for (const auto& rec : corpus) EXPECT_EQ(labels.at(rec.id).labels, a.labels.at(rec.id).labels);
}

TEST(ExtractGmp, TrainedEncoderCarriesMoreEmotionInformation) {
  SyntheticCorpusSpec spec = small_corpus(200, 20);
  spec.frames_min = 16;
  spec.frames_max = 32;
  const Corpus corpus = generate_synthetic_corpus(spec);
  const EncoderConfig enc = tiny_encoder(16);
  Stage1Config s1;
  s1.head = {16, 16, 16};
  TrainHyperparams hp;
  hp.lr = 2e-3;
  hp.batch_size = 16;
  hp.epochs = 8;
  const auto trained = train_stage1(corpus, enc, s1, hp);
  GMPConfig cfg;
  cfg.scales = {4};
  cfg.tap = LayerTap{-3};
  const double nmi_trained = cluster_quality(extract_gmp(corpus, trained.checkpoint, cfg).labels, corpus).nmi[0];
  const double nmi_random = cluster_quality(extract_gmp(corpus, untrained_stage1(enc), cfg).labels, corpus).nmi[0];
  EXPECT_GT(nmi_trained, nmi_random);
}
