#pragma once

#include <gtest/gtest.h>

#include <filesystem>
#include <random>
#include <string>

#include "gmptl/corpus.hpp"

namespace gmptl::testing {

/// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  TempDir() {
    const auto* info = ::testing::UnitTest::GetInstance()->current_test_info();
    std::string name = "gmptl_";
    if (info) name += std::string(info->test_suite_name()) + "_" + info->name();
    static int counter = 0;
    name += "_" + std::to_string(counter++);
    path_ = std::filesystem::temp_directory_path() / name;
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() { std::filesystem::remove_all(path_); }
  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& s) const { return path_ / s; }

 private:
  std::filesystem::path path_;
};

inline Mat random_mat(int rows, int cols, std::uint64_t seed, double scale = 1.0) {
  Rng rng(seed);
  std::normal_distribution<double> n(0.0, scale);
  Mat m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = n(rng);
  return m;
}

inline UtteranceRecord inline_record(const std::string& id, const Mat& frames, EmotionLabel e, GenderLabel g,
                                     const std::string& speaker, const std::string& session) {
  UtteranceRecord r;
  r.id = id;
  r.feature_source = FrameFeatureMatrix{frames, 50.0};
  r.emotion = e;
  r.gender = g;
  r.speaker_id = speaker;
  r.session_id = session;
  return r;
}

}  // namespace gmptl::testing

#include <functional>

#include "gmptl/nn.hpp"

namespace gmptl::testing {

/// Largest relative error between `param.grad` and central differences of
/// `loss` at `coords` random entries of `param.value`. The denominator is
/// floored at 1e-4 so entries whose true gradient is zero compare absolutely.
inline double grad_check(nn::Param& param, const std::function<double()>& loss, int coords, std::uint64_t seed,
                         double h = 1e-5) {
  Rng rng(seed);
  std::uniform_int_distribution<Eigen::Index> pick(0, param.value.size() - 1);
  double worst = 0.0;
  for (int c = 0; c < coords; ++c) {
    const Eigen::Index k = pick(rng);
    const double orig = param.value.data()[k];
    param.value.data()[k] = orig + h;
    const double up = loss();
    param.value.data()[k] = orig - h;
    const double down = loss();
    param.value.data()[k] = orig;
    const double numeric = (up - down) / (2 * h);
    const double analytic = param.grad.data()[k];
    const double denom = std::max({std::abs(numeric), std::abs(analytic), 1e-4});
    worst = std::max(worst, std::abs(numeric - analytic) / denom);
  }
  return worst;
}

/// Weighted sum used as a scalar probe loss: sum(y .* w).
inline double probe(const Mat& y, const Mat& w) { return y.cwiseProduct(w).sum(); }

}  // namespace gmptl::testing
