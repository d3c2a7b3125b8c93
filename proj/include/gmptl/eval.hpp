#pragma once

#include <array>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "gmptl/corpus.hpp"

namespace gmptl {

/// Rows are true categories, columns predictions.
struct ConfusionMatrix {
  std::array<std::array<long, kNumEmotions>, kNumEmotions> counts{};

  void add(int truth, int predicted);
  long total() const;
  long row_total(int c) const;
};

ConfusionMatrix confusion_from(std::span<const int> truth, std::span<const int> predicted);

struct Metrics {
  double war = 0.0;
  double uar = 0.0;
  std::array<double, kNumEmotions> per_category_recall{};  // NaN where the category is absent
  int categories_present = 0;
};

/// WAR = trace / total. UAR = mean recall over categories with at least one
/// true sample; absent categories are skipped with a warning.
Metrics compute_metrics(const ConfusionMatrix& cm, bool warn_absent = true);

struct FoldSplit {
  int fold_id = 0;  // 1..5
  std::string test_session;
  Corpus train_records;
  Corpus test_records;
};

/// One fold per session (sorted session ids); fold k tests session k.
std::vector<FoldSplit> make_folds(const Corpus& corpus);

/// Raises SpeakerLeak / WrongSessionCount / ShapeMismatch when the split breaks
/// session partitioning, speaker disjointness or exhaustiveness.
void verify_folds(const std::vector<FoldSplit>& folds, const Corpus& corpus);

struct FoldResult {
  int fold_id = 0;
  std::string test_session;
  ConfusionMatrix cm;
  Metrics metrics;
};

struct EvalReport {
  std::vector<FoldResult> folds;
  double mean_war = 0.0;
  double mean_uar = 0.0;

  std::string summary_line() const;  // "MEAN UAR=<x> WAR=<y>"
  std::string to_text() const;
  void write(const std::filesystem::path& path) const;
};

/// Produces test-set predictions for one fold; trains on `split.train_records` only.
using FoldRunner = std::function<std::vector<EmotionLabel>(const FoldSplit& split)>;

/// Runs `runner` independently per fold and averages WAR/UAR over folds.
/// Stage errors are rethrown with the fold id prefixed.
EvalReport run_crossval(const Corpus& corpus, const FoldRunner& runner);

}  // namespace gmptl
