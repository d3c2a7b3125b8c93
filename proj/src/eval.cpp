#include "gmptl/eval.hpp"

#include <cmath>
#include <fstream>
#include <limits>
#include <map>
#include <set>
#include <sstream>

#include "gmptl/error.hpp"

namespace gmptl {

void ConfusionMatrix::add(int truth, int predicted) {
  if (truth < 0 || truth >= kNumEmotions || predicted < 0 || predicted >= kNumEmotions)
    fail(ErrorCode::RangeViolation, "confusion entry (" + std::to_string(truth) + "," + std::to_string(predicted) + ")");
  ++counts[static_cast<std::size_t>(truth)][static_cast<std::size_t>(predicted)];
}

long ConfusionMatrix::total() const {
  long t = 0;
  for (const auto& row : counts)
    for (long c : row) t += c;
  return t;
}

long ConfusionMatrix::row_total(int c) const {
  long t = 0;
  for (long v : counts[static_cast<std::size_t>(c)]) t += v;
  return t;
}

ConfusionMatrix confusion_from(std::span<const int> truth, std::span<const int> predicted) {
  if (truth.size() != predicted.size()) fail(ErrorCode::ShapeMismatch, "labels and predictions differ in length");
  ConfusionMatrix cm;
  for (std::size_t i = 0; i < truth.size(); ++i) cm.add(truth[i], predicted[i]);
  return cm;
}

Metrics compute_metrics(const ConfusionMatrix& cm, bool warn_absent) {
  const long total = cm.total();
  if (total == 0) fail(ErrorCode::EmptyMatrix, "confusion matrix has no samples");
  Metrics m;
  long trace = 0;
  double recall_sum = 0.0;
  for (int c = 0; c < kNumEmotions; ++c) {
    const long hits = cm.counts[static_cast<std::size_t>(c)][static_cast<std::size_t>(c)];
    trace += hits;
    const long n = cm.row_total(c);
    if (n == 0) {
      m.per_category_recall[static_cast<std::size_t>(c)] = std::numeric_limits<double>::quiet_NaN();
      log(LogLevel::Debug, "category " + std::string(to_string(emotion_from_index(c))) + " absent; excluded from UAR");
      continue;
    }
    const double r = static_cast<double>(hits) / static_cast<double>(n);
    m.per_category_recall[static_cast<std::size_t>(c)] = r;
    recall_sum += r;
    ++m.categories_present;
  }
  if (warn_absent && m.categories_present < kNumEmotions)
    log_warn("UAR computed over " + std::to_string(m.categories_present) + " present categories");
  m.war = static_cast<double>(trace) / static_cast<double>(total);
  m.uar = recall_sum / m.categories_present;
  return m;
}

std::vector<FoldSplit> make_folds(const Corpus& corpus) {
  std::set<std::string> sessions;
  std::map<std::string, std::string> speaker_session;
  for (const auto& rec : corpus) {
    sessions.insert(rec.session_id);
    auto [it, inserted] = speaker_session.emplace(rec.speaker_id, rec.session_id);
    if (!inserted && it->second != rec.session_id)
      fail(ErrorCode::SpeakerLeak, "speaker " + rec.speaker_id + " appears in sessions " + it->second + " and " + rec.session_id);
  }
  if (static_cast<int>(sessions.size()) != kNumSessions)
    fail(ErrorCode::WrongSessionCount, "corpus spans " + std::to_string(sessions.size()) + " sessions, need 5");

  std::vector<FoldSplit> folds;
  int k = 1;
  for (const auto& session : sessions) {
    FoldSplit split;
    split.fold_id = k++;
    split.test_session = session;
    for (const auto& rec : corpus) (rec.session_id == session ? split.test_records : split.train_records).push_back(rec);
    folds.push_back(std::move(split));
  }
  verify_folds(folds, corpus);
  return folds;
}

void verify_folds(const std::vector<FoldSplit>& folds, const Corpus& corpus) {
  if (static_cast<int>(folds.size()) != kNumSessions) fail(ErrorCode::WrongSessionCount, "expected 5 folds");
  std::map<std::string, int> tested;
  std::set<std::string> test_sessions;
  for (const auto& f : folds) {
    std::set<std::string> train_spk, test_spk;
    for (const auto& r : f.test_records) {
      if (r.session_id != f.test_session) fail(ErrorCode::ShapeMismatch, "fold test set mixes sessions");
      test_spk.insert(r.speaker_id);
      ++tested[r.id];
    }
    for (const auto& r : f.train_records) {
      if (r.session_id == f.test_session) fail(ErrorCode::ShapeMismatch, "fold train set contains test session");
      train_spk.insert(r.speaker_id);
    }
    for (const auto& s : test_spk)
      if (train_spk.count(s)) fail(ErrorCode::SpeakerLeak, "speaker " + s + " in train and test of fold " + std::to_string(f.fold_id));
    if (f.train_records.size() + f.test_records.size() != corpus.size())
      fail(ErrorCode::ShapeMismatch, "fold " + std::to_string(f.fold_id) + " does not cover the corpus");
    test_sessions.insert(f.test_session);
  }
  if (static_cast<int>(test_sessions.size()) != kNumSessions) fail(ErrorCode::WrongSessionCount, "duplicate test sessions");
  if (tested.size() != corpus.size()) fail(ErrorCode::ShapeMismatch, "test sets do not cover the corpus");
  for (const auto& [id, n] : tested)
    if (n != 1) fail(ErrorCode::ShapeMismatch, "utterance " + id + " tested in " + std::to_string(n) + " folds");
}

std::string EvalReport::summary_line() const {
  std::ostringstream os;
  os.setf(std::ios::fixed);
  os.precision(6);
  os << "MEAN UAR=" << mean_uar << " WAR=" << mean_war;
  return os.str();
}

std::string EvalReport::to_text() const {
  std::ostringstream os;
  os.setf(std::ios::fixed);
  os.precision(6);
  for (const auto& f : folds) {
    os << "FOLD " << f.fold_id << " test_session=" << f.test_session << '\n';
    os << "confusion (rows=true, cols=pred; angry happy neutral sad)\n";
    for (const auto& row : f.cm.counts) {
      for (std::size_t j = 0; j < row.size(); ++j) os << (j ? " " : "  ") << row[j];
      os << '\n';
    }
    os << "WAR=" << f.metrics.war << " UAR=" << f.metrics.uar << "\n\n";
  }
  os << summary_line() << '\n';
  return os.str();
}

void EvalReport::write(const std::filesystem::path& path) const {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream os(path);
  if (!os) fail(ErrorCode::Io, "cannot write " + path.string());
  os << to_text();
}

EvalReport run_crossval(const Corpus& corpus, const FoldRunner& runner) {
  const auto folds = make_folds(corpus);
  EvalReport report;
  for (const auto& split : folds) {
    std::vector<EmotionLabel> preds;
    try {
      preds = runner(split);
    } catch (const Error& e) {
      throw Error(e.code(), "fold " + std::to_string(split.fold_id) + ": " + e.what());
    }
    if (preds.size() != split.test_records.size())
      fail(ErrorCode::ShapeMismatch, "fold " + std::to_string(split.fold_id) + ": runner returned " +
                                         std::to_string(preds.size()) + " predictions for " +
                                         std::to_string(split.test_records.size()) + " test utterances");
    FoldResult fr;
    fr.fold_id = split.fold_id;
    fr.test_session = split.test_session;
    for (std::size_t i = 0; i < preds.size(); ++i) fr.cm.add(index_of(split.test_records[i].emotion), index_of(preds[i]));
    fr.metrics = compute_metrics(fr.cm);
    report.folds.push_back(fr);
  }
  for (const auto& f : report.folds) {
    report.mean_war += f.metrics.war;
    report.mean_uar += f.metrics.uar;
  }
  report.mean_war /= static_cast<double>(report.folds.size());
  report.mean_uar /= static_cast<double>(report.folds.size());
  return report;
}

}  // namespace gmptl
