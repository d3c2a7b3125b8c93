#include "gmptl/gmp.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>
#include <sstream>
#include <unordered_map>

#include "gmptl/error.hpp"
#include "gmptl/kmeans.hpp"

namespace gmptl {

namespace fs = std::filesystem;

void validate(const GMPConfig& cfg) {
  if (cfg.scales.empty()) fail(ErrorCode::ConfigInvalid, "gmp: at least one scale required");
  for (std::size_t i = 0; i < cfg.scales.size(); ++i) {
    if (cfg.scales[i] <= 0) fail(ErrorCode::ConfigInvalid, "gmp: scales must be positive");
    if (i > 0 && cfg.scales[i] <= cfg.scales[i - 1]) fail(ErrorCode::ConfigInvalid, "gmp: scales must be strictly increasing");
  }
  if (cfg.max_iters <= 0 || cfg.tol < 0.0) fail(ErrorCode::ConfigInvalid, "gmp: max_iters > 0, tol >= 0");
  if (cfg.tap.layer_id == 0) fail(ErrorCode::TapOutOfRange, "gmp: tap 0");
}

std::vector<int> CodebookSet::scale_sizes() const {
  std::vector<int> out;
  for (const auto& cb : codebooks) out.push_back(static_cast<int>(cb.rows()));
  return out;
}

std::vector<Mat> tapped_features(const Corpus& corpus, const Checkpoint& ckpt, LayerTap tap) {
  Encoder encoder(ckpt.config);
  encoder.import_params(ckpt.weights, ckpt.config);
  resolve_tap(tap, ckpt.config.n_layers);
  std::vector<Mat> out;
  out.reserve(corpus.size());
  for (const auto& rec : corpus) out.push_back(encoder.forward_with_tap(load_features(rec).frames, tap));
  return out;
}

GMPLabelSet label_frames(const std::string& id, const Mat& features, const CodebookSet& books) {
  GMPLabelSet set;
  set.utterance_id = id;
  set.scale_sizes = books.scale_sizes();
  set.labels.resize(features.rows(), books.num_scales());
  for (int s = 0; s < books.num_scales(); ++s) {
    const auto ids = assign_nearest(features, books.codebooks[static_cast<std::size_t>(s)]);
    for (Eigen::Index t = 0; t < features.rows(); ++t) set.labels(t, s) = ids[static_cast<std::size_t>(t)];
  }
  return set;
}

GMPExtraction extract_gmp(const Corpus& corpus, const Checkpoint& stage1, const GMPConfig& cfg) {
  validate(cfg);
  if (stage1.stage_tag != StageTag::Stage1)
    fail(ErrorCode::IncompatibleConfig, "extract_gmp needs a stage1 checkpoint, got " + to_string(stage1.stage_tag));
  if (corpus.empty()) fail(ErrorCode::EmptyInput, "extract_gmp: empty corpus");

  const std::vector<Mat> feats = tapped_features(corpus, stage1, cfg.tap);
  Eigen::Index total = 0;
  for (const auto& f : feats) total += f.rows();
  if (total < cfg.scales.back())
    fail(ErrorCode::TooFewPoints, "extract_gmp: " + std::to_string(total) + " frames for largest scale K=" +
                                      std::to_string(cfg.scales.back()));
  const Eigen::Index dim = feats.front().cols();
  Mat points(total, dim);
  Eigen::Index row = 0;
  for (const auto& f : feats) {
    points.middleRows(row, f.rows()) = f;
    row += f.rows();
  }

  GMPExtraction out;
  out.codebooks.feature_dim = static_cast<int>(dim);
  out.codebooks.stage1_hash = checkpoint_hash(stage1);
  out.codebooks.tap = cfg.tap.layer_id;
  out.codebooks.fit_corpus_hash = corpus_hash(corpus);
  std::set<std::string> sessions;
  for (const auto& rec : corpus) sessions.insert(rec.session_id);
  out.codebooks.fit_sessions.assign(sessions.begin(), sessions.end());

  std::vector<std::vector<int>> per_scale;
  for (std::size_t s = 0; s < cfg.scales.size(); ++s) {
    auto km = fit_kmeans(points, cfg.scales[s], cfg.max_iters, cfg.tol, derive_seed(cfg.seed, "kmeans", s));
    out.codebooks.codebooks.push_back(std::move(km.centroids));
    per_scale.push_back(std::move(km.assignments));
  }

  row = 0;
  for (std::size_t u = 0; u < corpus.size(); ++u) {
    GMPLabelSet set;
    set.utterance_id = corpus[u].id;
    set.scale_sizes = cfg.scales;
    set.labels.resize(feats[u].rows(), static_cast<Eigen::Index>(cfg.scales.size()));
    for (Eigen::Index t = 0; t < feats[u].rows(); ++t)
      for (std::size_t s = 0; s < cfg.scales.size(); ++s)
        set.labels(t, static_cast<Eigen::Index>(s)) = per_scale[s][static_cast<std::size_t>(row + t)];
    row += feats[u].rows();
    out.labels.emplace(corpus[u].id, std::move(set));
  }
  return out;
}

void write_gmp(const GMPLabelSet& labels, const fs::path& path) {
  if (static_cast<int>(labels.scale_sizes.size()) != labels.num_scales())
    fail(ErrorCode::ShapeMismatch, "GMP scale count disagrees with label columns");
  for (Eigen::Index t = 0; t < labels.labels.rows(); ++t)
    for (Eigen::Index s = 0; s < labels.labels.cols(); ++s)
      if (labels.labels(t, s) < 0 || labels.labels(t, s) >= labels.scale_sizes[static_cast<std::size_t>(s)])
        fail(ErrorCode::RangeViolation, "GMP id out of range for " + labels.utterance_id);
  std::ofstream os(path, std::ios::binary);
  if (!os) fail(ErrorCode::Io, "cannot write " + path.string());
  bin::write_magic(os, "GMP1");
  bin::write_u32(os, static_cast<std::uint32_t>(labels.scale_sizes.size()));
  for (int k : labels.scale_sizes) bin::write_u32(os, static_cast<std::uint32_t>(k));
  bin::write_u32(os, static_cast<std::uint32_t>(labels.labels.rows()));
  for (Eigen::Index t = 0; t < labels.labels.rows(); ++t)
    for (Eigen::Index s = 0; s < labels.labels.cols(); ++s) bin::write_u32(os, static_cast<std::uint32_t>(labels.labels(t, s)));
  if (!os) fail(ErrorCode::Io, "short write " + path.string());
}

GMPLabelSet read_gmp(const fs::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) fail(ErrorCode::CorruptFile, "cannot open " + path.string());
  if (!bin::read_magic(is, "GMP1")) fail(ErrorCode::CorruptFile, "bad GMP1 magic in " + path.string());
  GMPLabelSet out;
  out.utterance_id = path.stem().string();
  std::uint32_t scales = 0, frames = 0;
  if (!bin::read_u32(is, scales) || scales == 0 || scales > 64) fail(ErrorCode::CorruptFile, "bad scale count in " + path.string());
  for (std::uint32_t s = 0; s < scales; ++s) {
    std::uint32_t k = 0;
    if (!bin::read_u32(is, k) || k == 0) fail(ErrorCode::CorruptFile, "bad scale size in " + path.string());
    out.scale_sizes.push_back(static_cast<int>(k));
  }
  if (!bin::read_u32(is, frames)) fail(ErrorCode::CorruptFile, "truncated header in " + path.string());
  out.labels.resize(frames, scales);
  for (std::uint32_t t = 0; t < frames; ++t) {
    for (std::uint32_t s = 0; s < scales; ++s) {
      std::uint32_t v = 0;
      if (!bin::read_u32(is, v)) fail(ErrorCode::CorruptFile, "truncated labels in " + path.string());
      if (v >= static_cast<std::uint32_t>(out.scale_sizes[s]))
        fail(ErrorCode::RangeViolation, "label " + std::to_string(v) + " >= K=" + std::to_string(out.scale_sizes[s]) +
                                            " in " + path.string());
      out.labels(t, s) = static_cast<int>(v);
    }
  }
  if (is.peek() != std::char_traits<char>::eof()) fail(ErrorCode::CorruptFile, "trailing bytes in " + path.string());
  return out;
}

void write_gmp_dir(const GMPMap& labels, const fs::path& dir) {
  fs::create_directories(dir);
  for (const auto& [id, set] : labels) write_gmp(set, dir / (id + ".gmp"));
}

GMPMap read_gmp_dir(const Corpus& corpus, const fs::path& dir) {
  GMPMap out;
  for (const auto& rec : corpus) {
    const fs::path p = dir / (rec.id + ".gmp");
    if (!fs::exists(p)) fail(ErrorCode::MissingGMP, "no GMP file for " + rec.id + " in " + dir.string());
    GMPLabelSet set = read_gmp(p);
    set.utterance_id = rec.id;
    out.emplace(rec.id, std::move(set));
  }
  return out;
}

void write_codebooks(const CodebookSet& books, const fs::path& path) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  {
    std::ofstream os(path, std::ios::binary);
    if (!os) fail(ErrorCode::Io, "cannot write " + path.string());
    bin::write_magic(os, "CBK1");
    bin::write_u32(os, static_cast<std::uint32_t>(books.codebooks.size()));
    for (const auto& cb : books.codebooks) bin::write_u32(os, static_cast<std::uint32_t>(cb.rows()));
    bin::write_u32(os, static_cast<std::uint32_t>(books.feature_dim));
    for (const auto& cb : books.codebooks)
      for (Eigen::Index i = 0; i < cb.size(); ++i) bin::write_f32(os, static_cast<float>(cb.data()[i]));
  }
  std::ofstream ms(path.string() + ".meta");
  ms << "stage1_hash=" << books.stage1_hash << '\n' << "tap=" << books.tap << '\n'
     << "fit_corpus_hash=" << books.fit_corpus_hash << '\n' << "fit_sessions=";
  for (std::size_t i = 0; i < books.fit_sessions.size(); ++i) ms << (i ? "," : "") << books.fit_sessions[i];
  ms << '\n';
}

CodebookSet read_codebooks(const fs::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) fail(ErrorCode::CorruptFile, "cannot open " + path.string());
  if (!bin::read_magic(is, "CBK1")) fail(ErrorCode::CorruptFile, "bad CBK1 magic in " + path.string());
  CodebookSet books;
  std::uint32_t scales = 0, dim = 0;
  if (!bin::read_u32(is, scales) || scales == 0 || scales > 64) fail(ErrorCode::CorruptFile, "bad scale count");
  std::vector<std::uint32_t> sizes(scales);
  for (auto& k : sizes)
    if (!bin::read_u32(is, k) || k == 0) fail(ErrorCode::CorruptFile, "bad scale size");
  if (!bin::read_u32(is, dim) || dim == 0) fail(ErrorCode::CorruptFile, "bad dimension");
  books.feature_dim = static_cast<int>(dim);
  for (auto k : sizes) {
    Mat cb(k, dim);
    for (Eigen::Index i = 0; i < cb.size(); ++i) {
      float v = 0;
      if (!bin::read_f32(is, v)) fail(ErrorCode::CorruptFile, "truncated centroids in " + path.string());
      cb.data()[i] = v;
    }
    books.codebooks.push_back(std::move(cb));
  }
  std::ifstream ms(path.string() + ".meta");
  std::string line;
  while (std::getline(ms, line)) {
    const auto eq = line.find('=');
    if (eq == std::string::npos) continue;
    const std::string key = line.substr(0, eq), val = line.substr(eq + 1);
    if (key == "stage1_hash") books.stage1_hash = val;
    else if (key == "tap") books.tap = std::stoi(val);
    else if (key == "fit_corpus_hash") books.fit_corpus_hash = val;
    else if (key == "fit_sessions") {
      std::stringstream ss(val);
      std::string s;
      while (std::getline(ss, s, ',')) books.fit_sessions.push_back(s);
    }
  }
  return books;
}

namespace {

double entropy(const std::unordered_map<long long, double>& counts, double n) {
  double h = 0.0;
  for (const auto& [_, c] : counts)
    if (c > 0) h -= (c / n) * std::log(c / n);
  return h;
}

}  // namespace

double normalized_mutual_information(std::span<const int> a, std::span<const int> b) {
  if (a.size() != b.size()) fail(ErrorCode::ShapeMismatch, "NMI: labelings differ in length");
  if (a.empty()) fail(ErrorCode::EmptyInput, "NMI: no samples");
  const double n = static_cast<double>(a.size());
  std::unordered_map<long long, double> ca, cb, joint;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ca[a[i]] += 1;
    cb[b[i]] += 1;
    joint[(static_cast<long long>(a[i]) << 32) ^ static_cast<unsigned>(b[i])] += 1;
  }
  const double ha = entropy(ca, n), hb = entropy(cb, n);
  if (ha == 0.0 && hb == 0.0) return 1.0;
  double mi = 0.0;
  for (const auto& [key, c] : joint) {
    const int x = static_cast<int>(key >> 32);
    const int y = static_cast<int>(static_cast<unsigned>(key & 0xffffffffLL));
    mi += (c / n) * std::log(c * n / (ca[x] * cb[y]));
  }
  return std::clamp(2.0 * mi / (ha + hb), 0.0, 1.0);
}

double purity(std::span<const int> clusters, std::span<const int> classes) {
  if (clusters.size() != classes.size()) fail(ErrorCode::ShapeMismatch, "purity: labelings differ in length");
  if (clusters.empty()) fail(ErrorCode::EmptyInput, "purity: no samples");
  std::map<int, std::map<int, std::size_t>> table;
  for (std::size_t i = 0; i < clusters.size(); ++i) ++table[clusters[i]][classes[i]];
  std::size_t hits = 0;
  for (const auto& [_, row] : table) {
    std::size_t best = 0;
    for (const auto& [__, c] : row) best = std::max(best, c);
    hits += best;
  }
  return static_cast<double>(hits) / static_cast<double>(clusters.size());
}

ClusterQuality cluster_quality(const GMPMap& labels, const Corpus& corpus) {
  if (labels.empty() || corpus.empty()) fail(ErrorCode::EmptyInput, "cluster_quality: no labels");
  int scales = -1;
  std::vector<std::vector<int>> clusters;
  std::vector<int> emotions;
  for (const auto& rec : corpus) {
    auto it = labels.find(rec.id);
    if (it == labels.end()) fail(ErrorCode::MissingGMP, "cluster_quality: no labels for " + rec.id);
    const auto& set = it->second;
    if (scales < 0) {
      scales = set.num_scales();
      clusters.resize(static_cast<std::size_t>(scales));
    } else if (set.num_scales() != scales) {
      fail(ErrorCode::ShapeMismatch, "cluster_quality: inconsistent scale count");
    }
    for (Eigen::Index t = 0; t < set.labels.rows(); ++t) {
      emotions.push_back(index_of(rec.emotion));
      for (int s = 0; s < scales; ++s) clusters[static_cast<std::size_t>(s)].push_back(set.labels(t, s));
    }
  }
  if (emotions.empty()) fail(ErrorCode::EmptyInput, "cluster_quality: no frames");
  ClusterQuality q;
  for (const auto& c : clusters) {
    q.purity.push_back(purity(c, emotions));
    q.nmi.push_back(normalized_mutual_information(c, emotions));
  }
  return q;
}

}  // namespace gmptl
