#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "gmptl/corpus.hpp"
#include "gmptl/encoder.hpp"

namespace gmptl {

struct GMPConfig {
  std::vector<int> scales = {8, 32, 128};
  LayerTap tap{-3};
  int max_iters = 100;
  double tol = 1e-4;
  std::uint64_t seed = 0;
};

void validate(const GMPConfig& cfg);

struct CodebookSet {
  std::vector<Mat> codebooks;  // per scale, K_s x D
  int feature_dim = 0;
  // Provenance.
  std::string stage1_hash;
  int tap = -3;
  std::string fit_corpus_hash;           // corpus_hash of the records whose frames were clustered
  std::vector<std::string> fit_sessions; // sessions contributing frames

  int num_scales() const { return static_cast<int>(codebooks.size()); }
  std::vector<int> scale_sizes() const;
};

struct GMPLabelSet {
  std::string utterance_id;
  std::vector<int> scale_sizes;                                         // K_s per column
  Eigen::Matrix<int, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> labels;  // T x S

  int num_frames() const { return static_cast<int>(labels.rows()); }
  int num_scales() const { return static_cast<int>(labels.cols()); }
};

using GMPMap = std::map<std::string, GMPLabelSet>;

struct GMPExtraction {
  CodebookSet codebooks;
  GMPMap labels;
};

/// Tapped-layer features of the stage-1 encoder for every utterance, pooled
/// into one point set and clustered once per scale; every frame is labeled
/// at every scale.
GMPExtraction extract_gmp(const Corpus& corpus, const Checkpoint& stage1, const GMPConfig& cfg);

/// Tapped features per utterance (same order as `corpus`).
std::vector<Mat> tapped_features(const Corpus& corpus, const Checkpoint& ckpt, LayerTap tap);

/// Labels of `features` under existing codebooks.
GMPLabelSet label_frames(const std::string& id, const Mat& features, const CodebookSet& books);

// GMP1: magic, u32 S, S x u32 K_s, u32 T, then T x S u32 row-major.
void write_gmp(const GMPLabelSet& labels, const std::filesystem::path& path);
GMPLabelSet read_gmp(const std::filesystem::path& path);
/// Writes one `<id>.gmp` per utterance into `dir`.
void write_gmp_dir(const GMPMap& labels, const std::filesystem::path& dir);
GMPMap read_gmp_dir(const Corpus& corpus, const std::filesystem::path& dir);

// CBK1: magic, u32 S, S x u32 K_s, u32 D, then every scale's K_s x D float32
// centroids in order. Provenance goes to `<path>.meta`.
void write_codebooks(const CodebookSet& books, const std::filesystem::path& path);
CodebookSet read_codebooks(const std::filesystem::path& path);

struct ClusterQuality {
  std::vector<double> purity;  // per scale
  std::vector<double> nmi;     // per scale
};

/// Purity and NMI of each scale against frame-inherited utterance emotion.
ClusterQuality cluster_quality(const GMPMap& labels, const Corpus& corpus);

/// Arithmetic-mean normalized mutual information between two labelings.
double normalized_mutual_information(std::span<const int> a, std::span<const int> b);
double purity(std::span<const int> clusters, std::span<const int> classes);

}  // namespace gmptl
