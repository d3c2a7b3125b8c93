#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include "gmptl/common.hpp"

namespace gmptl {

inline constexpr int kNumEmotions = 4;
inline constexpr int kNumGenders = 2;
inline constexpr int kNumSessions = 5;

enum class EmotionLabel : std::uint8_t { Angry = 0, Happy = 1, Neutral = 2, Sad = 3 };
enum class GenderLabel : std::uint8_t { Male = 0, Female = 1 };

std::string_view to_string(EmotionLabel e);
std::string_view to_string(GenderLabel g);
inline int index_of(EmotionLabel e) { return static_cast<int>(e); }
inline int index_of(GenderLabel g) { return static_cast<int>(g); }
EmotionLabel emotion_from_index(int i);
GenderLabel gender_from_index(int i);

/// Canonicalizes an IEMOCAP-style emotion tag into the 4-way set.
/// "excited" folds into happy; any other tag outside the four raises UnknownLabel.
EmotionLabel map_emotion_label(std::string_view raw);
GenderLabel parse_gender(std::string_view raw);

struct FrameFeatureMatrix {
  Mat frames;  // T x D
  double frame_rate_hz = 50.0;

  int num_frames() const { return static_cast<int>(frames.rows()); }
  int dim() const { return static_cast<int>(frames.cols()); }
};

struct UtteranceRecord {
  std::string id;
  std::variant<std::filesystem::path, FrameFeatureMatrix> feature_source;
  EmotionLabel emotion = EmotionLabel::Neutral;
  std::optional<GenderLabel> gender;
  std::string speaker_id;
  std::string session_id;
};

using Corpus = std::vector<UtteranceRecord>;

/// Features of a record; reads the FTM1 file when the source is a path.
FrameFeatureMatrix load_features(const UtteranceRecord& rec);

/// Brings every record's features in memory.
void materialize(Corpus& corpus);

// FTM1: magic, u32 T, u32 D, then T*D float32 row-major.
void write_feature_file(const std::filesystem::path& path, const FrameFeatureMatrix& feats);
FrameFeatureMatrix read_feature_file(const std::filesystem::path& path);

struct ManifestStats {
  std::size_t dropped_unknown_label = 0;
};

/// Reads a tab-separated manifest. With `drop_unknown` set, lines whose raw
/// emotion is outside the accepted tags are skipped and counted; otherwise
/// they raise UnknownLabel. Relative feature paths resolve against the
/// manifest's directory.
Corpus load_manifest(const std::filesystem::path& path, bool drop_unknown = false,
                     ManifestStats* stats = nullptr);

/// Writes records (materializing inline features into `feature_dir`).
void write_manifest(const std::filesystem::path& path, const Corpus& corpus,
                    const std::filesystem::path& feature_dir);

struct SyntheticCorpusSpec {
  int n_utterances = 400;
  int n_speakers = 10;
  int n_sessions = kNumSessions;
  int feature_dim = 40;
  int frames_min = 50;
  int frames_max = 150;
  double separability = 6.0;
  std::uint64_t seed = 1;
  // Ratio of the gender offset norm to the emotion offset norm.
  double gender_ratio = 0.5;
};

void validate(const SyntheticCorpusSpec& spec);
Corpus generate_synthetic_corpus(const SyntheticCorpusSpec& spec);

struct FrontendConfig {
  int sample_rate = 16000;
  int window = 400;  // 25 ms
  int hop = 320;     // 20 ms
  int fft_size = 512;
  int n_mels = 40;
  double log_floor = 1e-10;
};

/// Number of frames for a signal of `length` samples; only full windows are
/// emitted: floor((L - W) / H) + 1.
int frontend_frame_count(std::size_t length, const FrontendConfig& cfg);

/// Log mel-filterbank magnitudes, one frame per hop.
FrameFeatureMatrix compute_frontend(std::span<const double> waveform, const FrontendConfig& cfg = {});

/// Hash over ids and labels; stable provenance key for a record set.
std::string corpus_hash(const Corpus& corpus);

}  // namespace gmptl
