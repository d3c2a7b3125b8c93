#include "gmptl/corpus.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <mutex>
#include <numbers>
#include <sstream>
#include <unordered_set>

#include <fftw3.h>

#include "gmptl/error.hpp"

namespace gmptl {

namespace fs = std::filesystem;

std::string_view to_string(EmotionLabel e) {
  switch (e) {
    case EmotionLabel::Angry: return "angry";
    case EmotionLabel::Happy: return "happy";
    case EmotionLabel::Neutral: return "neutral";
    case EmotionLabel::Sad: return "sad";
  }
  return "?";
}

std::string_view to_string(GenderLabel g) { return g == GenderLabel::Male ? "male" : "female"; }

EmotionLabel emotion_from_index(int i) {
  if (i < 0 || i >= kNumEmotions) fail(ErrorCode::RangeViolation, "emotion index " + std::to_string(i));
  return static_cast<EmotionLabel>(i);
}

GenderLabel gender_from_index(int i) {
  if (i < 0 || i >= kNumGenders) fail(ErrorCode::RangeViolation, "gender index " + std::to_string(i));
  return static_cast<GenderLabel>(i);
}

namespace {

std::string lower(std::string_view s) {
  std::string out(s);
  std::transform(out.begin(), out.end(), out.begin(), [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  return out;
}

}  // namespace

EmotionLabel map_emotion_label(std::string_view raw) {
  const std::string tag = lower(raw);
  if (tag == "angry") return EmotionLabel::Angry;
  if (tag == "happy" || tag == "excited") return EmotionLabel::Happy;
  if (tag == "neutral") return EmotionLabel::Neutral;
  if (tag == "sad") return EmotionLabel::Sad;
  fail(ErrorCode::UnknownLabel, "emotion tag '" + std::string(raw) + "'");
}

GenderLabel parse_gender(std::string_view raw) {
  const std::string tag = lower(raw);
  if (tag == "male" || tag == "m") return GenderLabel::Male;
  if (tag == "female" || tag == "f") return GenderLabel::Female;
  fail(ErrorCode::MalformedManifest, "gender '" + std::string(raw) + "'");
}

FrameFeatureMatrix load_features(const UtteranceRecord& rec) {
  if (const auto* inline_feats = std::get_if<FrameFeatureMatrix>(&rec.feature_source)) return *inline_feats;
  return read_feature_file(std::get<fs::path>(rec.feature_source));
}

void materialize(Corpus& corpus) {
  for (auto& rec : corpus) {
    if (std::holds_alternative<fs::path>(rec.feature_source)) rec.feature_source = load_features(rec);
  }
}

void write_feature_file(const fs::path& path, const FrameFeatureMatrix& feats) {
  std::ofstream os(path, std::ios::binary);
  if (!os) fail(ErrorCode::Io, "cannot write " + path.string());
  bin::write_magic(os, "FTM1");
  bin::write_u32(os, static_cast<std::uint32_t>(feats.frames.rows()));
  bin::write_u32(os, static_cast<std::uint32_t>(feats.frames.cols()));
  for (Eigen::Index t = 0; t < feats.frames.rows(); ++t)
    for (Eigen::Index d = 0; d < feats.frames.cols(); ++d) bin::write_f32(os, static_cast<float>(feats.frames(t, d)));
  if (!os) fail(ErrorCode::Io, "short write " + path.string());
}

FrameFeatureMatrix read_feature_file(const fs::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) fail(ErrorCode::CorruptFile, "cannot open feature file " + path.string());
  if (!bin::read_magic(is, "FTM1")) fail(ErrorCode::CorruptFile, "bad FTM1 magic in " + path.string());
  std::uint32_t rows = 0, cols = 0;
  if (!bin::read_u32(is, rows) || !bin::read_u32(is, cols)) fail(ErrorCode::CorruptFile, "truncated header " + path.string());
  if (rows == 0 || cols == 0) fail(ErrorCode::CorruptFile, "empty feature matrix " + path.string());
  FrameFeatureMatrix out;
  out.frames.resize(rows, cols);
  for (std::uint32_t t = 0; t < rows; ++t) {
    for (std::uint32_t d = 0; d < cols; ++d) {
      float v = 0;
      if (!bin::read_f32(is, v)) fail(ErrorCode::CorruptFile, "truncated data " + path.string());
      if (!std::isfinite(v)) fail(ErrorCode::NonFiniteInput, "non-finite feature in " + path.string());
      out.frames(t, d) = v;
    }
  }
  return out;
}

Corpus load_manifest(const fs::path& path, bool drop_unknown, ManifestStats* stats) {
  std::ifstream is(path);
  if (!is) fail(ErrorCode::MalformedManifest, "cannot open manifest " + path.string());
  const fs::path base = path.parent_path();
  Corpus out;
  std::unordered_set<std::string> seen;
  ManifestStats local;
  std::string line;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() || line.front() == '#') continue;
    std::vector<std::string> fields;
    std::stringstream ss(line);
    std::string f;
    while (std::getline(ss, f, '\t')) fields.push_back(f);
    const std::string where = path.string() + ":" + std::to_string(lineno);
    if (fields.size() != 6) fail(ErrorCode::MalformedManifest, where + " expected 6 tab-separated fields, got " + std::to_string(fields.size()));
    for (const auto& field : fields)
      if (field.empty()) fail(ErrorCode::MalformedManifest, where + " empty field");

    UtteranceRecord rec;
    rec.id = fields[0];
    try {
      rec.emotion = map_emotion_label(fields[2]);
    } catch (const Error&) {
      if (!drop_unknown) throw Error(ErrorCode::UnknownLabel, where + " emotion tag '" + fields[2] + "'");
      ++local.dropped_unknown_label;
      continue;
    }
    if (!seen.insert(rec.id).second) fail(ErrorCode::DuplicateId, where + " id '" + rec.id + "'");
    fs::path feat = fields[1];
    rec.feature_source = feat.is_absolute() ? feat : base / feat;
    if (fields[3] != "-") rec.gender = parse_gender(fields[3]);
    rec.speaker_id = fields[4];
    rec.session_id = fields[5];
    out.push_back(std::move(rec));
  }
  if (local.dropped_unknown_label > 0)
    log_info("manifest " + path.string() + ": dropped " + std::to_string(local.dropped_unknown_label) + " utterances with excluded labels");
  if (stats) *stats = local;
  return out;
}

void write_manifest(const fs::path& path, const Corpus& corpus, const fs::path& feature_dir) {
  fs::create_directories(feature_dir);
  std::ofstream os(path);
  if (!os) fail(ErrorCode::Io, "cannot write " + path.string());
  os << "# id\tfeature_path\traw_emotion\tgender\tspeaker_id\tsession_id\n";
  const fs::path base = path.parent_path();
  for (const auto& rec : corpus) {
    fs::path feat;
    if (const auto* p = std::get_if<fs::path>(&rec.feature_source)) {
      feat = *p;
    } else {
      feat = feature_dir / (rec.id + ".ftm");
      write_feature_file(feat, std::get<FrameFeatureMatrix>(rec.feature_source));
    }
    const fs::path rel = feat.lexically_relative(base.empty() ? fs::path(".") : base);
    os << rec.id << '\t' << (rel.empty() ? feat : rel).string() << '\t' << to_string(rec.emotion) << '\t'
       << (rec.gender ? std::string(to_string(*rec.gender)) : std::string("-")) << '\t' << rec.speaker_id << '\t'
       << rec.session_id << '\n';
  }
}

void validate(const SyntheticCorpusSpec& spec) {
  auto bad = [](const std::string& msg) { fail(ErrorCode::InvalidSpec, msg); };
  if (spec.n_utterances <= 0) bad("n_utterances must be positive");
  if (spec.n_sessions != kNumSessions) bad("n_sessions must be 5");
  if (spec.n_speakers <= 0 || spec.n_speakers % spec.n_sessions != 0)
    bad("n_speakers must be a positive multiple of n_sessions");
  if (spec.feature_dim < kNumEmotions + 1) bad("feature_dim must be at least 5");
  if (spec.frames_min < 1 || spec.frames_min > spec.frames_max) bad("frame range must satisfy 1 <= min <= max");
  if (!(spec.separability >= 0.0) || !std::isfinite(spec.separability)) bad("separability must be finite and >= 0");
  if (!(spec.gender_ratio >= 0.0)) bad("gender_ratio must be >= 0");
}

Corpus generate_synthetic_corpus(const SyntheticCorpusSpec& spec) {
  validate(spec);
  Rng rng(spec.seed);
  std::normal_distribution<double> normal(0.0, 1.0);

  // Orthonormal directions: one per emotion plus one for gender.
  Eigen::MatrixXd gauss(spec.feature_dim, kNumEmotions + 1);
  for (Eigen::Index i = 0; i < gauss.size(); ++i) gauss.data()[i] = normal(rng);
  const Eigen::MatrixXd q = Eigen::HouseholderQR<Eigen::MatrixXd>(gauss).householderQ() *
                            Eigen::MatrixXd::Identity(spec.feature_dim, kNumEmotions + 1);

  // |a q_i - a q_j| = a * sqrt(2) = separability (unit within-category std).
  const double amp = spec.separability / std::numbers::sqrt2;
  const double gender_amp = spec.gender_ratio * amp;

  const int per_session = spec.n_speakers / spec.n_sessions;
  struct Speaker {
    std::string id, session;
    GenderLabel gender;
  };
  std::vector<Speaker> speakers;
  for (int k = 0; k < spec.n_speakers; ++k) {
    const int session = k / per_session;
    const GenderLabel g = (k % 2 == 0) ? GenderLabel::Male : GenderLabel::Female;
    char sid[32], sess[16];
    std::snprintf(sess, sizeof sess, "Ses%02d", session + 1);
    std::snprintf(sid, sizeof sid, "%s_spk%02d%c", sess, k, g == GenderLabel::Male ? 'M' : 'F');
    speakers.push_back({sid, sess, g});
  }

  std::uniform_int_distribution<int> emo_dist(0, kNumEmotions - 1);
  std::uniform_int_distribution<int> len_dist(spec.frames_min, spec.frames_max);
  Corpus out;
  out.reserve(static_cast<std::size_t>(spec.n_utterances));
  for (int i = 0; i < spec.n_utterances; ++i) {
    const Speaker& spk = speakers[static_cast<std::size_t>(i % spec.n_speakers)];
    const int emo = emo_dist(rng);
    const int frames = len_dist(rng);
    Vec mean = amp * q.col(emo);
    mean += (spk.gender == GenderLabel::Male ? gender_amp : -gender_amp) * q.col(kNumEmotions);

    FrameFeatureMatrix feats;
    feats.frames.resize(frames, spec.feature_dim);
    for (int t = 0; t < frames; ++t)
      for (int d = 0; d < spec.feature_dim; ++d) feats.frames(t, d) = mean(d) + normal(rng);

    UtteranceRecord rec;
    char id[48];
    std::snprintf(id, sizeof id, "%s_u%05d", spk.id.c_str(), i);
    rec.id = id;
    rec.feature_source = std::move(feats);
    rec.emotion = emotion_from_index(emo);
    rec.gender = spk.gender;
    rec.speaker_id = spk.id;
    rec.session_id = spk.session;
    out.push_back(std::move(rec));
  }
  return out;
}

int frontend_frame_count(std::size_t length, const FrontendConfig& cfg) {
  if (length < static_cast<std::size_t>(cfg.window)) return 0;
  return static_cast<int>((length - static_cast<std::size_t>(cfg.window)) / static_cast<std::size_t>(cfg.hop)) + 1;
}

namespace {

double hz_to_mel(double hz) { return 2595.0 * std::log10(1.0 + hz / 700.0); }
double mel_to_hz(double mel) { return 700.0 * (std::pow(10.0, mel / 2595.0) - 1.0); }

// n_mels x (fft_size/2 + 1) triangular filters.
Mat mel_filterbank(const FrontendConfig& cfg) {
  const int bins = cfg.fft_size / 2 + 1;
  Mat fb = Mat::Zero(cfg.n_mels, bins);
  const double mel_hi = hz_to_mel(cfg.sample_rate / 2.0);
  std::vector<double> edges(static_cast<std::size_t>(cfg.n_mels + 2));
  for (int i = 0; i < cfg.n_mels + 2; ++i) edges[static_cast<std::size_t>(i)] = mel_to_hz(mel_hi * i / (cfg.n_mels + 1));
  for (int m = 0; m < cfg.n_mels; ++m) {
    const double lo = edges[static_cast<std::size_t>(m)], mid = edges[static_cast<std::size_t>(m + 1)],
                 hi = edges[static_cast<std::size_t>(m + 2)];
    for (int b = 0; b < bins; ++b) {
      const double f = static_cast<double>(b) * cfg.sample_rate / cfg.fft_size;
      if (f > lo && f < hi) fb(m, b) = f <= mid ? (f - lo) / (mid - lo) : (hi - f) / (hi - mid);
    }
  }
  return fb;
}

std::mutex g_fftw_plan_mutex;  // fftw planner is not thread-safe

}  // namespace

FrameFeatureMatrix compute_frontend(std::span<const double> waveform, const FrontendConfig& cfg) {
  if (cfg.window <= 0 || cfg.hop <= 0 || cfg.fft_size < cfg.window || cfg.n_mels <= 0)
    fail(ErrorCode::InvalidSpec, "front-end configuration");
  if (waveform.size() < static_cast<std::size_t>(cfg.window))
    fail(ErrorCode::EmptySignal, "signal shorter than one analysis window");
  for (double x : waveform)
    if (!std::isfinite(x)) fail(ErrorCode::NonFiniteInput, "waveform contains non-finite samples");

  const int frames = frontend_frame_count(waveform.size(), cfg);
  const int bins = cfg.fft_size / 2 + 1;
  const Mat fb = mel_filterbank(cfg);

  std::vector<double> hamming(static_cast<std::size_t>(cfg.window));
  for (int n = 0; n < cfg.window; ++n)
    hamming[static_cast<std::size_t>(n)] = 0.54 - 0.46 * std::cos(2.0 * std::numbers::pi * n / (cfg.window - 1));

  std::vector<double> in(static_cast<std::size_t>(cfg.fft_size), 0.0);
  std::vector<fftw_complex> spec(static_cast<std::size_t>(bins));
  fftw_plan plan;
  {
    std::lock_guard lock(g_fftw_plan_mutex);
    plan = fftw_plan_dft_r2c_1d(cfg.fft_size, in.data(), spec.data(), FFTW_ESTIMATE);
  }

  FrameFeatureMatrix out;
  out.frame_rate_hz = static_cast<double>(cfg.sample_rate) / cfg.hop;
  out.frames.resize(frames, cfg.n_mels);
  Vec magnitude(bins);
  for (int t = 0; t < frames; ++t) {
    const std::size_t start = static_cast<std::size_t>(t) * static_cast<std::size_t>(cfg.hop);
    std::fill(in.begin(), in.end(), 0.0);
    for (int n = 0; n < cfg.window; ++n)
      in[static_cast<std::size_t>(n)] = waveform[start + static_cast<std::size_t>(n)] * hamming[static_cast<std::size_t>(n)];
    fftw_execute(plan);
    for (int b = 0; b < bins; ++b) magnitude(b) = std::hypot(spec[static_cast<std::size_t>(b)][0], spec[static_cast<std::size_t>(b)][1]);
    const Vec energies = fb * magnitude;
    for (int m = 0; m < cfg.n_mels; ++m) out.frames(t, m) = std::log(std::max(energies(m), cfg.log_floor));
  }
  {
    std::lock_guard lock(g_fftw_plan_mutex);
    fftw_destroy_plan(plan);
  }
  return out;
}

std::string corpus_hash(const Corpus& corpus) {
  std::vector<const UtteranceRecord*> sorted;
  for (const auto& r : corpus) sorted.push_back(&r);
  std::sort(sorted.begin(), sorted.end(), [](auto* a, auto* b) { return a->id < b->id; });
  Hasher h;
  for (const auto* r : sorted) {
    h.str(r->id).u64(static_cast<std::uint64_t>(index_of(r->emotion))).str(r->speaker_id).str(r->session_id);
    h.u64(r->gender ? static_cast<std::uint64_t>(index_of(*r->gender)) : 9);
  }
  return h.hex();
}

}  // namespace gmptl
