#include "gmptl/pipeline.hpp"

#include <algorithm>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <numeric>
#include <sstream>

#include "gmptl/error.hpp"

namespace gmptl {

namespace fs = std::filesystem;

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

[[noreturn]] void bad_value(const std::string& key, const std::string& value, const std::string& what) {
  fail(ErrorCode::ConfigInvalid, "config key '" + key + "': " + what + " (got '" + value + "')");
}

int to_int(const std::string& key, const std::string& v) {
  try {
    std::size_t pos = 0;
    const int x = std::stoi(v, &pos);
    if (pos != v.size()) bad_value(key, v, "expected an integer");
    return x;
  } catch (const std::logic_error&) {
    bad_value(key, v, "expected an integer");
  }
}

std::uint64_t to_u64(const std::string& key, const std::string& v) {
  try {
    std::size_t pos = 0;
    if (!v.empty() && v[0] == '-') bad_value(key, v, "expected a non-negative integer");
    const auto x = std::stoull(v, &pos);
    if (pos != v.size()) bad_value(key, v, "expected a non-negative integer");
    return x;
  } catch (const std::logic_error&) {
    bad_value(key, v, "expected a non-negative integer");
  }
}

double to_double(const std::string& key, const std::string& v) {
  try {
    std::size_t pos = 0;
    const double x = std::stod(v, &pos);
    if (pos != v.size()) bad_value(key, v, "expected a number");
    return x;
  } catch (const std::logic_error&) {
    bad_value(key, v, "expected a number");
  }
}

bool to_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "no") return false;
  bad_value(key, v, "expected true/false");
}

std::vector<int> to_int_list(const std::string& key, const std::string& v) {
  std::vector<int> out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(to_int(key, trim(item)));
  if (out.empty()) bad_value(key, v, "expected a comma-separated list");
  return out;
}

std::string join(const std::vector<int>& xs) {
  std::string s;
  for (std::size_t i = 0; i < xs.size(); ++i) s += (i ? "," : "") + std::to_string(xs[i]);
  return s;
}

using Setter = std::function<void(PipelineConfig&, const std::string&, const std::string&)>;
using Getter = std::function<std::string(const PipelineConfig&)>;

struct Key {
  const char* name;
  Setter set;
  Getter get;
};

#define GMPTL_INT(NAME, FIELD)                                                                   \
  Key {                                                                                          \
    NAME, [](PipelineConfig& c, const std::string& k, const std::string& v) { c.FIELD = to_int(k, v); }, \
        [](const PipelineConfig& c) { return std::to_string(c.FIELD); }                          \
  }
#define GMPTL_U64(NAME, FIELD)                                                                   \
  Key {                                                                                          \
    NAME, [](PipelineConfig& c, const std::string& k, const std::string& v) { c.FIELD = to_u64(k, v); }, \
        [](const PipelineConfig& c) { return std::to_string(c.FIELD); }                          \
  }
#define GMPTL_DBL(NAME, FIELD)                                                                   \
  Key {                                                                                          \
    NAME, [](PipelineConfig& c, const std::string& k, const std::string& v) { c.FIELD = to_double(k, v); }, \
        [](const PipelineConfig& c) { return format_double(c.FIELD); }                                     \
  }
#define GMPTL_BOOL(NAME, FIELD)                                                                  \
  Key {                                                                                          \
    NAME, [](PipelineConfig& c, const std::string& k, const std::string& v) { c.FIELD = to_bool(k, v); }, \
        [](const PipelineConfig& c) { return std::string(c.FIELD ? "true" : "false"); }          \
  }

const std::vector<Key>& keys() {
  static const std::vector<Key> table = {
      Key{"corpus.manifest",
          [](PipelineConfig& c, const std::string&, const std::string& v) {
            if (v.empty())
              c.manifest.reset();
            else
              c.manifest = fs::path(v);
          },
          [](const PipelineConfig& c) { return c.manifest ? c.manifest->string() : std::string(); }},
      GMPTL_BOOL("corpus.drop_unknown", drop_unknown_labels),
      GMPTL_BOOL("corpus.permute_labels", permute_labels),
      GMPTL_INT("synth.n_utterances", synth.n_utterances),
      GMPTL_INT("synth.n_speakers", synth.n_speakers),
      GMPTL_INT("synth.feature_dim", synth.feature_dim),
      GMPTL_INT("synth.frames_min", synth.frames_min),
      GMPTL_INT("synth.frames_max", synth.frames_max),
      GMPTL_DBL("synth.separability", synth.separability),
      GMPTL_DBL("synth.gender_ratio", synth.gender_ratio),
      GMPTL_U64("synth.seed", synth.seed),
      GMPTL_INT("encoder.n_layers", encoder.n_layers),
      GMPTL_INT("encoder.model_dim", encoder.model_dim),
      GMPTL_INT("encoder.n_heads", encoder.n_heads),
      GMPTL_INT("encoder.ff_dim", encoder.ff_dim),
      GMPTL_DBL("encoder.dropout", encoder.dropout),
      GMPTL_DBL("stage1.alpha_e", stage1.loss.alpha_e),
      GMPTL_INT("stage1.bilstm_hidden", stage1.head.bilstm_hidden),
      GMPTL_INT("stage1.proj_hidden", stage1.head.proj_hidden),
      GMPTL_INT("stage1.embed_dim", stage1.head.embed_dim),
      GMPTL_INT("stage1.epochs", stage1_epochs),
      GMPTL_BOOL("stage1.freeze_encoder", stage1_freeze_encoder),
      GMPTL_BOOL("stage1.use_gender", use_gender),
      Key{"gmp.scales",
          [](PipelineConfig& c, const std::string& k, const std::string& v) { c.gmp.scales = to_int_list(k, v); },
          [](const PipelineConfig& c) { return join(c.gmp.scales); }},
      GMPTL_INT("gmp.tap", gmp.tap.layer_id),
      GMPTL_INT("gmp.max_iters", gmp.max_iters),
      GMPTL_DBL("gmp.tol", gmp.tol),
      GMPTL_INT("stage2.head_hidden", stage2.head_hidden),
      GMPTL_DBL("stage2.mask_prob", stage2.mask_prob),
      GMPTL_INT("stage2.span_length", stage2.span_length),
      GMPTL_INT("stage2.epochs", stage2_epochs),
      GMPTL_INT("stage3.bilstm_hidden", stage3.head.bilstm_hidden),
      GMPTL_INT("stage3.proj_hidden", stage3.head.proj_hidden),
      GMPTL_INT("stage3.embed_dim", stage3.head.embed_dim),
      GMPTL_DBL("stage3.m", stage3.ams.m),
      GMPTL_DBL("stage3.s", stage3.ams.s),
      Key{"stage3.mode",
          [](PipelineConfig& c, const std::string& k, const std::string& v) {
            try {
              c.stage3.mode = parse_finetune_mode(v);
            } catch (const Error&) {
              bad_value(k, v, "expected hybrid_ft or ce_ft");
            }
          },
          [](const PipelineConfig& c) { return to_string(c.stage3.mode); }},
      GMPTL_INT("stage3.epochs", stage3_epochs),
      GMPTL_BOOL("stage3.freeze_encoder", stage3_freeze_encoder),
      GMPTL_DBL("train.lr", train.lr),
      GMPTL_INT("train.batch_size", train.batch_size),
      GMPTL_U64("train.seed", train.seed),
      GMPTL_DBL("train.clip_norm", train.clip_norm),
      Key{"run.artifact_dir",
          [](PipelineConfig& c, const std::string&, const std::string& v) { c.artifact_dir = v; },
          [](const PipelineConfig& c) { return c.artifact_dir.string(); }},
  };
  return table;
}

#undef GMPTL_INT
#undef GMPTL_U64
#undef GMPTL_DBL
#undef GMPTL_BOOL

}  // namespace

void apply_config_value(PipelineConfig& cfg, const std::string& key, const std::string& value) {
  for (const auto& k : keys())
    if (key == k.name) {
      k.set(cfg, key, value);
      return;
    }
  fail(ErrorCode::ConfigInvalid, "unknown config key '" + key + "'");
}

PipelineConfig parse_config(const std::string& text, PipelineConfig base) {
  std::istringstream is(text);
  std::string line;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      fail(ErrorCode::ConfigInvalid, "config line " + std::to_string(lineno) + " is not key=value: '" + line + "'");
    apply_config_value(base, trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
  }
  return base;
}

PipelineConfig load_config(const fs::path& path, PipelineConfig base) {
  std::ifstream is(path);
  if (!is) fail(ErrorCode::ConfigInvalid, "cannot read config " + path.string());
  std::stringstream ss;
  ss << is.rdbuf();
  return parse_config(ss.str(), std::move(base));
}

std::string dump_config(const PipelineConfig& cfg) {
  std::string out;
  for (const auto& k : keys()) out += std::string(k.name) + "=" + k.get(cfg) + "\n";
  return out;
}

void validate(const PipelineConfig& cfg) {
  auto check = [](bool ok, const std::string& what) {
    if (!ok) fail(ErrorCode::ConfigInvalid, what);
  };
  if (!cfg.manifest) {
    try {
      validate(cfg.synth);
    } catch (const Error& e) {
      fail(ErrorCode::ConfigInvalid, e.what());
    }
  }
  EncoderConfig enc = cfg.encoder;
  if (!cfg.manifest) enc.input_dim = cfg.synth.feature_dim;
  try {
    validate(enc);
    validate(cfg.gmp);
    validate(cfg.stage3.ams);
  } catch (const Error& e) {
    fail(e.code() == ErrorCode::TapOutOfRange ? ErrorCode::TapOutOfRange : ErrorCode::ConfigInvalid, e.what());
  }
  resolve_tap(cfg.gmp.tap, cfg.encoder.n_layers);
  check(cfg.stage1.loss.alpha_e >= 0.0 && cfg.stage1.loss.alpha_e <= 1.0, "stage1.alpha_e must lie in [0,1]");
  check(cfg.stage2.mask_prob > 0.0 && cfg.stage2.mask_prob <= 1.0, "stage2.mask_prob must lie in (0,1]");
  check(cfg.stage2.span_length >= 1, "stage2.span_length must be >= 1");
  check(cfg.stage2.head_hidden >= 1, "stage2.head_hidden must be >= 1");
  for (const auto* h : {&cfg.stage1.head, &cfg.stage3.head})
    check(h->bilstm_hidden >= 1 && h->proj_hidden >= 1 && h->embed_dim >= 1, "pooling head sizes must be >= 1");
  check(cfg.stage1_epochs >= 0 && cfg.stage2_epochs >= 0 && cfg.stage3_epochs >= 0, "epochs must be >= 0");
  check(cfg.train.lr > 0.0, "train.lr must be > 0");
  check(cfg.train.batch_size >= 1, "train.batch_size must be >= 1");
  check(cfg.train.clip_norm >= 0.0, "train.clip_norm must be >= 0");
}

fs::path resolve_artifact_dir(const fs::path& configured) {
  const char* root = std::getenv(kArtifactRootEnv);
  if (root == nullptr || *root == '\0' || configured.is_absolute()) return configured;
  return fs::path(root) / configured;
}

Corpus load_corpus(const PipelineConfig& cfg) {
  Corpus corpus;
  if (cfg.manifest) {
    ManifestStats stats;
    corpus = load_manifest(*cfg.manifest, cfg.drop_unknown_labels, &stats);
    if (stats.dropped_unknown_label > 0)
      log_info("dropped " + std::to_string(stats.dropped_unknown_label) + " utterances with unmapped emotion labels");
    materialize(corpus);
  } else {
    corpus = generate_synthetic_corpus(cfg.synth);
  }
  if (corpus.empty()) fail(ErrorCode::EmptyInput, "corpus is empty");
  if (cfg.permute_labels) corpus = permute_emotions(corpus, derive_seed(cfg.train.seed, "permute_labels"));
  return corpus;
}

Corpus permute_emotions(const Corpus& corpus, std::uint64_t seed) {
  std::vector<EmotionLabel> labels;
  labels.reserve(corpus.size());
  for (const auto& r : corpus) labels.push_back(r.emotion);
  Rng rng(seed);
  for (std::size_t i = labels.size(); i > 1; --i) {
    std::uniform_int_distribution<std::size_t> pick(0, i - 1);
    std::swap(labels[i - 1], labels[pick(rng)]);
  }
  Corpus out = corpus;
  for (std::size_t i = 0; i < out.size(); ++i) out[i].emotion = labels[i];
  return out;
}

FoldArtifacts fold_layout(const fs::path& run_dir, int fold_id) {
  FoldArtifacts a;
  a.dir = run_dir / ("fold" + std::to_string(fold_id));
  a.stage1_ckpt = a.dir / "stage1.ckpt";
  a.stage2_ckpt = a.dir / "stage2.ckpt";
  a.stage3_ckpt = a.dir / "stage3.ckpt";
  a.codebooks = a.dir / "codebooks.cbk";
  a.gmp_dir = a.dir / "gmp";
  return a;
}

Checkpoint load_chained(const fs::path& path, const Checkpoint& upstream) {
  Checkpoint ckpt = load_checkpoint(path);
  const auto it = ckpt.metadata.find("upstream_hash");
  const std::string expected = checkpoint_hash(upstream);
  if (it == ckpt.metadata.end() || it->second != expected)
    fail(ErrorCode::ProvenanceMismatch, path.string() + " was not trained from the checkpoint with hash " + expected);
  return ckpt;
}

void verify_fold_chain(const FoldArtifacts& layout) {
  const Checkpoint s1 = load_checkpoint(layout.stage1_ckpt);
  if (s1.stage_tag != StageTag::Stage1) fail(ErrorCode::ProvenanceMismatch, layout.stage1_ckpt.string() + " is not a stage-1 checkpoint");
  const CodebookSet books = read_codebooks(layout.codebooks);
  if (books.stage1_hash != checkpoint_hash(s1))
    fail(ErrorCode::ProvenanceMismatch, layout.codebooks.string() + " was not fitted on " + layout.stage1_ckpt.string());
  const Checkpoint s2 = load_chained(layout.stage2_ckpt, s1);
  load_chained(layout.stage3_ckpt, s2);
}

std::vector<EmotionLabel> run_fold(const PipelineConfig& cfg, const FoldSplit& split, const FoldArtifacts& layout) {
  fs::create_directories(layout.dir);
  const std::string tag = "fold " + std::to_string(split.fold_id) + ": ";
  const std::uint64_t fold_seed = derive_seed(cfg.train.seed, "fold", static_cast<std::uint64_t>(split.fold_id));

  EncoderConfig enc = cfg.encoder;
  enc.input_dim = load_features(split.train_records.front()).dim();
  enc.seed = derive_seed(fold_seed, "encoder");

  Stage1Config s1cfg = cfg.stage1;
  if (!cfg.use_gender) s1cfg.loss.alpha_e = 1.0;
  TrainHyperparams hp1 = cfg.train;
  hp1.epochs = cfg.stage1_epochs;
  hp1.freeze_encoder = cfg.stage1_freeze_encoder;
  hp1.seed = derive_seed(fold_seed, "stage1");
  log_info(tag + "stage 1 on " + std::to_string(split.train_records.size()) + " utterances");
  Stage1Result r1 = train_stage1(split.train_records, enc, s1cfg, hp1);
  save_checkpoint(r1.checkpoint, layout.stage1_ckpt);
  r1.log.write(layout.dir / "stage1_log.csv");
  const Checkpoint stage1 = load_checkpoint(layout.stage1_ckpt);

  GMPConfig gcfg = cfg.gmp;
  gcfg.seed = derive_seed(fold_seed, "gmp");
  log_info(tag + "extracting GMPs from layer " + std::to_string(gcfg.tap.layer_id));
  GMPExtraction gmp = extract_gmp(split.train_records, stage1, gcfg);
  write_codebooks(gmp.codebooks, layout.codebooks);
  write_gmp_dir(gmp.labels, layout.gmp_dir);
  {
    const CodebookSet books = read_codebooks(layout.codebooks);
    if (books.stage1_hash != checkpoint_hash(stage1))
      fail(ErrorCode::ProvenanceMismatch, tag + "codebooks do not belong to the stage-1 checkpoint");
    if (std::find(books.fit_sessions.begin(), books.fit_sessions.end(), split.test_session) != books.fit_sessions.end())
      fail(ErrorCode::ProvenanceMismatch, tag + "codebooks were fitted on frames of test session " + split.test_session);
  }

  TrainHyperparams hp2 = cfg.train;
  hp2.epochs = cfg.stage2_epochs;
  hp2.seed = derive_seed(fold_seed, "stage2");
  log_info(tag + "stage 2");
  Stage2Result r2 = train_stage2(split.train_records, gmp.labels, stage1, cfg.stage2, hp2);
  save_checkpoint(r2.checkpoint, layout.stage2_ckpt);
  r2.log.write(layout.dir / "stage2_log.csv");
  const Checkpoint stage2 = load_chained(layout.stage2_ckpt, stage1);

  TrainHyperparams hp3 = cfg.train;
  hp3.epochs = cfg.stage3_epochs;
  hp3.freeze_encoder = cfg.stage3_freeze_encoder;
  hp3.seed = derive_seed(fold_seed, "stage3");
  log_info(tag + "stage 3 (" + to_string(cfg.stage3.mode) + ")");
  Stage3Result r3 = train_stage3(split.train_records, stage2, cfg.stage3, hp3);
  save_checkpoint(r3.checkpoint, layout.stage3_ckpt);
  r3.log.write(layout.dir / "stage3_log.csv");
  const Checkpoint stage3 = load_chained(layout.stage3_ckpt, stage2);

  return predict_stage3(stage3, split.test_records);
}

PipelineResult run_pipeline(const PipelineConfig& cfg) {
  validate(cfg);
  PipelineResult result;
  result.dir = resolve_artifact_dir(cfg.artifact_dir);
  fs::create_directories(result.dir);
  {
    std::ofstream os(result.dir / "config.txt");
    if (!os) fail(ErrorCode::Io, "cannot write " + (result.dir / "config.txt").string());
    os << dump_config(cfg);
  }
  const Corpus corpus = load_corpus(cfg);
  result.report = run_crossval(corpus, [&](const FoldSplit& split) {
    return run_fold(cfg, split, fold_layout(result.dir, split.fold_id));
  });
  result.report.write(result.dir / "report.txt");
  log_info(result.report.summary_line());
  return result;
}

AblationGrid parse_ablation_axes(const std::string& axes, int repeats) {
  AblationGrid grid;
  if (repeats < 1) fail(ErrorCode::ConfigInvalid, "ablation repeats must be >= 1");
  grid.repeats = repeats;
  std::stringstream ss(axes);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (item.empty()) continue;
    if (item == "use_gender") {
      grid.vary_use_gender = true;
    } else if (item == "finetune_mode") {
      grid.vary_finetune_mode = true;
    } else if (item.rfind("tap=", 0) == 0) {
      const std::string range = item.substr(4);
      const auto colon = range.find(':', 1);
      if (colon == std::string::npos) {
        grid.taps.push_back(to_int("tap", range));
      } else {
        const int a = to_int("tap", range.substr(0, colon));
        const int b = to_int("tap", range.substr(colon + 1));
        const int step = a <= b ? 1 : -1;
        for (int t = a;; t += step) {
          grid.taps.push_back(t);
          if (t == b) break;
        }
      }
    } else {
      fail(ErrorCode::ConfigInvalid, "unknown ablation axis '" + item + "'");
    }
  }
  if (grid.empty()) fail(ErrorCode::ConfigInvalid, "ablation grid is empty");
  return grid;
}

std::vector<AblationCell> expand_grid(const AblationGrid& grid, const PipelineConfig& base) {
  if (grid.empty()) fail(ErrorCode::ConfigInvalid, "ablation grid is empty");
  const std::vector<bool> genders = grid.vary_use_gender ? std::vector<bool>{false, true} : std::vector<bool>{base.use_gender};
  const std::vector<FinetuneMode> modes = grid.vary_finetune_mode
                                              ? std::vector<FinetuneMode>{FinetuneMode::CEFT, FinetuneMode::HybridFT}
                                              : std::vector<FinetuneMode>{base.stage3.mode};
  const std::vector<int> taps = grid.taps.empty() ? std::vector<int>{base.gmp.tap.layer_id} : grid.taps;
  for (int t : taps) resolve_tap(LayerTap{t}, base.encoder.n_layers);

  std::vector<AblationCell> cells;
  for (bool g : genders)
    for (FinetuneMode m : modes)
      for (int t : taps) {
        AblationCell c;
        c.use_gender = g;
        c.mode = m;
        c.tap = t;
        c.name = std::string(g ? "GMPs" : "MPs") + "_" + (m == FinetuneMode::HybridFT ? "Hybrid-FT" : "CE-FT") +
                 "_tap" + std::to_string(t);
        cells.push_back(std::move(c));
      }
  return cells;
}

std::string AblationTable::to_text() const {
  std::ostringstream os;
  os.setf(std::ios::fixed);
  os.precision(6);
  os << "cell\tuse_gender\tfinetune_mode\ttap\tseeds\tmean_uar\tmean_war\tuar_per_seed\twar_per_seed\n";
  for (const auto& c : cells) {
    os << c.name << '\t' << (c.use_gender ? "true" : "false") << '\t' << to_string(c.mode) << '\t' << c.tap << '\t'
       << c.uar.size() << '\t' << c.mean_uar << '\t' << c.mean_war << '\t';
    for (std::size_t i = 0; i < c.uar.size(); ++i) os << (i ? "," : "") << c.uar[i];
    os << '\t';
    for (std::size_t i = 0; i < c.war.size(); ++i) os << (i ? "," : "") << c.war[i];
    os << '\n';
  }
  return os.str();
}

AblationTable run_ablation(const AblationGrid& grid, const PipelineConfig& base) {
  validate(base);
  AblationTable table;
  const fs::path root = fs::absolute(resolve_artifact_dir(base.artifact_dir));
  fs::create_directories(root);
  for (AblationCell cell : expand_grid(grid, base)) {
    for (int r = 0; r < grid.repeats; ++r) {
      PipelineConfig cfg = base;
      cfg.use_gender = cell.use_gender;
      cfg.stage3.mode = cell.mode;
      cfg.gmp.tap = LayerTap{cell.tap};
      cfg.train.seed = base.train.seed + static_cast<std::uint64_t>(r);
      cfg.artifact_dir = root / cell.name / ("seed" + std::to_string(cfg.train.seed));
      log_info("ablation cell " + cell.name + " seed " + std::to_string(cfg.train.seed));
      const PipelineResult res = run_pipeline(cfg);
      cell.uar.push_back(res.report.mean_uar);
      cell.war.push_back(res.report.mean_war);
    }
    cell.mean_uar = std::accumulate(cell.uar.begin(), cell.uar.end(), 0.0) / static_cast<double>(cell.uar.size());
    cell.mean_war = std::accumulate(cell.war.begin(), cell.war.end(), 0.0) / static_cast<double>(cell.war.size());
    table.cells.push_back(std::move(cell));
    std::ofstream os(root / "ablation.tsv");
    if (!os) fail(ErrorCode::Io, "cannot write " + (root / "ablation.tsv").string());
    os << table.to_text();
  }
  return table;
}

}  // namespace gmptl
