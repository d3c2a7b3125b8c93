#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "gmptl/corpus.hpp"
#include "gmptl/encoder.hpp"
#include "gmptl/eval.hpp"
#include "gmptl/gmp.hpp"
#include "gmptl/stage1.hpp"
#include "gmptl/stage2.hpp"
#include "gmptl/stage3.hpp"

namespace gmptl {

/// Environment variable that overrides the artifact root directory.
inline constexpr const char* kArtifactRootEnv = "GMPTL_ARTIFACT_ROOT";

struct PipelineConfig {
  // corpus
  std::optional<std::filesystem::path> manifest;  // synthetic corpus when unset
  bool drop_unknown_labels = true;
  bool permute_labels = false;  // control: shuffle emotion labels across utterances
  SyntheticCorpusSpec synth;

  EncoderConfig encoder;  // input_dim is taken from the corpus
  Stage1Config stage1;
  GMPConfig gmp;
  Stage2Config stage2;
  Stage3Config stage3;

  TrainHyperparams train;  // lr, batch_size, seed, clip_norm shared by all stages
  int stage1_epochs = 30;
  int stage2_epochs = 20;
  int stage3_epochs = 20;
  bool stage1_freeze_encoder = false;
  bool stage3_freeze_encoder = false;

  bool use_gender = true;  // false: MPs ablation, stage 1 trained with alpha_e = 1

  std::filesystem::path artifact_dir = "artifacts/run";
};

/// Parses `key=value` lines (dotted sections, `#` comments) over the defaults.
PipelineConfig parse_config(const std::string& text, PipelineConfig base = {});
PipelineConfig load_config(const std::filesystem::path& path, PipelineConfig base = {});
/// Applies a single `key=value` override.
void apply_config_value(PipelineConfig& cfg, const std::string& key, const std::string& value);
/// Every key with its current value, one per line, in a stable order.
std::string dump_config(const PipelineConfig& cfg);
void validate(const PipelineConfig& cfg);

/// Artifact root after the environment override.
std::filesystem::path resolve_artifact_dir(const std::filesystem::path& configured);

/// Corpus named by the config (manifest or synthetic), features in memory.
Corpus load_corpus(const PipelineConfig& cfg);

/// Returns a copy with emotion labels permuted across utterances.
Corpus permute_emotions(const Corpus& corpus, std::uint64_t seed);

struct FoldArtifacts {
  std::filesystem::path dir;
  std::filesystem::path stage1_ckpt, stage2_ckpt, stage3_ckpt, codebooks, gmp_dir;
};

FoldArtifacts fold_layout(const std::filesystem::path& run_dir, int fold_id);

/// Trains all stages on `split.train_records` and predicts its test records.
/// Each stage's input checkpoint is reloaded from disk and checked against
/// the upstream hash recorded by the previous stage.
std::vector<EmotionLabel> run_fold(const PipelineConfig& cfg, const FoldSplit& split, const FoldArtifacts& layout);

/// Loads a checkpoint and verifies that its `upstream_hash` names `upstream`.
Checkpoint load_chained(const std::filesystem::path& path, const Checkpoint& upstream);

/// Re-reads a fold directory and checks the stage1 -> codebooks -> stage2 -> stage3 hash chain.
void verify_fold_chain(const FoldArtifacts& layout);

struct PipelineResult {
  EvalReport report;
  std::filesystem::path dir;
};

/// stage1 -> extract_gmp -> stage2 -> stage3 (or CE-FT) per fold, then cross-validated metrics.
PipelineResult run_pipeline(const PipelineConfig& cfg);

struct AblationGrid {
  bool vary_use_gender = false;
  bool vary_finetune_mode = false;
  std::vector<int> taps;  // empty: keep the base tap
  int repeats = 1;

  bool empty() const { return !vary_use_gender && !vary_finetune_mode && taps.empty(); }
};

/// Grid spec such as "use_gender,finetune_mode" or "tap=-1:-6"; `repeats` seeds per cell.
AblationGrid parse_ablation_axes(const std::string& axes, int repeats);

struct AblationCell {
  std::string name;
  bool use_gender = true;
  FinetuneMode mode = FinetuneMode::HybridFT;
  int tap = -3;
  std::vector<double> uar, war;  // one per seed
  double mean_uar = 0.0, mean_war = 0.0;
};

struct AblationTable {
  std::vector<AblationCell> cells;
  std::string to_text() const;
};

std::vector<AblationCell> expand_grid(const AblationGrid& grid, const PipelineConfig& base);

/// One run_pipeline per cell per seed under `base.artifact_dir/<cell>/seed<k>`.
/// The table file is rewritten after every completed cell.
AblationTable run_ablation(const AblationGrid& grid, const PipelineConfig& base);

}  // namespace gmptl
