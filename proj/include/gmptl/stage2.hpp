#pragma once

#include <vector>

#include "gmptl/corpus.hpp"
#include "gmptl/encoder.hpp"
#include "gmptl/gmp.hpp"
#include "gmptl/training.hpp"

namespace gmptl {

/// One Linear-ReLU-Linear projection per clustering scale.
class Stage2Head {
 public:
  Stage2Head() = default;
  Stage2Head(int model_dim, int hidden, const std::vector<int>& scale_sizes, Rng& rng);

  int num_scales() const { return static_cast<int>(proj_.size()); }
  nn::Mlp& scale(int s) { return proj_[static_cast<std::size_t>(s)]; }
  const nn::Mlp& scale(int s) const { return proj_[static_cast<std::size_t>(s)]; }
  void collect(nn::ParamList& out);

 private:
  std::vector<nn::Mlp> proj_;
};

struct MaskedFrameLoss {
  double loss = 0.0;
  std::vector<double> per_scale;  // mean CE over masked frames
  std::vector<double> accuracy;   // argmax hit rate over masked frames
  Mat d_hidden;                   // T x model_dim, rows outside the mask are zero
};

/// (1/S) * sum_s mean over masked frames of CE(head_s(hidden_t), gmp[t, s]).
/// Head gradients accumulate only when `accumulate_grads` is set.
/// Raises EmptyMask when the mask selects no frame.
MaskedFrameLoss masked_frame_ce(const Mat& hidden, const GMPLabelSet& gmp, const MaskSpec& mask, Stage2Head& heads,
                                bool accumulate_grads = false);

struct Stage2Config {
  int head_hidden = 64;
  double mask_prob = 0.08;
  int span_length = 10;
};

struct Stage2Result {
  Checkpoint checkpoint;
  CsvLog log;  // step,loss,acc_scale_0..acc_scale_{S-1}
  long skipped_empty_masks = 0;
};

/// Masked frame-level fine-tuning on GMP targets, starting from `stage1`.
Stage2Result train_stage2(const Corpus& corpus, const GMPMap& gmp, const Checkpoint& stage1, const Stage2Config& cfg,
                          const TrainHyperparams& hp);

/// Same, reading `<id>.gmp` files from `gmp_dir`.
Stage2Result train_stage2(const Corpus& corpus, const std::filesystem::path& gmp_dir, const Checkpoint& stage1,
                          const Stage2Config& cfg, const TrainHyperparams& hp);

/// Masked-frame prediction accuracy per scale of a stage-2 checkpoint.
std::vector<double> evaluate_stage2(const Checkpoint& stage2, const Corpus& corpus, const GMPMap& gmp,
                                    const Stage2Config& cfg, std::uint64_t seed);

}  // namespace gmptl
