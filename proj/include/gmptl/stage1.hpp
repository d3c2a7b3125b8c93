#pragma once

#include <optional>
#include <span>

#include "gmptl/corpus.hpp"
#include "gmptl/encoder.hpp"
#include "gmptl/pooling.hpp"
#include "gmptl/training.hpp"

namespace gmptl {

struct JointLossConfig {
  double alpha_e = 0.9;
};

struct JointLoss {
  double total = 0.0;
  double emo = 0.0;
  double gender = 0.0;
  Mat d_emo;     // dL_total / d emo_logits, N x 4
  Mat d_gender;  // dL_total / d gender_logits, N x 2
};

/// L_total = alpha_e * CE(emo) + (1 - alpha_e) * CE(gender), each averaged over the batch.
JointLoss joint_loss(const Mat& emo_logits, const Mat& gender_logits, std::span<const int> emo_labels,
                     std::span<const int> gender_labels, const JointLossConfig& cfg);

struct Stage1Config {
  PoolingHeadConfig head;
  JointLossConfig loss;
};

/// Encoder, pooled embedding trunk, and the emotion / gender heads.
class Stage1Model {
 public:
  struct Cache {
    Encoder::Cache enc;
    Mat hidden;
    PoolingHead::Cache head;
    Mat embedding;
  };
  struct Output {
    Mat emo_logits;     // 1 x 4
    Mat gender_logits;  // 1 x 2
  };

  Stage1Model(const EncoderConfig& enc_cfg, const Stage1Config& cfg, std::uint64_t seed);

  Output forward(const Mat& features, Cache* cache) const;
  /// Backpropagates logit gradients; the encoder is skipped when `through_encoder` is false.
  void backward(const Cache& cache, const Mat& d_emo, const Mat& d_gender, bool through_encoder);

  Encoder& encoder() { return encoder_; }
  const Encoder& encoder() const { return encoder_; }
  PoolingHead& head() { return head_; }
  nn::Linear& emotion_head() { return emo_; }
  nn::Linear& gender_head() { return gender_; }

  nn::ParamList head_params();
  nn::ParamList params();
  Checkpoint to_checkpoint(const std::map<std::string, std::string>& metadata);
  void load(const Checkpoint& ckpt);
  const Stage1Config& config() const { return cfg_; }

 private:
  Stage1Config cfg_;
  Encoder encoder_;
  PoolingHead head_;
  nn::Linear emo_;
  nn::Linear gender_;
};

/// Pooled embedding of one utterance's encoder output (BiLSTM, time mean, projection).
Mat pooled_embedding(const PoolingHead& head, const Mat& hidden);

struct Stage1Result {
  Checkpoint checkpoint;
  CsvLog log;  // step,L_Total,L_Emo,L_Gender,emo_acc,gender_acc
};

/// Multi-task pre-fine-tuning. `init` (stage-1 checkpoint or encoder-only
/// bundle) seeds the encoder when given.
Stage1Result train_stage1(const Corpus& corpus, const EncoderConfig& enc_cfg, const Stage1Config& cfg,
                          const TrainHyperparams& hp, const std::optional<Checkpoint>& init = std::nullopt);

/// Emotion / gender accuracy of a stage-1 checkpoint on `corpus`.
struct Stage1Accuracy {
  double emotion = 0.0;
  double gender = 0.0;
};
Stage1Accuracy evaluate_stage1(const Checkpoint& ckpt, const Stage1Config& cfg, const Corpus& corpus);

Stage1Config stage1_config_from(const Checkpoint& ckpt);

}  // namespace gmptl
