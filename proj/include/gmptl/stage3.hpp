#pragma once

#include <span>
#include <vector>

#include "gmptl/corpus.hpp"
#include "gmptl/encoder.hpp"
#include "gmptl/pooling.hpp"
#include "gmptl/training.hpp"

namespace gmptl {

struct AMSConfig {
  double m = 0.2;   // additive margin
  double s = 30.0;  // scale
  int n_classes = kNumEmotions;
};

void validate(const AMSConfig& cfg);

/// Class weight vectors w_j, one row per class.
class AMSHead {
 public:
  AMSHead() = default;
  AMSHead(const std::string& name, int n_classes, int embed_dim, Rng& rng);

  nn::Param& class_vectors() { return w_; }
  const nn::Param& class_vectors() const { return w_; }
  /// Re-initialises any row whose norm fell below 1e-8.
  void renormalize(Rng& rng);
  void collect(nn::ParamList& out) { out.push_back(&w_); }

 private:
  nn::Param w_;
};

struct CosineSimilarityBatch {
  Mat cosines;              // N x n_classes
  std::vector<int> labels;  // N, may be empty for inference
};

/// cos(theta_ji) = x_i . w_j / (|x_i| |w_j|). Raises ZeroVector for rows with norm < 1e-8.
CosineSimilarityBatch cosine_logits(const Mat& x, const Mat& class_vectors);

struct AMSLoss {
  double loss = 0.0;
  Mat d_cosines;  // N x n_classes
};

/// Mean over the batch of -log(e^{s(c_y - m)} / (e^{s(c_y - m)} + sum_{j != y} e^{s c_j})).
double ams_loss(const CosineSimilarityBatch& batch, const AMSConfig& cfg);
AMSLoss ams_loss_with_grad(const CosineSimilarityBatch& batch, const AMSConfig& cfg);

/// Chain rule through the cosine normalisation. Writes dL/dx and adds dL/dW into `d_class_vectors`.
Mat cosine_backward(const Mat& x, const Mat& class_vectors, const Mat& cosines, const Mat& d_cosines, Mat& d_class_vectors);

/// argmax_j of unmargined cosines.
std::vector<int> ams_predict(const CosineSimilarityBatch& batch);

enum class FinetuneMode { HybridFT, CEFT };
std::string to_string(FinetuneMode mode);
FinetuneMode parse_finetune_mode(const std::string& s);

struct Stage3Config {
  PoolingHeadConfig head;
  AMSConfig ams;
  FinetuneMode mode = FinetuneMode::HybridFT;
};

/// Encoder + freshly initialised pooling head + AMS (or CE) classifier.
class Stage3Model {
 public:
  struct Cache {
    Encoder::Cache enc;
    PoolingHead::Cache head;
    Mat embedding;
  };

  Stage3Model(const EncoderConfig& enc_cfg, const Stage3Config& cfg, std::uint64_t seed);

  /// 1 x embed_dim utterance embedding.
  Mat embed(const Mat& features, Cache* cache, Rng* dropout_rng = nullptr) const;
  /// Per-class scores used for prediction: cosines (Hybrid-FT) or logits (CE-FT).
  Mat scores(const Mat& embedding) const;
  int predict(const Mat& features) const;

  Encoder& encoder() { return encoder_; }
  PoolingHead& head() { return head_; }
  AMSHead& ams() { return ams_; }
  nn::Linear& ce() { return ce_; }
  const Stage3Config& config() const { return cfg_; }

  nn::ParamList head_params();
  nn::ParamList params();
  Checkpoint to_checkpoint(const std::map<std::string, std::string>& metadata);
  /// Restores a stage-3 checkpoint produced by `to_checkpoint`.
  static Stage3Model from_checkpoint(const Checkpoint& ckpt);

 private:
  Stage3Config cfg_;
  Encoder encoder_;
  PoolingHead head_;
  AMSHead ams_;
  nn::Linear ce_;
};

struct Stage3Result {
  Checkpoint checkpoint;
  CsvLog log;  // step,ams_loss|ce_loss,train_uar,train_war
};

/// Utterance-level fine-tuning on top of the stage-2 encoder.
Stage3Result train_stage3(const Corpus& corpus, const Checkpoint& stage2, const Stage3Config& cfg,
                          const TrainHyperparams& hp);

/// Predicted emotions for `corpus` under a stage-3 checkpoint.
std::vector<EmotionLabel> predict_stage3(const Checkpoint& stage3, const Corpus& corpus);

}  // namespace gmptl
