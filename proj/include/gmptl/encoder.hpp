#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "gmptl/common.hpp"
#include "gmptl/nn.hpp"

namespace gmptl {

struct EncoderConfig {
  int n_layers = 4;
  int model_dim = 64;
  int n_heads = 4;
  int ff_dim = 128;
  int input_dim = 40;
  double dropout = 0.0;
  std::uint64_t seed = 0;
};

void validate(const EncoderConfig& cfg);
/// Hash over the architecture fields (seed and dropout excluded).
std::string config_hash(const EncoderConfig& cfg);
bool same_architecture(const EncoderConfig& a, const EncoderConfig& b);

struct MaskSpec {
  std::vector<int> masked_indices;  // sorted, unique
  int span_length = 10;
  double mask_prob = 0.08;

  bool empty() const { return masked_indices.empty(); }
};

/// Every frame is independently a span start with probability `mask_prob`;
/// each start masks min(span_length, T - start) frames.
MaskSpec sample_mask_spans(int num_frames, double mask_prob, int span_length, std::uint64_t seed);

/// Encoder layer selector; negative ids count from the end (-1 = last layer).
struct LayerTap {
  int layer_id = -1;
};

/// 1-based layer index addressed by `tap`; raises TapOutOfRange.
int resolve_tap(LayerTap tap, int n_layers);

/// Fixed sinusoidal positions, T x dim.
Mat sinusoidal_positions(int num_frames, int dim);

class TransformerLayer {
 public:
  struct Cache {
    Mat input;
    nn::LayerNorm::Cache ln1;
    Mat normed1;
    Mat q, k, v;
    std::vector<Mat> probs;  // one T x T per head
    Mat context;
    Mat attn_out;
    Mat attn_drop;  // dropout keep-scale, empty if inactive
    Mat mid;
    nn::LayerNorm::Cache ln2;
    Mat normed2;
    nn::Mlp::Cache ff;
    Mat ff_drop;
  };

  TransformerLayer() = default;
  TransformerLayer(const std::string& name, const EncoderConfig& cfg, Rng& rng);

  /// Pre-norm block: h = x + Attn(LN(x)); y = h + FF(LN(h)).
  /// Dropout on both residual branches is active only when `dropout_rng` is set.
  Mat forward(const Mat& x, Cache* cache, Rng* dropout_rng) const;
  Mat backward(const Cache& cache, const Mat& dy);
  void collect(nn::ParamList& out);

 private:
  int heads_ = 1;
  double dropout_ = 0.0;
  nn::LayerNorm ln1_, ln2_;
  nn::Linear wq_, wk_, wv_, wo_;
  nn::Mlp ff_;
};

/// Transformer backbone over frame features with span masking and layer taps.
class Encoder {
 public:
  struct Cache {
    Mat input;
    std::vector<int> masked;
    std::vector<TransformerLayer::Cache> layers;
  };

  explicit Encoder(const EncoderConfig& cfg);

  const EncoderConfig& config() const { return cfg_; }

  /// Hidden states (T x model_dim) after the tapped layer. Masked input
  /// positions are replaced by the learned mask embedding before layer 1.
  Mat forward_with_tap(const Mat& features, LayerTap tap, const MaskSpec* mask = nullptr) const;

  /// Outputs of layers 1..up_to (1-based), inference mode.
  std::vector<Mat> forward_layers(const Mat& features, int up_to, const MaskSpec* mask = nullptr) const;

  /// Full-depth forward for training; fills `cache` for backward.
  Mat forward_train(const Mat& features, const MaskSpec* mask, Cache& cache, Rng* dropout_rng) const;
  /// Accumulates gradients from dL/d(final output).
  void backward(const Cache& cache, const Mat& dout);

  nn::ParamList params();
  nn::ParamBundle export_params();
  /// Loads `encoder.*` parameters; architecture must match.
  void import_params(const nn::ParamBundle& bundle, const EncoderConfig& source_cfg);

 private:
  Mat embed(const Mat& features, const MaskSpec* mask, std::vector<int>* masked) const;

  EncoderConfig cfg_;
  nn::Linear input_proj_;
  nn::Param mask_embedding_;
  std::vector<TransformerLayer> layers_;
};

enum class StageTag { Stage1, Stage2, Stage3 };
std::string to_string(StageTag tag);
StageTag parse_stage_tag(const std::string& s);

struct Checkpoint {
  nn::ParamBundle weights;
  EncoderConfig config;
  StageTag stage_tag = StageTag::Stage1;
  std::map<std::string, std::string> metadata;
};

/// Content hash over weights, config and stage tag.
std::string checkpoint_hash(const Checkpoint& ckpt);

/// Binary blob at `path` plus `<path>.meta` with key=value lines.
void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

/// Guard used by trainers: raises IncompatibleConfig unless `ckpt` was
/// produced with the same encoder architecture as `expected`.
void require_compatible(const Checkpoint& ckpt, const EncoderConfig& expected);

}  // namespace gmptl
