#include "gmptl/stage1.hpp"

#include <cmath>
#include <sstream>

#include "gmptl/error.hpp"

namespace gmptl {

JointLoss joint_loss(const Mat& emo_logits, const Mat& gender_logits, std::span<const int> emo_labels,
                     std::span<const int> gender_labels, const JointLossConfig& cfg) {
  if (!(cfg.alpha_e >= 0.0 && cfg.alpha_e <= 1.0)) fail(ErrorCode::ConfigInvalid, "alpha_e must be in [0,1]");
  const auto n = emo_logits.rows();
  if (n == 0 || gender_logits.rows() != n || static_cast<Eigen::Index>(emo_labels.size()) != n ||
      static_cast<Eigen::Index>(gender_labels.size()) != n)
    fail(ErrorCode::ShapeMismatch, "joint loss batch shapes disagree");
  if (!emo_logits.allFinite() || !gender_logits.allFinite()) fail(ErrorCode::NonFiniteLogits, "joint loss input");

  JointLoss out;
  out.d_emo.resize(n, emo_logits.cols());
  out.d_gender.resize(n, gender_logits.cols());
  const double inv_n = 1.0 / static_cast<double>(n);
  Eigen::RowVectorXd g;
  for (Eigen::Index i = 0; i < n; ++i) {
    out.emo += nn::softmax_ce(emo_logits.row(i), emo_labels[static_cast<std::size_t>(i)], &g) * inv_n;
    out.d_emo.row(i) = g * (cfg.alpha_e * inv_n);
    out.gender += nn::softmax_ce(gender_logits.row(i), gender_labels[static_cast<std::size_t>(i)], &g) * inv_n;
    out.d_gender.row(i) = g * ((1.0 - cfg.alpha_e) * inv_n);
  }
  out.total = cfg.alpha_e * out.emo + (1.0 - cfg.alpha_e) * out.gender;
  return out;
}

Stage1Model::Stage1Model(const EncoderConfig& enc_cfg, const Stage1Config& cfg, std::uint64_t seed)
    : cfg_(cfg), encoder_(enc_cfg) {
  Rng rng(derive_seed(seed, "stage1-head"));
  head_ = PoolingHead("stage1.pool", enc_cfg.model_dim, cfg.head, rng);
  emo_ = nn::Linear("stage1.emotion", cfg.head.embed_dim, kNumEmotions, rng);
  gender_ = nn::Linear("stage1.gender", cfg.head.embed_dim, kNumGenders, rng);
}

Stage1Model::Output Stage1Model::forward(const Mat& features, Cache* cache) const {
  Mat hidden;
  if (cache) {
    hidden = encoder_.forward_train(features, nullptr, cache->enc, nullptr);
  } else {
    hidden = encoder_.forward_with_tap(features, LayerTap{-1});
  }
  Mat emb = head_.forward(hidden, cache ? &cache->head : nullptr);
  Output out{emo_.forward(emb), gender_.forward(emb)};
  if (cache) {
    cache->hidden = std::move(hidden);
    cache->embedding = std::move(emb);
  }
  return out;
}

void Stage1Model::backward(const Cache& cache, const Mat& d_emo, const Mat& d_gender, bool through_encoder) {
  Mat demb = emo_.backward(cache.embedding, d_emo);
  demb += gender_.backward(cache.embedding, d_gender);
  const Mat dhidden = head_.backward(cache.head, demb);
  if (through_encoder) encoder_.backward(cache.enc, dhidden);
}

nn::ParamList Stage1Model::head_params() {
  nn::ParamList out;
  head_.collect(out);
  emo_.collect(out);
  gender_.collect(out);
  return out;
}

nn::ParamList Stage1Model::params() {
  nn::ParamList out = encoder_.params();
  for (auto* p : head_params()) out.push_back(p);
  return out;
}

Checkpoint Stage1Model::to_checkpoint(const std::map<std::string, std::string>& metadata) {
  Checkpoint ckpt;
  ckpt.weights = nn::export_params(params());
  ckpt.config = encoder_.config();
  ckpt.stage_tag = StageTag::Stage1;
  ckpt.metadata = metadata;
  ckpt.metadata["stage1.bilstm_hidden"] = std::to_string(cfg_.head.bilstm_hidden);
  ckpt.metadata["stage1.proj_hidden"] = std::to_string(cfg_.head.proj_hidden);
  ckpt.metadata["stage1.embed_dim"] = std::to_string(cfg_.head.embed_dim);
  ckpt.metadata["stage1.alpha_e"] = format_double(cfg_.loss.alpha_e);
  return ckpt;
}

void Stage1Model::load(const Checkpoint& ckpt) {
  encoder_.import_params(ckpt.weights, ckpt.config);
  if (ckpt.stage_tag == StageTag::Stage1) nn::import_params(head_params(), ckpt.weights, "stage1.");
}

Stage1Config stage1_config_from(const Checkpoint& ckpt) {
  Stage1Config cfg;
  auto get = [&](const std::string& key) -> std::string {
    auto it = ckpt.metadata.find(key);
    if (it == ckpt.metadata.end()) fail(ErrorCode::CorruptCheckpoint, "stage-1 metadata lacks " + key);
    return it->second;
  };
  cfg.head.bilstm_hidden = std::stoi(get("stage1.bilstm_hidden"));
  cfg.head.proj_hidden = std::stoi(get("stage1.proj_hidden"));
  cfg.head.embed_dim = std::stoi(get("stage1.embed_dim"));
  cfg.loss.alpha_e = std::stod(get("stage1.alpha_e"));
  return cfg;
}

Mat pooled_embedding(const PoolingHead& head, const Mat& hidden) {
  Mat emb = head.forward(hidden);
  if (!emb.allFinite()) fail(ErrorCode::NonFiniteLogits, "pooled embedding is not finite");
  return emb;
}

namespace {

int argmax(const Mat& row) {
  Eigen::Index idx = 0;
  row.row(0).maxCoeff(&idx);
  return static_cast<int>(idx);
}

}  // namespace

Stage1Result train_stage1(const Corpus& corpus, const EncoderConfig& enc_cfg, const Stage1Config& cfg,
                          const TrainHyperparams& hp, const std::optional<Checkpoint>& init) {
  if (corpus.empty()) fail(ErrorCode::EmptyInput, "stage 1: empty corpus");
  std::vector<Mat> feats;
  std::vector<int> emo_labels, gender_labels;
  feats.reserve(corpus.size());
  for (const auto& rec : corpus) {
    // The gender term is weightless at alpha_e = 1, so unlabeled utterances are fine there.
    if (!rec.gender && cfg.loss.alpha_e < 1.0)
      fail(ErrorCode::MissingGenderLabel, "utterance " + rec.id + " has no gender label");
    feats.push_back(load_features(rec).frames);
    emo_labels.push_back(index_of(rec.emotion));
    gender_labels.push_back(rec.gender ? index_of(*rec.gender) : 0);
  }

  Stage1Model model(enc_cfg, cfg, hp.seed);
  if (init) {
    require_compatible(*init, enc_cfg);
    model.load(*init);
  }
  const bool update_encoder = !hp.freeze_encoder;
  nn::ParamList trainable = update_encoder ? model.params() : model.head_params();
  nn::Adam adam({.lr = hp.lr, .clip_norm = hp.clip_norm});
  const int batch = effective_batch_size(hp.batch_size, corpus.size(), "stage1");
  Rng order_rng(derive_seed(hp.seed, "stage1-order"));
  Rng dropout_rng(derive_seed(hp.seed, "stage1-dropout"));

  Stage1Result result;
  result.log.columns = {"step", "L_Total", "L_Emo", "L_Gender", "emo_acc", "gender_acc"};
  long step = 0;
  for (int epoch = 0; epoch < hp.epochs; ++epoch) {
    for (const auto& idx : make_batches(corpus.size(), batch, order_rng)) {
      nn::zero_grad(model.params());
      const auto n = static_cast<Eigen::Index>(idx.size());
      Mat emo_logits(n, kNumEmotions), gender_logits(n, kNumGenders);
      std::vector<Stage1Model::Cache> caches(idx.size());
      std::vector<int> be, bg;
      for (Eigen::Index i = 0; i < n; ++i) {
        const std::size_t k = idx[static_cast<std::size_t>(i)];
        auto& cache = caches[static_cast<std::size_t>(i)];
        const Mat h = model.encoder().forward_train(feats[k], nullptr, cache.enc, &dropout_rng);
        cache.hidden = h;
        cache.embedding = model.head().forward(h, &cache.head);
        emo_logits.row(i) = model.emotion_head().forward(cache.embedding).row(0);
        gender_logits.row(i) = model.gender_head().forward(cache.embedding).row(0);
        be.push_back(emo_labels[k]);
        bg.push_back(gender_labels[k]);
      }
      const JointLoss loss = joint_loss(emo_logits, gender_logits, be, bg, cfg.loss);
      check_finite_loss(loss.total, "stage1", step);
      for (Eigen::Index i = 0; i < n; ++i)
        model.backward(caches[static_cast<std::size_t>(i)], loss.d_emo.row(i), loss.d_gender.row(i), update_encoder);
      adam.step(trainable);

      double emo_hits = 0, gender_hits = 0;
      for (Eigen::Index i = 0; i < n; ++i) {
        emo_hits += argmax(emo_logits.row(i)) == be[static_cast<std::size_t>(i)];
        gender_hits += argmax(gender_logits.row(i)) == bg[static_cast<std::size_t>(i)];
      }
      result.log.add({static_cast<double>(step), loss.total, loss.emo, loss.gender, emo_hits / n, gender_hits / n});
      ++step;
    }
  }

  result.checkpoint = model.to_checkpoint({{"seed", std::to_string(hp.seed)},
                                           {"step", std::to_string(step)},
                                           {"corpus_hash", corpus_hash(corpus)}});
  if (init) result.checkpoint.metadata["upstream_hash"] = checkpoint_hash(*init);
  return result;
}

Stage1Accuracy evaluate_stage1(const Checkpoint& ckpt, const Stage1Config& cfg, const Corpus& corpus) {
  if (corpus.empty()) fail(ErrorCode::EmptyInput, "evaluate_stage1: empty corpus");
  Stage1Model model(ckpt.config, cfg, 0);
  model.load(ckpt);
  Stage1Accuracy acc;
  for (const auto& rec : corpus) {
    const auto out = model.forward(load_features(rec).frames, nullptr);
    acc.emotion += argmax(out.emo_logits) == index_of(rec.emotion);
    if (rec.gender) acc.gender += argmax(out.gender_logits) == index_of(*rec.gender);
  }
  acc.emotion /= static_cast<double>(corpus.size());
  acc.gender /= static_cast<double>(corpus.size());
  return acc;
}

}  // namespace gmptl
