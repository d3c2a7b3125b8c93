#include "gmptl/stage3.hpp"

#include <cmath>
#include <sstream>

#include "gmptl/error.hpp"
#include "gmptl/eval.hpp"

namespace gmptl {

void validate(const AMSConfig& cfg) {
  if (!(cfg.m >= 0.0 && cfg.m < 1.0)) fail(ErrorCode::ConfigInvalid, "AMS margin must be in [0,1)");
  if (!(cfg.s > 0.0) || !std::isfinite(cfg.s)) fail(ErrorCode::ConfigInvalid, "AMS scale must be positive and finite");
  if (cfg.n_classes < 2) fail(ErrorCode::ConfigInvalid, "AMS needs at least 2 classes");
}

AMSHead::AMSHead(const std::string& name, int n_classes, int embed_dim, Rng& rng)
    : w_(name + ".class_vectors", nn::glorot(n_classes, embed_dim, rng)) {}

void AMSHead::renormalize(Rng& rng) {
  for (Eigen::Index j = 0; j < w_.value.rows(); ++j) {
    if (w_.value.row(j).norm() >= 1e-8) continue;
    w_.value.row(j) = nn::glorot(1, static_cast<int>(w_.value.cols()), rng).row(0);
    log_warn("AMS class vector " + std::to_string(j) + " collapsed; re-initialised");
  }
}

CosineSimilarityBatch cosine_logits(const Mat& x, const Mat& class_vectors) {
  if (x.cols() != class_vectors.cols()) fail(ErrorCode::ShapeMismatch, "embedding and class-vector widths differ");
  const Eigen::VectorXd xn = x.rowwise().norm();
  const Eigen::VectorXd wn = class_vectors.rowwise().norm();
  for (Eigen::Index i = 0; i < xn.size(); ++i)
    if (!(xn(i) >= 1e-8)) fail(ErrorCode::ZeroVector, "embedding row " + std::to_string(i) + " has norm < 1e-8");
  for (Eigen::Index j = 0; j < wn.size(); ++j)
    if (!(wn(j) >= 1e-8)) fail(ErrorCode::ZeroVector, "class vector " + std::to_string(j) + " has norm < 1e-8");
  CosineSimilarityBatch out;
  const Mat xh = x.array().colwise() / xn.array();
  const Mat wh = class_vectors.array().colwise() / wn.array();
  out.cosines = (xh * wh.transpose()).cwiseMax(-1.0).cwiseMin(1.0);
  return out;
}

AMSLoss ams_loss_with_grad(const CosineSimilarityBatch& batch, const AMSConfig& cfg) {
  validate(cfg);
  const auto n = batch.cosines.rows();
  if (n == 0) fail(ErrorCode::EmptyInput, "AMS loss over an empty batch");
  if (batch.cosines.cols() != cfg.n_classes) fail(ErrorCode::ShapeMismatch, "cosine width differs from n_classes");
  if (static_cast<Eigen::Index>(batch.labels.size()) != n) fail(ErrorCode::ShapeMismatch, "AMS labels missing");
  if (!batch.cosines.allFinite()) fail(ErrorCode::NonFiniteCosine, "cosines contain NaN or inf");

  AMSLoss out;
  out.d_cosines.resize(n, batch.cosines.cols());
  for (Eigen::Index i = 0; i < n; ++i) {
    const int y = batch.labels[static_cast<std::size_t>(i)];
    if (y < 0 || y >= cfg.n_classes) fail(ErrorCode::RangeViolation, "AMS label " + std::to_string(y));
    Eigen::RowVectorXd z = cfg.s * batch.cosines.row(i);
    z(y) -= cfg.s * cfg.m;
    // Work with d_j = z_j - z_y so a confident target gives log1p of a tiny sum
    // instead of a difference of two nearly equal log-sum-exp terms.
    const Eigen::RowVectorXd d = z.array() - z(y);
    double top = 0.0;
    for (Eigen::Index j = 0; j < d.size(); ++j)
      if (j != y) top = std::max(top, d(j));
    Eigen::RowVectorXd e = (d.array() - top).exp();
    double others = 0.0;
    for (Eigen::Index j = 0; j < d.size(); ++j)
      if (j != y) others += e(j);
    const double loss = top > 0.0 ? top + std::log(e(y) + others) : std::log1p(others);
    out.loss += loss / static_cast<double>(n);
    const double sum = e(y) + others;
    Eigen::RowVectorXd dz = e / sum;
    dz(y) -= 1.0;
    out.d_cosines.row(i) = dz * (cfg.s / static_cast<double>(n));
  }
  return out;
}

double ams_loss(const CosineSimilarityBatch& batch, const AMSConfig& cfg) { return ams_loss_with_grad(batch, cfg).loss; }

Mat cosine_backward(const Mat& x, const Mat& class_vectors, const Mat& cosines, const Mat& d_cosines, Mat& d_class_vectors) {
  const Eigen::VectorXd xn = x.rowwise().norm();
  const Eigen::VectorXd wn = class_vectors.rowwise().norm();
  const Mat xh = x.array().colwise() / xn.array();
  const Mat wh = class_vectors.array().colwise() / wn.array();
  const Mat dc_c = d_cosines.array() * cosines.array();
  Mat dx = d_cosines * wh;
  dx -= (xh.array().colwise() * dc_c.rowwise().sum().array()).matrix();
  dx = dx.array().colwise() / xn.array();
  Mat dw = d_cosines.transpose() * xh;
  dw -= (wh.array().colwise() * dc_c.colwise().sum().transpose().array()).matrix();
  d_class_vectors += Mat(dw.array().colwise() / wn.array());
  return dx;
}

std::vector<int> ams_predict(const CosineSimilarityBatch& batch) {
  std::vector<int> out;
  for (Eigen::Index i = 0; i < batch.cosines.rows(); ++i) {
    Eigen::Index best = 0;
    batch.cosines.row(i).maxCoeff(&best);
    out.push_back(static_cast<int>(best));
  }
  return out;
}

std::string to_string(FinetuneMode mode) { return mode == FinetuneMode::HybridFT ? "hybrid_ft" : "ce_ft"; }

FinetuneMode parse_finetune_mode(const std::string& s) {
  if (s == "hybrid_ft" || s == "hybrid") return FinetuneMode::HybridFT;
  if (s == "ce_ft" || s == "ce") return FinetuneMode::CEFT;
  fail(ErrorCode::ConfigInvalid, "finetune_mode must be hybrid_ft or ce_ft, got '" + s + "'");
}

Stage3Model::Stage3Model(const EncoderConfig& enc_cfg, const Stage3Config& cfg, std::uint64_t seed)
    : cfg_(cfg), encoder_(enc_cfg) {
  Rng rng(derive_seed(seed, "stage3-head"));
  head_ = PoolingHead("stage3.pool", enc_cfg.model_dim, cfg.head, rng);
  if (cfg.mode == FinetuneMode::HybridFT) {
    validate(cfg.ams);
    ams_ = AMSHead("stage3.ams", cfg.ams.n_classes, cfg.head.embed_dim, rng);
  } else {
    ce_ = nn::Linear("stage3.ce", cfg.head.embed_dim, kNumEmotions, rng);
  }
}

Mat Stage3Model::embed(const Mat& features, Cache* cache, Rng* dropout_rng) const {
  Mat hidden = cache ? encoder_.forward_train(features, nullptr, cache->enc, dropout_rng)
                     : encoder_.forward_with_tap(features, LayerTap{-1});
  Mat emb = head_.forward(hidden, cache ? &cache->head : nullptr);
  if (cache) cache->embedding = emb;
  return emb;
}

Mat Stage3Model::scores(const Mat& embedding) const {
  if (cfg_.mode == FinetuneMode::HybridFT) return cosine_logits(embedding, ams_.class_vectors().value).cosines;
  return ce_.forward(embedding);
}

int Stage3Model::predict(const Mat& features) const {
  Eigen::Index best = 0;
  scores(embed(features, nullptr)).row(0).maxCoeff(&best);
  return static_cast<int>(best);
}

nn::ParamList Stage3Model::head_params() {
  nn::ParamList out;
  head_.collect(out);
  if (cfg_.mode == FinetuneMode::HybridFT) ams_.collect(out);
  else ce_.collect(out);
  return out;
}

nn::ParamList Stage3Model::params() {
  nn::ParamList out = encoder_.params();
  for (auto* p : head_params()) out.push_back(p);
  return out;
}

Checkpoint Stage3Model::to_checkpoint(const std::map<std::string, std::string>& metadata) {
  Checkpoint ckpt;
  ckpt.weights = nn::export_params(params());
  ckpt.config = encoder_.config();
  ckpt.stage_tag = StageTag::Stage3;
  ckpt.metadata = metadata;
  ckpt.metadata["stage3.mode"] = to_string(cfg_.mode);
  ckpt.metadata["stage3.bilstm_hidden"] = std::to_string(cfg_.head.bilstm_hidden);
  ckpt.metadata["stage3.proj_hidden"] = std::to_string(cfg_.head.proj_hidden);
  ckpt.metadata["stage3.embed_dim"] = std::to_string(cfg_.head.embed_dim);
  if (cfg_.mode == FinetuneMode::HybridFT) {
    ckpt.metadata["ams.m"] = format_double(cfg_.ams.m);
    ckpt.metadata["ams.s"] = format_double(cfg_.ams.s);
  }
  return ckpt;
}

Stage3Model Stage3Model::from_checkpoint(const Checkpoint& ckpt) {
  if (ckpt.stage_tag != StageTag::Stage3)
    fail(ErrorCode::IncompatibleConfig, "expected a stage3 checkpoint, got " + to_string(ckpt.stage_tag));
  auto get = [&](const std::string& key) -> std::string {
    auto it = ckpt.metadata.find(key);
    if (it == ckpt.metadata.end()) fail(ErrorCode::CorruptCheckpoint, "stage-3 metadata lacks " + key);
    return it->second;
  };
  Stage3Config cfg;
  cfg.mode = parse_finetune_mode(get("stage3.mode"));
  cfg.head.bilstm_hidden = std::stoi(get("stage3.bilstm_hidden"));
  cfg.head.proj_hidden = std::stoi(get("stage3.proj_hidden"));
  cfg.head.embed_dim = std::stoi(get("stage3.embed_dim"));
  if (cfg.mode == FinetuneMode::HybridFT) {
    cfg.ams.m = std::stod(get("ams.m"));
    cfg.ams.s = std::stod(get("ams.s"));
  }
  Stage3Model model(ckpt.config, cfg, 0);
  model.encoder_.import_params(ckpt.weights, ckpt.config);
  nn::import_params(model.head_params(), ckpt.weights, "stage3.");
  return model;
}

Stage3Result train_stage3(const Corpus& corpus, const Checkpoint& stage2, const Stage3Config& cfg,
                          const TrainHyperparams& hp) {
  if (corpus.empty()) fail(ErrorCode::EmptyInput, "stage 3: empty corpus");
  if (stage2.stage_tag == StageTag::Stage1) log_warn("stage 3 initialised from a stage1 checkpoint (ablation path)");
  else if (stage2.stage_tag != StageTag::Stage2)
    fail(ErrorCode::IncompatibleConfig, "stage 3 needs a stage2 checkpoint, got " + to_string(stage2.stage_tag));

  std::vector<Mat> feats;
  std::vector<int> labels;
  for (const auto& rec : corpus) {
    feats.push_back(load_features(rec).frames);
    labels.push_back(index_of(rec.emotion));
  }

  Stage3Model model(stage2.config, cfg, hp.seed);
  model.encoder().import_params(stage2.weights, stage2.config);
  const bool update_encoder = !hp.freeze_encoder;
  nn::ParamList all = model.params();
  nn::ParamList trainable = update_encoder ? all : model.head_params();
  nn::Adam adam({.lr = hp.lr, .clip_norm = hp.clip_norm});
  const int batch = effective_batch_size(hp.batch_size, corpus.size(), "stage3");
  Rng order_rng(derive_seed(hp.seed, "stage3-order"));
  Rng dropout_rng(derive_seed(hp.seed, "stage3-dropout"));
  Rng reinit_rng(derive_seed(hp.seed, "stage3-reinit"));
  const bool hybrid = cfg.mode == FinetuneMode::HybridFT;

  Stage3Result result;
  result.log.columns = {"step", hybrid ? "ams_loss" : "ce_loss", "train_uar", "train_war"};
  long step = 0;
  for (int epoch = 0; epoch < hp.epochs; ++epoch) {
    for (const auto& idx : make_batches(corpus.size(), batch, order_rng)) {
      nn::zero_grad(all);
      const auto n = static_cast<Eigen::Index>(idx.size());
      std::vector<Stage3Model::Cache> caches(idx.size());
      Mat x(n, cfg.head.embed_dim);
      std::vector<int> y;
      for (Eigen::Index i = 0; i < n; ++i) {
        const std::size_t k = idx[static_cast<std::size_t>(i)];
        x.row(i) = model.embed(feats[k], &caches[static_cast<std::size_t>(i)], &dropout_rng).row(0);
        y.push_back(labels[k]);
      }

      double loss = 0.0;
      Mat dx;
      std::vector<int> pred;
      if (hybrid) {
        CosineSimilarityBatch cb = cosine_logits(x, model.ams().class_vectors().value);
        cb.labels = y;
        const AMSLoss l = ams_loss_with_grad(cb, cfg.ams);
        loss = l.loss;
        dx = cosine_backward(x, model.ams().class_vectors().value, cb.cosines, l.d_cosines, model.ams().class_vectors().grad);
        pred = ams_predict(cb);
      } else {
        const Mat logits = model.ce().forward(x);
        Mat dlogits(n, logits.cols());
        Eigen::RowVectorXd g;
        for (Eigen::Index i = 0; i < n; ++i) {
          loss += nn::softmax_ce(logits.row(i), y[static_cast<std::size_t>(i)], &g) / static_cast<double>(n);
          dlogits.row(i) = g / static_cast<double>(n);
          Eigen::Index best = 0;
          logits.row(i).maxCoeff(&best);
          pred.push_back(static_cast<int>(best));
        }
        dx = model.ce().backward(x, dlogits);
      }
      check_finite_loss(loss, "stage3", step);
      for (Eigen::Index i = 0; i < n; ++i) {
        const auto& cache = caches[static_cast<std::size_t>(i)];
        const Mat dhidden = model.head().backward(cache.head, dx.row(i));
        if (update_encoder) model.encoder().backward(cache.enc, dhidden);
      }
      adam.step(trainable);
      if (hybrid) model.ams().renormalize(reinit_rng);

      const Metrics mt = compute_metrics(confusion_from(y, pred), false);
      result.log.add({static_cast<double>(step), loss, mt.uar, mt.war});
      ++step;
    }
  }
  result.checkpoint = model.to_checkpoint({{"seed", std::to_string(hp.seed)},
                                           {"step", std::to_string(step)},
                                           {"upstream_hash", checkpoint_hash(stage2)},
                                           {"upstream_stage", to_string(stage2.stage_tag)},
                                           {"corpus_hash", corpus_hash(corpus)}});
  return result;
}

std::vector<EmotionLabel> predict_stage3(const Checkpoint& stage3, const Corpus& corpus) {
  const Stage3Model model = Stage3Model::from_checkpoint(stage3);
  std::vector<EmotionLabel> out;
  out.reserve(corpus.size());
  for (const auto& rec : corpus) out.push_back(emotion_from_index(model.predict(load_features(rec).frames)));
  return out;
}

}  // namespace gmptl
