#include "gmptl/stage2.hpp"

#include <sstream>

#include "gmptl/error.hpp"

namespace gmptl {

Stage2Head::Stage2Head(int model_dim, int hidden, const std::vector<int>& scale_sizes, Rng& rng) {
  for (std::size_t s = 0; s < scale_sizes.size(); ++s)
    proj_.emplace_back("stage2.scale" + std::to_string(s), model_dim, hidden, scale_sizes[s], rng);
}

void Stage2Head::collect(nn::ParamList& out) {
  for (auto& p : proj_) p.collect(out);
}

MaskedFrameLoss masked_frame_ce(const Mat& hidden, const GMPLabelSet& gmp, const MaskSpec& mask, Stage2Head& heads,
                                bool accumulate_grads) {
  const Eigen::Index frames = hidden.rows();
  if (gmp.num_frames() != frames)
    fail(ErrorCode::ShapeMismatch, "GMP frames " + std::to_string(gmp.num_frames()) + " vs hidden " + std::to_string(frames));
  if (gmp.num_scales() != heads.num_scales())
    fail(ErrorCode::ShapeMismatch, "GMP scales " + std::to_string(gmp.num_scales()) + " vs heads " + std::to_string(heads.num_scales()));
  if (mask.empty()) fail(ErrorCode::EmptyMask, "mask selects no frames");
  for (int t : mask.masked_indices)
    if (t < 0 || t >= frames) fail(ErrorCode::MaskIndexOutOfRange, "mask index " + std::to_string(t));

  const auto m = static_cast<Eigen::Index>(mask.masked_indices.size());
  const Mat selected = hidden(mask.masked_indices, Eigen::all);
  const int scales = heads.num_scales();

  MaskedFrameLoss out;
  out.d_hidden = Mat::Zero(frames, hidden.cols());
  Mat d_selected = Mat::Zero(m, hidden.cols());
  Eigen::RowVectorXd g;
  for (int s = 0; s < scales; ++s) {
    auto& head = heads.scale(s);
    nn::Mlp::Cache cache;
    const Mat logits = head.forward(selected, &cache);
    if (logits.cols() != gmp.scale_sizes[static_cast<std::size_t>(s)])
      fail(ErrorCode::ShapeMismatch, "head width differs from K_s at scale " + std::to_string(s));
    Mat dlogits(m, logits.cols());
    double loss = 0.0, hits = 0.0;
    for (Eigen::Index i = 0; i < m; ++i) {
      const int target = gmp.labels(mask.masked_indices[static_cast<std::size_t>(i)], s);
      loss += nn::softmax_ce(logits.row(i), target, &g);
      dlogits.row(i) = g;
      Eigen::Index best = 0;
      logits.row(i).maxCoeff(&best);
      hits += best == target;
    }
    out.per_scale.push_back(loss / static_cast<double>(m));
    out.accuracy.push_back(hits / static_cast<double>(m));
    out.loss += loss / static_cast<double>(m) / scales;

    dlogits /= static_cast<double>(m) * scales;
    if (accumulate_grads) {
      d_selected += head.backward(selected, cache, dlogits);
    } else {
      // Gradient w.r.t. the input without touching parameter accumulators.
      const Mat dact = dlogits * head.second().weight().value;
      d_selected += nn::relu_backward(cache.pre, dact) * head.first().weight().value;
    }
  }
  for (Eigen::Index i = 0; i < m; ++i) out.d_hidden.row(mask.masked_indices[static_cast<std::size_t>(i)]) = d_selected.row(i);
  return out;
}

namespace {

std::vector<int> parse_int_list(const std::string& s) {
  std::vector<int> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(std::stoi(item));
  return out;
}

std::string join_ints(const std::vector<int>& v) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) out += (i ? "," : "") + std::to_string(v[i]);
  return out;
}

std::uint64_t mask_seed(std::uint64_t base, long epoch, std::size_t utterance) {
  return derive_seed(base, "stage2-mask", static_cast<std::uint64_t>(epoch) * 1000003ULL + utterance);
}

}  // namespace

Stage2Result train_stage2(const Corpus& corpus, const GMPMap& gmp, const Checkpoint& stage1, const Stage2Config& cfg,
                          const TrainHyperparams& hp) {
  if (corpus.empty()) fail(ErrorCode::EmptyInput, "stage 2: empty corpus");
  if (stage1.stage_tag != StageTag::Stage1)
    log_warn("stage 2 initialised from a " + to_string(stage1.stage_tag) + " checkpoint");

  Encoder encoder(stage1.config);
  encoder.import_params(stage1.weights, stage1.config);

  std::vector<Mat> feats;
  std::vector<const GMPLabelSet*> targets;
  std::vector<int> scale_sizes;
  for (const auto& rec : corpus) {
    auto it = gmp.find(rec.id);
    if (it == gmp.end()) fail(ErrorCode::MissingGMP, "no GMP labels for " + rec.id);
    feats.push_back(load_features(rec).frames);
    if (it->second.num_frames() != feats.back().rows())
      fail(ErrorCode::FrameCountMismatch, rec.id + ": GMP has " + std::to_string(it->second.num_frames()) +
                                              " frames, features have " + std::to_string(feats.back().rows()));
    if (scale_sizes.empty()) scale_sizes = it->second.scale_sizes;
    else if (scale_sizes != it->second.scale_sizes) fail(ErrorCode::ShapeMismatch, "GMP scale sizes differ across utterances");
    targets.push_back(&it->second);
  }

  Rng head_rng(derive_seed(hp.seed, "stage2-head"));
  Stage2Head heads(stage1.config.model_dim, cfg.head_hidden, scale_sizes, head_rng);
  nn::ParamList head_params;
  heads.collect(head_params);
  nn::ParamList all = encoder.params();
  all.insert(all.end(), head_params.begin(), head_params.end());
  const bool update_encoder = !hp.freeze_encoder;
  const nn::ParamList& trainable = update_encoder ? all : head_params;

  nn::Adam adam({.lr = hp.lr, .clip_norm = hp.clip_norm});
  const int batch = effective_batch_size(hp.batch_size, corpus.size(), "stage2");
  Rng order_rng(derive_seed(hp.seed, "stage2-order"));
  Rng dropout_rng(derive_seed(hp.seed, "stage2-dropout"));

  Stage2Result result;
  result.log.columns = {"step", "loss"};
  for (std::size_t s = 0; s < scale_sizes.size(); ++s) result.log.columns.push_back("acc_scale_" + std::to_string(s));
  long step = 0;
  for (int epoch = 0; epoch < hp.epochs; ++epoch) {
    long skipped_this_epoch = 0;
    for (const auto& idx : make_batches(corpus.size(), batch, order_rng)) {
      nn::zero_grad(all);
      // Masks first so the batch normaliser counts only usable utterances.
      std::vector<std::pair<std::size_t, MaskSpec>> work;
      for (std::size_t k : idx) {
        MaskSpec mask = sample_mask_spans(static_cast<int>(feats[k].rows()), cfg.mask_prob, cfg.span_length,
                                          mask_seed(hp.seed, epoch, k));
        if (mask.empty()) {
          ++skipped_this_epoch;
          continue;
        }
        work.emplace_back(k, std::move(mask));
      }
      if (work.empty()) continue;
      const double inv_n = 1.0 / static_cast<double>(work.size());
      double batch_loss = 0.0;
      std::vector<double> acc(scale_sizes.size(), 0.0);
      for (auto& [k, mask] : work) {
        Encoder::Cache cache;
        const Mat hidden = encoder.forward_train(feats[k], &mask, cache, &dropout_rng);
        MaskedFrameLoss l = masked_frame_ce(hidden, *targets[k], mask, heads, true);
        check_finite_loss(l.loss, "stage2", step);
        batch_loss += l.loss * inv_n;
        for (std::size_t s = 0; s < acc.size(); ++s) acc[s] += l.accuracy[s] * inv_n;
        if (update_encoder) encoder.backward(cache, l.d_hidden);
      }
      // masked_frame_ce accumulates per-utterance means; average over the batch.
      adam.step(trainable, inv_n);
      std::vector<double> row = {static_cast<double>(step), batch_loss};
      row.insert(row.end(), acc.begin(), acc.end());
      result.log.add(std::move(row));
      ++step;
    }
    if (skipped_this_epoch > 0)
      log(LogLevel::Debug, "stage2 epoch " + std::to_string(epoch) + ": skipped " + std::to_string(skipped_this_epoch) +
                               " utterances with empty masks");
    result.skipped_empty_masks += skipped_this_epoch;
  }
  if (result.skipped_empty_masks > 0)
    log_warn("stage2: " + std::to_string(result.skipped_empty_masks) + " utterance-epochs skipped (empty mask)");

  Checkpoint& ckpt = result.checkpoint;
  ckpt.weights = nn::export_params(all);
  ckpt.config = stage1.config;
  ckpt.stage_tag = StageTag::Stage2;
  ckpt.metadata = {{"seed", std::to_string(hp.seed)},
                   {"step", std::to_string(step)},
                   {"upstream_hash", checkpoint_hash(stage1)},
                   {"corpus_hash", corpus_hash(corpus)},
                   {"stage2.head_hidden", std::to_string(cfg.head_hidden)},
                   {"stage2.scales", join_ints(scale_sizes)}};
  return result;
}

Stage2Result train_stage2(const Corpus& corpus, const std::filesystem::path& gmp_dir, const Checkpoint& stage1,
                          const Stage2Config& cfg, const TrainHyperparams& hp) {
  return train_stage2(corpus, read_gmp_dir(corpus, gmp_dir), stage1, cfg, hp);
}

std::vector<double> evaluate_stage2(const Checkpoint& stage2, const Corpus& corpus, const GMPMap& gmp,
                                    const Stage2Config& cfg, std::uint64_t seed) {
  if (stage2.stage_tag != StageTag::Stage2) fail(ErrorCode::IncompatibleConfig, "evaluate_stage2 needs a stage2 checkpoint");
  Encoder encoder(stage2.config);
  encoder.import_params(stage2.weights, stage2.config);
  auto it = stage2.metadata.find("stage2.scales");
  auto hh = stage2.metadata.find("stage2.head_hidden");
  if (it == stage2.metadata.end() || hh == stage2.metadata.end())
    fail(ErrorCode::CorruptCheckpoint, "stage-2 metadata lacks head layout");
  const std::vector<int> scales = parse_int_list(it->second);
  Rng rng(0);
  Stage2Head heads(stage2.config.model_dim, std::stoi(hh->second), scales, rng);
  nn::ParamList hp;
  heads.collect(hp);
  nn::import_params(hp, stage2.weights, "stage2.");

  std::vector<double> hits(scales.size(), 0.0);
  double total = 0.0;
  for (std::size_t k = 0; k < corpus.size(); ++k) {
    auto g = gmp.find(corpus[k].id);
    if (g == gmp.end()) fail(ErrorCode::MissingGMP, "no GMP labels for " + corpus[k].id);
    const Mat feats = load_features(corpus[k]).frames;
    const MaskSpec mask = sample_mask_spans(static_cast<int>(feats.rows()), cfg.mask_prob, cfg.span_length,
                                            derive_seed(seed, "stage2-eval-mask", k));
    if (mask.empty()) continue;
    const Mat hidden = encoder.forward_with_tap(feats, LayerTap{-1}, &mask);
    const MaskedFrameLoss l = masked_frame_ce(hidden, g->second, mask, heads, false);
    const double m = static_cast<double>(mask.masked_indices.size());
    for (std::size_t s = 0; s < scales.size(); ++s) hits[s] += l.accuracy[s] * m;
    total += m;
  }
  if (total == 0.0) fail(ErrorCode::EmptyMask, "evaluate_stage2: every sampled mask was empty");
  for (auto& h : hits) h /= total;
  return hits;
}

}  // namespace gmptl
