#include "gmptl/encoder.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

#include "gmptl/error.hpp"

namespace gmptl {

namespace fs = std::filesystem;

void validate(const EncoderConfig& cfg) {
  auto bad = [](const std::string& m) { fail(ErrorCode::ConfigInvalid, "encoder: " + m); };
  if (cfg.n_layers <= 0) bad("n_layers must be positive");
  if (cfg.model_dim <= 0 || cfg.n_heads <= 0 || cfg.ff_dim <= 0 || cfg.input_dim <= 0) bad("dimensions must be positive");
  if (cfg.model_dim % cfg.n_heads != 0) bad("model_dim must be divisible by n_heads");
  if (!(cfg.dropout >= 0.0 && cfg.dropout < 1.0)) bad("dropout must be in [0,1)");
}

std::string config_hash(const EncoderConfig& cfg) {
  Hasher h;
  h.str("encoder-v1");
  for (int v : {cfg.n_layers, cfg.model_dim, cfg.n_heads, cfg.ff_dim, cfg.input_dim}) h.u64(static_cast<std::uint64_t>(v));
  return h.hex();
}

bool same_architecture(const EncoderConfig& a, const EncoderConfig& b) { return config_hash(a) == config_hash(b); }

MaskSpec sample_mask_spans(int num_frames, double mask_prob, int span_length, std::uint64_t seed) {
  if (!(mask_prob > 0.0 && mask_prob < 1.0)) fail(ErrorCode::InvalidProbability, "mask_prob must be in (0,1)");
  if (num_frames < 1) fail(ErrorCode::MaskIndexOutOfRange, "T must be at least 1");
  if (span_length < 1) fail(ErrorCode::ConfigInvalid, "span_length must be positive");
  Rng rng(seed);
  std::bernoulli_distribution start(mask_prob);
  std::vector<char> hit(static_cast<std::size_t>(num_frames), 0);
  for (int t = 0; t < num_frames; ++t) {
    if (!start(rng)) continue;
    const int end = std::min(num_frames, t + span_length);
    for (int u = t; u < end; ++u) hit[static_cast<std::size_t>(u)] = 1;
  }
  MaskSpec spec;
  spec.span_length = span_length;
  spec.mask_prob = mask_prob;
  for (int t = 0; t < num_frames; ++t)
    if (hit[static_cast<std::size_t>(t)]) spec.masked_indices.push_back(t);
  return spec;
}

int resolve_tap(LayerTap tap, int n_layers) {
  if (tap.layer_id == 0 || std::abs(tap.layer_id) > n_layers)
    fail(ErrorCode::TapOutOfRange, "layer tap " + std::to_string(tap.layer_id) + " for depth " + std::to_string(n_layers));
  return tap.layer_id > 0 ? tap.layer_id : n_layers + tap.layer_id + 1;
}

Mat sinusoidal_positions(int num_frames, int dim) {
  Mat pe(num_frames, dim);
  for (int t = 0; t < num_frames; ++t) {
    for (int i = 0; i < dim; ++i) {
      const double rate = std::pow(10000.0, -static_cast<double>(2 * (i / 2)) / dim);
      pe(t, i) = (i % 2 == 0) ? std::sin(t * rate) : std::cos(t * rate);
    }
  }
  return pe;
}

namespace {

Mat dropout_mask(Eigen::Index rows, Eigen::Index cols, double p, Rng& rng) {
  std::bernoulli_distribution keep(1.0 - p);
  Mat m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = keep(rng) ? 1.0 / (1.0 - p) : 0.0;
  return m;
}

}  // namespace

TransformerLayer::TransformerLayer(const std::string& name, const EncoderConfig& cfg, Rng& rng)
    : heads_(cfg.n_heads),
      dropout_(cfg.dropout),
      ln1_(name + ".ln1", cfg.model_dim),
      ln2_(name + ".ln2", cfg.model_dim),
      wq_(name + ".attn.q", cfg.model_dim, cfg.model_dim, rng),
      wk_(name + ".attn.k", cfg.model_dim, cfg.model_dim, rng),
      wv_(name + ".attn.v", cfg.model_dim, cfg.model_dim, rng),
      wo_(name + ".attn.o", cfg.model_dim, cfg.model_dim, rng),
      ff_(name + ".ff", cfg.model_dim, cfg.ff_dim, cfg.model_dim, rng) {}

void TransformerLayer::collect(nn::ParamList& out) {
  ln1_.collect(out);
  wq_.collect(out);
  wk_.collect(out);
  wv_.collect(out);
  wo_.collect(out);
  ln2_.collect(out);
  ff_.collect(out);
}

Mat TransformerLayer::forward(const Mat& x, Cache* cache, Rng* dropout_rng) const {
  const Eigen::Index n = x.rows(), d = x.cols();
  const Eigen::Index dh = d / heads_;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));

  nn::LayerNorm::Cache ln1c;
  Mat normed1 = ln1_.forward(x, cache ? &ln1c : nullptr);
  Mat q = wq_.forward(normed1), k = wk_.forward(normed1), v = wv_.forward(normed1);
  Mat context(n, d);
  std::vector<Mat> probs;
  for (int h = 0; h < heads_; ++h) {
    const auto cols = Eigen::seqN(h * dh, dh);
    Mat p = nn::softmax_rows(scale * q(Eigen::all, cols) * k(Eigen::all, cols).transpose());
    context(Eigen::all, cols) = p * v(Eigen::all, cols);
    if (cache) probs.push_back(std::move(p));
  }
  Mat attn_out = wo_.forward(context);
  Mat attn_drop;
  const bool drop = dropout_rng && dropout_ > 0.0;
  if (drop) {
    attn_drop = dropout_mask(n, d, dropout_, *dropout_rng);
    attn_out.array() *= attn_drop.array();
  }
  Mat mid = x + attn_out;

  nn::LayerNorm::Cache ln2c;
  Mat normed2 = ln2_.forward(mid, cache ? &ln2c : nullptr);
  nn::Mlp::Cache ffc;
  Mat ff_out = ff_.forward(normed2, cache ? &ffc : nullptr);
  Mat ff_drop;
  if (drop) {
    ff_drop = dropout_mask(n, d, dropout_, *dropout_rng);
    ff_out.array() *= ff_drop.array();
  }
  Mat y = mid + ff_out;

  if (cache) {
    cache->input = x;
    cache->ln1 = std::move(ln1c);
    cache->normed1 = std::move(normed1);
    cache->q = std::move(q);
    cache->k = std::move(k);
    cache->v = std::move(v);
    cache->probs = std::move(probs);
    cache->context = std::move(context);
    cache->attn_out = std::move(attn_out);
    cache->attn_drop = std::move(attn_drop);
    cache->mid = std::move(mid);
    cache->ln2 = std::move(ln2c);
    cache->normed2 = std::move(normed2);
    cache->ff = std::move(ffc);
    cache->ff_drop = std::move(ff_drop);
  }
  return y;
}

Mat TransformerLayer::backward(const Cache& c, const Mat& dy) {
  const Eigen::Index n = dy.rows(), d = dy.cols();
  const Eigen::Index dh = d / heads_;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));

  Mat dff_out = dy;
  if (c.ff_drop.size() > 0) dff_out.array() *= c.ff_drop.array();
  const Mat dnormed2 = ff_.backward(c.normed2, c.ff, dff_out);
  Mat dmid = dy + ln2_.backward(c.ln2, dnormed2);

  Mat dattn = dmid;
  if (c.attn_drop.size() > 0) dattn.array() *= c.attn_drop.array();
  const Mat dcontext = wo_.backward(c.context, dattn);

  Mat dq(n, d), dk(n, d), dv(n, d);
  for (int h = 0; h < heads_; ++h) {
    const auto cols = Eigen::seqN(h * dh, dh);
    const Mat& p = c.probs[static_cast<std::size_t>(h)];
    const Mat dctx = dcontext(Eigen::all, cols);
    const Mat dp = dctx * c.v(Eigen::all, cols).transpose();
    dv(Eigen::all, cols) = p.transpose() * dctx;
    const Eigen::VectorXd row_dot = (dp.array() * p.array()).rowwise().sum();
    const Mat ds = p.array() * (dp.array().colwise() - row_dot.array());
    dq(Eigen::all, cols) = scale * ds * c.k(Eigen::all, cols);
    dk(Eigen::all, cols) = scale * ds.transpose() * c.q(Eigen::all, cols);
  }
  Mat dnormed1 = wq_.backward(c.normed1, dq);
  dnormed1 += wk_.backward(c.normed1, dk);
  dnormed1 += wv_.backward(c.normed1, dv);
  return dmid + ln1_.backward(c.ln1, dnormed1);
}

Encoder::Encoder(const EncoderConfig& cfg) : cfg_(cfg) {
  validate(cfg_);
  Rng rng(derive_seed(cfg_.seed, "encoder-init"));
  input_proj_ = nn::Linear("encoder.input_proj", cfg_.input_dim, cfg_.model_dim, rng);
  std::normal_distribution<double> normal(0.0, 1.0);
  Mat emb(1, cfg_.model_dim);
  for (Eigen::Index i = 0; i < emb.size(); ++i) emb.data()[i] = normal(rng);
  mask_embedding_ = nn::Param("encoder.mask_embedding", emb);
  for (int l = 0; l < cfg_.n_layers; ++l) layers_.emplace_back("encoder.layer" + std::to_string(l), cfg_, rng);
}

Mat Encoder::embed(const Mat& features, const MaskSpec* mask, std::vector<int>* masked) const {
  if (features.rows() < 1) fail(ErrorCode::EmptySequence, "encoder input has no frames");
  if (features.cols() != cfg_.input_dim)
    fail(ErrorCode::ShapeMismatch, "encoder expects input_dim " + std::to_string(cfg_.input_dim) + ", got " +
                                       std::to_string(features.cols()));
  Mat z = input_proj_.forward(features);
  if (mask) {
    for (int t : mask->masked_indices) {
      if (t < 0 || t >= z.rows())
        fail(ErrorCode::MaskIndexOutOfRange, "mask index " + std::to_string(t) + " for T=" + std::to_string(z.rows()));
      z.row(t) = mask_embedding_.value.row(0);
    }
    if (masked) *masked = mask->masked_indices;
  }
  z += sinusoidal_positions(static_cast<int>(z.rows()), cfg_.model_dim);
  return z;
}

std::vector<Mat> Encoder::forward_layers(const Mat& features, int up_to, const MaskSpec* mask) const {
  if (up_to < 1 || up_to > cfg_.n_layers) fail(ErrorCode::TapOutOfRange, "layer " + std::to_string(up_to));
  std::vector<Mat> outs;
  Mat h = embed(features, mask, nullptr);
  for (int l = 0; l < up_to; ++l) {
    h = layers_[static_cast<std::size_t>(l)].forward(h, nullptr, nullptr);
    outs.push_back(h);
  }
  return outs;
}

Mat Encoder::forward_with_tap(const Mat& features, LayerTap tap, const MaskSpec* mask) const {
  const int layer = resolve_tap(tap, cfg_.n_layers);
  Mat h = embed(features, mask, nullptr);
  for (int l = 0; l < layer; ++l) h = layers_[static_cast<std::size_t>(l)].forward(h, nullptr, nullptr);
  return h;
}

Mat Encoder::forward_train(const Mat& features, const MaskSpec* mask, Cache& cache, Rng* dropout_rng) const {
  cache.input = features;
  cache.masked.clear();
  Mat h = embed(features, mask, &cache.masked);
  cache.layers.resize(layers_.size());
  for (std::size_t l = 0; l < layers_.size(); ++l) h = layers_[l].forward(h, &cache.layers[l], dropout_rng);
  return h;
}

void Encoder::backward(const Cache& cache, const Mat& dout) {
  Mat d = dout;
  for (std::size_t l = layers_.size(); l-- > 0;) d = layers_[l].backward(cache.layers[l], d);
  for (int t : cache.masked) {
    mask_embedding_.grad.row(0) += d.row(t);
    d.row(t).setZero();
  }
  input_proj_.backward(cache.input, d);
}

nn::ParamList Encoder::params() {
  nn::ParamList out;
  input_proj_.collect(out);
  out.push_back(&mask_embedding_);
  for (auto& layer : layers_) layer.collect(out);
  return out;
}

nn::ParamBundle Encoder::export_params() { return nn::export_params(params()); }

void Encoder::import_params(const nn::ParamBundle& bundle, const EncoderConfig& source_cfg) {
  if (!same_architecture(source_cfg, cfg_))
    fail(ErrorCode::IncompatibleConfig, "checkpoint encoder architecture " + config_hash(source_cfg) +
                                            " does not match model " + config_hash(cfg_));
  nn::import_params(params(), bundle, "encoder.");
}

std::string to_string(StageTag tag) {
  switch (tag) {
    case StageTag::Stage1: return "stage1";
    case StageTag::Stage2: return "stage2";
    case StageTag::Stage3: return "stage3";
  }
  return "?";
}

StageTag parse_stage_tag(const std::string& s) {
  if (s == "stage1") return StageTag::Stage1;
  if (s == "stage2") return StageTag::Stage2;
  if (s == "stage3") return StageTag::Stage3;
  fail(ErrorCode::CorruptCheckpoint, "unknown stage tag '" + s + "'");
}

std::string checkpoint_hash(const Checkpoint& ckpt) {
  Hasher h;
  h.str(to_string(ckpt.stage_tag)).str(config_hash(ckpt.config));
  for (const auto& [name, m] : ckpt.weights) h.str(name).mat(m);
  return h.hex();
}

namespace {

std::map<std::string, std::string> encoder_fields(const EncoderConfig& c) {
  return {{"encoder.n_layers", std::to_string(c.n_layers)},
          {"encoder.model_dim", std::to_string(c.model_dim)},
          {"encoder.n_heads", std::to_string(c.n_heads)},
          {"encoder.ff_dim", std::to_string(c.ff_dim)},
          {"encoder.input_dim", std::to_string(c.input_dim)},
          {"encoder.dropout", format_double(c.dropout)},
          {"encoder.seed", std::to_string(c.seed)}};
}

fs::path meta_path(const fs::path& path) { return fs::path(path.string() + ".meta"); }

}  // namespace

void save_checkpoint(const Checkpoint& ckpt, const fs::path& path) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  {
    std::ofstream os(path, std::ios::binary);
    if (!os) fail(ErrorCode::Io, "cannot write checkpoint " + path.string());
    bin::write_magic(os, "CKP1");
    bin::write_u32(os, static_cast<std::uint32_t>(ckpt.weights.size()));
    for (const auto& [name, m] : ckpt.weights) {
      bin::write_u32(os, static_cast<std::uint32_t>(name.size()));
      os.write(name.data(), static_cast<std::streamsize>(name.size()));
      bin::write_u32(os, static_cast<std::uint32_t>(m.rows()));
      bin::write_u32(os, static_cast<std::uint32_t>(m.cols()));
      for (Eigen::Index i = 0; i < m.size(); ++i) bin::write_f64(os, m.data()[i]);
    }
    if (!os) fail(ErrorCode::Io, "short write " + path.string());
  }
  std::map<std::string, std::string> meta = ckpt.metadata;
  for (auto& [k, v] : encoder_fields(ckpt.config)) meta[k] = v;
  meta["stage_tag"] = to_string(ckpt.stage_tag);
  meta["config_hash"] = config_hash(ckpt.config);
  meta["checkpoint_hash"] = checkpoint_hash(ckpt);
  std::ofstream ms(meta_path(path));
  if (!ms) fail(ErrorCode::Io, "cannot write " + meta_path(path).string());
  for (const auto& [k, v] : meta) ms << k << '=' << v << '\n';
}

Checkpoint load_checkpoint(const fs::path& path) {
  Checkpoint ckpt;
  std::ifstream is(path, std::ios::binary);
  if (!is) fail(ErrorCode::CorruptCheckpoint, "cannot open " + path.string());
  if (!bin::read_magic(is, "CKP1")) fail(ErrorCode::CorruptCheckpoint, "bad magic in " + path.string());
  std::uint32_t count = 0;
  if (!bin::read_u32(is, count)) fail(ErrorCode::CorruptCheckpoint, "truncated " + path.string());
  for (std::uint32_t i = 0; i < count; ++i) {
    std::uint32_t len = 0, rows = 0, cols = 0;
    if (!bin::read_u32(is, len) || len > 4096) fail(ErrorCode::CorruptCheckpoint, "bad entry name in " + path.string());
    std::string name(len, '\0');
    if (!is.read(name.data(), len) || !bin::read_u32(is, rows) || !bin::read_u32(is, cols))
      fail(ErrorCode::CorruptCheckpoint, "truncated entry in " + path.string());
    Mat m(rows, cols);
    for (Eigen::Index j = 0; j < m.size(); ++j)
      if (!bin::read_f64(is, m.data()[j])) fail(ErrorCode::CorruptCheckpoint, "truncated data in " + path.string());
    ckpt.weights.emplace(std::move(name), std::move(m));
  }

  std::ifstream ms(meta_path(path));
  if (!ms) fail(ErrorCode::CorruptCheckpoint, "missing metadata " + meta_path(path).string());
  std::string line;
  while (std::getline(ms, line)) {
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) fail(ErrorCode::CorruptCheckpoint, "bad metadata line '" + line + "'");
    ckpt.metadata[line.substr(0, eq)] = line.substr(eq + 1);
  }
  auto field = [&](const std::string& key) -> const std::string& {
    auto it = ckpt.metadata.find(key);
    if (it == ckpt.metadata.end()) fail(ErrorCode::CorruptCheckpoint, "metadata lacks " + key);
    return it->second;
  };
  try {
    ckpt.config.n_layers = std::stoi(field("encoder.n_layers"));
    ckpt.config.model_dim = std::stoi(field("encoder.model_dim"));
    ckpt.config.n_heads = std::stoi(field("encoder.n_heads"));
    ckpt.config.ff_dim = std::stoi(field("encoder.ff_dim"));
    ckpt.config.input_dim = std::stoi(field("encoder.input_dim"));
    ckpt.config.dropout = std::stod(field("encoder.dropout"));
    ckpt.config.seed = std::stoull(field("encoder.seed"));
  } catch (const std::logic_error&) {
    fail(ErrorCode::CorruptCheckpoint, "unparsable encoder fields in " + meta_path(path).string());
  }
  ckpt.stage_tag = parse_stage_tag(field("stage_tag"));
  if (field("config_hash") != config_hash(ckpt.config))
    fail(ErrorCode::CorruptCheckpoint, "config hash does not match config in " + path.string());
  if (field("checkpoint_hash") != checkpoint_hash(ckpt))
    fail(ErrorCode::CorruptCheckpoint, "weights do not match recorded hash in " + path.string());
  return ckpt;
}

void require_compatible(const Checkpoint& ckpt, const EncoderConfig& expected) {
  if (!same_architecture(ckpt.config, expected))
    fail(ErrorCode::IncompatibleConfig, "checkpoint encoder (model_dim=" + std::to_string(ckpt.config.model_dim) +
                                            ", n_layers=" + std::to_string(ckpt.config.n_layers) +
                                            ") does not match configured encoder (model_dim=" +
                                            std::to_string(expected.model_dim) +
                                            ", n_layers=" + std::to_string(expected.n_layers) + ")");
}

}  // namespace gmptl
