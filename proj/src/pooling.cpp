#include "gmptl/pooling.hpp"

#include <cmath>

#include "gmptl/error.hpp"

namespace gmptl {

namespace {

inline double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

Mat reverse_rows(const Mat& m) { return m.colwise().reverse(); }

}  // namespace

Lstm::Lstm(const std::string& name, int in, int hidden, Rng& rng)
    : hidden_(hidden),
      wx_(name + ".wx", nn::glorot(4 * hidden, in, rng)),
      wh_(name + ".wh", nn::glorot(4 * hidden, hidden, rng)),
      b_(name + ".b", Mat::Zero(1, 4 * hidden)) {
  b_.value.block(0, hidden, 1, hidden).setOnes();  // forget-gate bias
}

Mat Lstm::forward(const Mat& x, Cache* cache) const {
  const Eigen::Index n = x.rows();
  const int h = hidden_;
  Mat pre = x * wx_.value.transpose();
  pre.rowwise() += b_.value.row(0);

  Mat gates(n, 4 * h), cell(n, h), tanh_cell(n, h), hidden(n, h);
  Eigen::RowVectorXd h_prev = Eigen::RowVectorXd::Zero(h);
  Eigen::RowVectorXd c_prev = Eigen::RowVectorXd::Zero(h);
  for (Eigen::Index t = 0; t < n; ++t) {
    Eigen::RowVectorXd z = pre.row(t) + h_prev * wh_.value.transpose();
    for (int j = 0; j < h; ++j) {
      z(j) = sigmoid(z(j));
      z(h + j) = sigmoid(z(h + j));
      z(2 * h + j) = std::tanh(z(2 * h + j));
      z(3 * h + j) = sigmoid(z(3 * h + j));
    }
    const auto i = z.segment(0, h).array();
    const auto f = z.segment(h, h).array();
    const auto g = z.segment(2 * h, h).array();
    const auto o = z.segment(3 * h, h).array();
    Eigen::RowVectorXd c = f * c_prev.array() + i * g;
    Eigen::RowVectorXd tc = c.array().tanh();
    h_prev = o * tc.array();
    c_prev = c;
    gates.row(t) = z;
    cell.row(t) = c;
    tanh_cell.row(t) = tc;
    hidden.row(t) = h_prev;
  }
  if (cache) {
    cache->input = x;
    cache->gates = std::move(gates);
    cache->cell = std::move(cell);
    cache->tanh_cell = std::move(tanh_cell);
    cache->hidden = hidden;
  }
  return hidden;
}

Mat Lstm::backward(const Cache& c, const Mat& dh_out) {
  const Eigen::Index n = dh_out.rows();
  const int h = hidden_;
  Mat dz(n, 4 * h);
  Eigen::RowVectorXd dh_next = Eigen::RowVectorXd::Zero(h);
  Eigen::RowVectorXd dc_next = Eigen::RowVectorXd::Zero(h);
  for (Eigen::Index t = n; t-- > 0;) {
    const Eigen::RowVectorXd dh = dh_out.row(t) + dh_next;
    const auto i = c.gates.row(t).segment(0, h).array();
    const auto f = c.gates.row(t).segment(h, h).array();
    const auto g = c.gates.row(t).segment(2 * h, h).array();
    const auto o = c.gates.row(t).segment(3 * h, h).array();
    const auto tc = c.tanh_cell.row(t).array();
    const Eigen::RowVectorXd dc = (dh.array() * o * (1.0 - tc.square())).matrix() + dc_next;
    const Eigen::RowVectorXd c_prev = t > 0 ? Eigen::RowVectorXd(c.cell.row(t - 1)) : Eigen::RowVectorXd::Zero(h);
    dz.row(t).segment(0, h) = dc.array() * g * i * (1.0 - i);
    dz.row(t).segment(h, h) = dc.array() * c_prev.array() * f * (1.0 - f);
    dz.row(t).segment(2 * h, h) = dc.array() * i * (1.0 - g.square());
    dz.row(t).segment(3 * h, h) = dh.array() * tc * o * (1.0 - o);
    dc_next = dc.array() * f;
    dh_next = dz.row(t) * wh_.value;
  }
  Mat h_prev = Mat::Zero(n, h);
  if (n > 1) h_prev.bottomRows(n - 1) = c.hidden.topRows(n - 1);
  wh_.grad.noalias() += dz.transpose() * h_prev;
  wx_.grad.noalias() += dz.transpose() * c.input;
  b_.grad.row(0) += dz.colwise().sum();
  return dz * wx_.value;
}

BiLstm::BiLstm(const std::string& name, int in, int hidden, Rng& rng)
    : fwd_(name + ".fwd", in, hidden, rng), bwd_(name + ".bwd", in, hidden, rng) {}

Mat BiLstm::forward(const Mat& x, Cache* cache) const {
  const Mat hf = fwd_.forward(x, cache ? &cache->fwd : nullptr);
  const Mat hb = reverse_rows(bwd_.forward(reverse_rows(x), cache ? &cache->bwd : nullptr));
  Mat out(x.rows(), hf.cols() + hb.cols());
  out << hf, hb;
  return out;
}

Mat BiLstm::backward(const Cache& cache, const Mat& dy) {
  const Eigen::Index h = fwd_.hidden();
  Mat dx = fwd_.backward(cache.fwd, dy.leftCols(h));
  dx += reverse_rows(bwd_.backward(cache.bwd, reverse_rows(dy.rightCols(h))));
  return dx;
}

PoolingHead::PoolingHead(const std::string& name, int model_dim, const PoolingHeadConfig& cfg, Rng& rng)
    : lstm_(name + ".bilstm", model_dim, cfg.bilstm_hidden, rng),
      proj_(name + ".proj", 2 * cfg.bilstm_hidden, cfg.proj_hidden, cfg.embed_dim, rng) {}

Mat PoolingHead::embed_from_sequence(const Mat& sequence, Cache* cache) const {
  if (sequence.rows() < 1) fail(ErrorCode::EmptySequence, "pooling over zero frames");
  Mat pooled = sequence.colwise().mean();
  nn::Mlp::Cache pc;
  Mat emb = proj_.forward(pooled, cache ? &pc : nullptr);
  if (cache) {
    cache->pooled = std::move(pooled);
    cache->proj = std::move(pc);
  }
  return emb;
}

Mat PoolingHead::forward(const Mat& hidden, Cache* cache) const {
  if (hidden.rows() < 1) fail(ErrorCode::EmptySequence, "pooling over zero frames");
  BiLstm::Cache lc;
  Mat seq = lstm_.forward(hidden, cache ? &lc : nullptr);
  Mat emb = embed_from_sequence(seq, cache);
  if (cache) {
    cache->lstm = std::move(lc);
    cache->sequence = std::move(seq);
  }
  return emb;
}

Mat PoolingHead::backward(const Cache& cache, const Mat& demb) {
  const Mat dpooled = proj_.backward(cache.pooled, cache.proj, demb);
  const Eigen::Index n = cache.sequence.rows();
  const Mat dseq = dpooled.replicate(n, 1) / static_cast<double>(n);
  return lstm_.backward(cache.lstm, dseq);
}

}  // namespace gmptl
