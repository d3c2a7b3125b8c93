#include "gmptl/nn.hpp"

#include <cmath>

#include "gmptl/error.hpp"

namespace gmptl::nn {

Param::Param(std::string n, Mat init)
    : name(std::move(n)),
      value(std::move(init)),
      grad(Mat::Zero(value.rows(), value.cols())),
      m(Mat::Zero(value.rows(), value.cols())),
      v(Mat::Zero(value.rows(), value.cols())) {}

void zero_grad(const ParamList& params) {
  for (auto* p : params) p->zero_grad();
}

ParamBundle export_params(const ParamList& params) {
  ParamBundle out;
  for (const auto* p : params) out[p->name] = p->value;
  return out;
}

void import_params(const ParamList& params, const ParamBundle& bundle, const std::string& prefix) {
  std::size_t matched = 0;
  for (auto* p : params) {
    if (p->name.rfind(prefix, 0) != 0) continue;
    auto it = bundle.find(p->name);
    if (it == bundle.end()) fail(ErrorCode::IncompatibleConfig, "checkpoint lacks parameter " + p->name);
    if (it->second.rows() != p->value.rows() || it->second.cols() != p->value.cols())
      fail(ErrorCode::IncompatibleConfig, "shape mismatch for " + p->name);
    p->value = it->second;
    p->m.setZero();
    p->v.setZero();
    ++matched;
  }
  std::size_t available = 0;
  for (const auto& [name, _] : bundle)
    if (name.rfind(prefix, 0) == 0) ++available;
  if (available != matched)
    fail(ErrorCode::IncompatibleConfig, "checkpoint has " + std::to_string(available) + " parameters under '" + prefix +
                                            "', model expects " + std::to_string(matched));
}

Mat glorot(int rows, int cols, Rng& rng) {
  const double limit = std::sqrt(6.0 / (rows + cols));
  std::uniform_real_distribution<double> dist(-limit, limit);
  Mat w(rows, cols);
  for (Eigen::Index i = 0; i < w.size(); ++i) w.data()[i] = dist(rng);
  return w;
}

Linear::Linear(std::string name, int in, int out, Rng& rng)
    : weight_(name + ".weight", glorot(out, in, rng)), bias_(name + ".bias", Mat::Zero(1, out)) {}

Mat Linear::forward(const Mat& x) const {
  Mat y = x * weight_.value.transpose();
  y.rowwise() += bias_.value.row(0);
  return y;
}

Mat Linear::backward(const Mat& x, const Mat& dy) {
  weight_.grad.noalias() += dy.transpose() * x;
  bias_.grad.row(0) += dy.colwise().sum();
  return dy * weight_.value;
}

Mlp::Mlp(const std::string& name, int in, int hidden, int out, Rng& rng)
    : first_(name + ".0", in, hidden, rng), second_(name + ".1", hidden, out, rng) {}

Mat Mlp::forward(const Mat& x, Cache* cache) const {
  Mat pre = first_.forward(x);
  Mat act = relu(pre);
  Mat y = second_.forward(act);
  if (cache) {
    cache->pre = std::move(pre);
    cache->act = std::move(act);
  }
  return y;
}

Mat Mlp::backward(const Mat& x, const Cache& cache, const Mat& dy) {
  const Mat dact = second_.backward(cache.act, dy);
  return first_.backward(x, relu_backward(cache.pre, dact));
}

LayerNorm::LayerNorm(const std::string& name, int dim)
    : gamma_(name + ".gamma", Mat::Ones(1, dim)), beta_(name + ".beta", Mat::Zero(1, dim)) {}

Mat LayerNorm::forward(const Mat& x, Cache* cache) const {
  const Eigen::Index n = x.rows(), d = x.cols();
  Mat xhat(n, d);
  Vec inv_std(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const double mean = x.row(i).mean();
    const double var = (x.row(i).array() - mean).square().mean();
    inv_std(i) = 1.0 / std::sqrt(var + eps_);
    xhat.row(i) = (x.row(i).array() - mean) * inv_std(i);
  }
  Mat y = xhat.array().rowwise() * gamma_.value.row(0).array();
  y.rowwise() += beta_.value.row(0);
  if (cache) {
    cache->xhat = std::move(xhat);
    cache->inv_std = std::move(inv_std);
  }
  return y;
}

Mat LayerNorm::backward(const Cache& cache, const Mat& dy) {
  const Eigen::Index n = dy.rows(), d = dy.cols();
  gamma_.grad.row(0) += (dy.array() * cache.xhat.array()).colwise().sum().matrix();
  beta_.grad.row(0) += dy.colwise().sum();
  const Mat dxhat = dy.array().rowwise() * gamma_.value.row(0).array();
  Mat dx(n, d);
  for (Eigen::Index i = 0; i < n; ++i) {
    const double sum_dxhat = dxhat.row(i).sum();
    const double sum_dxhat_xhat = dxhat.row(i).dot(cache.xhat.row(i));
    dx.row(i) = (cache.inv_std(i) / static_cast<double>(d)) *
                (static_cast<double>(d) * dxhat.row(i).array() - sum_dxhat - cache.xhat.row(i).array() * sum_dxhat_xhat);
  }
  return dx;
}

Mat relu(const Mat& x) { return x.cwiseMax(0.0); }

Mat relu_backward(const Mat& x, const Mat& dy) { return (x.array() > 0.0).select(dy, 0.0); }

Mat softmax_rows(const Mat& logits) {
  Mat p(logits.rows(), logits.cols());
  for (Eigen::Index i = 0; i < logits.rows(); ++i) {
    const double mx = logits.row(i).maxCoeff();
    p.row(i) = (logits.row(i).array() - mx).exp();
    p.row(i) /= p.row(i).sum();
  }
  return p;
}

double softmax_ce(const Eigen::Ref<const Eigen::RowVectorXd>& logits, int label, Eigen::RowVectorXd* grad) {
  if (!logits.allFinite()) fail(ErrorCode::NonFiniteLogits, "logits contain NaN or inf");
  if (label < 0 || label >= logits.size()) fail(ErrorCode::RangeViolation, "label " + std::to_string(label));
  const double mx = logits.maxCoeff();
  const Eigen::RowVectorXd shifted = logits.array() - mx;
  const double lse = std::log(shifted.array().exp().sum());
  if (grad) {
    *grad = (shifted.array() - lse).exp();
    (*grad)(label) -= 1.0;
  }
  return lse - shifted(label);
}

void Adam::step(const ParamList& params, double grad_scale) {
  ++t_;
  double scale = grad_scale;
  if (cfg_.clip_norm > 0.0) {
    double sq = 0.0;
    for (const auto* p : params) sq += p->grad.squaredNorm();
    const double norm = std::sqrt(sq) * grad_scale;
    if (norm > cfg_.clip_norm) scale *= cfg_.clip_norm / norm;
  }
  const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
  for (auto* p : params) {
    const Mat g = p->grad * scale;
    p->m = cfg_.beta1 * p->m + (1.0 - cfg_.beta1) * g;
    p->v = cfg_.beta2 * p->v + (1.0 - cfg_.beta2) * g.cwiseAbs2();
    p->value.array() -= cfg_.lr * (p->m.array() / bc1) / ((p->v.array() / bc2).sqrt() + cfg_.eps);
  }
}

}  // namespace gmptl::nn
