#pragma once

#include <map>
#include <string>
#include <vector>

#include "gmptl/common.hpp"

namespace gmptl::nn {

/// Trainable tensor with its gradient accumulator and Adam moments.
struct Param {
  std::string name;
  Mat value;
  Mat grad;
  Mat m;
  Mat v;

  Param() = default;
  Param(std::string n, Mat init);
  void zero_grad() { grad.setZero(); }
};

using ParamList = std::vector<Param*>;
using ParamBundle = std::map<std::string, Mat>;

void zero_grad(const ParamList& params);
ParamBundle export_params(const ParamList& params);
/// Copies matching entries into `params`; shape mismatches raise IncompatibleConfig.
/// Entries in `bundle` under `prefix` that have no counterpart also raise.
void import_params(const ParamList& params, const ParamBundle& bundle, const std::string& prefix);

/// Glorot-uniform initialisation.
Mat glorot(int rows, int cols, Rng& rng);

/// Fully connected layer, y = x W^T + b on row-major batches.
class Linear {
 public:
  Linear() = default;
  Linear(std::string name, int in, int out, Rng& rng);

  Mat forward(const Mat& x) const;
  /// Accumulates parameter gradients; returns dL/dx.
  Mat backward(const Mat& x, const Mat& dy);
  void collect(ParamList& out) { out.push_back(&weight_); out.push_back(&bias_); }

  int in_dim() const { return static_cast<int>(weight_.value.cols()); }
  int out_dim() const { return static_cast<int>(weight_.value.rows()); }
  Param& weight() { return weight_; }
  Param& bias() { return bias_; }
  const Param& weight() const { return weight_; }
  const Param& bias() const { return bias_; }

 private:
  Param weight_;  // out x in
  Param bias_;    // 1 x out
};

/// Two linear layers with a ReLU between.
class Mlp {
 public:
  struct Cache {
    Mat pre;  // first-layer pre-activation
    Mat act;
  };

  Mlp() = default;
  Mlp(const std::string& name, int in, int hidden, int out, Rng& rng);

  Mat forward(const Mat& x, Cache* cache = nullptr) const;
  Mat backward(const Mat& x, const Cache& cache, const Mat& dy);
  void collect(ParamList& out) { first_.collect(out); second_.collect(out); }

  Linear& first() { return first_; }
  Linear& second() { return second_; }
  int out_dim() const { return second_.out_dim(); }

 private:
  Linear first_;
  Linear second_;
};

class LayerNorm {
 public:
  struct Cache {
    Mat xhat;
    Vec inv_std;
  };

  LayerNorm() = default;
  LayerNorm(const std::string& name, int dim);

  Mat forward(const Mat& x, Cache* cache) const;
  Mat backward(const Cache& cache, const Mat& dy);
  void collect(ParamList& out) { out.push_back(&gamma_); out.push_back(&beta_); }

 private:
  Param gamma_;
  Param beta_;
  double eps_ = 1e-5;
};

Mat relu(const Mat& x);
/// dy masked by x > 0.
Mat relu_backward(const Mat& x, const Mat& dy);

/// Row-wise numerically stable softmax.
Mat softmax_rows(const Mat& logits);

/// Cross-entropy of one logit row against `label`. Writes dL/dlogits when
/// `grad` is non-null. Raises NonFiniteLogits on NaN/inf input.
double softmax_ce(const Eigen::Ref<const Eigen::RowVectorXd>& logits, int label, Eigen::RowVectorXd* grad = nullptr);

struct AdamConfig {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  // Global gradient-norm clip; 0 disables.
  double clip_norm = 0.0;
};

class Adam {
 public:
  explicit Adam(AdamConfig cfg = {}) : cfg_(cfg) {}
  /// Applies one update using the accumulated gradients scaled by `grad_scale`.
  void step(const ParamList& params, double grad_scale = 1.0);
  long steps() const { return t_; }

 private:
  AdamConfig cfg_;
  long t_ = 0;
};

}  // namespace gmptl::nn
