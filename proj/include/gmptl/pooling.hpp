#pragma once

#include <string>

#include "gmptl/common.hpp"
#include "gmptl/nn.hpp"

namespace gmptl {

/// Single-direction LSTM; gate order i, f, g, o.
class Lstm {
 public:
  struct Cache {
    Mat input;
    Mat gates;  // T x 4H, post-activation
    Mat cell;   // T x H
    Mat tanh_cell;
    Mat hidden;  // T x H
  };

  Lstm() = default;
  Lstm(const std::string& name, int in, int hidden, Rng& rng);

  Mat forward(const Mat& x, Cache* cache) const;
  Mat backward(const Cache& cache, const Mat& dh_out);
  void collect(nn::ParamList& out) { out.push_back(&wx_); out.push_back(&wh_); out.push_back(&b_); }
  int hidden() const { return hidden_; }

 private:
  int hidden_ = 0;
  nn::Param wx_;  // 4H x in
  nn::Param wh_;  // 4H x H
  nn::Param b_;   // 1 x 4H
};

class BiLstm {
 public:
  struct Cache {
    Lstm::Cache fwd, bwd;
  };

  BiLstm() = default;
  BiLstm(const std::string& name, int in, int hidden, Rng& rng);

  /// T x 2H: forward states in the first H columns, backward in the rest.
  Mat forward(const Mat& x, Cache* cache) const;
  Mat backward(const Cache& cache, const Mat& dy);
  void collect(nn::ParamList& out) { fwd_.collect(out); bwd_.collect(out); }
  int out_dim() const { return 2 * fwd_.hidden(); }

 private:
  Lstm fwd_, bwd_;
};

struct PoolingHeadConfig {
  int bilstm_hidden = 64;
  int proj_hidden = 64;
  int embed_dim = 64;
};

/// BiLSTM over frames, mean over time, then a Linear-ReLU-Linear projection.
class PoolingHead {
 public:
  struct Cache {
    BiLstm::Cache lstm;
    Mat sequence;  // BiLSTM output, T x 2H
    Mat pooled;    // 1 x 2H
    nn::Mlp::Cache proj;
  };

  PoolingHead() = default;
  PoolingHead(const std::string& name, int model_dim, const PoolingHeadConfig& cfg, Rng& rng);

  /// 1 x embed_dim; raises EmptySequence when `hidden` has no rows.
  Mat forward(const Mat& hidden, Cache* cache = nullptr) const;
  /// Mean pooling and projection over an already-encoded sequence.
  Mat embed_from_sequence(const Mat& sequence, Cache* cache = nullptr) const;
  /// Returns dL/d(hidden).
  Mat backward(const Cache& cache, const Mat& demb);
  void collect(nn::ParamList& out) { lstm_.collect(out); proj_.collect(out); }

  BiLstm& lstm() { return lstm_; }
  nn::Mlp& projection() { return proj_; }

 private:
  BiLstm lstm_;
  nn::Mlp proj_;
};

}  // namespace gmptl
