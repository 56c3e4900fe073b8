// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <optional>
#include <span>
#include <vector>

#include "icmlp/tensor.hpp"

namespace icmlp {

/// Train: batch statistics + stochastic dropout, caches kept for backward.
/// Eval: running statistics, dropout is the identity, deterministic.
/// MonteCarlo: running statistics with stochastic dropout; no caches, no
/// state updates. Used for MC-dropout predictive sampling.
enum class Mode { Train, Eval, MonteCarlo };

/// Non-owning handle to a trainable tensor and its gradient accumulator.
struct ParamRef {
  Tensor* value;
  Tensor* grad;
};

/// Fully connected layer, y = x W^T + b.
class LinearLayer {
 public:
  LinearLayer() = default;
  LinearLayer(std::size_t in_features, std::size_t out_features);

  std::size_t in_features() const { return weight_.cols(); }
  std::size_t out_features() const { return weight_.rows(); }

  Tensor forward(const Tensor& x);
  /// Stateless forward; does not touch the input cache.
  Tensor apply(const Tensor& x) const;
  /// Accumulates grad_weight and grad_bias, returns dL/dx.
  Tensor backward(const Tensor& grad_out);

  void zero_grads();
  void clear_cache() { input_cache_.reset(); }
  void collect_params(std::vector<ParamRef>& out);

  Tensor& weight() { return weight_; }
  const Tensor& weight() const { return weight_; }
  Tensor& bias() { return bias_; }
  const Tensor& bias() const { return bias_; }
  const Tensor& grad_weight() const { return grad_weight_; }
  const Tensor& grad_bias() const { return grad_bias_; }

 private:
  Tensor weight_;  // out x in
  Tensor bias_;    // 1 x out
  Tensor grad_weight_;
  Tensor grad_bias_;
  std::optional<Tensor> input_cache_;
};

/// Per-feature batch normalization with learned affine parameters.
class BatchNormLayer {
 public:
  static constexpr double kDefaultEps = 1e-5;
  static constexpr double kDefaultMomentum = 0.1;

  BatchNormLayer() = default;
  explicit BatchNormLayer(std::size_t features, double eps = kDefaultEps,
                          double momentum = kDefaultMomentum);

  std::size_t features() const { return gamma_.cols(); }

  /// Train mode normalizes with the biased batch variance and folds the
  /// unbiased variance into running_var. Requires at least two rows.
  Tensor forward(const Tensor& x, Mode mode);
  /// Normalizes with the running statistics; never mutates.
  Tensor apply_running(const Tensor& x) const;
  Tensor backward(const Tensor& grad_out);

  void zero_grads();
  void clear_cache() { has_cache_ = false; }
  void collect_params(std::vector<ParamRef>& out);

  double eps() const { return eps_; }
  double momentum() const { return momentum_; }

  Tensor& gamma() { return gamma_; }
  const Tensor& gamma() const { return gamma_; }
  Tensor& beta() { return beta_; }
  const Tensor& beta() const { return beta_; }
  Tensor& running_mean() { return running_mean_; }
  const Tensor& running_mean() const { return running_mean_; }
  Tensor& running_var() { return running_var_; }
  const Tensor& running_var() const { return running_var_; }
  const Tensor& grad_gamma() const { return grad_gamma_; }
  const Tensor& grad_beta() const { return grad_beta_; }

 private:
  Tensor gamma_, beta_;
  Tensor running_mean_, running_var_;
  Tensor grad_gamma_, grad_beta_;
  double eps_ = kDefaultEps;
  double momentum_ = kDefaultMomentum;

  bool has_cache_ = false;
  Tensor x_hat_;    // normalized input
  Tensor inv_std_;  // 1 x N, 1/sqrt(batch_var + eps)
  Tensor batch_mean_;
  Tensor batch_var_;
};

/// Inverted dropout: kept units are scaled by 1/(1-p) during training so the
/// expectation of the output equals the input and Eval is the identity.
class DropoutLayer {
 public:
  DropoutLayer() = default;
  explicit DropoutLayer(double p);

  double p() const { return p_; }

  Tensor forward(const Tensor& x, Mode mode, Rng& rng);
  /// Applies a freshly sampled mask without caching it.
  Tensor sample(const Tensor& x, Rng& rng) const;
  Tensor backward(const Tensor& grad_out) const;

  /// While frozen, Train forwards reuse the cached mask when its shape
  /// matches the input. Used by finite-difference gradient checks.
  void set_frozen(bool frozen) { frozen_ = frozen; }
  bool frozen() const { return frozen_; }
  void set_mask(Tensor mask) { mask_cache_ = std::move(mask); }
  const std::optional<Tensor>& mask() const { return mask_cache_; }
  void clear_cache() {
    if (!frozen_) mask_cache_.reset();
  }

 private:
  double p_ = 0.0;
  bool frozen_ = false;
  std::optional<Tensor> mask_cache_;
};

class ReluLayer {
 public:
  Tensor forward(const Tensor& x);
  Tensor backward(const Tensor& grad_out) const;
  static Tensor apply(const Tensor& x);
  void clear_cache() { input_cache_.reset(); }

 private:
  std::optional<Tensor> input_cache_;
};

struct LossResult {
  double loss;
  Tensor grad_logits;
};

/// Row-wise softmax with max subtraction.
Tensor softmax(const Tensor& logits);

/// Mean over the batch of -log softmax(logits)[label], with its gradient
/// (softmax - onehot) / B. Throws LabelError for labels outside [0, C).
LossResult softmax_cross_entropy(const Tensor& logits, std::span<const int> labels);

/// Checks f(x + y) == f(x) + f(y) and f(a x) == a f(x) for the layer with its
/// bias zeroed, within `rel_tol` relative error.
bool check_linearity(const LinearLayer& layer, const Tensor& x, const Tensor& y, double a,
                     double rel_tol = 1e-9);

}  // namespace icmlp
