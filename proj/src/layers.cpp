// SPDX-License-Identifier: Apache-2.0
#include "icmlp/layers.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "icmlp/errors.hpp"

namespace icmlp {

// ---------------------------------------------------------------- Linear

LinearLayer::LinearLayer(std::size_t in_features, std::size_t out_features)
    : weight_(out_features, in_features),
      bias_(1, out_features),
      grad_weight_(out_features, in_features),
      grad_bias_(1, out_features) {}

Tensor LinearLayer::apply(const Tensor& x) const {
  if (x.cols() != in_features()) {
    throw DimensionError("linear: input " + x.shape_string() + " does not match weight " +
                         weight_.shape_string());
  }
  return add_row_broadcast(matmul_bt(x, weight_), bias_);
}

Tensor LinearLayer::forward(const Tensor& x) {
  Tensor y = apply(x);
  input_cache_ = x;
  return y;
}

Tensor LinearLayer::backward(const Tensor& grad_out) {
  if (!input_cache_) throw StateError("linear: backward called before forward");
  const Tensor& x = *input_cache_;
  if (grad_out.rows() != x.rows() || grad_out.cols() != out_features()) {
    throw DimensionError("linear: grad_out " + grad_out.shape_string() +
                         " does not match output [" + std::to_string(x.rows()) + "x" +
                         std::to_string(out_features()) + "]");
  }
  Tensor gw = matmul_at(grad_out, x);
  for (std::size_t i = 0; i < gw.size(); ++i) grad_weight_[i] += gw[i];
  Tensor gb = column_sum(grad_out);
  for (std::size_t i = 0; i < gb.size(); ++i) grad_bias_[i] += gb[i];
  return matmul(grad_out, weight_);
}

void LinearLayer::zero_grads() {
  grad_weight_.fill(0.0);
  grad_bias_.fill(0.0);
}

void LinearLayer::collect_params(std::vector<ParamRef>& out) {
  out.push_back({&weight_, &grad_weight_});
  out.push_back({&bias_, &grad_bias_});
}

// ------------------------------------------------------------- BatchNorm

BatchNormLayer::BatchNormLayer(std::size_t features, double eps, double momentum)
    : gamma_(1, features, 1.0),
      beta_(1, features, 0.0),
      running_mean_(1, features, 0.0),
      running_var_(1, features, 1.0),
      grad_gamma_(1, features, 0.0),
      grad_beta_(1, features, 0.0),
      eps_(eps),
      momentum_(momentum) {}

Tensor BatchNormLayer::apply_running(const Tensor& x) const {
  if (x.cols() != features()) {
    throw DimensionError("batchnorm: input " + x.shape_string() + " has wrong width for " +
                         std::to_string(features()) + " features");
  }
  Tensor y(x.rows(), x.cols());
  for (std::size_t j = 0; j < x.cols(); ++j) {
    const double inv = 1.0 / std::sqrt(running_var_[j] + eps_);
    for (std::size_t i = 0; i < x.rows(); ++i) {
      y(i, j) = gamma_[j] * (x(i, j) - running_mean_[j]) * inv + beta_[j];
    }
  }
  return y;
}

Tensor BatchNormLayer::forward(const Tensor& x, Mode mode) {
  if (mode != Mode::Train) {
    has_cache_ = false;
    return apply_running(x);
  }
  if (x.cols() != features()) {
    throw DimensionError("batchnorm: input " + x.shape_string() + " has wrong width for " +
                         std::to_string(features()) + " features");
  }
  const std::size_t batch = x.rows();
  if (batch < 2) {
    throw BatchSizeError("batchnorm: Train mode needs a batch of at least 2 rows, got " +
                         std::to_string(batch));
  }
  const std::size_t n = features();
  batch_mean_ = Tensor(1, n);
  batch_var_ = Tensor(1, n);
  inv_std_ = Tensor(1, n);
  x_hat_ = Tensor(batch, n);
  Tensor y(batch, n);

  for (std::size_t i = 0; i < batch; ++i) {
    for (std::size_t j = 0; j < n; ++j) batch_mean_[j] += x(i, j);
  }
  for (std::size_t j = 0; j < n; ++j) batch_mean_[j] /= static_cast<double>(batch);
  for (std::size_t i = 0; i < batch; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      const double d = x(i, j) - batch_mean_[j];
      batch_var_[j] += d * d;
    }
  }
  for (std::size_t j = 0; j < n; ++j) {
    batch_var_[j] /= static_cast<double>(batch);
    inv_std_[j] = 1.0 / std::sqrt(batch_var_[j] + eps_);
  }
  for (std::size_t i = 0; i < batch; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      const double xh = (x(i, j) - batch_mean_[j]) * inv_std_[j];
      x_hat_(i, j) = xh;
      y(i, j) = gamma_[j] * xh + beta_[j];
    }
  }

  const double unbias = static_cast<double>(batch) / static_cast<double>(batch - 1);
  for (std::size_t j = 0; j < n; ++j) {
    running_mean_[j] = (1.0 - momentum_) * running_mean_[j] + momentum_ * batch_mean_[j];
    running_var_[j] = (1.0 - momentum_) * running_var_[j] + momentum_ * batch_var_[j] * unbias;
  }
  has_cache_ = true;
  return y;
}

Tensor BatchNormLayer::backward(const Tensor& grad_out) {
  if (!has_cache_) {
    throw StateError("batchnorm: backward requires a preceding Train-mode forward");
  }
  if (!grad_out.same_shape(x_hat_)) {
    throw DimensionError("batchnorm: grad_out " + grad_out.shape_string() +
                         " does not match cached batch " + x_hat_.shape_string());
  }
  const std::size_t batch = grad_out.rows();
  const std::size_t n = features();
  const double inv_batch = 1.0 / static_cast<double>(batch);

  Tensor sum_dy(1, n), sum_dy_xhat(1, n);
  for (std::size_t i = 0; i < batch; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      sum_dy[j] += grad_out(i, j);
      sum_dy_xhat[j] += grad_out(i, j) * x_hat_(i, j);
    }
  }
  for (std::size_t j = 0; j < n; ++j) {
    grad_beta_[j] += sum_dy[j];
    grad_gamma_[j] += sum_dy_xhat[j];
  }

  // dx = gamma * inv_std / B * (B dy - sum(dy) - x_hat * sum(dy * x_hat))
  Tensor grad_in(batch, n);
  for (std::size_t i = 0; i < batch; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      const double scale_j = gamma_[j] * inv_std_[j] * inv_batch;
      grad_in(i, j) = scale_j * (static_cast<double>(batch) * grad_out(i, j) - sum_dy[j] -
                                 x_hat_(i, j) * sum_dy_xhat[j]);
    }
  }
  return grad_in;
}

void BatchNormLayer::zero_grads() {
  grad_gamma_.fill(0.0);
  grad_beta_.fill(0.0);
}

void BatchNormLayer::collect_params(std::vector<ParamRef>& out) {
  out.push_back({&gamma_, &grad_gamma_});
  out.push_back({&beta_, &grad_beta_});
}

// --------------------------------------------------------------- Dropout

DropoutLayer::DropoutLayer(double p) : p_(p) {
  if (!(p >= 0.0 && p < 1.0)) {
    throw ParameterError("dropout: p must lie in [0, 1), got " + std::to_string(p));
  }
}

Tensor DropoutLayer::forward(const Tensor& x, Mode mode, Rng& rng) {
  if (mode == Mode::Eval) {
    if (!frozen_) mask_cache_.reset();
    return x;
  }
  const double keep = 1.0 - p_;
  Tensor mask;
  if (mode == Mode::Train && frozen_ && mask_cache_ && mask_cache_->same_shape(x)) {
    mask = *mask_cache_;
  } else {
    mask = bernoulli_mask(rng, keep, x.rows(), x.cols());
  }
  Tensor y(x.rows(), x.cols());
  const double inv_keep = 1.0 / keep;
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = x[i] * mask[i] * inv_keep;
  if (mode == Mode::Train) mask_cache_ = std::move(mask);
  return y;
}

Tensor DropoutLayer::sample(const Tensor& x, Rng& rng) const {
  const double keep = 1.0 - p_;
  const Tensor mask = bernoulli_mask(rng, keep, x.rows(), x.cols());
  Tensor y(x.rows(), x.cols());
  const double inv_keep = 1.0 / keep;
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = x[i] * mask[i] * inv_keep;
  return y;
}

Tensor DropoutLayer::backward(const Tensor& grad_out) const {
  if (!mask_cache_) throw StateError("dropout: backward called before a Train forward");
  if (!grad_out.same_shape(*mask_cache_)) {
    throw DimensionError("dropout: grad_out " + grad_out.shape_string() +
                         " does not match mask " + mask_cache_->shape_string());
  }
  const double inv_keep = 1.0 / (1.0 - p_);
  Tensor g(grad_out.rows(), grad_out.cols());
  for (std::size_t i = 0; i < g.size(); ++i) g[i] = grad_out[i] * (*mask_cache_)[i] * inv_keep;
  return g;
}

// ------------------------------------------------------------------ ReLU

Tensor ReluLayer::apply(const Tensor& x) {
  Tensor y = x;
  for (double& v : y.data()) v = v > 0.0 ? v : 0.0;
  return y;
}

Tensor ReluLayer::forward(const Tensor& x) {
  input_cache_ = x;
  return apply(x);
}

Tensor ReluLayer::backward(const Tensor& grad_out) const {
  if (!input_cache_) throw StateError("relu: backward called before forward");
  if (!grad_out.same_shape(*input_cache_)) {
    throw DimensionError("relu: grad_out " + grad_out.shape_string() +
                         " does not match input " + input_cache_->shape_string());
  }
  Tensor g = grad_out;
  for (std::size_t i = 0; i < g.size(); ++i) {
    if (!((*input_cache_)[i] > 0.0)) g[i] = 0.0;
  }
  return g;
}

// ---------------------------------------------------------------- Losses

Tensor softmax(const Tensor& logits) {
  Tensor p(logits.rows(), logits.cols());
  for (std::size_t i = 0; i < logits.rows(); ++i) {
    auto in = logits.row(i);
    auto out = p.row(i);
    const double mx = *std::max_element(in.begin(), in.end());
    double sum = 0.0;
    for (std::size_t c = 0; c < in.size(); ++c) {
      out[c] = std::exp(in[c] - mx);
      sum += out[c];
    }
    for (double& v : out) v /= sum;
  }
  return p;
}

LossResult softmax_cross_entropy(const Tensor& logits, std::span<const int> labels) {
  const std::size_t batch = logits.rows();
  const std::size_t classes = logits.cols();
  if (labels.size() != batch) {
    throw DimensionError("cross-entropy: " + std::to_string(labels.size()) + " labels for " +
                         std::to_string(batch) + " logit rows");
  }
  if (batch == 0) throw DimensionError("cross-entropy: empty batch");
  LossResult result{0.0, Tensor(batch, classes)};
  const double inv_batch = 1.0 / static_cast<double>(batch);
  for (std::size_t i = 0; i < batch; ++i) {
    const int label = labels[i];
    if (label < 0 || static_cast<std::size_t>(label) >= classes) {
      throw LabelError("cross-entropy: label " + std::to_string(label) + " at row " +
                       std::to_string(i) + " outside [0, " + std::to_string(classes) + ")");
    }
    auto z = logits.row(i);
    const double mx = *std::max_element(z.begin(), z.end());
    double sum = 0.0;
    for (double v : z) sum += std::exp(v - mx);
    const double log_sum = std::log(sum);
    // -log p_label = log(sum exp(z - mx)) - (z_label - mx)
    result.loss += log_sum - (z[static_cast<std::size_t>(label)] - mx);
    auto g = result.grad_logits.row(i);
    for (std::size_t c = 0; c < classes; ++c) {
      const double p = std::exp(z[c] - mx - log_sum);
      g[c] = (p - (static_cast<std::size_t>(label) == c ? 1.0 : 0.0)) * inv_batch;
    }
  }
  result.loss *= inv_batch;
  return result;
}

// ------------------------------------------------------------- Linearity

namespace {

bool close_rel(const Tensor& a, const Tensor& b, double tol) {
  if (!a.same_shape(b)) return false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double denom = std::max({std::abs(a[i]), std::abs(b[i]), 1.0});
    if (std::abs(a[i] - b[i]) / denom > tol) return false;
  }
  return true;
}

}  // namespace

bool check_linearity(const LinearLayer& layer, const Tensor& x, const Tensor& y, double a,
                     double rel_tol) {
  LinearLayer f = layer;
  f.bias().fill(0.0);
  const Tensor additive_lhs = f.apply(add(x, y));
  const Tensor additive_rhs = add(f.apply(x), f.apply(y));
  const Tensor homog_lhs = f.apply(scale(x, a));
  const Tensor homog_rhs = scale(f.apply(x), a);
  return close_rel(additive_lhs, additive_rhs, rel_tol) && close_rel(homog_lhs, homog_rhs, rel_tol);
}

}  // namespace icmlp
