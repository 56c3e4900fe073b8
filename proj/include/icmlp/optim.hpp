// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "icmlp/layers.hpp"
#include "icmlp/tensor.hpp"

namespace icmlp {

/// He/Kaiming uniform initialization for ReLU networks: U(-b, b) with
/// b = sqrt(6 / fan_in).
Tensor kaiming_uniform_init(Rng& rng, std::size_t fan_in, std::size_t rows, std::size_t cols);
double kaiming_bound(std::size_t fan_in);

struct AdamWOptions {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
};

/// Adam with decoupled weight decay:
///   m <- b1 m + (1 - b1) g,  v <- b2 v + (1 - b2) g^2
///   w <- w (1 - lr lambda) - lr m_hat / (sqrt(v_hat) + eps)
/// Moments are allocated lazily on the first step and keyed by position in
/// the parameter list, so the list must keep its order between steps.
class AdamW {
 public:
  explicit AdamW(AdamWOptions options = {}) : options_(options) {}

  void step(std::span<const ParamRef> params);
  /// Single-tensor form used by tests and small drivers.
  void step(Tensor& param, const Tensor& grad);

  void set_lr(double lr) { options_.lr = lr; }
  double lr() const { return options_.lr; }
  const AdamWOptions& options() const { return options_; }
  std::size_t step_count() const { return step_; }
  const std::vector<Tensor>& first_moments() const { return m_; }
  const std::vector<Tensor>& second_moments() const { return v_; }

 private:
  AdamWOptions options_;
  std::size_t step_ = 0;
  std::vector<Tensor> m_;
  std::vector<Tensor> v_;
};

/// lr(epoch) = initial_lr * gamma^epoch. Stateless; epoch counts from 0.
struct ExponentialLr {
  double initial_lr;
  double gamma;

  double lr_at_epoch(std::size_t epoch) const;
};

}  // namespace icmlp
