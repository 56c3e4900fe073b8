// SPDX-License-Identifier: Apache-2.0
#include "icmlp/optim.hpp"

#include <cmath>
#include <string>

#include "icmlp/errors.hpp"

namespace icmlp {

double kaiming_bound(std::size_t fan_in) {
  if (fan_in == 0) throw ParameterError("kaiming init: fan_in must be at least 1");
  return std::sqrt(6.0 / static_cast<double>(fan_in));
}

Tensor kaiming_uniform_init(Rng& rng, std::size_t fan_in, std::size_t rows, std::size_t cols) {
  const double bound = kaiming_bound(fan_in);
  return uniform(rng, -bound, bound, rows, cols);
}

void AdamW::step(std::span<const ParamRef> params) {
  if (m_.empty()) {
    m_.reserve(params.size());
    v_.reserve(params.size());
    for (const ParamRef& p : params) {
      m_.emplace_back(p.value->rows(), p.value->cols());
      v_.emplace_back(p.value->rows(), p.value->cols());
    }
  }
  if (m_.size() != params.size()) {
    throw DimensionError("adamw: parameter list changed size from " + std::to_string(m_.size()) +
                         " to " + std::to_string(params.size()));
  }
  for (std::size_t k = 0; k < params.size(); ++k) {
    const Tensor& w = *params[k].value;
    const Tensor& g = *params[k].grad;
    if (!w.same_shape(g) || !w.same_shape(m_[k])) {
      throw DimensionError("adamw: parameter " + std::to_string(k) + " shape " +
                           w.shape_string() + ", grad " + g.shape_string() + ", moments " +
                           m_[k].shape_string());
    }
  }

  ++step_;
  const double b1 = options_.beta1, b2 = options_.beta2;
  const double correction1 = 1.0 - std::pow(b1, static_cast<double>(step_));
  const double correction2 = 1.0 - std::pow(b2, static_cast<double>(step_));
  const double lr = options_.lr, eps = options_.eps;
  // Decay is applied as a multiplicative shrink, separate from the moments.
  const double shrink = 1.0 - options_.lr * options_.weight_decay;

  for (std::size_t k = 0; k < params.size(); ++k) {
    Tensor& w = *params[k].value;
    const Tensor& g = *params[k].grad;
    Tensor& m = m_[k];
    Tensor& v = v_[k];
    for (std::size_t i = 0; i < w.size(); ++i) {
      m[i] = b1 * m[i] + (1.0 - b1) * g[i];
      v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
      const double m_hat = m[i] / correction1;
      const double v_hat = v[i] / correction2;
      w[i] = w[i] * shrink - lr * (m_hat / (std::sqrt(v_hat) + eps));
    }
  }
}

void AdamW::step(Tensor& param, const Tensor& grad) {
  // The gradient is only read; the ParamRef field is non-const by type.
  ParamRef ref{&param, const_cast<Tensor*>(&grad)};
  step(std::span<const ParamRef>(&ref, 1));
}

double ExponentialLr::lr_at_epoch(std::size_t epoch) const {
  return initial_lr * std::pow(gamma, static_cast<double>(epoch));
}

}  // namespace icmlp
