// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "icmlp/layers.hpp"
#include "icmlp/tensor.hpp"

namespace icmlp {

/// Architecture ablations. no_ic removes both batch norm and dropout and
/// therefore subsumes no_dropout.
struct AblationFlags {
  bool no_dropout = false;
  bool no_ic = false;
  bool no_skip = false;

  bool uses_batchnorm() const { return !no_ic; }
  bool uses_dropout() const { return !no_ic && !no_dropout; }

  std::uint8_t bits() const;
  static AblationFlags from_bits(std::uint8_t bits);
  /// "full", "no_dropout", "no_ic", "no_skip", "no_ic+no_skip", ...
  std::string name() const;
  static AblationFlags from_name(const std::string& name);

  friend bool operator==(const AblationFlags&, const AblationFlags&) = default;
};

/// Batch norm followed by dropout, the whitening stage placed in front of a
/// fully connected layer. Either part may be structurally absent.
struct IcStage {
  std::optional<BatchNormLayer> bn;
  std::optional<DropoutLayer> dropout;

  Tensor forward(const Tensor& x, Mode mode, Rng& rng, const AblationFlags& flags);
  Tensor infer(const Tensor& x, Mode mode, Rng* rng, const AblationFlags& flags) const;
  Tensor backward(const Tensor& grad_out);
  void clear_caches();

 private:
  bool applied_bn_ = false;
  bool applied_dropout_ = false;
};

/// y = ReLU(W2 IC(ReLU(W1 IC(x))) + x). The first block of a network has no
/// leading IC stage so raw inputs reach W1 untouched.
class ResidualBlock {
 public:
  ResidualBlock() = default;
  ResidualBlock(std::size_t width, bool leading_ic, double dropout_p,
                const AblationFlags& structure, double bn_eps, double bn_momentum);

  std::size_t width() const { return fc1.in_features(); }

  Tensor forward(const Tensor& x, Mode mode, Rng& rng, const AblationFlags& flags);
  Tensor infer(const Tensor& x, Mode mode, Rng* rng, const AblationFlags& flags) const;
  Tensor backward(const Tensor& grad_out);
  void clear_caches();

  IcStage ic1;
  LinearLayer fc1;
  IcStage ic2;
  LinearLayer fc2;

 private:
  ReluLayer relu1_;
  ReluLayer relu_out_;
  bool applied_skip_ = true;
};

/// y = ReLU(W IC(x)) with W of shape (N/2) x N.
class DownsampleBlock {
 public:
  DownsampleBlock() = default;
  DownsampleBlock(std::size_t in_width, double dropout_p, const AblationFlags& structure,
                  double bn_eps, double bn_momentum);

  std::size_t in_width() const { return fc.in_features(); }
  std::size_t out_width() const { return fc.out_features(); }

  Tensor forward(const Tensor& x, Mode mode, Rng& rng, const AblationFlags& flags);
  Tensor infer(const Tensor& x, Mode mode, Rng* rng, const AblationFlags& flags) const;
  Tensor backward(const Tensor& grad_out);
  void clear_caches();

  IcStage ic;
  LinearLayer fc;

 private:
  ReluLayer relu_;
};

struct BlockPair {
  ResidualBlock residual;
  DownsampleBlock downsample;
};

struct ModelShape {
  std::size_t input_dim = 512;
  std::size_t n_classes = 2;
  std::size_t n_residual = 4;
  std::size_t n_downsample = 4;
  double dropout_p = 0.05;
  AblationFlags ablation;
  double bn_eps = BatchNormLayer::kDefaultEps;
  double bn_momentum = BatchNormLayer::kDefaultMomentum;
};

/// Alternating residual/downsample pairs followed by a linear head:
///   input_dim -> Res(w) -> Down(w -> w/2) -> Res(w/2) -> ... -> head.
/// Softmax is not part of the model; it lives in the loss.
class IcMlpModel {
 public:
  IcMlpModel() = default;

  const ModelShape& shape() const { return shape_; }
  std::size_t input_dim() const { return shape_.input_dim; }
  std::size_t n_classes() const { return shape_.n_classes; }
  const AblationFlags& ablation() const { return shape_.ablation; }
  std::size_t final_width() const { return head.in_features(); }

  Mode mode() const { return mode_; }
  void set_mode(Mode mode);

  /// Forward in the current mode. Train caches activations for backward and
  /// consumes rng; Eval ignores rng.
  Tensor forward(const Tensor& x, Rng& rng);
  /// Const Eval-mode forward; safe to call concurrently.
  Tensor predict(const Tensor& x) const;
  /// Const forward with dropout active and batch norm on running stats.
  Tensor sample_mc(const Tensor& x, Rng& rng) const;

  /// Backpropagates dL/dlogits, accumulating every parameter gradient.
  /// Returns dL/dinput.
  Tensor backward(const Tensor& grad_logits);

  void zero_grads();
  std::vector<ParamRef> parameters();
  std::size_t param_count() const;
  /// Freezes dropout masks so repeated Train forwards are deterministic.
  void set_dropout_frozen(bool frozen);
  /// Drops cached activations (and unfrozen dropout masks).
  void clear_caches();

  std::vector<BlockPair> blocks;
  LinearLayer head;

 private:
  friend IcMlpModel build_model(const ModelShape& shape, Rng& rng);
  friend IcMlpModel build_model_skeleton(const ModelShape& shape);

  void check_input(const Tensor& x) const;

  ModelShape shape_;
  Mode mode_ = Mode::Eval;
  bool has_forward_ = false;
};

/// Validates the shape and allocates every layer with zero weights.
IcMlpModel build_model_skeleton(const ModelShape& shape);
/// Builds the model and Kaiming-initializes linear weights in forward order;
/// biases start at zero. Throws ConfigError when n_residual != n_downsample
/// or the width would halve below 1.
IcMlpModel build_model(const ModelShape& shape, Rng& rng);

/// Copies every parameter and running statistic from `src` into `dst`.
/// Throws ConfigError unless both have the same architecture.
void copy_state(const IcMlpModel& src, IcMlpModel& dst);

std::vector<std::uint8_t> serialize_model(const IcMlpModel& model);
IcMlpModel deserialize_model(const std::vector<std::uint8_t>& bytes);
void save_model(const IcMlpModel& model, const std::filesystem::path& path);
IcMlpModel load_model(const std::filesystem::path& path);

}  // namespace icmlp
