// SPDX-License-Identifier: Apache-2.0
#include "icmlp/model.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>
#include <sstream>

#include "icmlp/errors.hpp"
#include "icmlp/optim.hpp"

namespace icmlp {

// -------------------------------------------------------------- Ablation

std::uint8_t AblationFlags::bits() const {
  return static_cast<std::uint8_t>((no_dropout ? 1u : 0u) | (no_ic ? 2u : 0u) |
                                   (no_skip ? 4u : 0u));
}

AblationFlags AblationFlags::from_bits(std::uint8_t bits) {
  if (bits & ~0x7u) {
    throw FormatError("ablation bitfield has unknown bits set: " + std::to_string(bits));
  }
  return {(bits & 1u) != 0, (bits & 2u) != 0, (bits & 4u) != 0};
}

std::string AblationFlags::name() const {
  std::string out;
  auto append = [&out](const char* part) {
    if (!out.empty()) out += '+';
    out += part;
  };
  if (no_dropout) append("no_dropout");
  if (no_ic) append("no_ic");
  if (no_skip) append("no_skip");
  return out.empty() ? "full" : out;
}

AblationFlags AblationFlags::from_name(const std::string& name) {
  AblationFlags flags;
  if (name == "full") return flags;
  std::istringstream in(name);
  std::string part;
  while (std::getline(in, part, '+')) {
    if (part == "no_dropout") {
      flags.no_dropout = true;
    } else if (part == "no_ic") {
      flags.no_ic = true;
    } else if (part == "no_skip") {
      flags.no_skip = true;
    } else {
      throw ConfigError("unknown ablation variant '" + part + "' in '" + name + "'");
    }
  }
  return flags;
}

// --------------------------------------------------------------- IcStage

namespace {

IcStage make_ic(std::size_t width, double dropout_p, const AblationFlags& structure,
                double eps, double momentum) {
  IcStage ic;
  if (structure.uses_batchnorm()) ic.bn.emplace(width, eps, momentum);
  if (structure.uses_dropout()) ic.dropout.emplace(dropout_p);
  return ic;
}

void check_width(const char* what, const Tensor& x, std::size_t width) {
  if (x.cols() != width) {
    throw DimensionError(std::string(what) + ": input " + x.shape_string() +
                         " does not match block width " + std::to_string(width));
  }
}

}  // namespace

Tensor IcStage::forward(const Tensor& x, Mode mode, Rng& rng, const AblationFlags& flags) {
  applied_bn_ = bn.has_value() && flags.uses_batchnorm();
  applied_dropout_ = dropout.has_value() && flags.uses_dropout();
  Tensor h = applied_bn_ ? bn->forward(x, mode) : x;
  if (applied_dropout_) h = dropout->forward(h, mode, rng);
  return h;
}

Tensor IcStage::infer(const Tensor& x, Mode mode, Rng* rng, const AblationFlags& flags) const {
  Tensor h = (bn && flags.uses_batchnorm()) ? bn->apply_running(x) : x;
  if (dropout && flags.uses_dropout() && mode == Mode::MonteCarlo) {
    if (rng == nullptr) throw StateError("MC-dropout inference requires a generator");
    h = dropout->sample(h, *rng);
  }
  return h;
}

Tensor IcStage::backward(const Tensor& grad_out) {
  Tensor g = applied_dropout_ ? dropout->backward(grad_out) : grad_out;
  if (applied_bn_) g = bn->backward(g);
  return g;
}

void IcStage::clear_caches() {
  if (bn) bn->clear_cache();
  if (dropout) dropout->clear_cache();
}

// ---------------------------------------------------------- ResidualBlock

ResidualBlock::ResidualBlock(std::size_t width, bool leading_ic, double dropout_p,
                             const AblationFlags& structure, double bn_eps, double bn_momentum)
    : fc1(width, width), fc2(width, width) {
  if (leading_ic) ic1 = make_ic(width, dropout_p, structure, bn_eps, bn_momentum);
  ic2 = make_ic(width, dropout_p, structure, bn_eps, bn_momentum);
}

Tensor ResidualBlock::forward(const Tensor& x, Mode mode, Rng& rng, const AblationFlags& flags) {
  if (mode != Mode::Train) return infer(x, mode, &rng, flags);
  check_width("residual block", x, width());
  Tensor h = ic1.forward(x, mode, rng, flags);
  h = relu1_.forward(fc1.forward(h));
  h = fc2.forward(ic2.forward(h, mode, rng, flags));
  applied_skip_ = !flags.no_skip;
  if (applied_skip_) h = add(h, x);
  return relu_out_.forward(h);
}

Tensor ResidualBlock::infer(const Tensor& x, Mode mode, Rng* rng,
                            const AblationFlags& flags) const {
  check_width("residual block", x, width());
  Tensor h = ic1.infer(x, mode, rng, flags);
  h = ReluLayer::apply(fc1.apply(h));
  h = fc2.apply(ic2.infer(h, mode, rng, flags));
  if (!flags.no_skip) h = add(h, x);
  return ReluLayer::apply(h);
}

Tensor ResidualBlock::backward(const Tensor& grad_out) {
  const Tensor g_join = relu_out_.backward(grad_out);
  Tensor g = ic2.backward(fc2.backward(g_join));
  g = ic1.backward(fc1.backward(relu1_.backward(g)));
  // The skip path carries the join gradient straight to the input.
  if (applied_skip_) g = add(g, g_join);
  return g;
}

void ResidualBlock::clear_caches() {
  ic1.clear_caches();
  ic2.clear_caches();
  fc1.clear_cache();
  fc2.clear_cache();
  relu1_.clear_cache();
  relu_out_.clear_cache();
}

// -------------------------------------------------------- DownsampleBlock

DownsampleBlock::DownsampleBlock(std::size_t in_width, double dropout_p,
                                 const AblationFlags& structure, double bn_eps,
                                 double bn_momentum)
    : ic(make_ic(in_width, dropout_p, structure, bn_eps, bn_momentum)),
      fc(in_width, in_width / 2) {}

Tensor DownsampleBlock::forward(const Tensor& x, Mode mode, Rng& rng,
                                const AblationFlags& flags) {
  if (mode != Mode::Train) return infer(x, mode, &rng, flags);
  check_width("downsample block", x, in_width());
  return relu_.forward(fc.forward(ic.forward(x, mode, rng, flags)));
}

Tensor DownsampleBlock::infer(const Tensor& x, Mode mode, Rng* rng,
                              const AblationFlags& flags) const {
  check_width("downsample block", x, in_width());
  return ReluLayer::apply(fc.apply(ic.infer(x, mode, rng, flags)));
}

Tensor DownsampleBlock::backward(const Tensor& grad_out) {
  return ic.backward(fc.backward(relu_.backward(grad_out)));
}

void DownsampleBlock::clear_caches() {
  ic.clear_caches();
  fc.clear_cache();
  relu_.clear_cache();
}

// ---------------------------------------------------------------- Model

IcMlpModel build_model_skeleton(const ModelShape& shape) {
  if (shape.n_residual != shape.n_downsample) {
    throw ConfigError("n_residual (" + std::to_string(shape.n_residual) +
                      ") must equal n_downsample (" + std::to_string(shape.n_downsample) + ")");
  }
  if (shape.input_dim == 0) throw ConfigError("input_dim must be at least 1");
  if (shape.n_classes < 2) throw ConfigError("n_classes must be at least 2");
  if (!(shape.dropout_p >= 0.0 && shape.dropout_p < 1.0)) {
    throw ConfigError("dropout_p must lie in [0, 1), got " + std::to_string(shape.dropout_p));
  }
  std::size_t width = shape.input_dim;
  for (std::size_t i = 0; i < shape.n_downsample; ++i) {
    if (width / 2 < 1) {
      throw ConfigError("input_dim " + std::to_string(shape.input_dim) + " cannot be halved " +
                        std::to_string(shape.n_downsample) + " times");
    }
    width /= 2;
  }

  IcMlpModel model;
  model.shape_ = shape;
  width = shape.input_dim;
  for (std::size_t i = 0; i < shape.n_residual; ++i) {
    const bool leading_ic = i != 0;
    model.blocks.push_back(
        {ResidualBlock(width, leading_ic, shape.dropout_p, shape.ablation, shape.bn_eps,
                       shape.bn_momentum),
         DownsampleBlock(width, shape.dropout_p, shape.ablation, shape.bn_eps,
                         shape.bn_momentum)});
    width /= 2;
  }
  model.head = LinearLayer(width, shape.n_classes);
  return model;
}

IcMlpModel build_model(const ModelShape& shape, Rng& rng) {
  IcMlpModel model = build_model_skeleton(shape);
  auto init = [&rng](LinearLayer& layer) {
    layer.weight() = kaiming_uniform_init(rng, layer.in_features(), layer.out_features(),
                                          layer.in_features());
  };
  for (BlockPair& pair : model.blocks) {
    init(pair.residual.fc1);
    init(pair.residual.fc2);
    init(pair.downsample.fc);
  }
  init(model.head);
  return model;
}

void IcMlpModel::set_mode(Mode mode) {
  mode_ = mode;
  if (mode != Mode::Train) has_forward_ = false;
}

void IcMlpModel::check_input(const Tensor& x) const {
  if (x.cols() != shape_.input_dim) {
    throw DimensionError("model: input " + x.shape_string() + " does not match input_dim " +
                         std::to_string(shape_.input_dim));
  }
}

Tensor IcMlpModel::forward(const Tensor& x, Rng& rng) {
  if (mode_ == Mode::Eval) return predict(x);
  if (mode_ == Mode::MonteCarlo) return sample_mc(x, rng);
  check_input(x);
  Tensor h = x;
  for (BlockPair& pair : blocks) {
    h = pair.residual.forward(h, mode_, rng, shape_.ablation);
    h = pair.downsample.forward(h, mode_, rng, shape_.ablation);
  }
  has_forward_ = true;
  return head.forward(h);
}

Tensor IcMlpModel::predict(const Tensor& x) const {
  check_input(x);
  Tensor h = x;
  for (const BlockPair& pair : blocks) {
    h = pair.residual.infer(h, Mode::Eval, nullptr, shape_.ablation);
    h = pair.downsample.infer(h, Mode::Eval, nullptr, shape_.ablation);
  }
  return head.apply(h);
}

Tensor IcMlpModel::sample_mc(const Tensor& x, Rng& rng) const {
  check_input(x);
  Tensor h = x;
  for (const BlockPair& pair : blocks) {
    h = pair.residual.infer(h, Mode::MonteCarlo, &rng, shape_.ablation);
    h = pair.downsample.infer(h, Mode::MonteCarlo, &rng, shape_.ablation);
  }
  return head.apply(h);
}

Tensor IcMlpModel::backward(const Tensor& grad_logits) {
  if (!has_forward_) throw StateError("model: backward requires a preceding Train-mode forward");
  Tensor g = head.backward(grad_logits);
  for (auto it = blocks.rbegin(); it != blocks.rend(); ++it) {
    g = it->downsample.backward(g);
    g = it->residual.backward(g);
  }
  return g;
}

void IcMlpModel::zero_grads() {
  for (ParamRef& p : parameters()) p.grad->fill(0.0);
}

std::vector<ParamRef> IcMlpModel::parameters() {
  std::vector<ParamRef> out;
  auto collect_ic = [&out](IcStage& ic) {
    if (ic.bn) ic.bn->collect_params(out);
  };
  for (BlockPair& pair : blocks) {
    collect_ic(pair.residual.ic1);
    pair.residual.fc1.collect_params(out);
    collect_ic(pair.residual.ic2);
    pair.residual.fc2.collect_params(out);
    collect_ic(pair.downsample.ic);
    pair.downsample.fc.collect_params(out);
  }
  head.collect_params(out);
  return out;
}

std::size_t IcMlpModel::param_count() const {
  std::size_t total = 0;
  for (const ParamRef& p : const_cast<IcMlpModel*>(this)->parameters()) total += p.value->size();
  return total;
}

void IcMlpModel::set_dropout_frozen(bool frozen) {
  auto apply = [frozen](IcStage& ic) {
    if (ic.dropout) ic.dropout->set_frozen(frozen);
  };
  for (BlockPair& pair : blocks) {
    apply(pair.residual.ic1);
    apply(pair.residual.ic2);
    apply(pair.downsample.ic);
  }
}

void IcMlpModel::clear_caches() {
  for (BlockPair& pair : blocks) {
    pair.residual.clear_caches();
    pair.downsample.clear_caches();
  }
  head.clear_cache();
  has_forward_ = false;
}

// -------------------------------------------------------- Serialization
//
// Little-endian layout:
//   "ICMLP\0" | u16 version=1 | u32 input_dim | u32 n_classes | u32 n_res |
//   u32 n_down | u8 ablation bits | f64 dropout_p | f64 eps | f64 momentum
// then f64 arrays in forward traversal order. Residual block: BN1 (gamma,
// beta, running mean, running var) if present, FC1 W (row-major) and b, BN2,
// FC2; downsample: BN, FC; finally the head W and b.

namespace {

constexpr char kMagic[6] = {'I', 'C', 'M', 'L', 'P', '\0'};
constexpr std::uint16_t kVersion = 1;

class ByteWriter {
 public:
  void bytes(const void* data, std::size_t n) {
    const auto* p = static_cast<const std::uint8_t*>(data);
    out_.insert(out_.end(), p, p + n);
  }
  template <class T>
  void uint(T value) {
    for (std::size_t i = 0; i < sizeof(T); ++i) {
      out_.push_back(static_cast<std::uint8_t>(value >> (8 * i)));
    }
  }
  void f64(double value) { uint(std::bit_cast<std::uint64_t>(value)); }
  void tensor(const Tensor& t) {
    for (double v : t.data()) f64(v);
  }
  std::vector<std::uint8_t> take() { return std::move(out_); }

 private:
  std::vector<std::uint8_t> out_;
};

class ByteReader {
 public:
  explicit ByteReader(const std::vector<std::uint8_t>& in) : in_(in) {}

  std::size_t offset() const { return pos_; }
  bool at_end() const { return pos_ == in_.size(); }

  void expect(std::size_t n, const char* what) {
    if (in_.size() - pos_ < n) {
      throw FormatError("model file truncated at byte offset " + std::to_string(pos_) +
                        " while reading " + what);
    }
  }
  template <class T>
  T uint(const char* what) {
    expect(sizeof(T), what);
    T value = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i) {
      value |= static_cast<T>(static_cast<T>(in_[pos_ + i]) << (8 * i));
    }
    pos_ += sizeof(T);
    return value;
  }
  double f64(const char* what) { return std::bit_cast<double>(uint<std::uint64_t>(what)); }
  void tensor(Tensor& t, const char* what) {
    expect(t.size() * 8, what);
    for (double& v : t.data()) v = f64(what);
  }

 private:
  const std::vector<std::uint8_t>& in_;
  std::size_t pos_ = 0;
};

template <class Visitor>
void visit_arrays(Visitor&& visit, auto& model) {
  auto visit_ic = [&](auto& ic) {
    if (ic.bn) {
      visit(ic.bn->gamma(), "batchnorm gamma");
      visit(ic.bn->beta(), "batchnorm beta");
      visit(ic.bn->running_mean(), "batchnorm running mean");
      visit(ic.bn->running_var(), "batchnorm running var");
    }
  };
  auto visit_fc = [&](auto& fc) {
    visit(fc.weight(), "linear weight");
    visit(fc.bias(), "linear bias");
  };
  for (auto& pair : model.blocks) {
    visit_ic(pair.residual.ic1);
    visit_fc(pair.residual.fc1);
    visit_ic(pair.residual.ic2);
    visit_fc(pair.residual.fc2);
    visit_ic(pair.downsample.ic);
    visit_fc(pair.downsample.fc);
  }
  visit_fc(model.head);
}

// Number of f64 values following the header, computed without allocating.
// Returns 0 for shapes build_model_skeleton would reject.
std::uint64_t array_value_count(const ModelShape& s) {
  if (s.n_residual != s.n_downsample || s.input_dim == 0 || s.n_classes < 2) return 0;
  if (s.input_dim > (1u << 24) || s.n_classes > (1u << 24)) return 0;
  const std::uint64_t bn_values = s.ablation.uses_batchnorm() ? 4 : 0;
  std::uint64_t total = 0;
  std::uint64_t width = s.input_dim;
  for (std::size_t i = 0; i < s.n_residual; ++i) {
    if (width / 2 < 1) return 0;
    const std::uint64_t leading = i == 0 ? 0 : 1;
    total += (leading + 1) * bn_values * width + 2 * (width * width + width);
    total += bn_values * width + (width / 2) * width + width / 2;
    width /= 2;
  }
  return total + s.n_classes * width + s.n_classes;
}

bool same_architecture(const ModelShape& a, const ModelShape& b) {
  return a.input_dim == b.input_dim && a.n_classes == b.n_classes &&
         a.n_residual == b.n_residual && a.n_downsample == b.n_downsample &&
         a.ablation == b.ablation;
}

std::uint32_t narrow_u32(std::size_t v, const char* what) {
  if (v > UINT32_MAX) throw FormatError(std::string(what) + " does not fit in u32");
  return static_cast<std::uint32_t>(v);
}

}  // namespace

void copy_state(const IcMlpModel& src, IcMlpModel& dst) {
  if (!same_architecture(src.shape(), dst.shape())) {
    throw ConfigError("warm start: saved model architecture (input " +
                      std::to_string(src.input_dim()) + ", classes " +
                      std::to_string(src.n_classes()) + ", blocks " +
                      std::to_string(src.shape().n_residual) + ", ablation " +
                      src.ablation().name() + ") does not match the configured one (input " +
                      std::to_string(dst.input_dim()) + ", classes " +
                      std::to_string(dst.n_classes()) + ", blocks " +
                      std::to_string(dst.shape().n_residual) + ", ablation " +
                      dst.ablation().name() + ")");
  }
  std::vector<const Tensor*> sources;
  visit_arrays([&sources](const Tensor& t, const char*) { sources.push_back(&t); }, src);
  std::size_t next = 0;
  visit_arrays([&](Tensor& t, const char*) { t = *sources[next++]; }, dst);
}

std::vector<std::uint8_t> serialize_model(const IcMlpModel& model) {
  const ModelShape& s = model.shape();
  ByteWriter w;
  w.bytes(kMagic, sizeof(kMagic));
  w.uint(kVersion);
  w.uint(narrow_u32(s.input_dim, "input_dim"));
  w.uint(narrow_u32(s.n_classes, "n_classes"));
  w.uint(narrow_u32(s.n_residual, "n_residual"));
  w.uint(narrow_u32(s.n_downsample, "n_downsample"));
  w.uint(s.ablation.bits());
  w.f64(s.dropout_p);
  w.f64(s.bn_eps);
  w.f64(s.bn_momentum);
  visit_arrays([&w](const Tensor& t, const char*) { w.tensor(t); }, model);
  return w.take();
}

IcMlpModel deserialize_model(const std::vector<std::uint8_t>& bytes) {
  ByteReader r(bytes);
  r.expect(sizeof(kMagic), "magic");
  if (std::memcmp(bytes.data(), kMagic, sizeof(kMagic)) != 0) {
    throw FormatError("bad magic at byte offset 0: not an ICMLP model file");
  }
  for (std::size_t i = 0; i < sizeof(kMagic); ++i) r.uint<std::uint8_t>("magic");
  const std::size_t version_offset = r.offset();
  const auto version = r.uint<std::uint16_t>("version");
  if (version != kVersion) {
    throw FormatError("unsupported model format version " + std::to_string(version) +
                      " at byte offset " + std::to_string(version_offset));
  }
  ModelShape shape;
  shape.input_dim = r.uint<std::uint32_t>("input_dim");
  shape.n_classes = r.uint<std::uint32_t>("n_classes");
  shape.n_residual = r.uint<std::uint32_t>("n_residual");
  shape.n_downsample = r.uint<std::uint32_t>("n_downsample");
  const std::size_t flags_offset = r.offset();
  try {
    shape.ablation = AblationFlags::from_bits(r.uint<std::uint8_t>("ablation flags"));
  } catch (const FormatError& e) {
    throw FormatError(std::string(e.what()) + " at byte offset " + std::to_string(flags_offset));
  }
  shape.dropout_p = r.f64("dropout_p");
  shape.bn_eps = r.f64("batchnorm eps");
  shape.bn_momentum = r.f64("batchnorm momentum");

  const std::size_t header_end = r.offset();
  const std::uint64_t values = array_value_count(shape);
  if (values == 0) {
    throw FormatError("invalid model header ending at byte offset " + std::to_string(header_end));
  }
  const std::uint64_t remaining = bytes.size() - header_end;
  if (remaining / 8 < values) {
    throw FormatError("model file truncated: parameter data starting at byte offset " +
                      std::to_string(header_end) + " needs " + std::to_string(values * 8) +
                      " bytes, found " + std::to_string(remaining));
  }
  IcMlpModel model;
  try {
    model = build_model_skeleton(shape);
  } catch (const ConfigError& e) {
    throw FormatError("invalid model header ending at byte offset " +
                      std::to_string(header_end) + ": " + e.what());
  }
  visit_arrays([&r](Tensor& t, const char* what) { r.tensor(t, what); }, model);
  if (!r.at_end()) {
    throw FormatError("unexpected trailing data at byte offset " + std::to_string(r.offset()));
  }
  model.set_mode(Mode::Eval);
  return model;
}

void save_model(const IcMlpModel& model, const std::filesystem::path& path) {
  const auto bytes = serialize_model(model);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("failed writing model to '" + path.string() + "'");
}

IcMlpModel load_model(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open model file '" + path.string() + "'");
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                                  std::istreambuf_iterator<char>());
  return deserialize_model(bytes);
}

}  // namespace icmlp
