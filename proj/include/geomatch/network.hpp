#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <span>
#include <string>
#include <vector>

#include "geomatch/error.hpp"
#include "geomatch/geometry.hpp"
#include "geomatch/image.hpp"
#include "geomatch/matching.hpp"
#include "geomatch/rng.hpp"

namespace geomatch {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// Siamese feature extractor: 3x3 convolutions, stride 2, padding 1.
struct ExtractorSpec {
  std::vector<int> channels{16, 32, 16};
  // ReLU after every stage except (optionally) the last.
  bool final_relu = false;
  int input_size = 64;

  [[nodiscard]] int output_size() const {
    int s = input_size;
    for (std::size_t i = 0; i < channels.size(); ++i) s = (s - 1) / 2 + 1;
    return s;
  }
  [[nodiscard]] int output_channels() const { return channels.empty() ? 3 : channels.back(); }

  void validate() const {
    if (channels.empty()) throw UsageError("extractor needs at least one stage");
    for (int c : channels) {
      if (c < 1) throw UsageError("extractor stage needs at least one channel");
    }
    if (output_size() < 4) throw UsageError("extractor output must be at least 4x4");
  }
};

/// One 3x3 stride-1 conv over the correlation volume, then a dense layer.
struct RegressorSpec {
  TransformKind kind = TransformKind::Homography;
  // Homography with h9 pinned to 1; the network emits 8 numbers.
  bool eight_param = false;
  int conv_channels = 16;
  // Added to the raw network output; defaults to the identity parameters.
  std::vector<double> output_offset;

  [[nodiscard]] std::size_t outputs() const {
    return param_count(kind) - (eight_param ? 1 : 0);
  }

  [[nodiscard]] std::vector<double> resolved_offset() const {
    if (!output_offset.empty()) return output_offset;
    auto id = TransformParams::identity(kind).values();
    id.resize(outputs());
    return id;
  }

  void validate() const {
    if (eight_param && kind != TransformKind::Homography) {
      throw UsageError("8-parameter mode applies to homographies only");
    }
    if (conv_channels < 1) throw UsageError("regressor needs at least one conv channel");
    if (!output_offset.empty() && output_offset.size() != outputs()) {
      throw UsageError("output_offset has wrong length");
    }
  }
};

/// Named parameter tensor, row-major.
struct Tensor {
  std::string name;
  std::vector<int> shape;
  std::vector<double> data;
};

using ParamGrads = std::vector<std::vector<double>>;

namespace conv {

inline int out_extent(int in, int stride) { return (in - 1) / stride + 1; }

// Patch matrix: one row per output pixel, columns ordered (ky, kx, in_channel).
inline RowMatrix im2col(const FeatureMap& in, int stride) {
  const int oh = out_extent(in.h, stride), ow = out_extent(in.w, stride);
  RowMatrix col = RowMatrix::Zero(static_cast<Eigen::Index>(oh) * ow, 9 * in.d);
  for (int oy = 0; oy < oh; ++oy) {
    for (int ox = 0; ox < ow; ++ox) {
      double* dst = col.row(oy * ow + ox).data();
      for (int ky = 0; ky < 3; ++ky) {
        const int iy = oy * stride - 1 + ky;
        if (iy < 0 || iy >= in.h) continue;
        for (int kx = 0; kx < 3; ++kx) {
          const int ix = ox * stride - 1 + kx;
          if (ix < 0 || ix >= in.w) continue;
          const double* src = in.data.data() + (static_cast<std::size_t>(iy) * in.w + ix) * in.d;
          std::copy(src, src + in.d, dst + (ky * 3 + kx) * in.d);
        }
      }
    }
  }
  return col;
}

inline void col2im_add(const RowMatrix& dcol, FeatureMap& din, int stride) {
  const int oh = out_extent(din.h, stride), ow = out_extent(din.w, stride);
  for (int oy = 0; oy < oh; ++oy) {
    for (int ox = 0; ox < ow; ++ox) {
      const double* src = dcol.row(oy * ow + ox).data();
      for (int ky = 0; ky < 3; ++ky) {
        const int iy = oy * stride - 1 + ky;
        if (iy < 0 || iy >= din.h) continue;
        for (int kx = 0; kx < 3; ++kx) {
          const int ix = ox * stride - 1 + kx;
          if (ix < 0 || ix >= din.w) continue;
          double* dst = din.data.data() + (static_cast<std::size_t>(iy) * din.w + ix) * din.d;
          const double* s = src + (ky * 3 + kx) * din.d;
          for (int c = 0; c < din.d; ++c) dst[c] += s[c];
        }
      }
    }
  }
}

using ConstRowMap = Eigen::Map<const RowMatrix>;
using RowMap = Eigen::Map<RowMatrix>;

struct Trace {
  RowMatrix col;
  FeatureMap out;  // post-activation
};

inline Trace forward(const FeatureMap& in, const Tensor& weight, const Tensor& bias, int stride,
                     bool relu) {
  const int out_c = weight.shape[0];
  Trace t{im2col(in, stride), FeatureMap(out_extent(in.h, stride), out_extent(in.w, stride), out_c)};
  ConstRowMap w(weight.data.data(), out_c, 9 * in.d);
  RowMap out(t.out.data.data(), t.col.rows(), out_c);
  out.noalias() = t.col * w.transpose();
  const Eigen::Map<const Eigen::RowVectorXd> b(bias.data.data(), out_c);
  out.rowwise() += b;
  if (relu) {
    for (auto& v : t.out.data) v = v > 0.0 ? v : 0.0;
  }
  return t;
}

// dout holds d loss / d post-activation and is consumed. Accumulates weight and
// bias gradients; returns d loss / d input when `want_input` is set.
inline FeatureMap backward(const FeatureMap& in, const Trace& t, const Tensor& weight, int stride,
                           bool relu, FeatureMap dout, std::vector<double>& gw,
                           std::vector<double>& gb, bool want_input) {
  const int out_c = weight.shape[0];
  if (relu) {
    for (std::size_t i = 0; i < dout.data.size(); ++i) {
      if (!(t.out.data[i] > 0.0)) dout.data[i] = 0.0;
    }
  }
  ConstRowMap g(dout.data.data(), t.col.rows(), out_c);
  RowMap dw(gw.data(), out_c, 9 * in.d);
  dw.noalias() += g.transpose() * t.col;
  Eigen::Map<Eigen::RowVectorXd> db(gb.data(), out_c);
  db += g.colwise().sum();
  FeatureMap din(in.h, in.w, in.d);
  if (want_input) {
    ConstRowMap w(weight.data.data(), out_c, 9 * in.d);
    const RowMatrix dcol = g * w;
    col2im_add(dcol, din, stride);
  }
  return din;
}

}  // namespace conv

/// Extractor + regressor weights and the forward/backward passes of the matcher.
class Network {
 public:
  struct ExtractorPass {
    FeatureMap input;
    std::vector<conv::Trace> stages;
    [[nodiscard]] const FeatureMap& features() const { return stages.back().out; }
  };

  struct RegressorPass {
    FeatureMap input;  // correlation volume viewed as h x w x (h*w)
    conv::Trace conv;
    std::vector<double> raw;
  };

  Network() = default;

  Network(ExtractorSpec ext, RegressorSpec reg) : ext_(std::move(ext)), reg_(std::move(reg)) {
    ext_.validate();
    reg_.validate();
    int in_c = 3;
    for (std::size_t s = 0; s < ext_.channels.size(); ++s) {
      const int out_c = ext_.channels[s];
      const std::string pre = "extractor." + std::to_string(s);
      tensors_.push_back({pre + ".weight", {out_c, 3, 3, in_c}, {}});
      tensors_.push_back({pre + ".bias", {out_c}, {}});
      in_c = out_c;
    }
    const int side = ext_.output_size();
    const int cells = side * side;
    tensors_.push_back({"regressor.conv.weight", {reg_.conv_channels, 3, 3, cells}, {}});
    tensors_.push_back({"regressor.conv.bias", {reg_.conv_channels}, {}});
    const int fc_in = cells * reg_.conv_channels;
    const int fc_out = static_cast<int>(reg_.outputs());
    tensors_.push_back({"regressor.fc.weight", {fc_out, fc_in}, {}});
    tensors_.push_back({"regressor.fc.bias", {fc_out}, {}});
    for (auto& t : tensors_) {
      std::size_t n = 1;
      for (int d : t.shape) n *= static_cast<std::size_t>(d);
      t.data.assign(n, 0.0);
    }
    offset_ = reg_.resolved_offset();
  }

  /// He-normal convolutions, small dense layer, zero biases.
  void init_random(std::uint64_t seed, double fc_scale = 0.1) {
    Rng rng(seed);
    for (auto& t : tensors_) {
      if (t.shape.size() == 1) continue;
      std::size_t fan_in = 1;
      for (std::size_t i = 1; i < t.shape.size(); ++i) fan_in *= static_cast<std::size_t>(t.shape[i]);
      const bool dense = t.name == "regressor.fc.weight";
      const double stddev = (dense ? fc_scale : std::sqrt(2.0)) / std::sqrt(static_cast<double>(fan_in));
      for (auto& v : t.data) v = stddev * rng.normal();
    }
  }

  [[nodiscard]] const ExtractorSpec& extractor_spec() const noexcept { return ext_; }
  [[nodiscard]] const RegressorSpec& regressor_spec() const noexcept { return reg_; }
  [[nodiscard]] std::vector<Tensor>& tensors() noexcept { return tensors_; }
  [[nodiscard]] const std::vector<Tensor>& tensors() const noexcept { return tensors_; }

  [[nodiscard]] ParamGrads zero_grads() const {
    ParamGrads g;
    g.reserve(tensors_.size());
    for (const auto& t : tensors_) g.emplace_back(t.data.size(), 0.0);
    return g;
  }

  [[nodiscard]] ExtractorPass extract_traced(const Image& img) const {
    if (img.height != ext_.input_size || img.width != ext_.input_size || img.channels != 3) {
      throw UsageError("extractor expects " + std::to_string(ext_.input_size) + "x" +
                       std::to_string(ext_.input_size) + "x3 input, got " +
                       std::to_string(img.height) + "x" + std::to_string(img.width) + "x" +
                       std::to_string(img.channels));
    }
    ExtractorPass pass{FeatureMap(img.height, img.width, 3), {}};
    for (std::size_t i = 0; i < img.data.size(); ++i) pass.input.data[i] = img.data[i] - 0.5;
    const FeatureMap* cur = &pass.input;
    const std::size_t stages = ext_.channels.size();
    pass.stages.reserve(stages);
    for (std::size_t s = 0; s < stages; ++s) {
      const bool relu = s + 1 < stages || ext_.final_relu;
      pass.stages.push_back(conv::forward(*cur, tensors_[2 * s], tensors_[2 * s + 1], 2, relu));
      cur = &pass.stages.back().out;
    }
    return pass;
  }

  [[nodiscard]] FeatureMap extract(const Image& img) const { return extract_traced(img).features(); }

  void extract_backward(const ExtractorPass& pass, FeatureMap dfeat, ParamGrads& grads) const {
    const std::size_t stages = ext_.channels.size();
    for (std::size_t s = stages; s-- > 0;) {
      const FeatureMap& in = s == 0 ? pass.input : pass.stages[s - 1].out;
      const bool relu = s + 1 < stages || ext_.final_relu;
      dfeat = conv::backward(in, pass.stages[s], tensors_[2 * s], 2, relu, std::move(dfeat),
                             grads[2 * s], grads[2 * s + 1], s > 0);
    }
  }

  [[nodiscard]] RegressorPass regress_traced(const CorrelationMap& c) const {
    const int side = ext_.output_size();
    if (c.h != side || c.w != side) throw UsageError("correlation map does not match regressor");
    RegressorPass pass;
    pass.input = FeatureMap(c.h, c.w, c.k_dim());
    pass.input.data = c.data;
    const std::size_t base = 2 * ext_.channels.size();
    pass.conv = conv::forward(pass.input, tensors_[base], tensors_[base + 1], 1, true);
    const Tensor& fw = tensors_[base + 2];
    const Tensor& fb = tensors_[base + 3];
    conv::ConstRowMap w(fw.data.data(), fw.shape[0], fw.shape[1]);
    const Eigen::Map<const Eigen::VectorXd> x(pass.conv.out.data.data(), fw.shape[1]);
    const Eigen::Map<const Eigen::VectorXd> b(fb.data.data(), fw.shape[0]);
    const Eigen::VectorXd y = w * x + b;
    pass.raw.assign(y.data(), y.data() + y.size());
    return pass;
  }

  /// Raw output plus offset; 8-parameter mode appends h9 = 1.
  [[nodiscard]] TransformParams params_from_raw(std::span<const double> raw) const {
    std::vector<double> v(raw.begin(), raw.end());
    for (std::size_t i = 0; i < v.size(); ++i) v[i] += offset_[i];
    if (reg_.eight_param) v.push_back(1.0);
    return {reg_.kind, std::move(v)};
  }

  [[nodiscard]] TransformParams regress(const CorrelationMap& c) const {
    return params_from_raw(regress_traced(c).raw);
  }

  /// dtheta is d loss / d full parameter vector; returns d loss / d correlation.
  [[nodiscard]] std::vector<double> regress_backward(const RegressorPass& pass,
                                                     std::span<const double> dtheta,
                                                     ParamGrads& grads) const {
    const std::size_t base = 2 * ext_.channels.size();
    const Tensor& fw = tensors_[base + 2];
    const int n_out = fw.shape[0], n_in = fw.shape[1];
    const Eigen::Map<const Eigen::VectorXd> g(dtheta.data(), n_out);
    const Eigen::Map<const Eigen::VectorXd> x(pass.conv.out.data.data(), n_in);
    conv::RowMap dw(grads[base + 2].data(), n_out, n_in);
    dw.noalias() += g * x.transpose();
    Eigen::Map<Eigen::VectorXd> db(grads[base + 3].data(), n_out);
    db += g;
    conv::ConstRowMap w(fw.data.data(), n_out, n_in);
    FeatureMap dconv(pass.conv.out.h, pass.conv.out.w, pass.conv.out.d);
    Eigen::Map<Eigen::VectorXd>(dconv.data.data(), n_in).noalias() = w.transpose() * g;
    const FeatureMap din = conv::backward(pass.input, pass.conv, tensors_[base], 1, true,
                                          std::move(dconv), grads[base], grads[base + 1], true);
    return din.data;
  }

  [[nodiscard]] TransformParams forward(const Image& a, const Image& b, CorrelationKind kind) const {
    return regress(correlate(extract(a), extract(b), kind));
  }

 private:
  ExtractorSpec ext_;
  RegressorSpec reg_;
  std::vector<Tensor> tensors_;
  std::vector<double> offset_;
};

/// Forward and reverse pass for one training pair; adds d loss / d weights to
/// `grads` and returns the loss value.
template <typename LossFn>
double accumulate_gradient(const Network& net, const Image& a, const Image& b, CorrelationKind kind,
                           LossFn&& loss, ParamGrads& grads) {
  const auto pa = net.extract_traced(a);
  const auto pb = net.extract_traced(b);
  const auto corr = correlate(pa.features(), pb.features(), kind);
  const auto pr = net.regress_traced(corr);
  const auto theta = net.params_from_raw(pr.raw);
  const auto l = loss(theta);
  const auto dcorr = net.regress_backward(pr, l.grad, grads);
  auto dfeat = correlate_backward(pa.features(), pb.features(), kind, dcorr);
  net.extract_backward(pa, std::move(dfeat.fa), grads);
  net.extract_backward(pb, std::move(dfeat.fb), grads);
  return l.value;
}

}  // namespace geomatch
