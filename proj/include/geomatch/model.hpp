#pragma once

#include <nlohmann/json.hpp>

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "geomatch/error.hpp"
#include "geomatch/geometry.hpp"
#include "geomatch/loss.hpp"
#include "geomatch/matching.hpp"
#include "geomatch/network.hpp"
#include "geomatch/parallel.hpp"
#include "geomatch/rng.hpp"
#include "geomatch/synth.hpp"
#include "geomatch/warp.hpp"

namespace geomatch {

struct TrainConfig {
  LossConfig loss;
  CorrelationKind correlation = CorrelationKind::Pearson;
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_epsilon = 1e-8;
  int batch_size = 16;
  int epochs = 30;
  std::uint64_t seed = 0;
  unsigned threads = 0;  // 0 = GEOMATCH_THREADS / hardware

  void validate() const {
    if (!(learning_rate > 0.0)) throw UsageError("learning rate must be positive");
    if (batch_size < 1) throw UsageError("batch size must be at least 1");
    if (epochs < 0) throw UsageError("epochs must be non-negative");
    loss.weights.validate();
  }
};

inline nlohmann::json to_json(const ExtractorSpec& s) {
  return {{"channels", s.channels}, {"final_relu", s.final_relu}, {"input_size", s.input_size}};
}

inline nlohmann::json to_json(const RegressorSpec& s) {
  return {{"kind", to_string(s.kind)},
          {"eight_param", s.eight_param},
          {"conv_channels", s.conv_channels},
          {"output_offset", s.resolved_offset()}};
}

inline nlohmann::json to_json(const TrainConfig& c) {
  return {{"loss", to_string(c.loss.kind)},
          {"sigma", c.loss.weights.sigma},
          {"gamma", c.loss.weights.gamma},
          {"center", {c.loss.weights.center.x, c.loss.weights.center.y}},
          {"normalize_weights", c.loss.normalize_weights},
          {"grid_points_per_axis", c.loss.grid_points_per_axis},
          {"correlation", to_string(c.correlation)},
          {"optimizer", "adam"},
          {"learning_rate", c.learning_rate},
          {"beta1", c.beta1},
          {"beta2", c.beta2},
          {"adam_epsilon", c.adam_epsilon},
          {"batch_size", c.batch_size},
          {"epochs", c.epochs},
          {"seed", c.seed}};
}

inline ExtractorSpec extractor_from_json(const nlohmann::json& j) {
  ExtractorSpec s;
  s.channels = j.at("channels").get<std::vector<int>>();
  s.final_relu = j.at("final_relu").get<bool>();
  s.input_size = j.at("input_size").get<int>();
  return s;
}

inline RegressorSpec regressor_from_json(const nlohmann::json& j) {
  RegressorSpec s;
  s.kind = parse_transform_kind(j.at("kind").get<std::string>());
  s.eight_param = j.at("eight_param").get<bool>();
  s.conv_channels = j.at("conv_channels").get<int>();
  s.output_offset = j.at("output_offset").get<std::vector<double>>();
  return s;
}

inline TrainConfig train_config_from_json(const nlohmann::json& j) {
  TrainConfig c;
  c.loss.kind = parse_loss_kind(j.at("loss").get<std::string>());
  c.loss.weights.sigma = j.at("sigma").get<double>();
  c.loss.weights.gamma = j.at("gamma").get<double>();
  const auto center = j.at("center").get<std::array<double, 2>>();
  c.loss.weights.center = {center[0], center[1]};
  c.loss.normalize_weights = j.at("normalize_weights").get<bool>();
  c.loss.grid_points_per_axis = j.at("grid_points_per_axis").get<int>();
  c.correlation = parse_correlation_kind(j.at("correlation").get<std::string>());
  c.learning_rate = j.at("learning_rate").get<double>();
  c.beta1 = j.at("beta1").get<double>();
  c.beta2 = j.at("beta2").get<double>();
  c.adam_epsilon = j.at("adam_epsilon").get<double>();
  c.batch_size = j.at("batch_size").get<int>();
  c.epochs = j.at("epochs").get<int>();
  c.seed = j.at("seed").get<std::uint64_t>();
  return c;
}

/// Trained matcher: weights, the configs that produced them, and the loss trace.
struct ModelCheckpoint {
  static constexpr std::uint32_t kFormatVersion = 1;

  Network network;
  TrainConfig train;
  std::vector<double> loss_trace;  // per-epoch mean training loss

  [[nodiscard]] CorrelationKind correlation() const noexcept { return train.correlation; }
  [[nodiscard]] TransformKind kind() const noexcept { return network.regressor_spec().kind; }
};

/// Rounds every weight to float32 so a saved checkpoint reloads bit-exactly.
inline void quantize_weights(Network& net) {
  for (auto& t : net.tensors()) {
    for (auto& v : t.data) v = static_cast<double>(static_cast<float>(v));
  }
}

/// Untrained model: zero weights, so it predicts exactly its output offset.
inline ModelCheckpoint constant_model(ExtractorSpec ext, RegressorSpec reg, TrainConfig cfg = {}) {
  return {Network(std::move(ext), std::move(reg)), cfg, {}};
}

// Container: "GEOMATCH" magic, u32 version, u64 header length, JSON header,
// little-endian float32 payload addressed by the header's tensor directory.
inline void save_checkpoint(const std::filesystem::path& path, const ModelCheckpoint& ckpt) {
  nlohmann::json header;
  header["format_version"] = ModelCheckpoint::kFormatVersion;
  header["extractor"] = to_json(ckpt.network.extractor_spec());
  header["regressor"] = to_json(ckpt.network.regressor_spec());
  header["train"] = to_json(ckpt.train);
  header["loss_trace"] = ckpt.loss_trace;
  nlohmann::json dir = nlohmann::json::array();
  std::size_t offset = 0;
  for (const auto& t : ckpt.network.tensors()) {
    dir.push_back({{"name", t.name}, {"shape", t.shape}, {"offset", offset}, {"count", t.data.size()}});
    offset += t.data.size();
  }
  header["tensors"] = dir;
  const std::string text = header.dump();

  std::string blob;
  auto put_le = [&blob](std::uint64_t v, int bytes) {
    for (int i = 0; i < bytes; ++i) blob.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
  };
  blob += "GEOMATCH";
  put_le(ModelCheckpoint::kFormatVersion, 4);
  put_le(text.size(), 8);
  blob += text;
  for (const auto& t : ckpt.network.tensors()) {
    for (double v : t.data) put_le(std::bit_cast<std::uint32_t>(static_cast<float>(v)), 4);
  }
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write checkpoint '" + path.string() + "'");
  out.write(blob.data(), static_cast<std::streamsize>(blob.size()));
}

inline ModelCheckpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open checkpoint '" + path.string() + "'");
  const std::string blob((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  auto get_le = [&blob](std::size_t pos, int bytes) {
    std::uint64_t v = 0;
    for (int i = 0; i < bytes; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(blob[pos + i])) << (8 * i);
    return v;
  };
  if (blob.size() < 20 || blob.compare(0, 8, "GEOMATCH") != 0) {
    throw DataError("'" + path.string() + "' is not a geomatch checkpoint");
  }
  if (get_le(8, 4) != ModelCheckpoint::kFormatVersion) {
    throw DataError("unsupported checkpoint version in '" + path.string() + "'");
  }
  const std::uint64_t header_len = get_le(12, 8);
  if (20 + header_len > blob.size()) throw DataError("truncated checkpoint header");
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(blob.substr(20, header_len));
    ModelCheckpoint ckpt{Network(extractor_from_json(header.at("extractor")),
                                 regressor_from_json(header.at("regressor"))),
                         train_config_from_json(header.at("train")),
                         header.at("loss_trace").get<std::vector<double>>()};
    const std::size_t payload = 20 + header_len;
    auto& tensors = ckpt.network.tensors();
    const auto& dir = header.at("tensors");
    if (dir.size() != tensors.size()) throw DataError("checkpoint tensor directory mismatch");
    for (std::size_t i = 0; i < tensors.size(); ++i) {
      const auto& e = dir[i];
      if (e.at("name").get<std::string>() != tensors[i].name ||
          e.at("shape").get<std::vector<int>>() != tensors[i].shape) {
        throw DataError("checkpoint tensor '" + e.at("name").get<std::string>() + "' mismatches architecture");
      }
      const std::size_t off = e.at("offset").get<std::size_t>();
      if (payload + 4 * (off + tensors[i].data.size()) > blob.size()) {
        throw DataError("truncated checkpoint payload");
      }
      for (std::size_t k = 0; k < tensors[i].data.size(); ++k) {
        const auto bits = static_cast<std::uint32_t>(get_le(payload + 4 * (off + k), 4));
        tensors[i].data[k] = std::bit_cast<float>(bits);
      }
    }
    return ckpt;
  } catch (const nlohmann::json::exception& e) {
    throw DataError("malformed checkpoint header: " + std::string(e.what()));
  }
}

/// Progress callback: (epoch, mean training loss).
using EpochCallback = std::function<void(int, double)>;

/// Mini-batch Adam on the configured loss between the regressed transform and
/// each sample's label. Shuffling and batch reduction order depend only on the
/// seed, so results are independent of thread count.
inline ModelCheckpoint train(std::span<const HomographySample> data, const TrainConfig& cfg,
                             const ExtractorSpec& ext, const RegressorSpec& reg,
                             const EpochCallback& on_epoch = {}) {
  cfg.validate();
  if (data.empty()) throw DataError("training set is empty");
  if (cfg.loss.kind == LossKind::Mse) {
    for (const auto& s : data) {
      if (s.h_gt.kind() != reg.kind) {
        throw UsageError("mse loss needs labels of the regressed kind (" +
                         std::string(to_string(reg.kind)) + ")");
      }
    }
  }
  ModelCheckpoint ckpt{Network(ext, reg), cfg, {}};
  Network& net = ckpt.network;
  net.init_random(derive_seed(cfg.seed, 0, "init"));
  const Objective objective(cfg.loss);
  const unsigned threads = cfg.threads ? cfg.threads : worker_count();

  auto m = net.zero_grads();
  auto v = net.zero_grads();
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng shuffle_rng(derive_seed(cfg.seed, 0, "shuffle"));
  std::int64_t step = 0;
  const std::size_t batch = static_cast<std::size_t>(cfg.batch_size);

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    for (std::size_t i = order.size(); i > 1; --i) {
      std::swap(order[i - 1], order[static_cast<std::size_t>(shuffle_rng.next_u64() % i)]);
    }
    double epoch_loss = 0.0;
    std::size_t batch_index = 0;
    for (std::size_t start = 0; start < order.size(); start += batch, ++batch_index) {
      const std::size_t n = std::min(batch, order.size() - start);
      std::vector<ParamGrads> per_sample(n);
      std::vector<double> losses(n, 0.0);
      parallel_for(
          n,
          [&](std::size_t j) {
            const auto& s = data[order[start + j]];
            per_sample[j] = net.zero_grads();
            losses[j] = accumulate_gradient(
                net, s.source, s.warped, cfg.correlation,
                [&](const TransformParams& theta) { return objective(theta, s.h_gt); },
                per_sample[j]);
          },
          threads);
      double batch_loss = 0.0;
      for (double l : losses) batch_loss += l;
      batch_loss /= static_cast<double>(n);
      if (!std::isfinite(batch_loss)) {
        std::ostringstream msg;
        msg << "non-finite training loss " << batch_loss << " at epoch " << epoch << ", batch "
            << batch_index;
        throw NumericalError(msg.str());
      }
      epoch_loss += batch_loss * static_cast<double>(n);

      ++step;
      const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(step));
      const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(step));
      auto& tensors = net.tensors();
      for (std::size_t t = 0; t < tensors.size(); ++t) {
        auto& w = tensors[t].data;
        for (std::size_t k = 0; k < w.size(); ++k) {
          double g = 0.0;
          for (std::size_t j = 0; j < n; ++j) g += per_sample[j][t][k];
          g /= static_cast<double>(n);
          m[t][k] = cfg.beta1 * m[t][k] + (1.0 - cfg.beta1) * g;
          v[t][k] = cfg.beta2 * v[t][k] + (1.0 - cfg.beta2) * g * g;
          w[k] -= cfg.learning_rate * (m[t][k] / bc1) / (std::sqrt(v[t][k] / bc2) + cfg.adam_epsilon);
        }
      }
    }
    const double mean = epoch_loss / static_cast<double>(data.size());
    ckpt.loss_trace.push_back(mean);
    if (on_epoch) on_epoch(epoch, mean);
  }
  quantize_weights(net);
  return ckpt;
}

/// Extract, correlate, regress: the transform mapping target coordinates to source.
inline TransformParams forward_pipeline(const Image& source, const Image& target,
                                        const ModelCheckpoint& ckpt) {
  if (!source.same_shape(target)) throw UsageError("source and target images differ in size");
  return ckpt.network.forward(source, target, ckpt.correlation());
}

/// Coarse-to-fine match. `first` is estimated on the raw pair, `second` on the
/// source pre-warped by `first`; target point p corresponds to source first(second(p)).
struct TwoStageResult {
  TransformParams first;
  TransformParams second;

  [[nodiscard]] std::vector<Point2> map(std::span<const Point2> pts,
                                        Singularity policy = Singularity::Throw) const {
    return compose_apply(first, second, pts, policy);
  }
};

inline TwoStageResult two_stage_match(const Image& source, const Image& target,
                                      const ModelCheckpoint& stage1, const ModelCheckpoint& stage2) {
  auto t1 = forward_pipeline(source, target, stage1);
  const Image rewarped = warp_image(source, t1);
  auto t2 = forward_pipeline(rewarped, target, stage2);
  return {std::move(t1), std::move(t2)};
}

/// Training pairs for a second stage: source pre-warped by the stage-1 estimate,
/// labelled with the remaining homography inverse(T1) * H_gt.
inline std::vector<HomographySample> make_refinement_set(std::span<const HomographySample> data,
                                                         const ModelCheckpoint& stage1) {
  if (stage1.kind() == TransformKind::Tps) throw UsageError("stage 1 must be affine or homography");
  std::vector<HomographySample> out(data.size());
  parallel_for(data.size(), [&](std::size_t i) {
    const auto& s = data[i];
    const auto t1 = forward_pipeline(s.source, s.warped, stage1);
    HomographySample r;
    r.id = s.id;
    r.source = warp_image(s.source, t1);
    r.warped = s.warped;
    r.h_gt = canonicalize_homography(
        TransformParams::homography(invert(t1).matrix() * s.h_gt.matrix()));
    r.corners_src = s.corners_src;
    const auto dst = map_points(r.h_gt, r.corners_src, Singularity::Clamp);
    std::copy(dst.begin(), dst.end(), r.corners_dst.begin());
    out[i] = std::move(r);
  });
  return out;
}

}  // namespace geomatch
