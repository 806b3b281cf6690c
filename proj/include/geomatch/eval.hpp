#pragma once

#include <nlohmann/json.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "geomatch/error.hpp"
#include "geomatch/geometry.hpp"
#include "geomatch/loss.hpp"
#include "geomatch/model.hpp"
#include "geomatch/parallel.hpp"
#include "geomatch/synth.hpp"
#include "geomatch/warp.hpp"

namespace geomatch {

struct PixelPoint {
  double x = 0.0;
  double y = 0.0;
};

/// Fraction of keypoints whose prediction lies within alpha * ref_dim pixels.
inline double pck(std::span<const PixelPoint> pred, std::span<const PixelPoint> gt, double alpha,
                  double ref_dim) {
  if (pred.size() != gt.size()) throw UsageError("pck: prediction and ground truth lengths differ");
  if (pred.empty()) throw UsageError("pck: empty keypoint list");
  if (!(alpha > 0.0) || !(ref_dim > 0.0)) throw UsageError("pck: alpha and ref_dim must be positive");
  const double threshold = alpha * ref_dim;
  std::size_t hits = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    if (std::hypot(pred[i].x - gt[i].x, pred[i].y - gt[i].y) <= threshold) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(pred.size());
}

struct PCKResult {
  double pck = 0.0;
  double alpha = 0.1;
  std::size_t n_keypoints = 0;
  std::vector<double> per_sample;
  std::size_t failures = 0;  // samples whose prediction raised, scored as 0
};

/// Maps normalized grid points for one sample; the estimate of the target to
/// source coordinate map.
using GridPredictor =
    std::function<std::vector<Point2>(const HomographySample&, std::span<const Point2>)>;

inline GridPredictor model_predictor(const ModelCheckpoint& ckpt) {
  return [&ckpt](const HomographySample& s, std::span<const Point2> grid) {
    return map_points(forward_pipeline(s.source, s.warped, ckpt), grid);
  };
}

inline GridPredictor two_stage_predictor(const ModelCheckpoint& stage1, const ModelCheckpoint& stage2) {
  return [&stage1, &stage2](const HomographySample& s, std::span<const Point2> grid) {
    return two_stage_match(s.source, s.warped, stage1, stage2).map(grid);
  };
}

/// Returns the ground-truth map itself.
inline GridPredictor oracle_predictor() {
  return [](const HomographySample& s, std::span<const Point2> grid) {
    return map_points(s.h_gt, grid);
  };
}

inline GridPredictor fixed_predictor(TransformParams t) {
  return [t = std::move(t)](const HomographySample&, std::span<const Point2> grid) {
    return map_points(t, grid);
  };
}

inline std::vector<PixelPoint> to_pixels(std::span<const Point2> pts, int height, int width) {
  std::vector<PixelPoint> out;
  out.reserve(pts.size());
  for (const auto& p : pts) out.push_back({to_pixel(p.x, width), to_pixel(p.y, height)});
  return out;
}

/// PCK over the 20x20 evaluation grid of every sample, ref_dim = max(h, w).
inline PCKResult evaluate(std::span<const HomographySample> data, const GridPredictor& predict,
                          double alpha = 0.1, int grid_points_per_axis = 20) {
  const Grid grid = make_grid(grid_points_per_axis);
  PCKResult res;
  res.alpha = alpha;
  res.per_sample.assign(data.size(), 0.0);
  std::vector<char> failed(data.size(), 0);
  parallel_for(data.size(), [&](std::size_t i) {
    const auto& s = data[i];
    const int h = s.warped.height, w = s.warped.width;
    try {
      const auto gt = to_pixels(map_points(s.h_gt, grid.points), h, w);
      const auto pred = to_pixels(predict(s, grid.points), h, w);
      res.per_sample[i] = pck(pred, gt, alpha, std::max(h, w));
    } catch (const Error&) {
      failed[i] = 1;
    }
  });
  for (char f : failed) res.failures += static_cast<std::size_t>(f);
  res.n_keypoints = data.size() * grid.size();
  double sum = 0.0;
  for (double v : res.per_sample) sum += v;
  res.pck = data.empty() ? 0.0 : sum / static_cast<double>(data.size());
  return res;
}

inline PCKResult evaluate_model(std::span<const HomographySample> data, const ModelCheckpoint& ckpt,
                                double alpha = 0.1) {
  return evaluate(data, model_predictor(ckpt), alpha);
}

inline PCKResult evaluate_model(std::span<const HomographySample> data, const ModelCheckpoint& stage1,
                                const ModelCheckpoint& stage2, double alpha = 0.1) {
  return evaluate(data, two_stage_predictor(stage1, stage2), alpha);
}

/// Per-sample grid loss (normalized units) between predicted and true grid images.
inline std::vector<double> evaluate_grid_loss(std::span<const HomographySample> data,
                                              const GridPredictor& predict,
                                              int grid_points_per_axis = 20) {
  const Grid grid = make_grid(grid_points_per_axis);
  std::vector<double> out(data.size(), 0.0);
  parallel_for(data.size(), [&](std::size_t i) {
    const auto gt = map_points(data[i].h_gt, grid.points, Singularity::Clamp);
    const auto pred = predict(data[i], grid.points);
    double acc = 0.0;
    for (std::size_t k = 0; k < grid.size(); ++k) {
      const double dx = pred[k].x - gt[k].x, dy = pred[k].y - gt[k].y;
      acc += dx * dx + dy * dy;
    }
    out[i] = acc / static_cast<double>(grid.size());
  });
  return out;
}

inline double median(std::vector<double> v) {
  if (v.empty()) return 0.0;
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

struct DataSplit {
  std::span<const HomographySample> train;
  std::span<const HomographySample> test;
};

/// Holds out the trailing `test_fraction` of an id-ordered dataset.
inline DataSplit split_dataset(std::span<const HomographySample> data, double test_fraction) {
  if (!std::is_sorted(data.begin(), data.end(),
                      [](const auto& a, const auto& b) { return a.id < b.id; })) {
    throw DataError("dataset must be ordered by id to split");
  }
  const auto n_test = static_cast<std::size_t>(std::llround(test_fraction * static_cast<double>(data.size())));
  const std::size_t n_train = data.size() - std::min(n_test, data.size());
  return {data.subspan(0, n_train), data.subspan(n_train)};
}

// ---------------------------------------------------------------------------
// Ablation harness over the single-homography configurations.

struct AblationVariant {
  std::string label;
  CorrelationKind correlation;
  bool eight_param;
  LossKind loss;
};

inline std::vector<AblationVariant> homography_ablation_variants() {
  return {{"cosine+9+weighted", CorrelationKind::Cosine, false, LossKind::Weighted},
          {"pearson+8+weighted", CorrelationKind::Pearson, true, LossKind::Weighted},
          {"pearson+9+mse", CorrelationKind::Pearson, false, LossKind::Mse},
          {"pearson+9+grid", CorrelationKind::Pearson, false, LossKind::Grid},
          {"pearson+9+weighted", CorrelationKind::Pearson, false, LossKind::Weighted}};
}

struct AblationRow {
  std::string config;
  std::uint64_t seed = 0;
  double pck = 0.0;
  double runtime_s = 0.0;
  bool failed = false;
  std::string error;
  PCKResult detail;
  std::vector<double> loss_trace;
};

struct AblationReport {
  std::vector<AblationRow> rows;  // grouped by config, best median PCK first
  std::map<std::string, double> median_pck;
};

/// Called after each successful training run (e.g. to keep checkpoints).
using AblationCallback =
    std::function<void(const AblationVariant&, std::uint64_t, const ModelCheckpoint&)>;

inline AblationReport run_ablation(DataSplit split, const TrainConfig& base,
                                   const ExtractorSpec& ext, const RegressorSpec& reg,
                                   std::span<const std::uint64_t> seeds, double alpha = 0.1,
                                   const AblationCallback& on_trained = {},
                                   std::vector<AblationVariant> variants = homography_ablation_variants()) {
  if (seeds.size() < 3) throw UsageError("ablation needs at least 3 seeds");
  if (split.train.empty() || split.test.empty()) throw DataError("ablation needs train and test samples");
  AblationReport report;
  std::map<std::string, std::vector<double>> by_config;
  for (const auto& variant : variants) {
    for (std::uint64_t seed : seeds) {
      TrainConfig cfg = base;
      cfg.seed = seed;
      cfg.correlation = variant.correlation;
      cfg.loss.kind = variant.loss;
      RegressorSpec rs = reg;
      rs.kind = TransformKind::Homography;
      rs.eight_param = variant.eight_param;
      rs.output_offset.clear();
      AblationRow row;
      row.config = variant.label;
      row.seed = seed;
      const auto t0 = std::chrono::steady_clock::now();
      try {
        const auto ckpt = train(split.train, cfg, ext, rs);
        row.detail = evaluate_model(split.test, ckpt, alpha);
        row.pck = row.detail.pck;
        row.loss_trace = ckpt.loss_trace;
        if (on_trained) on_trained(variant, seed, ckpt);
      } catch (const Error& e) {
        row.failed = true;
        row.error = e.what();
      }
      row.runtime_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      by_config[row.config].push_back(row.pck);
      report.rows.push_back(std::move(row));
    }
  }
  for (const auto& [config, values] : by_config) report.median_pck[config] = median(values);
  std::stable_sort(report.rows.begin(), report.rows.end(), [&](const auto& a, const auto& b) {
    const double ma = report.median_pck.at(a.config), mb = report.median_pck.at(b.config);
    if (ma != mb) return ma > mb;
    return a.config < b.config;
  });
  return report;
}

inline void write_ablation_report(const std::filesystem::path& dir, const AblationReport& report) {
  std::filesystem::create_directories(dir);
  std::ofstream csv(dir / "ablation.csv");
  if (!csv) throw DataError("cannot write ablation.csv in '" + dir.string() + "'");
  csv << "config,seed,pck,runtime_s\n";
  for (const auto& r : report.rows) {
    csv << r.config << "," << r.seed << "," << format_double(r.pck) << "," << r.runtime_s << "\n";
  }
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& r : report.rows) {
    rows.push_back({{"config", r.config},
                    {"seed", r.seed},
                    {"pck", r.pck},
                    {"runtime_s", r.runtime_s},
                    {"failed", r.failed},
                    {"error", r.error},
                    {"alpha", r.detail.alpha},
                    {"n_keypoints", r.detail.n_keypoints},
                    {"failures", r.detail.failures},
                    {"per_sample", r.detail.per_sample},
                    {"loss_trace", r.loss_trace}});
  }
  nlohmann::json full{{"rows", rows}, {"median_pck", report.median_pck}};
  std::ofstream js(dir / "ablation.json");
  js << full.dump(2) << "\n";
}

inline nlohmann::json to_json(const PCKResult& r) {
  return {{"pck", r.pck},
          {"alpha", r.alpha},
          {"n_keypoints", r.n_keypoints},
          {"failures", r.failures},
          {"per_sample", r.per_sample}};
}

}  // namespace geomatch
