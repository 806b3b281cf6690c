#pragma once

#include <cmath>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "geomatch/error.hpp"
#include "geomatch/geometry.hpp"

namespace geomatch {

struct GaussianWeightConfig {
  double sigma = 1.0;
  double gamma = 0.5;
  Point2 center{0.0, 0.0};

  void validate() const {
    if (!(sigma > 0.0)) throw UsageError("sigma must be positive");
    if (!(gamma >= 0.0 && gamma < 1.0)) throw UsageError("gamma must lie in [0, 1)");
  }
};

/// Center-weighted Gaussian over grid points; weights below gamma are zeroed.
inline std::vector<double> gaussian_weights(const Grid& grid, const GaussianWeightConfig& cfg) {
  cfg.validate();
  std::vector<double> w;
  w.reserve(grid.size());
  for (const auto& p : grid.points) {
    const double dx = p.x - cfg.center.x;
    const double dy = p.y - cfg.center.y;
    const double v = std::exp(-(dx * dx + dy * dy) / (2.0 * cfg.sigma * cfg.sigma));
    w.push_back(v >= cfg.gamma ? v : 0.0);
  }
  return w;
}

/// Loss value together with its gradient w.r.t. the predicted parameters.
struct LossResult {
  double value = 0.0;
  std::vector<double> grad;
};

namespace detail {

// sum_i weight_i * |t_hat(g_i) - t_gt(g_i)|^2 with its gradient.
inline LossResult weighted_point_loss(const TransformParams& theta_hat,
                                      const TransformParams& theta_gt, const Grid& grid,
                                      std::span<const double> weights) {
  const std::size_t p = theta_hat.size();
  LossResult out{0.0, std::vector<double>(p, 0.0)};
  std::vector<double> jx(p), jy(p);
  for (std::size_t i = 0; i < grid.size(); ++i) {
    if (weights[i] == 0.0) continue;
    const Point2 a = map_point(theta_hat, grid.points[i], jx, jy, Singularity::Clamp, i);
    const Point2 b = map_point(theta_gt, grid.points[i], {}, {}, Singularity::Clamp, i);
    const double dx = a.x - b.x;
    const double dy = a.y - b.y;
    out.value += weights[i] * (dx * dx + dy * dy);
    for (std::size_t k = 0; k < p; ++k) out.grad[k] += 2.0 * weights[i] * (dx * jx[k] + dy * jy[k]);
  }
  return out;
}

}  // namespace detail

/// Mean squared distance between the two transforms' images of the grid.
inline LossResult grid_loss_with_grad(const TransformParams& theta_hat,
                                      const TransformParams& theta_gt, const Grid& grid) {
  const std::vector<double> w(grid.size(), 1.0 / static_cast<double>(grid.size()));
  return detail::weighted_point_loss(theta_hat, theta_gt, grid, w);
}

inline double grid_loss(const TransformParams& theta_hat, const TransformParams& theta_gt,
                        const Grid& grid) {
  return grid_loss_with_grad(theta_hat, theta_gt, grid).value;
}

/// Weighted sum of squared grid distances (no 1/N factor). With
/// `normalize_weights` the sum is divided by the total weight.
inline LossResult weighted_grid_loss_with_grad(const TransformParams& theta_hat,
                                               const TransformParams& theta_gt, const Grid& grid,
                                               std::span<const double> weights,
                                               bool normalize_weights = false) {
  if (weights.size() != grid.size()) throw UsageError("weight vector does not match grid");
  const double total = std::accumulate(weights.begin(), weights.end(), 0.0);
  if (!(total > 0.0)) throw NumericalError("degenerate objective: all grid weights are zero");
  auto out = detail::weighted_point_loss(theta_hat, theta_gt, grid, weights);
  if (normalize_weights) {
    out.value /= total;
    for (auto& g : out.grad) g /= total;
  }
  return out;
}

inline double weighted_grid_loss(const TransformParams& theta_hat, const TransformParams& theta_gt,
                                 const Grid& grid, std::span<const double> weights,
                                 bool normalize_weights = false) {
  return weighted_grid_loss_with_grad(theta_hat, theta_gt, grid, weights, normalize_weights).value;
}

namespace detail {

// Canonical homography and d canonical / d raw (row-major 9x9).
inline std::pair<std::vector<double>, std::vector<double>> canonical_with_jacobian(
    const TransformParams& h) {
  const auto norm = normalize_homography(h, HomographyNorm::H9One);
  std::vector<double> jac(81, 0.0);
  const auto& v = h.values();
  if (!norm.used_fallback) {
    const double h9 = v[8];
    for (int i = 0; i < 8; ++i) {
      jac[i * 9 + i] = 1.0 / h9;
      jac[i * 9 + 8] = -v[i] / (h9 * h9);
    }
  } else {
    double n2 = 0.0;
    for (double x : v) n2 += x * x;
    const double n = std::sqrt(n2);
    const double s = (v[8] < 0.0 ? -1.0 : 1.0) * 3.0 / n;
    for (int i = 0; i < 9; ++i) {
      for (int j = 0; j < 9; ++j) jac[i * 9 + j] = s * ((i == j ? 1.0 : 0.0) - v[i] * v[j] / n2);
    }
  }
  return {norm.params.values(), std::move(jac)};
}

}  // namespace detail

/// Mean squared difference of parameter vectors; homographies are compared in
/// canonical (h9 = 1) form so projectively equal labels give zero.
inline LossResult param_mse_loss_with_grad(const TransformParams& theta_hat,
                                           const TransformParams& theta_gt) {
  if (theta_hat.kind() != theta_gt.kind()) {
    throw UsageError("parameter MSE needs matching transform kinds (" +
                     std::string(to_string(theta_hat.kind())) + " vs " +
                     std::string(to_string(theta_gt.kind())) + ")");
  }
  const std::size_t p = theta_hat.size();
  LossResult out{0.0, std::vector<double>(p, 0.0)};
  if (theta_hat.kind() == TransformKind::Homography) {
    const auto [a, jac] = detail::canonical_with_jacobian(theta_hat);
    const auto b = canonicalize_homography(theta_gt).values();
    for (std::size_t i = 0; i < p; ++i) {
      const double diff = a[i] - b[i];
      out.value += diff * diff / static_cast<double>(p);
      const double g = 2.0 * diff / static_cast<double>(p);
      for (std::size_t j = 0; j < p; ++j) out.grad[j] += g * jac[i * 9 + j];
    }
    return out;
  }
  for (std::size_t i = 0; i < p; ++i) {
    const double diff = theta_hat[i] - theta_gt[i];
    out.value += diff * diff / static_cast<double>(p);
    out.grad[i] = 2.0 * diff / static_cast<double>(p);
  }
  return out;
}

inline double param_mse_loss(const TransformParams& theta_hat, const TransformParams& theta_gt) {
  return param_mse_loss_with_grad(theta_hat, theta_gt).value;
}

enum class LossKind { Weighted, Grid, Mse };

inline std::string_view to_string(LossKind kind) {
  switch (kind) {
    case LossKind::Weighted: return "weighted";
    case LossKind::Grid: return "grid";
    case LossKind::Mse: return "mse";
  }
  return "unknown";
}

inline LossKind parse_loss_kind(std::string_view name) {
  if (name == "weighted") return LossKind::Weighted;
  if (name == "grid") return LossKind::Grid;
  if (name == "mse") return LossKind::Mse;
  throw UsageError("unknown loss kind '" + std::string(name) + "'");
}

struct LossConfig {
  LossKind kind = LossKind::Weighted;
  GaussianWeightConfig weights;
  bool normalize_weights = false;
  int grid_points_per_axis = 20;
};

/// Training objective with its evaluation grid and weights precomputed.
class Objective {
 public:
  explicit Objective(LossConfig cfg)
      : cfg_(cfg), grid_(make_grid(cfg.grid_points_per_axis)),
        weights_(gaussian_weights(grid_, cfg.weights)) {}

  [[nodiscard]] LossResult operator()(const TransformParams& theta_hat,
                                      const TransformParams& theta_gt) const {
    switch (cfg_.kind) {
      case LossKind::Weighted:
        return weighted_grid_loss_with_grad(theta_hat, theta_gt, grid_, weights_,
                                            cfg_.normalize_weights);
      case LossKind::Grid: return grid_loss_with_grad(theta_hat, theta_gt, grid_);
      case LossKind::Mse: return param_mse_loss_with_grad(theta_hat, theta_gt);
    }
    throw UsageError("unknown loss kind");
  }

  [[nodiscard]] const LossConfig& config() const noexcept { return cfg_; }
  [[nodiscard]] const Grid& grid() const noexcept { return grid_; }
  [[nodiscard]] const std::vector<double>& weights() const noexcept { return weights_; }

 private:
  LossConfig cfg_;
  Grid grid_;
  std::vector<double> weights_;
};

}  // namespace geomatch
