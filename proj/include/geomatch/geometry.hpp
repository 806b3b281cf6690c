#pragma once

#include <Eigen/Dense>

#include <array>
#include <cmath>
#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "geomatch/error.hpp"

namespace geomatch {

/// Point in normalized image coordinates; the image spans [-1, 1] on both axes.
struct Point2 {
  double x = 0.0;
  double y = 0.0;

  friend bool operator==(const Point2&, const Point2&) = default;
};

enum class TransformKind { Affine, Homography, Tps };

inline constexpr int kTpsLatticeSide = 3;
inline constexpr int kTpsControlPoints = kTpsLatticeSide * kTpsLatticeSide;

// Guard on the projective denominator w' of a homography.
inline constexpr double kProjectiveEpsilon = 1e-8;

constexpr std::size_t param_count(TransformKind kind) {
  switch (kind) {
    case TransformKind::Affine: return 6;
    case TransformKind::Homography: return 9;
    case TransformKind::Tps: return 2 * kTpsControlPoints;
  }
  return 0;
}

inline std::string_view to_string(TransformKind kind) {
  switch (kind) {
    case TransformKind::Affine: return "affine";
    case TransformKind::Homography: return "homography";
    case TransformKind::Tps: return "tps";
  }
  return "unknown";
}

inline TransformKind parse_transform_kind(std::string_view name) {
  if (name == "affine") return TransformKind::Affine;
  if (name == "homography" || name == "homo") return TransformKind::Homography;
  if (name == "tps") return TransformKind::Tps;
  throw UsageError("unknown transform kind '" + std::string(name) + "'");
}

/// Flat parameter vector of an affine, homography or TPS transform.
///
/// Affine: (a11, a12, tx, a21, a22, ty), row-major.
/// Homography: (h1 .. h9), row-major 3x3; h9 is a free parameter.
/// Tps: 9 x-offsets followed by 9 y-offsets of the 3x3 control lattice,
///      lattice listed row-major (x fastest).
class TransformParams {
 public:
  TransformParams(TransformKind kind, std::vector<double> values)
      : kind_(kind), values_(std::move(values)) {
    validate();
  }

  static TransformParams identity(TransformKind kind) {
    switch (kind) {
      case TransformKind::Affine: return {kind, {1, 0, 0, 0, 1, 0}};
      case TransformKind::Homography: return {kind, {1, 0, 0, 0, 1, 0, 0, 0, 1}};
      case TransformKind::Tps: return {kind, std::vector<double>(param_count(kind), 0.0)};
    }
    throw UsageError("unknown transform kind");
  }

  static TransformParams homography(const Eigen::Matrix3d& m) {
    return {TransformKind::Homography,
            {m(0, 0), m(0, 1), m(0, 2), m(1, 0), m(1, 1), m(1, 2), m(2, 0), m(2, 1), m(2, 2)}};
  }

  [[nodiscard]] TransformKind kind() const noexcept { return kind_; }
  [[nodiscard]] const std::vector<double>& values() const noexcept { return values_; }
  [[nodiscard]] std::size_t size() const noexcept { return values_.size(); }
  [[nodiscard]] double operator[](std::size_t i) const { return values_[i]; }

  [[nodiscard]] bool is_projective() const noexcept { return kind_ != TransformKind::Tps; }

  /// 3x3 matrix form of an affine or homography transform.
  [[nodiscard]] Eigen::Matrix3d matrix() const {
    Eigen::Matrix3d m;
    const auto& v = values_;
    switch (kind_) {
      case TransformKind::Affine:
        m << v[0], v[1], v[2], v[3], v[4], v[5], 0, 0, 1;
        return m;
      case TransformKind::Homography:
        m << v[0], v[1], v[2], v[3], v[4], v[5], v[6], v[7], v[8];
        return m;
      case TransformKind::Tps: break;
    }
    throw UsageError("TPS transform has no matrix form");
  }

  [[nodiscard]] TransformParams scaled(double lambda) const {
    auto v = values_;
    for (auto& x : v) x *= lambda;
    return {kind_, std::move(v)};
  }

  friend bool operator==(const TransformParams&, const TransformParams&) = default;

 private:
  void validate() const {
    if (values_.size() != param_count(kind_)) {
      throw DataError(std::string(to_string(kind_)) + " transform expects " +
                      std::to_string(param_count(kind_)) + " parameters, got " +
                      std::to_string(values_.size()));
    }
    double norm2 = 0.0;
    for (double v : values_) {
      if (!std::isfinite(v)) throw NumericalError("non-finite transform parameter");
      norm2 += v * v;
    }
    if (kind_ == TransformKind::Homography && norm2 == 0.0) {
      throw NumericalError("homography parameters are all zero");
    }
  }

  TransformKind kind_;
  std::vector<double> values_;
};

/// Evenly spaced evaluation points over [-1, 1]^2, row-major (x fastest).
struct Grid {
  std::vector<Point2> points;
  int n_per_axis = 0;

  [[nodiscard]] std::size_t size() const noexcept { return points.size(); }
};

inline Grid make_grid(int n_per_axis) {
  if (n_per_axis < 2) throw UsageError("grid needs at least 2 points per axis");
  Grid grid;
  grid.n_per_axis = n_per_axis;
  grid.points.reserve(static_cast<std::size_t>(n_per_axis) * n_per_axis);
  const double step = 2.0 / (n_per_axis - 1);
  for (int r = 0; r < n_per_axis; ++r) {
    // Last coordinate set exactly so endpoints hit +1 without rounding drift.
    const double y = (r == n_per_axis - 1) ? 1.0 : -1.0 + r * step;
    for (int c = 0; c < n_per_axis; ++c) {
      const double x = (c == n_per_axis - 1) ? 1.0 : -1.0 + c * step;
      grid.points.push_back({x, y});
    }
  }
  return grid;
}

/// TPS radial basis U(r) = r^2 log r^2, written in terms of r^2.
inline double tps_kernel(double r2) { return r2 > 0.0 ? r2 * std::log(r2) : 0.0; }

/// Interpolation weights of the 3x3 TPS control lattice over [-1, 1]^2.
///
/// The displacement at p is sum_k weights(p)[k] * offset_k. Weights come from the
/// inverse of the bordered kernel system [[K, P], [P^T, 0]], so each control point
/// moves by exactly its own offset and the field carries an affine part.
class TpsBasis {
 public:
  TpsBasis() {
    for (int r = 0; r < kTpsLatticeSide; ++r) {
      for (int c = 0; c < kTpsLatticeSide; ++c) {
        control_[r * kTpsLatticeSide + c] = {-1.0 + c * 2.0 / (kTpsLatticeSide - 1),
                                             -1.0 + r * 2.0 / (kTpsLatticeSide - 1)};
      }
    }
    constexpr int n = kTpsControlPoints + 3;
    Eigen::Matrix<double, n, n> system = Eigen::Matrix<double, n, n>::Zero();
    for (int i = 0; i < kTpsControlPoints; ++i) {
      for (int j = 0; j < kTpsControlPoints; ++j) {
        const double dx = control_[i].x - control_[j].x;
        const double dy = control_[i].y - control_[j].y;
        system(i, j) = tps_kernel(dx * dx + dy * dy);
      }
      system(i, kTpsControlPoints) = system(kTpsControlPoints, i) = 1.0;
      system(i, kTpsControlPoints + 1) = system(kTpsControlPoints + 1, i) = control_[i].x;
      system(i, kTpsControlPoints + 2) = system(kTpsControlPoints + 2, i) = control_[i].y;
    }
    Eigen::FullPivLU<Eigen::Matrix<double, n, n>> lu(system);
    if (!lu.isInvertible()) throw DegenerateConfigurationError("singular TPS kernel system");
    const Eigen::Matrix<double, n, n> inv = lu.inverse();
    solve_ = inv.leftCols<kTpsControlPoints>();
  }

  static const TpsBasis& standard() {
    static const TpsBasis basis;
    return basis;
  }

  [[nodiscard]] const std::array<Point2, kTpsControlPoints>& control_points() const noexcept {
    return control_;
  }

  [[nodiscard]] std::array<double, kTpsControlPoints> weights(Point2 p) const {
    Eigen::Matrix<double, kTpsControlPoints + 3, 1> phi;
    for (int j = 0; j < kTpsControlPoints; ++j) {
      const double dx = p.x - control_[j].x;
      const double dy = p.y - control_[j].y;
      phi(j) = tps_kernel(dx * dx + dy * dy);
    }
    phi(kTpsControlPoints) = 1.0;
    phi(kTpsControlPoints + 1) = p.x;
    phi(kTpsControlPoints + 2) = p.y;
    const Eigen::Matrix<double, kTpsControlPoints, 1> w = solve_.transpose() * phi;
    std::array<double, kTpsControlPoints> out{};
    for (int k = 0; k < kTpsControlPoints; ++k) out[k] = w(k);
    return out;
  }

 private:
  std::array<Point2, kTpsControlPoints> control_{};
  Eigen::Matrix<double, kTpsControlPoints + 3, kTpsControlPoints> solve_;
};

/// How a homography handles |w'| below kProjectiveEpsilon.
enum class Singularity {
  Throw,  // raise ProjectiveSingularityError
  Clamp   // replace w' by sign(w') * epsilon (used by losses and warping)
};

/// Maps one point. When `jx`/`jy` are non-empty they receive d x'/d params and
/// d y'/d params (length param_count). Under Clamp, a clamped w' is treated as
/// a constant for differentiation.
inline Point2 map_point(const TransformParams& t, Point2 p, std::span<double> jx = {},
                        std::span<double> jy = {}, Singularity policy = Singularity::Throw,
                        std::size_t index = 0) {
  const auto& v = t.values();
  const bool jac = !jx.empty();
  switch (t.kind()) {
    case TransformKind::Affine: {
      if (jac) {
        std::fill(jx.begin(), jx.end(), 0.0);
        std::fill(jy.begin(), jy.end(), 0.0);
        jx[0] = p.x, jx[1] = p.y, jx[2] = 1.0;
        jy[3] = p.x, jy[4] = p.y, jy[5] = 1.0;
      }
      return {v[0] * p.x + v[1] * p.y + v[2], v[3] * p.x + v[4] * p.y + v[5]};
    }
    case TransformKind::Homography: {
      const double u = v[0] * p.x + v[1] * p.y + v[2];
      const double s = v[3] * p.x + v[4] * p.y + v[5];
      double w = v[6] * p.x + v[7] * p.y + v[8];
      bool clamped = false;
      if (std::abs(w) < kProjectiveEpsilon || !std::isfinite(w)) {
        if (policy == Singularity::Throw) throw ProjectiveSingularityError(index, p.x, p.y, w);
        w = (w < 0.0 ? -1.0 : 1.0) * kProjectiveEpsilon;
        clamped = true;
      }
      const Point2 out{u / w, s / w};
      if (jac) {
        const double iw = 1.0 / w;
        jx[0] = p.x * iw, jx[1] = p.y * iw, jx[2] = iw;
        jx[3] = jx[4] = jx[5] = 0.0;
        jy[0] = jy[1] = jy[2] = 0.0;
        jy[3] = p.x * iw, jy[4] = p.y * iw, jy[5] = iw;
        if (clamped) {
          jx[6] = jx[7] = jx[8] = jy[6] = jy[7] = jy[8] = 0.0;
        } else {
          jx[6] = -out.x * p.x * iw, jx[7] = -out.x * p.y * iw, jx[8] = -out.x * iw;
          jy[6] = -out.y * p.x * iw, jy[7] = -out.y * p.y * iw, jy[8] = -out.y * iw;
        }
      }
      return out;
    }
    case TransformKind::Tps: {
      const auto w = TpsBasis::standard().weights(p);
      Point2 out = p;
      for (int k = 0; k < kTpsControlPoints; ++k) {
        out.x += w[k] * v[k];
        out.y += w[k] * v[kTpsControlPoints + k];
      }
      if (jac) {
        std::fill(jx.begin(), jx.end(), 0.0);
        std::fill(jy.begin(), jy.end(), 0.0);
        for (int k = 0; k < kTpsControlPoints; ++k) {
          jx[k] = w[k];
          jy[kTpsControlPoints + k] = w[k];
        }
      }
      return out;
    }
  }
  throw UsageError("unknown transform kind");
}

inline std::vector<Point2> map_points(const TransformParams& t, std::span<const Point2> pts,
                                      Singularity policy = Singularity::Throw) {
  std::vector<Point2> out;
  out.reserve(pts.size());
  for (std::size_t i = 0; i < pts.size(); ++i) {
    out.push_back(map_point(t, pts[i], {}, {}, policy, i));
  }
  return out;
}

/// Applies `inner` first, then `outer`.
inline std::vector<Point2> compose_apply(const TransformParams& outer, const TransformParams& inner,
                                         std::span<const Point2> pts,
                                         Singularity policy = Singularity::Throw) {
  const auto mid = map_points(inner, pts, policy);
  return map_points(outer, mid, policy);
}

/// Single-matrix form of outer(inner(.)) when both stages are affine or homography.
inline std::optional<TransformParams> compose_matrix(const TransformParams& outer,
                                                     const TransformParams& inner) {
  if (!outer.is_projective() || !inner.is_projective()) return std::nullopt;
  const Eigen::Matrix3d m = outer.matrix() * inner.matrix();
  if (outer.kind() == TransformKind::Affine && inner.kind() == TransformKind::Affine) {
    return TransformParams(TransformKind::Affine,
                           {m(0, 0), m(0, 1), m(0, 2), m(1, 0), m(1, 1), m(1, 2)});
  }
  return TransformParams::homography(m);
}

/// Inverse of an affine or homography transform, returned as a homography.
inline TransformParams invert(const TransformParams& t) {
  const Eigen::Matrix3d m = t.matrix();
  const double det = m.determinant();
  if (!(std::abs(det) > 1e-14)) throw DegenerateConfigurationError("transform is not invertible");
  return TransformParams::homography(m.inverse());
}

enum class HomographyNorm {
  H9One,     // h9 = 1
  Frobenius  // ||h||_F = 3 with h9 >= 0
};

struct NormalizedHomography {
  TransformParams params;
  // Set when H9One was requested but |h9| <= 1e-6 forced Frobenius scaling.
  bool used_fallback = false;
};

inline NormalizedHomography normalize_homography(const TransformParams& h, HomographyNorm mode) {
  if (h.kind() != TransformKind::Homography) throw UsageError("normalize_homography needs a homography");
  const double h9 = h[8];
  if (mode == HomographyNorm::H9One && std::abs(h9) > 1e-6) {
    auto out = h.scaled(1.0 / h9);
    auto v = out.values();
    v[8] = 1.0;
    return {TransformParams(TransformKind::Homography, std::move(v)), false};
  }
  double norm2 = 0.0;
  for (double x : h.values()) norm2 += x * x;
  const double sign = h9 < 0.0 ? -1.0 : 1.0;
  return {h.scaled(sign * 3.0 / std::sqrt(norm2)), mode == HomographyNorm::H9One};
}

/// Label convention for stored ground truth: h9 = 1, Frobenius when h9 vanishes.
inline TransformParams canonicalize_homography(const TransformParams& h) {
  return normalize_homography(h, HomographyNorm::H9One).params;
}

inline double cross(Point2 o, Point2 a, Point2 b) {
  return (a.x - o.x) * (b.y - o.y) - (a.y - o.y) * (b.x - o.x);
}

inline bool has_collinear_triple(std::span<const Point2, 4> q, double tol = 1e-10) {
  for (int i = 0; i < 4; ++i) {
    for (int j = i + 1; j < 4; ++j) {
      for (int k = j + 1; k < 4; ++k) {
        if (std::abs(cross(q[i], q[j], q[k])) < tol) return true;
      }
    }
  }
  return false;
}

/// Exact homography taking src[i] to dst[i] from four correspondences.
///
/// Null vector of the 8x9 DLT system via SVD, then canonicalized.
inline TransformParams fit_homography_dlt(std::span<const Point2, 4> src,
                                          std::span<const Point2, 4> dst) {
  if (has_collinear_triple(src) || has_collinear_triple(dst)) {
    throw DegenerateConfigurationError("DLT: three of the four points are collinear");
  }
  Eigen::Matrix<double, 9, 9> a = Eigen::Matrix<double, 9, 9>::Zero();
  for (int i = 0; i < 4; ++i) {
    const double x = src[i].x, y = src[i].y;
    const double u = dst[i].x, v = dst[i].y;
    a.row(2 * i) << x, y, 1, 0, 0, 0, -u * x, -u * y, -u;
    a.row(2 * i + 1) << 0, 0, 0, x, y, 1, -v * x, -v * y, -v;
  }
  // Row 9 stays zero so the square SVD yields the full right null space.
  Eigen::JacobiSVD<Eigen::Matrix<double, 9, 9>> svd(a, Eigen::ComputeFullV);
  const auto& sv = svd.singularValues();
  if (!(sv(7) > 1e-12 * sv(0))) throw DegenerateConfigurationError("DLT: rank-deficient system");
  const Eigen::Matrix<double, 9, 1> h = svd.matrixV().col(8);
  std::vector<double> values(h.data(), h.data() + 9);
  return canonicalize_homography(TransformParams(TransformKind::Homography, std::move(values)));
}

}  // namespace geomatch
