#pragma once

#include <cmath>
#include <span>
#include <vector>

#include "geomatch/geometry.hpp"
#include "geomatch/image.hpp"
#include "geomatch/parallel.hpp"

namespace geomatch {

// Align-corners mapping: -1 hits pixel 0, +1 hits pixel (extent - 1).
inline double to_pixel(double normalized, int extent) {
  return (normalized + 1.0) * 0.5 * (extent - 1);
}

inline double to_normalized(double pixel, int extent) {
  return extent > 1 ? 2.0 * pixel / (extent - 1) - 1.0 : 0.0;
}

namespace detail {

struct BilinearTap {
  int x0, y0;
  double fx, fy;
};

inline BilinearTap bilinear_tap(const Image& img, Point2 p) {
  const double px = to_pixel(p.x, img.width);
  const double py = to_pixel(p.y, img.height);
  const double fx0 = std::floor(px);
  const double fy0 = std::floor(py);
  return {static_cast<int>(fx0), static_cast<int>(fy0), px - fx0, py - fy0};
}

inline bool pixel_inside(const Image& img, int row, int col) {
  return row >= 0 && row < img.height && col >= 0 && col < img.width;
}

inline bool tap_in_range(Point2 p) {
  // Far-away coordinates would overflow the int cast; all four taps are padding.
  return std::abs(p.x) < 1e6 && std::abs(p.y) < 1e6;
}

}  // namespace detail

/// Bilinear samples at normalized coordinates with zero padding outside the image.
/// Result is channel-last: coords.size() * img.channels values.
inline std::vector<double> sample_bilinear(const Image& img, std::span<const Point2> coords) {
  const int nc = img.channels;
  std::vector<double> out(coords.size() * nc, 0.0);
  for (std::size_t i = 0; i < coords.size(); ++i) {
    if (!detail::tap_in_range(coords[i])) continue;
    const auto tap = detail::bilinear_tap(img, coords[i]);
    const double wts[4] = {(1 - tap.fx) * (1 - tap.fy), tap.fx * (1 - tap.fy),
                           (1 - tap.fx) * tap.fy, tap.fx * tap.fy};
    const int rows[4] = {tap.y0, tap.y0, tap.y0 + 1, tap.y0 + 1};
    const int cols[4] = {tap.x0, tap.x0 + 1, tap.x0, tap.x0 + 1};
    for (int n = 0; n < 4; ++n) {
      if (wts[n] == 0.0 || !detail::pixel_inside(img, rows[n], cols[n])) continue;
      for (int ch = 0; ch < nc; ++ch) out[i * nc + ch] += wts[n] * img.at(rows[n], cols[n], ch);
    }
  }
  return out;
}

struct BilinearGrad {
  std::vector<Point2> coords;  // d loss / d (normalized x, y)
  Image image;                 // d loss / d pixel values
};

/// Reverse-mode pass of sample_bilinear for upstream gradient `grad_out`.
inline BilinearGrad sample_bilinear_backward(const Image& img, std::span<const Point2> coords,
                                             std::span<const double> grad_out) {
  const int nc = img.channels;
  BilinearGrad g{std::vector<Point2>(coords.size()), Image(img.height, img.width, nc)};
  const double sx = 0.5 * (img.width - 1);
  const double sy = 0.5 * (img.height - 1);
  auto value = [&](int r, int c, int ch) {
    return detail::pixel_inside(img, r, c) ? img.at(r, c, ch) : 0.0;
  };
  for (std::size_t i = 0; i < coords.size(); ++i) {
    if (!detail::tap_in_range(coords[i])) continue;
    const auto t = detail::bilinear_tap(img, coords[i]);
    double gx = 0.0, gy = 0.0;
    for (int ch = 0; ch < nc; ++ch) {
      const double go = grad_out[i * nc + ch];
      if (go == 0.0) continue;
      const double v00 = value(t.y0, t.x0, ch), v01 = value(t.y0, t.x0 + 1, ch);
      const double v10 = value(t.y0 + 1, t.x0, ch), v11 = value(t.y0 + 1, t.x0 + 1, ch);
      gx += go * ((1 - t.fy) * (v01 - v00) + t.fy * (v11 - v10));
      gy += go * ((1 - t.fx) * (v10 - v00) + t.fx * (v11 - v01));
      const double wts[4] = {(1 - t.fx) * (1 - t.fy), t.fx * (1 - t.fy), (1 - t.fx) * t.fy,
                             t.fx * t.fy};
      const int rows[4] = {t.y0, t.y0, t.y0 + 1, t.y0 + 1};
      const int cols[4] = {t.x0, t.x0 + 1, t.x0, t.x0 + 1};
      for (int n = 0; n < 4; ++n) {
        if (detail::pixel_inside(img, rows[n], cols[n])) {
          g.image.at(rows[n], cols[n], ch) += wts[n] * go;
        }
      }
    }
    g.coords[i] = {gx * sx, gy * sy};
  }
  return g;
}

/// Normalized location of output pixel (row, col) on an out_h x out_w lattice.
inline Point2 pixel_location(int row, int col, int out_h, int out_w) {
  return {to_normalized(col, out_w), to_normalized(row, out_h)};
}

/// Inverse-mapping warp: output(p) = img(t(p)); t maps output coordinates to
/// input coordinates. Near-singular homography denominators are clamped.
inline Image warp_image(const Image& img, const TransformParams& t, int out_h, int out_w) {
  if (out_h < 1 || out_w < 1) throw UsageError("warp output dimensions must be positive");
  Image out(out_h, out_w, img.channels);
  parallel_for(static_cast<std::size_t>(out_h), [&](std::size_t r) {
    std::vector<Point2> row(out_w);
    for (int c = 0; c < out_w; ++c) row[c] = pixel_location(static_cast<int>(r), c, out_h, out_w);
    const auto src = map_points(t, row, Singularity::Clamp);
    const auto vals = sample_bilinear(img, src);
    std::copy(vals.begin(), vals.end(),
              out.data.begin() + static_cast<std::ptrdiff_t>(r * out_w * img.channels));
  });
  return out;
}

inline Image warp_image(const Image& img, const TransformParams& t) {
  return warp_image(img, t, img.height, img.width);
}

/// Fraction of output pixels whose source location lies inside the input image.
inline double coverage_fraction(const TransformParams& t, int out_h, int out_w) {
  std::size_t inside = 0;
  for (int r = 0; r < out_h; ++r) {
    for (int c = 0; c < out_w; ++c) {
      const Point2 q = map_point(t, pixel_location(r, c, out_h, out_w), {}, {}, Singularity::Clamp);
      if (std::abs(q.x) <= 1.0 && std::abs(q.y) <= 1.0) ++inside;
    }
  }
  return static_cast<double>(inside) / (static_cast<double>(out_h) * out_w);
}

}  // namespace geomatch
