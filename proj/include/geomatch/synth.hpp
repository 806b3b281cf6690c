#pragma once

#include <nlohmann/json.hpp>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "geomatch/error.hpp"
#include "geomatch/geometry.hpp"
#include "geomatch/image.hpp"
#include "geomatch/parallel.hpp"
#include "geomatch/rng.hpp"
#include "geomatch/warp.hpp"

namespace geomatch {

using Quad = std::array<Point2, 4>;

struct GenConfig {
  double max_perturb_frac = 0.25;
  int image_size = 64;
  std::uint64_t seed = 0;
  int count = 100;

  void validate() const {
    if (!(max_perturb_frac >= 0.0 && max_perturb_frac <= 0.5)) {
      throw UsageError("max_perturb_frac must lie in [0, 0.5]");
    }
    if (image_size < 16) throw UsageError("image size must be at least 16 pixels");
    if (count < 0) throw UsageError("sample count must be non-negative");
  }
};

namespace detail {

inline double smooth_coverage(double signed_distance_px) {
  return std::clamp(0.5 - signed_distance_px, 0.0, 1.0);
}

struct Primitive {
  int type;  // 0 rectangle, 1 ellipse, 2 line segment
  double cx, cy, a, b, angle, thickness, opacity;
  std::array<double, 3> color;

  // Signed distance in pixels (negative inside).
  [[nodiscard]] double distance(double x, double y) const {
    const double ca = std::cos(angle), sa = std::sin(angle);
    const double lx = ca * (x - cx) + sa * (y - cy);
    const double ly = -sa * (x - cx) + ca * (y - cy);
    switch (type) {
      case 0: {
        const double qx = std::abs(lx) - a, qy = std::abs(ly) - b;
        const double outside = std::hypot(std::max(qx, 0.0), std::max(qy, 0.0));
        return outside + std::min(std::max(qx, qy), 0.0);
      }
      case 1: {
        // First-order distance to the ellipse boundary.
        const double k = std::hypot(lx / a, ly / b);
        const double grad = std::hypot(lx / (a * a), ly / (b * b));
        return grad > 1e-12 ? k * (k - 1.0) / grad : -std::min(a, b);
      }
      default: {
        const double t = std::clamp(lx, -a, a);
        return std::hypot(lx - t, ly) - thickness;
      }
    }
  }
};

}  // namespace detail

/// Deterministic RGB toy image: textured background plus 3-8 anti-aliased shapes.
inline Image gen_toy_image(Rng& rng, int size) {
  if (size < 16) throw UsageError("toy images need size >= 16");
  Image img(size, size, 3);
  std::array<double, 3> base{}, gx{}, gy{};
  for (int c = 0; c < 3; ++c) {
    base[c] = rng.uniform(0.25, 0.75);
    gx[c] = rng.uniform(-0.25, 0.25);
    gy[c] = rng.uniform(-0.25, 0.25);
  }
  struct Wave {
    double kx, ky, phase, amp;
  };
  std::array<Wave, 3> waves{};
  for (auto& w : waves) {
    const double freq = rng.uniform(1.5, 6.0) * 6.283185307179586 / size;
    const double theta = rng.uniform(0.0, 3.141592653589793);
    w = {freq * std::cos(theta), freq * std::sin(theta), rng.uniform(0.0, 6.283185307179586),
         rng.uniform(0.03, 0.1)};
  }
  for (int r = 0; r < size; ++r) {
    for (int c = 0; c < size; ++c) {
      const double u = static_cast<double>(c) / (size - 1) - 0.5;
      const double v = static_cast<double>(r) / (size - 1) - 0.5;
      double tex = 0.0;
      for (const auto& w : waves) tex += w.amp * std::sin(w.kx * c + w.ky * r + w.phase);
      for (int ch = 0; ch < 3; ++ch) {
        img.at(r, c, ch) = base[ch] + gx[ch] * u + gy[ch] * v + tex * (ch == 1 ? 0.8 : 1.0) +
                           0.02 * (rng.uniform() - 0.5);
      }
    }
  }
  const int count = rng.uniform_int(3, 8);
  for (int n = 0; n < count; ++n) {
    detail::Primitive p{};
    p.type = rng.uniform_int(0, 2);
    p.cx = rng.uniform(0.1, 0.9) * size;
    p.cy = rng.uniform(0.1, 0.9) * size;
    p.a = rng.uniform(0.06, 0.25) * size;
    p.b = rng.uniform(0.06, 0.25) * size;
    p.angle = rng.uniform(0.0, 3.141592653589793);
    p.thickness = rng.uniform(0.6, 2.0);
    p.opacity = rng.uniform(0.7, 1.0);
    for (auto& col : p.color) col = rng.uniform();
    for (int r = 0; r < size; ++r) {
      for (int c = 0; c < size; ++c) {
        const double cov = p.opacity * detail::smooth_coverage(p.distance(c, r));
        if (cov <= 0.0) continue;
        for (int ch = 0; ch < 3; ++ch) {
          double& v = img.at(r, c, ch);
          v = (1.0 - cov) * v + cov * p.color[ch];
        }
      }
    }
  }
  for (auto& v : img.data) v = std::clamp(v, 0.0, 1.0);
  return img;
}

inline Image gen_toy_image(std::uint64_t seed, int size) {
  Rng rng(seed);
  return gen_toy_image(rng, size);
}

/// Toy corpus; image i depends only on (seed, i).
inline std::vector<Image> generate_corpus(int count, int size, std::uint64_t seed) {
  std::vector<Image> corpus(static_cast<std::size_t>(count));
  parallel_for(corpus.size(), [&](std::size_t i) {
    corpus[i] = gen_toy_image(derive_seed(seed, i, "corpus"), size);
  });
  return corpus;
}

/// Normalized image corners in cyclic order.
inline Quad unit_corners() { return {{{-1, -1}, {1, -1}, {1, 1}, {-1, 1}}}; }

/// Strictly convex with consistent orientation and non-vanishing turns.
inline bool is_convex(const Quad& q, double tol = 1e-9) {
  int sign = 0;
  for (int i = 0; i < 4; ++i) {
    const double c = cross(q[i], q[(i + 1) % 4], q[(i + 2) % 4]);
    if (std::abs(c) <= tol) return false;
    const int s = c > 0 ? 1 : -1;
    if (sign == 0) sign = s;
    if (s != sign) return false;
  }
  return true;
}

struct CornerPair {
  Quad src;
  Quad dst;
};

/// Each corner moves by an independent uniform offset of at most
/// 2 * max_perturb_frac per axis (the image is 2 units wide).
inline CornerPair perturb_corners(Rng& rng, double max_perturb_frac) {
  const Quad src = unit_corners();
  const double r = 2.0 * max_perturb_frac;
  for (int attempt = 0; attempt < 100; ++attempt) {
    Quad dst = src;
    if (r > 0.0) {
      for (auto& p : dst) {
        p.x += rng.uniform(-r, r);
        p.y += rng.uniform(-r, r);
      }
    }
    if (is_convex(dst)) return {src, dst};
  }
  throw DataError("corner perturbation: 100 consecutive non-convex draws");
}

struct HomographySample {
  int id = 0;
  Image source;
  TransformParams h_gt = TransformParams::identity(TransformKind::Homography);
  Image warped;
  Quad corners_src{};
  Quad corners_dst{};
};

/// Perturbs the corners, fits the corner homography and warps: warped(p) = source(h_gt(p)).
inline HomographySample make_sample(const Image& img, Rng& rng, const GenConfig& cfg, int id = 0) {
  cfg.validate();
  const Grid check = make_grid(20);
  for (int attempt = 0; attempt < 100; ++attempt) {
    const auto corners = perturb_corners(rng, cfg.max_perturb_frac);
    TransformParams h = TransformParams::identity(TransformKind::Homography);
    try {
      h = fit_homography_dlt(corners.src, corners.dst);
    } catch (const DegenerateConfigurationError&) {
      continue;
    }
    bool singular = false;
    for (const auto& p : check.points) {
      if (std::abs(h[6] * p.x + h[7] * p.y + h[8]) <= 1e-3) singular = true;
    }
    if (singular) continue;
    HomographySample s;
    s.id = id;
    s.source = img;
    s.h_gt = h;
    s.warped = warp_image(img, h);
    s.corners_src = corners.src;
    s.corners_dst = corners.dst;
    return s;
  }
  throw DataError("could not draw a non-degenerate homography sample");
}

/// Sample i uses corpus image i mod |corpus| and its own RNG stream, so the
/// result does not depend on generation order or thread count.
inline std::vector<HomographySample> generate_dataset(std::span<const Image> corpus,
                                                      const GenConfig& cfg) {
  cfg.validate();
  if (corpus.empty()) throw DataError("empty image corpus");
  std::vector<HomographySample> samples(static_cast<std::size_t>(cfg.count));
  parallel_for(samples.size(), [&](std::size_t i) {
    Rng rng(derive_seed(cfg.seed, i, "sample"));
    samples[i] = make_sample(corpus[i % corpus.size()], rng, cfg, static_cast<int>(i));
  });
  return samples;
}

// ---------------------------------------------------------------------------
// On-disk layout: manifest.jsonl + images/src_<id>.png + images/warp_<id>.png

inline std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline std::string sample_stem(int id) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "%06d", id);
  return buf;
}

inline std::string manifest_line(const HomographySample& s) {
  const std::string stem = sample_stem(s.id);
  std::ostringstream out;
  out << "{\"id\":" << s.id << ",\"source\":\"images/src_" << stem
      << ".png\",\"warped\":\"images/warp_" << stem << ".png\",\"h\":[";
  for (std::size_t i = 0; i < 9; ++i) out << (i ? "," : "") << format_double(s.h_gt[i]);
  auto quad = [&](const Quad& q) {
    out << "[";
    for (int i = 0; i < 4; ++i) {
      out << (i ? "," : "") << "[" << format_double(q[i].x) << "," << format_double(q[i].y) << "]";
    }
    out << "]";
  };
  out << "],\"corners_src\":";
  quad(s.corners_src);
  out << ",\"corners_dst\":";
  quad(s.corners_dst);
  out << "}";
  return out.str();
}

inline void write_dataset(const std::filesystem::path& dir, std::span<const HomographySample> samples) {
  namespace fs = std::filesystem;
  fs::create_directories(dir / "images");
  std::ofstream manifest(dir / "manifest.jsonl", std::ios::binary);
  if (!manifest) throw DataError("cannot write manifest in '" + dir.string() + "'");
  for (const auto& s : samples) {
    const std::string stem = sample_stem(s.id);
    write_png((dir / "images" / ("src_" + stem + ".png")).string(), s.source);
    write_png((dir / "images" / ("warp_" + stem + ".png")).string(), s.warped);
    manifest << manifest_line(s) << "\n";
  }
}

/// Reads a dataset directory. A directory without a manifest reads as empty.
inline std::vector<HomographySample> read_dataset(const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  std::vector<HomographySample> samples;
  const fs::path manifest_path = dir / "manifest.jsonl";
  if (!fs::exists(manifest_path)) return samples;
  std::ifstream manifest(manifest_path);
  std::string line;
  int line_no = 0;
  auto fail = [&](const std::string& why) -> DataError {
    return DataError(manifest_path.string() + ":" + std::to_string(line_no) + ": " + why);
  };
  while (std::getline(manifest, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    nlohmann::json rec;
    try {
      rec = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw fail(std::string("malformed JSON: ") + e.what());
    }
    try {
      HomographySample s;
      s.id = rec.at("id").get<int>();
      const auto h = rec.at("h").get<std::vector<double>>();
      if (h.size() != 9) throw fail("\"h\" must have 9 entries, got " + std::to_string(h.size()));
      s.h_gt = TransformParams(TransformKind::Homography, h);
      auto read_quad = [&](const char* key) {
        const auto pts = rec.at(key).get<std::vector<std::array<double, 2>>>();
        if (pts.size() != 4) throw fail(std::string("\"") + key + "\" must have 4 points");
        Quad q{};
        for (int i = 0; i < 4; ++i) q[i] = {pts[i][0], pts[i][1]};
        return q;
      };
      s.corners_src = read_quad("corners_src");
      s.corners_dst = read_quad("corners_dst");
      s.source = read_png((dir / rec.at("source").get<std::string>()).string());
      s.warped = read_png((dir / rec.at("warped").get<std::string>()).string());
      samples.push_back(std::move(s));
    } catch (const nlohmann::json::exception& e) {
      throw fail(std::string("invalid record: ") + e.what());
    }
  }
  return samples;
}

}  // namespace geomatch
