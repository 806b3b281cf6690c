#pragma once

#include <nlohmann/json.hpp>

#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <span>
#include <string>
#include <vector>

#include "geomatch/error.hpp"

namespace geomatch {

/// Dense descriptor field, row-major and channel-last: data[(row * w + col) * d + c].
struct FeatureMap {
  int h = 0;
  int w = 0;
  int d = 0;
  std::vector<double> data;

  FeatureMap() = default;
  FeatureMap(int h_, int w_, int d_, double fill = 0.0)
      : h(h_), w(w_), d(d_), data(static_cast<std::size_t>(h_) * w_ * d_, fill) {}

  [[nodiscard]] int cells() const noexcept { return h * w; }
  [[nodiscard]] std::span<const double> descriptor(int cell) const {
    return {data.data() + static_cast<std::size_t>(cell) * d, static_cast<std::size_t>(d)};
  }
  [[nodiscard]] bool same_shape(const FeatureMap& o) const noexcept {
    return h == o.h && w == o.w && d == o.d;
  }
};

/// Match scores of every f_B cell against every f_A cell.
///
/// data[(row * w + col) * (h * w) + k] scores f_B(row, col) against the f_A cell with
/// flat index k = col_k * h + row_k (column-major over f_A).
struct CorrelationMap {
  int h = 0;
  int w = 0;
  std::vector<double> data;

  [[nodiscard]] int k_dim() const noexcept { return h * w; }
  [[nodiscard]] double at(int row, int col, int k) const {
    return data[(static_cast<std::size_t>(row) * w + col) * k_dim() + k];
  }
};

enum class CorrelationKind { Pearson, Cosine };

inline std::string_view to_string(CorrelationKind kind) {
  return kind == CorrelationKind::Pearson ? "pearson" : "cosine";
}

inline CorrelationKind parse_correlation_kind(std::string_view name) {
  if (name == "pearson") return CorrelationKind::Pearson;
  if (name == "cosine") return CorrelationKind::Cosine;
  throw UsageError("unknown correlation kind '" + std::string(name) + "'");
}

/// Flat f_A index of spatial cell (row, col).
inline int flat_index(int row, int col, int h) { return col * h + row; }

namespace detail {

// Unit-normalized (optionally mean-centered) descriptors, laid out by flat index
// order for f_A and by row-major cell order for f_B, plus the pre-normalization norms.
struct NormalizedDescriptors {
  std::vector<double> unit;
  std::vector<double> norm;
};

inline NormalizedDescriptors normalize_descriptors(const FeatureMap& f, CorrelationKind kind,
                                                   bool column_major, const char* name) {
  if (kind == CorrelationKind::Pearson && f.d < 2) {
    throw UsageError("Pearson correlation needs at least 2 channels");
  }
  const int n = f.cells();
  NormalizedDescriptors out{std::vector<double>(static_cast<std::size_t>(n) * f.d),
                            std::vector<double>(n)};
  for (int row = 0; row < f.h; ++row) {
    for (int col = 0; col < f.w; ++col) {
      const auto src = f.descriptor(row * f.w + col);
      const int slot = column_major ? flat_index(row, col, f.h) : row * f.w + col;
      double* dst = out.unit.data() + static_cast<std::size_t>(slot) * f.d;
      double mean = 0.0;
      if (kind == CorrelationKind::Pearson) {
        for (double v : src) mean += v;
        mean /= f.d;
      }
      double norm2 = 0.0;
      for (int c = 0; c < f.d; ++c) {
        dst[c] = src[c] - mean;
        norm2 += dst[c] * dst[c];
      }
      if (kind == CorrelationKind::Pearson && norm2 / f.d < 1e-12) {
        throw DegenerateDescriptorError(name, row, col, "constant descriptor");
      }
      const double norm = std::sqrt(norm2);
      if (kind == CorrelationKind::Cosine && norm <= 1e-12) {
        throw DegenerateDescriptorError(name, row, col, "zero-norm descriptor");
      }
      for (int c = 0; c < f.d; ++c) dst[c] /= norm;
      out.norm[slot] = norm;
    }
  }
  return out;
}

// Reverse of normalize_descriptors for one descriptor: g is d loss / d unit on
// entry and d loss / d raw on exit.
inline void normalize_backward(std::span<double> g, std::span<const double> unit, double norm,
                               CorrelationKind kind) {
  double dot = 0.0;
  for (std::size_t c = 0; c < g.size(); ++c) dot += g[c] * unit[c];
  double mean = 0.0;
  for (std::size_t c = 0; c < g.size(); ++c) {
    g[c] = (g[c] - dot * unit[c]) / norm;
    mean += g[c];
  }
  if (kind == CorrelationKind::Pearson) {
    mean /= static_cast<double>(g.size());
    for (auto& v : g) v -= mean;
  }
}

}  // namespace detail

/// Correlation volume between f_A and f_B. Cosine scores normalized dot products;
/// Pearson first centers each descriptor on the mean of its own channels.
inline CorrelationMap correlate(const FeatureMap& fa, const FeatureMap& fb, CorrelationKind kind) {
  if (!fa.same_shape(fb)) throw UsageError("feature maps differ in shape");
  const auto a = detail::normalize_descriptors(fa, kind, true, "f_A");
  const auto b = detail::normalize_descriptors(fb, kind, false, "f_B");
  const int n = fa.cells();
  const int d = fa.d;
  CorrelationMap c{fb.h, fb.w, std::vector<double>(static_cast<std::size_t>(n) * n)};
  for (int ib = 0; ib < n; ++ib) {
    const double* vb = b.unit.data() + static_cast<std::size_t>(ib) * d;
    double* row = c.data.data() + static_cast<std::size_t>(ib) * n;
    for (int k = 0; k < n; ++k) {
      const double* va = a.unit.data() + static_cast<std::size_t>(k) * d;
      double s = 0.0;
      for (int ch = 0; ch < d; ++ch) s += vb[ch] * va[ch];
      row[k] = s;
    }
  }
  return c;
}

inline CorrelationMap cosine_correlation(const FeatureMap& fa, const FeatureMap& fb) {
  return correlate(fa, fb, CorrelationKind::Cosine);
}

inline CorrelationMap pearson_correlation(const FeatureMap& fa, const FeatureMap& fb) {
  return correlate(fa, fb, CorrelationKind::Pearson);
}

struct CorrelationGrad {
  FeatureMap fa;
  FeatureMap fb;
};

/// d loss / d f_A and d loss / d f_B given d loss / d correlation map.
inline CorrelationGrad correlate_backward(const FeatureMap& fa, const FeatureMap& fb,
                                          CorrelationKind kind, std::span<const double> grad) {
  const auto a = detail::normalize_descriptors(fa, kind, true, "f_A");
  const auto b = detail::normalize_descriptors(fb, kind, false, "f_B");
  const int n = fa.cells();
  const int d = fa.d;
  std::vector<double> ga(static_cast<std::size_t>(n) * d, 0.0);
  std::vector<double> gb(static_cast<std::size_t>(n) * d, 0.0);
  for (int ib = 0; ib < n; ++ib) {
    const double* vb = b.unit.data() + static_cast<std::size_t>(ib) * d;
    double* gvb = gb.data() + static_cast<std::size_t>(ib) * d;
    const double* grow = grad.data() + static_cast<std::size_t>(ib) * n;
    for (int k = 0; k < n; ++k) {
      const double g = grow[k];
      if (g == 0.0) continue;
      const double* va = a.unit.data() + static_cast<std::size_t>(k) * d;
      double* gva = ga.data() + static_cast<std::size_t>(k) * d;
      for (int ch = 0; ch < d; ++ch) {
        gvb[ch] += g * va[ch];
        gva[ch] += g * vb[ch];
      }
    }
  }
  CorrelationGrad out{FeatureMap(fa.h, fa.w, d), FeatureMap(fb.h, fb.w, d)};
  for (int row = 0; row < fa.h; ++row) {
    for (int col = 0; col < fa.w; ++col) {
      const int cell = row * fa.w + col;
      const int ka = flat_index(row, col, fa.h);
      std::span<double> sa(ga.data() + static_cast<std::size_t>(ka) * d, d);
      detail::normalize_backward(sa, {a.unit.data() + static_cast<std::size_t>(ka) * d,
                                      static_cast<std::size_t>(d)},
                                 a.norm[ka], kind);
      std::copy(sa.begin(), sa.end(), out.fa.data.begin() + static_cast<std::ptrdiff_t>(cell) * d);
      std::span<double> sb(gb.data() + static_cast<std::size_t>(cell) * d, d);
      detail::normalize_backward(sb, {b.unit.data() + static_cast<std::size_t>(cell) * d,
                                      static_cast<std::size_t>(d)},
                                 b.norm[cell], kind);
      std::copy(sb.begin(), sb.end(), out.fb.data.begin() + static_cast<std::ptrdiff_t>(cell) * d);
    }
  }
  return out;
}

/// Writes `<stem>.bin` (little-endian float32) and `<stem>.json` (shape sidecar).
inline void save_feature_map(const std::string& stem, const FeatureMap& f) {
  std::ofstream bin(stem + ".bin", std::ios::binary);
  if (!bin) throw DataError("cannot write '" + stem + ".bin'");
  for (double v : f.data) {
    auto bits = std::bit_cast<std::uint32_t>(static_cast<float>(v));
    unsigned char bytes[4] = {static_cast<unsigned char>(bits), static_cast<unsigned char>(bits >> 8),
                              static_cast<unsigned char>(bits >> 16),
                              static_cast<unsigned char>(bits >> 24)};
    bin.write(reinterpret_cast<const char*>(bytes), 4);
  }
  nlohmann::json side{{"h", f.h}, {"w", f.w}, {"d", f.d}, {"order", "row-major-channel-last"}};
  std::ofstream js(stem + ".json");
  if (!js) throw DataError("cannot write '" + stem + ".json'");
  js << side.dump() << "\n";
}

inline FeatureMap load_feature_map(const std::string& stem) {
  std::ifstream js(stem + ".json");
  if (!js) throw DataError("missing feature sidecar '" + stem + ".json'");
  nlohmann::json side;
  try {
    js >> side;
  } catch (const nlohmann::json::exception& e) {
    throw DataError("malformed feature sidecar '" + stem + ".json': " + e.what());
  }
  if (side.value("order", "") != "row-major-channel-last") {
    throw DataError("unsupported feature order in '" + stem + ".json'");
  }
  FeatureMap f(side.at("h").get<int>(), side.at("w").get<int>(), side.at("d").get<int>());
  std::ifstream bin(stem + ".bin", std::ios::binary);
  if (!bin) throw DataError("missing feature blob '" + stem + ".bin'");
  std::vector<unsigned char> bytes(f.data.size() * 4);
  bin.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (bin.gcount() != static_cast<std::streamsize>(bytes.size()) || bin.peek() != EOF) {
    throw DataError("feature blob size does not match sidecar shape in '" + stem + "'");
  }
  for (std::size_t i = 0; i < f.data.size(); ++i) {
    const std::uint32_t bits = bytes[4 * i] | (bytes[4 * i + 1] << 8) | (bytes[4 * i + 2] << 16) |
                               (static_cast<std::uint32_t>(bytes[4 * i + 3]) << 24);
    f.data[i] = std::bit_cast<float>(bits);
  }
  return f;
}

}  // namespace geomatch
