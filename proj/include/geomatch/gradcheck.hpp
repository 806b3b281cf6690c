#pragma once

#include <cmath>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "geomatch/geometry.hpp"
#include "geomatch/loss.hpp"
#include "geomatch/matching.hpp"
#include "geomatch/network.hpp"
#include "geomatch/rng.hpp"
#include "geomatch/synth.hpp"
#include "geomatch/warp.hpp"

// Central finite-difference checks of every analytic gradient in the library.

namespace geomatch::gradcheck {

struct Result {
  std::string module;
  std::string name;
  double max_rel_error = 0.0;
  double tolerance = 1e-5;

  [[nodiscard]] bool passed() const { return std::isfinite(max_rel_error) && max_rel_error < tolerance; }
};

/// ||a - n|| / max(||a||, ||n||), with a floor for all-zero gradients.
inline double relative_error(std::span<const double> analytic, std::span<const double> numeric) {
  double diff = 0.0, na = 0.0, nn = 0.0;
  for (std::size_t i = 0; i < analytic.size(); ++i) {
    diff += (analytic[i] - numeric[i]) * (analytic[i] - numeric[i]);
    na += analytic[i] * analytic[i];
    nn += numeric[i] * numeric[i];
  }
  return std::sqrt(diff) / std::max({std::sqrt(na), std::sqrt(nn), 1e-12});
}

/// Central differences of f at x; x is restored on return.
inline std::vector<double> central_difference(const std::function<double()>& f, std::span<double> x,
                                              double step = 1e-6) {
  std::vector<double> g(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double saved = x[i];
    x[i] = saved + step;
    const double up = f();
    x[i] = saved - step;
    const double down = f();
    x[i] = saved;
    g[i] = (up - down) / (2.0 * step);
  }
  return g;
}

inline FeatureMap random_features(Rng& rng, int h, int w, int d) {
  FeatureMap f(h, w, d);
  for (auto& v : f.data) v = rng.normal();
  return f;
}

inline std::vector<Result> check_matching(std::uint64_t seed = 1) {
  Rng rng(seed);
  std::vector<Result> out;
  for (auto kind : {CorrelationKind::Cosine, CorrelationKind::Pearson}) {
    FeatureMap fa = random_features(rng, 4, 4, 8);
    FeatureMap fb = random_features(rng, 4, 4, 8);
    std::vector<double> upstream(static_cast<std::size_t>(16 * 16));
    for (auto& v : upstream) v = rng.normal();
    auto scalar = [&] {
      const auto c = correlate(fa, fb, kind);
      double s = 0.0;
      for (std::size_t i = 0; i < c.data.size(); ++i) s += upstream[i] * c.data[i];
      return s;
    };
    const auto g = correlate_backward(fa, fb, kind, upstream);
    const auto na = central_difference(scalar, fa.data);
    const auto nb = central_difference(scalar, fb.data);
    const std::string name(to_string(kind));
    out.push_back({"matching", name + " d/dfA", relative_error(g.fa.data, na)});
    out.push_back({"matching", name + " d/dfB", relative_error(g.fb.data, nb)});
  }
  return out;
}

inline TransformParams random_transform(Rng& rng, TransformKind kind, double scale = 0.1) {
  auto v = TransformParams::identity(kind).values();
  for (auto& x : v) x += scale * rng.normal();
  if (kind == TransformKind::Homography) {
    // Keep the denominator well away from zero over [-1, 1]^2.
    v[6] *= 0.5;
    v[7] *= 0.5;
    v[8] = 1.0 + 0.1 * rng.normal();
  }
  return {kind, std::move(v)};
}

inline std::vector<Result> check_loss(std::uint64_t seed = 2, int trials = 100) {
  Rng rng(seed);
  const Grid grid = make_grid(20);
  const auto weights = gaussian_weights(grid, {});
  std::vector<Result> out;
  for (auto kind : {TransformKind::Affine, TransformKind::Homography, TransformKind::Tps}) {
    double worst[3] = {0.0, 0.0, 0.0};
    for (int t = 0; t < trials; ++t) {
      const auto gt = random_transform(rng, kind);
      std::vector<double> hat = random_transform(rng, kind).values();
      auto as_params = [&] { return TransformParams(kind, hat); };
      const std::function<LossResult(const TransformParams&)> losses[3] = {
          [&](const TransformParams& p) { return grid_loss_with_grad(p, gt, grid); },
          [&](const TransformParams& p) { return weighted_grid_loss_with_grad(p, gt, grid, weights); },
          [&](const TransformParams& p) { return param_mse_loss_with_grad(p, gt); }};
      for (int l = 0; l < 3; ++l) {
        const auto analytic = losses[l](as_params()).grad;
        const auto numeric = central_difference([&] { return losses[l](as_params()).value; }, hat);
        worst[l] = std::max(worst[l], relative_error(analytic, numeric));
      }
    }
    const std::string k(to_string(kind));
    out.push_back({"loss", "grid/" + k, worst[0]});
    out.push_back({"loss", "weighted/" + k, worst[1]});
    out.push_back({"loss", "mse/" + k, worst[2]});
  }
  return out;
}

inline std::vector<Result> check_warp(std::uint64_t seed = 3) {
  Rng rng(seed);
  Image img(9, 11, 3);
  for (auto& v : img.data) v = rng.uniform();
  // Stay >= 0.01 px from the lattice, where bilinear interpolation has kinks.
  std::vector<double> coords;
  for (int i = 0; i < 40; ++i) {
    for (int axis = 0; axis < 2; ++axis) {
      const int extent = axis == 0 ? img.width : img.height;
      const double px = rng.uniform_int(0, extent - 2) + rng.uniform(0.05, 0.95);
      coords.push_back(to_normalized(px, extent));
    }
  }
  std::vector<double> upstream(40 * 3);
  for (auto& v : upstream) v = rng.normal();
  auto points = [&] {
    std::vector<Point2> pts(coords.size() / 2);
    for (std::size_t i = 0; i < pts.size(); ++i) pts[i] = {coords[2 * i], coords[2 * i + 1]};
    return pts;
  };
  auto scalar = [&] {
    const auto pts = points();
    const auto s = sample_bilinear(img, pts);
    double acc = 0.0;
    for (std::size_t i = 0; i < s.size(); ++i) acc += upstream[i] * s[i];
    return acc;
  };
  const auto pts = points();
  const auto g = sample_bilinear_backward(img, pts, upstream);
  std::vector<double> gc;
  for (const auto& p : g.coords) gc.insert(gc.end(), {p.x, p.y});
  const auto nc = central_difference(scalar, coords);
  const auto ni = central_difference(scalar, img.data);
  return {{"warp", "bilinear d/dcoords", relative_error(gc, nc)},
          {"warp", "bilinear d/dimage", relative_error(g.image.data, ni)}};
}

/// End-to-end checks on a 16x16 input with a two-stage toy extractor.
inline std::vector<Result> check_model(std::uint64_t seed = 4) {
  std::vector<Result> out;
  const ExtractorSpec ext{{2, 4}, false, 16};
  Rng rng(seed);
  Image a = gen_toy_image(rng, 16);
  Rng label_rng(derive_seed(seed, 1));
  const TransformParams label = random_transform(label_rng, TransformKind::Homography, 0.15);
  const Objective objective(LossConfig{});
  Image b = warp_image(a, label);

  for (auto corr : {CorrelationKind::Pearson, CorrelationKind::Cosine}) {
    Network net(ext, RegressorSpec{TransformKind::Homography, false, 4, {}});
    net.init_random(derive_seed(seed, 2), 1.0);
    auto loss_fn = [&](const TransformParams& theta) { return objective(theta, label); };
    auto grads = net.zero_grads();
    accumulate_gradient(net, a, b, corr, loss_fn, grads);
    auto scalar = [&] { return objective(net.forward(a, b, corr), label).value; };
    double worst = 0.0;
    for (std::size_t t = 0; t < net.tensors().size(); ++t) {
      const auto numeric = central_difference(scalar, net.tensors()[t].data);
      worst = std::max(worst, relative_error(grads[t], numeric));
    }
    out.push_back({"model", "end-to-end " + std::string(to_string(corr)), worst, 1e-4});
  }

  // Extractor alone: d (r . features) / d first-layer weights.
  {
    Network net(ExtractorSpec{}, RegressorSpec{});
    net.init_random(derive_seed(seed, 3));
    Rng img_rng(derive_seed(seed, 4));
    const Image big = gen_toy_image(img_rng, 64);
    const auto feat = net.extract(big);
    std::vector<double> r(feat.data.size());
    for (auto& v : r) v = img_rng.normal();
    auto scalar = [&] {
      const auto f = net.extract(big);
      double s = 0.0;
      for (std::size_t i = 0; i < f.data.size(); ++i) s += r[i] * f.data[i];
      return s;
    };
    FeatureMap dfeat(feat.h, feat.w, feat.d);
    dfeat.data = r;
    auto grads = net.zero_grads();
    net.extract_backward(net.extract_traced(big), dfeat, grads);
    const auto numeric = central_difference(scalar, net.tensors()[0].data);
    out.push_back({"model", "extractor d/dconv0", relative_error(grads[0], numeric), 1e-4});
  }

  // Regressor alone: d (r . theta) / d correlation input.
  {
    Network net(ext, RegressorSpec{TransformKind::Homography, false, 4, {}});
    net.init_random(derive_seed(seed, 5), 1.0);
    Rng crng(derive_seed(seed, 6));
    const int side = ext.output_size();
    CorrelationMap c{side, side, std::vector<double>(static_cast<std::size_t>(side * side * side * side))};
    for (auto& v : c.data) v = crng.uniform(-1.0, 1.0);
    std::vector<double> r(9);
    for (auto& v : r) v = crng.normal();
    auto scalar = [&] {
      const auto theta = net.regress(c);
      double s = 0.0;
      for (std::size_t i = 0; i < 9; ++i) s += r[i] * theta[i];
      return s;
    };
    auto grads = net.zero_grads();
    const auto analytic = net.regress_backward(net.regress_traced(c), r, grads);
    const auto numeric = central_difference(scalar, c.data);
    out.push_back({"model", "regressor d/dcorrelation", relative_error(analytic, numeric)});
  }
  return out;
}

inline std::vector<Result> run(const std::string& module) {
  std::vector<Result> all;
  auto add = [&](std::vector<Result> r) { all.insert(all.end(), r.begin(), r.end()); };
  if (module == "all" || module == "matching") add(check_matching());
  if (module == "all" || module == "loss") add(check_loss());
  if (module == "all" || module == "warp") add(check_warp());
  if (module == "all" || module == "model") add(check_model());
  if (all.empty()) throw UsageError("unknown gradcheck module '" + module + "'");
  return all;
}

}  // namespace geomatch::gradcheck
