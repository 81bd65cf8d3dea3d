#pragma once

// Synthetic scenes: separated ellipses and rectangles over a smooth
// background. Used for toy pretraining (RGB) and for the bundled 9-channel
// polarization-style fixture.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <string>
#include <vector>

#include "simcmf/core/random.hpp"
#include "simcmf/data/dataset.hpp"

namespace simcmf {

struct SceneOptions {
  std::int64_t size = 32;
  std::int64_t min_objects = 1;
  std::int64_t max_objects = 2;
  double min_radius = 6.0;
  double max_radius = 11.0;
  std::int64_t gap = 2;  // minimum background pixels between objects
  double noise = 0.02;
  double max_background_dolp = 0.1;
  double min_object_dolp = 0.1;
  double max_object_dolp = 0.5;
};

struct Scene {
  Tensor rgb;                       // [3, S, S] in [0, 1]
  LabelGrid semantic;               // 1 = ellipse, 2 = rectangle
  std::vector<double> aolp, dolp;   // per-pixel angle / degree of linear polarization
};

namespace detail {

inline bool paint_shape(Rng& rng, const SceneOptions& o, std::vector<std::uint8_t>& shape,
                        std::int64_t& cls) {
  const auto S = o.size;
  const double ra = rng.uniform(o.min_radius, o.max_radius);
  const double rb = rng.uniform(o.min_radius, o.max_radius);
  const double cy = rng.uniform(ra * 0.6, static_cast<double>(S) - ra * 0.6);
  const double cx = rng.uniform(rb * 0.6, static_cast<double>(S) - rb * 0.6);
  const double angle = rng.uniform(0.0, M_PI);
  const bool ellipse = rng.uniform() < 0.6;
  cls = ellipse ? 1 : 2;
  const double ca = std::cos(angle), sa = std::sin(angle);
  std::int64_t area = 0;
  shape.assign(static_cast<std::size_t>(S * S), 0);
  for (std::int64_t r = 0; r < S; ++r)
    for (std::int64_t c = 0; c < S; ++c) {
      const double dy = static_cast<double>(r) + 0.5 - cy, dx = static_cast<double>(c) + 0.5 - cx;
      bool in;
      if (ellipse) {
        const double u = (ca * dx + sa * dy) / rb, v = (-sa * dx + ca * dy) / ra;
        in = u * u + v * v <= 1.0;
      } else {
        in = std::abs(dx) <= rb * 0.85 && std::abs(dy) <= ra * 0.85;
      }
      if (in) {
        shape[r * S + c] = 1;
        ++area;
      }
    }
  return area >= 30;
}

}  // namespace detail

inline Scene generate_scene(Rng& rng, const SceneOptions& o = {}) {
  const auto S = o.size;
  const auto plane = static_cast<std::size_t>(S * S);
  Scene scene;
  std::vector<double> rgb(3 * plane);
  std::array<double, 3> bg{};
  for (auto& v : bg) v = rng.uniform(0.15, 0.55);
  const double gy = rng.uniform(-0.15, 0.15), gx = rng.uniform(-0.15, 0.15);
  for (int ch = 0; ch < 3; ++ch)
    for (std::int64_t r = 0; r < S; ++r)
      for (std::int64_t c = 0; c < S; ++c)
        rgb[ch * plane + r * S + c] =
            bg[ch] + gy * (static_cast<double>(r) / S - 0.5) + gx * (static_cast<double>(c) / S - 0.5);

  const double bg_aolp = rng.uniform(0.0, M_PI), bg_dolp = rng.uniform(0.0, o.max_background_dolp);
  scene.aolp.assign(plane, bg_aolp);
  scene.dolp.assign(plane, bg_dolp);

  std::vector<std::int64_t> labels(plane, 0);
  std::vector<std::uint8_t> blocked(plane, 0);
  const auto target = rng.range(o.min_objects, o.max_objects);
  std::vector<std::uint8_t> shape;
  std::int64_t placed = 0;
  for (int attempt = 0; attempt < 200 && placed < target; ++attempt) {
    std::int64_t cls = 0;
    if (!detail::paint_shape(rng, o, shape, cls)) continue;
    bool clash = false;
    for (std::size_t i = 0; i < plane && !clash; ++i) clash = shape[i] && blocked[i];
    if (clash) continue;

    std::array<double, 3> color{};
    double contrast = 0.0;
    do {
      contrast = 0.0;
      for (int ch = 0; ch < 3; ++ch) {
        color[ch] = rng.uniform();
        contrast += std::abs(color[ch] - bg[ch]);
      }
    } while (contrast < 0.6);
    const double aolp = rng.uniform(0.0, M_PI), dolp = rng.uniform(o.min_object_dolp, o.max_object_dolp);
    for (std::int64_t r = 0; r < S; ++r)
      for (std::int64_t c = 0; c < S; ++c) {
        const auto i = static_cast<std::size_t>(r * S + c);
        if (!shape[i]) continue;
        labels[i] = cls;
        scene.aolp[i] = aolp;
        scene.dolp[i] = dolp;
        for (int ch = 0; ch < 3; ++ch) rgb[ch * plane + i] = color[ch];
        for (std::int64_t dr = -o.gap; dr <= o.gap; ++dr)
          for (std::int64_t dc = -o.gap; dc <= o.gap; ++dc) {
            const auto nr = r + dr, nc = c + dc;
            if (nr >= 0 && nc >= 0 && nr < S && nc < S) blocked[nr * S + nc] = 1;
          }
      }
    ++placed;
  }
  for (auto& v : rgb) v = std::clamp(v + o.noise * rng.normal(), 0.0, 1.0);
  scene.rgb = Tensor::from({3, S, S}, std::move(rgb));
  scene.semantic = LabelGrid(S, S, std::move(labels));
  return scene;
}

// Nine channels: the RGB intensities seen through linear polarizers at 0,
// 60 and 120 degrees, I = rgb * (1 + dolp * cos(2 (theta - aolp))) / 2.
// Channel index = polarizer * 3 + colour.
inline Tensor polarization_view(const Scene& scene, Rng& rng, double noise = 0.01) {
  const auto S = scene.rgb.dim(1);
  const auto plane = static_cast<std::size_t>(S * S);
  const auto rgb = scene.rgb.data();
  std::vector<double> out(9 * plane);
  for (int p = 0; p < 3; ++p) {
    const double theta = p * M_PI / 3.0;
    for (int ch = 0; ch < 3; ++ch)
      for (std::size_t i = 0; i < plane; ++i) {
        const double gain = 0.5 * (1.0 + scene.dolp[i] * std::cos(2.0 * (theta - scene.aolp[i])));
        out[(p * 3 + ch) * plane + i] = rgb[ch * plane + i] * gain + noise * rng.normal();
      }
  }
  return Tensor::from({9, S, S}, std::move(out));
}

struct FixtureOptions {
  std::int64_t train = 8;
  std::int64_t val = 4;
  std::uint64_t seed = 7;
  SceneOptions scene;
};

// Writes an unprepared manifest (semantic labels, no normalization) plus
// images, RGB references and label PNGs under `dir`.
inline std::filesystem::path write_polarization_fixture(const std::filesystem::path& dir,
                                                        const FixtureOptions& o = {}) {
  Rng rng(o.seed);
  Manifest m;
  m.name = "polarization";
  auto emit = [&](const std::string& id, Split split) {
    const auto scene = generate_scene(rng, o.scene);
    const auto pol = polarization_view(scene, rng);
    ManifestRecord r;
    r.id = id;
    r.image_path = "images/" + id + ".cmf";
    r.rgb_path = "rgb/" + id + ".cmf";
    r.label_path = "labels/" + id + ".png";
    r.channels = 9;
    r.split = split;
    write_image(dir / r.image_path, pol);
    write_image(dir / r.rgb_path, scene.rgb);
    std::filesystem::create_directories(dir / "labels");
    write_label_png(dir / r.label_path, scene.semantic);
    m.records.push_back(r);
  };
  char buf[32];
  for (std::int64_t i = 0; i < o.train; ++i) {
    std::snprintf(buf, sizeof buf, "train_%03lld", static_cast<long long>(i));
    emit(buf, Split::train);
  }
  for (std::int64_t i = 0; i < o.val; ++i) {
    std::snprintf(buf, sizeof buf, "val_%03lld", static_cast<long long>(i));
    emit(buf, Split::val);
  }
  write_manifest(dir / "manifest.json", m);
  return dir / "manifest.json";
}

}  // namespace simcmf
