#pragma once

// Semantic label maps to instance masks, and click points for instances.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "simcmf/core/error.hpp"

namespace simcmf {

struct LabelGrid {
  std::int64_t height = 0;
  std::int64_t width = 0;
  std::vector<std::int64_t> labels;  // row-major, 0 = background

  LabelGrid() = default;
  LabelGrid(std::int64_t h, std::int64_t w, std::vector<std::int64_t> v)
      : height(h), width(w), labels(std::move(v)) {
    if (h < 0 || w < 0 || static_cast<std::int64_t>(labels.size()) != h * w)
      throw ValidationError("label grid: " + std::to_string(labels.size()) + " values for " +
                            std::to_string(h) + "x" + std::to_string(w));
  }

  // Rejects values that are not integers.
  static LabelGrid from_real(std::int64_t h, std::int64_t w, std::span<const double> v) {
    std::vector<std::int64_t> out(v.size());
    for (std::size_t i = 0; i < v.size(); ++i) {
      if (!std::isfinite(v[i]) || v[i] != std::floor(v[i]))
        throw ValidationError("semantic map value " + std::to_string(v[i]) + " at index " +
                              std::to_string(i) + " is not an integer label");
      out[i] = static_cast<std::int64_t>(v[i]);
    }
    return LabelGrid(h, w, std::move(out));
  }

  std::int64_t at(std::int64_t r, std::int64_t c) const { return labels[r * width + c]; }
};

struct Point {
  std::int64_t row = 0;
  std::int64_t col = 0;
  bool operator==(const Point&) const = default;
};

struct InstanceMask {
  std::int64_t height = 0;
  std::int64_t width = 0;
  std::vector<std::uint8_t> mask;  // row-major, 0 or 1
  std::int64_t area = 0;
  Point click;
  std::int64_t class_id = 0;

  bool contains(Point p) const {
    return p.row >= 0 && p.col >= 0 && p.row < height && p.col < width &&
           mask[p.row * width + p.col] != 0;
  }
};

// Interior pixel farthest (Euclidean) from any pixel outside the mask, where
// everything beyond the grid counts as outside. Ties go to the smallest row,
// then the smallest column.
inline Point compute_click(std::span<const std::uint8_t> mask, std::int64_t height,
                           std::int64_t width) {
  if (static_cast<std::int64_t>(mask.size()) != height * width)
    throw ValidationError("compute_click: mask size does not match " + std::to_string(height) +
                          "x" + std::to_string(width));
  if (std::none_of(mask.begin(), mask.end(), [](std::uint8_t v) { return v != 0; }))
    throw ValidationError("compute_click: mask is empty");

  // Exact squared EDT (two 1-D lower-envelope passes) on a grid padded by one
  // background pixel on every side.
  const std::int64_t H = height + 2, W = width + 2;
  constexpr double inf = std::numeric_limits<double>::infinity();
  std::vector<double> f(static_cast<std::size_t>(H * W), 0.0);
  for (std::int64_t r = 0; r < height; ++r)
    for (std::int64_t c = 0; c < width; ++c)
      if (mask[r * width + c]) f[(r + 1) * W + c + 1] = inf;

  auto pass = [](std::vector<double>& line) {
    const auto n = static_cast<std::int64_t>(line.size());
    std::vector<double> out(line.size());
    std::vector<std::int64_t> v(line.size());
    std::vector<double> z(line.size() + 1);
    std::int64_t k = -1;
    for (std::int64_t q = 0; q < n; ++q) {
      if (line[q] == inf) continue;
      while (k >= 0) {
        const double s = ((line[q] + double(q * q)) - (line[v[k]] + double(v[k] * v[k]))) /
                         (2.0 * double(q - v[k]));
        if (s <= z[k]) {
          --k;
        } else {
          break;
        }
      }
      ++k;
      v[k] = q;
      z[k] = k == 0 ? -inf
                    : ((line[q] + double(q * q)) - (line[v[k - 1]] + double(v[k - 1] * v[k - 1]))) /
                          (2.0 * double(q - v[k - 1]));
      z[k + 1] = inf;
    }
    std::int64_t j = 0;
    for (std::int64_t q = 0; q < n; ++q) {
      while (z[j + 1] < double(q)) ++j;
      out[q] = double((q - v[j]) * (q - v[j])) + line[v[j]];
    }
    line = std::move(out);
  };

  std::vector<double> line;
  for (std::int64_t c = 0; c < W; ++c) {
    line.resize(H);
    for (std::int64_t r = 0; r < H; ++r) line[r] = f[r * W + c];
    pass(line);
    for (std::int64_t r = 0; r < H; ++r) f[r * W + c] = line[r];
  }
  for (std::int64_t r = 0; r < H; ++r) {
    line.assign(f.begin() + r * W, f.begin() + (r + 1) * W);
    pass(line);
    std::copy(line.begin(), line.end(), f.begin() + r * W);
  }

  Point best{-1, -1};
  double best_d = -1.0;
  for (std::int64_t r = 0; r < height; ++r)
    for (std::int64_t c = 0; c < width; ++c) {
      if (!mask[r * width + c]) continue;
      const double d = f[(r + 1) * W + c + 1];
      if (d > best_d) {
        best_d = d;
        best = {r, c};
      }
    }
  return best;
}

inline Point compute_click(const InstanceMask& m) {
  return compute_click(m.mask, m.height, m.width);
}

struct DecomposeOptions {
  int connectivity = 8;
  std::int64_t min_area = 20;

  void validate() const {
    if (connectivity != 4 && connectivity != 8)
      throw ValidationError("connectivity must be 4 or 8, got " + std::to_string(connectivity));
    if (min_area < 1) throw ValidationError("min_area must be >= 1");
  }
};

// Each maximal connected same-class region of nonzero labels becomes one
// instance; regions smaller than min_area are dropped. Instances are ordered
// by the row-major position of their first pixel.
inline std::vector<InstanceMask> decompose_semantic_to_instances(const LabelGrid& grid,
                                                                 const DecomposeOptions& opt = {}) {
  opt.validate();
  const auto H = grid.height, W = grid.width;
  std::vector<std::int32_t> comp(static_cast<std::size_t>(H * W), -1);
  std::vector<InstanceMask> out;
  std::vector<std::int64_t> stack, pixels;
  static constexpr int dr[8] = {-1, 1, 0, 0, -1, -1, 1, 1};
  static constexpr int dc[8] = {0, 0, -1, 1, -1, 1, -1, 1};
  std::int32_t next_id = 0;
  for (std::int64_t start = 0; start < H * W; ++start) {
    const auto cls = grid.labels[start];
    if (cls == 0 || comp[start] >= 0) continue;
    pixels.clear();
    stack.assign(1, start);
    comp[start] = next_id;
    while (!stack.empty()) {
      const auto p = stack.back();
      stack.pop_back();
      pixels.push_back(p);
      const auto r = p / W, c = p % W;
      for (int k = 0; k < opt.connectivity; ++k) {
        const auto nr = r + dr[k], nc = c + dc[k];
        if (nr < 0 || nc < 0 || nr >= H || nc >= W) continue;
        const auto q = nr * W + nc;
        if (comp[q] >= 0 || grid.labels[q] != cls) continue;
        comp[q] = next_id;
        stack.push_back(q);
      }
    }
    ++next_id;
    if (static_cast<std::int64_t>(pixels.size()) < opt.min_area) continue;
    InstanceMask m;
    m.height = H;
    m.width = W;
    m.mask.assign(static_cast<std::size_t>(H * W), 0);
    for (auto p : pixels) m.mask[p] = 1;
    m.area = static_cast<std::int64_t>(pixels.size());
    m.class_id = cls;
    m.click = compute_click(m);
    out.push_back(std::move(m));
  }
  return out;
}

// Instance-id map (0 = background, i = instance i) to masks. Ids keep their
// numeric order; ids below min_area pixels are dropped.
inline std::vector<InstanceMask> instances_from_id_map(const LabelGrid& grid,
                                                       std::int64_t min_area = 1) {
  std::vector<std::int64_t> ids;
  for (auto v : grid.labels)
    if (v < 0) throw ValidationError("instance map has negative id " + std::to_string(v));
  ids = grid.labels;
  std::sort(ids.begin(), ids.end());
  ids.erase(std::unique(ids.begin(), ids.end()), ids.end());
  std::vector<InstanceMask> out;
  for (auto id : ids) {
    if (id == 0) continue;
    InstanceMask m;
    m.height = grid.height;
    m.width = grid.width;
    m.mask.resize(grid.labels.size());
    for (std::size_t i = 0; i < grid.labels.size(); ++i) m.mask[i] = grid.labels[i] == id;
    m.area = std::count(m.mask.begin(), m.mask.end(), std::uint8_t{1});
    if (m.area < min_area) continue;
    m.class_id = id;
    m.click = compute_click(m);
    out.push_back(std::move(m));
  }
  return out;
}

// Inverse of instances_from_id_map: instance i (0-based) gets id i + 1.
inline LabelGrid id_map_from_instances(const std::vector<InstanceMask>& instances,
                                       std::int64_t height, std::int64_t width) {
  LabelGrid g(height, width, std::vector<std::int64_t>(static_cast<std::size_t>(height * width)));
  for (std::size_t i = 0; i < instances.size(); ++i) {
    const auto& m = instances[i];
    if (m.height != height || m.width != width)
      throw ValidationError("instance mask size differs from label grid");
    for (std::size_t p = 0; p < m.mask.size(); ++p) {
      if (!m.mask[p]) continue;
      if (g.labels[p] != 0) throw ValidationError("instances overlap");
      g.labels[p] = static_cast<std::int64_t>(i + 1);
    }
  }
  return g;
}

}  // namespace simcmf
