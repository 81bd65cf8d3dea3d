#pragma once

// Dataset manifests, multi-channel records, normalization, model-resolution
// resizing, training-set subsampling and pseudo new modalities.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "simcmf/core/archive.hpp"
#include "simcmf/core/ops.hpp"
#include "simcmf/core/random.hpp"
#include "simcmf/data/instances.hpp"
#include "simcmf/data/png.hpp"

namespace simcmf {

enum class Split { train, val };

inline std::string to_string(Split s) { return s == Split::train ? "train" : "val"; }

inline Split parse_split(const std::string& s) {
  if (s == "train") return Split::train;
  if (s == "val") return Split::val;
  throw ValidationError("unknown split '" + s + "' (expected train or val)");
}

enum class LabelKind { semantic, instance };

struct Normalization {
  std::vector<double> min, max;

  bool empty() const { return min.empty(); }

  nlohmann::json to_json() const { return {{"min", min}, {"max", max}}; }
  static Normalization from_json(const nlohmann::json& j) {
    Normalization n;
    n.min = j.at("min").get<std::vector<double>>();
    n.max = j.at("max").get<std::vector<double>>();
    if (n.min.size() != n.max.size())
      throw ValidationError("normalization min/max lengths differ");
    return n;
  }
};

struct ManifestRecord {
  std::string id;
  std::string image_path;  // relative to the manifest directory
  std::int64_t channels = 0;
  std::string label_path;
  LabelKind label_kind = LabelKind::semantic;
  Split split = Split::train;
  Normalization normalization;
  std::vector<std::int64_t> permutation;
  std::string rgb_path;  // optional 3-channel reference of the same scene

  nlohmann::json to_json() const {
    nlohmann::json j{{"id", id},
                     {"image_path", image_path},
                     {"channels", channels},
                     {"label_path", label_path},
                     {"label_kind", label_kind == LabelKind::semantic ? "semantic" : "instance"},
                     {"split", to_string(split)}};
    if (!normalization.empty()) j["normalization"] = normalization.to_json();
    if (!permutation.empty()) j["permutation"] = permutation;
    if (!rgb_path.empty()) j["rgb_path"] = rgb_path;
    return j;
  }

  static ManifestRecord from_json(const nlohmann::json& j) {
    ManifestRecord r;
    try {
      r.id = j.at("id").get<std::string>();
      r.image_path = j.at("image_path").get<std::string>();
      r.channels = j.at("channels").get<std::int64_t>();
      r.label_path = j.at("label_path").get<std::string>();
      const auto kind = j.value("label_kind", std::string("semantic"));
      if (kind != "semantic" && kind != "instance")
        throw ValidationError("record '" + r.id + "': label_kind must be semantic or instance");
      r.label_kind = kind == "semantic" ? LabelKind::semantic : LabelKind::instance;
      r.split = parse_split(j.value("split", std::string("train")));
      if (j.contains("normalization")) r.normalization = Normalization::from_json(j["normalization"]);
      r.permutation = j.value("permutation", std::vector<std::int64_t>{});
      r.rgb_path = j.value("rgb_path", std::string());
    } catch (const nlohmann::json::exception& e) {
      throw ValidationError("manifest record '" + r.id + "': " + e.what());
    }
    if (r.channels <= 0) throw ValidationError("record '" + r.id + "': channels must be positive");
    return r;
  }
};

struct Manifest {
  std::string name;
  std::vector<ManifestRecord> records;

  nlohmann::json to_json() const {
    nlohmann::json rs = nlohmann::json::array();
    for (const auto& r : records) rs.push_back(r.to_json());
    return {{"name", name}, {"records", rs}};
  }
};

inline Manifest read_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw LoadError("cannot open manifest " + path.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError("manifest " + path.string() + " is not valid JSON: " + e.what());
  }
  Manifest m;
  m.name = j.value("name", path.stem().string());
  if (!j.contains("records") || !j["records"].is_array())
    throw ValidationError("manifest " + path.string() + " has no records array");
  for (const auto& r : j["records"]) m.records.push_back(ManifestRecord::from_json(r));
  std::map<std::string, int> seen;
  for (const auto& r : m.records)
    if (seen[r.id]++) throw ValidationError("manifest has duplicate record id '" + r.id + "'");
  return m;
}

inline void write_text_file(const std::filesystem::path& path, const std::string& text) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw Error("cannot write " + path.string());
    out << text;
    if (!out) throw Error("write failed for " + path.string());
  }
  std::filesystem::rename(tmp, path);
}

inline void write_manifest(const std::filesystem::path& path, const Manifest& m) {
  write_text_file(path, m.to_json().dump(2) + "\n");
}

// Multi-channel images live in an archive with a single "image" entry.
inline void write_image(const std::filesystem::path& path, const Tensor& image,
                        DType dtype = DType::f32) {
  if (image.ndim() != 3) throw ShapeError("image must be [C, H, W], got " + shape_str(image.shape()));
  Archive a;
  a.meta = {{"kind", "image"}};
  a.add("image", image, dtype);
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  write_archive(path, a);
}

inline Tensor read_image(const std::filesystem::path& path) {
  const auto a = read_archive(path);
  const auto* e = a.find("image");
  if (!e) throw LoadError(path.string() + ": no 'image' entry");
  if (e->shape.size() != 3) throw LoadError(path.string() + ": image is not [C, H, W]");
  return to_tensor(*e);
}

struct ModalityRecord {
  std::string id;
  Tensor image;  // [C, H, W]
  std::int64_t channels = 0;
  std::vector<InstanceMask> instances;
  Split split = Split::train;
  std::vector<std::int64_t> permutation;
  std::optional<Tensor> rgb;  // reference RGB view when the manifest provides one

  std::int64_t height() const { return image.dim(1); }
  std::int64_t width() const { return image.dim(2); }
};

struct Dataset {
  std::string name;
  std::vector<ModalityRecord> records;  // sorted by id

  std::vector<const ModalityRecord*> split(Split s) const {
    std::vector<const ModalityRecord*> out;
    for (const auto& r : records)
      if (r.split == s) out.push_back(&r);
    return out;
  }
};

struct LoadOptions {
  DecomposeOptions decompose;
  bool normalize = true;
};

// Per-channel (x - min) / (max - min); constant channels map to 0.
inline Tensor apply_normalization(const Tensor& image, const Normalization& n,
                                  const std::string& id) {
  const auto c = image.dim(0);
  if (static_cast<std::int64_t>(n.min.size()) != c)
    throw ValidationError("record '" + id + "': normalization has " +
                          std::to_string(n.min.size()) + " channels, image has " +
                          std::to_string(c));
  const auto plane = image.dim(1) * image.dim(2);
  std::vector<double> v(image.data().begin(), image.data().end());
  for (std::int64_t ch = 0; ch < c; ++ch) {
    const double lo = n.min[ch], range = n.max[ch] - n.min[ch];
    for (std::int64_t i = 0; i < plane; ++i) {
      auto& x = v[ch * plane + i];
      x = range > 0 ? (x - lo) / range : 0.0;
    }
  }
  return Tensor::from(image.shape(), std::move(v));
}

inline Normalization compute_normalization(const std::vector<const Tensor*>& images) {
  Normalization n;
  if (images.empty()) throw ValidationError("normalization needs at least one image");
  const auto c = images.front()->dim(0);
  n.min.assign(c, std::numeric_limits<double>::infinity());
  n.max.assign(c, -std::numeric_limits<double>::infinity());
  for (const auto* img : images) {
    if (img->dim(0) != c) throw ValidationError("images disagree on channel count");
    const auto plane = img->dim(1) * img->dim(2);
    const auto d = img->data();
    for (std::int64_t ch = 0; ch < c; ++ch)
      for (std::int64_t i = 0; i < plane; ++i) {
        n.min[ch] = std::min(n.min[ch], d[ch * plane + i]);
        n.max[ch] = std::max(n.max[ch], d[ch * plane + i]);
      }
  }
  return n;
}

inline ModalityRecord load_record(const ManifestRecord& mr, const std::filesystem::path& root,
                                  const LoadOptions& opt = {}) {
  ModalityRecord r;
  r.id = mr.id;
  r.split = mr.split;
  r.permutation = mr.permutation;
  const auto image_path = root / mr.image_path;
  const auto label_path = root / mr.label_path;
  if (!std::filesystem::exists(image_path))
    throw LoadError("record '" + mr.id + "': missing image file " + image_path.string());
  if (!std::filesystem::exists(label_path))
    throw LoadError("record '" + mr.id + "': missing label file " + label_path.string());
  try {
    r.image = read_image(image_path);
  } catch (const LoadError& e) {
    throw LoadError("record '" + mr.id + "': " + e.what());
  }
  if (r.image.dim(0) != mr.channels)
    throw LoadError("record '" + mr.id + "': manifest declares " + std::to_string(mr.channels) +
                    " channels but " + image_path.filename().string() + " has " +
                    std::to_string(r.image.dim(0)));
  r.channels = mr.channels;
  if (opt.normalize && !mr.normalization.empty())
    r.image = apply_normalization(r.image, mr.normalization, mr.id);

  const auto grid = read_label_png(label_path);
  if (grid.height != r.height() || grid.width != r.width())
    throw LoadError("record '" + mr.id + "': label is " + std::to_string(grid.height) + "x" +
                    std::to_string(grid.width) + " but image is " + std::to_string(r.height()) +
                    "x" + std::to_string(r.width()));
  r.instances = mr.label_kind == LabelKind::semantic
                    ? decompose_semantic_to_instances(grid, opt.decompose)
                    : instances_from_id_map(grid, opt.decompose.min_area);
  if (!mr.rgb_path.empty()) {
    const auto rgb_path = root / mr.rgb_path;
    if (!std::filesystem::exists(rgb_path))
      throw LoadError("record '" + mr.id + "': missing RGB reference " + rgb_path.string());
    auto rgb = read_image(rgb_path);
    if (rgb.dim(0) != 3 || rgb.dim(1) != r.height() || rgb.dim(2) != r.width())
      throw LoadError("record '" + mr.id + "': RGB reference must be 3 x H x W");
    r.rgb = rgb;
  }
  return r;
}

inline Dataset load_dataset(const std::filesystem::path& manifest_path,
                            const LoadOptions& opt = {}) {
  const auto m = read_manifest(manifest_path);
  Dataset d;
  d.name = m.name;
  const auto root = manifest_path.parent_path();
  for (const auto& mr : m.records) d.records.push_back(load_record(mr, root, opt));
  std::sort(d.records.begin(), d.records.end(),
            [](const ModalityRecord& a, const ModalityRecord& b) { return a.id < b.id; });
  return d;
}

// Nearest-neighbour resampling of a row-major mask (half-pixel centres).
inline std::vector<std::uint8_t> resize_mask_nearest(const std::vector<std::uint8_t>& mask,
                                                     std::int64_t h, std::int64_t w,
                                                     std::int64_t out_h, std::int64_t out_w) {
  std::vector<std::uint8_t> out(static_cast<std::size_t>(out_h * out_w));
  for (std::int64_t r = 0; r < out_h; ++r) {
    const auto sr = std::min<std::int64_t>(h - 1, (2 * r + 1) * h / (2 * out_h));
    for (std::int64_t c = 0; c < out_w; ++c) {
      const auto sc = std::min<std::int64_t>(w - 1, (2 * c + 1) * w / (2 * out_w));
      out[r * out_w + c] = mask[sr * w + sc] ? 1 : 0;
    }
  }
  return out;
}

// Image bilinear, masks nearest-neighbour; instances that vanish are dropped
// and clicks are recomputed at the new resolution.
inline ModalityRecord resize_for_model(const ModalityRecord& rec, std::int64_t size) {
  if (size <= 0) throw ValidationError("resize target must be positive");
  ModalityRecord out = rec;
  if (rec.height() == size && rec.width() == size) return out;
  NoGradGuard guard;
  out.image = ops::resize_bilinear(rec.image, size, size);
  if (rec.rgb) out.rgb = ops::resize_bilinear(*rec.rgb, size, size);
  out.instances.clear();
  for (const auto& m : rec.instances) {
    InstanceMask r = m;
    r.height = r.width = size;
    r.mask = resize_mask_nearest(m.mask, m.height, m.width, size, size);
    r.area = std::count(r.mask.begin(), r.mask.end(), std::uint8_t{1});
    if (r.area == 0) continue;
    r.click = compute_click(r);
    out.instances.push_back(std::move(r));
  }
  return out;
}

// ceil(ratio * N) records chosen by a seeded Fisher-Yates shuffle of the
// id-sorted input; the subset is returned in id order.
inline std::vector<ModalityRecord> subsample(std::vector<ModalityRecord> records, double ratio,
                                             std::uint64_t seed) {
  if (!(ratio > 0.0 && ratio <= 1.0)) throw ValidationError("subsample ratio must be in (0, 1]");
  std::sort(records.begin(), records.end(),
            [](const ModalityRecord& a, const ModalityRecord& b) { return a.id < b.id; });
  const auto n = records.size();
  // Guard against ratio * n landing a rounding error above an integer.
  auto k = static_cast<std::size_t>(std::ceil(ratio * static_cast<double>(n) - 1e-9));
  k = std::clamp<std::size_t>(k, n ? 1 : 0, n);
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  Rng rng(seed);
  rng.shuffle(order);
  order.resize(k);
  std::sort(order.begin(), order.end());
  std::vector<ModalityRecord> out;
  for (auto i : order) out.push_back(std::move(records[i]));
  return out;
}

struct PseudoModality {
  Tensor image;                          // [3 + Cx, H, W]; channel i = concat[permutation[i]]
  std::vector<std::int64_t> permutation;
};

inline std::vector<std::int64_t> channel_permutation(std::int64_t channels, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<std::int64_t> p(static_cast<std::size_t>(channels));
  for (std::int64_t i = 0; i < channels; ++i) p[i] = i;
  rng.shuffle(p);
  return p;
}

inline std::vector<std::int64_t> invert_permutation(const std::vector<std::int64_t>& p) {
  std::vector<std::int64_t> inv(p.size(), -1);
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (p[i] < 0 || p[i] >= static_cast<std::int64_t>(p.size()) || inv[p[i]] != -1)
      throw ValidationError("not a permutation");
    inv[p[i]] = static_cast<std::int64_t>(i);
  }
  return inv;
}

inline Tensor permute_channels(const Tensor& image, const std::vector<std::int64_t>& perm) {
  const auto c = image.dim(0), plane = image.dim(1) * image.dim(2);
  if (static_cast<std::int64_t>(perm.size()) != c)
    throw ValidationError("permutation length does not match channel count");
  invert_permutation(perm);
  std::vector<double> out(static_cast<std::size_t>(c * plane));
  const auto d = image.data();
  for (std::int64_t i = 0; i < c; ++i)
    std::copy(d.begin() + perm[i] * plane, d.begin() + (perm[i] + 1) * plane,
              out.begin() + i * plane);
  return Tensor::from(image.shape(), std::move(out));
}

inline Tensor concat_channels(const Tensor& a, const Tensor& b) {
  if (a.ndim() != 3 || b.ndim() != 3 || a.dim(1) != b.dim(1) || a.dim(2) != b.dim(2))
    throw ShapeError("cannot concatenate " + shape_str(a.shape()) + " and " +
                     shape_str(b.shape()) + " along channels");
  std::vector<double> v(a.data().begin(), a.data().end());
  v.insert(v.end(), b.data().begin(), b.data().end());
  return Tensor::from({a.dim(0) + b.dim(0), a.dim(1), a.dim(2)}, std::move(v));
}

inline PseudoModality make_pseudo_modality(const Tensor& rgb, const Tensor& x, std::uint64_t seed) {
  if (rgb.ndim() != 3 || rgb.dim(0) != 3)
    throw ShapeError("pseudo modality: rgb must be [3, H, W], got " + shape_str(rgb.shape()));
  auto concat = concat_channels(rgb, x);
  auto perm = channel_permutation(concat.dim(0), seed);
  return {permute_channels(concat, perm), perm};
}

// Recovers the un-shuffled concatenation [rgb; x].
inline Tensor invert_pseudo_modality(const Tensor& shuffled, const std::vector<std::int64_t>& perm) {
  return permute_channels(shuffled, invert_permutation(perm));
}

// ---------------------------------------------------------------------------
// Benchmark preparation: decompose labels into instance maps and record
// train-split normalization statistics.

struct PrepareSummary {
  std::int64_t records = 0;
  std::int64_t instances = 0;
  std::int64_t dropped_records = 0;  // records left with no instance
  std::filesystem::path manifest;

  nlohmann::json to_json() const {
    return {{"records", records},
            {"instances", instances},
            {"dropped_records", dropped_records},
            {"manifest", manifest.filename().string()}};
  }
};

inline PrepareSummary prepare_benchmark(const std::filesystem::path& manifest_path,
                                        const std::filesystem::path& out_dir,
                                        const DecomposeOptions& opt = {}) {
  opt.validate();
  const auto m = read_manifest(manifest_path);
  const auto root = manifest_path.parent_path();
  LoadOptions lo;
  lo.decompose = opt;
  lo.normalize = false;
  std::vector<ModalityRecord> recs;
  for (const auto& mr : m.records) recs.push_back(load_record(mr, root, lo));

  std::vector<const Tensor*> train_images;
  for (const auto& r : recs)
    if (r.split == Split::train) train_images.push_back(&r.image);
  if (train_images.empty()) throw ValidationError("manifest has no train records");
  const auto norm = compute_normalization(train_images);

  Manifest out;
  out.name = m.name;
  PrepareSummary s;
  std::filesystem::create_directories(out_dir);
  for (std::size_t i = 0; i < recs.size(); ++i) {
    const auto& r = recs[i];
    if (r.instances.empty()) {
      ++s.dropped_records;
      continue;
    }
    ManifestRecord mr = m.records[i];
    mr.image_path = "images/" + r.id + ".cmf";
    mr.label_path = "labels/" + r.id + ".png";
    mr.label_kind = LabelKind::instance;
    mr.normalization = norm;
    write_image(out_dir / mr.image_path, r.image);
    std::filesystem::create_directories(out_dir / "labels");
    write_label_png(out_dir / mr.label_path, id_map_from_instances(r.instances, r.height(), r.width()));
    if (r.rgb) {
      mr.rgb_path = "rgb/" + r.id + ".cmf";
      write_image(out_dir / mr.rgb_path, *r.rgb);
    }
    out.records.push_back(mr);
    ++s.records;
    s.instances += static_cast<std::int64_t>(r.instances.size());
  }
  s.manifest = out_dir / "manifest.json";
  write_manifest(s.manifest, out);
  return s;
}

}  // namespace simcmf
