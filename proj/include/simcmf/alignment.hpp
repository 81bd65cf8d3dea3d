#pragma once

// Cross-modal alignment: a small convolutional adapter mapping C input
// channels to 3, followed by the foundation model's pretrained (and by
// default frozen) patch embedding.

#include <cstdint>
#include <filesystem>
#include <memory>
#include <string>
#include <vector>

#include <json.hpp>

#include "simcmf/core/archive.hpp"
#include "simcmf/core/error.hpp"
#include "simcmf/nn/layers.hpp"

namespace simcmf {

enum class Nonlinearity { relu };

struct AdapterConfig {
  std::int64_t in_channels = 9;
  std::int64_t num_layers = 2;
  std::int64_t kernel_size = 3;
  std::int64_t hidden_dim = 64;
  Nonlinearity nonlinearity = Nonlinearity::relu;

  void validate() const {
    if (in_channels <= 0)
      throw ValidationError("adapter: in_channels must be positive, got " +
                            std::to_string(in_channels));
    if (num_layers < 1)
      throw ValidationError("adapter: num_layers must be >= 1, got " + std::to_string(num_layers));
    if (kernel_size <= 0 || kernel_size % 2 == 0)
      throw ValidationError("adapter: kernel_size must be odd and positive, got " +
                            std::to_string(kernel_size));
    if (hidden_dim <= 0)
      throw ValidationError("adapter: hidden_dim must be positive, got " +
                            std::to_string(hidden_dim));
  }

  nlohmann::json to_json() const {
    return {{"in_channels", in_channels},
            {"num_layers", num_layers},
            {"kernel_size", kernel_size},
            {"hidden_dim", hidden_dim},
            {"nonlinearity", "relu"}};
  }

  static AdapterConfig from_json(const nlohmann::json& j) {
    AdapterConfig c;
    c.in_channels = j.value("in_channels", c.in_channels);
    c.num_layers = j.value("num_layers", c.num_layers);
    c.kernel_size = j.value("kernel_size", c.kernel_size);
    c.hidden_dim = j.value("hidden_dim", c.hidden_dim);
    if (j.value("nonlinearity", std::string("relu")) != "relu")
      throw ValidationError("adapter: unsupported nonlinearity '" +
                            j.value("nonlinearity", std::string()) + "'");
    c.validate();
    return c;
  }
};

// n = 1: a single 1x1 conv C -> 3.
// n >= 2: conv C -> d (k x k), (n - 2) convs d -> d (k x k), then a 1x1
// projection d -> 3. ReLU after every conv except the last.
class CrossModalAdapter : public nn::Module {
 public:
  CrossModalAdapter(const AdapterConfig& config, nn::Init& init) : config_(config) {
    config.validate();
    const auto n = config.num_layers, k = config.kernel_size, d = config.hidden_dim;
    for (std::int64_t i = 0; i < n; ++i) {
      const bool last = i + 1 == n;
      const auto cin = i == 0 ? config.in_channels : d;
      const auto cout = last ? 3 : d;
      const auto kernel = last ? 1 : k;
      layers_.push_back(
          std::make_unique<nn::Conv2d>(cin, cout, kernel, 1, (kernel - 1) / 2, true, init));
      auto& conv = *layers_.back();
      if (last) {
        // Zero projection: the adapter initially emits a constant image.
        init.fill(conv.weight(), 0.0);
        init.fill(conv.bias(), 0.0);
      } else {
        init.fill_normal(conv.weight(), std::sqrt(2.0 / static_cast<double>(cin * kernel * kernel)));
        init.fill(conv.bias(), 0.0);
      }
      register_module("layer" + std::to_string(i), conv);
    }
  }

  Tensor forward(const Tensor& x) const {
    if (x.ndim() != 3 || x.dim(0) != config_.in_channels)
      throw ShapeError("adapter: expected " + std::to_string(config_.in_channels) +
                       " input channels, got " + (x.ndim() == 3 ? std::to_string(x.dim(0))
                                                                 : shape_str(x.shape())));
    Tensor h = x;
    for (std::size_t i = 0; i < layers_.size(); ++i) {
      h = layers_[i]->forward(h);
      if (i + 1 < layers_.size()) h = ops::relu(h);
    }
    return h;
  }

  // Identity mapping; only defined for a single 1x1 layer on 3 channels.
  void set_identity() const {
    if (config_.num_layers != 1 || config_.in_channels != 3)
      throw ValidationError("adapter: identity init needs num_layers = 1 and in_channels = 3");
    auto w = layers_[0]->weight().mutable_data();
    std::fill(w.begin(), w.end(), 0.0);
    for (int c = 0; c < 3; ++c) w[c * 3 + c] = 1.0;
    auto b = layers_[0]->bias().mutable_data();
    std::fill(b.begin(), b.end(), 0.0);
  }

  const AdapterConfig& config() const { return config_; }
  const nn::Conv2d& layer(std::size_t i) const { return *layers_.at(i); }
  std::size_t num_layers() const { return layers_.size(); }

 private:
  AdapterConfig config_;
  std::vector<std::unique_ptr<nn::Conv2d>> layers_;
};

// Non-overlapping p x p patches of a 3-channel image projected to
// embed_dim-wide tokens, row-major over the patch grid.
class PatchEmbed : public nn::Module {
 public:
  PatchEmbed(std::int64_t patch_size, std::int64_t embed_dim, nn::Init& init,
             std::int64_t in_channels = 3)
      : patch_(patch_size), embed_dim_(embed_dim),
        proj_(in_channels, embed_dim, patch_size, patch_size, 0, true, init) {
    register_module("proj", proj_);
  }

  Tensor forward(const Tensor& image) const {
    if (image.ndim() != 3 || image.dim(0) != proj_.weight().dim(1))
      throw ShapeError("patch_embed: expected " + std::to_string(proj_.weight().dim(1)) +
                       "-channel image, got " + shape_str(image.shape()));
    if (image.dim(1) % patch_ != 0 || image.dim(2) % patch_ != 0)
      throw ShapeError("patch_embed: image " + shape_str(image.shape()) +
                       " not divisible by patch size " + std::to_string(patch_));
    auto fm = proj_.forward(image);  // [D, h, w]
    const auto hw = fm.dim(1) * fm.dim(2);
    return ops::transpose2d(ops::reshape(fm, {embed_dim_, hw}));
  }

  std::int64_t patch_size() const { return patch_; }
  std::int64_t embed_dim() const { return embed_dim_; }
  const nn::Conv2d& proj() const { return proj_; }

 private:
  std::int64_t patch_, embed_dim_;
  nn::Conv2d proj_;
};

struct ParamCount {
  std::int64_t trainable = 0;
  std::int64_t frozen = 0;
  std::int64_t total() const { return trainable + frozen; }
};

inline ParamCount count_params(const nn::Module& module) {
  ParamCount c;
  for (const auto& p : module.named_parameters())
    (p.tensor.requires_grad() ? c.trainable : c.frozen) += p.tensor.numel();
  return c;
}

inline std::unique_ptr<CrossModalAdapter> build_adapter(const AdapterConfig& config,
                                                        std::uint64_t seed,
                                                        nn::InitMode mode = nn::InitMode::random) {
  config.validate();
  nn::Init init(seed, mode);
  return std::make_unique<CrossModalAdapter>(config, init);
}

inline constexpr const char* kPatchEmbedPrefix = "image_encoder.patch_embed.proj";

// Copies the 3-channel patch embedding out of a backbone checkpoint. The
// result is bit-identical to the stored weights and non-trainable unless
// `frozen` is false.
inline std::unique_ptr<PatchEmbed> adopt_pretrained_embedding(const Archive& checkpoint,
                                                              bool frozen = true,
                                                              const std::string& prefix =
                                                                  kPatchEmbedPrefix) {
  const auto* w = checkpoint.find(prefix + ".weight");
  if (!w) throw LoadError("checkpoint is missing patch embedding tensor '" + prefix + ".weight'");
  const auto* b = checkpoint.find(prefix + ".bias");
  if (!b) throw LoadError("checkpoint is missing patch embedding tensor '" + prefix + ".bias'");
  if (w->shape.size() != 4 || w->shape[1] != 3 || w->shape[2] != w->shape[3])
    throw LoadError("patch embedding '" + prefix + ".weight' has shape " + shape_str(w->shape) +
                    ", expected [D, 3, p, p]");
  if (b->shape != Shape{w->shape[0]})
    throw LoadError("patch embedding '" + prefix + ".bias' has shape " + shape_str(b->shape));
  nn::Init init(0, nn::InitMode::zeros);
  auto embed = std::make_unique<PatchEmbed>(w->shape[2], w->shape[0], init);
  std::copy(w->values.begin(), w->values.end(), embed->proj().weight().mutable_data().begin());
  std::copy(b->values.begin(), b->values.end(), embed->proj().bias().mutable_data().begin());
  embed->set_trainable(!frozen);
  return embed;
}

inline std::unique_ptr<PatchEmbed> adopt_pretrained_embedding(const std::filesystem::path& path,
                                                              bool frozen = true) {
  return adopt_pretrained_embedding(read_archive(path), frozen);
}

class AlignmentModule : public nn::Module {
 public:
  AlignmentModule(std::unique_ptr<CrossModalAdapter> adapter, std::unique_ptr<PatchEmbed> embed)
      : adapter_(std::move(adapter)), embed_(std::move(embed)) {
    register_module("adapter", *adapter_);
    register_module("patch_embed", *embed_);
  }

  // patch_embed(adapter(x)) for x[C, H, W]; returns [(H/p)(W/p), d_embed].
  Tensor forward(const Tensor& x) const { return embed_->forward(adapter_->forward(x)); }

  void set_embedding_frozen(bool frozen) const { embed_->set_trainable(!frozen); }
  bool embedding_frozen() const {
    for (const auto& p : embed_->named_parameters())
      if (p.tensor.requires_grad()) return false;
    return true;
  }

  const CrossModalAdapter& adapter() const { return *adapter_; }
  const PatchEmbed& patch_embed() const { return *embed_; }
  std::int64_t in_channels() const { return adapter_->config().in_channels; }

 private:
  std::unique_ptr<CrossModalAdapter> adapter_;
  std::unique_ptr<PatchEmbed> embed_;
};

inline Archive adapter_archive(const CrossModalAdapter& adapter) {
  Archive a;
  a.meta = {{"kind", "adapter"}, {"config", adapter.config().to_json()}};
  for (const auto& p : adapter.named_parameters()) a.add("adapter." + p.name, p.tensor);
  return a;
}

inline void save_adapter(const std::filesystem::path& path, const CrossModalAdapter& adapter) {
  write_archive(path, adapter_archive(adapter));
}

inline std::unique_ptr<CrossModalAdapter> load_adapter(const std::filesystem::path& path) {
  const auto a = read_archive(path);
  if (!a.meta.contains("config")) throw LoadError(path.string() + ": no adapter config in metadata");
  auto adapter = build_adapter(AdapterConfig::from_json(a.meta["config"]), 0, nn::InitMode::zeros);
  for (const auto& p : adapter->named_parameters()) {
    const auto* e = a.find("adapter." + p.name);
    if (!e) throw LoadError(path.string() + ": missing key 'adapter." + p.name + "'");
    if (e->shape != p.tensor.shape())
      throw LoadError(path.string() + ": shape mismatch for 'adapter." + p.name + "': " +
                      shape_str(e->shape) + " vs " + shape_str(p.tensor.shape()));
    std::copy(e->values.begin(), e->values.end(), p.tensor.mutable_data().begin());
  }
  return adapter;
}

}  // namespace simcmf
