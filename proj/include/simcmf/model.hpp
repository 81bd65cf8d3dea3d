#pragma once

// The fine-tuned model: alignment module (adapter + patch embedding) feeding
// an injected backbone.

#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <string>

#include <json.hpp>

#include "simcmf/alignment.hpp"
#include "simcmf/backbone.hpp"
#include "simcmf/peft.hpp"

namespace simcmf {

enum class ModelMode { simcmf, scratch };

inline std::string to_string(ModelMode m) { return m == ModelMode::simcmf ? "simcmf" : "scratch"; }

inline ModelMode parse_model_mode(const std::string& s) {
  if (s == "simcmf") return ModelMode::simcmf;
  if (s == "scratch") return ModelMode::scratch;
  throw ValidationError("unknown training mode '" + s + "' (expected simcmf or scratch)");
}

struct ModelConfig {
  ModelMode mode = ModelMode::simcmf;
  BackboneConfig backbone = BackboneConfig::toy();
  AdapterConfig adapter;
  PeftConfig peft;
  bool freeze_embedding = true;

  nlohmann::json to_json() const {
    return {{"mode", to_string(mode)},
            {"backbone", backbone.to_json()},
            {"adapter", adapter.to_json()},
            {"peft", peft.to_json()},
            {"freeze_embedding", freeze_embedding}};
  }

  static ModelConfig from_json(const nlohmann::json& j) {
    ModelConfig c;
    c.mode = parse_model_mode(j.value("mode", std::string("simcmf")));
    if (j.contains("backbone")) c.backbone = BackboneConfig::from_json(j["backbone"]);
    if (j.contains("adapter")) c.adapter = AdapterConfig::from_json(j["adapter"]);
    if (j.contains("peft")) c.peft = PeftConfig::from_json(j["peft"]);
    c.freeze_embedding = j.value("freeze_embedding", c.freeze_embedding);
    c.validate();
    return c;
  }

  void validate() const {
    backbone.validate();
    adapter.validate();
    peft.validate();
  }
};

class SimCmfModel : public nn::Module {
 public:
  SimCmfModel(ModelConfig config, std::unique_ptr<AlignmentModule> alignment,
              InjectedBackbone backbone)
      : config_(std::move(config)), alignment_(std::move(alignment)),
        backbone_(std::move(backbone)) {
    if (alignment_->patch_embed().embed_dim() != backbone_.sam->config().embed_dim ||
        alignment_->patch_embed().patch_size() != backbone_.sam->config().patch_size)
      throw ValidationError("patch embedding does not match the backbone width or patch size");
    register_module("alignment", *alignment_);
    register_module("backbone", *backbone_.sam);
  }

  const ModelConfig& config() const { return config_; }
  const AlignmentModule& alignment() const { return *alignment_; }
  const InjectedBackbone& backbone() const { return backbone_; }
  const Sam& sam() const { return *backbone_.sam; }
  std::int64_t image_size() const { return backbone_.sam->config().image_size; }

  void check_image(const Tensor& image) const {
    if (image.ndim() != 3 || image.dim(1) != image_size() || image.dim(2) != image_size())
      throw ShapeError("model expects [C, " + std::to_string(image_size()) + ", " +
                       std::to_string(image_size()) + "] input, got " + shape_str(image.shape()));
  }

  MaskCandidates forward(const Tensor& image, const Click& click) const {
    check_image(image);
    return backbone_.sam->decode_tokens(alignment_->forward(image), click);
  }

  MaskPrediction predict(const Tensor& image, const Click& click) const {
    NoGradGuard guard;
    return backbone_.sam->select(forward(image, click));
  }

 private:
  ModelConfig config_;
  std::unique_ptr<AlignmentModule> alignment_;
  InjectedBackbone backbone_;
};

// Independent init streams for the parts that get random weights.
enum : std::uint64_t { kStreamAdapter = 1, kStreamPeft = 2, kStreamBackbone = 3, kStreamEmbed = 4 };

// simcmf: pretrained backbone (required), frozen pretrained embedding unless
// config.freeze_embedding is false, PEFT per config.peft.
// scratch: random backbone and embedding, everything trainable.
inline std::unique_ptr<SimCmfModel> build_model(const ModelConfig& config, std::uint64_t seed,
                                                const Archive* pretrained = nullptr,
                                                nn::InitMode mode = nn::InitMode::random) {
  config.validate();
  auto adapter = build_adapter(config.adapter, Rng::derive(seed, kStreamAdapter).next_u64(), mode);
  if (config.mode == ModelMode::simcmf) {
    if (!pretrained && mode == nn::InitMode::random)
      throw ValidationError("simcmf mode needs a pretrained backbone checkpoint");
    std::unique_ptr<Sam> sam;
    std::unique_ptr<PatchEmbed> embed;
    if (pretrained) {
      auto loaded = load_checkpoint(*pretrained, config.backbone.variant, "pretrained backbone");
      if (loaded.model->config().to_json() != config.backbone.to_json())
        throw ValidationError("pretrained backbone config differs from the model config");
      sam = std::move(loaded.model);
      embed = adopt_pretrained_embedding(*pretrained, config.freeze_embedding);
    } else {
      sam = make_backbone(config.backbone, 0, mode);
      nn::Init init(0, mode);
      embed = std::make_unique<PatchEmbed>(config.backbone.patch_size, config.backbone.embed_dim, init);
      embed->set_trainable(!config.freeze_embedding);
    }
    auto injected = inject(std::move(sam), config.peft, Rng::derive(seed, kStreamPeft).next_u64());
    auto align = std::make_unique<AlignmentModule>(std::move(adapter), std::move(embed));
    return std::make_unique<SimCmfModel>(config, std::move(align), std::move(injected));
  }
  auto sam = make_backbone(config.backbone, Rng::derive(seed, kStreamBackbone).next_u64(), mode);
  nn::Init init(Rng::derive(seed, kStreamEmbed).next_u64(), mode);
  auto embed =
      std::make_unique<PatchEmbed>(config.backbone.patch_size, config.backbone.embed_dim, init);
  PeftConfig full;
  full.strategy = Strategy::full_finetune;
  auto injected = inject(std::move(sam), full);
  auto align = std::make_unique<AlignmentModule>(std::move(adapter), std::move(embed));
  auto cfg = config;
  cfg.peft = full;
  return std::make_unique<SimCmfModel>(cfg, std::move(align), std::move(injected));
}

// Self-contained checkpoint of every tensor in the model.
inline Archive model_archive(const SimCmfModel& model, const nlohmann::json& extra = {}) {
  auto a = nn::state_archive(model);
  a.meta = {{"kind", "simcmf_model"}, {"model", model.config().to_json()}};
  if (!extra.is_null()) a.meta["extra"] = extra;
  return a;
}

inline void save_model(const std::filesystem::path& path, const SimCmfModel& model,
                       const nlohmann::json& extra = {}) {
  write_archive(path, model_archive(model, extra));
}

inline std::unique_ptr<SimCmfModel> load_model(const Archive& a, const std::string& source) {
  if (a.meta.value("kind", std::string()) != "simcmf_model" || !a.meta.contains("model"))
    throw LoadError(source + ": not a fine-tuned model checkpoint");
  const auto config = ModelConfig::from_json(a.meta["model"]);
  auto model = build_model(config, 0, nullptr, nn::InitMode::zeros);
  auto report = nn::load_state(*model, a);
  report.require_complete(source);
  return model;
}

inline std::unique_ptr<SimCmfModel> load_model(const std::filesystem::path& path) {
  return load_model(read_archive(path), path.string());
}

// Trainable tensors of the model with their names, in registration order.
inline std::vector<nn::NamedTensor> trainable_named(const nn::Module& m) {
  std::vector<nn::NamedTensor> out;
  for (auto& p : m.named_parameters())
    if (p.tensor.requires_grad()) out.push_back(p);
  return out;
}

}  // namespace simcmf
