#pragma once

// Promptable segmentation backbone in the Segment Anything layout: a ViT image
// encoder with a convolutional neck, a point-prompt encoder, and a two-way
// transformer mask decoder with an IoU-prediction head. Parameter names follow
// the published SAM checkpoints (fused qkv, neck.0..3, output_upscaling.0/1/3).
//
// Not modelled: windowed attention and relative position tables in the
// encoder, and the mask-prompt downscaling branch of the prompt encoder.

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <string>
#include <vector>

#include <json.hpp>

#include "simcmf/alignment.hpp"
#include "simcmf/core/archive.hpp"
#include "simcmf/nn/layers.hpp"
#include "simcmf/nn/state.hpp"

namespace simcmf {

enum class Variant { toy, vit_b };

inline std::string to_string(Variant v) { return v == Variant::toy ? "toy" : "vit_b"; }

inline Variant parse_variant(const std::string& s) {
  if (s == "toy") return Variant::toy;
  if (s == "vit_b" || s == "vit-b") return Variant::vit_b;
  throw ValidationError("unknown backbone variant '" + s + "' (expected toy or vit_b)");
}

struct BackboneConfig {
  Variant variant = Variant::toy;
  std::int64_t image_size = 32;
  std::int64_t patch_size = 4;
  std::int64_t embed_dim = 64;
  std::int64_t depth = 2;
  std::int64_t heads = 4;
  std::int64_t mlp_ratio = 4;
  std::int64_t out_chans = 64;
  std::int64_t decoder_depth = 2;
  std::int64_t decoder_heads = 4;
  std::int64_t decoder_mlp_dim = 128;
  std::int64_t attention_downsample = 2;
  std::int64_t num_multimask_outputs = 3;
  std::int64_t iou_head_depth = 3;
  std::int64_t iou_head_hidden = 32;

  std::int64_t grid() const { return image_size / patch_size; }
  std::int64_t num_tokens() const { return grid() * grid(); }

  static BackboneConfig toy() { return {}; }

  static BackboneConfig vit_b() {
    BackboneConfig c;
    c.variant = Variant::vit_b;
    c.image_size = 1024;
    c.patch_size = 16;
    c.embed_dim = 768;
    c.depth = 12;
    c.heads = 12;
    c.out_chans = 256;
    c.decoder_heads = 8;
    c.decoder_mlp_dim = 2048;
    c.iou_head_hidden = 256;
    return c;
  }

  static BackboneConfig for_variant(Variant v) { return v == Variant::toy ? toy() : vit_b(); }

  void validate() const {
    auto positive = [](std::int64_t v, const char* name) {
      if (v <= 0) throw ValidationError(std::string("backbone: ") + name + " must be positive");
    };
    positive(image_size, "image_size");
    positive(patch_size, "patch_size");
    positive(embed_dim, "embed_dim");
    positive(depth, "depth");
    positive(heads, "heads");
    positive(out_chans, "out_chans");
    positive(decoder_heads, "decoder_heads");
    if (image_size % patch_size != 0)
      throw ValidationError("backbone: image_size must be a multiple of patch_size");
    if (embed_dim % heads != 0) throw ValidationError("backbone: embed_dim % heads != 0");
    if (out_chans % 8 != 0) throw ValidationError("backbone: out_chans must be a multiple of 8");
    if ((out_chans / attention_downsample) % decoder_heads != 0 || out_chans % decoder_heads != 0)
      throw ValidationError("backbone: decoder width not divisible by decoder_heads");
    if (num_multimask_outputs < 1) throw ValidationError("backbone: need >= 1 mask output");
  }

  nlohmann::json to_json() const {
    return {{"variant", to_string(variant)},
            {"image_size", image_size},
            {"patch_size", patch_size},
            {"embed_dim", embed_dim},
            {"depth", depth},
            {"heads", heads},
            {"mlp_ratio", mlp_ratio},
            {"out_chans", out_chans},
            {"decoder_depth", decoder_depth},
            {"decoder_heads", decoder_heads},
            {"decoder_mlp_dim", decoder_mlp_dim},
            {"attention_downsample", attention_downsample},
            {"num_multimask_outputs", num_multimask_outputs},
            {"iou_head_depth", iou_head_depth},
            {"iou_head_hidden", iou_head_hidden}};
  }

  static BackboneConfig from_json(const nlohmann::json& j) {
    auto c = for_variant(parse_variant(j.value("variant", std::string("toy"))));
    c.image_size = j.value("image_size", c.image_size);
    c.patch_size = j.value("patch_size", c.patch_size);
    c.embed_dim = j.value("embed_dim", c.embed_dim);
    c.depth = j.value("depth", c.depth);
    c.heads = j.value("heads", c.heads);
    c.mlp_ratio = j.value("mlp_ratio", c.mlp_ratio);
    c.out_chans = j.value("out_chans", c.out_chans);
    c.decoder_depth = j.value("decoder_depth", c.decoder_depth);
    c.decoder_heads = j.value("decoder_heads", c.decoder_heads);
    c.decoder_mlp_dim = j.value("decoder_mlp_dim", c.decoder_mlp_dim);
    c.attention_downsample = j.value("attention_downsample", c.attention_downsample);
    c.num_multimask_outputs = j.value("num_multimask_outputs", c.num_multimask_outputs);
    c.iou_head_depth = j.value("iou_head_depth", c.iou_head_depth);
    c.iou_head_hidden = j.value("iou_head_hidden", c.iou_head_hidden);
    c.validate();
    return c;
  }
};

// Pixel coordinate at model resolution.
struct Click {
  std::int64_t row = 0;
  std::int64_t col = 0;
  bool operator==(const Click&) const = default;
};

// ---------------------------------------------------------------------------
// Image encoder

// Bottleneck branch parallel to a block's MLP: up(relu(down(x))) * scale.
class ParallelAdapter : public nn::Module {
 public:
  ParallelAdapter(std::int64_t dim, std::int64_t bottleneck, double scale, nn::Init& init)
      : scale_(scale), down_(dim, bottleneck, true, init), up_(bottleneck, dim, true, init) {
    init.fill(up_.weight(), 0.0);
    init.fill(up_.bias(), 0.0);
    register_module("down", down_);
    register_module("up", up_);
  }

  Tensor forward(const Tensor& x) const {
    auto y = up_.forward(ops::relu(down_.forward(x)));
    return scale_ == 1.0 ? y : ops::scale(y, scale_);
  }

 private:
  double scale_;
  nn::Linear down_, up_;
};

class EncoderAttention : public nn::Module {
 public:
  EncoderAttention(std::int64_t dim, std::int64_t heads, nn::Init& init)
      : dim_(dim), heads_(heads), qkv_(dim, 3 * dim, true, init), proj_(dim, dim, true, init) {
    register_module("qkv", qkv_);
    register_module("proj", proj_);
  }

  Tensor forward(const Tensor& x) const {
    auto qkv = qkv_.forward(x);
    auto q = ops::slice_columns(qkv, 0, dim_);
    auto k = ops::slice_columns(qkv, dim_, 2 * dim_);
    auto v = ops::slice_columns(qkv, 2 * dim_, 3 * dim_);
    return proj_.forward(ops::attention(q, k, v, heads_));
  }

  nn::Linear& qkv() { return qkv_; }
  nn::Linear& proj() { return proj_; }
  std::int64_t dim() const { return dim_; }

 private:
  std::int64_t dim_, heads_;
  nn::Linear qkv_, proj_;
};

class EncoderBlock : public nn::Module {
 public:
  EncoderBlock(std::int64_t dim, std::int64_t heads, std::int64_t mlp_dim, nn::Init& init)
      : dim_(dim), norm1_(dim, 1e-6, init), attn_(dim, heads, init), norm2_(dim, 1e-6, init),
        mlp_(dim, mlp_dim, init) {
    register_module("norm1", norm1_);
    register_module("attn", attn_);
    register_module("norm2", norm2_);
    register_module("mlp", mlp_);
  }

  Tensor forward(Tensor x) const {
    const std::int64_t n_prompt = prompt_.defined() ? prompt_.dim(0) : 0;
    if (n_prompt) x = ops::concat_rows({prompt_, x});
    x = ops::add(x, attn_.forward(norm1_.forward(x)));
    auto h = norm2_.forward(x);
    auto y = mlp_.forward(h);
    if (adapter_) y = ops::add(y, adapter_->forward(h));
    x = ops::add(x, y);
    if (n_prompt) x = ops::slice_rows(x, n_prompt, x.dim(0));
    return x;
  }

  ParallelAdapter& attach_adapter(std::int64_t bottleneck, double scale, nn::Init& init) {
    if (adapter_) throw ValidationError("block already has an MLP adapter");
    adapter_ = std::make_unique<ParallelAdapter>(dim_, bottleneck, scale, init);
    register_module("adapter", *adapter_);
    return *adapter_;
  }

  // Learnable tokens prepended to this block's input and stripped from its
  // output.
  Tensor attach_prompt(std::int64_t tokens, double bound, nn::Init& init) {
    if (prompt_.defined()) throw ValidationError("block already has prompt tokens");
    prompt_ = register_parameter("prompt", init.uniform({tokens, dim_}, bound));
    return prompt_;
  }

  EncoderAttention& attn() { return attn_; }
  std::int64_t prompt_tokens() const { return prompt_.defined() ? prompt_.dim(0) : 0; }
  std::int64_t dim() const { return dim_; }

 private:
  std::int64_t dim_;
  nn::LayerNorm norm1_;
  EncoderAttention attn_;
  nn::LayerNorm norm2_;
  nn::MlpBlock mlp_;
  std::unique_ptr<ParallelAdapter> adapter_;
  Tensor prompt_;
};

class ImageEncoder : public nn::Module {
 public:
  ImageEncoder(const BackboneConfig& c, nn::Init& init)
      : grid_(c.grid()), dim_(c.embed_dim), out_(c.out_chans),
        patch_embed_(c.patch_size, c.embed_dim, init),
        neck0_(c.embed_dim, c.out_chans, 1, 1, 0, false, init), neck1_(c.out_chans, 1e-6, init),
        neck2_(c.out_chans, c.out_chans, 3, 1, 1, false, init), neck3_(c.out_chans, 1e-6, init) {
    register_module("patch_embed", patch_embed_);
    pos_embed_ = register_parameter("pos_embed", init.zeros({1, grid_, grid_, dim_}));
    for (std::int64_t i = 0; i < c.depth; ++i) {
      blocks_.push_back(
          std::make_unique<EncoderBlock>(c.embed_dim, c.heads, c.embed_dim * c.mlp_ratio, init));
      register_module("blocks." + std::to_string(i), *blocks_.back());
    }
    register_module("neck.0", neck0_);
    register_module("neck.1", neck1_);
    register_module("neck.2", neck2_);
    register_module("neck.3", neck3_);
  }

  // tokens[grid*grid, embed_dim] -> image embedding [grid*grid, out_chans].
  Tensor forward_tokens(const Tensor& tokens) const {
    if (tokens.ndim() != 2 || tokens.dim(0) != grid_ * grid_ || tokens.dim(1) != dim_)
      throw ShapeError("image encoder: expected tokens [" + std::to_string(grid_ * grid_) + "," +
                       std::to_string(dim_) + "], got " + shape_str(tokens.shape()));
    auto x = ops::add(tokens, ops::reshape(pos_embed_, {grid_ * grid_, dim_}));
    for (const auto& b : blocks_) x = b->forward(x);
    auto fm = ops::reshape(ops::transpose2d(x), {dim_, grid_, grid_});
    fm = neck1_.forward_2d(neck0_.forward(fm));
    fm = neck3_.forward_2d(neck2_.forward(fm));
    return ops::transpose2d(ops::reshape(fm, {out_, grid_ * grid_}));
  }

  Tensor forward(const Tensor& image) const { return forward_tokens(patch_embed_.forward(image)); }

  PatchEmbed& patch_embed() { return patch_embed_; }
  const PatchEmbed& patch_embed() const { return patch_embed_; }
  std::vector<std::unique_ptr<EncoderBlock>>& blocks() { return blocks_; }
  const std::vector<std::unique_ptr<EncoderBlock>>& blocks() const { return blocks_; }

 private:
  std::int64_t grid_, dim_, out_;
  PatchEmbed patch_embed_;
  Tensor pos_embed_;
  std::vector<std::unique_ptr<EncoderBlock>> blocks_;
  nn::Conv2d neck0_;
  nn::LayerNorm neck1_;
  nn::Conv2d neck2_;
  nn::LayerNorm neck3_;
};

// ---------------------------------------------------------------------------
// Prompt encoder

// Random Fourier features of normalized (x, y) coordinates.
class PositionEmbeddingRandom : public nn::Module {
 public:
  PositionEmbeddingRandom(std::int64_t num_feats, nn::Init& init) {
    gaussian_ = register_buffer("positional_encoding_gaussian_matrix",
                                init.normal({2, num_feats}, 1.0));
  }

  // coords: (x, y) pairs in [0, 1]. Returns [N, 2 * num_feats] = [sin, cos].
  Tensor encode(const std::vector<std::pair<double, double>>& coords) const {
    const auto f = gaussian_.dim(1);
    const auto g = gaussian_.data();
    std::vector<double> out(coords.size() * static_cast<std::size_t>(2 * f));
    for (std::size_t i = 0; i < coords.size(); ++i) {
      const double x = 2 * coords[i].first - 1, y = 2 * coords[i].second - 1;
      for (std::int64_t j = 0; j < f; ++j) {
        const double a = 2 * M_PI * (x * g[j] + y * g[f + j]);
        out[i * 2 * f + j] = std::sin(a);
        out[i * 2 * f + f + j] = std::cos(a);
      }
    }
    return Tensor::from({static_cast<std::int64_t>(coords.size()), 2 * f}, std::move(out));
  }

 private:
  Tensor gaussian_;
};

class PromptEncoder : public nn::Module {
 public:
  PromptEncoder(const BackboneConfig& c, nn::Init& init)
      : dim_(c.out_chans), image_size_(c.image_size), grid_(c.grid()), pe_(c.out_chans / 2, init) {
    register_module("pe_layer", pe_);
    for (int i = 0; i < 4; ++i)
      point_embeddings_.push_back(register_parameter(
          "point_embeddings." + std::to_string(i) + ".weight", init.normal({1, dim_}, 1.0)));
    not_a_point_ = register_parameter("not_a_point_embed.weight", init.normal({1, dim_}, 1.0));
    no_mask_ = register_parameter("no_mask_embed.weight", init.normal({1, dim_}, 1.0));
  }

  // One foreground click plus the padding point: [2, dim].
  Tensor sparse(const Click& click) const {
    const double s = static_cast<double>(image_size_);
    auto pe = pe_.encode({{(static_cast<double>(click.col) + 0.5) / s,
                           (static_cast<double>(click.row) + 0.5) / s}});
    return ops::concat_rows({ops::add(pe, point_embeddings_[1]), not_a_point_});
  }

  const Tensor& dense() const { return no_mask_; }

  // Positional encoding of every cell of the image-embedding grid.
  Tensor image_pe() const {
    std::vector<std::pair<double, double>> coords;
    for (std::int64_t i = 0; i < grid_; ++i)
      for (std::int64_t j = 0; j < grid_; ++j)
        coords.emplace_back((static_cast<double>(j) + 0.5) / static_cast<double>(grid_),
                            (static_cast<double>(i) + 0.5) / static_cast<double>(grid_));
    return pe_.encode(coords);
  }

 private:
  std::int64_t dim_, image_size_, grid_;
  PositionEmbeddingRandom pe_;
  std::vector<Tensor> point_embeddings_;
  Tensor not_a_point_, no_mask_;
};

// ---------------------------------------------------------------------------
// Mask decoder

class DecoderAttention : public nn::Module {
 public:
  DecoderAttention(std::int64_t dim, std::int64_t heads, std::int64_t downsample, nn::Init& init)
      : heads_(heads), q_(dim, dim / downsample, true, init), k_(dim, dim / downsample, true, init),
        v_(dim, dim / downsample, true, init), out_(dim / downsample, dim, true, init) {
    register_module("q_proj", q_);
    register_module("k_proj", k_);
    register_module("v_proj", v_);
    register_module("out_proj", out_);
  }

  Tensor forward(const Tensor& q, const Tensor& k, const Tensor& v) const {
    return out_.forward(ops::attention(q_.forward(q), k_.forward(k), v_.forward(v), heads_));
  }

 private:
  std::int64_t heads_;
  nn::Linear q_, k_, v_, out_;
};

struct TokenImagePair {
  Tensor queries;  // [N_tokens, C]
  Tensor keys;     // [HW, C]
};

class TwoWayBlock : public nn::Module {
 public:
  TwoWayBlock(std::int64_t dim, std::int64_t heads, std::int64_t mlp_dim, std::int64_t downsample,
              bool skip_first_layer_pe, nn::Init& init)
      : skip_pe_(skip_first_layer_pe), self_attn_(dim, heads, 1, init), norm1_(dim, 1e-5, init),
        cross_t2i_(dim, heads, downsample, init), norm2_(dim, 1e-5, init),
        mlp_(dim, mlp_dim, init, nn::Activation::relu), norm3_(dim, 1e-5, init),
        norm4_(dim, 1e-5, init), cross_i2t_(dim, heads, downsample, init) {
    register_module("self_attn", self_attn_);
    register_module("norm1", norm1_);
    register_module("cross_attn_token_to_image", cross_t2i_);
    register_module("norm2", norm2_);
    register_module("mlp", mlp_);
    register_module("norm3", norm3_);
    register_module("norm4", norm4_);
    register_module("cross_attn_image_to_token", cross_i2t_);
  }

  TokenImagePair forward(const TokenImagePair& in, const Tensor& query_pe,
                         const Tensor& key_pe) const {
    Tensor queries = in.queries, keys = in.keys;
    if (skip_pe_) {
      queries = self_attn_.forward(queries, queries, queries);
    } else {
      auto q = ops::add(queries, query_pe);
      queries = ops::add(queries, self_attn_.forward(q, q, queries));
    }
    queries = norm1_.forward(queries);

    auto q = ops::add(queries, query_pe);
    auto k = ops::add(keys, key_pe);
    queries = norm2_.forward(ops::add(queries, cross_t2i_.forward(q, k, keys)));

    queries = norm3_.forward(ops::add(queries, mlp_.forward(queries)));

    q = ops::add(queries, query_pe);
    k = ops::add(keys, key_pe);
    keys = norm4_.forward(ops::add(keys, cross_i2t_.forward(k, q, queries)));
    return {queries, keys};
  }

 private:
  bool skip_pe_;
  DecoderAttention self_attn_;
  nn::LayerNorm norm1_;
  DecoderAttention cross_t2i_;
  nn::LayerNorm norm2_;
  nn::MlpBlock mlp_;
  nn::LayerNorm norm3_, norm4_;
  DecoderAttention cross_i2t_;
};

class TwoWayTransformer : public nn::Module {
 public:
  TwoWayTransformer(const BackboneConfig& c, nn::Init& init)
      : final_attn_(c.out_chans, c.decoder_heads, c.attention_downsample, init),
        norm_final_(c.out_chans, 1e-5, init) {
    for (std::int64_t i = 0; i < c.decoder_depth; ++i) {
      layers_.push_back(std::make_unique<TwoWayBlock>(c.out_chans, c.decoder_heads,
                                                      c.decoder_mlp_dim, c.attention_downsample,
                                                      i == 0, init));
      register_module("layers." + std::to_string(i), *layers_.back());
    }
    register_module("final_attn_token_to_image", final_attn_);
    register_module("norm_final_attn", norm_final_);
  }

  TokenImagePair forward(const Tensor& image, const Tensor& image_pe, const Tensor& tokens) const {
    TokenImagePair state{tokens, image};
    for (const auto& l : layers_) state = l->forward(state, tokens, image_pe);
    auto q = ops::add(state.queries, tokens);
    auto k = ops::add(state.keys, image_pe);
    state.queries =
        norm_final_.forward(ops::add(state.queries, final_attn_.forward(q, k, state.keys)));
    return state;
  }

 private:
  std::vector<std::unique_ptr<TwoWayBlock>> layers_;
  DecoderAttention final_attn_;
  nn::LayerNorm norm_final_;
};

struct DecoderOutput {
  Tensor masks;  // [num_mask_tokens, 4g * 4g] low-resolution logits
  Tensor iou;    // [1, num_mask_tokens] raw quality predictions
};

class MaskDecoder : public nn::Module {
 public:
  MaskDecoder(const BackboneConfig& c, nn::Init& init)
      : dim_(c.out_chans), grid_(c.grid()), num_mask_tokens_(c.num_multimask_outputs + 1),
        transformer_(c, init), up0_(c.out_chans, c.out_chans / 4, init),
        up1_(c.out_chans / 4, 1e-6, init), up3_(c.out_chans / 4, c.out_chans / 8, init),
        iou_head_(c.out_chans, c.iou_head_hidden, num_mask_tokens_, c.iou_head_depth, init) {
    register_module("transformer", transformer_);
    iou_token_ = register_parameter("iou_token.weight", init.normal({1, dim_}, 1.0));
    mask_tokens_ =
        register_parameter("mask_tokens.weight", init.normal({num_mask_tokens_, dim_}, 1.0));
    register_module("output_upscaling.0", up0_);
    register_module("output_upscaling.1", up1_);
    register_module("output_upscaling.3", up3_);
    for (std::int64_t i = 0; i < num_mask_tokens_; ++i) {
      hypernets_.push_back(std::make_unique<nn::Mlp>(dim_, dim_, dim_ / 8, 3, init));
      register_module("output_hypernetworks_mlps." + std::to_string(i), *hypernets_.back());
    }
    register_module("iou_prediction_head", iou_head_);
  }

  DecoderOutput forward(const Tensor& image_embedding, const Tensor& image_pe,
                        const Tensor& sparse, const Tensor& dense) const {
    auto tokens = ops::concat_rows({iou_token_, mask_tokens_, sparse});
    auto src = ops::add_row(image_embedding, dense);
    auto out = transformer_.forward(src, image_pe, tokens);
    auto iou_out = ops::slice_rows(out.queries, 0, 1);
    auto fm = ops::reshape(ops::transpose2d(out.keys), {dim_, grid_, grid_});
    auto up = ops::gelu(up1_.forward_2d(up0_.forward(fm)));
    up = ops::gelu(up3_.forward(up));
    const auto side = 4 * grid_;
    auto up_flat = ops::reshape(up, {dim_ / 8, side * side});
    std::vector<Tensor> hyper;
    for (std::int64_t i = 0; i < num_mask_tokens_; ++i)
      hyper.push_back(hypernets_[i]->forward(ops::slice_rows(out.queries, 1 + i, 2 + i)));
    auto masks = ops::matmul(ops::concat_rows(hyper), up_flat);
    return {masks, iou_head_.forward(iou_out)};
  }

  std::int64_t num_mask_tokens() const { return num_mask_tokens_; }

 private:
  std::int64_t dim_, grid_, num_mask_tokens_;
  TwoWayTransformer transformer_;
  Tensor iou_token_, mask_tokens_;
  nn::ConvTranspose2x2 up0_;
  nn::LayerNorm up1_;
  nn::ConvTranspose2x2 up3_;
  std::vector<std::unique_ptr<nn::Mlp>> hypernets_;
  nn::Mlp iou_head_;
};

// ---------------------------------------------------------------------------

// Candidate masks for one click, in graph (differentiable).
struct MaskCandidates {
  Tensor logits;  // [K, H, W] at model resolution
  Tensor scores;  // [1, K] predicted quality in [0, 1]
};

struct MaskPrediction {
  Tensor logits;  // [H, W]
  double score = 0.0;
  std::int64_t candidate = 0;
  std::vector<double> candidate_scores;
};

// Highest predicted score wins; ties resolve to the lowest index.
inline std::int64_t best_candidate(std::span<const double> scores) {
  std::int64_t best = 0;
  for (std::size_t i = 1; i < scores.size(); ++i)
    if (scores[i] > scores[best]) best = static_cast<std::int64_t>(i);
  return best;
}

class Sam : public nn::Module {
 public:
  explicit Sam(const BackboneConfig& config, nn::Init& init)
      : config_((config.validate(), config)), image_encoder_(config, init),
        prompt_encoder_(config, init), mask_decoder_(config, init) {
    register_module("image_encoder", image_encoder_);
    register_module("prompt_encoder", prompt_encoder_);
    register_module("mask_decoder", mask_decoder_);
  }

  const BackboneConfig& config() const { return config_; }
  ImageEncoder& image_encoder() { return image_encoder_; }
  const ImageEncoder& image_encoder() const { return image_encoder_; }
  const PromptEncoder& prompt_encoder() const { return prompt_encoder_; }
  const MaskDecoder& mask_decoder() const { return mask_decoder_; }

  void check_click(const Click& click) const {
    if (click.row < 0 || click.col < 0 || click.row >= config_.image_size ||
        click.col >= config_.image_size)
      throw ValidationError("click (" + std::to_string(click.row) + "," +
                            std::to_string(click.col) + ") outside the " +
                            std::to_string(config_.image_size) + "x" +
                            std::to_string(config_.image_size) + " model image");
  }

  // Multi-mask candidates (the ambiguity-aware outputs) for a precomputed
  // image embedding.
  MaskCandidates decode(const Tensor& image_embedding, const Click& click) const {
    check_click(click);
    auto out = mask_decoder_.forward(image_embedding, prompt_encoder_.image_pe(),
                                     prompt_encoder_.sparse(click), prompt_encoder_.dense());
    const auto k = config_.num_multimask_outputs;
    const auto side = 4 * config_.grid();
    const std::int64_t first = k == 1 ? 0 : 1;
    const std::int64_t count = k == 1 ? 1 : k;
    auto masks = ops::reshape(ops::slice_rows(out.masks, first, first + count), {count, side, side});
    if (side != config_.image_size)
      masks = ops::resize_bilinear(masks, config_.image_size, config_.image_size);
    auto scores = ops::sigmoid(ops::slice_columns(out.iou, first, first + count));
    return {masks, scores};
  }

  MaskCandidates decode_tokens(const Tensor& tokens, const Click& click) const {
    return decode(image_encoder_.forward_tokens(tokens), click);
  }

  MaskPrediction select(const MaskCandidates& c) const {
    MaskPrediction p;
    p.candidate_scores.assign(c.scores.data().begin(), c.scores.data().end());
    p.candidate = best_candidate(p.candidate_scores);
    p.score = p.candidate_scores[p.candidate];
    const auto hw = config_.image_size * config_.image_size;
    std::vector<double> logits(c.logits.data().begin() + p.candidate * hw,
                               c.logits.data().begin() + (p.candidate + 1) * hw);
    p.logits = Tensor::from({config_.image_size, config_.image_size}, std::move(logits));
    return p;
  }

  // Single best mask for a click, from patch tokens.
  MaskPrediction predict_from_tokens(const Tensor& tokens, const Click& click) const {
    NoGradGuard guard;
    return select(decode_tokens(tokens, click));
  }

  // Single best mask for a click on a 3-channel image at model resolution.
  MaskPrediction predict(const Tensor& image, const Click& click) const {
    NoGradGuard guard;
    return select(decode_tokens(image_encoder_.patch_embed().forward(image), click));
  }

 private:
  BackboneConfig config_;
  ImageEncoder image_encoder_;
  PromptEncoder prompt_encoder_;
  MaskDecoder mask_decoder_;
};

inline std::unique_ptr<Sam> make_backbone(const BackboneConfig& config, std::uint64_t seed,
                                          nn::InitMode mode = nn::InitMode::random) {
  nn::Init init(seed, mode);
  return std::make_unique<Sam>(config, init);
}

// ---------------------------------------------------------------------------
// Checkpoints

inline Archive backbone_archive(const Sam& sam, DType dtype = DType::f64) {
  auto a = nn::state_archive(sam, "", dtype);
  a.meta = {{"kind", "backbone"},
            {"variant", to_string(sam.config().variant)},
            {"config", sam.config().to_json()}};
  return a;
}

inline void save_checkpoint(const std::filesystem::path& path, const Sam& sam,
                            DType dtype = DType::f64) {
  write_archive(path, backbone_archive(sam, dtype));
}

struct LoadedBackbone {
  std::unique_ptr<Sam> model;
  std::vector<std::string> extra_keys;
};

inline BackboneConfig checkpoint_config(const Archive& archive, Variant variant,
                                        const std::string& source) {
  if (archive.meta.contains("variant") &&
      archive.meta["variant"].get<std::string>() != to_string(variant))
    throw LoadError(source + ": checkpoint variant '" + archive.meta["variant"].get<std::string>() +
                    "' does not match requested '" + to_string(variant) + "'");
  if (archive.meta.contains("config")) {
    auto c = BackboneConfig::from_json(archive.meta["config"]);
    if (c.variant != variant) throw LoadError(source + ": config variant mismatch");
    return c;
  }
  return BackboneConfig::for_variant(variant);
}

inline LoadedBackbone load_checkpoint(const Archive& archive, Variant variant,
                                      const std::string& source = "checkpoint") {
  const auto config = checkpoint_config(archive, variant, source);
  auto model = make_backbone(config, 0, nn::InitMode::zeros);
  auto report = nn::load_state(*model, archive);
  report.require_complete(source);
  return {std::move(model), report.extra};
}

inline LoadedBackbone load_checkpoint(const std::filesystem::path& path, Variant variant) {
  return load_checkpoint(read_archive(path), variant, path.string());
}

}  // namespace simcmf
