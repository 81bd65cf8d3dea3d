#pragma once

// Parameter-efficient fine-tuning on top of the backbone: LoRA on attention
// projections, bottleneck adapters parallel to the block MLPs, deep prompt
// tokens, or plain full fine-tuning.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "simcmf/backbone.hpp"

namespace simcmf {

enum class Strategy { lora, mlp_adapter, prompt_tuning, full_finetune };

inline std::string to_string(Strategy s) {
  switch (s) {
    case Strategy::lora: return "lora";
    case Strategy::mlp_adapter: return "mlp_adapter";
    case Strategy::prompt_tuning: return "prompt_tuning";
    case Strategy::full_finetune: return "full_finetune";
  }
  return "?";
}

inline Strategy parse_strategy(const std::string& s) {
  if (s == "lora") return Strategy::lora;
  if (s == "mlp_adapter" || s == "adapter") return Strategy::mlp_adapter;
  if (s == "prompt_tuning" || s == "prompt") return Strategy::prompt_tuning;
  if (s == "full_finetune" || s == "full") return Strategy::full_finetune;
  throw ValidationError("unknown fine-tuning strategy '" + s +
                        "' (expected lora, mlp_adapter, prompt_tuning or full_finetune)");
}

// Attention sublayers LoRA can target. q, k and v address column blocks of
// the fused qkv projection.
inline const std::vector<std::string>& lora_target_names() {
  static const std::vector<std::string> names{"q", "k", "v", "proj"};
  return names;
}

struct PeftConfig {
  Strategy strategy = Strategy::lora;
  std::int64_t lora_rank = 4;
  std::vector<std::string> lora_targets{"q", "v"};
  double lora_scale = 1.0;
  std::int64_t bottleneck_dim = 16;
  double adapter_scale = 0.1;
  std::int64_t prompt_tokens_per_block = 10;
  double target_fraction = 0.04;

  void validate() const {
    if (!(target_fraction > 0.0 && target_fraction <= 1.0))
      throw ValidationError("peft: target_fraction must be in (0, 1]");
    switch (strategy) {
      case Strategy::lora:
        if (lora_rank <= 0) throw ValidationError("peft: lora_rank must be positive");
        if (lora_targets.empty()) throw ValidationError("peft: lora_targets is empty");
        for (const auto& t : lora_targets)
          if (std::find(lora_target_names().begin(), lora_target_names().end(), t) ==
              lora_target_names().end())
            throw ValidationError("peft: unknown attention sublayer '" + t +
                                  "' (expected q, k, v or proj)");
        if (std::set<std::string>(lora_targets.begin(), lora_targets.end()).size() !=
            lora_targets.size())
          throw ValidationError("peft: duplicate lora target");
        break;
      case Strategy::mlp_adapter:
        if (bottleneck_dim <= 0) throw ValidationError("peft: bottleneck_dim must be positive");
        break;
      case Strategy::prompt_tuning:
        if (prompt_tokens_per_block <= 0)
          throw ValidationError("peft: prompt_tokens_per_block must be positive");
        break;
      case Strategy::full_finetune: break;
    }
  }

  // The hyperparameter budget_balance tunes for this strategy.
  std::int64_t size() const {
    switch (strategy) {
      case Strategy::lora: return lora_rank;
      case Strategy::mlp_adapter: return bottleneck_dim;
      case Strategy::prompt_tuning: return prompt_tokens_per_block;
      case Strategy::full_finetune: return 0;
    }
    return 0;
  }

  PeftConfig with_size(std::int64_t v) const {
    auto c = *this;
    if (strategy == Strategy::lora) c.lora_rank = v;
    if (strategy == Strategy::mlp_adapter) c.bottleneck_dim = v;
    if (strategy == Strategy::prompt_tuning) c.prompt_tokens_per_block = v;
    return c;
  }

  nlohmann::json to_json() const {
    nlohmann::json j{{"strategy", to_string(strategy)}, {"target_fraction", target_fraction}};
    switch (strategy) {
      case Strategy::lora:
        j["lora_rank"] = lora_rank;
        j["lora_targets"] = lora_targets;
        j["lora_scale"] = lora_scale;
        break;
      case Strategy::mlp_adapter:
        j["bottleneck_dim"] = bottleneck_dim;
        j["adapter_scale"] = adapter_scale;
        break;
      case Strategy::prompt_tuning: j["prompt_tokens_per_block"] = prompt_tokens_per_block; break;
      case Strategy::full_finetune: break;
    }
    return j;
  }

  static PeftConfig from_json(const nlohmann::json& j) {
    PeftConfig c;
    c.strategy = parse_strategy(j.value("strategy", std::string("lora")));
    c.target_fraction = j.value("target_fraction", c.target_fraction);
    c.lora_rank = j.value("lora_rank", c.lora_rank);
    c.lora_targets = j.value("lora_targets", c.lora_targets);
    c.lora_scale = j.value("lora_scale", c.lora_scale);
    c.bottleneck_dim = j.value("bottleneck_dim", c.bottleneck_dim);
    c.adapter_scale = j.value("adapter_scale", c.adapter_scale);
    c.prompt_tokens_per_block = j.value("prompt_tokens_per_block", c.prompt_tokens_per_block);
    c.validate();
    return c;
  }
};

struct InjectedBackbone {
  std::unique_ptr<Sam> sam;
  PeftConfig config;
  std::vector<std::string> injected;  // parameter names added by inject()

  bool is_injected(const std::string& name) const {
    return std::binary_search(injected.begin(), injected.end(), name);
  }
};

namespace detail {

inline void check_fits(std::int64_t size, std::int64_t limit, const char* what) {
  if (size > limit)
    throw ValidationError(std::string("peft: ") + what + " " + std::to_string(size) +
                          " exceeds layer width limit " + std::to_string(limit));
}

// Largest admissible hyperparameter for a strategy on this backbone shape.
inline std::int64_t max_size(const BackboneConfig& c, Strategy s) {
  switch (s) {
    case Strategy::lora:
    case Strategy::mlp_adapter: return c.embed_dim;
    case Strategy::prompt_tuning: return c.num_tokens();
    case Strategy::full_finetune: return 0;
  }
  return 0;
}

}  // namespace detail

// Prompt tokens are capped at the number of patch tokens and LoRA ranks and
// bottlenecks at the block width.
inline InjectedBackbone inject(std::unique_ptr<Sam> sam, const PeftConfig& config,
                               std::uint64_t seed = 0) {
  config.validate();
  const auto& bc = sam->config();
  auto before = sam->named_parameters();
  std::set<std::string> base_names;
  for (const auto& p : before) base_names.insert(p.name);

  const bool meta = !before.empty() && before.front().tensor.is_meta();
  nn::Init init(seed, meta ? nn::InitMode::meta : nn::InitMode::random);
  if (config.strategy != Strategy::full_finetune) sam->set_trainable(false);

  auto& blocks = sam->image_encoder().blocks();
  switch (config.strategy) {
    case Strategy::lora: {
      detail::check_fits(config.lora_rank, detail::max_size(bc, Strategy::lora), "lora_rank");
      const auto d = bc.embed_dim;
      for (auto& b : blocks) {
        for (const auto& t : lora_target_names()) {
          if (std::find(config.lora_targets.begin(), config.lora_targets.end(), t) ==
              config.lora_targets.end())
            continue;
          if (t == "proj") {
            b->attn().proj().attach_low_rank("lora", 0, d, config.lora_rank, config.lora_scale,
                                             init);
          } else {
            const std::int64_t slot = t == "q" ? 0 : t == "k" ? 1 : 2;
            b->attn().qkv().attach_low_rank("lora_" + t, slot * d, (slot + 1) * d,
                                            config.lora_rank, config.lora_scale, init);
          }
        }
      }
      break;
    }
    case Strategy::mlp_adapter:
      detail::check_fits(config.bottleneck_dim, detail::max_size(bc, Strategy::mlp_adapter),
                         "bottleneck_dim");
      for (auto& b : blocks) b->attach_adapter(config.bottleneck_dim, config.adapter_scale, init);
      break;
    case Strategy::prompt_tuning: {
      detail::check_fits(config.prompt_tokens_per_block,
                         detail::max_size(bc, Strategy::prompt_tuning), "prompt_tokens_per_block");
      const double bound =
          std::sqrt(6.0 / static_cast<double>(3 * bc.patch_size * bc.patch_size + bc.embed_dim));
      for (auto& b : blocks) b->attach_prompt(config.prompt_tokens_per_block, bound, init);
      break;
    }
    case Strategy::full_finetune: break;
  }

  InjectedBackbone out{std::move(sam), config, {}};
  for (const auto& p : out.sam->named_parameters()) {
    if (base_names.count(p.name)) continue;
    p.tensor.set_requires_grad(true);
    out.injected.push_back(p.name);
  }
  std::sort(out.injected.begin(), out.injected.end());
  if (config.strategy == Strategy::full_finetune) out.sam->set_trainable(true);
  return out;
}

struct TrainableReport {
  std::map<std::string, std::int64_t> groups;  // group -> parameter count
  std::int64_t trainable = 0;
  std::int64_t frozen = 0;
  double fraction() const {
    const auto total = trainable + frozen;
    return total == 0 ? 0.0 : static_cast<double>(trainable) / static_cast<double>(total);
  }

  nlohmann::json to_json() const {
    return {{"groups", groups},
            {"trainable", trainable},
            {"frozen", frozen},
            {"total", trainable + frozen},
            {"fraction", fraction()}};
  }
};

// Injected tensors are grouped by strategy; base tensors by top-level
// component (image_encoder, prompt_encoder, mask_decoder).
inline TrainableReport trainable_report(const InjectedBackbone& injected) {
  TrainableReport r;
  for (const auto& p : injected.sam->named_parameters()) {
    const auto n = p.tensor.numel();
    const auto group = injected.is_injected(p.name)
                           ? to_string(injected.config.strategy)
                           : p.name.substr(0, p.name.find('.'));
    r.groups[group] += n;
    (p.tensor.requires_grad() ? r.trainable : r.frozen) += n;
  }
  return r;
}

inline std::int64_t injected_count(const InjectedBackbone& injected) {
  std::int64_t n = 0;
  for (const auto& p : injected.sam->named_parameters())
    if (injected.is_injected(p.name)) n += p.tensor.numel();
  return n;
}

inline std::int64_t backbone_param_count(const BackboneConfig& c) {
  return make_backbone(c, 0, nn::InitMode::meta)->parameter_count();
}

// Exact number of parameters `config` would inject into a backbone of shape
// `c`, counted on a meta (storage-free) instance.
inline std::int64_t injected_param_count(const BackboneConfig& c, const PeftConfig& config) {
  return injected_count(inject(make_backbone(c, 0, nn::InitMode::meta), config));
}

// Smallest rank / bottleneck / token count whose injected parameters reach
// target_fraction of the base backbone. full_finetune returns the template
// unchanged (every parameter trains).
inline PeftConfig budget_balance(const BackboneConfig& c, Strategy strategy,
                                 double target_fraction, PeftConfig base = {}) {
  if (!(target_fraction > 0.0 && target_fraction <= 1.0))
    throw ValidationError("budget_balance: target_fraction must be in (0, 1]");
  base.strategy = strategy;
  base.target_fraction = target_fraction;
  if (strategy == Strategy::full_finetune) return base;
  if (target_fraction >= 1.0)
    throw ValidationError("budget_balance: target_fraction must be < 1 for " + to_string(strategy));

  const auto total = backbone_param_count(c);
  const double need = target_fraction * static_cast<double>(total);
  auto hi = detail::max_size(c, strategy);
  const auto at_max = injected_param_count(c, base.with_size(hi));
  if (static_cast<double>(at_max) < need)
    throw ValidationError("budget_balance: target " + std::to_string(target_fraction) + " of " +
                          std::to_string(total) + " parameters unreachable with " +
                          to_string(strategy) + "; achievable maximum is " +
                          std::to_string(at_max) + " (fraction " +
                          std::to_string(static_cast<double>(at_max) / static_cast<double>(total)) +
                          ") at size " + std::to_string(hi));
  std::int64_t lo = 1;
  while (lo < hi) {
    const auto mid = lo + (hi - lo) / 2;
    if (static_cast<double>(injected_param_count(c, base.with_size(mid))) >= need)
      hi = mid;
    else
      lo = mid + 1;
  }
  return base.with_size(lo);
}

// ---------------------------------------------------------------------------
// Checkpoints holding only the injected tensors.

inline Archive peft_archive(const InjectedBackbone& injected, DType dtype = DType::f64) {
  Archive a;
  a.meta = {{"kind", "peft"},
            {"variant", to_string(injected.sam->config().variant)},
            {"peft", injected.config.to_json()}};
  for (const auto& p : injected.sam->named_parameters())
    if (injected.is_injected(p.name)) a.add(p.name, p.tensor, dtype);
  return a;
}

inline void save_peft(const std::filesystem::path& path, const InjectedBackbone& injected) {
  write_archive(path, peft_archive(injected));
}

// Copies stored injected tensors into an already-injected backbone.
inline void load_injected_tensors(const InjectedBackbone& injected, const Archive& a,
                                  const std::string& prefix, const std::string& source) {
  std::vector<std::string> missing;
  std::vector<std::pair<nn::NamedTensor, const ArchiveEntry*>> pending;
  for (const auto& p : injected.sam->named_parameters()) {
    if (!injected.is_injected(p.name)) continue;
    const auto* e = a.find(prefix + p.name);
    if (!e) {
      missing.push_back(prefix + p.name);
      continue;
    }
    if (e->shape != p.tensor.shape())
      throw LoadError(source + ": shape mismatch for '" + e->name + "': stored " +
                      shape_str(e->shape) + " vs expected " + shape_str(p.tensor.shape()));
    pending.emplace_back(p, e);
  }
  if (!missing.empty()) {
    std::string msg = source + ": missing injected keys:";
    for (const auto& k : missing) msg += " " + k;
    throw LoadError(msg);
  }
  for (auto& [p, e] : pending)
    std::copy(e->values.begin(), e->values.end(), p.tensor.mutable_data().begin());
}

// Re-attaches stored injected tensors to an unmodified base backbone.
inline InjectedBackbone load_peft(const std::filesystem::path& path, std::unique_ptr<Sam> base) {
  const auto a = read_archive(path);
  if (a.meta.value("kind", std::string()) != "peft" || !a.meta.contains("peft"))
    throw LoadError(path.string() + ": not a fine-tuning checkpoint");
  auto injected = inject(std::move(base), PeftConfig::from_json(a.meta["peft"]));
  load_injected_tensors(injected, a, "", path.string());
  return injected;
}

}  // namespace simcmf
