#pragma once

// Fine-tuning loop, optimizer, learning-rate schedule and sweep.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <functional>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "simcmf/data.hpp"
#include "simcmf/model.hpp"

namespace simcmf {

struct LossWeights {
  double focal = 20.0;
  double dice = 1.0;
  double score = 1.0;
};

struct TrainConfig {
  std::int64_t epochs = 50;
  std::int64_t batch_size = 4;
  double learning_rate = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  std::int64_t step_size = 10;  // epochs per decay
  double gamma = 0.5;
  std::uint64_t seed = 0;
  LossWeights loss;
  // Passes over the train split per epoch; lets a tiny split fill a
  // step budget without changing the epoch-based schedule.
  std::int64_t dataset_repeat = 1;
  std::int64_t max_steps = 0;  // 0 = no cap
  bool eval_each_epoch = true;

  void validate() const {
    if (epochs <= 0) throw ValidationError("train: epochs must be positive");
    if (batch_size <= 0) throw ValidationError("train: batch_size must be positive");
    if (!(learning_rate >= 0.0) || !std::isfinite(learning_rate))
      throw ValidationError("train: learning_rate must be finite and >= 0");
    if (!(beta1 > 0 && beta1 < 1) || !(beta2 > 0 && beta2 < 1))
      throw ValidationError("train: Adam betas must be in (0, 1)");
    if (!(adam_eps > 0)) throw ValidationError("train: adam_eps must be positive");
    if (step_size <= 0) throw ValidationError("train: step_size must be positive");
    if (!(gamma > 0)) throw ValidationError("train: gamma must be positive");
    if (loss.focal < 0 || loss.dice < 0 || loss.score < 0)
      throw ValidationError("train: loss weights must be non-negative");
    if (dataset_repeat <= 0) throw ValidationError("train: dataset_repeat must be positive");
    if (max_steps < 0) throw ValidationError("train: max_steps must be >= 0");
  }

  nlohmann::json to_json() const {
    return {{"epochs", epochs},
            {"batch_size", batch_size},
            {"learning_rate", learning_rate},
            {"beta1", beta1},
            {"beta2", beta2},
            {"adam_eps", adam_eps},
            {"step_size", step_size},
            {"gamma", gamma},
            {"seed", seed},
            {"loss_weights", {{"focal", loss.focal}, {"dice", loss.dice}, {"score", loss.score}}},
            {"dataset_repeat", dataset_repeat},
            {"max_steps", max_steps},
            {"eval_each_epoch", eval_each_epoch}};
  }

  static TrainConfig from_json(const nlohmann::json& j) {
    TrainConfig c;
    c.epochs = j.value("epochs", c.epochs);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.learning_rate = j.value("learning_rate", c.learning_rate);
    c.beta1 = j.value("beta1", c.beta1);
    c.beta2 = j.value("beta2", c.beta2);
    c.adam_eps = j.value("adam_eps", c.adam_eps);
    c.step_size = j.value("step_size", c.step_size);
    c.gamma = j.value("gamma", c.gamma);
    c.seed = j.value("seed", c.seed);
    if (j.contains("loss_weights")) {
      const auto& w = j["loss_weights"];
      c.loss.focal = w.value("focal", c.loss.focal);
      c.loss.dice = w.value("dice", c.loss.dice);
      c.loss.score = w.value("score", c.loss.score);
    }
    c.dataset_repeat = j.value("dataset_repeat", c.dataset_repeat);
    c.max_steps = j.value("max_steps", c.max_steps);
    c.eval_each_epoch = j.value("eval_each_epoch", c.eval_each_epoch);
    c.validate();
    return c;
  }
};

// base * gamma^floor(epoch / step_size); the defaults give base * 0.5^floor(epoch / 10).
inline double schedule_lr(double base_lr, std::int64_t epoch, std::int64_t step_size = 10,
                          double gamma = 0.5) {
  if (epoch < 0) throw ValidationError("schedule_lr: epoch must be >= 0");
  double lr = base_lr;
  for (std::int64_t k = epoch / step_size; k > 0; --k) lr *= gamma;
  return lr;
}

class Adam {
 public:
  Adam(std::vector<Tensor> params, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
      : params_(std::move(params)), beta1_(beta1), beta2_(beta2), eps_(eps) {
    for (const auto& p : params_) {
      m_.emplace_back(p.numel(), 0.0);
      v_.emplace_back(p.numel(), 0.0);
    }
  }

  void step(double lr) {
    ++t_;
    const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    for (std::size_t i = 0; i < params_.size(); ++i) {
      const auto& p = params_[i];
      if (!p.has_grad()) continue;
      auto w = p.mutable_data();
      const auto g = p.grad();
      auto& m = m_[i];
      auto& v = v_[i];
      for (std::size_t j = 0; j < w.size(); ++j) {
        m[j] = beta1_ * m[j] + (1 - beta1_) * g[j];
        v[j] = beta2_ * v[j] + (1 - beta2_) * g[j] * g[j];
        const double mhat = m[j] / c1, vhat = v[j] / c2;
        w[j] -= lr * mhat / (std::sqrt(vhat) + eps_);
      }
    }
  }

  void zero_grad() {
    for (const auto& p : params_) p.zero_grad();
  }

  std::int64_t steps() const { return t_; }
  const std::vector<Tensor>& params() const { return params_; }

 private:
  std::vector<Tensor> params_;
  std::vector<std::vector<double>> m_, v_;
  double beta1_, beta2_, eps_;
  std::int64_t t_ = 0;
};

// Binary IoU of thresholded logits (> 0) against a 0/1 target; 1 when both
// are empty.
inline double logits_iou(std::span<const double> logits, std::span<const std::uint8_t> target) {
  std::int64_t inter = 0, uni = 0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    const bool p = logits[i] > 0.0, t = target[i] != 0;
    inter += p && t;
    uni += p || t;
  }
  return uni == 0 ? 1.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

struct SampleLoss {
  Tensor total;  // differentiable
  double mask = 0.0, score = 0.0;
  std::int64_t candidate = 0;
};

// Mask loss is the minimum over candidates of focal/dice (only the best
// candidate receives mask gradient); every candidate's score regresses
// towards its actual IoU.
inline SampleLoss segmentation_loss(const MaskCandidates& c, const InstanceMask& target,
                                    const LossWeights& w) {
  const auto k = c.logits.dim(0), h = c.logits.dim(1), ww = c.logits.dim(2);
  const auto hw = h * ww;
  std::vector<double> tv(target.mask.begin(), target.mask.end());
  const auto t = Tensor::from({1, hw}, tv);
  const auto flat = ops::reshape(c.logits, {k, hw});
  SampleLoss out;
  double best = std::numeric_limits<double>::infinity();
  Tensor best_loss;
  std::vector<double> ious(static_cast<std::size_t>(k));
  for (std::int64_t i = 0; i < k; ++i) {
    const auto li = ops::slice_rows(flat, i, i + 1);
    auto loss = ops::add(ops::scale(ops::sigmoid_focal_loss(li, t), w.focal),
                         ops::scale(ops::dice_loss(li, t), w.dice));
    const double v = loss.item();
    if (v < best || !best_loss.defined()) {
      best = v;
      best_loss = loss;
      out.candidate = i;
    }
    ious[i] = logits_iou(c.logits.data().subspan(i * hw, hw), target.mask);
  }
  auto score = ops::scale(ops::mse_loss(c.scores, Tensor::from({1, k}, ious)), w.score);
  out.mask = best;
  out.score = score.item();
  out.total = ops::add(best_loss, score);
  return out;
}

struct EpochRecord {
  std::int64_t epoch = 0;
  double lr = 0.0;
  double train_loss = 0.0;
  std::optional<double> val_miou;
  std::int64_t steps = 0;  // cumulative optimizer steps
};

struct TrainHistory {
  std::vector<EpochRecord> epochs;
  std::int64_t steps = 0;

  nlohmann::json to_json() const {
    nlohmann::json e = nlohmann::json::array();
    for (const auto& r : epochs) {
      nlohmann::json j{{"epoch", r.epoch}, {"lr", r.lr}, {"train_loss", r.train_loss},
                       {"steps", r.steps}};
      j["val_miou"] = r.val_miou ? nlohmann::json(*r.val_miou) : nlohmann::json(nullptr);
      e.push_back(j);
    }
    return {{"epochs", e}, {"steps", steps}};
  }

  std::optional<double> final_val_miou() const {
    for (auto it = epochs.rbegin(); it != epochs.rend(); ++it)
      if (it->val_miou) return it->val_miou;
    return std::nullopt;
  }
};

// Instance-averaged IoU (percent) of single-click predictions over records.
template <class Predict>
double click_miou(const std::vector<const ModalityRecord*>& records, const Predict& predict) {
  double sum = 0.0;
  std::int64_t n = 0;
  for (const auto* r : records)
    for (const auto& inst : r->instances) {
      const auto logits = predict(*r, inst);
      sum += logits_iou(logits.data(), inst.mask);
      ++n;
    }
  return n == 0 ? 0.0 : 100.0 * sum / static_cast<double>(n);
}

inline double model_miou(const SimCmfModel& model, const std::vector<const ModalityRecord*>& records) {
  return click_miou(records, [&](const ModalityRecord& r, const InstanceMask& m) {
    return model.predict(r.image, {m.click.row, m.click.col}).logits;
  });
}

using StepCallback = std::function<void(std::int64_t step, double loss)>;

// Trains `model` in place. Records must already be at model resolution.
inline TrainHistory train(SimCmfModel& model, const std::vector<const ModalityRecord*>& train_set,
                          const std::vector<const ModalityRecord*>& val_set,
                          const TrainConfig& config, const StepCallback& on_step = {}) {
  config.validate();
  std::vector<const ModalityRecord*> pool;
  for (const auto* r : train_set) {
    model.check_image(r->image);
    if (r->channels != model.alignment().in_channels())
      throw ValidationError("record '" + r->id + "' has " + std::to_string(r->channels) +
                            " channels, adapter expects " +
                            std::to_string(model.alignment().in_channels()));
    if (!r->instances.empty()) pool.push_back(r);
  }
  if (pool.empty()) throw ValidationError("train: train split has no records with instances");

  Adam opt(model.trainable_parameters(), config.beta1, config.beta2, config.adam_eps);
  TrainHistory history;
  const auto per_epoch = static_cast<std::int64_t>(pool.size()) * config.dataset_repeat;
  std::int64_t step = 0;
  bool done = false;
  for (std::int64_t epoch = 0; epoch < config.epochs && !done; ++epoch) {
    const double lr = schedule_lr(config.learning_rate, epoch, config.step_size, config.gamma);
    Rng rng = Rng::derive(config.seed, 1000 + static_cast<std::uint64_t>(epoch));
    std::vector<std::size_t> order;
    for (std::int64_t rep = 0; rep < config.dataset_repeat; ++rep)
      for (std::size_t i = 0; i < pool.size(); ++i) order.push_back(i);
    rng.shuffle(order);
    double loss_sum = 0.0;
    std::int64_t samples = 0;
    for (std::int64_t b = 0; b < per_epoch; b += config.batch_size) {
      if (config.max_steps && step >= config.max_steps) {
        done = true;
        break;
      }
      const auto end = std::min(per_epoch, b + config.batch_size);
      const double inv = 1.0 / static_cast<double>(end - b);
      opt.zero_grad();
      double batch_loss = 0.0;
      for (auto i = b; i < end; ++i) {
        const auto& rec = *pool[order[i]];
        const auto& inst = rec.instances[rng.below(rec.instances.size())];
        auto cand = model.forward(rec.image, {inst.click.row, inst.click.col});
        auto loss = segmentation_loss(cand, inst, config.loss);
        const double v = loss.total.item();
        if (!std::isfinite(v))
          throw TrainingError("non-finite loss at step " + std::to_string(step) + " (epoch " +
                                  std::to_string(epoch) + ", record " + rec.id + ")",
                              step);
        loss.total.backward(inv);
        batch_loss += v * inv;
        loss_sum += v;
        ++samples;
      }
      opt.step(lr);
      if (on_step) on_step(step, batch_loss);
      ++step;
    }
    EpochRecord rec;
    rec.epoch = epoch;
    rec.lr = lr;
    rec.train_loss = samples ? loss_sum / static_cast<double>(samples) : 0.0;
    rec.steps = step;
    if (!val_set.empty() && (config.eval_each_epoch || done || epoch + 1 == config.epochs))
      rec.val_miou = model_miou(model, val_set);
    if (samples) history.epochs.push_back(rec);
  }
  history.steps = step;
  return history;
}

// ---------------------------------------------------------------------------
// Learning-rate sweep

struct SweepEntry {
  double lr = 0.0;
  double score = -std::numeric_limits<double>::infinity();
  std::string error;  // empty on success
  std::string checkpoint;

  bool ok() const { return error.empty(); }
};

struct SweepResult {
  std::vector<SweepEntry> entries;
  double best_lr = 0.0;
  std::size_t best_index = 0;
  std::string best_checkpoint;

  nlohmann::json to_json() const {
    nlohmann::json e = nlohmann::json::array();
    for (const auto& x : entries) {
      nlohmann::json j{{"lr", x.lr}, {"ok", x.ok()}};
      j["val_miou"] = x.ok() ? nlohmann::json(x.score) : nlohmann::json(nullptr);
      if (!x.ok()) j["error"] = x.error;
      if (!x.checkpoint.empty()) j["checkpoint"] = x.checkpoint;
      e.push_back(j);
    }
    return {{"runs", e}, {"best_lr", best_lr}, {"best_checkpoint", best_checkpoint}};
  }
};

struct RunOutcome {
  double score = 0.0;
  std::string checkpoint;
};

// Runs `run(lr)` once per grid value. A run that throws or returns a
// non-finite score is recorded with its error and scores -inf. The best LR
// has the highest score, ties going to the smaller LR.
inline SweepResult sweep_lr(const std::vector<double>& grid,
                            const std::function<RunOutcome(double)>& run) {
  if (grid.empty()) throw ValidationError("sweep: learning-rate grid is empty");
  SweepResult out;
  for (double lr : grid) {
    SweepEntry e;
    e.lr = lr;
    try {
      const auto r = run(lr);
      if (!std::isfinite(r.score)) throw TrainingError("non-finite validation score", -1);
      e.score = r.score;
      e.checkpoint = r.checkpoint;
    } catch (const std::exception& ex) {
      char buf[64];
      std::snprintf(buf, sizeof buf, "lr=%g: ", lr);
      e.error = buf + std::string(ex.what());
      e.score = -std::numeric_limits<double>::infinity();
    }
    out.entries.push_back(e);
  }
  bool any = false;
  for (std::size_t i = 0; i < out.entries.size(); ++i) {
    const auto& e = out.entries[i];
    if (!e.ok()) continue;
    const auto& b = out.entries[out.best_index];
    if (!any || e.score > b.score || (e.score == b.score && e.lr < b.lr)) out.best_index = i;
    any = true;
  }
  if (!any) {
    std::string msg = "sweep: every learning rate failed;";
    for (const auto& e : out.entries) msg += " " + e.error + ";";
    throw TrainingError(msg, -1);
  }
  out.best_lr = out.entries[out.best_index].lr;
  out.best_checkpoint = out.entries[out.best_index].checkpoint;
  return out;
}

// Sweep over fresh models from `factory`, scored by final val mIoU.
inline SweepResult sweep_lr(const std::function<std::unique_ptr<SimCmfModel>()>& factory,
                            const std::vector<const ModalityRecord*>& train_set,
                            const std::vector<const ModalityRecord*>& val_set,
                            const TrainConfig& config, const std::vector<double>& grid,
                            const std::function<std::string(double, const SimCmfModel&,
                                                            const TrainHistory&)>& save = {}) {
  if (val_set.empty()) throw ValidationError("sweep: validation split is empty");
  return sweep_lr(grid, [&](double lr) {
    auto model = factory();
    auto c = config;
    c.learning_rate = lr;
    const auto h = train(*model, train_set, val_set, c);
    RunOutcome r;
    r.score = h.final_val_miou().value_or(model_miou(*model, val_set));
    if (save) r.checkpoint = save(lr, *model, h);
    return r;
  });
}

// ---------------------------------------------------------------------------
// Toy pretraining on procedurally generated RGB scenes.

struct PretrainConfig {
  std::int64_t steps = 4000;
  std::int64_t batch_size = 4;
  double learning_rate = 1e-3;
  std::int64_t decay_every = 1334;  // steps
  double gamma = 0.5;
  std::uint64_t seed = 0;
  LossWeights loss;
  SceneOptions scene = [] {
    SceneOptions o;
    o.min_radius = 5.0;
    o.max_radius = 10.0;
    return o;
  }();

  nlohmann::json to_json() const {
    return {{"steps", steps},       {"batch_size", batch_size}, {"learning_rate", learning_rate},
            {"decay_every", decay_every}, {"gamma", gamma},     {"seed", seed},
            {"min_radius", scene.min_radius}, {"max_radius", scene.max_radius}};
  }
};

inline std::unique_ptr<Sam> pretrain_toy(const PretrainConfig& pc,
                                         const std::function<void(std::int64_t, double)>& on_step = {}) {
  auto cfg = BackboneConfig::toy();
  auto sam = make_backbone(cfg, Rng::derive(pc.seed, 11).next_u64());
  auto scene_opt = pc.scene;
  scene_opt.size = cfg.image_size;
  Rng rng = Rng::derive(pc.seed, 12);
  Adam opt(sam->trainable_parameters());
  DecomposeOptions dec;
  for (std::int64_t step = 0; step < pc.steps; ++step) {
    const double lr = pc.learning_rate * std::pow(pc.gamma, static_cast<double>(step / pc.decay_every));
    opt.zero_grad();
    double total = 0.0;
    for (std::int64_t b = 0; b < pc.batch_size; ++b) {
      std::vector<InstanceMask> inst;
      Scene scene;
      do {
        scene = generate_scene(rng, scene_opt);
        inst = decompose_semantic_to_instances(scene.semantic, dec);
      } while (inst.empty());
      const auto& m = inst[rng.below(inst.size())];
      auto cand = sam->decode_tokens(sam->image_encoder().patch_embed().forward(scene.rgb),
                                     {m.click.row, m.click.col});
      auto loss = segmentation_loss(cand, m, pc.loss);
      const double v = loss.total.item();
      if (!std::isfinite(v)) throw TrainingError("pretraining diverged at step " + std::to_string(step), step);
      loss.total.backward(1.0 / static_cast<double>(pc.batch_size));
      total += v / static_cast<double>(pc.batch_size);
    }
    opt.step(lr);
    if (on_step) on_step(step, total);
  }
  return sam;
}

}  // namespace simcmf
