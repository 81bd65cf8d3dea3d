#include <gtest/gtest.h>

#include <cmath>
#include <set>

#include "simcmf/train.hpp"
#include "test_support.hpp"
#include "toy_records.hpp"

using namespace simcmf;
using simcmf::testing::pointers;
using simcmf::testing::two_blob_record;

namespace {

const Archive& pretrained() {
  static const Archive a = backbone_archive(*make_backbone(BackboneConfig::toy(), 17));
  return a;
}

ModelConfig lora_config() {
  ModelConfig c;
  c.peft.strategy = Strategy::lora;
  c.peft = c.peft.with_size(4);
  return c;
}

std::map<std::string, std::vector<double>> snapshot(const nn::Module& m) {
  std::map<std::string, std::vector<double>> out;
  for (const auto& p : m.named_parameters()) {
    const auto d = p.tensor.data();
    out[p.name].assign(d.begin(), d.end());
  }
  return out;
}

std::set<std::string> changed(const std::map<std::string, std::vector<double>>& a,
                              const std::map<std::string, std::vector<double>>& b) {
  std::set<std::string> out;
  for (const auto& [k, v] : a)
    if (b.at(k) != v) out.insert(k);
  return out;
}

TrainConfig short_run(std::int64_t steps, double lr = 1e-3) {
  TrainConfig t;
  t.learning_rate = lr;
  t.epochs = 1000;
  t.max_steps = steps;
  t.batch_size = 2;
  t.eval_each_epoch = false;
  return t;
}

}  // namespace

TEST(Schedule, MatchesClosedFormAtEveryEpoch) {
  for (std::int64_t e = 0; e < 50; ++e) {
    const double expect = 3e-4 * std::pow(0.5, static_cast<double>(e / 10));
    EXPECT_EQ(schedule_lr(3e-4, e), expect) << e;
  }
  EXPECT_EQ(schedule_lr(1.0, 7, 3, 0.25), 0.0625);
  EXPECT_THROW(schedule_lr(1.0, -1), ValidationError);
}

TEST(Schedule, HistoryRecordsScheduledRates) {
  std::vector<ModalityRecord> data{two_blob_record("a")};
  auto model = build_model(lora_config(), 1, &pretrained());
  TrainConfig t;
  t.epochs = 23;
  t.batch_size = 1;
  t.learning_rate = 1e-4;
  t.step_size = 5;
  t.eval_each_epoch = false;
  const auto h = train(*model, pointers(data), {}, t);
  ASSERT_EQ(h.epochs.size(), 23u);
  for (const auto& e : h.epochs) EXPECT_EQ(e.lr, 1e-4 * std::pow(0.5, static_cast<double>(e.epoch / 5)));
  EXPECT_EQ(h.steps, 23);
}

TEST(Train, ZeroLearningRateLeavesWeightsBitwiseUnchanged) {
  std::vector<ModalityRecord> data{two_blob_record("a"), two_blob_record("b", 9, 32, 1)};
  auto model = build_model(lora_config(), 2, &pretrained());
  const auto before = snapshot(*model);
  train(*model, pointers(data), {}, short_run(5, 0.0));
  EXPECT_TRUE(changed(before, snapshot(*model)).empty());
}

TEST(Train, FreezeConservation) {
  std::vector<ModalityRecord> data{two_blob_record("a"), two_blob_record("b", 9, 32, 1)};
  for (auto s : {Strategy::lora, Strategy::mlp_adapter}) {
    auto c = lora_config();
    c.peft.strategy = s;
    c.peft = c.peft.with_size(4);
    auto model = build_model(c, 3, &pretrained());
    const auto before = snapshot(*model);
    train(*model, pointers(data), {}, short_run(100));
    const auto diff = changed(before, snapshot(*model));
    std::set<std::string> expect;
    for (const auto& p : model->named_parameters()) {
      const bool adapter = p.name.rfind("alignment.adapter.", 0) == 0;
      const bool injected = p.name.rfind("backbone.", 0) == 0 &&
                            model->backbone().is_injected(p.name.substr(9));
      if (adapter || injected) expect.insert(p.name);
    }
    EXPECT_EQ(diff, expect) << to_string(s);
    for (const auto& n : diff) EXPECT_EQ(n.find("patch_embed"), std::string::npos) << n;
  }
}

TEST(Train, NonFiniteLossAbortsWithStep) {
  std::vector<ModalityRecord> data{two_blob_record("a")};
  data[0].image.mutable_data()[5] = std::nan("");
  auto model = build_model(lora_config(), 4, &pretrained());
  try {
    train(*model, pointers(data), {}, short_run(3));
    FAIL() << "expected TrainingError";
  } catch (const TrainingError& e) {
    EXPECT_EQ(e.step(), 0);
    EXPECT_NE(std::string(e.what()).find("step 0"), std::string::npos);
  }
}

TEST(Train, RejectsMismatchedInputs) {
  std::vector<ModalityRecord> four{two_blob_record("a", 4)};
  auto model = build_model(lora_config(), 4, &pretrained());
  EXPECT_THROW(train(*model, pointers(four), {}, short_run(1)), ValidationError);
  std::vector<ModalityRecord> small{two_blob_record("a", 9, 16)};
  EXPECT_THROW(train(*model, pointers(small), {}, short_run(1)), ShapeError);
  std::vector<ModalityRecord> empty{two_blob_record("a")};
  empty[0].instances.clear();
  EXPECT_THROW(train(*model, pointers(empty), {}, short_run(1)), ValidationError);
  auto bad = short_run(1);
  bad.batch_size = 0;
  EXPECT_THROW(bad.validate(), ValidationError);
  EXPECT_THROW(build_model(lora_config(), 0), ValidationError);
}

TEST(Train, TwoBlobOverfit) {
  std::vector<ModalityRecord> data{two_blob_record("a")};
  ModelConfig c;
  c.mode = ModelMode::scratch;
  auto model = build_model(c, 5);
  TrainConfig t;
  t.epochs = 200;
  t.batch_size = 1;
  t.learning_rate = 1e-3;
  t.step_size = 1000;
  t.eval_each_epoch = false;
  const auto h = train(*model, pointers(data), pointers(data), t);
  EXPECT_LT(h.epochs[4].train_loss, h.epochs[0].train_loss);
  EXPECT_LT(h.epochs.back().train_loss, 0.25 * h.epochs[0].train_loss);
  EXPECT_GE(model_miou(*model, pointers(data)), 95.0);
  // The two blobs' clicks select different masks.
  const auto& rec = data[0];
  ASSERT_EQ(rec.instances.size(), 2u);
  const auto& c0 = rec.instances[0].click;
  const auto& c1 = rec.instances[1].click;
  const auto a = model->predict(rec.image, {c0.row, c0.col}).logits;
  const auto b = model->predict(rec.image, {c1.row, c1.col}).logits;
  std::int64_t differ = 0;
  for (std::int64_t i = 0; i < a.numel(); ++i) differ += (a.at(i) > 0) != (b.at(i) > 0);
  EXPECT_GT(differ, 0);
}

TEST(Train, DeterministicGivenSeed) {
  std::vector<ModalityRecord> data{two_blob_record("a"), two_blob_record("b", 9, 32, 1),
                                   two_blob_record("c", 9, 32, 2)};
  auto run = [&]() {
    auto model = build_model(lora_config(), 6, &pretrained());
    auto t = short_run(12);
    t.seed = 9;
    const auto h = train(*model, pointers(data), pointers(data), t);
    return std::make_pair(h.to_json().dump(), snapshot(*model));
  };
  const auto a = run(), b = run();
  EXPECT_EQ(a.first, b.first);
  EXPECT_TRUE(a.second == b.second);
}

TEST(Loss, BestCandidateGetsMaskLoss) {
  auto model = build_model(lora_config(), 7, &pretrained());
  const auto rec = two_blob_record("a");
  const auto& inst = rec.instances[0];
  auto cand = model->forward(rec.image, {inst.click.row, inst.click.col});
  const auto l = segmentation_loss(cand, inst, LossWeights{});
  EXPECT_GE(l.candidate, 0);
  EXPECT_LT(l.candidate, cand.logits.dim(0));
  EXPECT_NEAR(l.total.item(), l.mask + l.score, 1e-12);
}

TEST(Sweep, DivergentRateIsRecordedAndSkipped) {
  // Gradient descent on w^2 from w = 1: factor |1 - 2 lr| per step.
  auto run = [](double lr) {
    double w = 1.0;
    for (int i = 0; i < 100; ++i) {
      w -= lr * 2.0 * w;
      if (!std::isfinite(w)) throw TrainingError("diverged", i);
    }
    return RunOutcome{-w * w, ""};
  };
  const auto r = sweep_lr({0.1, 0.5, 1e200}, run);
  ASSERT_EQ(r.entries.size(), 3u);
  EXPECT_EQ(r.best_lr, 0.5);
  EXPECT_TRUE(r.entries[0].ok());
  EXPECT_FALSE(r.entries[2].ok());
  EXPECT_NE(r.entries[2].error.find("lr=1e+200"), std::string::npos);
  EXPECT_TRUE(r.to_json()["runs"][2]["val_miou"].is_null());
  EXPECT_THROW(sweep_lr({1e200, 1e300}, run), TrainingError);
  EXPECT_THROW(sweep_lr({}, run), ValidationError);
}

TEST(Sweep, TiesGoToSmallerRate) {
  const auto r = sweep_lr({3e-4, 1e-4}, [](double) { return RunOutcome{50.0, ""}; });
  EXPECT_EQ(r.best_lr, 1e-4);
}
