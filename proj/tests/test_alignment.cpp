#include <gtest/gtest.h>

#include "simcmf/alignment.hpp"
#include "simcmf/backbone.hpp"
#include "test_support.hpp"

using namespace simcmf;
using simcmf::testing::random_tensor;

namespace {

// Closed-form count: k x k body convs with bias, 1x1 head to 3 channels.
std::int64_t expected_params(std::int64_t c, std::int64_t n, std::int64_t k, std::int64_t d) {
  if (n == 1) return c * 3 + 3;
  std::int64_t total = c * d * k * k + d;
  total += (n - 2) * (d * d * k * k + d);
  return total + d * 3 + 3;
}

AdapterConfig config(std::int64_t c, std::int64_t n, std::int64_t k, std::int64_t d) {
  AdapterConfig a;
  a.in_channels = c;
  a.num_layers = n;
  a.kernel_size = k;
  a.hidden_dim = d;
  return a;
}

}  // namespace

TEST(Adapter, ParameterCountsMatchClosedForm) {
  const std::int64_t published[] = {30, 5443, 42371, 79299, 116227};
  for (std::int64_t n = 1; n <= 5; ++n) {
    auto a = build_adapter(config(9, n, 3, 64), 0);
    EXPECT_EQ(a->parameter_count(), expected_params(9, n, 3, 64)) << "n=" << n;
    EXPECT_EQ(a->parameter_count(), published[n - 1]) << "n=" << n;
  }
  EXPECT_EQ(build_adapter(config(4, 3, 5, 16), 0)->parameter_count(), expected_params(4, 3, 5, 16));
}

TEST(Adapter, ParameterCountOfFiveLayerDefaultWidth) {
  // 9*64*9+64 + 3*(64*64*9+64) + 64*3+3
  EXPECT_EQ(build_adapter(config(9, 5, 3, 64), 0, nn::InitMode::meta)->parameter_count(), 116227);
}

TEST(Adapter, OutputShapeAndZeroHead) {
  auto a = build_adapter(config(9, 2, 3, 64), 3);
  Rng rng(1);
  auto x = random_tensor({9, 12, 10}, rng, 1.0, false);
  auto y = a->forward(x);
  EXPECT_EQ(y.shape(), (Shape{3, 12, 10}));
  for (double v : y.data()) EXPECT_EQ(v, 0.0);
}

TEST(Adapter, RejectsWrongChannelCount) {
  auto a = build_adapter(config(9, 2, 3, 8), 0);
  Rng rng(1);
  EXPECT_THROW(a->forward(random_tensor({3, 8, 8}, rng, 1.0, false)), ShapeError);
  EXPECT_THROW(a->forward(random_tensor({9, 8}, rng, 1.0, false)), ShapeError);
}

TEST(Adapter, ValidatesConfig) {
  EXPECT_THROW(config(9, 2, 4, 8).validate(), ValidationError);
  EXPECT_THROW(config(0, 2, 3, 8).validate(), ValidationError);
  EXPECT_THROW(config(9, 0, 3, 8).validate(), ValidationError);
  EXPECT_THROW(config(9, 2, 3, 0).validate(), ValidationError);
  nlohmann::json j = config(9, 2, 3, 8).to_json();
  j["nonlinearity"] = "tanh";
  EXPECT_THROW(AdapterConfig::from_json(j), ValidationError);
}

TEST(Adapter, JsonRoundTrip) {
  const auto c = config(5, 3, 5, 12);
  EXPECT_EQ(AdapterConfig::from_json(c.to_json()).to_json(), c.to_json());
}

TEST(Adapter, SingleLayerIsPointwiseLinear) {
  auto a = build_adapter(config(3, 1, 3, 64), 0);
  a->set_identity();
  Rng rng(5);
  auto x = random_tensor({3, 4, 4}, rng, 1.0, false);
  auto y = a->forward(x);
  for (std::int64_t i = 0; i < x.numel(); ++i) EXPECT_EQ(y.at(i), x.at(i));
  EXPECT_THROW(build_adapter(config(9, 1, 3, 8), 0)->set_identity(), ValidationError);
}

TEST(Adapter, GradientsMatchFiniteDifferences) {
  auto a = build_adapter(config(5, 2, 3, 8), 11);
  Rng rng(2);
  // Non-zero head so every layer receives gradient.
  for (const auto& p : a->named_parameters())
    for (auto& v : p.tensor.mutable_data()) v += rng.normal(0.0, 0.3);
  auto x = random_tensor({5, 6, 6}, rng, 1.0, false);
  auto probe = random_tensor({3, 6, 6}, rng, 1.0, false);
  auto loss = [&]() { return ops::sum(ops::mul(a->forward(x), probe)); };
  a->zero_grad();
  loss().backward();
  double worst = 0.0;
  for (const auto& p : a->named_parameters()) {
    auto numeric = simcmf::testing::numeric_gradient(
        [&]() {
          NoGradGuard g;
          return loss().item();
        },
        p.tensor, 1e-4);
    worst = std::max(worst, simcmf::testing::max_relative_error(p.tensor.grad(), numeric));
  }
  EXPECT_LT(worst, 1e-3);
}

TEST(PatchEmbedding, AdoptedWeightsAreBitIdenticalAndFrozen) {
  auto sam = make_backbone(BackboneConfig::toy(), 4);
  const auto archive = backbone_archive(*sam);
  auto embed = adopt_pretrained_embedding(archive);
  const auto& src = sam->image_encoder().patch_embed().proj().weight();
  ASSERT_EQ(embed->proj().weight().numel(), src.numel());
  for (std::int64_t i = 0; i < src.numel(); ++i) EXPECT_EQ(embed->proj().weight().at(i), src.at(i));
  for (const auto& p : embed->named_parameters()) EXPECT_FALSE(p.tensor.requires_grad());
  auto unfrozen = adopt_pretrained_embedding(archive, false);
  for (const auto& p : unfrozen->named_parameters()) EXPECT_TRUE(p.tensor.requires_grad());
}

TEST(PatchEmbedding, MissingTensorIsALoadError) {
  Archive a;
  EXPECT_THROW(adopt_pretrained_embedding(a), LoadError);
}

TEST(PatchEmbedding, TokensFollowPatchGrid) {
  nn::Init init(1);
  PatchEmbed e(4, 16, init);
  Rng rng(3);
  auto tokens = e.forward(random_tensor({3, 16, 8}, rng, 1.0, false));
  EXPECT_EQ(tokens.shape(), (Shape{8, 16}));
  EXPECT_THROW(e.forward(random_tensor({3, 10, 8}, rng, 1.0, false)), ShapeError);
}

TEST(Alignment, ComposesAdapterAndEmbedding) {
  auto sam = make_backbone(BackboneConfig::toy(), 4);
  AlignmentModule m(build_adapter(config(9, 2, 3, 8), 1), adopt_pretrained_embedding(backbone_archive(*sam)));
  EXPECT_TRUE(m.embedding_frozen());
  Rng rng(3);
  const auto s = BackboneConfig::toy().image_size;
  auto tokens = m.forward(random_tensor({9, s, s}, rng, 1.0, false));
  EXPECT_EQ(tokens.shape(), (Shape{BackboneConfig::toy().num_tokens(), BackboneConfig::toy().embed_dim}));
}

TEST(Alignment, AdapterCheckpointRoundTrip) {
  auto a = build_adapter(config(9, 3, 3, 8), 9);
  Rng rng(2);
  for (const auto& p : a->named_parameters())
    for (auto& v : p.tensor.mutable_data()) v = rng.normal();
  const auto path = simcmf::testing::temp_dir("adapter_roundtrip") / "a.cmf";
  save_adapter(path, *a);
  auto b = load_adapter(path);
  EXPECT_EQ(b->config().to_json(), a->config().to_json());
  auto pa = a->named_parameters(), pb = b->named_parameters();
  ASSERT_EQ(pa.size(), pb.size());
  for (std::size_t i = 0; i < pa.size(); ++i)
    for (std::int64_t j = 0; j < pa[i].tensor.numel(); ++j)
      EXPECT_EQ(pa[i].tensor.at(j), pb[i].tensor.at(j));
}
