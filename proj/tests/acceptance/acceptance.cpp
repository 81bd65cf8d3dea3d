// One PASS/FAIL line per acceptance criterion; exit status 1 if any fails.

#include <chrono>
#include <cstdio>
#include <deque>
#include <fstream>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

#include "simcmf/cli.hpp"
#include "test_support.hpp"
#include "toy_records.hpp"

using namespace simcmf;
namespace fs = std::filesystem;

namespace {

struct Check {
  bool ok = true;
  std::string detail;

  void expect(bool cond, const std::string& what) {
    if (!cond) {
      ok = false;
      if (!detail.empty()) detail += "; ";
      detail += what;
    }
  }
};

int failures = 0;

void criterion(int id, const std::string& name, double limit_s, const std::function<Check()>& body) {
  const auto t0 = std::chrono::steady_clock::now();
  Check c;
  try {
    c = body();
  } catch (const std::exception& e) {
    c.ok = false;
    c.detail = std::string("exception: ") + e.what();
  }
  const double s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  if (s > limit_s) c.expect(false, "runtime " + format_fixed(s, 1) + "s over " + format_fixed(limit_s, 0) + "s");
  std::printf("%s %2d %s (%.2fs)%s%s\n", c.ok ? "PASS" : "FAIL", id, name.c_str(), s,
              c.detail.empty() ? "" : " | ", c.detail.c_str());
  std::fflush(stdout);
  if (!c.ok) ++failures;
}

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  std::stringstream s;
  s << f.rdbuf();
  return s.str();
}

// Runs the CLI in-process; returns the stdout JSON (or throws with stderr).
nlohmann::json simcmf_cli(std::vector<std::string> args) {
  args.insert(args.begin(), "simcmf");
  std::vector<char*> argv;
  for (auto& a : args) argv.push_back(a.data());
  std::ostringstream out, err;
  const int code = cli::run(static_cast<int>(argv.size()), argv.data(), out, err);
  if (code != 0) throw std::runtime_error("simcmf exited " + std::to_string(code) + ": " + err.str());
  return nlohmann::json::parse(out.str());
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  double m = 0;
  for (std::int64_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(a.at(i) - b.at(i)));
  return m;
}

// Breadth-first flood fill over equal nonzero labels, 8-connected.
std::vector<std::vector<std::uint8_t>> flood_fill_instances(const LabelGrid& g) {
  const auto H = g.height, W = g.width;
  std::vector<int> seen(static_cast<std::size_t>(H * W), 0);
  std::vector<std::vector<std::uint8_t>> out;
  for (std::int64_t s = 0; s < H * W; ++s) {
    if (g.labels[s] == 0 || seen[s]) continue;
    std::vector<std::uint8_t> m(static_cast<std::size_t>(H * W), 0);
    std::deque<std::int64_t> q{s};
    seen[s] = 1;
    while (!q.empty()) {
      const auto p = q.front();
      q.pop_front();
      m[p] = 1;
      for (int dr = -1; dr <= 1; ++dr)
        for (int dc = -1; dc <= 1; ++dc) {
          const auto r = p / W + dr, c = p % W + dc;
          if (r < 0 || c < 0 || r >= H || c >= W) continue;
          const auto n = r * W + c;
          if (!seen[n] && g.labels[n] == g.labels[s]) {
            seen[n] = 1;
            q.push_back(n);
          }
        }
    }
    out.push_back(std::move(m));
  }
  return out;
}

const fs::path& work_dir() {
  static const fs::path d = simcmf::testing::temp_dir("acceptance");
  return d;
}

// Prepared 8 train / 4 val fixture, built once through the CLI.
const fs::path& fixture_manifest() {
  static const fs::path m = [] {
    simcmf_cli({"--out", (work_dir() / "fixture").string(), "make-fixture"});
    simcmf_cli({"--out", (work_dir() / "prepared").string(), "prepare", "--manifest",
                (work_dir() / "fixture" / "manifest.json").string()});
    return work_dir() / "prepared" / "manifest.json";
  }();
  return m;
}

const fs::path source_dir(SIMCMF_SOURCE_DIR);

}  // namespace

int main() {
  criterion(1, "adapter parameter counts", 1.0, [] {
    Check c;
    const std::int64_t expect[] = {30, 5443, 42371, 79299, 116227};
    std::string got;
    for (std::int64_t n = 1; n <= 5; ++n) {
      AdapterConfig a;
      a.in_channels = 9;
      a.hidden_dim = 64;
      a.kernel_size = 3;
      a.num_layers = n;
      const auto p = build_adapter(a, 0, nn::InitMode::meta)->parameter_count();
      got += (n > 1 ? "," : "") + std::to_string(p);
      c.expect(p == expect[n - 1], "n=" + std::to_string(n) + " gives " + std::to_string(p));
    }
    c.detail = c.ok ? got : c.detail;
    return c;
  });

  criterion(2, "vit_b budget balance at 4%", 30.0, [] {
    Check c;
    const auto cfg = BackboneConfig::vit_b();
    const auto total = make_backbone(cfg, 0, nn::InitMode::meta)->parameter_count();
    c.expect(std::abs(static_cast<double>(total) - 93.7e6) <= 0.01 * 93.7e6, "total " + std::to_string(total));
    std::string got = "total " + std::to_string(total);
    for (auto s : {Strategy::lora, Strategy::mlp_adapter, Strategy::prompt_tuning}) {
      const auto p = budget_balance(cfg, s, 0.04);
      auto inj = inject(make_backbone(cfg, 0, nn::InitMode::meta), p);
      const auto n = trainable_report(inj).trainable;
      got += ", " + to_string(s) + " " + std::to_string(n);
      c.expect(n >= 3'400'000 && n <= 5'000'000, to_string(s) + " " + std::to_string(n));
    }
    if (c.ok) c.detail = got;
    return c;
  });

  criterion(3, "zero-init equivalence", 60.0, [] {
    Check c;
    const auto cfg = BackboneConfig::toy();
    auto base = make_backbone(cfg, 21);
    auto deviation = [&](Strategy s, int trials) {
      PeftConfig p;
      p.strategy = s;
      p = p.with_size(8);
      auto inj = inject(make_backbone(cfg, 21), p, 5);
      Rng rng(8);
      double worst = 0;
      for (int t = 0; t < trials; ++t) {
        auto img = simcmf::testing::random_tensor({3, cfg.image_size, cfg.image_size}, rng, 1.0, false);
        const Click click{static_cast<std::int64_t>(rng.below(cfg.image_size)),
                          static_cast<std::int64_t>(rng.below(cfg.image_size))};
        NoGradGuard g;
        auto a = base->decode_tokens(base->image_encoder().patch_embed().forward(img), click);
        auto b = inj.sam->decode_tokens(inj.sam->image_encoder().patch_embed().forward(img), click);
        worst = std::max({worst, max_abs_diff(a.logits, b.logits), max_abs_diff(a.scores, b.scores)});
      }
      return worst;
    };
    const double lora = deviation(Strategy::lora, 100), mlp = deviation(Strategy::mlp_adapter, 100),
                 prompt = deviation(Strategy::prompt_tuning, 100);
    c.expect(lora <= 1e-5, "lora " + std::to_string(lora));
    c.expect(mlp <= 1e-5, "mlp_adapter " + std::to_string(mlp));
    c.expect(prompt > 1e-6, "prompt_tuning " + std::to_string(prompt));
    char buf[128];
    std::snprintf(buf, sizeof buf, "lora %.1e, mlp_adapter %.1e, prompt_tuning %.1e", lora, mlp, prompt);
    if (c.ok) c.detail = buf;
    return c;
  });

  criterion(4, "freeze contracts after 100 steps", 120.0, [] {
    Check c;
    std::vector<ModalityRecord> data{simcmf::testing::two_blob_record("a"),
                                     simcmf::testing::two_blob_record("b", 9, 32, 1)};
    const auto pre = backbone_archive(*make_backbone(BackboneConfig::toy(), 17));
    for (auto s : {Strategy::lora, Strategy::full_finetune}) {
      ModelConfig mc;
      mc.peft.strategy = s;
      if (s == Strategy::lora) mc.peft = mc.peft.with_size(4);
      auto model = build_model(mc, 3, &pre);
      std::map<std::string, std::vector<double>> before;
      for (const auto& p : model->named_parameters()) before[p.name].assign(p.tensor.data().begin(), p.tensor.data().end());
      TrainConfig t;
      t.epochs = 1000;
      t.max_steps = 100;
      t.batch_size = 2;
      t.learning_rate = 1e-3;
      t.eval_each_epoch = false;
      train(*model, simcmf::testing::pointers(data), {}, t);
      int moved = 0;
      for (const auto& p : model->named_parameters()) {
        const bool same = std::vector<double>(p.tensor.data().begin(), p.tensor.data().end()) == before[p.name];
        const bool embed = p.name.rfind("alignment.patch_embed.", 0) == 0;
        const bool base = p.name.rfind("backbone.", 0) == 0 && !model->backbone().is_injected(p.name.substr(9));
        if (embed) c.expect(same, to_string(s) + ": " + p.name + " changed");
        if (base && s != Strategy::full_finetune) c.expect(same, to_string(s) + ": " + p.name + " changed");
        moved += !same;
      }
      c.expect(moved > 0, to_string(s) + ": nothing trained");
    }
    return c;
  });

  criterion(5, "adapter gradients vs finite differences", 60.0, [] {
    Check c;
    AdapterConfig a;
    a.in_channels = 5;
    a.num_layers = 2;
    a.kernel_size = 3;
    a.hidden_dim = 8;
    auto ad = build_adapter(a, 11);
    Rng rng(2);
    for (const auto& p : ad->named_parameters())
      for (auto& v : p.tensor.mutable_data()) v += rng.normal(0.0, 0.3);
    auto x = simcmf::testing::random_tensor({5, 8, 8}, rng, 1.0, false);
    auto probe = simcmf::testing::random_tensor({3, 8, 8}, rng, 1.0, false);
    auto loss = [&]() { return ops::sum(ops::mul(ad->forward(x), probe)); };
    ad->zero_grad();
    loss().backward();
    double worst = 0;
    for (const auto& p : ad->named_parameters()) {
      const auto num = simcmf::testing::numeric_gradient(
          [&]() {
            NoGradGuard g;
            return loss().item();
          },
          p.tensor, 1e-4);
      worst = std::max(worst, simcmf::testing::max_relative_error(p.tensor.grad(), num));
    }
    char buf[64];
    std::snprintf(buf, sizeof buf, "max relative error %.2e", worst);
    c.expect(worst < 1e-3, buf);
    if (c.ok) c.detail = buf;
    return c;
  });

  criterion(6, "instance decomposition and click oracles", 60.0, [] {
    Check c;
    Rng rng(31);
    for (int t = 0; t < 50; ++t) {
      LabelGrid g(32, 32, std::vector<std::int64_t>(1024, 0));
      const auto blobs = rng.range(1, 8);
      for (std::int64_t b = 0; b < blobs; ++b) {
        const auto cls = rng.range(1, 3);
        const double r0 = rng.uniform(0, 32), c0 = rng.uniform(0, 32), rad = rng.uniform(1.5, 7);
        for (int r = 0; r < 32; ++r)
          for (int col = 0; col < 32; ++col)
            if ((r - r0) * (r - r0) + (col - c0) * (col - c0) <= rad * rad) g.labels[r * 32 + col] = cls;
      }
      for (int i = 0; i < 40; ++i) g.labels[rng.below(1024)] = rng.range(0, 3);
      DecomposeOptions opt;
      opt.min_area = 1;
      const auto got = decompose_semantic_to_instances(g, opt);
      const auto want = flood_fill_instances(g);
      c.expect(got.size() == want.size(), "grid " + std::to_string(t) + ": instance count");
      for (std::size_t i = 0; i < std::min(got.size(), want.size()); ++i)
        c.expect(got[i].mask == want[i], "grid " + std::to_string(t) + ": instance " + std::to_string(i));
    }
    for (int t = 0; t < 100; ++t) {
      const double r0 = rng.uniform(10, 22), c0 = rng.uniform(10, 22);
      const double outer = rng.uniform(6, 10), inner = rng.uniform(0, outer - 3);
      const double gap_dir = rng.uniform(0, 2 * M_PI);
      std::vector<std::uint8_t> m(1024, 0);
      for (int r = 0; r < 32; ++r)
        for (int col = 0; col < 32; ++col) {
          const double dr = r - r0, dc = col - c0, d2 = dr * dr + dc * dc;
          const bool in_ring = d2 <= outer * outer && d2 >= inner * inner;
          // Notch out a wedge so rings and discs become concave.
          const double ang = std::atan2(dr, dc);
          const bool notch = std::abs(std::remainder(ang - gap_dir, 2 * M_PI)) < 0.4 && t % 2 == 0;
          m[r * 32 + col] = in_ring && !notch;
        }
      if (std::count(m.begin(), m.end(), 1) == 0) continue;
      const auto p = compute_click(m, 32, 32);
      c.expect(m[p.row * 32 + p.col] == 1, "blob " + std::to_string(t) + ": click outside mask");
    }
    return c;
  });

  criterion(7, "iou and mIoU exactness", 1.0, [] {
    Check c;
    auto square = [](int r0, int c0) {
      std::vector<std::uint8_t> m(256, 0);
      for (int r = r0; r < r0 + 6; ++r)
        for (int col = c0; col < c0 + 6; ++col) m[r * 16 + col] = 1;
      return m;
    };
    const auto a = square(2, 2);
    c.expect(iou(a, a) == 1.0, "identical");
    c.expect(iou(a, square(9, 9)) == 0.0, "disjoint");
    c.expect(std::abs(iou(a, square(2, 5)) - 1.0 / 3.0) <= 1e-12, "half overlap");
    EvalReport r;
    const double ious[] = {1.0, 0.5, 0.2, 0.0, 0.75};
    for (double v : ious) r.instances.push_back({"r", 0, v});
    r.recompute();
    c.expect(std::abs(r.miou - 100.0 * 2.45 / 5.0) <= 1e-12, "mIoU " + std::to_string(r.miou));
    return c;
  });

  criterion(8, "learning-rate schedule", 1.0, [] {
    Check c;
    for (std::int64_t e = 0; e < 50; ++e) {
      const double base = 1e-3;
      c.expect(schedule_lr(base, e) == base * std::pow(0.5, std::floor(e / 10.0)), "epoch " + std::to_string(e));
    }
    return c;
  });

  criterion(9, "fixture: pretrained + adapter + LoRA vs scratch, 500 steps", 600.0, [] {
    Check c;
    const auto config = (source_dir / "configs" / "fixture_lora.json").string();
    const auto pretrained = (source_dir / "assets" / "toy_pretrained.cmf").string();
    const auto& manifest = fixture_manifest();
    const auto ours = simcmf_cli({"--out", (work_dir() / "lora").string(), "train", "--config", config,
                                  "--manifest", manifest.string(), "--pretrained", pretrained});
    const auto scratch = simcmf_cli({"--out", (work_dir() / "scratch").string(), "train", "--config", config,
                                     "--manifest", manifest.string(), "--mode", "scratch"});
    const double a = ours.at("val_miou").get<double>(), b = scratch.at("val_miou").get<double>();
    c.expect(ours.at("steps") == 500 && scratch.at("steps") == 500, "step budgets differ from 500");
    c.expect(a >= 90.0, "val mIoU " + format_fixed(a) + " < 90");
    c.expect(a > b, "not above scratch");
    c.detail = (c.detail.empty() ? "" : c.detail + " | ") + "val mIoU " + format_fixed(a) + " vs scratch " +
               format_fixed(b);
    return c;
  });

  criterion(10, "determinism", 300.0, [] {
    Check c;
    const auto& manifest = fixture_manifest();
    const auto config = (source_dir / "configs" / "fixture_lora.json").string();
    const auto pretrained = (source_dir / "assets" / "toy_pretrained.cmf").string();
    fs::path runs[2];
    for (int i = 0; i < 2; ++i) {
      runs[i] = work_dir() / ("det_" + std::to_string(i));
      simcmf_cli({"--seed", "3", "--out", runs[i].string(), "train", "--config", config, "--manifest",
                  manifest.string(), "--pretrained", pretrained, "--max-steps", "40"});
      simcmf_cli({"--out", (runs[i] / "report").string(), "report", "--in", runs[i].string()});
    }
    for (const char* f : {"model.cmf", "adapter.cmf", "peft.cmf", "history.json", "eval_report.json",
                          "eval_instances.csv", "trainable_report.json", "report/table.csv",
                          "report/ratio_curve.csv", "report/ratio_curve.svg", "report/summary.json"})
      c.expect(slurp(runs[0] / f) == slurp(runs[1] / f) && !slurp(runs[0] / f).empty(), std::string(f) + " differs");
    return c;
  });

  criterion(11, "pseudo-modality round trip", 10.0, [] {
    Check c;
    Rng rng(4);
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
      auto rgb = simcmf::testing::random_tensor({3, 16, 16}, rng, 1.0, false);
      auto x = simcmf::testing::random_tensor({6, 16, 16}, rng, 1.0, false);
      const auto a = make_pseudo_modality(rgb, x, seed), b = make_pseudo_modality(rgb, x, seed);
      c.expect(a.permutation == b.permutation, "seed " + std::to_string(seed) + " not deterministic");
      auto sorted = a.permutation;
      std::sort(sorted.begin(), sorted.end());
      for (std::int64_t i = 0; i < 9; ++i) c.expect(sorted[i] == i, "not a bijection");
      const auto back = invert_pseudo_modality(a.image, a.permutation);
      const auto concat = concat_channels(rgb, x);
      bool exact = back.shape() == concat.shape();
      for (std::int64_t i = 0; exact && i < concat.numel(); ++i) exact = back.at(i) == concat.at(i);
      c.expect(exact, "seed " + std::to_string(seed) + " inverse not exact");
    }
    return c;
  });

  std::printf("%s: %d of 11 criteria failed\n", failures ? "FAIL" : "PASS", failures);
  return failures ? 1 : 0;
}
