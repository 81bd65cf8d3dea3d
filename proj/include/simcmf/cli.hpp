#pragma once

// The simcmf command-line tool. run() parses argv, dispatches to one
// subcommand and maps failures to exit codes:
//   0 success, 1 runtime failure, 2 bad command line, 3 validation failure.
// Failures print one JSON object on one line to stderr.

#include <chrono>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "simcmf/data.hpp"
#include "simcmf/eval.hpp"
#include "simcmf/model.hpp"
#include "simcmf/peft.hpp"
#include "simcmf/train.hpp"
#include "simcmf/version.hpp"

namespace simcmf::cli {

namespace fs = std::filesystem;

enum ExitCode { kOk = 0, kRuntime = 1, kUsage = 2, kValidation = 3 };

inline std::string utc_now() {
  const auto t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

inline std::string env_or(const char* name, const std::string& fallback) {
  const char* v = std::getenv(name);
  return v && *v ? std::string(v) : fallback;
}

inline fs::path cache_dir() {
  const auto home = env_or("HOME", ".");
  return env_or("SIMCMF_CACHE", (fs::path(home) / ".cache" / "simcmf").string());
}

inline fs::path cached_pretrained() { return cache_dir() / "toy_pretrained.cmf"; }

// The cached checkpoint if present, else the one shipped in assets/.
inline fs::path default_pretrained() {
  const auto cached = cached_pretrained();
#ifdef SIMCMF_ASSET_DIR
  const auto bundled = fs::path(SIMCMF_ASSET_DIR) / "toy_pretrained.cmf";
  if (!fs::exists(cached) && fs::exists(bundled)) return bundled;
#endif
  return cached;
}

inline nlohmann::json read_json_file(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw LoadError("cannot open " + path.string());
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(path.string() + " is not valid JSON: " + e.what());
  }
}

inline std::vector<double> parse_grid(const std::string& s) {
  std::vector<double> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    const auto b = item.find_first_not_of(" \t"), e = item.find_last_not_of(" \t");
    if (b == std::string::npos) continue;
    item = item.substr(b, e - b + 1);
    std::size_t used = 0;
    double v = 0;
    try {
      v = std::stod(item, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (used != item.size() || !std::isfinite(v) || v < 0)
      throw ValidationError("invalid learning rate '" + item + "' in grid");
    out.push_back(v);
  }
  if (out.empty()) throw ValidationError("learning-rate grid is empty");
  return out;
}

inline std::string lr_tag(double lr) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "lr_%g", lr);
  return buf;
}

struct Globals {
  std::uint64_t seed = 0;
  bool seed_given = false;
  std::string out;
  std::string variant;
  bool force = false;
  bool verbose = false;
};

// Resolves the output directory (--out, then SIMCMF_OUT, then
// runs/<command>) and claims it. An existing non-empty directory is only
// reused with --force, and only if it holds a previous run manifest.
inline fs::path claim_output(const Globals& g, const std::string& command) {
  fs::path dir = !g.out.empty() ? fs::path(g.out)
                                : fs::path(env_or("SIMCMF_OUT", (fs::path("runs") / command).string()));
  if (fs::exists(dir) && !fs::is_directory(dir))
    throw ValidationError("output path " + dir.string() + " exists and is not a directory");
  if (fs::exists(dir) && !fs::is_empty(dir)) {
    if (!g.force)
      throw ValidationError("output directory " + dir.string() +
                            " already exists; pass --force to replace it");
    if (!fs::exists(dir / "run_manifest.json"))
      throw ValidationError("refusing to replace " + dir.string() +
                            ": it is not an output directory of this tool");
    fs::remove_all(dir);
  }
  fs::create_directories(dir);
  return dir;
}

class RunRecorder {
 public:
  RunRecorder(fs::path dir, std::string command, std::vector<std::string> argv, std::uint64_t seed)
      : dir_(std::move(dir)) {
    doc_ = {{"command", std::move(command)},
            {"argv", std::move(argv)},
            {"seed", seed},
            {"version", kVersion},
            {"started_at", utc_now()},
            {"status", "running"},
            {"config", nlohmann::json::object()}};
    flush();
  }

  void set_config(const nlohmann::json& c) {
    doc_["config"] = c;
    flush();
  }

  void finish(const nlohmann::json& outputs) {
    doc_["outputs"] = outputs;
    doc_["finished_at"] = utc_now();
    doc_["status"] = "ok";
    flush();
  }

  void fail(const std::string& what) {
    doc_["finished_at"] = utc_now();
    doc_["status"] = "failed";
    doc_["error"] = what;
    flush();
  }

  const fs::path& dir() const { return dir_; }

 private:
  void flush() { write_text_file(dir_ / "run_manifest.json", doc_.dump(2) + "\n"); }
  fs::path dir_;
  nlohmann::json doc_;
};

inline nlohmann::json error_json(const std::string& kind, const std::string& what, int code) {
  return {{"error", kind}, {"message", what}, {"exit_code", code}};
}

// Paths inside a config file are relative to the file's directory.
inline fs::path resolve(const fs::path& base, const std::string& p) {
  if (p.empty()) return {};
  const fs::path path(p);
  return path.is_absolute() ? path : fs::absolute(base / path).lexically_normal();
}

// ---------------------------------------------------------------------------
// Training setup shared by train and sweep.

struct TrainJob {
  ModelConfig model;
  TrainConfig train;
  fs::path manifest;
  fs::path pretrained;
  double data_ratio = 1.0;
  LoadOptions load;

  nlohmann::json to_json() const {
    return {{"manifest", manifest.string()},
            {"pretrained", model.mode == ModelMode::simcmf ? pretrained.string() : ""},
            {"model", model.to_json()},
            {"train", train.to_json()},
            {"data_ratio", data_ratio},
            {"min_area", load.decompose.min_area},
            {"connectivity", load.decompose.connectivity}};
  }
};

struct TrainFlags {
  std::string config, manifest, pretrained, mode;
  double lr = -1, data_ratio = -1;
  std::int64_t max_steps = -1, epochs = -1;
};

inline TrainJob make_job(const Globals& g, const TrainFlags& f) {
  nlohmann::json j = nlohmann::json::object();
  fs::path base = fs::current_path();
  if (!f.config.empty()) {
    j = read_json_file(f.config);
    base = fs::absolute(f.config).parent_path();
  }
  TrainJob job;
  auto model_json = j.value("model", nlohmann::json::object());
  if (!f.mode.empty()) model_json["mode"] = f.mode;
  if (!g.variant.empty()) {
    auto bj = model_json.value("backbone", nlohmann::json::object());
    if (bj.value("variant", g.variant) != g.variant) bj = nlohmann::json::object();
    bj["variant"] = g.variant;
    model_json["backbone"] = bj;
  }
  job.model = ModelConfig::from_json(model_json);
  // A PEFT strategy without an explicit size gets the budget-balanced one.
  const auto pj = model_json.value("peft", nlohmann::json::object());
  static const std::map<Strategy, std::string> size_key{{Strategy::lora, "lora_rank"},
                                                        {Strategy::mlp_adapter, "bottleneck_dim"},
                                                        {Strategy::prompt_tuning,
                                                         "prompt_tokens_per_block"}};
  const auto key = size_key.find(job.model.peft.strategy);
  if (job.model.mode == ModelMode::simcmf && key != size_key.end() && !pj.contains(key->second))
    job.model.peft = budget_balance(job.model.backbone, job.model.peft.strategy,
                                    job.model.peft.target_fraction, job.model.peft);

  job.train = TrainConfig::from_json(j.value("train", nlohmann::json::object()));
  if (g.seed_given) job.train.seed = g.seed;
  if (f.lr >= 0) job.train.learning_rate = f.lr;
  if (f.max_steps >= 0) job.train.max_steps = f.max_steps;
  if (f.epochs > 0) job.train.epochs = f.epochs;
  job.train.validate();

  job.manifest = !f.manifest.empty() ? fs::absolute(f.manifest)
                                     : resolve(base, j.value("manifest", std::string()));
  if (job.manifest.empty()) throw ValidationError("no dataset manifest (use --manifest or config 'manifest')");
  job.pretrained = !f.pretrained.empty() ? fs::absolute(f.pretrained)
                                         : resolve(base, j.value("pretrained", std::string()));
  if (job.model.mode == ModelMode::simcmf && job.pretrained.empty()) {
    if (job.model.backbone.variant != Variant::toy)
      throw ValidationError("simcmf mode on " + to_string(job.model.backbone.variant) +
                            " needs --pretrained");
    job.pretrained = default_pretrained();
  }
  job.data_ratio = f.data_ratio > 0 ? f.data_ratio : j.value("data_ratio", 1.0);
  if (!(job.data_ratio > 0 && job.data_ratio <= 1))
    throw ValidationError("data_ratio must be in (0, 1]");
  job.load.decompose.min_area = j.value("min_area", job.load.decompose.min_area);
  job.load.decompose.connectivity = j.value("connectivity", job.load.decompose.connectivity);
  job.load.decompose.validate();
  return job;
}

struct PreparedData {
  std::string name;
  std::vector<ModalityRecord> train, val;
  std::vector<const ModalityRecord*> train_ptrs() const {
    std::vector<const ModalityRecord*> p;
    for (const auto& r : train) p.push_back(&r);
    return p;
  }
  std::vector<const ModalityRecord*> val_ptrs() const {
    std::vector<const ModalityRecord*> p;
    for (const auto& r : val) p.push_back(&r);
    return p;
  }
};

inline PreparedData load_for_model(const fs::path& manifest, const LoadOptions& opt,
                                   std::int64_t image_size, double ratio, std::uint64_t seed) {
  auto ds = load_dataset(manifest, opt);
  PreparedData d;
  d.name = ds.name;
  for (auto& r : ds.records) {
    auto rr = resize_for_model(r, image_size);
    (rr.split == Split::train ? d.train : d.val).push_back(std::move(rr));
  }
  if (ratio < 1.0) d.train = subsample(std::move(d.train), ratio, seed);
  return d;
}

inline Archive load_pretrained(const TrainJob& job) {
  if (!fs::exists(job.pretrained))
    throw LoadError("pretrained backbone " + job.pretrained.string() +
                    " not found; run 'simcmf pretrain-toy --install' or pass --pretrained");
  return read_archive(job.pretrained);
}

inline std::unique_ptr<SimCmfModel> model_for(const TrainJob& job, const Archive* pretrained) {
  return build_model(job.model, job.train.seed,
                     job.model.mode == ModelMode::simcmf ? pretrained : nullptr);
}

struct TrainOutputs {
  nlohmann::json summary;
};

inline nlohmann::json write_training_outputs(const fs::path& dir, const SimCmfModel& model,
                                             const TrainHistory& history, const PreparedData& data,
                                             const TrainJob& job) {
  save_model(dir / "model.cmf", model, {{"train", job.train.to_json()}});
  save_adapter(dir / "adapter.cmf", model.alignment().adapter());
  nlohmann::json outputs{{"model", "model.cmf"}, {"adapter", "adapter.cmf"},
                         {"history", "history.json"}};
  if (!model.backbone().injected.empty()) {
    save_peft(dir / "peft.cmf", model.backbone());
    outputs["peft"] = "peft.cmf";
  }
  write_text_file(dir / "history.json", history.to_json().dump(2) + "\n");
  auto report = trainable_report(model.backbone()).to_json();
  report["adapter"] = count_params(model.alignment().adapter()).trainable;
  report["patch_embedding"] = model.alignment().patch_embed().parameter_count();
  report["patch_embedding_frozen"] = model.alignment().embedding_frozen();
  write_text_file(dir / "trainable_report.json", report.dump(2) + "\n");
  outputs["trainable_report"] = "trainable_report.json";
  if (!data.val.empty()) {
    auto mode = model.config().mode == ModelMode::simcmf ? EvalMode::simcmf : EvalMode::scratch;
    auto rep = evaluate_model(model, data.val_ptrs(), mode, data.name);
    rep.data_ratio = job.data_ratio;
    write_eval_report(dir, rep);
    outputs["eval_report"] = "eval_report.json";
    outputs["val_miou"] = rep.miou;
  }
  outputs["steps"] = history.steps;
  return outputs;
}

// ---------------------------------------------------------------------------
// Commands

inline nlohmann::json cmd_make_fixture(const Globals& g, const fs::path& dir, std::int64_t train,
                                       std::int64_t val) {
  FixtureOptions o;
  o.train = train;
  o.val = val;
  o.seed = g.seed_given ? g.seed : o.seed;
  if (train <= 0 || val < 0) throw ValidationError("fixture needs train > 0 and val >= 0");
  const auto manifest = write_polarization_fixture(dir, o);
  return {{"manifest", manifest.filename().string()}, {"train", train}, {"val", val}, {"seed", o.seed}};
}

inline nlohmann::json cmd_prepare(const fs::path& dir, const std::string& manifest,
                                  std::int64_t min_area, int connectivity) {
  DecomposeOptions opt;
  opt.min_area = min_area;
  opt.connectivity = connectivity;
  return prepare_benchmark(fs::absolute(manifest), dir, opt).to_json();
}

inline nlohmann::json cmd_pretrain(const Globals& g, const fs::path& dir, std::int64_t steps,
                                   double lr, bool install) {
  PretrainConfig pc;
  if (steps > 0) pc.steps = steps;
  if (lr > 0) pc.learning_rate = lr;
  pc.seed = g.seed;
  if (steps > 0) pc.decay_every = pc.steps / 3 + 1;
  auto sam = pretrain_toy(pc, [&](std::int64_t s, double loss) {
    if (g.verbose && (s + 1) % 100 == 0)
      std::cerr << "step " << s + 1 << " loss " << loss << "\n";
  });
  save_checkpoint(dir / "toy_pretrained.cmf", *sam, DType::f64);
  nlohmann::json out{{"checkpoint", "toy_pretrained.cmf"}, {"config", pc.to_json()}};
  if (install) {
    fs::create_directories(cache_dir());
    fs::copy_file(dir / "toy_pretrained.cmf", cached_pretrained(),
                  fs::copy_options::overwrite_existing);
    out["installed"] = cached_pretrained().string();
  }
  return out;
}

inline nlohmann::json cmd_train(const Globals& g, RunRecorder& rec, const TrainFlags& f) {
  const auto job = make_job(g, f);
  rec.set_config(job.to_json());
  const auto data = load_for_model(job.manifest, job.load, job.model.backbone.image_size,
                                   job.data_ratio, job.train.seed);
  std::optional<Archive> pretrained;
  if (job.model.mode == ModelMode::simcmf) pretrained = load_pretrained(job);
  auto model = model_for(job, pretrained ? &*pretrained : nullptr);
  const auto history =
      train(*model, data.train_ptrs(), data.val_ptrs(), job.train, [&](std::int64_t s, double l) {
        if (g.verbose && (s + 1) % 10 == 0) std::cerr << "step " << s + 1 << " loss " << l << "\n";
      });
  return write_training_outputs(rec.dir(), *model, history, data, job);
}

inline nlohmann::json cmd_sweep(const Globals& g, RunRecorder& rec, const TrainFlags& f,
                                const std::string& grid_text) {
  const auto job = make_job(g, f);
  const auto grid = parse_grid(grid_text);
  auto cfg = job.to_json();
  cfg["lr_grid"] = grid;
  rec.set_config(cfg);
  const auto data = load_for_model(job.manifest, job.load, job.model.backbone.image_size,
                                   job.data_ratio, job.train.seed);
  std::optional<Archive> pretrained;
  if (job.model.mode == ModelMode::simcmf) pretrained = load_pretrained(job);
  const auto result = sweep_lr(grid, [&](double lr) {
    auto model = model_for(job, pretrained ? &*pretrained : nullptr);
    auto tc = job.train;
    tc.learning_rate = lr;
    const auto sub = rec.dir() / lr_tag(lr);
    fs::create_directories(sub);
    const auto history = train(*model, data.train_ptrs(), data.val_ptrs(), tc);
    auto j = job;
    j.train = tc;
    const auto outputs = write_training_outputs(sub, *model, history, data, j);
    RunOutcome r;
    r.score = outputs.value("val_miou", history.final_val_miou().value_or(0.0));
    r.checkpoint = (fs::path(lr_tag(lr)) / "model.cmf").string();
    return r;
  });
  write_text_file(rec.dir() / "sweep_result.json", result.to_json().dump(2) + "\n");
  return {{"sweep_result", "sweep_result.json"}, {"best_lr", result.best_lr},
          {"best_checkpoint", result.best_checkpoint}};
}

inline nlohmann::json cmd_eval(const Globals& g, RunRecorder& rec, const std::string& checkpoint,
                               const std::string& manifest, const std::string& mode_text,
                               const std::string& split_text, double data_ratio,
                               const std::string& modality, std::int64_t min_area,
                               int connectivity) {
  const auto mode = parse_eval_mode(mode_text);
  const auto split = parse_split(split_text);
  LoadOptions lo;
  lo.decompose.min_area = min_area;
  lo.decompose.connectivity = connectivity;
  lo.decompose.validate();
  rec.set_config({{"checkpoint", fs::absolute(checkpoint).string()},
                  {"manifest", fs::absolute(manifest).string()},
                  {"mode", to_string(mode)},
                  {"split", to_string(split)},
                  {"min_area", min_area},
                  {"connectivity", connectivity}});
  const auto archive = read_archive(checkpoint);
  auto ds = load_dataset(manifest, lo);
  const auto name = modality.empty() ? ds.name : modality;

  auto select = [&](std::int64_t size) {
    std::vector<ModalityRecord> recs;
    for (const auto& r : ds.records)
      if (r.split == split) recs.push_back(resize_for_model(r, size));
    if (recs.empty()) throw ValidationError("manifest has no " + to_string(split) + " records");
    return recs;
  };

  EvalReport rep;
  if (mode == EvalMode::zero_shot) {
    const auto kind = archive.meta.value("kind", std::string());
    if (kind != "backbone")
      throw ValidationError("zero-shot evaluation needs a backbone checkpoint, got kind '" + kind + "'");
    const auto variant = !g.variant.empty()
                             ? parse_variant(g.variant)
                             : parse_variant(archive.meta.value("variant", std::string("toy")));
    auto loaded = load_checkpoint(archive, variant, checkpoint);
    const auto recs = select(loaded.model->config().image_size);
    std::vector<const ModalityRecord*> ptrs;
    for (const auto& r : recs) ptrs.push_back(&r);
    rep = evaluate_zero_shot(*loaded.model, ptrs, name);
  } else {
    auto model = load_model(archive, checkpoint);
    const auto expect = model->config().mode == ModelMode::simcmf ? EvalMode::simcmf : EvalMode::scratch;
    if (expect != mode)
      throw ValidationError("checkpoint was trained in " + to_string(expect) + " mode, not " +
                            to_string(mode));
    const auto recs = select(model->image_size());
    std::vector<const ModalityRecord*> ptrs;
    for (const auto& r : recs) ptrs.push_back(&r);
    rep = evaluate_model(*model, ptrs, mode, name);
  }
  if (data_ratio > 0) rep.data_ratio = data_ratio;
  write_eval_report(rec.dir(), rep);
  return {{"eval_report", "eval_report.json"}, {"miou", rep.miou},
          {"instances", rep.instances.size()}};
}

inline nlohmann::json cmd_report(RunRecorder& rec, const std::string& in_dir) {
  if (!fs::is_directory(in_dir)) throw LoadError("report input " + in_dir + " is not a directory");
  std::vector<fs::path> files;
  for (const auto& e : fs::recursive_directory_iterator(in_dir))
    if (e.is_regular_file() && e.path().filename() == "eval_report.json") files.push_back(e.path());
  std::sort(files.begin(), files.end());
  if (files.empty()) throw ValidationError("no eval_report.json files under " + in_dir);
  std::vector<EvalReport> reports;
  std::vector<std::string> rel;
  for (const auto& p : files) {
    reports.push_back(EvalReport::from_json(read_json_file(p)));
    rel.push_back(fs::relative(p, in_dir).string());
  }
  rec.set_config({{"in", fs::absolute(in_dir).string()}, {"reports", rel}});
  const auto f = write_report(reports, rec.dir());
  return {{"table", f.table_csv.filename().string()},
          {"ratio_curve", f.ratio_csv.filename().string()},
          {"plot", f.ratio_svg.filename().string()},
          {"summary", f.summary_json.filename().string()},
          {"reports", reports.size()}};
}

// ---------------------------------------------------------------------------

inline int run(int argc, const char* const* argv, std::ostream& out = std::cout,
               std::ostream& err = std::cerr) {
  CLI::App app{"Cross-modal fine-tuning of promptable segmentation models"};
  app.require_subcommand(1);
  app.set_version_flag("--version", std::string(kVersion));
  Globals g;
  app.add_option("--seed", g.seed, "Random seed")->each([&](const std::string&) { g.seed_given = true; });
  app.add_option("--out", g.out, "Output directory (default: $SIMCMF_OUT, else runs/<command>)");
  app.add_option("--variant", g.variant, "Backbone variant")->check(CLI::IsMember({"toy", "vit_b"}));
  app.add_flag("--force", g.force, "Replace an existing output directory");
  app.add_flag("-v,--verbose", g.verbose, "Progress on stderr");

  int fixture_train = 8, fixture_val = 4;
  auto* fixture = app.add_subcommand("make-fixture", "Write the synthetic 9-channel fixture");
  fixture->add_option("--train", fixture_train, "Train records");
  fixture->add_option("--val", fixture_val, "Val records");

  std::string manifest;
  std::int64_t min_area = 20;
  int connectivity = 8;
  auto* prepare = app.add_subcommand("prepare", "Decompose labels into an instance benchmark");
  prepare->add_option("--manifest", manifest, "Input manifest")->required();
  prepare->add_option("--min-area", min_area, "Smallest kept instance (pixels)");
  prepare->add_option("--connectivity", connectivity, "4 or 8")->check(CLI::IsMember({4, 8}));

  std::int64_t pre_steps = 0;
  double pre_lr = 0;
  bool install = false;
  auto* pretrain = app.add_subcommand("pretrain-toy", "Pretrain the toy backbone on synthetic RGB scenes");
  pretrain->add_option("--steps", pre_steps, "Optimizer steps");
  pretrain->add_option("--lr", pre_lr, "Learning rate");
  pretrain->add_flag("--install", install, "Copy the checkpoint into $SIMCMF_CACHE");

  TrainFlags tf;
  auto add_train_flags = [&](CLI::App* c) {
    c->add_option("--config", tf.config, "Training config (JSON)");
    c->add_option("--manifest", tf.manifest, "Dataset manifest (overrides config)");
    c->add_option("--pretrained", tf.pretrained, "Pretrained backbone checkpoint");
    c->add_option("--mode", tf.mode, "simcmf or scratch")->check(CLI::IsMember({"simcmf", "scratch"}));
    c->add_option("--data-ratio", tf.data_ratio, "Fraction of the train split to use");
    c->add_option("--max-steps", tf.max_steps, "Cap on optimizer steps");
    c->add_option("--epochs", tf.epochs, "Epochs");
  };
  auto* train_cmd = app.add_subcommand("train", "Fine-tune on a prepared dataset");
  add_train_flags(train_cmd);
  train_cmd->add_option("--lr", tf.lr, "Learning rate (overrides config)");

  std::string grid = "3e-6,1e-5,3e-5,1e-4,3e-4,1e-3,3e-3";
  auto* sweep = app.add_subcommand("sweep", "One training run per learning rate");
  add_train_flags(sweep);
  sweep->add_option("--lr-grid", grid, "Comma-separated learning rates");

  std::string checkpoint, mode = "simcmf", split = "val", modality;
  double data_ratio = -1;
  auto* eval = app.add_subcommand("eval", "Click-prompt evaluation");
  eval->add_option("--checkpoint", checkpoint, "Model checkpoint (backbone for zero-shot)")->required();
  eval->add_option("--manifest", manifest, "Prepared manifest")->required();
  eval->add_option("--mode", mode, "simcmf, scratch or zero-shot")
      ->check(CLI::IsMember({"simcmf", "scratch", "zero-shot", "zero_shot"}));
  eval->add_option("--split", split, "train or val")->check(CLI::IsMember({"train", "val"}));
  eval->add_option("--data-ratio", data_ratio, "Tag the report with a training-data ratio");
  eval->add_option("--modality", modality, "Modality name (default: manifest name)");
  eval->add_option("--min-area", min_area, "Smallest kept instance (pixels)");
  eval->add_option("--connectivity", connectivity, "4 or 8")->check(CLI::IsMember({4, 8}));

  std::string in_dir;
  auto* report = app.add_subcommand("report", "Tables and curves from eval reports");
  report->add_option("--in", in_dir, "Directory searched for eval_report.json")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    out << app.help();
    return kOk;
  } catch (const CLI::CallForAllHelp& e) {
    out << app.help("", CLI::AppFormatMode::All);
    return kOk;
  } catch (const CLI::CallForVersion& e) {
    out << kVersion << "\n";
    return kOk;
  } catch (const CLI::ParseError& e) {
    err << error_json("usage", e.what(), kUsage).dump() << "\n";
    return kUsage;
  }

  CLI::App* sub = app.get_subcommands().front();
  const std::string command = sub->get_name();
  std::vector<std::string> args(argv, argv + argc);
  std::optional<RunRecorder> rec;
  auto fail = [&](const char* kind, const std::string& what, int code) {
    if (rec) {
      try {
        rec->fail(what);
      } catch (...) {
      }
    }
    err << error_json(kind, what, code).dump() << "\n";
    return code;
  };
  try {
    rec.emplace(claim_output(g, command), command, args, g.seed);
    nlohmann::json result;
    if (sub == fixture) {
      result = cmd_make_fixture(g, rec->dir(), fixture_train, fixture_val);
      rec->set_config({{"train", fixture_train}, {"val", fixture_val}});
    } else if (sub == prepare) {
      rec->set_config({{"manifest", fs::absolute(manifest).string()},
                       {"min_area", min_area},
                       {"connectivity", connectivity}});
      result = cmd_prepare(rec->dir(), manifest, min_area, connectivity);
    } else if (sub == pretrain) {
      result = cmd_pretrain(g, rec->dir(), pre_steps, pre_lr, install);
      rec->set_config(result["config"]);
    } else if (sub == train_cmd) {
      result = cmd_train(g, *rec, tf);
    } else if (sub == sweep) {
      result = cmd_sweep(g, *rec, tf, grid);
    } else if (sub == eval) {
      result = cmd_eval(g, *rec, checkpoint, manifest, mode, split, data_ratio, modality, min_area,
                        connectivity);
    } else if (sub == report) {
      result = cmd_report(*rec, in_dir);
    }
    rec->finish(result);
    result["out"] = rec->dir().string();
    out << result.dump() << "\n";
    return kOk;
  } catch (const ValidationError& e) {
    return fail("validation", e.what(), kValidation);
  } catch (const TrainingError& e) {
    return fail("training", e.what(), kRuntime);
  } catch (const LoadError& e) {
    return fail("load", e.what(), kRuntime);
  } catch (const std::exception& e) {
    return fail("runtime", e.what(), kRuntime);
  }
}

}  // namespace simcmf::cli
