#pragma once

// Click-prompt evaluation, reports and comparison tables.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "simcmf/data.hpp"
#include "simcmf/model.hpp"

namespace simcmf {

enum class EvalMode { simcmf, scratch, zero_shot };

inline std::string to_string(EvalMode m) {
  switch (m) {
    case EvalMode::simcmf: return "simcmf";
    case EvalMode::scratch: return "scratch";
    case EvalMode::zero_shot: return "zero_shot";
  }
  return "?";
}

inline EvalMode parse_eval_mode(const std::string& s) {
  if (s == "simcmf") return EvalMode::simcmf;
  if (s == "scratch") return EvalMode::scratch;
  if (s == "zero_shot" || s == "zero-shot") return EvalMode::zero_shot;
  throw ValidationError("unknown eval mode '" + s + "' (expected simcmf, scratch or zero-shot)");
}

inline double iou(std::span<const std::uint8_t> pred, std::span<const std::uint8_t> gt) {
  if (pred.size() != gt.size())
    throw ShapeError("iou: masks have " + std::to_string(pred.size()) + " and " +
                     std::to_string(gt.size()) + " pixels");
  std::int64_t inter = 0, uni = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const bool p = pred[i] != 0, g = gt[i] != 0;
    inter += p && g;
    uni += p || g;
  }
  return uni == 0 ? 1.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

inline double iou(const std::vector<std::uint8_t>& pred, std::int64_t ph, std::int64_t pw,
                  const std::vector<std::uint8_t>& gt, std::int64_t gh, std::int64_t gw) {
  if (ph != gh || pw != gw)
    throw ShapeError("iou: " + std::to_string(ph) + "x" + std::to_string(pw) + " vs " +
                     std::to_string(gh) + "x" + std::to_string(gw));
  return iou(std::span<const std::uint8_t>(pred), std::span<const std::uint8_t>(gt));
}

// Binary mask from logits thresholded at 0.
inline std::vector<std::uint8_t> threshold_logits(const Tensor& logits) {
  std::vector<std::uint8_t> m(static_cast<std::size_t>(logits.numel()));
  const auto d = logits.data();
  for (std::size_t i = 0; i < m.size(); ++i) m[i] = d[i] > 0.0 ? 1 : 0;
  return m;
}

struct InstanceResult {
  std::string record_id;
  std::int64_t instance_id = 0;  // index within the record
  double iou = 0.0;
};

struct EvalReport {
  std::string modality;
  EvalMode mode = EvalMode::simcmf;
  std::optional<double> data_ratio;
  std::vector<InstanceResult> instances;
  double miou = 0.0;  // percent

  void recompute() {
    double s = 0.0;
    for (const auto& r : instances) s += r.iou;
    miou = instances.empty() ? 0.0 : 100.0 * s / static_cast<double>(instances.size());
  }

  nlohmann::json to_json() const {
    nlohmann::json inst = nlohmann::json::array();
    for (const auto& r : instances)
      inst.push_back({{"record", r.record_id}, {"instance", r.instance_id}, {"iou", r.iou}});
    nlohmann::json j{{"modality", modality}, {"mode", to_string(mode)}, {"miou", miou},
                     {"instances", inst}};
    j["data_ratio"] = data_ratio ? nlohmann::json(*data_ratio) : nlohmann::json(nullptr);
    return j;
  }

  static EvalReport from_json(const nlohmann::json& j) {
    EvalReport r;
    r.modality = j.at("modality").get<std::string>();
    r.mode = parse_eval_mode(j.at("mode").get<std::string>());
    if (j.contains("data_ratio") && !j["data_ratio"].is_null())
      r.data_ratio = j["data_ratio"].get<double>();
    for (const auto& x : j.at("instances"))
      r.instances.push_back({x.at("record").get<std::string>(), x.at("instance").get<std::int64_t>(),
                             x.at("iou").get<double>()});
    r.recompute();
    return r;
  }

  std::string to_csv() const {
    std::string out = "record,instance,iou\n";
    char buf[256];
    for (const auto& r : instances) {
      std::snprintf(buf, sizeof buf, "%s,%lld,%.6f\n", r.record_id.c_str(),
                    static_cast<long long>(r.instance_id), r.iou);
      out += buf;
    }
    return out;
  }
};

// predict(image, click) -> logits [H, W]. Each instance is scored against
// its own ground truth only. zero_shot feeds the record's RGB reference.
template <class Predict>
EvalReport evaluate(const Predict& predict, const std::vector<const ModalityRecord*>& records,
                    EvalMode mode, const std::string& modality = "") {
  if (records.empty()) throw ValidationError("evaluate: split is empty");
  EvalReport rep;
  rep.modality = modality;
  rep.mode = mode;
  for (const auto* r : records) {
    if (mode == EvalMode::zero_shot && !r->rgb)
      throw ValidationError("zero-shot evaluation needs an RGB reference; record '" + r->id +
                            "' has none");
    const Tensor& input = mode == EvalMode::zero_shot ? *r->rgb : r->image;
    for (std::size_t i = 0; i < r->instances.size(); ++i) {
      const auto& inst = r->instances[i];
      const Tensor logits = predict(input, Click{inst.click.row, inst.click.col});
      if (logits.numel() != inst.height * inst.width)
        throw ShapeError("evaluate: prediction " + shape_str(logits.shape()) +
                         " does not match mask " + std::to_string(inst.height) + "x" +
                         std::to_string(inst.width));
      rep.instances.push_back({r->id, static_cast<std::int64_t>(i),
                               iou(threshold_logits(logits), inst.mask)});
    }
  }
  rep.recompute();
  return rep;
}

inline EvalReport evaluate_model(const SimCmfModel& model,
                                 const std::vector<const ModalityRecord*>& records, EvalMode mode,
                                 const std::string& modality = "") {
  if (mode == EvalMode::zero_shot)
    throw ValidationError("zero-shot evaluation uses the unmodified backbone, not a fine-tuned model");
  return evaluate([&](const Tensor& x, const Click& c) { return model.predict(x, c).logits; },
                  records, mode, modality);
}

inline EvalReport evaluate_zero_shot(const Sam& sam, const std::vector<const ModalityRecord*>& records,
                                     const std::string& modality = "") {
  return evaluate([&](const Tensor& x, const Click& c) { return sam.predict(x, c).logits; },
                  records, EvalMode::zero_shot, modality);
}

// ---------------------------------------------------------------------------
// Reports

inline std::string format_fixed(double v, int digits = 2) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

struct ReportFiles {
  std::filesystem::path table_csv, ratio_csv, ratio_svg, summary_json;
};

namespace detail {

inline std::string svg_ratio_plot(const std::map<std::string, std::vector<std::pair<double, double>>>& series) {
  const double W = 480, H = 320, L = 56, R = 16, T = 16, B = 44;
  std::string s;
  char buf[256];
  std::snprintf(buf, sizeof buf,
                "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"%.0f\" height=\"%.0f\" "
                "viewBox=\"0 0 %.0f %.0f\">\n",
                W, H, W, H);
  s += buf;
  s += "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  std::snprintf(buf, sizeof buf,
                "<line x1=\"%.0f\" y1=\"%.0f\" x2=\"%.0f\" y2=\"%.0f\" stroke=\"black\"/>\n"
                "<line x1=\"%.0f\" y1=\"%.0f\" x2=\"%.0f\" y2=\"%.0f\" stroke=\"black\"/>\n",
                L, H - B, W - R, H - B, L, T, L, H - B);
  s += buf;
  auto px = [&](double ratio) { return L + ratio * (W - L - R); };
  auto py = [&](double miou) { return H - B - miou / 100.0 * (H - T - B); };
  for (int i = 0; i <= 4; ++i) {
    const double y = 25.0 * i, x = 0.25 * i;
    std::snprintf(buf, sizeof buf,
                  "<text x=\"%.1f\" y=\"%.1f\" font-size=\"11\" text-anchor=\"end\">%.0f</text>\n"
                  "<text x=\"%.1f\" y=\"%.1f\" font-size=\"11\" text-anchor=\"middle\">%.2f</text>\n",
                  L - 6, py(y) + 4, y, px(x), H - B + 16, x);
    s += buf;
  }
  std::snprintf(buf, sizeof buf,
                "<text x=\"%.1f\" y=\"%.1f\" font-size=\"12\" text-anchor=\"middle\">training data ratio</text>\n"
                "<text x=\"14\" y=\"%.1f\" font-size=\"12\" text-anchor=\"middle\" "
                "transform=\"rotate(-90 14 %.1f)\">mIoU</text>\n",
                (L + W - R) / 2, H - 8, (T + H - B) / 2, (T + H - B) / 2);
  s += buf;
  static const char* colors[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"};
  std::size_t ci = 0;
  for (const auto& [name, pts] : series) {
    const char* color = colors[ci % 6];
    std::string path;
    for (std::size_t i = 0; i < pts.size(); ++i) {
      std::snprintf(buf, sizeof buf, "%s%.2f %.2f", i ? " L " : "M ", px(pts[i].first),
                    py(pts[i].second));
      path += buf;
    }
    s += "<path d=\"" + path + "\" fill=\"none\" stroke=\"" + color + "\" stroke-width=\"2\"/>\n";
    for (const auto& p : pts) {
      std::snprintf(buf, sizeof buf, "<circle cx=\"%.2f\" cy=\"%.2f\" r=\"3\" fill=\"%s\"/>\n",
                    px(p.first), py(p.second), color);
      s += buf;
    }
    std::snprintf(buf, sizeof buf, "<text x=\"%.1f\" y=\"%.1f\" font-size=\"11\" fill=\"%s\">",
                  L + 8, T + 14 + 14.0 * static_cast<double>(ci), color);
    s += buf + name + "</text>\n";
    ++ci;
  }
  s += "</svg>\n";
  return s;
}

inline int mode_rank(EvalMode m) { return static_cast<int>(m); }

}  // namespace detail

// Writes:
//   table.csv        one row per modality, one column per mode, plus
//                    simcmf_minus_<mode> difference columns
//   ratio_curve.csv  (modality, mode, ratio, miou) sorted by ratio
//   ratio_curve.svg  mIoU against data ratio
//   summary.json
// The table uses, per (modality, mode), the report with the largest data
// ratio (absent counts as 1); earlier inputs win ties.
inline ReportFiles write_report(const std::vector<EvalReport>& reports,
                                const std::filesystem::path& out_dir) {
  if (reports.empty()) throw ValidationError("report: no evaluation reports given");
  std::filesystem::create_directories(out_dir);

  std::vector<std::string> modalities;
  std::vector<EvalMode> modes;
  std::map<std::pair<std::string, int>, const EvalReport*> cell;
  for (const auto& r : reports) {
    if (std::find(modalities.begin(), modalities.end(), r.modality) == modalities.end())
      modalities.push_back(r.modality);
    if (std::find(modes.begin(), modes.end(), r.mode) == modes.end()) modes.push_back(r.mode);
    auto& slot = cell[{r.modality, detail::mode_rank(r.mode)}];
    if (!slot || r.data_ratio.value_or(1.0) > slot->data_ratio.value_or(1.0)) slot = &r;
  }
  std::sort(modalities.begin(), modalities.end());
  std::sort(modes.begin(), modes.end(),
            [](EvalMode a, EvalMode b) { return detail::mode_rank(a) < detail::mode_rank(b); });
  const bool has_simcmf = std::find(modes.begin(), modes.end(), EvalMode::simcmf) != modes.end();

  std::string table = "modality";
  for (auto m : modes) table += "," + to_string(m);
  if (has_simcmf)
    for (auto m : modes)
      if (m != EvalMode::simcmf) table += ",simcmf_minus_" + to_string(m);
  table += "\n";
  for (const auto& mod : modalities) {
    table += mod.empty() ? "(unnamed)" : mod;
    for (auto m : modes) {
      const auto it = cell.find({mod, detail::mode_rank(m)});
      table += "," + (it == cell.end() ? std::string() : format_fixed(it->second->miou));
    }
    if (has_simcmf) {
      const auto base = cell.find({mod, detail::mode_rank(EvalMode::simcmf)});
      for (auto m : modes) {
        if (m == EvalMode::simcmf) continue;
        const auto it = cell.find({mod, detail::mode_rank(m)});
        table += ",";
        if (base != cell.end() && it != cell.end())
          table += format_fixed(base->second->miou - it->second->miou);
      }
    }
    table += "\n";
  }

  std::vector<const EvalReport*> ratio;
  for (const auto& r : reports)
    if (r.data_ratio) ratio.push_back(&r);
  std::stable_sort(ratio.begin(), ratio.end(), [](const EvalReport* a, const EvalReport* b) {
    if (*a->data_ratio != *b->data_ratio) return *a->data_ratio < *b->data_ratio;
    if (a->modality != b->modality) return a->modality < b->modality;
    return detail::mode_rank(a->mode) < detail::mode_rank(b->mode);
  });
  std::string curve = "modality,mode,ratio,miou\n";
  std::map<std::string, std::vector<std::pair<double, double>>> series;
  for (const auto* r : ratio) {
    curve += r->modality + "," + to_string(r->mode) + "," + format_fixed(*r->data_ratio, 4) + "," +
             format_fixed(r->miou) + "\n";
    series[r->modality + " " + to_string(r->mode)].emplace_back(*r->data_ratio, r->miou);
  }

  nlohmann::json summary = nlohmann::json::array();
  for (const auto& r : reports) {
    nlohmann::json j{{"modality", r.modality}, {"mode", to_string(r.mode)},
                     {"miou", std::round(r.miou * 1e6) / 1e6},
                     {"instances", r.instances.size()}};
    j["data_ratio"] = r.data_ratio ? nlohmann::json(*r.data_ratio) : nlohmann::json(nullptr);
    summary.push_back(j);
  }

  ReportFiles f{out_dir / "table.csv", out_dir / "ratio_curve.csv", out_dir / "ratio_curve.svg",
                out_dir / "summary.json"};
  write_text_file(f.table_csv, table);
  write_text_file(f.ratio_csv, curve);
  write_text_file(f.ratio_svg, detail::svg_ratio_plot(series));
  write_text_file(f.summary_json, nlohmann::json{{"reports", summary}}.dump(2) + "\n");
  return f;
}

inline void write_eval_report(const std::filesystem::path& dir, const EvalReport& r) {
  write_text_file(dir / "eval_report.json", r.to_json().dump(2) + "\n");
  write_text_file(dir / "eval_instances.csv", r.to_csv());
}

}  // namespace simcmf
