#include <gtest/gtest.h>

#include <fstream>
#include <sstream>

#include "simcmf/eval.hpp"
#include "test_support.hpp"
#include "toy_records.hpp"

using namespace simcmf;
using simcmf::testing::pointers;
using simcmf::testing::two_blob_record;

namespace {

std::vector<std::uint8_t> square(std::int64_t S, std::int64_t r0, std::int64_t c0, std::int64_t n) {
  std::vector<std::uint8_t> m(static_cast<std::size_t>(S * S), 0);
  for (auto r = r0; r < r0 + n; ++r)
    for (auto c = c0; c < c0 + n; ++c) m[r * S + c] = 1;
  return m;
}

Tensor as_logits(const std::vector<std::uint8_t>& m, std::int64_t S) {
  std::vector<double> v(m.size());
  for (std::size_t i = 0; i < m.size(); ++i) v[i] = m[i] ? 4.0 : -4.0;
  return Tensor::from({S, S}, v);
}

std::string read(const std::filesystem::path& p) {
  std::ifstream f(p, std::ios::binary);
  std::stringstream s;
  s << f.rdbuf();
  return s.str();
}

EvalReport report(const std::string& modality, EvalMode mode, std::vector<double> ious,
                  std::optional<double> ratio = std::nullopt) {
  EvalReport r;
  r.modality = modality;
  r.mode = mode;
  r.data_ratio = ratio;
  for (std::size_t i = 0; i < ious.size(); ++i)
    r.instances.push_back({"rec" + std::to_string(i), 0, ious[i]});
  r.recompute();
  return r;
}

}  // namespace

TEST(Iou, ReferenceCases) {
  const auto a = square(16, 2, 2, 6);
  EXPECT_EQ(iou(a, a), 1.0);
  EXPECT_EQ(iou(a, square(16, 9, 9, 6)), 0.0);
  // Shifted by half a side: overlap A/2, union 3A/2.
  EXPECT_NEAR(iou(a, square(16, 2, 5, 6)) , 1.0 / 3.0, 1e-12);
  const std::vector<std::uint8_t> empty(256, 0);
  EXPECT_EQ(iou(empty, empty), 1.0);
  EXPECT_EQ(iou(empty, a), 0.0);
  EXPECT_THROW(iou(a, std::vector<std::uint8_t>(10, 0)), ShapeError);
  EXPECT_THROW(iou(a, 16, 16, a, 8, 32), ShapeError);
}

TEST(Miou, IsInstanceMeanTimesHundred) {
  const auto r = report("pol", EvalMode::simcmf, {1.0, 0.5, 0.25, 0.0});
  EXPECT_DOUBLE_EQ(r.miou, 100.0 * (1.0 + 0.5 + 0.25) / 4.0);
  auto shuffled = report("pol", EvalMode::simcmf, {0.25, 0.0, 1.0, 0.5});
  EXPECT_DOUBLE_EQ(shuffled.miou, r.miou);
  EXPECT_EQ(EvalReport::from_json(r.to_json()).to_json(), r.to_json());
}

TEST(Evaluate, OracleAndEmptyModels) {
  std::vector<ModalityRecord> data{two_blob_record("a"), two_blob_record("b", 9, 32, 3)};
  const auto recs = pointers(data);
  auto oracle = [&](const Tensor&, const Click& c) {
    for (const auto& r : data)
      for (const auto& inst : r.instances)
        if (inst.click.row == c.row && inst.click.col == c.col) return as_logits(inst.mask, 32);
    return Tensor::zeros({32, 32});
  };
  const auto good = evaluate(oracle, recs, EvalMode::simcmf, "pol");
  EXPECT_EQ(good.miou, 100.0);
  EXPECT_EQ(good.instances.size(), 4u);
  const auto none = evaluate([](const Tensor&, const Click&) { return Tensor::zeros({32, 32}); }, recs,
                             EvalMode::scratch);
  EXPECT_EQ(none.miou, 0.0);
  EXPECT_THROW(evaluate(oracle, {}, EvalMode::simcmf), ValidationError);
  EXPECT_THROW(evaluate([](const Tensor&, const Click&) { return Tensor::zeros({8, 8}); }, recs,
                        EvalMode::simcmf),
               ShapeError);
}

TEST(Evaluate, InstanceIsScoredAgainstItsOwnMaskOnly) {
  std::vector<ModalityRecord> data{two_blob_record("a")};
  ASSERT_EQ(data[0].instances.size(), 2u);
  const auto& m0 = data[0].instances[0].mask;
  const auto& m1 = data[0].instances[1].mask;
  std::vector<std::uint8_t> both(m0.size());
  for (std::size_t i = 0; i < both.size(); ++i) both[i] = m0[i] | m1[i];
  const auto r = evaluate([&](const Tensor&, const Click&) { return as_logits(both, 32); }, pointers(data),
                          EvalMode::simcmf);
  const double a0 = static_cast<double>(data[0].instances[0].area);
  const double a1 = static_cast<double>(data[0].instances[1].area);
  EXPECT_NEAR(r.instances[0].iou, a0 / (a0 + a1), 1e-12);
  EXPECT_NEAR(r.instances[1].iou, a1 / (a0 + a1), 1e-12);
}

TEST(Evaluate, ZeroShotNeedsRgbAndLeavesModelUnchanged) {
  std::vector<ModalityRecord> data{two_blob_record("a")};
  auto sam = make_backbone(BackboneConfig::toy(), 2);
  EXPECT_THROW(evaluate_zero_shot(*sam, pointers(data)), ValidationError);
  data[0].rgb = simcmf::testing::two_blob_record("a", 3).image;
  const auto before = nn::state_archive(*sam);
  const auto r = evaluate_zero_shot(*sam, pointers(data), "pol");
  EXPECT_EQ(r.mode, EvalMode::zero_shot);
  const auto after = nn::state_archive(*sam);
  ASSERT_EQ(before.entries.size(), after.entries.size());
  for (std::size_t i = 0; i < before.entries.size(); ++i)
    EXPECT_EQ(before.entries[i].values, after.entries[i].values) << before.entries[i].name;
}

TEST(Report, SingleReportTable) {
  const auto dir = simcmf::testing::temp_dir("report_single");
  const auto f = write_report({report("polarization", EvalMode::simcmf, {0.5, 1.0})}, dir);
  EXPECT_EQ(read(f.table_csv), "modality,simcmf\npolarization,75.00\n");
}

TEST(Report, DifferenceColumnAgainstScratch) {
  const auto dir = simcmf::testing::temp_dir("report_diff");
  const auto f = write_report({report("pol", EvalMode::scratch, {0.25}), report("pol", EvalMode::simcmf, {0.75})},
                              dir);
  EXPECT_EQ(read(f.table_csv), "modality,simcmf,scratch,simcmf_minus_scratch\npol,75.00,25.00,50.00\n");
}

TEST(Report, RatioCurveSortedAndByteStable) {
  std::vector<EvalReport> reps{report("pol", EvalMode::simcmf, {0.9}, 1.0), report("pol", EvalMode::simcmf, {0.4}, 0.1),
                               report("pol", EvalMode::simcmf, {0.8}, 0.5), report("pol", EvalMode::simcmf, {0.6}, 0.25)};
  const auto a = write_report(reps, simcmf::testing::temp_dir("report_ratio_a"));
  const auto b = write_report(reps, simcmf::testing::temp_dir("report_ratio_b"));
  std::istringstream lines(read(a.ratio_csv));
  std::string line;
  std::getline(lines, line);
  EXPECT_EQ(line, "modality,mode,ratio,miou");
  double prev = -1;
  int n = 0;
  while (std::getline(lines, line)) {
    const auto ratio = std::stod(line.substr(line.find(',', line.find(',') + 1) + 1));
    EXPECT_GT(ratio, prev);
    prev = ratio;
    ++n;
  }
  EXPECT_EQ(n, 4);
  // Table uses the full-data run.
  EXPECT_EQ(read(a.table_csv), "modality,simcmf\npol,90.00\n");
  for (auto p : {&ReportFiles::table_csv, &ReportFiles::ratio_csv, &ReportFiles::ratio_svg, &ReportFiles::summary_json})
    EXPECT_EQ(read(a.*p), read(b.*p));
  EXPECT_THROW(write_report({}, simcmf::testing::temp_dir("report_none")), ValidationError);
}

TEST(EvalMode, Parsing) {
  EXPECT_EQ(parse_eval_mode("zero-shot"), EvalMode::zero_shot);
  EXPECT_EQ(parse_eval_mode("zero_shot"), EvalMode::zero_shot);
  EXPECT_THROW(parse_eval_mode("linear"), ValidationError);
}
