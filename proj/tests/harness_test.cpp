#include <gtest/gtest.h>

#include "amc/harness.hpp"

using namespace amc;
using namespace amc::harness;

namespace {

signals::LabeledDataset small_dataset(std::uint64_t seed) {
  signals::GeneratorConfig gc;
  gc.schemes = {signals::Modulation::BPSK, signals::Modulation::QPSK, signals::Modulation::PAM4};
  gc.snr_db = {10, 14};
  gc.frames_per_class_per_snr = 30;
  gc.frame_len = 16;
  gc.seed = seed;
  return signals::generate_dataset(gc);
}

struct Fixture {
  signals::LabeledDataset clean = small_dataset(3);
  tasks::TaskLibrary lib;
  models::ModelParams base;

  Fixture() {
    models::TrainConfig tc;
    tc.epochs = 3;
    tc.batch_size = 16;
    auto zoo = tasks::train_substitutes(clean, {{"a", "mlp-small", 1, tc}, {"b", "mlp-small", 2, tc}});
    std::vector<tasks::AttackEntry> atk;
    for (auto m : {attacks::Method::FGSM, attacks::Method::PGD}) {
      auto s = attacks::AttackSpec::defaults(m);
      s.psr_db = -10;
      atk.push_back({attacks::method_name(m), s});
    }
    tasks::LibraryConfig lc;
    lc.split = {6, 8};
    lc.held_out = {"PGD"};
    lib = tasks::build_task_library(atk, zoo, clean, lc);
    base = models::train(models::init_model(models::zoo_architecture("mlp-small", 3, 16), 9),
                         meta::batch_of(clean).x, meta::batch_of(clean).y, tc)
               .model;
  }
};

const Fixture& fixture() {
  static const Fixture f;
  return f;
}

std::vector<Baseline> baselines() {
  const auto& f = fixture();
  return {{"scratch", BaselineKind::Scratch, f.base, 0.0, {}},
          {"tc", BaselineKind::TransferClean, f.base, 1.5, {}},
          {"maml", BaselineKind::Meta, f.base, 4.0, {}}};
}

EvalConfig small_eval() {
  EvalConfig c;
  c.shots = {0, 2};
  c.repeats = 2;
  c.rule.alpha = 0.01;
  c.rule.inner_steps = 2;
  c.rule.scratch.epochs = 2;
  c.rule.scratch.batch_size = 8;
  c.shot_grid = {0, 1, 2, 4};
  c.efficiency_repeats = 2;
  return c;
}

}  // namespace

TEST(Harness, SerCountsMismatches) {
  const auto& f = fixture();
  const auto& q = f.lib.tasks[f.lib.meta_test[0]].query;
  const auto pred = models::predict_batch(f.base, signals::to_tensor(q));
  std::size_t wrong = 0;
  for (std::size_t i = 0; i < q.size(); ++i) wrong += pred[i] != q.labels[i];
  EXPECT_DOUBLE_EQ(evaluate_ser(f.base, q), double(wrong) / double(q.size()));
}

TEST(Harness, SerRejectsMismatchedModel) {
  const auto& f = fixture();
  auto other = models::init_model(models::zoo_architecture("mlp-small", 4, 16), 1);
  EXPECT_THROW(evaluate_ser(other, f.clean), ShapeError);
  auto longer = models::init_model(models::zoo_architecture("mlp-small", 3, 32), 1);
  EXPECT_THROW(evaluate_ser(longer, f.clean), ShapeError);
}

TEST(Harness, FewShotGridIsCompleteAndPaired) {
  const auto& f = fixture();
  const auto cfg = small_eval();
  const auto cells = few_shot_eval(baselines(), f.lib, cfg);
  EXPECT_EQ(cells.size(), f.lib.meta_test.size() * 2 * 2 * 3);
  for (std::size_t i = 0; i + 2 < cells.size(); i += 3) {
    EXPECT_EQ(cells[i].seed, cells[i + 1].seed);
    EXPECT_EQ(cells[i].seed, cells[i + 2].seed);
    EXPECT_EQ(cells[i].task_id, cells[i + 2].task_id);
    EXPECT_EQ(cells[i].attack, "PGD");
  }
}

TEST(Harness, ZeroShotIsTheUnadaptedModel) {
  const auto& f = fixture();
  const auto cells = few_shot_eval(baselines(), f.lib, small_eval());
  for (const auto& c : cells) {
    if (c.shots != 0 || c.baseline == "scratch") continue;
    EXPECT_DOUBLE_EQ(c.ser, evaluate_ser(f.base, f.lib.find(c.task_id).query));
  }
}

TEST(Harness, EvaluationIsDeterministic) {
  const auto& f = fixture();
  auto cfg = small_eval();
  cfg.record_timings = false;
  const auto a = few_shot_eval(baselines(), f.lib, cfg);
  const auto b = few_shot_eval(baselines(), f.lib, cfg);
  EXPECT_EQ(ser_digest(a), ser_digest(b));
  for (const auto& c : a) EXPECT_EQ(c.online_seconds, 0.0);
}

TEST(Harness, SummaryMatchesHandComputedMoments) {
  std::vector<Cell> cells = {{"x", "t1", "A", "s", 2, 1, 0.2, 0},
                             {"x", "t2", "A", "s", 2, 2, 0.6, 0},
                             {"x", "t1", "A", "s", 0, 1, 0.5, 0},
                             {"y", "t1", "A", "s", 2, 1, 0.1, 0}};
  const auto s = summarize(cells);
  ASSERT_EQ(s.size(), 3u);
  EXPECT_NEAR(mean_ser(s, "x", 2), 0.4, 1e-15);
  EXPECT_NEAR(s[0].std, 0.2, 1e-15);
  EXPECT_EQ(s[0].n, 2u);
  EXPECT_NEAR(mean_ser(summarize(cells, "t1"), "x", 2), 0.2, 1e-15);
  EXPECT_THROW(mean_ser(s, "y", 0), ValueError);
}

TEST(Harness, ShotsToTargetIsFirstCrossing) {
  std::vector<CurvePoint> c = {{0, 0.8, 0}, {2, 0.5, 0}, {5, 0.3, 0}, {10, 0.35, 0}};
  EXPECT_EQ(shots_to_target(c, 0.5), 2u);
  EXPECT_EQ(shots_to_target(c, 0.31), 5u);
  EXPECT_EQ(shots_to_target(c, 0.9), 0u);
  EXPECT_FALSE(shots_to_target(c, 0.1).has_value());
}

TEST(Harness, EfficiencyTargetIsWorstMetaTwoShot) {
  const auto& f = fixture();
  const auto e = sample_efficiency(baselines(), f.lib, small_eval());
  EXPECT_EQ(e.task_id, f.lib.tasks[f.lib.meta_test[0]].id);
  const auto& m = e.row("maml");
  EXPECT_EQ(m.curve.size(), 4u);
  EXPECT_DOUBLE_EQ(e.target, m.curve[2].mean_ser);
  ASSERT_TRUE(m.shots_to_target.has_value());
  EXPECT_LE(*m.shots_to_target, 2u);
  auto cfg = small_eval();
  cfg.efficiency_task = "nope";
  EXPECT_THROW(sample_efficiency(baselines(), f.lib, cfg), ConfigError);
  cfg = small_eval();
  cfg.shot_grid.clear();
  EXPECT_THROW(sample_efficiency(baselines(), f.lib, cfg), ValueError);
}

TEST(Harness, TimingRowsFollowTheTarget) {
  Efficiency e{"t", 0.3, {}};
  e.rows.push_back({"scratch", {{0, 0.9, 0.0}, {2, 0.5, 0.2}, {4, 0.4, 0.3}}, std::nullopt});
  e.rows.push_back({"maml", {{0, 0.4, 0.0}, {2, 0.3, 0.01}, {4, 0.2, 0.02}}, 2});
  std::vector<Baseline> b = {{"scratch", BaselineKind::Scratch, {}, 0.0, {}},
                             {"maml", BaselineKind::Meta, {}, 7.0, {}}};
  const auto rows = timing_report(b, timing_logs(b, e));
  ASSERT_EQ(rows.size(), 2u);
  EXPECT_FALSE(rows[0].offline_seconds.has_value());
  EXPECT_EQ(rows[0].online_shots, 4u);
  EXPECT_DOUBLE_EQ(rows[0].online_seconds, 0.3);
  EXPECT_DOUBLE_EQ(*rows[1].offline_seconds, 7.0);
  EXPECT_EQ(rows[1].online_shots, 2u);
  EXPECT_DOUBLE_EQ(rows[1].online_seconds, 0.01);
  EXPECT_THROW(timing_report(b, {{"maml", "offline", 1.0, 0}}), ValueError);
}

TEST(Harness, ReportRoundTripsAndRejectsOtherVersions) {
  const auto& f = fixture();
  auto cfg = small_eval();
  cfg.record_timings = false;
  EvalReport r;
  r.experiment_id = "unit";
  r.config_hash = "abc";
  r.seeds = {1, 2};
  r.baselines = baselines();
  r.cells = few_shot_eval(r.baselines, f.lib, cfg);
  r.efficiency = sample_efficiency(r.baselines, f.lib, cfg);
  r.timing = timing_report(r.baselines, timing_logs(r.baselines, *r.efficiency));
  const auto j = to_json(r);
  EXPECT_EQ(j["schema_version"], 1);
  EXPECT_FALSE(j.contains("emitted"));
  EXPECT_TRUE(j["timing"][0]["offline_seconds"].is_null());
  const auto back = report_from_json(Json::parse(j.dump()));
  EXPECT_EQ(ser_digest(back.cells), ser_digest(r.cells));
  EXPECT_EQ(to_json(back).dump(), j.dump());
  auto bad = j;
  bad["schema_version"] = 2;
  EXPECT_THROW(report_from_json(bad), FormatError);
  bad = j;
  bad.erase("cells");
  EXPECT_THROW(report_from_json(bad), FormatError);
}

TEST(Harness, CsvHasOneRowPerCellPlusMeans) {
  EvalReport r;
  r.cells = {{"x", "t1", "A", "s", 2, 1, 0.25, 0.5}, {"x", "t2", "A", "s", 2, 2, 0.75, 1.5}};
  const auto csv = to_csv(r);
  EXPECT_EQ(csv.rfind("baseline,task_id,attack,substitute,shots,seed,ser,online_seconds\n", 0), 0u);
  EXPECT_NE(csv.find("x,t1,A,s,2,1,0.25,0.5\n"), std::string::npos);
  EXPECT_NE(csv.find("x,mean,,,2,,0.5,1\n"), std::string::npos);
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 4);
}
