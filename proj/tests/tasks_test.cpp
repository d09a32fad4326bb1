#include <gtest/gtest.h>

#include <filesystem>
#include <set>

#include "amc/tasks.hpp"

using namespace amc;
using namespace amc::tasks;

namespace {

signals::LabeledDataset small_dataset(std::uint64_t seed, std::size_t per_class = 40) {
  signals::GeneratorConfig gc;
  gc.schemes = {signals::Modulation::BPSK, signals::Modulation::QPSK, signals::Modulation::PAM4};
  gc.snr_db = {10, 14};
  gc.frames_per_class_per_snr = per_class / 2;
  gc.frame_len = 16;
  gc.seed = seed;
  return signals::generate_dataset(gc);
}

std::vector<SubstituteSpec> small_zoo_spec() {
  models::TrainConfig tc;
  tc.epochs = 3;
  tc.batch_size = 16;
  return {{"a", "mlp-small", 1, tc}, {"b", "mlp-small", 2, tc}, {"c", "mlp-tanh", 3, tc}};
}

struct Fixture {
  signals::LabeledDataset clean = small_dataset(5);
  SubstituteZoo zoo = train_substitutes(clean, small_zoo_spec());
};

const Fixture& fixture() {
  static const Fixture f;
  return f;
}

AttackEntry entry(attacks::Method m, double eps) {
  auto s = attacks::AttackSpec::defaults(m);
  s.eps = eps;
  if (m == attacks::Method::CW_L2) s.steps = 10;
  return {attacks::method_name(m), s};
}

std::filesystem::path temp_dir(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("amc_tasks_" + name);
  std::filesystem::remove_all(p);
  return p;
}

}  // namespace

TEST(Tasks, SubstitutesHaveDistinctReproducibleHashes) {
  const auto& f = fixture();
  ASSERT_EQ(f.zoo.size(), 3u);
  std::set<std::string> hashes;
  for (const auto& s : f.zoo.members) hashes.insert(s.hash);
  EXPECT_EQ(hashes.size(), 3u);
  const auto again = train_substitutes(f.clean, small_zoo_spec());
  for (std::size_t i = 0; i < 3; ++i) EXPECT_EQ(again.members[i].hash, f.zoo.members[i].hash);
  EXPECT_NO_THROW(f.zoo.validate());
}

TEST(Tasks, SubstituteCheckpointsPersistAndVerify) {
  const auto& f = fixture();
  const auto dir = temp_dir("zoo");
  auto spec = small_zoo_spec();
  spec.resize(2);
  auto zoo = train_substitutes(f.clean, spec, dir);
  ASSERT_TRUE(std::filesystem::exists(dir / "a.amcm"));
  EXPECT_NO_THROW(zoo.validate());
  EXPECT_EQ(models::model_hash(models::load_checkpoint(dir / "b.amcm").model), zoo.members[1].hash);
  // Swap in a different model under a's name.
  models::save_checkpoint(zoo.members[1].model, dir / "a.amcm");
  EXPECT_THROW(zoo.validate(), FormatError);
  std::filesystem::remove_all(dir);
}

TEST(Tasks, SubstituteSpecErrors) {
  const auto& f = fixture();
  EXPECT_THROW(train_substitutes(f.clean, {}), ConfigError);
  auto dup = small_zoo_spec();
  dup[1].id = "a";
  EXPECT_THROW(train_substitutes(f.clean, dup), ConfigError);
  auto bad = small_zoo_spec();
  bad.resize(1);
  bad[0].arch = "resnet";
  EXPECT_THROW(train_substitutes(f.clean, bad), ConfigError);
}

TEST(Tasks, DivergenceNamesTheSubstitute) {
  const auto& f = fixture();
  auto spec = small_zoo_spec();
  spec.resize(2);
  spec[1].train.optimizer.kind = models::OptimizerKind::SGD;
  spec[1].train.optimizer.lr = 1e200;
  try {
    train_substitutes(f.clean, spec);
    FAIL() << "expected divergence";
  } catch (const DivergenceError& e) {
    EXPECT_NE(std::string(e.what()).find("'b'"), std::string::npos) << e.what();
  }
}

TEST(Tasks, SplitIsBalancedDisjointAndSeeded) {
  const auto& f = fixture();
  const SplitConfig cfg{4, 6};
  const auto [s, q] = split_indices(f.clean, cfg, 17);
  ASSERT_EQ(s.size(), 12u);
  ASSERT_EQ(q.size(), 18u);
  std::vector<int> sc(3, 0), qc(3, 0);
  for (auto k : s) ++sc[f.clean.labels[k]];
  for (auto k : q) ++qc[f.clean.labels[k]];
  for (int c = 0; c < 3; ++c) {
    EXPECT_EQ(sc[c], 4);
    EXPECT_EQ(qc[c], 6);
  }
  std::set<std::size_t> all(s.begin(), s.end());
  for (auto k : q) EXPECT_FALSE(all.count(k));
  EXPECT_EQ(split_indices(f.clean, cfg, 17), split_indices(f.clean, cfg, 17));
  EXPECT_NE(split_indices(f.clean, cfg, 17).first, split_indices(f.clean, cfg, 18).first);
  EXPECT_THROW(split_indices(f.clean, SplitConfig{30, 30}, 1), ConfigError);
  EXPECT_THROW(split_indices(f.clean, SplitConfig{0, 3}, 1), ConfigError);
}

TEST(Tasks, TaskPreservesLabelsAndBudgets) {
  const auto& f = fixture();
  for (auto m : attacks::kAllMethods) {
    const auto a = entry(m, 0.05);
    const auto t = generate_task(a, f.zoo.members[0], f.clean, SplitConfig{5, 8}, 3);
    ASSERT_EQ(t.support.size(), 15u);
    ASSERT_EQ(t.query.size(), 24u);
    for (std::size_t r = 0; r < t.support.size(); ++r) {
      EXPECT_EQ(t.support.labels[r], f.clean.labels[t.support_frames[r]]);
      EXPECT_EQ(t.support.snr_db[r], f.clean.snr_db[t.support_frames[r]]);
    }
    for (std::size_t r = 0; r < t.query.size(); ++r) {
      EXPECT_EQ(t.query.labels[r], f.clean.labels[t.query_frames[r]]);
    }
    // x' - x within the budget up to f32 storage of x'.
    double worst = 0.0;
    for (const auto* half : {&t.support, &t.query}) {
      const auto& idx = half == &t.support ? t.support_frames : t.query_frames;
      for (std::size_t r = 0; r < half->size(); ++r) {
        auto xp = half->frame_data(r);
        auto x = f.clean.frame_data(idx[r]);
        std::vector<double> d(xp.size());
        for (std::size_t i = 0; i < d.size(); ++i) d[i] = double(xp[i]) - double(x[i]);
        worst = std::max(worst, attacks::norm_of(d, a.spec.norm));
      }
    }
    EXPECT_LE(worst, 0.05 * (1 + 1e-5)) << attacks::method_name(m);
    EXPECT_GT(worst, 0.0) << attacks::method_name(m);
  }
}

TEST(Tasks, TaskIsDeterministicAndCached) {
  const auto& f = fixture();
  const auto a = entry(attacks::Method::PGD, 0.05);
  const auto dir = temp_dir("cache");
  PerturbationCache cache(dir);
  const auto t1 = generate_task(a, f.zoo.members[1], f.clean, SplitConfig{5, 5}, 9, "x", &cache);
  EXPECT_EQ(cache.hits(), 0u);
  const auto t2 = generate_task(a, f.zoo.members[1], f.clean, SplitConfig{5, 5}, 9, "x", &cache);
  EXPECT_EQ(cache.hits(), 1u);
  const auto t3 = generate_task(a, f.zoo.members[1], f.clean, SplitConfig{5, 5}, 9, "x");
  EXPECT_EQ(t1.support, t2.support);
  EXPECT_EQ(t1.query, t2.query);
  EXPECT_EQ(t1.support, t3.support);
  EXPECT_EQ(t1.perturbation_hash, t2.perturbation_hash);
  EXPECT_EQ(t1.perturbation_hash, t3.perturbation_hash);
  // A different substitute is a different key.
  generate_task(a, f.zoo.members[2], f.clean, SplitConfig{5, 5}, 9, "x", &cache);
  EXPECT_EQ(cache.hits(), 1u);
  std::size_t files = 0;
  for (auto& e : std::filesystem::directory_iterator(dir)) files += e.path().extension() == ".amcp";
  EXPECT_EQ(files, 2u);
  std::filesystem::remove_all(dir);
}

TEST(Tasks, PcaTaskUsesOneUniversalPerturbation) {
  const auto& f = fixture();
  const auto t = generate_task(entry(attacks::Method::PCA, 0.1), f.zoo.members[0], f.clean,
                               SplitConfig{4, 4}, 2);
  std::vector<double> d0, d1;
  for (std::size_t i = 0; i < 32; ++i) {
    d0.push_back(double(t.support.frame_data(0)[i]) - f.clean.frame_data(t.support_frames[0])[i]);
    d1.push_back(double(t.query.frame_data(3)[i]) - f.clean.frame_data(t.query_frames[3])[i]);
  }
  for (std::size_t i = 0; i < 32; ++i) EXPECT_NEAR(d0[i], d1[i], 1e-6);
}

TEST(Tasks, AttackErrorsPropagate) {
  const auto& f = fixture();
  Substitute dead = f.zoo.members[0];
  std::fill(dead.model.theta.begin(), dead.model.theta.end(), 0.0);
  dead.hash = models::model_hash(dead.model);
  EXPECT_THROW(generate_task(entry(attacks::Method::PCA, 0.1), dead, f.clean, SplitConfig{3, 3}, 1),
               ValueError);
  auto bad = entry(attacks::Method::FGSM, -1.0);
  EXPECT_THROW(generate_task(bad, f.zoo.members[0], f.clean, SplitConfig{3, 3}, 1), ConfigError);
}

TEST(Tasks, PsrBudgetResolvesAgainstCleanPower) {
  const auto& f = fixture();
  auto a = entry(attacks::Method::FGSM, 1.0);
  a.spec.psr_db = -10.0;
  const auto t = generate_task(a, f.zoo.members[0], f.clean, SplitConfig{3, 3}, 1);
  EXPECT_NEAR(t.spec.eps, std::sqrt(signals::mean_power(f.clean) * 0.1 / 2.0), 1e-12);
}

TEST(Tasks, MetaSplitCounts) {
  std::vector<std::string> a{"fgsm", "pgd", "mim", "cw", "pca"};
  std::vector<std::string> s;
  for (int i = 0; i < 11; ++i) s.push_back("s" + std::to_string(i));
  LibraryConfig cfg;
  cfg.holdout = HoldoutMode::Substitute;
  auto sp = meta_split(a, s, cfg);
  EXPECT_EQ(sp.meta_train.size() + sp.meta_test.size(), 55u);
  EXPECT_EQ(sp.meta_train.size(), 50u);
  EXPECT_EQ(sp.meta_test.size(), 5u);

  s.resize(5);
  cfg.holdout = HoldoutMode::Attack;
  sp = meta_split(a, s, cfg);
  EXPECT_EQ(sp.meta_train.size(), 20u);
  EXPECT_EQ(sp.meta_test.size(), 5u);
  ASSERT_EQ(sp.held_out.size(), 1u);
  // No meta-test attack appears in meta-train; the union covers all tasks.
  std::set<std::size_t> all;
  for (auto k : sp.meta_train) {
    EXPECT_NE(a[k / 5], sp.held_out[0]);
    all.insert(k);
  }
  for (auto k : sp.meta_test) {
    EXPECT_EQ(a[k / 5], sp.held_out[0]);
    EXPECT_TRUE(all.insert(k).second);
  }
  EXPECT_EQ(all.size(), 25u);
  EXPECT_EQ(meta_split(a, s, cfg).held_out, sp.held_out);

  cfg.holdout = HoldoutMode::Pair;
  sp = meta_split(a, s, cfg);
  EXPECT_EQ(sp.meta_test.size(), 9u);  // one attack row plus one substitute column
  EXPECT_EQ(sp.meta_train.size(), 16u);

  cfg.holdout = HoldoutMode::Attack;
  cfg.held_out = {"cw"};
  sp = meta_split(a, s, cfg);
  for (auto k : sp.meta_test) EXPECT_EQ(a[k / 5], "cw");
}

TEST(Tasks, MetaSplitErrors) {
  LibraryConfig cfg;
  EXPECT_THROW(meta_split({}, {"a", "b"}, cfg), ConfigError);
  EXPECT_THROW(meta_split({"fgsm", "pgd"}, {"a"}, cfg), ConfigError);
  EXPECT_THROW(meta_split({"fgsm"}, {"a", "b"}, cfg), ConfigError);  // nothing left to train on
  cfg.holdout_count = 2;
  EXPECT_THROW(meta_split({"fgsm", "pgd"}, {"a", "b", "c"}, cfg), ConfigError);
  cfg.holdout = HoldoutMode::Substitute;
  cfg.holdout_count = 3;
  EXPECT_THROW(meta_split({"fgsm"}, {"a", "b", "c"}, cfg), ConfigError);
  cfg.held_out = {"nope"};
  EXPECT_THROW(meta_split({"fgsm"}, {"a", "b", "c"}, cfg), ConfigError);
  EXPECT_THROW(parse_holdout("random"), ConfigError);
}

TEST(Tasks, LibraryBuildSaveLoad) {
  const auto& f = fixture();
  const auto clean = small_dataset(6, 60);
  std::vector<AttackEntry> atk{entry(attacks::Method::FGSM, 0.05),
                               entry(attacks::Method::MIM, 0.05)};
  LibraryConfig cfg;
  cfg.split = {4, 6};
  cfg.held_out = {"MIM"};
  const auto lib = build_task_library(atk, f.zoo, clean, cfg);
  ASSERT_EQ(lib.tasks.size(), 6u);
  EXPECT_EQ(lib.meta_train.size(), 3u);
  EXPECT_EQ(lib.meta_test.size(), 3u);
  for (auto k : lib.meta_test) EXPECT_EQ(lib.tasks[k].attack, "MIM");
  // Meta-test frames are reserved: no meta-train task touches them.
  std::set<std::size_t> reserved(lib.test_frames.begin(), lib.test_frames.end());
  EXPECT_EQ(reserved.size(), 30u);
  for (auto k : lib.meta_train) {
    for (auto i : lib.tasks[k].support_frames) EXPECT_FALSE(reserved.count(i));
    for (auto i : lib.tasks[k].query_frames) EXPECT_FALSE(reserved.count(i));
  }
  for (auto k : lib.meta_test) {
    for (auto i : lib.tasks[k].query_frames) EXPECT_TRUE(reserved.count(i));
  }
  std::set<std::string> ids;
  for (const auto& t : lib.tasks) ids.insert(t.id);
  EXPECT_EQ(ids.size(), 6u);

  const auto dir = temp_dir("lib");
  save_library(lib, dir);
  const auto back = load_library(dir);
  ASSERT_EQ(back.tasks.size(), lib.tasks.size());
  for (std::size_t k = 0; k < lib.tasks.size(); ++k) {
    EXPECT_EQ(back.tasks[k].id, lib.tasks[k].id);
    EXPECT_EQ(back.tasks[k].support, lib.tasks[k].support);
    EXPECT_EQ(back.tasks[k].query, lib.tasks[k].query);
    EXPECT_EQ(back.tasks[k].support_frames, lib.tasks[k].support_frames);
    EXPECT_EQ(attacks::spec_hash(back.tasks[k].spec), attacks::spec_hash(lib.tasks[k].spec));
  }
  EXPECT_EQ(back.meta_train, lib.meta_train);
  EXPECT_EQ(back.meta_test, lib.meta_test);
  EXPECT_EQ(back.test_frames, lib.test_frames);

  // Re-saving yields byte-identical files.
  const auto dir2 = temp_dir("lib2");
  save_library(back, dir2);
  EXPECT_EQ(io::file_sha256(dir / "library.json"), io::file_sha256(dir2 / "library.json"));

  std::filesystem::copy_file(dir / "task1.query.amcd", dir / "task0.query.amcd",
                             std::filesystem::copy_options::overwrite_existing);
  EXPECT_THROW(load_library(dir), FormatError);
  std::filesystem::remove_all(dir);
  std::filesystem::remove_all(dir2);
}

TEST(Tasks, LibraryRejectsDuplicateAttackNames) {
  const auto& f = fixture();
  std::vector<AttackEntry> atk{entry(attacks::Method::FGSM, 0.05), entry(attacks::Method::FGSM, 0.1)};
  EXPECT_THROW(build_task_library(atk, f.zoo, f.clean, {}), ConfigError);
}

TEST(Tasks, SpecJsonRoundTrip) {
  auto s = attacks::AttackSpec::defaults(attacks::Method::MIM);
  s.eps = 0.3;
  s.mu = 0.7;
  s.psr_db = -8.0;
  EXPECT_EQ(attacks::spec_hash(spec_from_json(spec_to_json(s))), attacks::spec_hash(s));
  const auto d = spec_from_json(Json{{"method", "CW_L2"}});
  EXPECT_EQ(d.norm, 2.0);
  EXPECT_EQ(d.steps, 100u);
}
