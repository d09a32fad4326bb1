#pragma once

// Config parsing and the offline/online pipeline stages shared by the CLI
// and the end-to-end tests. Every stage reads artifacts from a work
// directory, writes its own outputs and a manifest.json next to them.
//
//   <work>/data/pool.amcd            gen-data
//   <work>/zoo/<id>.amcm             train-substitutes
//   <work>/tasks/, <work>/cache/     gen-tasks
//   <work>/models/<baseline>.amcm    meta-train (also train_log.json)
//   <work>/adapt/                    adapt
//   <work>/eval/report.{json,csv}    evaluate
//   <work>/report/summary.txt        report

#include <chrono>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "amc/harness.hpp"
#include "amc/meta.hpp"
#include "amc/tasks.hpp"
#include "json.hpp"

#include <malloc.h>

namespace amc::pipeline {

using Json = nlohmann::json;
namespace fs = std::filesystem;

inline constexpr const char* kToolVersion = "amc 0.1.0";

/// The training loops allocate and free many mid-sized buffers; keeping
/// them on the heap instead of mmap avoids page-fault churn.
inline void tune_allocator() {
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
  mallopt(M_TOP_PAD, 256 << 20);
}

// ---------------------------------------------------------------------------
// Strict JSON access

/// View of one config object that records which keys were read; finish()
/// rejects anything left over.
class Section {
 public:
  Section(const Json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError("config: '" + path_ + "' must be an object");
  }

  bool has(const std::string& key) {
    used_.insert(key);
    return j_.contains(key);
  }

  template <class T>
  T get(const std::string& key, const T& fallback) {
    if (!has(key)) return fallback;
    return convert<T>(key);
  }

  template <class T>
  T require(const std::string& key) {
    if (!has(key)) throw ConfigError("config: missing '" + name(key) + "'");
    return convert<T>(key);
  }

  Section child(const std::string& key) {
    used_.insert(key);
    static const Json empty = Json::object();
    return Section(j_.contains(key) ? j_.at(key) : empty, name(key));
  }

  const Json& raw(const std::string& key) {
    used_.insert(key);
    return j_.at(key);
  }

  void finish() const {
    for (const auto& [k, v] : j_.items()) {
      if (!used_.count(k)) throw ConfigError("config: unknown key '" + name(k) + "'");
    }
  }

  std::string name(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }

 private:
  template <class T>
  T convert(const std::string& key) {
    try {
      return j_.at(key).get<T>();
    } catch (const Json::exception&) {
      throw ConfigError("config: '" + name(key) + "' has the wrong type");
    }
  }

  const Json& j_;
  std::string path_;
  std::set<std::string> used_;
};

// ---------------------------------------------------------------------------
// Config

struct TransferSection {
  models::TrainConfig clean;
  models::TrainConfig adversarial;
  std::size_t adversarial_tasks = 1;  // leading meta-train tasks used for fine-tuning
};

struct MetaSection {
  std::vector<meta::Algorithm> algorithms{meta::Algorithm::MAML, meta::Algorithm::FOMAML,
                                          meta::Algorithm::Reptile};
  meta::MetaConfig base;
  std::map<std::string, std::size_t> outer_iters;  // per-algorithm override
  std::map<std::string, double> beta;               // per-algorithm override
  std::string backbone = "cnn1d-small";
  std::uint64_t init_seed = 5;
  std::string init = "transfer-clean";  // or "random"
  TransferSection transfer;

  meta::MetaConfig config_for(meta::Algorithm a) const {
    auto c = base;
    c.algorithm = a;
    const auto n = meta::algorithm_name(a);
    if (auto it = outer_iters.find(n); it != outer_iters.end()) c.outer_iters = it->second;
    if (auto it = beta.find(n); it != beta.end()) c.beta = it->second;
    return c;
  }
};

struct PowerSection {
  std::string attack = "PGD";  // method crafted white-box on the clean-trained model
  double psr_db = -10.0;
  std::vector<std::uint64_t> seeds{1, 2, 3};
  std::size_t per_class = 50;
};

struct PipelineConfig {
  std::string experiment_id = "default";
  signals::GeneratorConfig data;
  std::vector<tasks::SubstituteSpec> zoo;
  std::vector<tasks::AttackEntry> attacks;
  tasks::LibraryConfig library;
  MetaSection meta;
  harness::EvalConfig eval;
  PowerSection power;
  Json source;  // the document as given, after CLI overrides

  std::string hash() const { return io::sha256_hex(source.dump()); }
};

inline models::TrainConfig parse_train(Section s, models::TrainConfig d) {
  d.epochs = s.get<std::size_t>("epochs", d.epochs);
  d.batch_size = s.get<std::size_t>("batch_size", d.batch_size);
  d.optimizer.lr = s.get<double>("lr", d.optimizer.lr);
  d.seed = s.get<std::uint64_t>("seed", d.seed);
  if (s.has("optimizer")) {
    const auto o = s.require<std::string>("optimizer");
    if (o == "adam") {
      d.optimizer.kind = models::OptimizerKind::Adam;
    } else if (o == "sgd") {
      d.optimizer.kind = models::OptimizerKind::SGD;
    } else {
      throw ConfigError("config: '" + s.name("optimizer") + "' must be adam or sgd");
    }
  }
  s.finish();
  try {
    d.validate();
  } catch (const ConfigError& e) {
    throw ConfigError("config: " + s.name("") + " " + e.what());
  }
  return d;
}

inline tasks::AttackEntry parse_attack(const Json& j, const std::string& path) {
  Section s(j, path);
  tasks::AttackEntry e;
  e.name = s.require<std::string>("name");
  Json spec = Json::object();
  for (const char* k : {"method", "eps", "norm", "step", "steps", "mu", "c", "cw_lr", "psr_db"}) {
    if (s.has(k)) spec[k] = s.raw(k);
  }
  s.finish();
  if (!spec.contains("method")) throw ConfigError("config: missing '" + path + ".method'");
  try {
    e.spec = tasks::spec_from_json(spec);
  } catch (const Json::exception&) {
    throw ConfigError("config: '" + path + "' has a field of the wrong type");
  } catch (const ValueError& err) {
    throw ConfigError("config: " + path + ": " + err.what());
  }
  auto check = e.spec;
  if (check.psr_db) check.eps = 1.0;  // resolved later against the data power
  try {
    check.validate();
  } catch (const ConfigError& err) {
    throw ConfigError("config: " + path + ": " + err.what());
  }
  return e;
}

inline PipelineConfig parse_config(const Json& doc) {
  PipelineConfig c;
  c.source = doc;
  Section root(doc, "");
  c.experiment_id = root.get<std::string>("experiment_id", c.experiment_id);

  {
    auto s = root.child("data");
    auto& g = c.data;
    g.seed = s.get<std::uint64_t>("seed", g.seed);
    g.snr_db = s.get<std::vector<int>>("snr_db", g.snr_db);
    g.frames_per_class_per_snr = s.get<std::size_t>("frames_per_class_per_snr", g.frames_per_class_per_snr);
    g.frame_len = s.get<std::size_t>("frame_len", g.frame_len);
    g.samples_per_symbol = s.get<std::size_t>("samples_per_symbol", g.samples_per_symbol);
    if (s.has("schemes")) {
      g.schemes.clear();
      for (const auto& n : s.require<std::vector<std::string>>("schemes")) {
        try {
          g.schemes.push_back(signals::parse_modulation(n));
        } catch (const Error&) {
          throw ConfigError("config: unknown modulation '" + n + "'");
        }
      }
    }
    s.finish();
    if (g.schemes.empty() || g.snr_db.empty() || g.frames_per_class_per_snr == 0) {
      throw ConfigError("config: data needs schemes, SNRs and frames");
    }
    if (g.frame_len < 8 || g.samples_per_symbol == 0) {
      throw ConfigError("config: data.frame_len must be >= 8");
    }
  }

  {
    auto s = root.child("zoo");
    const auto train = parse_train(s.child("train"), models::TrainConfig{});
    if (!s.has("members")) throw ConfigError("config: missing 'zoo.members'");
    const auto& m = s.raw("members");
    if (!m.is_array() || m.empty()) throw ConfigError("config: 'zoo.members' must be a non-empty array");
    std::set<std::string> ids;
    for (std::size_t i = 0; i < m.size(); ++i) {
      Section e(m[i], "zoo.members[" + std::to_string(i) + "]");
      tasks::SubstituteSpec sp;
      sp.id = e.require<std::string>("id");
      sp.arch = e.require<std::string>("arch");
      sp.seed = e.get<std::uint64_t>("seed", i + 1);
      sp.train = train;
      e.finish();
      try {
        (void)models::zoo_architecture(sp.arch, 2, 128);
      } catch (const Error&) {
        throw ConfigError("config: unknown architecture '" + sp.arch + "'");
      }
      if (!ids.insert(sp.id).second) throw ConfigError("config: duplicate substitute '" + sp.id + "'");
      c.zoo.push_back(sp);
    }
    s.finish();
  }

  {
    auto s = root.child("attacks");
    if (!s.has("entries")) throw ConfigError("config: missing 'attacks.entries'");
    const auto& e = s.raw("entries");
    if (!e.is_array() || e.empty()) throw ConfigError("config: 'attacks.entries' must be a non-empty array");
    std::set<std::string> names;
    for (std::size_t i = 0; i < e.size(); ++i) {
      c.attacks.push_back(parse_attack(e[i], "attacks.entries[" + std::to_string(i) + "]"));
      if (!names.insert(c.attacks.back().name).second) {
        throw ConfigError("config: duplicate attack '" + c.attacks.back().name + "'");
      }
    }
    auto& L = c.library;
    {
      auto sp = s.child("split");
      L.split.support_per_class = sp.get<std::size_t>("support_per_class", L.split.support_per_class);
      L.split.query_per_class = sp.get<std::size_t>("query_per_class", L.split.query_per_class);
      sp.finish();
      L.split.validate();
    }
    {
      auto h = s.child("holdout");
      try {
        L.holdout = tasks::parse_holdout(h.get<std::string>("mode", "attack"));
      } catch (const Error& err) {
        throw ConfigError(std::string("config: attacks.holdout.mode: ") + err.what());
      }
      L.holdout_count = h.get<std::size_t>("count", L.holdout_count);
      L.held_out = h.get<std::vector<std::string>>("names", {});
      h.finish();
    }
    L.seed = s.get<std::uint64_t>("seed", L.seed);
    L.disjoint_frames = s.get<bool>("disjoint_frames", L.disjoint_frames);
    s.finish();
  }

  {
    auto s = root.child("meta");
    auto& M = c.meta;
    if (s.has("algorithms")) {
      M.algorithms.clear();
      for (const auto& n : s.require<std::vector<std::string>>("algorithms")) {
        try {
          M.algorithms.push_back(meta::parse_algorithm(n));
        } catch (const Error&) {
          throw ConfigError("config: unknown meta algorithm '" + n + "'");
        }
      }
      if (M.algorithms.empty()) throw ConfigError("config: 'meta.algorithms' is empty");
    }
    auto& b = M.base;
    b.alpha = s.get<double>("alpha", b.alpha);
    if (s.has("beta")) {
      const auto& j = s.raw("beta");
      if (j.is_object()) {
        M.beta = s.require<std::map<std::string, double>>("beta");
      } else {
        b.beta = s.require<double>("beta");
      }
    }
    b.inner_steps = s.get<std::size_t>("inner_steps", b.inner_steps);
    if (s.has("outer_iters")) {
      const auto& j = s.raw("outer_iters");
      if (j.is_object()) {
        M.outer_iters = s.require<std::map<std::string, std::size_t>>("outer_iters");
      } else {
        b.outer_iters = s.require<std::size_t>("outer_iters");
      }
    }
    for (const auto* m : {&M.outer_iters}) {
      for (const auto& [k, v] : *m) (void)meta::parse_algorithm(k);
    }
    for (const auto& [k, v] : M.beta) (void)meta::parse_algorithm(k);
    b.task_batch = s.get<std::size_t>("task_batch", b.task_batch);
    b.seed = s.get<std::uint64_t>("seed", b.seed);
    b.support_shots = s.get<std::size_t>("support_shots", b.support_shots);
    b.query_shots = s.get<std::size_t>("query_shots", b.query_shots);
    const auto opt = s.get<std::string>("outer_optimizer", "sgd");
    if (opt == "sgd") {
      b.outer_optimizer = models::OptimizerKind::SGD;
    } else if (opt == "adam") {
      b.outer_optimizer = models::OptimizerKind::Adam;
    } else {
      throw ConfigError("config: 'meta.outer_optimizer' must be sgd or adam");
    }
    M.backbone = s.get<std::string>("backbone", M.backbone);
    try {
      (void)models::zoo_architecture(M.backbone, 2, 128);
    } catch (const Error&) {
      throw ConfigError("config: unknown architecture '" + M.backbone + "'");
    }
    M.init_seed = s.get<std::uint64_t>("init_seed", M.init_seed);
    M.init = s.get<std::string>("init", M.init);
    if (M.init != "random" && M.init != "transfer-clean") {
      throw ConfigError("config: 'meta.init' must be random or transfer-clean");
    }
    {
      auto t = s.child("transfer");
      M.transfer.clean = parse_train(t.child("clean"), M.transfer.clean);
      M.transfer.adversarial = parse_train(t.child("adversarial"), M.transfer.adversarial);
      M.transfer.adversarial_tasks = t.get<std::size_t>("adversarial_tasks", M.transfer.adversarial_tasks);
      t.finish();
      if (M.transfer.adversarial_tasks == 0) {
        throw ConfigError("config: 'meta.transfer.adversarial_tasks' must be >= 1");
      }
    }
    s.finish();
    for (auto a : M.algorithms) M.config_for(a).validate();
  }

  {
    auto s = root.child("eval");
    auto& E = c.eval;
    E.shots = s.get<std::vector<std::size_t>>("shots", E.shots);
    E.repeats = s.get<std::size_t>("repeats", E.repeats);
    E.seed = s.get<std::uint64_t>("seed", E.seed);
    E.rule.alpha = s.get<double>("alpha", c.meta.base.alpha);
    E.rule.inner_steps = s.get<std::size_t>("inner_steps", c.meta.base.inner_steps);
    models::TrainConfig sc;
    sc.epochs = 30;
    sc.batch_size = 16;
    E.rule.scratch = parse_train(s.child("scratch"), sc);
    E.shot_grid = s.get<std::vector<std::size_t>>("shot_grid", E.shot_grid);
    E.efficiency_task = s.get<std::string>("efficiency_task", E.efficiency_task);
    E.efficiency_repeats = s.get<std::size_t>("efficiency_repeats", E.efficiency_repeats);
    E.record_timings = s.get<bool>("record_timings", E.record_timings);
    {
      auto p = s.child("power");
      c.power.attack = p.get<std::string>("attack", c.power.attack);
      c.power.psr_db = p.get<double>("psr_db", c.power.psr_db);
      c.power.seeds = p.get<std::vector<std::uint64_t>>("seeds", c.power.seeds);
      c.power.per_class = p.get<std::size_t>("per_class", c.power.per_class);
      p.finish();
      try {
        (void)attacks::parse_method(c.power.attack);
      } catch (const Error&) {
        throw ConfigError("config: unknown attack method '" + c.power.attack + "'");
      }
      if (c.power.seeds.empty() || c.power.per_class == 0) {
        throw ConfigError("config: eval.power needs seeds and per_class >= 1");
      }
    }
    s.finish();
    E.validate();
  }
  root.finish();
  return c;
}

inline Json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("config: cannot open " + path.string());
  try {
    return Json::parse(in);
  } catch (const Json::exception& e) {
    throw ConfigError("config: " + path.string() + ": " + std::string(e.what()));
  }
}

inline PipelineConfig load_config(const fs::path& path) { return parse_config(read_json(path)); }

// ---------------------------------------------------------------------------
// Manifests

inline void write_text(const fs::path& path, const std::string& text) {
  fs::create_directories(path.parent_path());
  io::write_file(path, io::Bytes(text.begin(), text.end()));
}

inline void write_json(const fs::path& path, const Json& j) { write_text(path, j.dump(2) + "\n"); }

inline Json read_artifact_json(const fs::path& path) {
  const auto b = io::read_file(path);
  try {
    return Json::parse(b.begin(), b.end());
  } catch (const Json::exception& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

struct Manifest {
  std::string stage;
  std::string config_hash;
  std::vector<fs::path> inputs;
  std::vector<fs::path> outputs;
};

/// Paths are stored relative to the work directory; no timestamps, so a
/// manifest hashes identically across deterministic re-runs.
inline Json write_manifest(const fs::path& work, const fs::path& dir, const Manifest& m) {
  auto table = [&](const std::vector<fs::path>& paths) {
    Json t = Json::object();
    for (const auto& p : paths) t[fs::relative(p, work).generic_string()] = io::file_sha256(p);
    return t;
  };
  Json j{{"stage", m.stage},
         {"tool_version", kToolVersion},
         {"config_hash", m.config_hash},
         {"inputs", table(m.inputs)},
         {"outputs", table(m.outputs)}};
  write_json(dir / "manifest.json", j);
  return j;
}

struct Layout {
  fs::path root;
  fs::path data() const { return root / "data"; }
  fs::path pool() const { return data() / "pool.amcd"; }
  fs::path zoo() const { return root / "zoo"; }
  fs::path tasks() const { return root / "tasks"; }
  fs::path cache() const { return root / "cache"; }
  fs::path models() const { return root / "models"; }
  fs::path adapt() const { return root / "adapt"; }
  fs::path eval() const { return root / "eval"; }
  fs::path report() const { return root / "report"; }
};

/// Sum of per-phase wall-clock seconds, zeroed when timings are disabled.
inline double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

// ---------------------------------------------------------------------------
// Stages

inline Json gen_data(const PipelineConfig& c, const Layout& w) {
  const auto ds = signals::generate_dataset(c.data);
  signals::write_dataset(ds, w.pool());
  write_manifest(w.root, w.data(), {"gen-data", c.hash(), {}, {w.pool()}});
  return {{"dataset", w.pool().string()},
          {"frames", ds.size()},
          {"sha256", io::file_sha256(w.pool())}};
}

inline signals::LabeledDataset load_pool(const Layout& w) {
  if (!fs::exists(w.pool())) throw ValueError("missing " + w.pool().string() + "; run gen-data");
  return signals::read_dataset(w.pool());
}

inline Json train_substitutes(const PipelineConfig& c, const Layout& w) {
  const auto pool = load_pool(w);
  const auto view = tasks::training_view(pool, c.library);
  const auto zoo = tasks::train_substitutes(view, c.zoo, w.zoo());
  Json members = Json::array();
  std::vector<fs::path> outs;
  for (const auto& s : zoo.members) {
    const auto path = w.zoo() / (s.id + ".amcm");
    outs.push_back(path);
    const auto b = meta::batch_of(view);
    members.push_back({{"id", s.id},
                       {"arch", s.arch.describe()},
                       {"seed", s.seed},
                       {"hash", s.hash},
                       {"file", s.id + ".amcm"},
                       {"train_accuracy", models::accuracy(s.model, b.x, b.y)}});
  }
  write_json(w.zoo() / "zoo.json", {{"members", members}});
  outs.push_back(w.zoo() / "zoo.json");
  write_manifest(w.root, w.zoo(), {"train-substitutes", c.hash(), {w.pool()}, outs});
  return {{"members", members}};
}

inline tasks::SubstituteZoo load_zoo(const PipelineConfig& c, const Layout& w) {
  tasks::SubstituteZoo zoo;
  for (const auto& s : c.zoo) {
    const auto path = w.zoo() / (s.id + ".amcm");
    if (!fs::exists(path)) throw ValueError("missing " + path.string() + "; run train-substitutes");
    tasks::Substitute m;
    m.id = s.id;
    m.seed = s.seed;
    m.checkpoint = path;
    m.model = models::load_checkpoint(path).model;
    m.arch = m.model.arch;
    m.hash = models::model_hash(m.model);
    zoo.members.push_back(std::move(m));
  }
  zoo.validate();
  return zoo;
}

inline Json gen_tasks(const PipelineConfig& c, const Layout& w) {
  const auto pool = load_pool(w);
  const auto zoo = load_zoo(c, w);
  tasks::PerturbationCache cache(w.cache());
  const auto lib = tasks::build_task_library(c.attacks, zoo, pool, c.library, &cache);
  const auto j = tasks::save_library(lib, w.tasks());
  std::vector<fs::path> ins{w.pool()};
  for (const auto& s : zoo.members) ins.push_back(s.checkpoint);
  std::vector<fs::path> outs{w.tasks() / "library.json"};
  for (std::size_t k = 0; k < lib.tasks.size(); ++k) {
    outs.push_back(w.tasks() / ("task" + std::to_string(k) + ".support.amcd"));
    outs.push_back(w.tasks() / ("task" + std::to_string(k) + ".query.amcd"));
  }
  std::vector<fs::path> cached;
  for (const auto& e : fs::directory_iterator(w.cache())) cached.push_back(e.path());
  std::sort(cached.begin(), cached.end());
  outs.insert(outs.end(), cached.begin(), cached.end());
  write_manifest(w.root, w.tasks(), {"gen-tasks", c.hash(), ins, outs});
  Json ids = Json::array();
  for (const auto& t : lib.tasks) ids.push_back(t.id);
  return {{"tasks", ids},
          {"meta_train", lib.meta_train.size()},
          {"meta_test", lib.meta_test.size()},
          {"held_out", lib.held_out}};
}

inline tasks::TaskLibrary load_tasks(const Layout& w) {
  if (!fs::exists(w.tasks() / "library.json")) {
    throw ValueError("missing " + (w.tasks() / "library.json").string() + "; run gen-tasks");
  }
  return tasks::load_library(w.tasks());
}

/// Baseline names as they appear in checkpoints and reports.
inline constexpr const char* kScratch = "scratch";
inline constexpr const char* kTransferClean = "transfer-clean";
inline constexpr const char* kTransferAdversarial = "transfer-adversarial";

/// Trains Transfer-Clean, Transfer-Adversarial and every configured meta
/// variant. `only` restricts the meta variants; the transfer baselines are
/// always (re)trained since the meta init may depend on them.
inline Json meta_train(const PipelineConfig& c, const Layout& w,
                       const std::vector<meta::Algorithm>& only = {}) {
  const auto pool = load_pool(w);
  const auto lib = load_tasks(w);
  if (lib.meta_train.empty()) throw ValueError("meta-train: library has no meta-train tasks");
  const auto view = tasks::training_view(pool, c.library);
  const auto arch = models::zoo_architecture(c.meta.backbone, pool.num_classes(), pool.frame_len);
  const auto init = models::init_model(arch, c.meta.init_seed);
  const bool timed = c.eval.record_timings;
  fs::create_directories(w.models());

  // A partial run keeps the records of variants it does not retrain.
  Json log = Json::object();
  if (!only.empty() && fs::exists(w.models() / "train_log.json")) {
    log = read_artifact_json(w.models() / "train_log.json");
  }
  std::vector<fs::path> outs;
  auto save = [&](const std::string& name, const models::ModelParams& m, double offline,
                  Json extra) {
    const auto path = w.models() / (name + ".amcm");
    models::save_checkpoint(m, path, {{"baseline", name}, {"arch", m.arch.describe()}});
    extra["offline_seconds"] = timed ? offline : 0.0;
    extra["hash"] = models::model_hash(m);
    log[name] = extra;
    outs.push_back(path);
  };

  auto t0 = std::chrono::steady_clock::now();
  const auto tc = meta::transfer_train(init, view, c.meta.transfer.clean);
  const double tc_s = seconds_since(t0);
  save(kTransferClean, tc.model, tc_s, {{"history", tc.history}});

  std::vector<std::size_t> adv;
  for (std::size_t i = 0; i < std::min(c.meta.transfer.adversarial_tasks, lib.meta_train.size()); ++i) {
    adv.push_back(lib.meta_train[i]);
  }
  t0 = std::chrono::steady_clock::now();
  const auto ta = meta::transfer_train(tc.model, meta::adversarial_training_set(lib, adv),
                                       c.meta.transfer.adversarial);
  Json adv_ids = Json::array();
  for (auto k : adv) adv_ids.push_back(lib.tasks[k].id);
  save(kTransferAdversarial, ta.model, tc_s + seconds_since(t0),
       {{"history", ta.history}, {"tasks", adv_ids}});

  const bool from_tc = c.meta.init == "transfer-clean";
  for (auto a : c.meta.algorithms) {
    if (!only.empty() && std::find(only.begin(), only.end(), a) == only.end()) continue;
    const auto cfg = c.meta.config_for(a);
    const auto r = meta::meta_train(from_tc ? tc.model : init, lib, cfg);
    // Offline cost includes the clean pre-training the meta init starts from.
    save(meta::algorithm_name(a), r.params, r.seconds + (from_tc ? tc_s : 0.0),
         {{"trace", r.trace},
          {"outer_iters", cfg.outer_iters},
          {"alpha", cfg.alpha},
          {"beta", cfg.beta},
          {"init", c.meta.init}});
  }
  write_json(w.models() / "train_log.json", log);
  outs.push_back(w.models() / "train_log.json");
  std::vector<fs::path> ins{w.pool(), w.tasks() / "library.json"};
  write_manifest(w.root, w.models(), {"meta-train", c.hash(), ins, outs});
  return log;
}

/// Baselines in report order: scratch, transfer baselines, meta variants.
inline std::vector<harness::Baseline> load_baselines(const PipelineConfig& c, const Layout& w) {
  const auto log_path = w.models() / "train_log.json";
  if (!fs::exists(log_path)) throw ValueError("missing " + log_path.string() + "; run meta-train");
  const auto log = read_artifact_json(log_path);
  auto load = [&](const std::string& name, harness::BaselineKind kind) {
    const auto path = w.models() / (name + ".amcm");
    if (!fs::exists(path)) throw ValueError("missing " + path.string() + "; run meta-train");
    harness::Baseline b{name, kind, models::load_checkpoint(path).model, 0.0, {}};
    if (log.contains(name)) b.offline_seconds = log[name].value("offline_seconds", 0.0);
    return b;
  };
  std::vector<harness::Baseline> out;
  auto tc = load(kTransferClean, harness::BaselineKind::TransferClean);
  out.push_back({kScratch, harness::BaselineKind::Scratch,
                 models::init_model(tc.model.arch, c.meta.init_seed), 0.0, {}});
  out.push_back(std::move(tc));
  out.push_back(load(kTransferAdversarial, harness::BaselineKind::TransferAdversarial));
  for (auto a : c.meta.algorithms) out.push_back(load(meta::algorithm_name(a), harness::BaselineKind::Meta));
  return out;
}

struct AdaptRequest {
  std::string baseline;
  std::string task;  // empty: first meta-test task
  std::size_t shots = 2;
  std::uint64_t seed = 1;
};

inline Json adapt(const PipelineConfig& c, const Layout& w, const AdaptRequest& req) {
  const auto lib = load_tasks(w);
  const auto bases = load_baselines(c, w);
  const harness::Baseline* b = nullptr;
  for (const auto& x : bases) {
    if (x.name == req.baseline) b = &x;
  }
  if (!b) throw ValueError("adapt: unknown baseline '" + req.baseline + "'");
  if (lib.meta_test.empty()) throw ValueError("adapt: no meta-test tasks");
  const auto& t = req.task.empty() ? lib.tasks[lib.meta_test.front()] : lib.find(req.task);
  const auto support = meta::batch_of(t.support);
  std::mt19937_64 rng(req.seed);
  const auto shots = meta::gather(support, meta::draw_shots(support.y, t.support.num_classes(), req.shots, rng));
  const auto r = harness::adapt(*b, shots, c.eval.rule, req.seed);
  const std::string stem = b->name + "@" + t.id + "-" + std::to_string(req.shots);
  const auto path = w.adapt() / (stem + ".amcm");
  fs::create_directories(w.adapt());
  models::save_checkpoint(r.model, path, {{"baseline", b->name}, {"task", t.id}});
  Json out{{"baseline", b->name},
           {"task_id", t.id},
           {"shots", req.shots},
           {"seed", req.seed},
           {"ser_before", harness::evaluate_ser(b->model, t.query)},
           {"ser", harness::evaluate_ser(r.model, t.query)},
           {"online_seconds", c.eval.record_timings ? r.seconds : 0.0},
           {"checkpoint", fs::relative(path, w.root).generic_string()}};
  write_json(w.adapt() / (stem + ".json"), out);
  write_manifest(w.root, w.adapt(),
                 {"adapt", c.hash(), {w.models() / (b->name + ".amcm"), w.tasks() / "library.json"},
                  {path, w.adapt() / (stem + ".json")}});
  return out;
}

inline harness::EvalReport evaluate(const PipelineConfig& c, const Layout& w,
                                    const fs::path& out_json) {
  const auto lib = load_tasks(w);
  const auto bases = load_baselines(c, w);
  harness::EvalReport r;
  r.experiment_id = c.experiment_id;
  r.config_hash = c.hash();
  for (std::size_t i = 0; i < c.eval.repeats; ++i) r.seeds.push_back(harness::draw_seed(c.eval.seed, 0, 0, i));
  r.baselines = bases;
  r.cells = harness::few_shot_eval(bases, lib, c.eval);
  r.efficiency = harness::sample_efficiency(bases, lib, c.eval);
  r.timing = harness::timing_report(bases, harness::timing_logs(bases, *r.efficiency));
  if (c.eval.record_timings) r.emitted = harness::utc_now();
  auto j = harness::to_json(r);
  {
    // White-box power efficiency on the undefended model, clean reserved frames.
    const auto pool = load_pool(w);
    const auto view = c.library.disjoint_frames
                          ? signals::subset(pool, tasks::reserved_frames(pool, c.library))
                          : pool;
    auto spec = attacks::AttackSpec::defaults(attacks::parse_method(c.power.attack));
    spec.psr_db = c.power.psr_db;
    const auto pe = harness::power_efficiency(bases[1].model, view, spec, c.power.seeds,
                                              std::min(c.power.per_class, view.size() / view.num_classes()));
    j["power_efficiency"] = {{"model", kTransferClean},
                             {"attack", c.power.attack},
                             {"psr_db", c.power.psr_db},
                             {"measured_psr_db", pe.measured_psr_db},
                             {"seeds", c.power.seeds},
                             {"clean_ser", pe.clean_ser},
                             {"adversarial_ser", pe.adversarial_ser},
                             {"awgn_ser", pe.awgn_ser}};
  }
  write_json(out_json, j);
  auto csv = out_json;
  csv.replace_extension(".csv");
  write_text(csv, harness::to_csv(r));
  std::vector<fs::path> ins{w.pool(), w.tasks() / "library.json", w.models() / "train_log.json"};
  for (const auto& b : bases) {
    if (b.kind != harness::BaselineKind::Scratch) ins.push_back(w.models() / (b.name + ".amcm"));
  }
  write_manifest(w.root, out_json.parent_path(), {"evaluate", c.hash(), ins, {out_json, csv}});
  return r;
}

/// Human-readable summary of a report: mean SER per shot column, the
/// efficiency table and timings.
inline std::string render_report(const harness::EvalReport& r) {
  std::ostringstream os;
  const auto s = harness::summarize(r.cells);
  std::vector<std::size_t> shots;
  std::vector<std::string> names;
  for (const auto& x : s) {
    if (std::find(shots.begin(), shots.end(), x.shots) == shots.end()) shots.push_back(x.shots);
    if (std::find(names.begin(), names.end(), x.baseline) == names.end()) names.push_back(x.baseline);
  }
  std::sort(shots.begin(), shots.end());
  os << "experiment " << r.experiment_id << " config " << r.config_hash.substr(0, 12) << "\n";
  os << "mean SER" << std::string(14, ' ');
  for (auto k : shots) os << "  " << std::setw(13) << (std::to_string(k) + "-shot");
  os << "\n";
  for (const auto& n : names) {
    os << std::left << std::setw(22) << n << std::right;
    for (auto k : shots) {
      for (const auto& x : s) {
        if (x.baseline == n && x.shots == k) {
          os << "  " << std::fixed << std::setprecision(3) << x.mean << " +- " << x.std;
        }
      }
    }
    os << "\n";
  }
  if (r.efficiency) {
    os << "shots to SER <= " << std::setprecision(3) << r.efficiency->target << " on "
       << r.efficiency->task_id << "\n";
    for (const auto& row : r.efficiency->rows) {
      os << "  " << std::left << std::setw(22) << row.baseline << std::right
         << (row.shots_to_target ? std::to_string(*row.shots_to_target) : std::string("not reached"))
         << "\n";
    }
  }
  for (const auto& t : r.timing) {
    os << "  " << std::left << std::setw(22) << t.baseline << std::right << "offline "
       << (t.offline_seconds ? std::to_string(*t.offline_seconds) : std::string("-"))
       << " s, online " << t.online_seconds << " s @ " << t.online_shots << " shots\n";
  }
  return os.str();
}

inline std::string report(const PipelineConfig& c, const Layout& w, const fs::path& in) {
  const auto r = harness::report_from_json(read_artifact_json(in));
  const auto text = render_report(r);
  write_text(w.report() / "summary.txt", text);
  write_text(w.report() / "report.csv", harness::to_csv(r));
  write_manifest(w.root, w.report(),
                 {"report", c.hash(), {in}, {w.report() / "summary.txt", w.report() / "report.csv"}});
  return text;
}

}  // namespace amc::pipeline
