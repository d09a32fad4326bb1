#pragma once

// Task library: substitute zoo, adversarial task minting and meta split.

#include <algorithm>
#include <filesystem>
#include <map>
#include <optional>
#include <random>
#include <set>
#include <string>
#include <vector>

#include "amc/attacks.hpp"
#include "amc/error.hpp"
#include "amc/io.hpp"
#include "amc/models.hpp"
#include "amc/signals.hpp"
#include "json.hpp"

namespace amc::tasks {

using signals::LabeledDataset;
using Json = nlohmann::json;

// ---------------------------------------------------------------------------
// Substitute zoo

struct SubstituteSpec {
  std::string id;
  std::string arch = "mlp-small";  // models::zoo_architecture name
  std::uint64_t seed = 1;
  models::TrainConfig train;
};

struct Substitute {
  std::string id;
  models::Architecture arch;
  std::uint64_t seed = 0;
  std::string hash;  // models::model_hash
  std::filesystem::path checkpoint;  // empty when kept in memory only
  models::ModelParams model;
};

struct SubstituteZoo {
  std::vector<Substitute> members;

  std::size_t size() const { return members.size(); }

  const Substitute& at(const std::string& id) const {
    for (const auto& s : members) {
      if (s.id == id) return s;
    }
    throw ValueError("zoo: unknown substitute '" + id + "'");
  }

  /// Unique ids; every persisted checkpoint re-read and hash-checked.
  void validate() const {
    std::set<std::string> ids;
    for (const auto& s : members) {
      if (!ids.insert(s.id).second) throw ValueError("zoo: duplicate id '" + s.id + "'");
      if (models::model_hash(s.model) != s.hash) {
        throw FormatError("zoo: hash mismatch for '" + s.id + "'");
      }
      if (!s.checkpoint.empty()) {
        auto c = models::load_checkpoint(s.checkpoint);
        if (models::model_hash(c.model) != s.hash) {
          throw FormatError("zoo: checkpoint for '" + s.id + "' does not match its hash");
        }
      }
    }
  }
};

/// Trains every spec on `clean`. Checkpoints go to `dir` when given.
inline SubstituteZoo train_substitutes(const LabeledDataset& clean,
                                       const std::vector<SubstituteSpec>& spec,
                                       const std::optional<std::filesystem::path>& dir = {}) {
  if (spec.empty()) throw ConfigError("train_substitutes: empty zoo spec");
  {
    std::set<std::string> ids;
    for (const auto& s : spec) {
      if (s.id.empty()) throw ConfigError("train_substitutes: empty substitute id");
      if (!ids.insert(s.id).second) {
        throw ConfigError("train_substitutes: duplicate id '" + s.id + "'");
      }
    }
  }
  if (dir) std::filesystem::create_directories(*dir);
  SubstituteZoo zoo;
  for (const auto& s : spec) {
    Substitute out;
    out.id = s.id;
    out.arch = models::zoo_architecture(s.arch, clean.num_classes(), clean.frame_len);
    out.seed = s.seed;
    try {
      out.model = models::train(models::init_model(out.arch, s.seed), clean, s.train).model;
    } catch (const DivergenceError& e) {
      throw DivergenceError("substitute '" + s.id + "': " + e.what());
    }
    out.hash = models::model_hash(out.model);
    if (dir) {
      out.checkpoint = *dir / (s.id + ".amcm");
      models::save_checkpoint(out.model, out.checkpoint,
                              {{"id", s.id}, {"arch", s.arch}, {"seed", std::to_string(s.seed)}});
    }
    zoo.members.push_back(std::move(out));
  }
  return zoo;
}

// ---------------------------------------------------------------------------
// Tasks

struct SplitConfig {
  std::size_t support_per_class = 5;
  std::size_t query_per_class = 15;

  void validate() const {
    if (support_per_class == 0 || query_per_class == 0) {
      throw ConfigError("split: support and query sizes must be >= 1");
    }
  }
};

/// A named attack configuration; the name keys its tasks.
struct AttackEntry {
  std::string name;
  attacks::AttackSpec spec;
};

struct Task {
  std::string id;
  std::string attack;      // AttackEntry name
  std::string substitute;  // Substitute id
  attacks::AttackSpec spec;  // resolved
  std::uint64_t split_seed = 0;
  std::vector<std::size_t> support_frames;  // indices into the clean dataset
  std::vector<std::size_t> query_frames;
  LabeledDataset support;
  LabeledDataset query;
  std::string perturbation_hash;  // sha256 of the AMCP encoding
};

/// Class-balanced disjoint draw of support and query indices, restricted
/// to `candidates` when that is non-empty.
inline std::pair<std::vector<std::size_t>, std::vector<std::size_t>> split_indices(
    const LabeledDataset& ds, const SplitConfig& cfg, std::uint64_t seed,
    std::span<const std::size_t> candidates = {}) {
  cfg.validate();
  std::vector<std::vector<std::size_t>> by_class(ds.num_classes());
  if (candidates.empty()) {
    by_class = signals::indices_by_class(ds);
  } else {
    for (auto k : candidates) by_class.at(ds.labels.at(k)).push_back(k);
  }
  std::vector<std::size_t> support, query;
  std::mt19937_64 rng(seed);
  for (std::size_t c = 0; c < by_class.size(); ++c) {
    auto& idx = by_class[c];
    if (idx.size() < cfg.support_per_class + cfg.query_per_class) {
      throw ConfigError("split: class '" + ds.class_names[c] + "' has " +
                        std::to_string(idx.size()) + " frames, need " +
                        std::to_string(cfg.support_per_class + cfg.query_per_class));
    }
    for (std::size_t i = idx.size(); i > 1; --i) std::swap(idx[i - 1], idx[rng() % i]);
    support.insert(support.end(), idx.begin(), idx.begin() + cfg.support_per_class);
    query.insert(query.end(), idx.begin() + cfg.support_per_class,
                 idx.begin() + cfg.support_per_class + cfg.query_per_class);
  }
  return {support, query};
}

/// Cache key for one perturbation; includes the frame selection.
inline std::string perturbation_key(const attacks::AttackSpec& resolved,
                                    const std::string& substitute_hash,
                                    const std::string& dataset_hash,
                                    std::span<const std::size_t> frames) {
  io::Writer w;
  w.str(attacks::spec_hash(resolved));
  w.str(substitute_hash);
  w.str(dataset_hash);
  w.u64(frames.size());
  for (auto f : frames) w.u64(f);
  return io::sha256_hex(w.bytes()).substr(0, 32);
}

/// Directory of AMCP files named by perturbation_key.
class PerturbationCache {
 public:
  explicit PerturbationCache(std::filesystem::path dir) : dir_(std::move(dir)) {
    std::filesystem::create_directories(dir_);
  }

  std::filesystem::path path(const std::string& key) const { return dir_ / (key + ".amcp"); }

  std::optional<attacks::Perturbation> get(const std::string& key) const {
    const auto p = path(key);
    if (!std::filesystem::exists(p)) return std::nullopt;
    ++hits_;
    return attacks::read_perturbation(p);
  }

  void put(const std::string& key, const attacks::Perturbation& p) const {
    attacks::write_perturbation(p, path(key));
  }

  std::size_t hits() const { return hits_; }

 private:
  std::filesystem::path dir_;
  mutable std::size_t hits_ = 0;
};

/// x + delta for the listed frames, with delta rounded to f32 first so a
/// cached and a freshly crafted perturbation give the same frames.
inline LabeledDataset apply_perturbation(const LabeledDataset& clean,
                                         const attacks::Perturbation& p,
                                         std::span<const std::size_t> frames,
                                         std::size_t offset) {
  LabeledDataset out = signals::empty_like(clean);
  std::vector<double> buf(clean.frame_stride());
  for (std::size_t r = 0; r < frames.size(); ++r) {
    auto x = clean.frame_data(frames[r]);
    auto d = p.frame_delta(offset + r);
    for (std::size_t i = 0; i < buf.size(); ++i) {
      buf[i] = static_cast<double>(x[i]) + static_cast<double>(static_cast<float>(d[i]));
    }
    out.push_back(buf, clean.labels[frames[r]], clean.snr_db[frames[r]]);
  }
  return out;
}

/// Crafts attack.spec against the substitute on a seeded support/query
/// split of `clean`. The budget is resolved against the clean mean power.
inline Task generate_task(const AttackEntry& attack, const Substitute& substitute,
                          const LabeledDataset& clean, const SplitConfig& split,
                          std::uint64_t split_seed, const std::string& id = {},
                          const PerturbationCache* cache = nullptr,
                          const std::string& dataset_hash = {},
                          std::span<const std::size_t> candidates = {}) {
  if (substitute.model.arch.frame_len != clean.frame_len ||
      substitute.model.arch.num_classes != clean.num_classes()) {
    throw ShapeError("generate_task: substitute '" + substitute.id +
                     "' does not match the dataset geometry");
  }
  Task t;
  t.id = id.empty() ? attack.name + "@" + substitute.id : id;
  t.attack = attack.name;
  t.substitute = substitute.id;
  t.split_seed = split_seed;
  t.spec = attacks::resolve(attack.spec, signals::mean_power(clean), clean.frame_len);
  std::tie(t.support_frames, t.query_frames) = split_indices(clean, split, split_seed, candidates);

  std::vector<std::size_t> frames = t.support_frames;
  frames.insert(frames.end(), t.query_frames.begin(), t.query_frames.end());

  std::optional<attacks::Perturbation> pert;
  std::string key;
  if (cache) {
    key = perturbation_key(t.spec, substitute.hash,
                           dataset_hash.empty() ? signals::dataset_hash(clean) : dataset_hash,
                           frames);
    pert = cache->get(key);
    if (pert && (pert->substitute != substitute.hash ||
                 std::vector<std::size_t>(pert->frames.begin(), pert->frames.end()) != frames)) {
      throw FormatError("generate_task: cache entry " + key + " does not match its key");
    }
  }
  if (!pert) {
    const auto sub = signals::subset(clean, frames);
    const auto y = signals::labels_of(sub);
    attacks::ModelClassifier f(substitute.model);
    attacks::Perturbation p;
    p.spec = t.spec;
    p.substitute = substitute.hash;
    p.seed = split_seed;
    p.universal = t.spec.method == attacks::Method::PCA;
    p.frames.assign(frames.begin(), frames.end());
    p.delta = attacks::craft(f, signals::to_tensor(sub), y, t.spec);
    if (cache) cache->put(key, p);
    pert = std::move(p);
  }
  t.perturbation_hash = io::sha256_hex(attacks::encode_perturbation(*pert));
  t.support = apply_perturbation(clean, *pert, t.support_frames, 0);
  t.query = apply_perturbation(clean, *pert, t.query_frames, t.support_frames.size());
  return t;
}

// ---------------------------------------------------------------------------
// Library

enum class HoldoutMode : std::uint8_t { Attack, Substitute, Pair };

inline std::string holdout_name(HoldoutMode m) {
  switch (m) {
    case HoldoutMode::Attack: return "attack";
    case HoldoutMode::Substitute: return "substitute";
    case HoldoutMode::Pair: return "pair";
  }
  return "?";
}

inline HoldoutMode parse_holdout(const std::string& s) {
  if (s == "attack") return HoldoutMode::Attack;
  if (s == "substitute") return HoldoutMode::Substitute;
  if (s == "pair") return HoldoutMode::Pair;
  throw ConfigError("unknown holdout mode '" + s + "'");
}

struct LibraryConfig {
  SplitConfig split;
  HoldoutMode holdout = HoldoutMode::Attack;
  std::size_t holdout_count = 1;  // attacks and/or substitutes held out
  std::vector<std::string> held_out;  // explicit names; overrides the seeded draw
  std::uint64_t seed = 1;  // meta split and per-task split seeds
  // Meta-test tasks draw from a reserved set of support+query frames per
  // class that no meta-train task touches.
  bool disjoint_frames = true;
};

struct TaskLibrary {
  std::vector<Task> tasks;
  std::vector<std::size_t> test_frames;  // reserved frames; empty when not disjoint
  std::vector<std::size_t> meta_train;  // indices into tasks
  std::vector<std::size_t> meta_test;
  std::vector<std::string> held_out;

  const Task& find(const std::string& id) const {
    for (const auto& t : tasks) {
      if (t.id == id) return t;
    }
    throw ValueError("library: unknown task '" + id + "'");
  }
};

struct MetaSplit {
  std::vector<std::size_t> meta_train, meta_test;
  std::vector<std::string> held_out;
};

namespace detail {

inline std::vector<std::string> draw_names(const std::vector<std::string>& pool, std::size_t n,
                                           std::mt19937_64& rng) {
  std::vector<std::string> p = pool;
  for (std::size_t i = p.size(); i > 1; --i) std::swap(p[i - 1], p[rng() % i]);
  p.resize(n);
  std::sort(p.begin(), p.end());
  return p;
}

}  // namespace detail

/// Meta-train / meta-test partition of the |A| x |S| crosses, attack-major.
inline MetaSplit meta_split(const std::vector<std::string>& attacks_,
                            const std::vector<std::string>& subs, const LibraryConfig& cfg) {
  if (attacks_.empty()) throw ConfigError("library: need at least one attack");
  if (subs.size() < 2) throw ConfigError("library: need at least two substitutes");
  const bool hold_a = cfg.holdout != HoldoutMode::Substitute;
  const bool hold_s = cfg.holdout != HoldoutMode::Attack;
  std::set<std::string> ha, hs;
  std::mt19937_64 rng(io::mix_seed(cfg.seed, 0x5eed));
  if (!cfg.held_out.empty()) {
    for (const auto& n : cfg.held_out) {
      const bool is_a = std::find(attacks_.begin(), attacks_.end(), n) != attacks_.end();
      const bool is_s = std::find(subs.begin(), subs.end(), n) != subs.end();
      if (is_a && hold_a) ha.insert(n);
      else if (is_s && hold_s) hs.insert(n);
      else throw ConfigError("library: cannot hold out '" + n + "' in " +
                             holdout_name(cfg.holdout) + " mode");
    }
  } else {
    if (cfg.holdout_count == 0) throw ConfigError("library: holdout_count must be >= 1");
    if (hold_a) {
      if (cfg.holdout_count >= attacks_.size()) {
        throw ConfigError("library: insufficient tasks to hold out " +
                          std::to_string(cfg.holdout_count) + " of " +
                          std::to_string(attacks_.size()) + " attacks");
      }
      for (auto& n : detail::draw_names(attacks_, cfg.holdout_count, rng)) ha.insert(n);
    }
    if (hold_s) {
      if (cfg.holdout_count >= subs.size()) {
        throw ConfigError("library: insufficient tasks to hold out " +
                          std::to_string(cfg.holdout_count) + " of " +
                          std::to_string(subs.size()) + " substitutes");
      }
      for (auto& n : detail::draw_names(subs, cfg.holdout_count, rng)) hs.insert(n);
    }
  }
  if (hold_a && ha.empty()) throw ConfigError("library: no attack held out");
  if (hold_s && hs.empty()) throw ConfigError("library: no substitute held out");
  if (ha.size() >= attacks_.size() || hs.size() >= subs.size()) {
    throw ConfigError("library: insufficient tasks left for meta-train");
  }
  MetaSplit out;
  for (std::size_t a = 0; a < attacks_.size(); ++a) {
    for (std::size_t s = 0; s < subs.size(); ++s) {
      const std::size_t k = a * subs.size() + s;
      const bool test = ha.count(attacks_[a]) || hs.count(subs[s]);
      (test ? out.meta_test : out.meta_train).push_back(k);
    }
  }
  out.held_out.assign(ha.begin(), ha.end());
  out.held_out.insert(out.held_out.end(), hs.begin(), hs.end());
  return out;
}

/// Frames set aside for meta-test tasks (sorted): one support+query draw
/// per class. Substitutes and baselines should not train on them.
inline std::vector<std::size_t> reserved_frames(const LabeledDataset& clean,
                                                const LibraryConfig& cfg) {
  auto [s, q] = split_indices(clean, cfg.split, io::mix_seed(cfg.seed, 0x7e57));
  s.insert(s.end(), q.begin(), q.end());
  std::sort(s.begin(), s.end());
  return s;
}

/// Indices below n that are not in the sorted list `drop`.
inline std::vector<std::size_t> complement(std::span<const std::size_t> drop, std::size_t n) {
  std::vector<std::size_t> out;
  for (std::size_t k = 0; k < n; ++k) {
    if (!std::binary_search(drop.begin(), drop.end(), k)) out.push_back(k);
  }
  return out;
}

/// The clean frames outside the meta-test reserve.
inline LabeledDataset training_view(const LabeledDataset& clean, const LibraryConfig& cfg) {
  if (!cfg.disjoint_frames) return clean;
  return signals::subset(clean, complement(reserved_frames(clean, cfg), clean.size()));
}

/// Mints |A| x |S| tasks (attack-major order) and splits them.
inline TaskLibrary build_task_library(const std::vector<AttackEntry>& attack_list,
                                      const SubstituteZoo& zoo, const LabeledDataset& clean,
                                      const LibraryConfig& cfg,
                                      const PerturbationCache* cache = nullptr) {
  std::vector<std::string> an, sn;
  for (const auto& a : attack_list) an.push_back(a.name);
  for (const auto& s : zoo.members) sn.push_back(s.id);
  if (std::set<std::string>(an.begin(), an.end()).size() != an.size()) {
    throw ConfigError("library: duplicate attack names");
  }
  for (const auto& a : attack_list) a.spec.validate();
  auto split = meta_split(an, sn, cfg);
  const std::string dh = signals::dataset_hash(clean);
  TaskLibrary lib;
  std::vector<std::size_t> train_frames;
  if (cfg.disjoint_frames) {
    lib.test_frames = reserved_frames(clean, cfg);
    train_frames = complement(lib.test_frames, clean.size());
  }
  std::vector<char> is_test(attack_list.size() * zoo.size(), 0);
  for (auto k : split.meta_test) is_test[k] = 1;
  for (std::size_t a = 0; a < attack_list.size(); ++a) {
    for (std::size_t s = 0; s < zoo.size(); ++s) {
      const std::size_t k = a * zoo.size() + s;
      std::span<const std::size_t> cand;
      if (cfg.disjoint_frames) cand = is_test[k] ? lib.test_frames : train_frames;
      lib.tasks.push_back(generate_task(attack_list[a], zoo.members[s], clean, cfg.split,
                                        io::mix_seed(cfg.seed, k + 1), {}, cache, dh, cand));
    }
  }
  lib.meta_train = std::move(split.meta_train);
  lib.meta_test = std::move(split.meta_test);
  lib.held_out = std::move(split.held_out);
  return lib;
}

// ---------------------------------------------------------------------------
// Persistence: a directory with one AMCD file per task half plus a manifest.

inline Json spec_to_json(const attacks::AttackSpec& s) {
  Json j{{"method", attacks::method_name(s.method)},
         {"eps", s.eps},
         {"norm", std::isinf(s.norm) ? Json("inf") : Json(s.norm)},
         {"step", s.step},
         {"steps", s.steps},
         {"mu", s.mu},
         {"c", s.c},
         {"cw_lr", s.cw_lr}};
  if (s.psr_db) j["psr_db"] = *s.psr_db;
  return j;
}

/// Missing fields take the per-method defaults.
inline attacks::AttackSpec spec_from_json(const Json& j) {
  auto s = attacks::AttackSpec::defaults(attacks::parse_method(j.at("method").get<std::string>()));
  if (j.contains("eps")) s.eps = j["eps"].get<double>();
  if (j.contains("norm")) {
    const auto& n = j["norm"];
    s.norm = n.is_string() ? (n.get<std::string>() == "inf" ? attacks::kInf : -1.0)
                           : n.get<double>();
  }
  if (j.contains("step")) s.step = j["step"].get<double>();
  if (j.contains("steps")) s.steps = j["steps"].get<std::size_t>();
  if (j.contains("mu")) s.mu = j["mu"].get<double>();
  if (j.contains("c")) s.c = j["c"].get<double>();
  if (j.contains("cw_lr")) s.cw_lr = j["cw_lr"].get<double>();
  if (j.contains("psr_db")) s.psr_db = j["psr_db"].get<double>();
  return s;
}

inline Json task_json(const Task& t) {
  return Json{{"id", t.id},
              {"attack", t.attack},
              {"substitute", t.substitute},
              {"spec", spec_to_json(t.spec)},
              {"spec_hash", attacks::spec_hash(t.spec)},
              {"split_seed", t.split_seed},
              {"perturbation_hash", t.perturbation_hash},
              {"support_frames", t.support_frames},
              {"query_frames", t.query_frames}};
}

inline Json save_library(const TaskLibrary& lib, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  Json tasks = Json::array();
  for (std::size_t k = 0; k < lib.tasks.size(); ++k) {
    const auto& t = lib.tasks[k];
    const std::string stem = "task" + std::to_string(k);
    signals::write_dataset(t.support, dir / (stem + ".support.amcd"));
    signals::write_dataset(t.query, dir / (stem + ".query.amcd"));
    Json j = task_json(t);
    j["support_file"] = stem + ".support.amcd";
    j["query_file"] = stem + ".query.amcd";
    j["support_sha256"] = io::file_sha256(dir / (stem + ".support.amcd"));
    j["query_sha256"] = io::file_sha256(dir / (stem + ".query.amcd"));
    tasks.push_back(std::move(j));
  }
  Json m{{"tasks", tasks},
         {"meta_train", lib.meta_train},
         {"meta_test", lib.meta_test},
         {"held_out", lib.held_out},
         {"test_frames", lib.test_frames}};
  const std::string text = m.dump(2) + "\n";
  io::write_file(dir / "library.json", io::Bytes(text.begin(), text.end()));
  return m;
}

/// Reads a library written by save_library, verifying file hashes.
inline TaskLibrary load_library(const std::filesystem::path& dir) {
  const auto bytes = io::read_file(dir / "library.json");
  Json m;
  try {
    m = Json::parse(bytes.begin(), bytes.end());
  } catch (const Json::exception& e) {
    throw FormatError(std::string("library: ") + e.what());
  }
  TaskLibrary lib;
  try {
    for (const auto& j : m.at("tasks")) {
      Task t;
      t.id = j.at("id");
      t.attack = j.at("attack");
      t.substitute = j.at("substitute");
      t.split_seed = j.at("split_seed");
      t.perturbation_hash = j.at("perturbation_hash");
      t.support_frames = j.at("support_frames").get<std::vector<std::size_t>>();
      t.query_frames = j.at("query_frames").get<std::vector<std::size_t>>();
      t.spec = spec_from_json(j.at("spec"));
      for (const char* half : {"support", "query"}) {
        const auto path = dir / j.at(std::string(half) + "_file").get<std::string>();
        if (io::file_sha256(path) != j.at(std::string(half) + "_sha256").get<std::string>()) {
          throw FormatError("library: hash mismatch for " + path.string());
        }
        (std::string(half) == "support" ? t.support : t.query) = signals::read_dataset(path);
      }
      lib.tasks.push_back(std::move(t));
    }
    lib.meta_train = m.at("meta_train").get<std::vector<std::size_t>>();
    lib.meta_test = m.at("meta_test").get<std::vector<std::size_t>>();
    lib.held_out = m.at("held_out").get<std::vector<std::string>>();
    lib.test_frames = m.at("test_frames").get<std::vector<std::size_t>>();
  } catch (const Json::exception& e) {
    throw FormatError(std::string("library: ") + e.what());
  }
  for (auto k : lib.meta_train) {
    if (k >= lib.tasks.size()) throw FormatError("library: meta split index out of range");
  }
  for (auto k : lib.meta_test) {
    if (k >= lib.tasks.size()) throw FormatError("library: meta split index out of range");
  }
  return lib;
}

}  // namespace amc::tasks
