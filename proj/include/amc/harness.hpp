#pragma once

// Evaluation protocols and report emission.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <ctime>
#include <map>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "amc/attacks.hpp"
#include "amc/error.hpp"
#include "amc/io.hpp"
#include "amc/meta.hpp"
#include "amc/models.hpp"
#include "amc/signals.hpp"
#include "amc/tasks.hpp"
#include "json.hpp"

namespace amc::harness {

using Json = nlohmann::json;

/// Fraction of frames whose prediction differs from the label.
inline double evaluate_ser(const models::ModelParams& m, const meta::Batch& b) {
  if (b.empty()) throw ValueError("evaluate_ser: empty dataset");
  const auto p = models::predict_batch(m, b.x);
  std::size_t wrong = 0;
  for (std::size_t i = 0; i < b.size(); ++i) wrong += p[i] != b.y[i];
  return static_cast<double>(wrong) / static_cast<double>(b.size());
}

inline double evaluate_ser(const models::ModelParams& m, const signals::LabeledDataset& ds) {
  if (ds.frame_len != m.arch.frame_len || ds.num_classes() != m.arch.num_classes) {
    throw ShapeError("evaluate_ser: dataset has frame length " + std::to_string(ds.frame_len) +
                     " and " + std::to_string(ds.num_classes()) + " classes; model is " +
                     m.arch.describe());
  }
  return evaluate_ser(m, meta::batch_of(ds));
}

// ---------------------------------------------------------------------------
// Baselines and their online adaptation rules

enum class BaselineKind : std::uint8_t { Scratch, TransferClean, TransferAdversarial, Meta };

inline std::string kind_name(BaselineKind k) {
  switch (k) {
    case BaselineKind::Scratch: return "scratch";
    case BaselineKind::TransferClean: return "transfer-clean";
    case BaselineKind::TransferAdversarial: return "transfer-adversarial";
    case BaselineKind::Meta: return "meta";
  }
  return "?";
}

struct Baseline {
  std::string name;
  BaselineKind kind = BaselineKind::Meta;
  models::ModelParams model;  // for Scratch only the architecture is used
  double offline_seconds = 0.0;
  std::string description;  // defaults to the architecture's description
};

struct AdaptRule {
  double alpha = 0.01;
  std::size_t inner_steps = 5;
  models::TrainConfig scratch;
};

/// Meta and transfer baselines run the inner loop; Scratch trains a fresh
/// initialization (seeded by `seed`) on the shots alone.
/// Zero shots means no adaptation step runs, so its cost is recorded as 0.
inline meta::AdaptResult adapt(const Baseline& b, const meta::Batch& shots, const AdaptRule& rule,
                               std::uint64_t seed) {
  meta::AdaptResult r;
  if (b.kind == BaselineKind::Scratch) {
    auto cfg = rule.scratch;
    cfg.seed = io::mix_seed(seed, 1);
    r = meta::scratch_train(b.model.arch, seed, shots, cfg);
  } else {
    r = meta::online_adapt(b.model, shots, rule.alpha, rule.inner_steps);
  }
  if (shots.empty()) r.seconds = 0.0;
  return r;
}

// ---------------------------------------------------------------------------
// Few-shot protocol

struct EvalConfig {
  std::vector<std::size_t> shots{0, 2, 10};
  std::size_t repeats = 5;
  std::uint64_t seed = 1;
  AdaptRule rule;
  std::vector<std::size_t> shot_grid{0, 2, 5, 10, 20, 40, 80, 160, 320};
  std::string efficiency_task;  // empty: first meta-test task
  std::size_t efficiency_repeats = 3;
  bool record_timings = true;

  void validate() const {
    if (shots.empty()) throw ConfigError("eval: empty shot list");
    if (repeats == 0 || efficiency_repeats == 0) throw ConfigError("eval: repeats must be >= 1");
    if (shot_grid.empty()) throw ConfigError("eval: empty shot grid");
    if (!(rule.alpha > 0.0) || rule.inner_steps == 0) {
      throw ConfigError("eval: alpha must be > 0 and inner_steps >= 1");
    }
  }
};

struct Cell {
  std::string baseline;
  std::string task_id;
  std::string attack;
  std::string substitute;
  std::size_t shots = 0;
  std::uint64_t seed = 0;
  double ser = 0.0;
  double online_seconds = 0.0;
};

/// Seed of the support draw for (task, shots, repeat); shared by baselines
/// so that they are compared on the same frames.
inline std::uint64_t draw_seed(std::uint64_t base, std::size_t task, std::size_t shots,
                               std::size_t repeat) {
  return io::mix_seed(io::mix_seed(io::mix_seed(base, task), shots), repeat);
}

inline std::vector<Cell> few_shot_eval(const std::vector<Baseline>& baselines,
                                       const tasks::TaskLibrary& lib, const EvalConfig& cfg) {
  cfg.validate();
  if (lib.meta_test.empty()) throw ValueError("few_shot_eval: no meta-test tasks");
  if (baselines.empty()) throw ValueError("few_shot_eval: no baselines");
  std::vector<Cell> cells;
  for (auto k : lib.meta_test) {
    const auto& t = lib.tasks.at(k);
    const auto support = meta::batch_of(t.support);
    const auto query = meta::batch_of(t.query);
    const std::size_t C = t.support.num_classes();
    for (auto s : cfg.shots) {
      for (std::size_t r = 0; r < cfg.repeats; ++r) {
        const std::uint64_t seed = draw_seed(cfg.seed, k, s, r);
        std::mt19937_64 rng(seed);
        const auto shots = meta::gather(support, meta::draw_shots(support.y, C, s, rng));
        for (const auto& b : baselines) {
          const auto a = adapt(b, shots, cfg.rule, seed);
          cells.push_back({b.name, t.id, t.attack, t.substitute, s, seed,
                           evaluate_ser(a.model, query),
                           cfg.record_timings ? a.seconds : 0.0});
        }
      }
    }
  }
  return cells;
}

struct Summary {
  std::string baseline;
  std::size_t shots = 0;
  double mean = 0.0;
  double std = 0.0;  // population standard deviation over cells
  std::size_t n = 0;
};

/// Mean and spread per (baseline, shots), optionally restricted to one task.
inline std::vector<Summary> summarize(const std::vector<Cell>& cells,
                                      const std::string& task_id = {}) {
  std::vector<Summary> out;
  std::map<std::pair<std::string, std::size_t>, std::size_t> pos;
  std::vector<std::vector<double>> values;
  for (const auto& c : cells) {
    if (!task_id.empty() && c.task_id != task_id) continue;
    auto key = std::make_pair(c.baseline, c.shots);
    auto it = pos.find(key);
    if (it == pos.end()) {
      it = pos.emplace(key, out.size()).first;
      out.push_back({c.baseline, c.shots, 0.0, 0.0, 0});
      values.emplace_back();
    }
    values[it->second].push_back(c.ser);
  }
  for (std::size_t i = 0; i < out.size(); ++i) {
    const auto& v = values[i];
    double m = 0.0;
    for (double x : v) m += x;
    m /= static_cast<double>(v.size());
    double var = 0.0;
    for (double x : v) var += (x - m) * (x - m);
    out[i].mean = m;
    out[i].std = std::sqrt(var / static_cast<double>(v.size()));
    out[i].n = v.size();
  }
  return out;
}

inline double mean_ser(const std::vector<Summary>& s, const std::string& baseline,
                       std::size_t shots) {
  for (const auto& x : s) {
    if (x.baseline == baseline && x.shots == shots) return x.mean;
  }
  throw ValueError("no summary for " + baseline + " at " + std::to_string(shots) + " shots");
}

// ---------------------------------------------------------------------------
// Sample efficiency

struct CurvePoint {
  std::size_t shots = 0;
  double mean_ser = 0.0;
  double online_seconds = 0.0;  // mean adaptation time
};

struct EfficiencyRow {
  std::string baseline;
  std::vector<CurvePoint> curve;
  std::optional<std::size_t> shots_to_target;  // empty: not reached on the grid
};

struct Efficiency {
  std::string task_id;
  double target = 0.0;
  std::vector<EfficiencyRow> rows;

  const EfficiencyRow& row(const std::string& baseline) const {
    for (const auto& r : rows) {
      if (r.baseline == baseline) return r;
    }
    throw ValueError("efficiency: unknown baseline '" + baseline + "'");
  }
};

/// Smallest grid shot count whose mean SER is <= target.
inline std::optional<std::size_t> shots_to_target(const std::vector<CurvePoint>& curve,
                                                  double target) {
  for (const auto& p : curve) {
    if (p.mean_ser <= target) return p.shots;
  }
  return std::nullopt;
}

/// Mean SER over `repeats` support draws at each grid point.
inline std::vector<CurvePoint> efficiency_curve(const Baseline& b, const tasks::Task& task,
                                                std::size_t task_index, const EvalConfig& cfg) {
  if (cfg.shot_grid.empty()) throw ValueError("sample_efficiency: empty grid");
  const auto support = meta::batch_of(task.support);
  const auto query = meta::batch_of(task.query);
  const std::size_t C = task.support.num_classes();
  std::vector<CurvePoint> curve;
  for (auto s : cfg.shot_grid) {
    CurvePoint p{s, 0.0, 0.0};
    for (std::size_t r = 0; r < cfg.efficiency_repeats; ++r) {
      const std::uint64_t seed = draw_seed(io::mix_seed(cfg.seed, 0xeff), task_index, s, r);
      std::mt19937_64 rng(seed);
      const auto shots = meta::gather(support, meta::draw_shots(support.y, C, s, rng));
      const auto a = adapt(b, shots, cfg.rule, seed);
      p.mean_ser += evaluate_ser(a.model, query);
      p.online_seconds += cfg.record_timings ? a.seconds : 0.0;
    }
    p.mean_ser /= static_cast<double>(cfg.efficiency_repeats);
    p.online_seconds /= static_cast<double>(cfg.efficiency_repeats);
    curve.push_back(p);
  }
  return curve;
}

/// Shots-to-target per baseline on one task. When `target` is absent it is
/// the largest 2-shot mean SER among the meta baselines, so every meta
/// baseline reaches it by 2 shots at the latest.
inline Efficiency sample_efficiency(const std::vector<Baseline>& baselines,
                                    const tasks::TaskLibrary& lib, const EvalConfig& cfg,
                                    std::optional<double> target = {}) {
  if (cfg.shot_grid.empty()) throw ValueError("sample_efficiency: empty grid");
  if (lib.meta_test.empty()) throw ValueError("sample_efficiency: no meta-test tasks");
  std::size_t k = lib.meta_test.front();
  if (!cfg.efficiency_task.empty()) {
    bool found = false;
    for (std::size_t i = 0; i < lib.tasks.size(); ++i) {
      if (lib.tasks[i].id == cfg.efficiency_task) {
        k = i;
        found = true;
      }
    }
    if (!found) throw ConfigError("eval: unknown efficiency task '" + cfg.efficiency_task + "'");
  }
  const auto& task = lib.tasks.at(k);
  Efficiency e{task.id, 0.0, {}};
  for (const auto& b : baselines) e.rows.push_back({b.name, efficiency_curve(b, task, k, cfg), {}});
  if (target) {
    e.target = *target;
  } else {
    bool any = false;
    for (std::size_t i = 0; i < baselines.size(); ++i) {
      if (baselines[i].kind != BaselineKind::Meta) continue;
      for (const auto& p : e.rows[i].curve) {
        if (p.shots == 2) {
          e.target = any ? std::max(e.target, p.mean_ser) : p.mean_ser;
          any = true;
        }
      }
    }
    if (!any) throw ValueError("sample_efficiency: no meta baseline evaluated at 2 shots");
  }
  for (auto& r : e.rows) r.shots_to_target = shots_to_target(r.curve, e.target);
  return e;
}

// ---------------------------------------------------------------------------
// Timing

struct PhaseRecord {
  std::string baseline;
  std::string phase;  // "offline" or "online"
  double seconds = 0.0;
  std::size_t shots = 0;
};

struct TimingRow {
  std::string baseline;
  std::optional<double> offline_seconds;  // empty for Scratch
  double online_seconds = 0.0;
  std::size_t online_shots = 0;
};

/// Online time is taken at the baseline's shots-to-target, or at the
/// largest grid point when the target is not reached.
inline std::vector<PhaseRecord> timing_logs(const std::vector<Baseline>& baselines,
                                            const Efficiency& e) {
  std::vector<PhaseRecord> logs;
  for (const auto& b : baselines) {
    if (b.kind != BaselineKind::Scratch) logs.push_back({b.name, "offline", b.offline_seconds, 0});
    const auto& row = e.row(b.name);
    const std::size_t s = row.shots_to_target.value_or(row.curve.back().shots);
    for (const auto& p : row.curve) {
      if (p.shots == s) logs.push_back({b.name, "online", p.online_seconds, s});
    }
  }
  return logs;
}

inline std::vector<TimingRow> timing_report(const std::vector<Baseline>& baselines,
                                            const std::vector<PhaseRecord>& logs) {
  std::vector<TimingRow> rows;
  for (const auto& b : baselines) {
    TimingRow r{b.name, std::nullopt, 0.0, 0};
    bool online = false, offline = false;
    for (const auto& l : logs) {
      if (l.baseline != b.name) continue;
      if (l.phase == "offline") {
        r.offline_seconds = l.seconds;
        offline = true;
      } else if (l.phase == "online") {
        r.online_seconds = l.seconds;
        r.online_shots = l.shots;
        online = true;
      }
    }
    if (!online) throw ValueError("timing_report: no online phase for '" + b.name + "'");
    if (b.kind != BaselineKind::Scratch && !offline) {
      throw ValueError("timing_report: no offline phase for '" + b.name + "'");
    }
    rows.push_back(r);
  }
  return rows;
}

// ---------------------------------------------------------------------------
// Adversarial power efficiency

struct PowerEfficiency {
  double clean_ser = 0.0;
  double adversarial_ser = 0.0;
  double awgn_ser = 0.0;       // Gaussian noise with the adversarial perturbation's power
  double measured_psr_db = 0.0;
  double ratio() const { return awgn_ser > 0.0 ? adversarial_ser / awgn_ser : INFINITY; }
};

/// White-box attack on `model` versus AWGN of equal measured power, both on
/// a class-balanced draw of `per_class` frames per seed. Means over seeds.
inline PowerEfficiency power_efficiency(const models::ModelParams& model,
                                        const signals::LabeledDataset& ds,
                                        const attacks::AttackSpec& spec,
                                        std::span<const std::uint64_t> seeds,
                                        std::size_t per_class) {
  if (seeds.empty()) throw ValueError("power_efficiency: no seeds");
  const auto all = meta::batch_of(ds);
  const auto resolved = attacks::resolve(spec, signals::mean_power(ds), ds.frame_len);
  const attacks::ModelClassifier f(model);
  PowerEfficiency out;
  for (auto seed : seeds) {
    std::mt19937_64 rng(seed);
    const auto b = meta::gather(all, meta::draw_shots(all.y, ds.num_classes(), per_class, rng));
    const auto delta = attacks::craft(f, b.x, b.y, resolved);
    const double pd = attacks::power(delta);
    Tensor adv = b.x, noisy = b.x;
    std::normal_distribution<double> n(0.0, std::sqrt(pd / 2.0));
    for (std::size_t i = 0; i < adv.size(); ++i) {
      adv.data()[i] += delta.data()[i];
      noisy.data()[i] += n(rng);
    }
    out.clean_ser += evaluate_ser(model, b);
    out.adversarial_ser += evaluate_ser(model, meta::Batch{adv, b.y});
    out.awgn_ser += evaluate_ser(model, meta::Batch{noisy, b.y});
    out.measured_psr_db += 10.0 * std::log10(pd / attacks::power(b.x));
  }
  const double k = static_cast<double>(seeds.size());
  out.clean_ser /= k;
  out.adversarial_ser /= k;
  out.awgn_ser /= k;
  out.measured_psr_db /= k;
  return out;
}

// ---------------------------------------------------------------------------
// Reports

inline constexpr int kReportSchema = 1;

struct EvalReport {
  std::string experiment_id;
  std::string config_hash;
  std::vector<std::uint64_t> seeds;
  std::vector<Baseline> baselines;  // models not serialized
  std::vector<Cell> cells;
  std::optional<Efficiency> efficiency;
  std::vector<TimingRow> timing;
  std::string emitted;  // UTC timestamp; empty when timings are not recorded
};

inline std::string utc_now() {
  const std::time_t t = std::time(nullptr);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", std::gmtime(&t));
  return buf;
}

inline Json to_json(const EvalReport& r) {
  Json j;
  j["schema_version"] = kReportSchema;
  j["experiment_id"] = r.experiment_id;
  j["config_hash"] = r.config_hash;
  j["seeds"] = r.seeds;
  j["baselines"] = Json::array();
  for (const auto& b : r.baselines) {
    j["baselines"].push_back(
        {{"name", b.name}, {"kind", kind_name(b.kind)}, {"model", b.description.empty() ? b.model.arch.describe() : b.description}});
  }
  j["cells"] = Json::array();
  for (const auto& c : r.cells) {
    j["cells"].push_back({{"baseline", c.baseline},
                          {"task_id", c.task_id},
                          {"attack", c.attack},
                          {"substitute", c.substitute},
                          {"shots", c.shots},
                          {"seed", c.seed},
                          {"ser", c.ser},
                          {"online_seconds", c.online_seconds}});
  }
  auto summary_json = [](const std::vector<Summary>& s) {
    Json a = Json::array();
    for (const auto& x : s) {
      a.push_back({{"baseline", x.baseline},
                   {"shots", x.shots},
                   {"mean_ser", x.mean},
                   {"std_ser", x.std},
                   {"n", x.n}});
    }
    return a;
  };
  j["summary"] = summary_json(summarize(r.cells));
  std::vector<std::string> task_ids;
  for (const auto& c : r.cells) {
    if (std::find(task_ids.begin(), task_ids.end(), c.task_id) == task_ids.end()) {
      task_ids.push_back(c.task_id);
    }
  }
  j["per_task"] = Json::object();
  for (const auto& t : task_ids) j["per_task"][t] = summary_json(summarize(r.cells, t));
  if (r.efficiency) {
    Json e{{"task_id", r.efficiency->task_id}, {"target_ser", r.efficiency->target}};
    e["baselines"] = Json::array();
    for (const auto& row : r.efficiency->rows) {
      Json curve = Json::array();
      for (const auto& p : row.curve) {
        curve.push_back(
            {{"shots", p.shots}, {"mean_ser", p.mean_ser}, {"online_seconds", p.online_seconds}});
      }
      e["baselines"].push_back(
          {{"name", row.baseline},
           {"shots_to_target", row.shots_to_target ? Json(*row.shots_to_target) : Json(nullptr)},
           {"curve", curve}});
    }
    j["sample_efficiency"] = e;
  }
  j["timing"] = Json::array();
  for (const auto& t : r.timing) {
    j["timing"].push_back(
        {{"baseline", t.baseline},
         {"offline_seconds", t.offline_seconds ? Json(*t.offline_seconds) : Json(nullptr)},
         {"online_seconds", t.online_seconds},
         {"online_shots", t.online_shots}});
  }
  if (!r.emitted.empty()) j["emitted"] = r.emitted;
  return j;
}

/// Parses a report, rejecting unknown schema versions. Baseline models are
/// not part of the report and come back empty.
inline EvalReport report_from_json(const Json& j) {
  try {
    if (!j.contains("schema_version") || j.at("schema_version").get<int>() != kReportSchema) {
      throw FormatError("report: unsupported schema version");
    }
    EvalReport r;
    r.experiment_id = j.at("experiment_id");
    r.config_hash = j.at("config_hash");
    r.seeds = j.at("seeds").get<std::vector<std::uint64_t>>();
    for (const auto& b : j.at("baselines")) {
      Baseline x;
      x.name = b.at("name");
      x.description = b.at("model");
      const std::string k = b.at("kind");
      for (auto kind : {BaselineKind::Scratch, BaselineKind::TransferClean,
                        BaselineKind::TransferAdversarial, BaselineKind::Meta}) {
        if (kind_name(kind) == k) x.kind = kind;
      }
      r.baselines.push_back(std::move(x));
    }
    for (const auto& c : j.at("cells")) {
      r.cells.push_back({c.at("baseline"), c.at("task_id"), c.at("attack"), c.at("substitute"),
                         c.at("shots"), c.at("seed"), c.at("ser"), c.at("online_seconds")});
    }
    if (j.contains("sample_efficiency")) {
      const auto& e = j["sample_efficiency"];
      Efficiency eff{e.at("task_id"), e.at("target_ser"), {}};
      for (const auto& b : e.at("baselines")) {
        EfficiencyRow row{b.at("name"), {}, {}};
        if (!b.at("shots_to_target").is_null()) row.shots_to_target = b["shots_to_target"];
        for (const auto& p : b.at("curve")) {
          row.curve.push_back({p.at("shots"), p.at("mean_ser"), p.at("online_seconds")});
        }
        eff.rows.push_back(std::move(row));
      }
      r.efficiency = std::move(eff);
    }
    for (const auto& t : j.at("timing")) {
      TimingRow row{t.at("baseline"), {}, t.at("online_seconds"), t.at("online_shots")};
      if (!t.at("offline_seconds").is_null()) row.offline_seconds = t["offline_seconds"];
      r.timing.push_back(row);
    }
    if (j.contains("emitted")) r.emitted = j["emitted"];
    for (const auto& c : r.cells) {
      if (!(c.ser >= 0.0 && c.ser <= 1.0)) throw FormatError("report: SER outside [0, 1]");
    }
    return r;
  } catch (const Json::exception& e) {
    throw FormatError(std::string("report: ") + e.what());
  }
}

inline std::string csv_number(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

/// One row per cell, then one mean row per (baseline, shots) with
/// task_id "mean" and an empty seed.
inline std::string to_csv(const EvalReport& r) {
  std::ostringstream os;
  os << "baseline,task_id,attack,substitute,shots,seed,ser,online_seconds\n";
  for (const auto& c : r.cells) {
    os << c.baseline << ',' << c.task_id << ',' << c.attack << ',' << c.substitute << ','
       << c.shots << ',' << c.seed << ',' << csv_number(c.ser) << ','
       << csv_number(c.online_seconds) << '\n';
  }
  std::map<std::pair<std::string, std::size_t>, double> secs;
  std::map<std::pair<std::string, std::size_t>, std::size_t> count;
  for (const auto& c : r.cells) {
    secs[{c.baseline, c.shots}] += c.online_seconds;
    ++count[{c.baseline, c.shots}];
  }
  for (const auto& s : summarize(r.cells)) {
    const auto key = std::make_pair(s.baseline, s.shots);
    os << s.baseline << ",mean,,," << s.shots << ",," << csv_number(s.mean) << ','
       << csv_number(secs[key] / static_cast<double>(count[key])) << '\n';
  }
  return os.str();
}

/// Digest over the SER cells only (timings excluded).
inline std::string ser_digest(const std::vector<Cell>& cells) {
  io::Writer w;
  for (const auto& c : cells) {
    w.str(c.baseline);
    w.str(c.task_id);
    w.u64(c.shots);
    w.u64(c.seed);
    w.f64(c.ser);
  }
  return io::sha256_hex(w.bytes());
}

}  // namespace amc::harness
