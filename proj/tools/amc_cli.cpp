// Command-line driver for the offline/online pipeline.
//
//   amc <subcommand> --config c.json [--workdir dir] [...]
//
// Exit codes: 0 success, 1 runtime failure, 2 usage error, 3 invalid config.
// Failures print a single line "error: <category>: <message>" on stderr.

#include <iostream>
#include <sstream>

#include "CLI11.hpp"
#include "amc/pipeline.hpp"

namespace {

using namespace amc;
namespace fs = std::filesystem;

std::vector<std::size_t> parse_list(const std::string& s) {
  std::vector<std::size_t> out;
  std::stringstream in(s);
  std::string item;
  while (std::getline(in, item, ',')) {
    if (item.empty() || item.find_first_not_of("0123456789") != std::string::npos) {
      throw ConfigError("bad shot list '" + s + "'");
    }
    out.push_back(std::stoull(item));
  }
  if (out.empty()) throw ConfigError("empty shot list");
  return out;
}

std::string one_line(std::string s) {
  for (auto& c : s) {
    if (c == '\n' || c == '\r') c = ' ';
  }
  return s;
}

int fail(const char* category, const std::string& msg, int code) {
  std::cerr << "error: " << category << ": " << one_line(msg) << "\n";
  return code;
}

}  // namespace

int main(int argc, char** argv) {
  pipeline::tune_allocator();
  CLI::App app{"Adversarially robust modulation classification pipeline"};
  app.require_subcommand(1);
  app.set_version_flag("--version", pipeline::kToolVersion);

  std::string config_path, workdir = "work";
  std::optional<std::uint64_t> seed;
  std::string shots, out, in, algorithms, baseline, task;
  std::size_t adapt_shots = 2;
  std::uint64_t adapt_seed = 1;

  auto common = [&](CLI::App* sc) {
    sc->add_option("--config", config_path, "JSON config")->required()->check(CLI::ExistingFile);
    sc->add_option("--workdir", workdir, "artifact directory");
  };
  auto* gen = app.add_subcommand("gen-data", "generate the clean dataset");
  common(gen);
  gen->add_option("--seed", seed, "override data.seed");
  auto* subs = app.add_subcommand("train-substitutes", "train the substitute zoo");
  common(subs);
  auto* gt = app.add_subcommand("gen-tasks", "craft perturbations and build the task library");
  common(gt);
  auto* mt = app.add_subcommand("meta-train", "train the transfer and meta baselines");
  common(mt);
  mt->add_option("--algorithms", algorithms, "comma-separated subset of meta.algorithms");
  auto* ad = app.add_subcommand("adapt", "adapt one baseline to a meta-test task");
  common(ad);
  ad->add_option("--baseline", baseline, "baseline name")->required();
  ad->add_option("--task", task, "task id (default: first meta-test task)");
  ad->add_option("--shots", adapt_shots, "shots per class");
  ad->add_option("--seed", adapt_seed, "support draw seed");
  auto* ev = app.add_subcommand("evaluate", "few-shot evaluation of every baseline");
  common(ev);
  ev->add_option("--shots", shots, "comma-separated shot counts, e.g. 0,2,10");
  ev->add_option("--out", out, "report path (default <workdir>/eval/report.json)");
  auto* rp = app.add_subcommand("report", "summarize a report");
  common(rp);
  rp->add_option("--in", in, "report path (default <workdir>/eval/report.json)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::Success& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    return fail("usage", e.what(), 2);
  }

  try {
    auto doc = pipeline::read_json(config_path);
    if (seed && doc.is_object()) doc["data"]["seed"] = *seed;
    if (!shots.empty() && doc.is_object()) doc["eval"]["shots"] = parse_list(shots);
    const auto cfg = pipeline::parse_config(doc);
    const pipeline::Layout w{fs::absolute(workdir)};
    fs::create_directories(w.root);
    const std::string name = app.get_subcommands().front()->get_name();
    pipeline::Json result;
    if (name == "gen-data") {
      result = pipeline::gen_data(cfg, w);
    } else if (name == "train-substitutes") {
      result = pipeline::train_substitutes(cfg, w);
    } else if (name == "gen-tasks") {
      result = pipeline::gen_tasks(cfg, w);
    } else if (name == "meta-train") {
      std::vector<meta::Algorithm> only;
      std::stringstream ss(algorithms);
      for (std::string a; std::getline(ss, a, ',');) {
        if (!a.empty()) only.push_back(meta::parse_algorithm(a));
      }
      result = pipeline::meta_train(cfg, w, only);
      for (auto& [k, v] : result.items()) v.erase("trace");
    } else if (name == "adapt") {
      result = pipeline::adapt(cfg, w, {baseline, task, adapt_shots, adapt_seed});
    } else if (name == "evaluate") {
      const fs::path p = out.empty() ? w.eval() / "report.json" : fs::absolute(out);
      const auto r = pipeline::evaluate(cfg, w, p);
      std::cout << pipeline::render_report(r);
      result = {{"report", p.string()}, {"cells", r.cells.size()}};
    } else if (name == "report") {
      const fs::path p = in.empty() ? w.eval() / "report.json" : fs::absolute(in);
      std::cout << pipeline::report(cfg, w, p);
      return 0;
    }
    std::cout << result.dump() << "\n";
    return 0;
  } catch (const ConfigError& e) {
    return fail("config", e.what(), 3);
  } catch (const FormatError& e) {
    return fail("format", e.what(), 1);
  } catch (const DivergenceError& e) {
    return fail("divergence", e.what(), 1);
  } catch (const std::exception& e) {
    return fail("runtime", e.what(), 1);
  }
}
