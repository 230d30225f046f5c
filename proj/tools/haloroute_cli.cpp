// haloroute command-line harness.
//
// Exit codes: 0 ok, 2 usage, 3 config, 4 dependency, 5 numeric, 1 other.

#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "haloroute/experiment.hpp"

using namespace haloroute;

namespace {

enum Exit { kOk = 0, kOther = 1, kUsage = 2, kConfig = 3, kDependency = 4, kNumeric = 5 };

struct Common {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
};

void add_common(CLI::App* sub, Common& c) {
  sub->add_option("--config", c.config, "experiment config (JSON)")->required()->check(CLI::ExistingFile);
  sub->add_option("--seed", c.seed, "override the config seed");
  sub->add_option("--out", c.out, "override the output directory");
}

ExperimentConfig resolve(const Common& c) {
  auto cfg = ExperimentConfig::load(c.config);
  if (c.seed) cfg.seed = *c.seed;
  if (!c.out.empty()) cfg.out = c.out;
  cfg.derive_seeds();
  cfg.validate();
  return cfg;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"haloroute: budgeted local refinement on top of a frozen forecaster"};
  app.require_subcommand(1);
  Common common;

  auto* gen = app.add_subcommand("gen-data", "generate train/test trajectories");
  std::string family;
  add_common(gen, common);
  gen->add_option("--family", family, "initial-condition family")
      ->check(CLI::IsMember({"gaussian", "sines", "shear", "piecewise"}));

  auto* train = app.add_subcommand("train", "run one training stage");
  add_common(train, common);
  std::string stage;
  TrainOptions topt;
  train->add_option("--stage", stage, "global | local-patch | local-ar")
      ->required()
      ->check(CLI::IsMember({"global", "local-patch", "local-ar"}));
  train->add_flag("--fresh", topt.fresh, "discard saved loop state");
  train->add_option("--stop-after", topt.stop_after, "stop after this many epochs (resume later)");

  auto* eval = app.add_subcommand("evaluate", "raw / global / hybrid rollouts and summary");
  add_common(eval, common);

  auto* sweep = app.add_subcommand("sweep", "budget, lambda_ke or data-size sweep");
  add_common(sweep, common);
  std::string axis;
  sweep->add_option("--axis", axis, "budget | lambda_ke | data_size")
      ->required()
      ->check(CLI::IsMember({"budget", "lambda_ke", "data_size"}));

  auto* ablate = app.add_subcommand("ablate", "compare a variant against the configured baseline");
  add_common(ablate, common);
  std::string which;
  ablate->add_option("--which", which, "hann_off | static_mask | policy=<name>")->required();

  auto* aud = app.add_subcommand("audit", "decompose the improvement into global and local shares");
  add_common(aud, common);
  std::string results;
  aud->add_option("--results", results, "evaluation results file (default <out>/results/evaluate.json)");

  auto* diag = app.add_subcommand("diagnose", "physical diagnostics and energy spectra");
  add_common(diag, common);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kUsage;
  }

  try {
    auto cfg = resolve(common);
    nlohmann::json summary;
    if (app.got_subcommand(gen)) {
      if (!family.empty()) cfg.solver.family = parse_ic_family(family);
      summary = cmd_gen_data(cfg);
    } else if (app.got_subcommand(train)) {
      summary = cmd_train(cfg, parse_stage(stage), topt);
    } else if (app.got_subcommand(eval)) {
      summary = cmd_evaluate(cfg)["results"]["summary"];
    } else if (app.got_subcommand(sweep)) {
      cmd_sweep(cfg, axis);
      summary = {{"written", (cfg.results_dir() / ("sweep_" + axis + ".json")).generic_string()}};
    } else if (app.got_subcommand(ablate)) {
      const auto r = cmd_ablate(cfg, which)["results"];
      summary = {{"median_ratio_to_baseline", r["median_ratio_to_baseline"]},
                 {"median_baseline_loss", r["median_baseline_loss"]},
                 {"median_variant_loss", r["median_variant_loss"]}};
    } else if (app.got_subcommand(aud)) {
      auto r = cmd_audit(cfg, results)["results"];
      r.erase("runs");
      summary = r;
    } else if (app.got_subcommand(diag)) {
      summary = cmd_diagnose(cfg)["results"];
    }
    std::cout << summary.dump(2) << '\n';
    return kOk;
  } catch (const DependencyError& e) {
    std::cerr << "dependency error: " << e.what() << '\n';
    return kDependency;
  } catch (const NumericError& e) {
    std::cerr << "numeric error: " << e.what() << '\n';
    return kNumeric;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kConfig;
  } catch (const GeometryError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kConfig;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kOther;
  }
}
