// Copyright 2026 The qmmr Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#include <ctime>
#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "qmmr/experiments.hpp"

namespace {

constexpr int kExitOk = 0;
constexpr int kExitValidation = 2;
constexpr int kExitAuditFailure = 3;

// Reports carry a wall-clock timestamp for humans; determinism checks strip
// this one field before hashing.
void stamp(qmmr::json& report) {
  report["timestamp"] = static_cast<std::int64_t>(std::time(nullptr));
}

struct CliOverrides {
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out_dir;
  std::optional<int> trials;
  std::optional<double> delta;
};

qmmr::ExperimentConfig load_config(const std::string& path,
                                   const CliOverrides& overrides) {
  qmmr::json doc = qmmr::read_json_file(path);
  if (overrides.seed) doc["seed"] = *overrides.seed;
  if (overrides.out_dir) doc["out_dir"] = *overrides.out_dir;
  if (overrides.trials) doc["trials"] = *overrides.trials;
  if (overrides.delta) doc["delta"] = *overrides.delta;
  return qmmr::config_from_json(doc);
}

void write_report(const qmmr::ExperimentConfig& cfg, const std::string& name,
                  const qmmr::json& report) {
  const std::filesystem::path out(cfg.out_dir);
  qmmr::write_text_file(out / name, report.dump(2) + "\n");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Off-policy evaluation via moment-matched per-sample reweighting"};
  app.require_subcommand(1);

  std::string config_path;
  CliOverrides overrides;
  std::uint64_t seed_flag = 0;
  std::string out_flag;
  int trials_flag = 0;
  double delta_flag = 0.0;

  const auto add_common = [&](CLI::App* cmd) {
    cmd->add_option("--config", config_path, "Path to the experiment config")
        ->required();
    cmd->add_option("--seed", seed_flag, "Override config seed");
    cmd->add_option("--out", out_flag, "Override output directory");
    cmd->add_option("--trials", trials_flag, "Override trial count");
    cmd->add_option("--delta", delta_flag, "Override confidence level delta");
  };

  CLI::App* cmd_generate = app.add_subcommand(
      "generate", "Write the fixture MDP, features and policies");
  CLI::App* cmd_evaluate = app.add_subcommand(
      "evaluate", "Run estimators over the n grid and report bound coverage");
  CLI::App* cmd_tracking = app.add_subcommand(
      "tracking", "Fit the empirical-vs-population weight tracking rate");
  CLI::App* cmd_audit = app.add_subcommand(
      "audit", "Run the closed-form identity battery; exit 3 on any failure");
  CLI::App* cmd_diagnose = app.add_subcommand(
      "diagnose", "Emit per-level coverage / stability / completeness report");
  for (CLI::App* cmd :
       {cmd_generate, cmd_evaluate, cmd_tracking, cmd_audit, cmd_diagnose}) {
    add_common(cmd);
  }

  CLI11_PARSE(app, argc, argv);

  try {
    CLI::App* active = app.get_subcommands().front();
    if (active->count("--seed")) overrides.seed = seed_flag;
    if (active->count("--out")) overrides.out_dir = out_flag;
    if (active->count("--trials")) overrides.trials = trials_flag;
    if (active->count("--delta")) overrides.delta = delta_flag;
    const qmmr::ExperimentConfig cfg = load_config(config_path, overrides);
    if (cmd_generate->parsed()) {
      qmmr::json summary = qmmr::cmd_generate(cfg);
      stamp(summary);
      write_report(cfg, "generate_report.json", summary);
      std::cout << "wrote fixture files to " << cfg.out_dir << "\n";
    } else if (cmd_evaluate->parsed()) {
      qmmr::EvaluateResult result = qmmr::cmd_evaluate(cfg);
      stamp(result.report);
      write_report(cfg, "evaluate_report.json", result.report);
      qmmr::write_text_file(
          std::filesystem::path(cfg.out_dir) / "evaluate_rows.csv",
          result.csv);
      for (const auto& agg : result.report["aggregates"]) {
        std::cout << agg["estimator"].get<std::string>() << " n="
                  << agg["n"] << " rmse=" << agg["rmse"];
        if (agg.contains("bound_coverage")) {
          std::cout << " coverage=" << agg["bound_coverage"];
        }
        std::cout << "\n";
      }
    } else if (cmd_tracking->parsed()) {
      qmmr::json report = qmmr::cmd_tracking(cfg);
      stamp(report);
      write_report(cfg, "tracking_report.json", report);
      std::cout << "pooled slope: " << report["pooled_slope"] << "\n";
    } else if (cmd_audit->parsed()) {
      qmmr::json report = qmmr::cmd_audit(cfg);
      stamp(report);
      write_report(cfg, "audit_report.json", report);
      for (const auto& check : report["checks"]) {
        std::cout << check["name"].get<std::string>() << ": "
                  << check["status"].get<std::string>() << "\n";
      }
      if (!report["ok"].get<bool>()) return kExitAuditFailure;
    } else if (cmd_diagnose->parsed()) {
      qmmr::json report = qmmr::cmd_diagnose(cfg);
      stamp(report);
      write_report(cfg, "diagnose_report.json", report);
      std::cout << "wrote diagnostics for " << report["levels"].size()
                << " levels\n";
    }
  } catch (const qmmr::ValidationError& e) {
    std::cerr << "validation error: " << e.what() << "\n";
    return kExitValidation;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return kExitOk;
}
