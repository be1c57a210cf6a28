// fdla: federated-distillation poisoning simulator.
//
//   fdla run    [--config file.json] [--<field> value ...] [--out dir]
//   fdla sweep  --axis ratio|alpha|clients|arch [--attacks none,fdla,...] [--jobs N] ...
//   fdla report <dir>... [--out summary.csv]
//
// Exit codes: 0 success, 2 configuration error, 3 runtime error.

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "fdla/config.hpp"
#include "fdla/experiment.hpp"

namespace {

constexpr int kExitConfig = 2;
constexpr int kExitRuntime = 3;

struct ConfigFlags {
  std::string config_path;
  std::map<std::string, std::string> values;

  void attach(CLI::App& app) {
    app.add_option("--config", config_path, "JSON configuration file");
    for (const auto& name : fdla::config_field_names()) {
      std::string names = "--" + name;
      std::string dashed = name;
      std::replace(dashed.begin(), dashed.end(), '_', '-');
      if (dashed != name) names += ",--" + dashed;
      if (name == "output_dir") names += ",--out";
      app.add_option(names, values[name], "override '" + name + "'");
    }
  }

  fdla::ExperimentConfig resolve(const CLI::App& app) const {
    fdla::FlagOverrides overrides;
    for (const auto& name : fdla::config_field_names()) {
      if (app.count("--" + name) > 0) overrides.emplace_back(name, values.at(name));
    }
    std::optional<std::filesystem::path> file;
    if (!config_path.empty()) file = config_path;
    return fdla::parse_config(file, overrides);
  }
};

std::vector<fdla::AttackKind> parse_attack_list(const std::string& text) {
  std::vector<fdla::AttackKind> out;
  std::stringstream in(text);
  std::string item;
  while (std::getline(in, item, ',')) {
    if (!item.empty()) out.push_back(fdla::parse_attack_kind(item));
  }
  if (out.empty()) throw fdla::ConfigError("field 'attacks': empty list");
  return out;
}

int exit_code_for(const fdla::Error& e) {
  return e.kind() == fdla::ErrorKind::config ? kExitConfig : kExitRuntime;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Federated distillation simulator with logits poisoning attacks"};
  app.require_subcommand(1);

  auto* run_cmd = app.add_subcommand("run", "run one experiment and export its metrics");
  ConfigFlags run_flags;
  run_flags.attach(*run_cmd);
  bool quiet = false;
  run_cmd->add_flag("--quiet", quiet, "suppress per-round progress");

  auto* sweep_cmd = app.add_subcommand("sweep", "run an ablation grid over one axis");
  ConfigFlags sweep_flags;
  sweep_flags.attach(*sweep_cmd);
  std::string axis_name;
  std::string attack_list = "none,fdla,random,zero";
  std::size_t jobs = 1;
  sweep_cmd->add_option("--axis", axis_name, "ratio|alpha|clients|arch")->required();
  sweep_cmd->add_option("--attacks", attack_list, "comma-separated attack kinds");
  sweep_cmd->add_option("--jobs", jobs, "cells to run in parallel");

  auto* report_cmd = app.add_subcommand("report", "re-summarize existing output directories");
  std::vector<std::string> report_dirs;
  std::string report_out;
  report_cmd->add_option("dirs", report_dirs, "output directories")->required();
  report_cmd->add_option("--out", report_out, "write the summary here instead of stdout");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitConfig;
  }

  try {
    if (*run_cmd) {
      const auto config = run_flags.resolve(*run_cmd);
      const auto result = fdla::run(config, [&](const fdla::RoundReport& r) {
        if (!quiet) {
          std::fprintf(stderr, "round %zu mean_acc %.4f\n", r.round, r.mean_accuracy);
        }
      });
      std::printf("final mean accuracy %.4f over %zu clients (%zu malicious, attack %s)\n",
                  result.series.final_mean(), config.clients, result.attackers.malicious_ids.size(),
                  std::string(fdla::to_string(config.attack)).c_str());
      std::printf("outputs written to %s\n", config.output_dir.c_str());
    } else if (*sweep_cmd) {
      const auto base = sweep_flags.resolve(*sweep_cmd);
      const auto axis = fdla::parse_sweep_axis(axis_name);
      const auto attacks = parse_attack_list(attack_list);
      fdla::sweep(base, axis, attacks, jobs, [](const fdla::SweepCell& cell) {
        std::fprintf(stderr, "cell %s/%s final mean acc %.4f\n", cell.value.c_str(),
                     std::string(fdla::to_string(cell.attack)).c_str(), cell.final_mean_acc);
      });
      std::ifstream summary(std::filesystem::path(base.output_dir) / "summary.csv");
      std::cout << summary.rdbuf();
    } else if (*report_cmd) {
      std::vector<std::filesystem::path> dirs(report_dirs.begin(), report_dirs.end());
      const auto text = fdla::report_directories(dirs);
      if (report_out.empty()) {
        std::cout << text;
      } else {
        fdla::write_text(text, report_out);
      }
    }
  } catch (const fdla::Error& e) {
    std::fprintf(stderr, "fdla: %s: %s\n", fdla::to_string(e.kind()), e.what());
    return exit_code_for(e);
  } catch (const std::exception& e) {
    std::fprintf(stderr, "fdla: %s\n", e.what());
    return kExitRuntime;
  }
  return 0;
}
