#pragma once

// End-to-end experiment orchestration behind the CLI: dataset setup, single
// runs with file output, ablation sweeps and re-summarizing existing outputs.

#include <algorithm>
#include <atomic>
#include <cstddef>
#include <exception>
#include <filesystem>
#include <fstream>
#include <functional>
#include <mutex>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include <json.hpp>

#include "fdla/attacks.hpp"
#include "fdla/config.hpp"
#include "fdla/datasets.hpp"
#include "fdla/metrics.hpp"
#include "fdla/protocol.hpp"

namespace fdla {

inline std::pair<Dataset, Dataset> load_datasets(const ExperimentConfig& config) {
  if (config.dataset == "synthetic") {
    return generate_synthetic(
        {config.n_classes, config.per_class, config.dim, config.separation, config.data_seed});
  }
  if (config.dataset == "idx") {
    auto train = load_idx(config.train_path, config.train_labels_path, Split::train);
    auto test = load_idx(config.test_path, config.test_labels_path, Split::test);
    const auto n = std::max(train.n_classes, test.n_classes);
    train.n_classes = test.n_classes = n;
    return {std::move(train), std::move(test)};
  }
  if (config.dataset == "csv") {
    auto train = load_csv(config.train_path, {.split = Split::train});
    auto test = load_csv(config.test_path, {.split = Split::test});
    const auto n = std::max(train.n_classes, test.n_classes);
    train.n_classes = test.n_classes = n;
    return {std::move(train), std::move(test)};
  }
  throw ConfigError("field 'dataset': unknown value '" + config.dataset + "'");
}

struct ExperimentResult {
  ExperimentConfig config;
  AttackAssignment attackers;
  std::vector<RoundReport> reports;
  ConvergenceSeries series;
  MisleadingReport misleading;
  World world;  // final client states
};

/// Partition, model assignment, attacker selection, all rounds, and the
/// misleading-effect report on the configured (or closest-pair) class.
inline ExperimentResult run_config(const ExperimentConfig& config,
                                   const RoundCallback& on_round = {}) {
  validate(config);
  auto [train, test] = load_datasets(config);
  const auto partition = dirichlet_partition(train, config.clients, config.alpha, config.data_seed);

  ExperimentResult result;
  result.config = config;
  result.attackers = select_malicious(config.clients, config.poison_ratio, config.attack_seed);
  result.world = build_world(config, train, test, partition, result.attackers);
  result.reports = run_experiment(result.world, config.rounds, on_round);
  result.series = convergence_series(result.reports);

  std::size_t target = 0;
  if (config.misleading_class >= 0) {
    target = static_cast<std::size_t>(config.misleading_class);
  } else {
    target = closest_centroid_pair(train).first;
  }
  result.misleading = misleading_report(result.world, target);
  return result;
}

inline nlohmann::ordered_json experiment_document(const ExperimentResult& result) {
  nlohmann::ordered_json doc;
  doc["config"] = to_json(result.config);
  nlohmann::ordered_json summary;
  const auto& last = result.series.points.back();
  summary["rounds"] = result.series.points.size();
  summary["final_mean_acc"] = last.mean;
  summary["final_min_acc"] = last.min;
  summary["final_max_acc"] = last.max;
  const auto converged = result.series.first_round_reaching(0.95);
  summary["round_reaching_95pct_of_final"] =
      converged ? nlohmann::ordered_json(*converged) : nullptr;
  summary["malicious_clients"] = result.attackers.malicious_ids;
  std::size_t renormalized = 0;
  std::size_t divergences = 0;
  for (const auto& r : result.reports) {
    renormalized += r.renormalized_teachers;
    divergences += r.diverged_clients.size();
  }
  summary["renormalized_teachers"] = renormalized;
  summary["diverged_client_rounds"] = divergences;
  doc["summary"] = summary;
  doc["series"] = to_json(result.series);
  doc["misleading"] = nlohmann::ordered_json::array({to_json(result.misleading)});
  return doc;
}

/// Writes series.csv, misleading.csv and experiment.json into `dir`.
inline void write_outputs(const ExperimentResult& result, const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create output directory " + dir.string() + ": " + ec.message());
  write_series_csv(result.series, dir / "series.csv");
  write_misleading_csv(result.misleading, dir / "misleading.csv");
  write_json(experiment_document(result), dir / "experiment.json");
}

inline ExperimentResult run(const ExperimentConfig& config, const RoundCallback& on_round = {}) {
  auto result = run_config(config, on_round);
  write_outputs(result, config.output_dir);
  return result;
}

// ---------------------------------------------------------------------------

enum class SweepAxis { ratio, alpha, clients, arch };

inline SweepAxis parse_sweep_axis(std::string_view name) {
  if (name == "ratio") return SweepAxis::ratio;
  if (name == "alpha") return SweepAxis::alpha;
  if (name == "clients") return SweepAxis::clients;
  if (name == "arch") return SweepAxis::arch;
  throw ConfigError("unknown sweep axis '" + std::string(name) +
                    "' (expected ratio|alpha|clients|arch)");
}

inline std::string_view to_string(SweepAxis axis) {
  switch (axis) {
    case SweepAxis::ratio: return "ratio";
    case SweepAxis::alpha: return "alpha";
    case SweepAxis::clients: return "clients";
    case SweepAxis::arch: return "arch";
  }
  return "?";
}

/// Axis values: poisoning ratio 10/20/30%, alpha 0.5/1/3, 20/50/200 clients,
/// homogeneous vs heterogeneous models.
inline std::vector<std::string> sweep_values(SweepAxis axis) {
  switch (axis) {
    case SweepAxis::ratio: return {"0.1", "0.2", "0.3"};
    case SweepAxis::alpha: return {"0.5", "1", "3"};
    case SweepAxis::clients: return {"20", "50", "200"};
    case SweepAxis::arch: return {"homo", "hetero"};
  }
  return {};
}

inline ExperimentConfig apply_axis(ExperimentConfig config, SweepAxis axis,
                                   const std::string& value) {
  switch (axis) {
    case SweepAxis::ratio: config.poison_ratio = std::stod(value); break;
    case SweepAxis::alpha: config.alpha = std::stod(value); break;
    case SweepAxis::clients: config.clients = std::stoul(value); break;
    case SweepAxis::arch: config.heterogeneous_models = value == "hetero"; break;
  }
  return config;
}

struct SweepCell {
  std::string value;
  AttackKind attack = AttackKind::none;
  std::filesystem::path dir;
  double final_mean_acc = 0.0;
};

struct SweepResult {
  SweepAxis axis = SweepAxis::ratio;
  std::vector<std::string> values;
  std::vector<AttackKind> attacks;
  std::vector<SweepCell> cells;  // value-major, attack-minor

  double accuracy(std::size_t value_index, std::size_t attack_index) const {
    return cells[value_index * attacks.size() + attack_index].final_mean_acc;
  }
};

namespace detail {

// Indices of the lowest and second-lowest entries among the candidates.
inline std::pair<std::optional<std::size_t>, std::optional<std::size_t>> two_lowest(
    const std::vector<double>& column, const std::vector<std::size_t>& candidates) {
  std::vector<std::size_t> order = candidates;
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return column[a] < column[b]; });
  std::optional<std::size_t> lowest;
  std::optional<std::size_t> second;
  if (!order.empty()) lowest = order[0];
  if (order.size() > 1) second = order[1];
  return {lowest, second};
}

}  // namespace detail

/// One row per attack, one column per axis value plus the row average.
/// Markers are computed among the poisoning attacks (the clean baseline is
/// excluded whenever any attack is present).
inline std::string summary_csv(const SweepResult& sweep) {
  const std::size_t n_attacks = sweep.attacks.size();
  std::vector<std::string> columns;
  for (const auto& v : sweep.values) columns.push_back(std::string(to_string(sweep.axis)) + "=" + v);
  columns.emplace_back("avg");

  std::vector<std::vector<double>> table(n_attacks, std::vector<double>(columns.size(), 0.0));
  for (std::size_t a = 0; a < n_attacks; ++a) {
    double sum = 0.0;
    for (std::size_t v = 0; v < sweep.values.size(); ++v) {
      table[a][v] = sweep.accuracy(v, a);
      sum += table[a][v];
    }
    table[a].back() = sum / static_cast<double>(sweep.values.size());
  }

  std::vector<std::size_t> candidates;
  for (std::size_t a = 0; a < n_attacks; ++a) {
    if (sweep.attacks[a] != AttackKind::none) candidates.push_back(a);
  }
  if (candidates.empty()) {
    for (std::size_t a = 0; a < n_attacks; ++a) candidates.push_back(a);
  }
  std::vector<std::vector<std::string>> lowest_in(n_attacks), second_in(n_attacks);
  for (std::size_t col = 0; col < columns.size(); ++col) {
    std::vector<double> column;
    for (std::size_t a = 0; a < n_attacks; ++a) column.push_back(table[a][col]);
    auto [lo, second] = detail::two_lowest(column, candidates);
    if (lo) lowest_in[*lo].push_back(columns[col]);
    if (second) second_in[*second].push_back(columns[col]);
  }

  auto join = [](const std::vector<std::string>& parts) {
    std::string out;
    for (std::size_t i = 0; i < parts.size(); ++i) out += (i ? ";" : "") + parts[i];
    return out;
  };
  std::ostringstream out;
  out << "attack";
  for (const auto& c : columns) out << ',' << c;
  out << ",lowest_in,second_lowest_in\n";
  for (std::size_t a = 0; a < n_attacks; ++a) {
    out << to_string(sweep.attacks[a]);
    for (double v : table[a]) out << ',' << detail::format_double(v);
    out << ',' << join(lowest_in[a]) << ',' << join(second_in[a]) << '\n';
  }
  return out.str();
}

inline nlohmann::ordered_json sweep_manifest(const SweepResult& sweep) {
  nlohmann::ordered_json doc;
  doc["axis"] = std::string(to_string(sweep.axis));
  doc["values"] = sweep.values;
  auto attacks = nlohmann::ordered_json::array();
  for (auto a : sweep.attacks) attacks.push_back(std::string(to_string(a)));
  doc["attacks"] = attacks;
  auto cells = nlohmann::ordered_json::array();
  for (const auto& c : sweep.cells) {
    cells.push_back({{"value", c.value},
                     {"attack", std::string(to_string(c.attack))},
                     {"dir", c.dir.lexically_relative(c.dir.parent_path().parent_path()).string()}});
  }
  doc["cells"] = cells;
  return doc;
}

inline void write_text(const std::string& text, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out << text;
  if (!out) throw IoError("failed writing " + path.string());
}

/// Runs every (axis value, attack) cell with the base config's seeds, so cells
/// differ only in the swept knob and the attack. Cells run on up to `jobs`
/// threads; the summary is written after all of them finish.
inline SweepResult sweep(const ExperimentConfig& base, SweepAxis axis,
                         const std::vector<AttackKind>& attacks, std::size_t jobs = 1,
                         const std::function<void(const SweepCell&)>& on_cell = {}) {
  validate(base);
  if (attacks.empty()) throw ConfigError("sweep: attack list is empty");
  SweepResult result;
  result.axis = axis;
  result.values = sweep_values(axis);
  result.attacks = attacks;

  const std::filesystem::path root = base.output_dir;
  std::vector<ExperimentConfig> configs;
  for (const auto& value : result.values) {
    for (auto attack : attacks) {
      auto config = apply_axis(base, axis, value);
      config.attack = attack;
      if (axis != SweepAxis::ratio && attack != AttackKind::none && config.poison_ratio == 0.0) {
        config.poison_ratio = 0.2;
      }
      const auto dir = root / (std::string(to_string(axis)) + "_" + value) / std::string(to_string(attack));
      config.output_dir = dir.string();
      validate(config);
      configs.push_back(config);
      result.cells.push_back({value, attack, dir, 0.0});
    }
  }

  std::atomic<std::size_t> next{0};
  std::mutex guard;
  std::exception_ptr failure;
  auto worker = [&] {
    while (true) {
      const std::size_t i = next.fetch_add(1);
      if (i >= configs.size()) return;
      try {
        const auto run_result = run(configs[i]);
        std::lock_guard lock(guard);
        result.cells[i].final_mean_acc = run_result.series.final_mean();
        if (on_cell) on_cell(result.cells[i]);
      } catch (...) {
        std::lock_guard lock(guard);
        if (!failure) failure = std::current_exception();
        next = configs.size();
      }
    }
  };
  const std::size_t threads = std::clamp<std::size_t>(jobs, 1, configs.size());
  std::vector<std::thread> pool;
  for (std::size_t t = 1; t < threads; ++t) pool.emplace_back(worker);
  worker();
  for (auto& t : pool) t.join();
  if (failure) std::rethrow_exception(failure);

  write_text(summary_csv(result), root / "summary.csv");
  write_json(sweep_manifest(result), root / "sweep.json");
  return result;
}

// ---------------------------------------------------------------------------

inline nlohmann::ordered_json read_json_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  try {
    return nlohmann::ordered_json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw ParseError(path.string() + ": " + e.what());
  }
}

/// Rebuilds summary.csv of a sweep directory from its cells' experiment.json.
inline std::string resummarize_sweep(const std::filesystem::path& root) {
  const auto manifest = read_json_file(root / "sweep.json");
  SweepResult sweep;
  sweep.axis = parse_sweep_axis(manifest.at("axis").get<std::string>());
  sweep.values = manifest.at("values").get<std::vector<std::string>>();
  for (const auto& a : manifest.at("attacks")) sweep.attacks.push_back(parse_attack_kind(a.get<std::string>()));
  for (const auto& c : manifest.at("cells")) {
    SweepCell cell;
    cell.value = c.at("value").get<std::string>();
    cell.attack = parse_attack_kind(c.at("attack").get<std::string>());
    cell.dir = root / c.at("dir").get<std::string>();
    const auto doc = read_json_file(cell.dir / "experiment.json");
    cell.final_mean_acc = doc.at("summary").at("final_mean_acc").get<double>();
    sweep.cells.push_back(std::move(cell));
  }
  if (sweep.cells.size() != sweep.values.size() * sweep.attacks.size()) {
    throw ParseError((root / "sweep.json").string() + ": cell count does not match the grid");
  }
  auto text = summary_csv(sweep);
  write_text(text, root / "summary.csv");
  return text;
}

/// One CSV row per experiment.json found under the given directories. Sweep
/// roots also get their summary.csv regenerated.
inline std::string report_directories(const std::vector<std::filesystem::path>& dirs) {
  std::vector<std::filesystem::path> found;
  for (const auto& dir : dirs) {
    if (!std::filesystem::is_directory(dir)) throw IoError("not a directory: " + dir.string());
    if (std::filesystem::exists(dir / "sweep.json")) resummarize_sweep(dir);
    if (std::filesystem::exists(dir / "experiment.json")) found.push_back(dir / "experiment.json");
    for (const auto& entry : std::filesystem::recursive_directory_iterator(dir)) {
      if (entry.is_regular_file() && entry.path().filename() == "experiment.json" &&
          entry.path().parent_path() != dir) {
        found.push_back(entry.path());
      }
    }
  }
  std::sort(found.begin(), found.end());
  std::ostringstream out;
  out << "dir,protocol,attack,poison_ratio,alpha,clients,heterogeneous_models,rounds,"
         "final_mean_acc,ratio_top2\n";
  for (const auto& path : found) {
    const auto doc = read_json_file(path);
    const auto& cfg = doc.at("config");
    const auto& summary = doc.at("summary");
    const auto& mis = doc.at("misleading").at(0).at("ratio_top2");
    out << path.parent_path().string() << ',' << cfg.at("protocol").get<std::string>() << ','
        << cfg.at("attack").get<std::string>() << ','
        << detail::format_double(cfg.at("poison_ratio").get<double>()) << ','
        << detail::format_double(cfg.at("alpha").get<double>()) << ','
        << cfg.at("clients").get<std::size_t>() << ','
        << (cfg.at("heterogeneous_models").get<bool>() ? "true" : "false") << ','
        << summary.at("rounds").get<std::size_t>() << ','
        << detail::format_double(summary.at("final_mean_acc").get<double>()) << ','
        << (mis.is_null() ? std::string("inf") : detail::format_double(mis.get<double>())) << '\n';
  }
  return out.str();
}

}  // namespace fdla
