#pragma once

// Accuracy, convergence series, misleading-effect histograms and export.

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "fdla/datasets.hpp"
#include "fdla/error.hpp"
#include "fdla/nn.hpp"
#include "fdla/protocol.hpp"

namespace fdla {

/// Top-1 predictions; argmax ties resolve to the lowest class index.
inline std::vector<std::size_t> predict(const DenseNet& net, const Matrix& features) {
  const Matrix logits = forward(net, features);
  std::vector<std::size_t> out(logits.rows());
  for (std::size_t i = 0; i < logits.rows(); ++i) out[i] = argmax(logits.row(i));
  return out;
}

inline double evaluate(const DenseNet& net, const Dataset& test) {
  if (test.size() == 0) throw InputError("evaluate: empty test set");
  if (test.dim() != net.input_dim()) {
    throw ConfigError("evaluate: test features have width " + std::to_string(test.dim()) +
                      ", network expects " + std::to_string(net.input_dim()));
  }
  const auto predicted = predict(net, test.features);
  std::size_t hits = 0;
  for (std::size_t i = 0; i < predicted.size(); ++i) hits += predicted[i] == test.labels[i];
  return static_cast<double>(hits) / static_cast<double>(test.size());
}

struct ConvergencePoint {
  std::size_t round = 0;
  double mean = 0.0;
  double min = 0.0;
  double max = 0.0;
  std::vector<double> per_client;
};

struct ConvergenceSeries {
  std::vector<ConvergencePoint> points;

  double final_mean() const { return points.empty() ? 0.0 : points.back().mean; }

  /// First round whose mean accuracy reaches `fraction` of the final mean.
  std::optional<std::size_t> first_round_reaching(double fraction) const {
    const double target = fraction * final_mean();
    for (const auto& p : points) {
      if (p.mean >= target) return p.round;
    }
    return std::nullopt;
  }
};

inline ConvergenceSeries convergence_series(std::span<const RoundReport> reports) {
  ConvergenceSeries series;
  for (const auto& r : reports) {
    if (!series.points.empty() && r.round <= series.points.back().round) {
      throw InputError("convergence series: rounds must be strictly increasing");
    }
    if (r.per_client_accuracy.empty()) throw InputError("round report without clients");
    ConvergencePoint p;
    p.round = r.round;
    p.per_client = r.per_client_accuracy;
    double sum = 0.0;
    for (double a : p.per_client) sum += a;
    p.mean = sum / static_cast<double>(p.per_client.size());
    auto [lo, hi] = std::minmax_element(p.per_client.begin(), p.per_client.end());
    p.min = *lo;
    p.max = *hi;
    series.points.push_back(std::move(p));
  }
  return series;
}

/// Where the models send the test samples of one class. `ratio_top2` is the
/// count on the true class over the largest count on any other class; it is
/// empty when no other class received a prediction.
struct MisleadingReport {
  std::size_t target_class = 0;
  std::vector<std::size_t> histogram;                  // pooled over clients
  std::vector<std::vector<std::size_t>> per_client;    // client -> class counts
  std::optional<std::size_t> runner_up_class;
  std::optional<double> ratio_top2;

  std::size_t total() const {
    std::size_t sum = 0;
    for (auto c : histogram) sum += c;
    return sum;
  }
};

inline MisleadingReport misleading_report(std::span<const DenseNet* const> nets, const Dataset& test,
                                          std::size_t target_class) {
  if (target_class >= test.n_classes) {
    throw InputError("misleading_report: target class " + std::to_string(target_class) +
                     " out of range");
  }
  std::vector<std::size_t> rows;
  for (std::size_t i = 0; i < test.size(); ++i) {
    if (test.labels[i] == target_class) rows.push_back(i);
  }
  if (rows.empty()) {
    throw InputError("misleading_report: no test samples of class " + std::to_string(target_class));
  }
  const Matrix samples = select_rows(test.features, rows);

  MisleadingReport report;
  report.target_class = target_class;
  report.histogram.assign(test.n_classes, 0);
  for (const DenseNet* net : nets) {
    std::vector<std::size_t> counts(test.n_classes, 0);
    for (auto p : predict(*net, samples)) ++counts[p];
    for (std::size_t c = 0; c < counts.size(); ++c) report.histogram[c] += counts[c];
    report.per_client.push_back(std::move(counts));
  }
  std::size_t best = 0;
  for (std::size_t c = 0; c < report.histogram.size(); ++c) {
    if (c == target_class) continue;
    if (!report.runner_up_class || report.histogram[c] > best) {
      report.runner_up_class = c;
      best = report.histogram[c];
    }
  }
  if (best == 0) {
    report.runner_up_class.reset();
  } else {
    report.ratio_top2 =
        static_cast<double>(report.histogram[target_class]) / static_cast<double>(best);
  }
  return report;
}

inline MisleadingReport misleading_report(const World& world, std::size_t target_class) {
  std::vector<const DenseNet*> nets;
  for (const auto& c : world.clients) nets.push_back(&c.net);
  return misleading_report(nets, world.test, target_class);
}

/// The two classes whose centroids are closest (lower index first).
inline std::pair<std::size_t, std::size_t> closest_centroid_pair(const Dataset& data) {
  if (data.n_classes < 2) throw InputError("closest_centroid_pair: need at least two classes");
  const Matrix centroids = class_centroids(data);
  double best = std::numeric_limits<double>::infinity();
  std::pair<std::size_t, std::size_t> pair{0, 1};
  for (std::size_t a = 0; a < data.n_classes; ++a) {
    for (std::size_t b = a + 1; b < data.n_classes; ++b) {
      double d2 = 0.0;
      for (std::size_t j = 0; j < data.dim(); ++j) {
        const double diff = centroids(a, j) - centroids(b, j);
        d2 += diff * diff;
      }
      if (d2 < best) {
        best = d2;
        pair = {a, b};
      }
    }
  }
  return pair;
}

// ---------------------------------------------------------------------------
// Export. Doubles use the shortest round-trip representation, so identical
// runs produce byte-identical files.

inline void write_series_csv(const ConvergenceSeries& series, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  const std::size_t clients = series.points.empty() ? 0 : series.points.front().per_client.size();
  out << "round,mean_acc,min_acc,max_acc";
  for (std::size_t k = 0; k < clients; ++k) out << ",client_" << k;
  out << '\n';
  for (const auto& p : series.points) {
    out << p.round << ',' << detail::format_double(p.mean) << ',' << detail::format_double(p.min)
        << ',' << detail::format_double(p.max);
    for (double a : p.per_client) out << ',' << detail::format_double(a);
    out << '\n';
  }
  if (!out) throw IoError("failed writing " + path.string());
}

inline nlohmann::ordered_json to_json(const ConvergenceSeries& series) {
  auto rounds = nlohmann::ordered_json::array();
  for (const auto& p : series.points) {
    rounds.push_back({{"round", p.round},
                      {"mean_acc", p.mean},
                      {"min_acc", p.min},
                      {"max_acc", p.max},
                      {"per_client", p.per_client}});
  }
  return rounds;
}

inline nlohmann::ordered_json to_json(const MisleadingReport& report) {
  nlohmann::ordered_json doc;
  doc["target_class"] = report.target_class;
  doc["histogram"] = report.histogram;
  const double total = static_cast<double>(report.total());
  std::vector<double> normalized;
  for (auto c : report.histogram) normalized.push_back(total > 0 ? c / total : 0.0);
  doc["normalized"] = normalized;
  doc["runner_up_class"] =
      report.runner_up_class ? nlohmann::ordered_json(*report.runner_up_class) : nullptr;
  doc["ratio_top2"] = report.ratio_top2 ? nlohmann::ordered_json(*report.ratio_top2) : nullptr;
  doc["per_client"] = report.per_client;
  return doc;
}

inline void write_misleading_csv(const MisleadingReport& report, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  const double total = static_cast<double>(report.total());
  out << "class,count,fraction\n";
  for (std::size_t c = 0; c < report.histogram.size(); ++c) {
    out << c << ',' << report.histogram[c] << ','
        << detail::format_double(total > 0 ? report.histogram[c] / total : 0.0) << '\n';
  }
  if (!out) throw IoError("failed writing " + path.string());
}

inline void write_json(const nlohmann::ordered_json& doc, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out << doc.dump(2) << '\n';
  if (!out) throw IoError("failed writing " + path.string());
}

}  // namespace fdla
