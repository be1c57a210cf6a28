#pragma once

// Datasets: synthetic Gaussian blobs, IDX/CSV ingestion, per-class Dirichlet
// partitioning across clients, and projection hashes for the knowledge cache.

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <numeric>
#include <random>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "fdla/error.hpp"
#include "fdla/nn.hpp"

namespace fdla {

enum class Split { train, test };

struct Dataset {
  Matrix features;                  // N x d
  std::vector<std::size_t> labels;  // length N
  std::size_t n_classes = 0;
  Split split = Split::train;

  std::size_t size() const noexcept { return labels.size(); }
  std::size_t dim() const noexcept { return features.cols(); }

  bool operator==(const Dataset&) const = default;
};

inline void validate(const Dataset& data) {
  if (data.size() == 0) throw InputError("dataset is empty");
  if (data.features.rows() != data.size()) {
    throw InputError("dataset has " + std::to_string(data.features.rows()) + " feature rows for " +
                     std::to_string(data.size()) + " labels");
  }
  if (data.n_classes == 0) throw InputError("dataset declares zero classes");
  for (std::size_t i = 0; i < data.size(); ++i) {
    if (data.labels[i] >= data.n_classes) {
      throw InputError("sample " + std::to_string(i) + " has label " +
                       std::to_string(data.labels[i]) + " >= n_classes " +
                       std::to_string(data.n_classes));
    }
  }
  if (!data.features.all_finite()) throw InputError("dataset contains non-finite features");
}

inline Dataset subset(const Dataset& data, std::span<const std::size_t> indices) {
  Dataset out;
  out.features = select_rows(data.features, indices);
  out.labels.reserve(indices.size());
  for (auto i : indices) out.labels.push_back(data.labels[i]);
  out.n_classes = data.n_classes;
  out.split = data.split;
  return out;
}

inline std::vector<std::size_t> class_histogram(const Dataset& data,
                                                std::span<const std::size_t> indices) {
  std::vector<std::size_t> counts(data.n_classes, 0);
  for (auto i : indices) ++counts[data.labels[i]];
  return counts;
}

inline std::vector<std::size_t> class_histogram(const Dataset& data) {
  std::vector<std::size_t> counts(data.n_classes, 0);
  for (auto label : data.labels) ++counts[label];
  return counts;
}

/// Per-class feature means (rows = classes). Classes without samples stay zero.
inline Matrix class_centroids(const Dataset& data) {
  Matrix centroids(data.n_classes, data.dim());
  auto counts = class_histogram(data);
  for (std::size_t i = 0; i < data.size(); ++i) {
    auto row = data.features.row(i);
    auto c = centroids.row(data.labels[i]);
    for (std::size_t j = 0; j < row.size(); ++j) c[j] += row[j];
  }
  for (std::size_t k = 0; k < data.n_classes; ++k) {
    if (counts[k] == 0) continue;
    for (double& v : centroids.row(k)) v /= static_cast<double>(counts[k]);
  }
  return centroids;
}

struct SyntheticSpec {
  std::size_t n_classes = 10;
  std::size_t per_class = 100;
  std::size_t dim = 16;
  double separation = 3.0;
  std::uint64_t seed = 0;
};

/// Isotropic noise around each class mean.
inline constexpr double kSyntheticNoiseStd = 0.4;

/// Gaussian blobs. Class means are `separation` times random unit directions,
/// so pairwise mean distances scale linearly with separation. Each class is
/// split 80/20 into train/test; both splits are shuffled.
inline std::pair<Dataset, Dataset> generate_synthetic(const SyntheticSpec& spec) {
  if (spec.n_classes == 0 || spec.dim == 0) {
    throw ConfigError("synthetic: n_classes and dim must be positive");
  }
  if (spec.per_class < 2) throw ConfigError("synthetic: per_class must be at least 2");
  if (!(spec.separation >= 0.0)) throw ConfigError("synthetic: separation must be >= 0");

  Rng rng(spec.seed);
  std::normal_distribution<double> normal(0.0, 1.0);

  Matrix means(spec.n_classes, spec.dim);
  for (std::size_t c = 0; c < spec.n_classes; ++c) {
    auto m = means.row(c);
    double norm = 0.0;
    do {
      norm = 0.0;
      for (double& v : m) {
        v = normal(rng);
        norm += v * v;
      }
    } while (norm == 0.0);
    norm = std::sqrt(norm);
    for (double& v : m) v = spec.separation * v / norm;
  }

  const std::size_t n_train = std::clamp<std::size_t>(
      static_cast<std::size_t>(std::llround(0.8 * static_cast<double>(spec.per_class))), 1,
      spec.per_class - 1);

  std::vector<std::pair<std::vector<double>, std::size_t>> train_rows;
  std::vector<std::pair<std::vector<double>, std::size_t>> test_rows;
  for (std::size_t c = 0; c < spec.n_classes; ++c) {
    for (std::size_t s = 0; s < spec.per_class; ++s) {
      std::vector<double> x(spec.dim);
      for (std::size_t j = 0; j < spec.dim; ++j) {
        x[j] = means(c, j) + kSyntheticNoiseStd * normal(rng);
      }
      (s < n_train ? train_rows : test_rows).emplace_back(std::move(x), c);
    }
  }
  std::shuffle(train_rows.begin(), train_rows.end(), rng);
  std::shuffle(test_rows.begin(), test_rows.end(), rng);

  auto build = [&](const auto& rows, Split split) {
    Dataset d;
    d.features = Matrix(rows.size(), spec.dim);
    for (std::size_t i = 0; i < rows.size(); ++i) {
      std::copy(rows[i].first.begin(), rows[i].first.end(), d.features.row(i).begin());
      d.labels.push_back(rows[i].second);
    }
    d.n_classes = spec.n_classes;
    d.split = split;
    return d;
  };
  return {build(train_rows, Split::train), build(test_rows, Split::test)};
}

inline std::pair<Dataset, Dataset> generate_synthetic(std::size_t n_classes, std::size_t per_class,
                                                      std::size_t dim, double separation,
                                                      std::uint64_t seed) {
  return generate_synthetic(SyntheticSpec{n_classes, per_class, dim, separation, seed});
}

// ---------------------------------------------------------------------------
// IDX (MNIST) format: 0x00 0x00 <type> <ndims>, big-endian u32 dims, payload.
// Only the unsigned-byte type (0x08) is supported.

struct IdxArray {
  std::vector<std::uint32_t> dims;
  std::vector<std::uint8_t> data;
};

inline IdxArray read_idx(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open IDX file " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                                  std::istreambuf_iterator<char>());
  auto fail = [&](std::size_t offset, const std::string& why) {
    return ParseError(path.string() + ": byte offset " + std::to_string(offset) + ": " + why);
  };
  if (bytes.size() < 4) throw fail(bytes.size(), "truncated magic number");
  if (bytes[0] != 0 || bytes[1] != 0) throw fail(0, "magic number must start with two zero bytes");
  if (bytes[2] != 0x08) throw fail(2, "unsupported element type (only unsigned byte 0x08)");
  const std::size_t ndims = bytes[3];
  if (ndims == 0) throw fail(3, "zero dimensions");
  IdxArray array;
  std::size_t offset = 4;
  std::size_t count = 1;
  for (std::size_t d = 0; d < ndims; ++d) {
    if (offset + 4 > bytes.size()) throw fail(offset, "truncated dimension header");
    const std::uint32_t dim = (std::uint32_t{bytes[offset]} << 24) |
                              (std::uint32_t{bytes[offset + 1]} << 16) |
                              (std::uint32_t{bytes[offset + 2]} << 8) | bytes[offset + 3];
    array.dims.push_back(dim);
    count *= dim;
    offset += 4;
  }
  if (bytes.size() - offset != count) {
    throw fail(offset, "payload holds " + std::to_string(bytes.size() - offset) +
                           " bytes, header declares " + std::to_string(count));
  }
  array.data.assign(bytes.begin() + static_cast<std::ptrdiff_t>(offset), bytes.end());
  return array;
}

inline void write_idx(const std::filesystem::path& path, const IdxArray& array) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write IDX file " + path.string());
  std::vector<std::uint8_t> header{0, 0, 0x08, static_cast<std::uint8_t>(array.dims.size())};
  for (auto dim : array.dims) {
    header.push_back(static_cast<std::uint8_t>(dim >> 24));
    header.push_back(static_cast<std::uint8_t>(dim >> 16));
    header.push_back(static_cast<std::uint8_t>(dim >> 8));
    header.push_back(static_cast<std::uint8_t>(dim));
  }
  out.write(reinterpret_cast<const char*>(header.data()), static_cast<std::streamsize>(header.size()));
  out.write(reinterpret_cast<const char*>(array.data.data()),
            static_cast<std::streamsize>(array.data.size()));
  if (!out) throw IoError("failed writing IDX file " + path.string());
}

/// Images file (N x rows x cols ...) plus a labels file (N). Pixels are scaled
/// to [0,1]. `n_classes` = 0 infers max label + 1.
inline Dataset load_idx(const std::filesystem::path& images_path,
                        const std::filesystem::path& labels_path, Split split = Split::train,
                        std::size_t n_classes = 0) {
  const auto images = read_idx(images_path);
  const auto labels = read_idx(labels_path);
  if (labels.dims.size() != 1) {
    throw ParseError(labels_path.string() + ": byte offset 3: labels file must be one-dimensional");
  }
  const std::size_t n = images.dims[0];
  if (labels.dims[0] != n) {
    throw ParseError(labels_path.string() + ": byte offset 4: " + std::to_string(labels.dims[0]) +
                     " labels for " + std::to_string(n) + " images");
  }
  if (n == 0) throw ParseError(images_path.string() + ": byte offset 4: no samples");
  const std::size_t d = images.data.size() / n;

  Dataset out;
  out.split = split;
  out.features = Matrix(n, d);
  auto values = out.features.values();
  for (std::size_t i = 0; i < values.size(); ++i) values[i] = images.data[i] / 255.0;
  std::size_t max_label = 0;
  for (auto l : labels.data) {
    out.labels.push_back(l);
    max_label = std::max<std::size_t>(max_label, l);
  }
  out.n_classes = n_classes == 0 ? max_label + 1 : n_classes;
  for (std::size_t i = 0; i < n; ++i) {
    if (out.labels[i] >= out.n_classes) {
      throw ParseError(labels_path.string() + ": byte offset " +
                       std::to_string(4 + 4 * labels.dims.size() + i) + ": label " +
                       std::to_string(out.labels[i]) + " out of range");
    }
  }
  return out;
}

/// Writes features as bytes (round(v * 255), clamped) and labels as a 1-D file.
inline void export_idx(const Dataset& data, const std::filesystem::path& images_path,
                       const std::filesystem::path& labels_path) {
  IdxArray images{{static_cast<std::uint32_t>(data.size()), static_cast<std::uint32_t>(data.dim())},
                  {}};
  images.data.reserve(data.features.size());
  for (double v : data.features.values()) {
    images.data.push_back(static_cast<std::uint8_t>(std::clamp(std::lround(v * 255.0), 0L, 255L)));
  }
  IdxArray labels{{static_cast<std::uint32_t>(data.size())}, {}};
  for (auto l : data.labels) {
    if (l > 255) throw InputError("export_idx: label does not fit in a byte");
    labels.data.push_back(static_cast<std::uint8_t>(l));
  }
  write_idx(images_path, images);
  write_idx(labels_path, labels);
}

// ---------------------------------------------------------------------------
// CSV: header row, one `label` column, every other column a numeric feature.

struct CsvSchema {
  std::string label_column = "label";
  std::size_t n_classes = 0;  // 0: infer max label + 1
  bool scale = true;          // min-max each column into [0,1] unless already inside it
  Split split = Split::train;
};

namespace detail {

inline std::vector<std::string_view> split_csv_line(std::string_view line) {
  std::vector<std::string_view> cells;
  std::size_t start = 0;
  while (true) {
    auto comma = line.find(',', start);
    cells.push_back(line.substr(start, comma == std::string_view::npos ? comma : comma - start));
    if (comma == std::string_view::npos) break;
    start = comma + 1;
  }
  for (auto& cell : cells) {
    while (!cell.empty() && (cell.front() == ' ' || cell.front() == '\t')) cell.remove_prefix(1);
    while (!cell.empty() && (cell.back() == ' ' || cell.back() == '\t' || cell.back() == '\r')) {
      cell.remove_suffix(1);
    }
  }
  return cells;
}

inline std::string format_double(double v) {
  char buf[64];
  auto [end, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, end);
}

}  // namespace detail

inline Dataset load_csv(const std::filesystem::path& path, const CsvSchema& schema = {}) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open CSV file " + path.string());
  auto fail = [&](std::size_t line, const std::string& why) {
    return ParseError(path.string() + ": line " + std::to_string(line) + ": " + why);
  };

  std::string line;
  if (!std::getline(in, line)) throw fail(1, "missing header row");
  const auto header = detail::split_csv_line(line);
  std::size_t label_col = header.size();
  for (std::size_t i = 0; i < header.size(); ++i) {
    if (header[i] == schema.label_column) label_col = i;
  }
  if (label_col == header.size()) {
    throw fail(1, "no '" + schema.label_column + "' column in header");
  }
  const std::size_t d = header.size() - 1;
  if (d == 0) throw fail(1, "no feature columns");

  std::vector<double> values;
  std::vector<std::size_t> labels;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty() || line == "\r") continue;
    const auto cells = detail::split_csv_line(line);
    if (cells.size() != header.size()) {
      throw fail(line_no, "expected " + std::to_string(header.size()) + " fields, found " +
                              std::to_string(cells.size()));
    }
    for (std::size_t i = 0; i < cells.size(); ++i) {
      const auto cell = cells[i];
      if (i == label_col) {
        long long label = -1;
        auto [ptr, ec] = std::from_chars(cell.data(), cell.data() + cell.size(), label);
        if (ec != std::errc() || ptr != cell.data() + cell.size() || label < 0) {
          throw fail(line_no, "label '" + std::string(cell) + "' is not a non-negative integer");
        }
        if (schema.n_classes != 0 && static_cast<std::size_t>(label) >= schema.n_classes) {
          throw fail(line_no, "label " + std::to_string(label) + " out of range for " +
                                  std::to_string(schema.n_classes) + " classes");
        }
        labels.push_back(static_cast<std::size_t>(label));
      } else {
        double v = 0.0;
        auto [ptr, ec] = std::from_chars(cell.data(), cell.data() + cell.size(), v);
        if (ec != std::errc() || ptr != cell.data() + cell.size() || !std::isfinite(v)) {
          throw fail(line_no, "column '" + std::string(header[i]) + "': '" + std::string(cell) +
                                  "' is not a finite number");
        }
        values.push_back(v);
      }
    }
  }
  if (labels.empty()) throw fail(line_no, "no data rows");

  Dataset out;
  out.split = schema.split;
  out.labels = std::move(labels);
  out.features = Matrix(out.labels.size(), d, std::move(values));
  out.n_classes = schema.n_classes != 0
                      ? schema.n_classes
                      : *std::max_element(out.labels.begin(), out.labels.end()) + 1;

  if (schema.scale) {
    for (std::size_t j = 0; j < d; ++j) {
      double lo = INFINITY;
      double hi = -INFINITY;
      for (std::size_t i = 0; i < out.size(); ++i) {
        lo = std::min(lo, out.features(i, j));
        hi = std::max(hi, out.features(i, j));
      }
      if (lo >= 0.0 && hi <= 1.0) continue;
      for (std::size_t i = 0; i < out.size(); ++i) {
        out.features(i, j) = hi > lo ? (out.features(i, j) - lo) / (hi - lo) : 0.0;
      }
    }
  }
  return out;
}

inline void export_csv(const Dataset& data, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write CSV file " + path.string());
  out << "label";
  for (std::size_t j = 0; j < data.dim(); ++j) out << ",f" << j;
  out << '\n';
  for (std::size_t i = 0; i < data.size(); ++i) {
    out << data.labels[i];
    for (double v : data.features.row(i)) out << ',' << detail::format_double(v);
    out << '\n';
  }
  if (!out) throw IoError("failed writing CSV file " + path.string());
}

// ---------------------------------------------------------------------------

struct Partition {
  std::vector<std::vector<std::size_t>> assignments;  // client -> sample indices
  double alpha = 1.0;
  std::uint64_t seed = 0;

  std::size_t clients() const noexcept { return assignments.size(); }
};

/// Label-skewed split: for every class, client shares are drawn from
/// Dirichlet(alpha) and the shuffled class members are cut accordingly.
/// Clients left empty take one sample from the current largest client.
inline Partition dirichlet_partition(const Dataset& data, std::size_t clients, double alpha,
                                     std::uint64_t seed) {
  if (clients == 0) throw ConfigError("partition: client count must be at least 1");
  if (!(alpha > 0.0) || !std::isfinite(alpha)) throw ConfigError("partition: alpha must be > 0");
  if (clients > data.size()) {
    throw ConfigError("partition: " + std::to_string(clients) + " clients exceed " +
                      std::to_string(data.size()) + " samples");
  }

  Rng rng(seed);
  std::gamma_distribution<double> gamma(alpha, 1.0);
  Partition part;
  part.alpha = alpha;
  part.seed = seed;
  part.assignments.resize(clients);

  std::vector<std::vector<std::size_t>> by_class(data.n_classes);
  for (std::size_t i = 0; i < data.size(); ++i) by_class[data.labels[i]].push_back(i);

  std::vector<double> share(clients);
  for (auto& members : by_class) {
    std::shuffle(members.begin(), members.end(), rng);
    double total = 0.0;
    for (double& s : share) {
      s = gamma(rng);
      total += s;
    }
    if (!(total > 0.0)) {
      std::fill(share.begin(), share.end(), 1.0);
      total = static_cast<double>(clients);
    }
    const double n = static_cast<double>(members.size());
    double cumulative = 0.0;
    std::size_t begin = 0;
    for (std::size_t k = 0; k < clients; ++k) {
      cumulative += share[k];
      std::size_t end = k + 1 == clients
                            ? members.size()
                            : std::min(members.size(),
                                       static_cast<std::size_t>(std::floor(cumulative / total * n)));
      end = std::max(end, begin);
      part.assignments[k].insert(part.assignments[k].end(),
                                 members.begin() + static_cast<std::ptrdiff_t>(begin),
                                 members.begin() + static_cast<std::ptrdiff_t>(end));
      begin = end;
    }
  }

  for (std::size_t k = 0; k < clients; ++k) {
    while (part.assignments[k].empty()) {
      auto largest = std::max_element(
          part.assignments.begin(), part.assignments.end(),
          [](const auto& a, const auto& b) { return a.size() < b.size(); });
      part.assignments[k].push_back(largest->back());
      largest->pop_back();
    }
  }
  return part;
}

// ---------------------------------------------------------------------------

/// Unit-norm projection of a sample; identical samples map to identical hashes.
struct SampleHash {
  std::vector<double> values;

  bool operator==(const SampleHash&) const = default;
};

inline constexpr std::size_t kDefaultHashDim = 32;

/// Fixed Gaussian random projection from feature space to `hash_dim`.
class HashProjector {
 public:
  HashProjector(std::uint64_t projection_seed, std::size_t input_dim,
                std::size_t hash_dim = kDefaultHashDim)
      : projection_(hash_dim, input_dim) {
    if (hash_dim < 2) throw ConfigError("hash_dim must be at least 2");
    if (input_dim == 0) throw ConfigError("hash input dimension must be positive");
    Rng rng(projection_seed);
    std::normal_distribution<double> normal(0.0, 1.0);
    for (double& v : projection_.values()) v = normal(rng);
  }

  std::size_t input_dim() const noexcept { return projection_.cols(); }
  std::size_t hash_dim() const noexcept { return projection_.rows(); }

  /// A sample that projects to zero (e.g. the zero vector) hashes to e1.
  SampleHash operator()(std::span<const double> sample) const {
    if (sample.size() != input_dim()) {
      throw InputError("hash: sample has " + std::to_string(sample.size()) +
                       " features, projector expects " + std::to_string(input_dim()));
    }
    SampleHash hash{std::vector<double>(hash_dim(), 0.0)};
    double norm = 0.0;
    for (std::size_t r = 0; r < hash_dim(); ++r) {
      auto p = projection_.row(r);
      double acc = 0.0;
      for (std::size_t j = 0; j < sample.size(); ++j) acc += p[j] * sample[j];
      hash.values[r] = acc;
      norm += acc * acc;
    }
    norm = std::sqrt(norm);
    if (!(norm > 0.0) || !std::isfinite(norm)) {
      std::fill(hash.values.begin(), hash.values.end(), 0.0);
      hash.values[0] = 1.0;
      return hash;
    }
    for (double& v : hash.values) v /= norm;
    return hash;
  }

 private:
  Matrix projection_;
};

inline SampleHash compute_hash(std::span<const double> sample, std::uint64_t projection_seed,
                               std::size_t hash_dim = kDefaultHashDim) {
  return HashProjector(projection_seed, sample.size(), hash_dim)(sample);
}

}  // namespace fdla
