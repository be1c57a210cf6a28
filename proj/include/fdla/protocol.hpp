#pragma once

// Federated-distillation round engine. Each round: clients extract per-sample
// softmax knowledge, malicious clients poison it, the server aggregates
// (per-class averaging or a per-sample similarity cache), teachers go back to
// every client, clients distill locally, and everyone is evaluated on the
// shared test split.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <map>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "fdla/attacks.hpp"
#include "fdla/config.hpp"
#include "fdla/datasets.hpp"
#include "fdla/error.hpp"
#include "fdla/nn.hpp"

namespace fdla {

/// splitmix64 finalizer; derives per-client streams from one base seed.
inline std::uint64_t derive_seed(std::uint64_t base, std::uint64_t stream) {
  std::uint64_t z = base + 0x9E3779B97F4A7C15ULL * (stream + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

struct ClientState {
  std::size_t id = 0;
  DenseNet net;
  Dataset data;                         // local training data
  std::vector<std::size_t> sample_ids;  // indices into the global training set
  std::vector<SampleHash> hashes;       // aligned with data rows; cache protocol only
  bool malicious = false;
  AttackKind attack = AttackKind::none;
  Rng rng;         // minibatch order
  Rng attack_rng;  // random poisoning draws
};

/// One client's upload: per-sample vectors plus per-class means derived from them.
struct Knowledge {
  std::size_t client_id = 0;
  std::vector<std::size_t> sample_ids;
  std::vector<std::size_t> labels;
  std::vector<ConfidenceVector> per_sample;
  std::vector<ConfidenceVector> class_means;  // empty entry for classes the client lacks
  std::vector<std::size_t> class_counts;
};

/// Rebuilds class means and counts from the per-sample vectors.
inline void recompute_class_means(Knowledge& k, std::size_t n_classes) {
  k.class_means.assign(n_classes, {});
  k.class_counts.assign(n_classes, 0);
  for (std::size_t i = 0; i < k.per_sample.size(); ++i) {
    const auto label = k.labels[i];
    auto& mean = k.class_means[label];
    if (mean.empty()) mean.assign(k.per_sample[i].size(), 0.0);
    for (std::size_t c = 0; c < mean.size(); ++c) mean[c] += k.per_sample[i][c];
    ++k.class_counts[label];
  }
  for (std::size_t label = 0; label < n_classes; ++label) {
    if (k.class_counts[label] == 0) continue;
    for (double& v : k.class_means[label]) v /= static_cast<double>(k.class_counts[label]);
  }
}

/// Honest knowledge: softmax outputs over the whole local training set.
inline Knowledge extract_knowledge(const ClientState& client) {
  if (client.data.size() == 0) {
    throw ConfigError("client " + std::to_string(client.id) + " has no local data");
  }
  Knowledge k;
  k.client_id = client.id;
  k.sample_ids = client.sample_ids;
  k.labels = client.data.labels;
  const Matrix probs = softmax_rows(forward(client.net, client.data.features));
  k.per_sample.reserve(probs.rows());
  for (std::size_t r = 0; r < probs.rows(); ++r) {
    k.per_sample.emplace_back(probs.row(r).begin(), probs.row(r).end());
  }
  recompute_class_means(k, client.data.n_classes);
  return k;
}

/// Applies the attack to every per-sample vector, then refreshes the means so
/// both aggregation modes see the same poison.
inline Knowledge poison_upload(Knowledge honest, AttackKind kind, Rng& rng) {
  if (kind == AttackKind::none) return honest;
  honest.per_sample = apply_attack(honest.per_sample, kind, rng);
  recompute_class_means(honest, honest.class_means.size());
  return honest;
}

/// What client k actually sends: honest extraction, poisoned if malicious.
inline Knowledge prepare_upload(ClientState& client) {
  auto k = extract_knowledge(client);
  if (client.malicious) return poison_upload(std::move(k), client.attack, client.attack_rng);
  return k;
}

// ---------------------------------------------------------------------------

/// Per-class global knowledge; an empty target marks a class nobody uploaded.
using ClassTable = std::vector<TeacherTarget>;

/// Uniform mean of the contributing uploads' class means, per class.
/// With `exclude_self` every recipient gets its own table built from the
/// other clients' uploads only.
struct FdAggregate {
  bool exclude_self = false;
  ClassTable shared;
  std::map<std::size_t, ClassTable> per_recipient;

  const ClassTable& table_for(std::size_t client_id) const {
    if (!exclude_self) return shared;
    auto it = per_recipient.find(client_id);
    if (it == per_recipient.end()) {
      throw InputError("no aggregate for client " + std::to_string(client_id));
    }
    return it->second;
  }
};

namespace detail {

inline ClassTable average_class_means(std::span<const Knowledge> uploads, std::size_t n_classes,
                                      std::optional<std::size_t> skip_client) {
  ClassTable table(n_classes);
  std::vector<std::size_t> contributors(n_classes, 0);
  for (const auto& upload : uploads) {
    if (skip_client && upload.client_id == *skip_client) continue;
    for (std::size_t c = 0; c < n_classes && c < upload.class_counts.size(); ++c) {
      if (upload.class_counts[c] == 0) continue;
      const auto& mean = upload.class_means[c];
      if (!table[c]) table[c] = ConfidenceVector(mean.size(), 0.0);
      for (std::size_t j = 0; j < mean.size(); ++j) (*table[c])[j] += mean[j];
      ++contributors[c];
    }
  }
  for (std::size_t c = 0; c < n_classes; ++c) {
    if (!table[c]) continue;
    for (double& v : *table[c]) v /= static_cast<double>(contributors[c]);
  }
  return table;
}

}  // namespace detail

inline FdAggregate aggregate_fd(std::span<const Knowledge> uploads, std::size_t n_classes,
                                bool exclude_self = false) {
  if (uploads.empty()) throw InputError("aggregate_fd: no uploads");
  FdAggregate out;
  out.exclude_self = exclude_self;
  if (!exclude_self) {
    out.shared = detail::average_class_means(uploads, n_classes, std::nullopt);
  } else {
    for (const auto& upload : uploads) {
      out.per_recipient[upload.client_id] =
          detail::average_class_means(uploads, n_classes, upload.client_id);
    }
  }
  return out;
}

inline double cosine_similarity(std::span<const double> a, std::span<const double> b) {
  double dot = 0.0;
  double na = 0.0;
  double nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    dot += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  if (na == 0.0 || nb == 0.0) return 0.0;
  return dot / std::sqrt(na * nb);
}

struct CacheEntry {
  SampleHash hash;
  std::size_t owner = 0;
  std::size_t sample_id = 0;
  ConfidenceVector value;
};

/// Server-side per-sample knowledge cache. Each (owner, sample) pair holds the
/// latest upload; fetches average the R most cosine-similar entries owned by
/// other clients, found by exhaustive search.
class KnowledgeCache {
 public:
  void update(const Knowledge& upload, std::span<const SampleHash> hashes) {
    if (hashes.size() != upload.per_sample.size()) {
      throw InputError("cache_update: " + std::to_string(hashes.size()) + " hashes for " +
                       std::to_string(upload.per_sample.size()) + " samples");
    }
    for (std::size_t i = 0; i < hashes.size(); ++i) {
      const auto key = std::make_pair(upload.client_id, upload.sample_ids[i]);
      auto it = index_.find(key);
      if (it == index_.end()) {
        index_.emplace(key, entries_.size());
        entries_.push_back({hashes[i], upload.client_id, upload.sample_ids[i], upload.per_sample[i]});
      } else {
        auto& entry = entries_[it->second];
        entry.hash = hashes[i];
        entry.value = upload.per_sample[i];
      }
    }
  }

  /// Entry indices of the up-to-R most similar foreign entries, most similar
  /// first; equal similarity keeps insertion order.
  std::vector<std::size_t> nearest(const SampleHash& query, std::size_t owner,
                                   std::size_t neighbors) const {
    if (neighbors < 1) throw ConfigError("cache_fetch: R must be at least 1");
    std::vector<std::pair<double, std::size_t>> scored;
    scored.reserve(entries_.size());
    for (std::size_t i = 0; i < entries_.size(); ++i) {
      if (entries_[i].owner == owner) continue;
      scored.emplace_back(cosine_similarity(query.values, entries_[i].hash.values), i);
    }
    const std::size_t keep = std::min(neighbors, scored.size());
    auto better = [](const auto& a, const auto& b) {
      return a.first > b.first || (a.first == b.first && a.second < b.second);
    };
    std::partial_sort(scored.begin(), scored.begin() + static_cast<std::ptrdiff_t>(keep),
                      scored.end(), better);
    std::vector<std::size_t> out;
    out.reserve(keep);
    for (std::size_t i = 0; i < keep; ++i) out.push_back(scored[i].second);
    return out;
  }

  TeacherTarget fetch(const SampleHash& query, std::size_t owner, std::size_t neighbors) const {
    const auto hits = nearest(query, owner, neighbors);
    if (hits.empty()) return std::nullopt;
    ConfidenceVector mean(entries_[hits.front()].value.size(), 0.0);
    for (auto i : hits) {
      for (std::size_t j = 0; j < mean.size(); ++j) mean[j] += entries_[i].value[j];
    }
    for (double& v : mean) v /= static_cast<double>(hits.size());
    return mean;
  }

  const std::vector<CacheEntry>& entries() const noexcept { return entries_; }
  std::size_t size() const noexcept { return entries_.size(); }

 private:
  std::vector<CacheEntry> entries_;
  std::map<std::pair<std::size_t, std::size_t>, std::size_t> index_;
};

// ---------------------------------------------------------------------------

struct TrainingParams {
  double beta = 4.0;
  double temperature = 1.0;
  double lr = 0.1;
  std::size_t local_epochs = 3;
  std::size_t batch_size = 32;
};

struct LocalUpdateResult {
  LossBreakdown loss;  // local objective on the full local set after training
  bool diverged = false;
};

/// Minibatch SGD on the local objective. `teachers` is aligned with the
/// client's samples. A non-finite step stops the client for this round and
/// leaves the last finite parameters in place.
inline LocalUpdateResult local_update(ClientState& client, std::span<const TeacherTarget> teachers,
                                      const TrainingParams& params) {
  const std::size_t n = client.data.size();
  if (teachers.size() != n) {
    throw InputError("local_update: " + std::to_string(teachers.size()) + " teachers for " +
                     std::to_string(n) + " samples");
  }
  if (params.batch_size < 1) throw ConfigError("local_update: batch_size must be at least 1");

  LocalUpdateResult result;
  std::vector<std::size_t> order(n);
  for (std::size_t e = 0; e < params.local_epochs && !result.diverged; ++e) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::shuffle(order.begin(), order.end(), client.rng);
    for (std::size_t start = 0; start < n; start += params.batch_size) {
      const std::size_t end = std::min(n, start + params.batch_size);
      std::span<const std::size_t> rows(order.data() + start, end - start);
      const Matrix batch = select_rows(client.data.features, rows);
      std::vector<std::size_t> labels;
      std::vector<TeacherTarget> targets;
      for (auto r : rows) {
        labels.push_back(client.data.labels[r]);
        targets.push_back(teachers[r]);
      }
      try {
        client.net = backward_and_step(client.net, batch, labels, targets, params.beta,
                                       params.temperature, params.lr);
      } catch (const NumericError&) {
        result.diverged = true;
        break;
      }
    }
  }
  if (!result.diverged) {
    try {
      result.loss = local_objective(client.net, client.data.features, client.data.labels, teachers,
                                    params.beta, params.temperature);
      result.diverged = !std::isfinite(result.loss.total);
    } catch (const NumericError&) {
      result.diverged = true;
    }
  }
  return result;
}

// ---------------------------------------------------------------------------

struct RoundReport {
  std::size_t round = 0;  // 1-based
  std::vector<double> per_client_accuracy;
  double mean_accuracy = 0.0;
  std::vector<LossBreakdown> losses;
  std::vector<std::size_t> diverged_clients;
  std::size_t renormalized_teachers = 0;  // teacher vectors that needed normalizing
};

struct ProtocolParams {
  ProtocolKind kind = ProtocolKind::fd_avg;
  TrainingParams training;
  std::size_t neighbors = 16;
  bool exclude_self = false;
};

struct World {
  ProtocolParams params;
  std::vector<ClientState> clients;
  Dataset test;
  std::size_t n_classes = 0;
  KnowledgeCache cache;
  std::size_t round = 0;
};

/// Teacher per local sample: the class aggregate for the sample's label
/// (fd_avg) or the cache's neighbour average for the sample's hash.
inline std::vector<TeacherTarget> teachers_for(const ClientState& client, const World& world,
                                               const FdAggregate* fd) {
  std::vector<TeacherTarget> teachers;
  teachers.reserve(client.data.size());
  if (world.params.kind == ProtocolKind::fd_avg) {
    const auto& table = fd->table_for(client.id);
    for (auto label : client.data.labels) teachers.push_back(table[label]);
  } else {
    for (const auto& hash : client.hashes) {
      teachers.push_back(world.cache.fetch(hash, client.id, world.params.neighbors));
    }
  }
  return teachers;
}

inline double accuracy(const DenseNet& net, const Dataset& data) {
  const Matrix logits = forward(net, data.features);
  std::size_t hits = 0;
  for (std::size_t i = 0; i < data.size(); ++i) {
    if (argmax(logits.row(i)) == data.labels[i]) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(data.size());
}

/// One synchronous round; see the file comment for the phase order.
inline RoundReport run_round(World& world) {
  ++world.round;
  const std::string where = "round " + std::to_string(world.round);

  std::vector<Knowledge> uploads;
  uploads.reserve(world.clients.size());
  for (auto& client : world.clients) {
    try {
      uploads.push_back(prepare_upload(client));
    } catch (const Error& e) {
      throw Error(e.kind(), where + ", client " + std::to_string(client.id) + ": " + e.what());
    }
  }

  std::optional<FdAggregate> fd;
  if (world.params.kind == ProtocolKind::fd_avg) {
    fd = aggregate_fd(uploads, world.n_classes, world.params.exclude_self);
  } else {
    for (std::size_t k = 0; k < uploads.size(); ++k) {
      world.cache.update(uploads[k], world.clients[k].hashes);
    }
  }

  RoundReport report;
  report.round = world.round;
  for (auto& client : world.clients) {
    try {
      const auto teachers = teachers_for(client, world, fd ? &*fd : nullptr);
      for (const auto& t : teachers) {
        if (t && normalize_teacher(*t).adjusted) ++report.renormalized_teachers;
      }
      const auto result = local_update(client, teachers, world.params.training);
      report.losses.push_back(result.loss);
      if (result.diverged) report.diverged_clients.push_back(client.id);
      report.per_client_accuracy.push_back(accuracy(client.net, world.test));
    } catch (const Error& e) {
      throw Error(e.kind(), where + ", client " + std::to_string(client.id) + ": " + e.what());
    }
  }
  double sum = 0.0;
  for (double a : report.per_client_accuracy) sum += a;
  report.mean_accuracy = sum / static_cast<double>(report.per_client_accuracy.size());
  return report;
}

/// Builds clients from a partition: model per client (A1, or A_{(k mod 3)+1}
/// with heterogeneous models), malicious flags, per-client RNG streams and,
/// for the cache protocol, sample hashes.
inline World build_world(const ExperimentConfig& config, const Dataset& train, const Dataset& test,
                         const Partition& partition, const AttackAssignment& attackers) {
  validate(train);
  validate(test);
  if (train.dim() != test.dim()) throw ConfigError("train and test feature widths differ");
  World world;
  world.params.kind = config.protocol;
  world.params.training = {config.beta, config.temperature, config.lr, config.local_epochs,
                           config.batch_size};
  world.params.neighbors = config.neighbors;
  world.params.exclude_self = config.exclude_self;
  world.test = test;
  world.n_classes = std::max(train.n_classes, test.n_classes);

  std::optional<HashProjector> projector;
  if (config.protocol == ProtocolKind::cache) {
    projector.emplace(derive_seed(config.data_seed, 0x4A5F), train.dim(), config.hash_dim);
  }

  for (std::size_t k = 0; k < partition.clients(); ++k) {
    ClientState client;
    client.id = k;
    client.sample_ids = partition.assignments[k];
    client.data = subset(train, client.sample_ids);
    client.data.n_classes = world.n_classes;
    client.net = make_model(arch_for_client(k, config.heterogeneous_models), train.dim(),
                            world.n_classes, derive_seed(config.model_seed, k));
    client.malicious = attackers.is_malicious(k);
    client.attack = client.malicious ? config.attack : AttackKind::none;
    client.rng.seed(derive_seed(config.training_seed, k));
    client.attack_rng.seed(derive_seed(config.attack_seed, k));
    if (projector) {
      for (std::size_t r = 0; r < client.data.size(); ++r) {
        client.hashes.push_back((*projector)(client.data.features.row(r)));
      }
    }
    world.clients.push_back(std::move(client));
  }
  return world;
}

using RoundCallback = std::function<void(const RoundReport&)>;

/// Runs `rounds` rounds in order and returns their reports.
inline std::vector<RoundReport> run_experiment(World& world, std::size_t rounds,
                                               const RoundCallback& on_round = {}) {
  std::vector<RoundReport> reports;
  reports.reserve(rounds);
  for (std::size_t r = 0; r < rounds; ++r) {
    reports.push_back(run_round(world));
    if (on_round) on_round(reports.back());
  }
  return reports;
}

}  // namespace fdla
