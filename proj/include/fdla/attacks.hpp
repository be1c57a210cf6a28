#pragma once

// Logits poisoning: the confidence-rank cycle (FDLA), random and zero
// baselines, malicious-client selection, and the upload hook.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numeric>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "fdla/error.hpp"
#include "fdla/nn.hpp"

namespace fdla {

enum class AttackKind { none, fdla, random, zero };

inline std::string_view to_string(AttackKind kind) {
  switch (kind) {
    case AttackKind::none: return "none";
    case AttackKind::fdla: return "fdla";
    case AttackKind::random: return "random";
    case AttackKind::zero: return "zero";
  }
  return "?";
}

inline AttackKind parse_attack_kind(std::string_view name) {
  if (name == "none") return AttackKind::none;
  if (name == "fdla") return AttackKind::fdla;
  if (name == "random") return AttackKind::random;
  if (name == "zero") return AttackKind::zero;
  throw ConfigError("unknown attack '" + std::string(name) + "' (expected none|fdla|random|zero)");
}

/// Class indices ordered by descending confidence; equal values keep
/// ascending class order.
inline std::vector<std::size_t> sorted_indices(std::span<const double> c) {
  std::vector<std::size_t> order(c.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return c[a] > c[b]; });
  return order;
}

/// 1-based rank of every entry, highest confidence ranked 1.
inline std::vector<std::size_t> rank(std::span<const double> c) {
  const auto order = sorted_indices(c);
  std::vector<std::size_t> ranks(c.size());
  for (std::size_t k = 0; k < order.size(); ++k) ranks[order[k]] = k + 1;
  return ranks;
}

/// The rank cycle: the top class points at the bottom class, every other class
/// points at the class ranked one above it.
struct RankPermutation {
  std::vector<std::size_t> sorted;   // sorted[k] = class with the (k+1)-th highest confidence
  std::vector<std::size_t> mapping;  // mapping[i] = class whose value class i receives
};

inline RankPermutation make_rank_permutation(std::span<const double> c) {
  RankPermutation perm;
  perm.sorted = sorted_indices(c);
  const std::size_t n = c.size();
  perm.mapping.resize(n);
  if (n == 0) return perm;
  perm.mapping[perm.sorted[0]] = perm.sorted[n - 1];
  for (std::size_t k = 1; k < n; ++k) perm.mapping[perm.sorted[k]] = perm.sorted[k - 1];
  return perm;
}

/// c'[i] = c[t[i]]: the honest runner-up inherits the top value, every lower
/// class moves up one rank, and the honest winner drops to the minimum.
inline ConfidenceVector fdla_transform(std::span<const double> c) {
  if (c.empty()) throw InputError("fdla_transform: empty confidence vector");
  const auto perm = make_rank_permutation(c);
  ConfidenceVector out(c.size());
  for (std::size_t i = 0; i < c.size(); ++i) out[i] = c[perm.mapping[i]];
  return out;
}

/// i.i.d. uniform [0,1) entries. Deliberately not normalized.
inline ConfidenceVector random_poison(std::size_t n, Rng& rng) {
  if (n == 0) throw InputError("random_poison: n must be at least 1");
  ConfidenceVector out(n);
  for (double& v : out) {
    v = std::generate_canonical<double, 53>(rng);
    if (v >= 1.0) v = std::nextafter(1.0, 0.0);
  }
  return out;
}

inline ConfidenceVector zero_poison(std::size_t n) {
  if (n == 0) throw InputError("zero_poison: n must be at least 1");
  return ConfidenceVector(n, 0.0);
}

struct AttackAssignment {
  std::vector<std::size_t> malicious_ids;  // sorted ascending
  double ratio = 0.0;
  std::uint64_t seed = 0;

  bool is_malicious(std::size_t client) const {
    return std::binary_search(malicious_ids.begin(), malicious_ids.end(), client);
  }
};

/// Uniformly random subset of round(ratio * K) clients, fixed for the run.
inline AttackAssignment select_malicious(std::size_t clients, double ratio, std::uint64_t seed) {
  if (!(ratio >= 0.0 && ratio <= 1.0)) {
    throw ConfigError("poison_ratio must lie in [0,1]");
  }
  const auto count = static_cast<std::size_t>(std::llround(ratio * static_cast<double>(clients)));
  std::vector<std::size_t> ids(clients);
  std::iota(ids.begin(), ids.end(), std::size_t{0});
  Rng rng(seed);
  std::shuffle(ids.begin(), ids.end(), rng);
  ids.resize(std::min(count, clients));
  std::sort(ids.begin(), ids.end());
  return {std::move(ids), ratio, seed};
}

/// Transforms every per-sample vector of an upload. `none` returns the input
/// unchanged; `random` draws from the caller's stream.
inline std::vector<ConfidenceVector> apply_attack(std::span<const ConfidenceVector> knowledge,
                                                  AttackKind kind, Rng& rng) {
  std::vector<ConfidenceVector> out;
  out.reserve(knowledge.size());
  for (const auto& c : knowledge) {
    switch (kind) {
      case AttackKind::none: out.push_back(c); break;
      case AttackKind::fdla: out.push_back(fdla_transform(c)); break;
      case AttackKind::random: out.push_back(random_poison(c.size(), rng)); break;
      case AttackKind::zero: out.push_back(zero_poison(c.size())); break;
    }
  }
  return out;
}

}  // namespace fdla
