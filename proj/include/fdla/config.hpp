#pragma once

// Experiment configuration: a flat JSON object whose keys double as CLI flag
// names. Unknown keys, wrong types and out-of-range values are rejected with
// the offending field named.

#include <charconv>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iterator>
#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <json.hpp>

#include "fdla/attacks.hpp"
#include "fdla/error.hpp"

namespace fdla {

using ordered_json = nlohmann::ordered_json;

enum class ProtocolKind { fd_avg, cache };

inline std::string_view to_string(ProtocolKind kind) {
  return kind == ProtocolKind::fd_avg ? "fd_avg" : "cache";
}

inline ProtocolKind parse_protocol(std::string_view name) {
  if (name == "fd_avg") return ProtocolKind::fd_avg;
  if (name == "cache") return ProtocolKind::cache;
  throw ConfigError("field 'protocol': unknown value '" + std::string(name) +
                    "' (expected fd_avg|cache)");
}

struct ExperimentConfig {
  ProtocolKind protocol = ProtocolKind::fd_avg;
  std::size_t clients = 20;
  double alpha = 1.0;
  double poison_ratio = 0.0;
  AttackKind attack = AttackKind::none;
  std::size_t rounds = 60;
  double beta = 4.0;
  double temperature = 1.0;
  double lr = 0.1;
  std::size_t local_epochs = 3;
  std::size_t batch_size = 32;
  bool heterogeneous_models = false;
  std::size_t neighbors = 16;  // R, cache protocol only
  bool exclude_self = false;   // fd_avg: average over the other K-1 clients
  std::size_t hash_dim = 32;

  std::string dataset = "synthetic";  // synthetic | idx | csv
  std::size_t n_classes = 10;
  std::size_t per_class = 100;
  std::size_t dim = 16;
  double separation = 3.0;
  std::string train_path;
  std::string train_labels_path;  // idx only
  std::string test_path;
  std::string test_labels_path;   // idx only

  std::uint64_t data_seed = 1;
  std::uint64_t attack_seed = 2;
  std::uint64_t model_seed = 3;
  std::uint64_t training_seed = 4;

  std::int64_t misleading_class = -1;  // -1: first class of the closest centroid pair
  std::string output_dir = "out";
};

namespace detail {

enum class FieldType { integer, signed_integer, real, boolean, string };

struct FieldSpec {
  std::string_view name;
  FieldType type;
  std::function<void(ExperimentConfig&, const ordered_json&)> set;
  std::function<ordered_json(const ExperimentConfig&)> get;
};

template <typename T>
FieldSpec unsigned_field(std::string_view name, T ExperimentConfig::*member) {
  return {name, FieldType::integer,
          [member](ExperimentConfig& c, const ordered_json& v) { c.*member = v.get<T>(); },
          [member](const ExperimentConfig& c) { return ordered_json(c.*member); }};
}

inline FieldSpec real_field(std::string_view name, double ExperimentConfig::*member) {
  return {name, FieldType::real,
          [member](ExperimentConfig& c, const ordered_json& v) { c.*member = v.get<double>(); },
          [member](const ExperimentConfig& c) { return ordered_json(c.*member); }};
}

inline FieldSpec bool_field(std::string_view name, bool ExperimentConfig::*member) {
  return {name, FieldType::boolean,
          [member](ExperimentConfig& c, const ordered_json& v) { c.*member = v.get<bool>(); },
          [member](const ExperimentConfig& c) { return ordered_json(c.*member); }};
}

inline FieldSpec string_field(std::string_view name, std::string ExperimentConfig::*member) {
  return {name, FieldType::string,
          [member](ExperimentConfig& c, const ordered_json& v) {
            c.*member = v.get<std::string>();
          },
          [member](const ExperimentConfig& c) { return ordered_json(c.*member); }};
}

inline const std::vector<FieldSpec>& config_fields() {
  static const std::vector<FieldSpec> fields = {
      {"protocol", FieldType::string,
       [](ExperimentConfig& c, const ordered_json& v) {
         c.protocol = parse_protocol(v.get<std::string>());
       },
       [](const ExperimentConfig& c) { return ordered_json(std::string(to_string(c.protocol))); }},
      unsigned_field("clients", &ExperimentConfig::clients),
      real_field("alpha", &ExperimentConfig::alpha),
      real_field("poison_ratio", &ExperimentConfig::poison_ratio),
      {"attack", FieldType::string,
       [](ExperimentConfig& c, const ordered_json& v) {
         try {
           c.attack = parse_attack_kind(v.get<std::string>());
         } catch (const ConfigError& e) {
           throw ConfigError(std::string("field 'attack': ") + e.what());
         }
       },
       [](const ExperimentConfig& c) { return ordered_json(std::string(to_string(c.attack))); }},
      unsigned_field("rounds", &ExperimentConfig::rounds),
      real_field("beta", &ExperimentConfig::beta),
      real_field("temperature", &ExperimentConfig::temperature),
      real_field("lr", &ExperimentConfig::lr),
      unsigned_field("local_epochs", &ExperimentConfig::local_epochs),
      unsigned_field("batch_size", &ExperimentConfig::batch_size),
      bool_field("heterogeneous_models", &ExperimentConfig::heterogeneous_models),
      unsigned_field("neighbors", &ExperimentConfig::neighbors),
      bool_field("exclude_self", &ExperimentConfig::exclude_self),
      unsigned_field("hash_dim", &ExperimentConfig::hash_dim),
      string_field("dataset", &ExperimentConfig::dataset),
      unsigned_field("n_classes", &ExperimentConfig::n_classes),
      unsigned_field("per_class", &ExperimentConfig::per_class),
      unsigned_field("dim", &ExperimentConfig::dim),
      real_field("separation", &ExperimentConfig::separation),
      string_field("train_path", &ExperimentConfig::train_path),
      string_field("train_labels_path", &ExperimentConfig::train_labels_path),
      string_field("test_path", &ExperimentConfig::test_path),
      string_field("test_labels_path", &ExperimentConfig::test_labels_path),
      unsigned_field("data_seed", &ExperimentConfig::data_seed),
      unsigned_field("attack_seed", &ExperimentConfig::attack_seed),
      unsigned_field("model_seed", &ExperimentConfig::model_seed),
      unsigned_field("training_seed", &ExperimentConfig::training_seed),
      {"misleading_class", FieldType::signed_integer,
       [](ExperimentConfig& c, const ordered_json& v) { c.misleading_class = v.get<std::int64_t>(); },
       [](const ExperimentConfig& c) { return ordered_json(c.misleading_class); }},
      string_field("output_dir", &ExperimentConfig::output_dir),
  };
  return fields;
}

inline const FieldSpec* find_field(std::string_view name) {
  for (const auto& f : config_fields()) {
    if (f.name == name) return &f;
  }
  return nullptr;
}

inline bool type_matches(FieldType type, const ordered_json& v) {
  switch (type) {
    case FieldType::integer: return v.is_number_unsigned();
    case FieldType::signed_integer: return v.is_number_integer();
    case FieldType::real: return v.is_number();
    case FieldType::boolean: return v.is_boolean();
    case FieldType::string: return v.is_string();
  }
  return false;
}

inline std::string_view type_name(FieldType type) {
  switch (type) {
    case FieldType::integer: return "a non-negative integer";
    case FieldType::signed_integer: return "an integer";
    case FieldType::real: return "a number";
    case FieldType::boolean: return "a boolean";
    case FieldType::string: return "a string";
  }
  return "?";
}

// Flag text -> JSON value of the field's type.
inline ordered_json parse_flag_value(const FieldSpec& field, const std::string& text) {
  auto bad = [&] {
    return ConfigError("field '" + std::string(field.name) + "': '" + text + "' is not " +
                       std::string(type_name(field.type)));
  };
  const char* first = text.data();
  const char* last = text.data() + text.size();
  switch (field.type) {
    case FieldType::integer: {
      std::uint64_t v = 0;
      auto [p, ec] = std::from_chars(first, last, v);
      if (ec != std::errc() || p != last || text.empty()) throw bad();
      return ordered_json(v);
    }
    case FieldType::signed_integer: {
      std::int64_t v = 0;
      auto [p, ec] = std::from_chars(first, last, v);
      if (ec != std::errc() || p != last || text.empty()) throw bad();
      return ordered_json(v);
    }
    case FieldType::real: {
      double v = 0.0;
      auto [p, ec] = std::from_chars(first, last, v);
      if (ec != std::errc() || p != last || text.empty()) throw bad();
      return ordered_json(v);
    }
    case FieldType::boolean:
      if (text == "true" || text == "1") return ordered_json(true);
      if (text == "false" || text == "0") return ordered_json(false);
      throw bad();
    case FieldType::string: return ordered_json(text);
  }
  throw bad();
}

}  // namespace detail

/// Names of every configuration key, in schema order.
inline std::vector<std::string> config_field_names() {
  std::vector<std::string> names;
  for (const auto& f : detail::config_fields()) names.emplace_back(f.name);
  return names;
}

/// Throws ConfigError naming the first field that violates its constraint.
inline void validate(const ExperimentConfig& c) {
  auto fail = [](std::string_view field, const std::string& why) {
    throw ConfigError("field '" + std::string(field) + "': " + why);
  };
  if (c.clients < 1) fail("clients", "must be at least 1");
  if (!(c.alpha > 0.0) || !std::isfinite(c.alpha)) fail("alpha", "must be > 0");
  if (!(c.poison_ratio >= 0.0 && c.poison_ratio <= 1.0)) fail("poison_ratio", "must lie in [0,1]");
  if (c.rounds < 1) fail("rounds", "must be at least 1");
  if (!(c.beta >= 0.0) || !std::isfinite(c.beta)) fail("beta", "must be >= 0");
  if (!(c.temperature > 0.0) || !std::isfinite(c.temperature)) fail("temperature", "must be > 0");
  if (!(c.lr > 0.0) || !std::isfinite(c.lr)) fail("lr", "must be > 0");
  if (c.local_epochs < 1) fail("local_epochs", "must be at least 1");
  if (c.batch_size < 1) fail("batch_size", "must be at least 1");
  if (c.protocol == ProtocolKind::cache && c.neighbors < 1) {
    fail("neighbors", "cache protocol requires at least 1 neighbor");
  }
  if (c.hash_dim < 2) fail("hash_dim", "must be at least 2");
  if (c.dataset == "synthetic") {
    if (c.n_classes < 2) fail("n_classes", "must be at least 2");
    if (c.per_class < 2) fail("per_class", "must be at least 2");
    if (c.dim < 1) fail("dim", "must be at least 1");
    if (!(c.separation >= 0.0) || !std::isfinite(c.separation)) fail("separation", "must be >= 0");
    if (c.misleading_class >= static_cast<std::int64_t>(c.n_classes)) {
      fail("misleading_class", "must be < n_classes");
    }
  } else if (c.dataset == "idx") {
    if (c.train_path.empty()) fail("train_path", "required for idx datasets");
    if (c.train_labels_path.empty()) fail("train_labels_path", "required for idx datasets");
    if (c.test_path.empty()) fail("test_path", "required for idx datasets");
    if (c.test_labels_path.empty()) fail("test_labels_path", "required for idx datasets");
  } else if (c.dataset == "csv") {
    if (c.train_path.empty()) fail("train_path", "required for csv datasets");
    if (c.test_path.empty()) fail("test_path", "required for csv datasets");
  } else {
    fail("dataset", "unknown value '" + c.dataset + "' (expected synthetic|idx|csv)");
  }
  if (c.misleading_class < -1) fail("misleading_class", "must be -1 (auto) or a class index");
  if (c.output_dir.empty()) fail("output_dir", "must not be empty");
}

/// Applies the keys of a JSON object on top of `config` without validating ranges.
inline void apply_json(ExperimentConfig& config, const ordered_json& doc) {
  if (!doc.is_object()) throw ConfigError("configuration must be a JSON object");
  for (const auto& [key, value] : doc.items()) {
    const auto* field = detail::find_field(key);
    if (field == nullptr) throw ConfigError("unknown configuration key '" + key + "'");
    if (!detail::type_matches(field->type, value)) {
      throw ConfigError("field '" + key + "': expected " +
                        std::string(detail::type_name(field->type)) + ", got " +
                        std::string(value.type_name()));
    }
    field->set(config, value);
  }
}

inline ExperimentConfig config_from_json(const ordered_json& doc) {
  ExperimentConfig config;
  apply_json(config, doc);
  validate(config);
  return config;
}

/// Full config echo, every field in schema order.
inline ordered_json to_json(const ExperimentConfig& config) {
  ordered_json doc = ordered_json::object();
  for (const auto& f : detail::config_fields()) doc[std::string(f.name)] = f.get(config);
  return doc;
}

using FlagOverrides = std::vector<std::pair<std::string, std::string>>;

/// File values first, then flag overrides (textual, typed per field), then
/// validation. An empty file path means defaults only.
inline ExperimentConfig parse_config(const std::optional<std::filesystem::path>& file,
                                     const FlagOverrides& overrides = {}) {
  ExperimentConfig config;
  if (file) {
    std::ifstream in(*file);
    if (!in) throw ConfigError("cannot open config file " + file->string());
    std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    if (text.find_first_not_of(" \t\r\n") != std::string::npos) {
      ordered_json doc;
      try {
        doc = ordered_json::parse(text);
      } catch (const nlohmann::json::parse_error& e) {
        throw ConfigError(file->string() + ": " + e.what());
      }
      apply_json(config, doc);
    }
  }
  for (const auto& [key, text] : overrides) {
    const auto* field = detail::find_field(key);
    if (field == nullptr) throw ConfigError("unknown configuration key '" + key + "'");
    field->set(config, detail::parse_flag_value(*field, text));
  }
  validate(config);
  return config;
}

}  // namespace fdla
