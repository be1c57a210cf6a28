#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <random>
#include <string>

#include "fdla/config.hpp"

namespace fdla {
namespace {

namespace fs = std::filesystem;

fs::path write_config(const std::string& text) {
  auto path = fs::temp_directory_path() / ("fdla_config_" + std::to_string(std::random_device{}()) + ".json");
  std::ofstream(path) << text;
  return path;
}

TEST(Config, EmptyFileGivesValidDefaults) {
  const auto path = write_config("");
  const auto c = parse_config(path);
  EXPECT_EQ(c.protocol, ProtocolKind::fd_avg);
  EXPECT_EQ(c.clients, 20u);
  EXPECT_EQ(c.alpha, 1.0);
  EXPECT_EQ(c.rounds, 60u);
  EXPECT_EQ(c.attack, AttackKind::none);
  EXPECT_EQ(c.temperature, 1.0);
  EXPECT_EQ(c.batch_size, 32u);
  EXPECT_EQ(c.neighbors, 16u);
  EXPECT_EQ(c.n_classes, 10u);
  EXPECT_EQ(c.per_class, 100u);
  EXPECT_EQ(c.dim, 16u);
  EXPECT_EQ(c.separation, 3.0);
  EXPECT_EQ(to_json(c), to_json(ExperimentConfig{}));
  fs::remove(path);
}

TEST(Config, EchoRoundTripsThroughJson) {
  ExperimentConfig c;
  c.attack = AttackKind::fdla;
  c.poison_ratio = 0.3;
  c.protocol = ProtocolKind::cache;
  c.misleading_class = 4;
  EXPECT_EQ(to_json(config_from_json(to_json(c))), to_json(c));
}

TEST(Config, PoisonRatioOutOfRangeNamesTheField) {
  const auto path = write_config(R"({"poison_ratio": 1.5})");
  try {
    parse_config(path);
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("poison_ratio"), std::string::npos) << e.what();
  }
  fs::remove(path);
}

TEST(Config, FlagOverridesFileValue) {
  const auto path = write_config(R"({"attack": "none", "rounds": 7})");
  const auto c = parse_config(path, {{"attack", "fdla"}});
  EXPECT_EQ(c.attack, AttackKind::fdla);
  EXPECT_EQ(c.rounds, 7u);
  fs::remove(path);
}

TEST(Config, UnknownKeyAndWrongTypeAreRejected) {
  EXPECT_THROW(config_from_json(nlohmann::ordered_json{{"poison", 0.1}}), ConfigError);
  EXPECT_THROW(config_from_json(nlohmann::ordered_json{{"rounds", "ten"}}), ConfigError);
  EXPECT_THROW(config_from_json(nlohmann::ordered_json{{"attack", "label_flip"}}), ConfigError);
  EXPECT_THROW(parse_config(std::nullopt, {{"rounds", "abc"}}), ConfigError);
  EXPECT_THROW(parse_config(std::nullopt, {{"nope", "1"}}), ConfigError);
}

TEST(Config, MalformedJsonIsConfigError) {
  const auto path = write_config("{\"rounds\": ");
  EXPECT_THROW(parse_config(path), ConfigError);
  fs::remove(path);
  EXPECT_THROW(parse_config(fs::path("/nonexistent/config.json")), ConfigError);
}

TEST(Config, RangeChecks) {
  auto bad = [](const char* key, nlohmann::ordered_json value) {
    nlohmann::ordered_json doc;
    doc[key] = value;
    try {
      config_from_json(doc);
      return std::string("accepted");
    } catch (const ConfigError& e) {
      return std::string(e.what());
    }
  };
  for (auto [key, value] : std::vector<std::pair<const char*, nlohmann::ordered_json>>{
           {"clients", 0}, {"alpha", 0.0}, {"temperature", 0.0}, {"lr", -1.0}, {"beta", -0.5},
           {"local_epochs", 0}, {"batch_size", 0}, {"rounds", 0}, {"hash_dim", 1},
           {"dataset", "parquet"}, {"misleading_class", 10}}) {
    const auto message = bad(key, value);
    EXPECT_NE(message.find(key), std::string::npos) << key << ": " << message;
  }
}

TEST(Config, FileDatasetsRequirePaths) {
  EXPECT_THROW(config_from_json(nlohmann::ordered_json{{"dataset", "idx"}}), ConfigError);
  EXPECT_THROW(config_from_json(nlohmann::ordered_json{{"dataset", "csv"}}), ConfigError);
  EXPECT_NO_THROW(config_from_json(
      nlohmann::ordered_json{{"dataset", "csv"}, {"train_path", "a"}, {"test_path", "b"}}));
}

TEST(Config, BooleanAndProtocolFlags) {
  const auto c = parse_config(std::nullopt, {{"heterogeneous_models", "true"},
                                             {"exclude_self", "1"},
                                             {"protocol", "cache"}});
  EXPECT_TRUE(c.heterogeneous_models);
  EXPECT_TRUE(c.exclude_self);
  EXPECT_EQ(c.protocol, ProtocolKind::cache);
}

}  // namespace
}  // namespace fdla
