#pragma once

// JSON encoding of configuration structs. Decoding is strict: every object
// rejects keys it does not know, naming the full key path and the closest
// valid key.

#include <initializer_list>
#include <set>
#include <string>

#include "json.hpp"

#include "cade/features.hpp"
#include "cade/model.hpp"
#include "cade/synth.hpp"
#include "cade/trainer.hpp"

namespace cade {

using Json = nlohmann::ordered_json;

/// Configuration problem; the message carries the key path.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Edit distance, used for "did you mean" hints.
std::size_t edit_distance(const std::string& a, const std::string& b);

/// Walks one JSON object, tracking which keys were consumed.
class ObjectReader {
 public:
  ObjectReader(const Json& j, std::string path);

  /// Also registers `key` as valid for unknown-key hints.
  bool has(const std::string& key) {
    known_.insert(key);
    return obj_.contains(key);
  }
  const Json& at(const std::string& key);
  std::string path_of(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }

  void read(const std::string& key, double& out);
  void read(const std::string& key, bool& out);
  void read(const std::string& key, std::string& out);
  void read(const std::string& key, std::uint32_t& out);
  void read(const std::string& key, std::uint64_t& out);  // also size_t
  void read(const std::string& key, std::vector<std::string>& out);
  void read(const std::string& key, std::vector<std::uint64_t>& out);

  /// Throws if any key was not consumed.
  void finish() const;

 private:
  const Json& obj_;
  std::string path_;
  std::set<std::string> used_;
  std::set<std::string> known_;
};

Json to_json(const LfccConfig& c);
LfccConfig lfcc_from_json(const Json& j, const std::string& path);

Json to_json(const SpoofFamily& f);
Json to_json(const BaseProcess& b);
Json to_json(const SpoofFamilyConfig& c);
SpoofFamilyConfig families_from_json(const Json& j, const std::string& path);

Json to_json(const StreamSizes& s);
StreamSizes sizes_from_json(const Json& j, const std::string& path);

Json to_json(const ModelConfig& c);
ModelConfig model_from_json(const Json& j, const std::string& path);

Json to_json(const OptimizerConfig& c);
OptimizerConfig optimizer_from_json(const Json& j, const std::string& path);

/// {"name": "cade", "alpha": ..., ...}; keys not used by the method are still accepted.
Json to_json(const MethodSpec& m);
MethodSpec method_from_json(const Json& j, const std::string& path);

Json to_json(const RunConfig& c);
RunConfig run_from_json(const Json& j, const std::string& path);

}  // namespace cade
