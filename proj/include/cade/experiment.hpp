#pragma once

// Experiment matrices: config files, cell expansion, result records and tables.

#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "cade/json_convert.hpp"
#include "cade/synth.hpp"
#include "cade/trainer.hpp"

namespace cade {

/// Where the task stream comes from: the synthetic generator, or a
/// protocol file plus wav directory.
struct StreamSource {
  SpoofFamilyConfig generator = SpoofFamilyConfig::defaults();
  StreamSizes sizes;
  std::uint64_t seed = 1;
  std::optional<ProtocolStreamSpec> protocol;

  std::size_t frames() const { return protocol ? protocol->frames : generator.frames; }
};

struct ExperimentConfig {
  StreamSource stream;
  LfccConfig lfcc;
  ModelConfig model;
  RunConfig training;  // method, memory and seed are set per cell
  std::vector<MethodSpec> methods;
  std::vector<std::size_t> memory{500};
  std::vector<std::uint64_t> seeds{1};
  std::string out = "runs/default";

  void validate() const;
};

Json to_json(const ExperimentConfig& c);
/// Strict: unknown keys are rejected with their path and the closest valid key.
/// Relative protocol paths resolve against `base_dir`.
ExperimentConfig experiment_from_json(const Json& j, const std::string& base_dir = "");
/// Parses and validates a config file. Errors are ConfigError.
ExperimentConfig load_experiment(const std::string& path);

/// Cells in matrix order: method, memory, seed. Methods whose result does
/// not depend on the memory size run once per seed with memory 0.
std::vector<RunConfig> expand_cells(const ExperimentConfig& c, std::uint64_t seed_offset = 0);

/// Builds the stream the config describes.
TaskStream build_stream(const ExperimentConfig& c);
/// Fingerprint the built stream will carry. Synthetic only; empty for protocol streams.
std::string expected_fingerprint(const ExperimentConfig& c);
/// Manifest fields recording the stream source.
Json stream_manifest_extra(const ExperimentConfig& c);

// Result records, one JSON object per line:
//   method memory seed per_task_eer final_eer config_hash wall_ms
//   stream_fingerprint setting config
// config_hash is run_config_hash(config, stream_fingerprint).
Json to_record(const RunReport& r, const RunConfig& cfg, const std::string& setting);
RunReport report_from_record(const Json& rec);
/// Recomputes the hash from the record's embedded config.
std::string record_config_hash(const Json& rec);

/// Task names joined as "A1+A2 TO A3+A4 TO A5+A6".
std::string setting_name(const TaskStream& s);

std::vector<Json> read_records(const std::string& jsonl_path);

struct ResultTable {
  std::string text;
  std::string csv;
};
/// One section per stream fingerprint; EER in percent with 3 decimals,
/// "mean±std" when a row has more than one run.
ResultTable format_table(const std::vector<Json>& records);
std::string format_percent(double fraction);

}  // namespace cade
