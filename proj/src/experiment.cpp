#include "cade/experiment.hpp"

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include "cade/binary_io.hpp"

namespace cade {

namespace fs = std::filesystem;

namespace {

[[noreturn]] void config_error(const std::string& msg) { throw ConfigError("config: " + msg); }

Json protocol_json(const ProtocolStreamSpec& p) {
  return Json{{"protocol_path", p.protocol_path}, {"wav_dir", p.wav_dir},           {"tasks", p.task_attacks},
              {"frames", p.frames},               {"eval_fraction", p.eval_fraction}, {"seed", p.seed}};
}

ProtocolStreamSpec protocol_from_json(const Json& j, const std::string& path, const std::string& base_dir) {
  ProtocolStreamSpec p;
  ObjectReader r(j, path);
  r.read("protocol_path", p.protocol_path);
  r.read("wav_dir", p.wav_dir);
  if (r.has("tasks")) {
    const auto& arr = r.at("tasks");
    if (!arr.is_array()) config_error("'" + r.path_of("tasks") + "' must be an array of attack-id lists");
    for (const auto& t : arr) {
      if (!t.is_array()) config_error("'" + r.path_of("tasks") + "' must be an array of attack-id lists");
      std::vector<std::string> ids;
      for (const auto& id : t) {
        if (!id.is_string()) config_error("'" + r.path_of("tasks") + "' must be an array of attack-id lists");
        ids.push_back(id.get<std::string>());
      }
      p.task_attacks.push_back(std::move(ids));
    }
  }
  r.read("frames", p.frames);
  r.read("eval_fraction", p.eval_fraction);
  r.read("seed", p.seed);
  r.finish();

  auto resolve = [&](std::string& f, const std::string& key) {
    if (f.empty()) config_error("'" + r.path_of(key) + "' is required");
    fs::path q(f);
    if (q.is_relative() && !base_dir.empty()) q = fs::path(base_dir) / q;
    if (!fs::exists(q)) config_error("'" + r.path_of(key) + "': " + q.string() + " does not exist");
    f = fs::absolute(q).lexically_normal().string();
  };
  resolve(p.protocol_path, "protocol_path");
  resolve(p.wav_dir, "wav_dir");
  return p;
}

RunConfig training_from_json(const Json& j, const std::string& path) {
  RunConfig c;
  ObjectReader r(j, path);
  r.read("epochs", c.epochs);
  r.read("batch_size", c.batch_size);
  r.read("replay_fraction", c.replay_fraction);
  if (r.has("buffer")) {
    std::string name;
    r.read("buffer", name);
    try {
      c.buffer = parse_strategy(name);
    } catch (const Error& e) {
      config_error("'" + r.path_of("buffer") + "': " + e.what());
    }
  }
  r.read("eval_batch", c.eval_batch);
  if (r.has("optimizer")) c.optimizer = optimizer_from_json(r.at("optimizer"), r.path_of("optimizer"));
  r.finish();
  return c;
}

Json training_json(const RunConfig& c) {
  return Json{{"epochs", c.epochs},
              {"batch_size", c.batch_size},
              {"replay_fraction", c.replay_fraction},
              {"buffer", strategy_name(c.buffer)},
              {"eval_batch", c.eval_batch},
              {"optimizer", to_json(c.optimizer)}};
}

}  // namespace

void ExperimentConfig::validate() const {
  auto guard = [](const std::string& where, auto&& f) {
    try {
      f();
    } catch (const ConfigError&) {
      throw;
    } catch (const Error& e) {
      config_error(where + ": " + e.what());
    }
  };
  if (methods.empty()) config_error("'methods' must not be empty");
  if (seeds.empty()) config_error("'seeds' must not be empty");
  guard("lfcc", [&] { lfcc.validate(); });
  guard("model", [&] { model.validate(); });
  if (!stream.protocol) guard("stream.generator", [&] { stream.generator.validate(); });
  if (model.in_h != lfcc.n_coeffs)
    config_error("model.in_h (" + std::to_string(model.in_h) + ") must equal lfcc.n_coeffs (" +
                 std::to_string(lfcc.n_coeffs) + ")");
  if (model.in_w != stream.frames())
    config_error("model.in_w (" + std::to_string(model.in_w) + ") must equal the stream's frame count (" +
                 std::to_string(stream.frames()) + ")");
  for (std::size_t i = 0; i < methods.size(); ++i) {
    const std::string where = "methods[" + std::to_string(i) + "]";
    guard(where, [&] { methods[i].validate(); });
    for (std::size_t k = 0; k < i; ++k)
      if (methods[k] == methods[i]) config_error(where + " repeats methods[" + std::to_string(k) + "]");
    if (methods[i].uses_memory() && (memory.empty() || std::count(memory.begin(), memory.end(), 0u)))
      config_error(where + " (" + method_name(methods[i].kind) + ") needs positive entries in 'memory'");
  }
  for (const auto& cell : expand_cells(*this)) guard("training", [&] { cell.validate(); });
}

Json to_json(const ExperimentConfig& c) {
  Json stream{{"seed", c.stream.seed}, {"sizes", to_json(c.stream.sizes)}, {"generator", to_json(c.stream.generator)}};
  if (c.stream.protocol) stream = Json{{"protocol", protocol_json(*c.stream.protocol)}};
  Json methods = Json::array();
  for (const auto& m : c.methods) methods.push_back(to_json(m));
  return Json{{"out", c.out},          {"stream", stream},  {"lfcc", to_json(c.lfcc)},
              {"model", to_json(c.model)}, {"training", training_json(c.training)},
              {"methods", methods},    {"memory", c.memory}, {"seeds", c.seeds}};
}

ExperimentConfig experiment_from_json(const Json& j, const std::string& base_dir) {
  ExperimentConfig c;
  ObjectReader r(j, "");
  r.read("out", c.out);
  if (r.has("stream")) {
    ObjectReader s(r.at("stream"), "stream");
    if (s.has("protocol")) {
      c.stream.protocol = protocol_from_json(s.at("protocol"), "stream.protocol", base_dir);
      // generator keys are meaningless next to a protocol; let finish() reject them
    } else {
      s.read("seed", c.stream.seed);
      if (s.has("sizes")) c.stream.sizes = sizes_from_json(s.at("sizes"), "stream.sizes");
      if (s.has("generator")) c.stream.generator = families_from_json(s.at("generator"), "stream.generator");
    }
    s.finish();
  }
  if (r.has("lfcc")) c.lfcc = lfcc_from_json(r.at("lfcc"), "lfcc");
  if (r.has("model")) c.model = model_from_json(r.at("model"), "model");
  if (r.has("training")) c.training = training_from_json(r.at("training"), "training");
  if (r.has("methods")) {
    const auto& arr = r.at("methods");
    if (!arr.is_array()) config_error("'methods' must be an array");
    for (std::size_t i = 0; i < arr.size(); ++i)
      c.methods.push_back(method_from_json(arr[i], "methods[" + std::to_string(i) + "]"));
  }
  r.read("memory", c.memory);
  r.read("seeds", c.seeds);
  r.finish();
  return c;
}

ExperimentConfig load_experiment(const std::string& path) {
  std::string text;
  try {
    text = bin::read_file(path);
  } catch (const Error& e) {
    throw ConfigError(e.what());
  }
  Json j;
  try {
    j = Json::parse(text);
  } catch (const Json::exception& e) {
    throw ConfigError(path + ": " + e.what());
  }
  ExperimentConfig c;
  try {
    c = experiment_from_json(j, fs::path(path).parent_path().string());
    c.validate();
  } catch (const ConfigError& e) {
    throw ConfigError(path + ": " + e.what());
  }
  return c;
}

std::vector<RunConfig> expand_cells(const ExperimentConfig& c, std::uint64_t seed_offset) {
  std::vector<RunConfig> cells;
  for (const auto& m : c.methods) {
    std::vector<std::size_t> mems = m.uses_memory() ? c.memory : std::vector<std::size_t>{0};
    std::vector<std::size_t> seen;
    for (std::size_t mem : mems) {
      if (std::find(seen.begin(), seen.end(), mem) != seen.end()) continue;
      seen.push_back(mem);
      for (auto seed : c.seeds) {
        RunConfig r = c.training;
        r.method = m;
        r.model = c.model;
        r.memory = mem;
        r.seed = seed + seed_offset;
        cells.push_back(r);
      }
    }
  }
  return cells;
}

TaskStream build_stream(const ExperimentConfig& c) {
  if (c.stream.protocol) return ingest_protocol_stream(*c.stream.protocol, c.lfcc);
  return synth_task_stream(c.stream.generator, c.stream.sizes, c.lfcc, c.stream.seed);
}

std::string expected_fingerprint(const ExperimentConfig& c) {
  if (c.stream.protocol) return "";
  return stream_fingerprint(c.stream.generator, c.stream.sizes, c.lfcc, c.stream.seed);
}

Json stream_manifest_extra(const ExperimentConfig& c) {
  Json j = to_json(c);
  return Json{{"source", j.at("stream")}, {"lfcc", j.at("lfcc")}};
}

std::string setting_name(const TaskStream& s) {
  std::string out;
  for (const auto& t : s.tasks) out += (out.empty() ? "" : " TO ") + t.name;
  return out;
}

Json to_record(const RunReport& r, const RunConfig& cfg, const std::string& setting) {
  return Json{{"method", r.method},
              {"memory", r.memory},
              {"seed", r.seed},
              {"per_task_eer", r.per_task_eer},
              {"final_eer", r.final_eer},
              {"config_hash", r.config_hash},
              {"wall_ms", r.wall_ms},
              {"stream_fingerprint", r.stream_fingerprint},
              {"setting", setting},
              {"config", to_json(cfg)}};
}

RunReport report_from_record(const Json& rec) {
  RunReport r;
  try {
    r.method = rec.at("method").get<std::string>();
    r.memory = rec.at("memory").get<std::size_t>();
    r.seed = rec.at("seed").get<std::uint64_t>();
    r.per_task_eer = rec.at("per_task_eer").get<std::vector<std::vector<double>>>();
    r.final_eer = rec.at("final_eer").get<double>();
    r.config_hash = rec.at("config_hash").get<std::string>();
    r.wall_ms = rec.at("wall_ms").get<double>();
    r.stream_fingerprint = rec.at("stream_fingerprint").get<std::string>();
  } catch (const Json::exception& e) {
    throw Error(std::string("result record: ") + e.what());
  }
  return r;
}

std::string record_config_hash(const Json& rec) {
  return run_config_hash(run_from_json(rec.at("config"), "config"), rec.at("stream_fingerprint").get<std::string>());
}

std::vector<Json> read_records(const std::string& jsonl_path) {
  std::ifstream in(jsonl_path);
  if (!in) throw Error("cannot open " + jsonl_path);
  std::vector<Json> out;
  std::string line;
  for (std::size_t n = 1; std::getline(in, line); ++n) {
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      out.push_back(Json::parse(line));
    } catch (const Json::exception& e) {
      throw Error(jsonl_path + ":" + std::to_string(n) + ": " + e.what());
    }
  }
  return out;
}

std::string format_percent(double fraction) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.3f", 100.0 * fraction);
  return buf;
}

namespace {

std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char ch : s) out += ch == '"' ? std::string("\"\"") : std::string(1, ch);
  return out + "\"";
}

}  // namespace

ResultTable format_table(const std::vector<Json>& records) {
  if (records.empty()) throw Error("table: no result records");
  // fingerprint -> (setting, reports)
  std::map<std::string, std::pair<std::string, std::vector<RunReport>>> sections;
  for (const auto& rec : records) {
    auto r = report_from_record(rec);
    auto& s = sections[r.stream_fingerprint];
    s.first = rec.value("setting", "");
    s.second.push_back(std::move(r));
  }
  std::vector<std::string> order;
  for (const auto& [fp, s] : sections) order.push_back(fp);
  std::stable_sort(order.begin(), order.end(), [&](const std::string& a, const std::string& b) {
    return sections[a].first < sections[b].first;
  });

  ResultTable t;
  t.csv = "setting,stream,name,memory,runs,test_eer_pct,std_pct\n";
  const std::vector<std::string> head{"Name", "Memory", "Runs", "Test EER(%)"};
  for (const auto& fp : order) {
    const auto& [setting, reports] = sections[fp];
    std::vector<std::vector<std::string>> cells{head};
    for (const auto& row : aggregate(reports)) {
      const std::string mem = row.method == method_display_name(Method::joint) ? "/" : std::to_string(row.memory);
      const std::string mean = format_percent(row.mean);
      const std::string sd = row.runs > 1 ? format_percent(row.std) : "";
      cells.push_back({row.method, mem, std::to_string(row.runs), sd.empty() ? mean : mean + "±" + sd});
      t.csv += csv_field(setting) + "," + fp + "," + csv_field(row.method) + "," + mem + "," +
               std::to_string(row.runs) + "," + mean + "," + sd + "\n";
    }
    std::vector<std::size_t> width(head.size(), 0);
    for (const auto& c : cells)
      for (std::size_t k = 0; k < c.size(); ++k) {
        // the plus-minus sign is two bytes but one column
        const std::size_t n = c[k].size() - (c[k].find("±") != std::string::npos ? 1 : 0);
        width[k] = std::max(width[k], n);
      }
    std::ostringstream os;
    os << "Experiment setting: " << (setting.empty() ? "(unnamed)" : setting) << "  [stream " << fp << "]\n";
    for (std::size_t i = 0; i < cells.size(); ++i) {
      for (std::size_t k = 0; k < cells[i].size(); ++k) {
        const auto& v = cells[i][k];
        const std::size_t n = v.size() - (v.find("±") != std::string::npos ? 1 : 0);
        os << v;
        if (k + 1 < cells[i].size()) os << std::string(width[k] - n + 2, ' ');
      }
      os << "\n";
      if (i == 0) {
        std::size_t total = 0;
        for (auto w : width) total += w + 2;
        os << std::string(total - 2, '-') << "\n";
      }
    }
    if (!t.text.empty()) t.text += "\n";
    t.text += os.str();
  }
  return t;
}

}  // namespace cade
