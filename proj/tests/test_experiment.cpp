#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <set>

#include "doctest.h"

#include "cade/binary_io.hpp"
#include "cade/experiment.hpp"

using namespace cade;
namespace fs = std::filesystem;

namespace {

const std::string kSource = CADE_SOURCE_DIR;
const std::string kBin = CADE_BIN;

template <class F>
std::string error_of(F f) {
  try {
    f();
  } catch (const std::exception& e) {
    return e.what();
  }
  return "";
}

Json tiny_json() {
  return Json::parse(R"({
    "out": "unused",
    "stream": {"seed": 3, "sizes": {"train_per_task": 12, "eval_per_task": 8}},
    "training": {"epochs": 1, "batch_size": 8},
    "methods": ["finetune", "cade"],
    "memory": [10],
    "seeds": [1, 2]
  })");
}

Json record(const std::string& method, std::size_t memory, std::uint64_t seed, double eer,
            const std::string& fp = "f1", const std::string& setting = "A TO B") {
  RunConfig c;
  c.method.kind = parse_method(method);
  c.memory = memory;
  c.seed = seed;
  RunReport r;
  r.method = method;
  r.memory = memory;
  r.seed = seed;
  r.per_task_eer = {{eer}};
  r.final_eer = eer;
  r.stream_fingerprint = fp;
  r.config_hash = run_config_hash(c, fp);
  return to_record(r, c, setting);
}

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& name) : path(fs::temp_directory_path() / name) { fs::remove_all(path); }
  ~TempDir() { fs::remove_all(path); }
};

int run_cli(const std::string& args) {
  const std::string cmd = kBin + " " + args + " >/dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

Json strip_wall(Json rec) {
  rec.erase("wall_ms");
  return rec;
}

}  // namespace

TEST_CASE("config round trip") {
  for (const char* name : {"default.json", "memory_grid.json", "baselines.json", "tiny.json"}) {
    INFO(name);
    const auto c = load_experiment(kSource + "/configs/" + name);
    const Json j = to_json(c);
    const auto back = experiment_from_json(j);
    CHECK(to_json(back).dump() == j.dump());
    CHECK(back.model == c.model);
    CHECK(back.methods == c.methods);
    CHECK(back.stream.generator == c.stream.generator);
  }
}

TEST_CASE("shipped default config pins the evaluated settings") {
  const auto c = load_experiment(kSource + "/configs/default.json");
  CHECK(c.seeds == std::vector<std::uint64_t>{1, 2, 3, 4, 5});
  CHECK(c.memory == std::vector<std::size_t>{500});
  CHECK(c.training.epochs == 5);
  std::vector<std::string> names;
  for (const auto& m : c.methods) names.push_back(method_name(m.kind));
  CHECK(names == std::vector<std::string>{"joint", "finetune", "replay", "lwf", "cade"});
}

TEST_CASE("unknown keys name the nearest valid key") {
  Json j = tiny_json();
  j["memroy"] = j["memory"];
  j.erase("memory");
  auto msg = error_of([&] { experiment_from_json(j); });
  CHECK(msg.find("'memroy'") != std::string::npos);
  CHECK(msg.find("'memory'") != std::string::npos);

  j = tiny_json();
  j["training"]["epoch"] = 3;
  msg = error_of([&] { experiment_from_json(j); });
  CHECK(msg.find("'training.epoch'") != std::string::npos);
  CHECK(msg.find("'training.epochs'") != std::string::npos);

  j = tiny_json();
  j["stream"]["sizes"]["train"] = 3;
  msg = error_of([&] { experiment_from_json(j); });
  CHECK(msg.find("'stream.sizes.train'") != std::string::npos);
}

TEST_CASE("config validation") {
  auto invalid = [](Json j) {
    return error_of([&] {
      auto c = experiment_from_json(j);
      c.validate();
    });
  };
  Json j = tiny_json();
  CHECK(invalid(j).empty());
  j["methods"] = Json::array();
  CHECK(invalid(j).find("methods") != std::string::npos);
  j = tiny_json();
  j["seeds"] = Json::array();
  CHECK(invalid(j).find("seeds") != std::string::npos);
  j = tiny_json();
  j["model"] = {{"in_h", 13}};
  CHECK(invalid(j).find("n_coeffs") != std::string::npos);
  j = tiny_json();
  j["memory"] = Json::array({0});
  CHECK(invalid(j).find("memory") != std::string::npos);
  j = tiny_json();
  j["methods"] = Json::array({"cade", "cade"});
  CHECK(invalid(j).find("repeats") != std::string::npos);
  j = tiny_json();
  j["methods"] = Json::array({"cadee"});
  CHECK_FALSE(invalid(j).empty());
  j = tiny_json();
  j["stream"] = {{"protocol", {{"protocol_path", "/nonexistent/p.txt"}, {"wav_dir", "/tmp"}}}};
  CHECK(invalid(j).find("does not exist") != std::string::npos);
  j = tiny_json();
  j["training"]["buffer"] = "lifo";
  CHECK(invalid(j).find("training.buffer") != std::string::npos);
}

TEST_CASE("matrix expansion") {
  auto c = experiment_from_json(tiny_json());
  c.memory = {500};
  auto cells = expand_cells(c);
  CHECK(cells.size() == 4);

  c.methods.clear();
  for (const char* m : {"joint", "finetune", "ewc", "replay", "dfwf", "cade"}) c.methods.push_back(method_from_json(m, "m"));
  c.memory = {500, 1000, 1500};
  c.seeds = {1};
  cells = expand_cells(c);
  std::map<std::string, std::vector<std::size_t>> mems;
  for (const auto& r : cells) mems[method_name(r.method.kind)].push_back(r.memory);
  CHECK(mems["joint"] == std::vector<std::size_t>{0});
  CHECK(mems["finetune"] == std::vector<std::size_t>{0});
  for (const char* m : {"ewc", "replay", "dfwf", "cade"}) CHECK(mems[m] == std::vector<std::size_t>{500, 1000, 1500});

  c.seeds = {1, 2};
  cells = expand_cells(c, 10);
  std::set<std::uint64_t> seeds;
  for (const auto& r : cells) seeds.insert(r.seed);
  CHECK(seeds == std::set<std::uint64_t>{11, 12});
  std::set<std::string> hashes;
  for (const auto& r : cells) hashes.insert(run_config_hash(r, "fp"));
  CHECK(hashes.size() == cells.size());
}

TEST_CASE("records carry a recomputable hash") {
  auto rec = record("cade", 500, 4, 0.2);
  CHECK(record_config_hash(rec) == rec.at("config_hash").get<std::string>());
  auto r = report_from_record(rec);
  CHECK(r.method == "cade");
  CHECK(r.memory == 500);
  CHECK(r.seed == 4);
  CHECK(r.final_eer == 0.2);
  rec["config"]["epochs"] = 7;
  CHECK(record_config_hash(rec) != rec.at("config_hash").get<std::string>());
}

TEST_CASE("table formatting") {
  CHECK(format_percent(0.32171) == "32.171");
  CHECK(format_percent(0.19327) == "19.327");
  CHECK(format_percent(0) == "0.000");

  auto one = format_table({record("finetune", 0, 1, 0.32171)});
  CHECK(one.text.find("Finetune") != std::string::npos);
  CHECK(one.text.find("32.171") != std::string::npos);
  CHECK(one.text.find("Test EER(%)") != std::string::npos);
  CHECK(one.text.find("±") == std::string::npos);

  auto multi = format_table({record("cade", 500, 1, 0.10), record("cade", 500, 2, 0.20), record("joint", 0, 1, 0.05),
                             record("finetune", 0, 1, 0.3)});
  CHECK(multi.text.find("15.000±7.071") != std::string::npos);
  const auto joint = multi.text.find("Joint"), fine = multi.text.find("Finetune"), cade = multi.text.find("CADE");
  CHECK(joint < fine);
  CHECK(fine < cade);
  CHECK(multi.csv.find(",CADE,500,2,15.000,7.071") != std::string::npos);
  CHECK(multi.csv.find(",Joint,/,1,5.000,") != std::string::npos);

  // every number in the CSV appears in the text table
  std::istringstream rows(multi.csv);
  std::string line;
  std::getline(rows, line);
  while (std::getline(rows, line)) {
    const auto mean = line.substr(0, line.rfind(','));
    const auto value = mean.substr(mean.rfind(',') + 1);
    CHECK(multi.text.find(value) != std::string::npos);
  }

  auto mixed = format_table({record("cade", 500, 1, 0.1, "f1", "A TO B"), record("cade", 500, 1, 0.2, "f2", "C TO D")});
  CHECK(mixed.text.find("A TO B") != std::string::npos);
  CHECK(mixed.text.find("C TO D") != std::string::npos);
  CHECK(mixed.text.find("[stream f1]") != std::string::npos);
  CHECK(mixed.text.find("[stream f2]") != std::string::npos);

  CHECK_THROWS(format_table({}));
}

TEST_CASE("cli: gen-data, run, resume and table") {
  TempDir tmp("cade_cli_test");
  fs::create_directories(tmp.path);
  const auto cfg = (tmp.path / "cfg.json").string();
  bin::write_file(cfg, tiny_json().dump());
  const auto out = (tmp.path / "out").string();

  CHECK(run_cli("gen-data --config " + cfg + " --out " + out) == 0);
  const auto manifest = Json::parse(bin::read_file(out + "/data/manifest.json"));
  const auto expected = expected_fingerprint(load_experiment(cfg));
  CHECK(manifest.at("fingerprint") == expected);
  CHECK(run_cli("gen-data --config " + cfg + " --out " + out) == 2);
  CHECK(run_cli("gen-data --config " + cfg + " --out " + out + " --force") == 0);
  CHECK(Json::parse(bin::read_file(out + "/data/manifest.json")).at("fingerprint") == expected);

  CHECK(run_cli("run --config " + cfg + " --out " + out + " --jobs 2") == 0);
  auto recs = read_records(out + "/results.jsonl");
  REQUIRE(recs.size() == 4);
  for (const auto& r : recs) CHECK(record_config_hash(r) == r.at("config_hash").get<std::string>());
  for (const auto& r : recs) CHECK(fs::exists(out + "/checkpoints/" + r.at("config_hash").get<std::string>() + ".ckpt"));
  CHECK(fs::exists(out + "/table.txt"));
  CHECK(fs::exists(out + "/table.csv"));

  // rerun executes nothing: records, wall times included, are unchanged
  const auto before = bin::read_file(out + "/results.jsonl");
  CHECK(run_cli("run --config " + cfg + " --out " + out) == 0);
  CHECK(bin::read_file(out + "/results.jsonl") == before);

  // a second output directory, serial this time, gives the same records
  const auto out2 = (tmp.path / "out2").string();
  CHECK(run_cli("run --config " + cfg + " --out " + out2 + " --jobs 1") == 0);
  auto recs2 = read_records(out2 + "/results.jsonl");
  REQUIRE(recs2.size() == recs.size());
  for (std::size_t i = 0; i < recs.size(); ++i) CHECK(strip_wall(recs[i]).dump() == strip_wall(recs2[i]).dump());

  // CADE_OUT wins over --out
  const auto out3 = (tmp.path / "out3").string();
  CHECK(run_cli("table --out " + out3) == 2);
  CHECK(std::system(("CADE_OUT=" + out + " " + kBin + " table --out " + out3 + " >/dev/null 2>&1").c_str()) == 0);

  // unknown key: exit 2; failing cells: exit 1 with the cell recorded
  Json bad = tiny_json();
  bad["memroy"] = 1;
  bin::write_file(cfg, bad.dump());
  CHECK(run_cli("run --config " + cfg + " --out " + out) == 2);
  Json boom = tiny_json();
  boom["training"]["optimizer"] = {{"lr", 1e9}};
  boom["seeds"] = Json::array({1});
  bin::write_file(cfg, boom.dump());
  const auto out4 = (tmp.path / "out4").string();
  CHECK(run_cli("run --config " + cfg + " --out " + out4) == 1);
  auto failures = read_records(out4 + "/failures.jsonl");
  CHECK(failures.size() == 2);
  for (const auto& f : failures) CHECK(f.at("error").get<std::string>().find("run: task ") != std::string::npos);
}
