// cade: generate task streams, run experiment matrices, print result tables.
//
//   cade gen-data --config cfg.json [--out DIR] [--force]
//   cade run      --config cfg.json [--out DIR] [--jobs N] [--seed-offset K] [--force]
//   cade table    [--config cfg.json] [--out DIR]
//
// CADE_OUT overrides --out, which overrides the config's "out".
// Exit codes: 0 ok, 1 some cells failed, 2 configuration or usage error.

#include <omp.h>

#include <algorithm>
#include <atomic>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <mutex>
#include <set>
#include <thread>

#include "CLI11.hpp"

#include "cade/binary_io.hpp"
#include "cade/experiment.hpp"

using namespace cade;
namespace fs = std::filesystem;

namespace {

constexpr int kOk = 0, kCellsFailed = 1, kConfigError = 2;

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

std::string resolve_out(const std::string& flag, const std::string& from_config) {
  if (const char* env = std::getenv("CADE_OUT"); env && *env) return env;
  if (!flag.empty()) return flag;
  return from_config;
}

std::string data_dir(const std::string& out) { return (fs::path(out) / "data").string(); }
std::string results_path(const std::string& out) { return (fs::path(out) / "results.jsonl").string(); }

void write_atomic(const std::string& path, const std::string& data) {
  const std::string tmp = path + ".tmp";
  bin::write_file(tmp, data);
  fs::rename(tmp, path);
}

void ensure_dir(const std::string& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec || !fs::is_directory(dir)) throw UsageError("cannot create output directory " + dir);
  const auto probe = fs::path(dir) / ".write_probe";
  if (!std::ofstream(probe)) throw UsageError("output directory " + dir + " is not writable");
  fs::remove(probe, ec);
}

TaskStream generate_into(const ExperimentConfig& cfg, const std::string& dir) {
  std::cerr << "generating task stream into " << dir << "\n";
  TaskStream s = build_stream(cfg);
  save_stream(s, dir, stream_manifest_extra(cfg).dump());
  std::cerr << "  " << s.tasks.size() << " tasks, fingerprint " << s.fingerprint << "\n";
  return s;
}

int cmd_gendata(const ExperimentConfig& cfg, const std::string& out, bool force) {
  const std::string dir = data_dir(out);
  if (fs::exists(fs::path(dir) / "manifest.json")) {
    if (!force) throw UsageError(dir + " already holds a task stream; use --force to replace it");
    fs::remove_all(dir);
  }
  ensure_dir(dir);
  generate_into(cfg, dir);
  return kOk;
}

/// Loads the stream from OUT/data when it matches the config, generating it otherwise.
TaskStream prepare_stream(const ExperimentConfig& cfg, const std::string& out, bool force) {
  const std::string dir = data_dir(out);
  if (fs::exists(fs::path(dir) / "manifest.json")) {
    const auto manifest = Json::parse(bin::read_file((fs::path(dir) / "manifest.json").string()));
    const Json extra = stream_manifest_extra(cfg);
    const bool same = manifest.value("source", Json()) == extra.at("source") &&
                      manifest.value("lfcc", Json()) == extra.at("lfcc");
    if (same) {
      TaskStream s = load_stream(dir);
      const auto fp = expected_fingerprint(cfg);
      if (fp.empty() || fp == s.fingerprint) return s;
    }
    if (!force) throw UsageError(dir + " was generated from a different stream config; use --force to regenerate");
    fs::remove_all(dir);
  }
  ensure_dir(dir);
  return generate_into(cfg, dir);
}

int cmd_table(const std::string& out) {
  const std::string path = results_path(out);
  if (!fs::exists(path)) throw UsageError("no results in " + out + " (expected " + path + ")");
  const auto records = read_records(path);
  if (records.empty()) throw UsageError(path + " holds no records");
  const auto table = format_table(records);
  write_atomic((fs::path(out) / "table.txt").string(), table.text);
  write_atomic((fs::path(out) / "table.csv").string(), table.csv);
  std::cout << table.text;
  return kOk;
}

struct CellKey {
  int rank;
  std::size_t memory;
  std::uint64_t seed;
  std::string hash;
  auto operator<=>(const CellKey&) const = default;
};

int cmd_run(const ExperimentConfig& cfg, const std::string& out, unsigned jobs, std::uint64_t seed_offset,
            bool force) {
  ensure_dir(out);
  const TaskStream stream = prepare_stream(cfg, out, force);
  const std::string setting = setting_name(stream);
  write_atomic((fs::path(out) / "config.json").string(), to_json(cfg).dump(2) + "\n");

  const auto cells = expand_cells(cfg, seed_offset);
  std::map<std::string, std::size_t> cell_index;
  for (std::size_t i = 0; i < cells.size(); ++i) cell_index[run_config_hash(cells[i], stream.fingerprint)] = i;

  // resume: keep every valid record already on disk
  std::map<std::string, Json> done;
  const std::string rpath = results_path(out);
  if (force) fs::remove(rpath);
  if (fs::exists(rpath))
    for (auto& rec : read_records(rpath)) {
      std::string hash;
      try {
        hash = record_config_hash(rec);
      } catch (const std::exception& e) {
        std::cerr << "warning: skipping unreadable record in " << rpath << ": " << e.what() << "\n";
        continue;
      }
      if (hash != rec.value("config_hash", "")) {
        std::cerr << "warning: skipping record whose config_hash does not match its config\n";
        continue;
      }
      done[hash] = std::move(rec);
    }

  std::vector<std::size_t> pending;
  for (std::size_t i = 0; i < cells.size(); ++i)
    if (!done.count(run_config_hash(cells[i], stream.fingerprint))) pending.push_back(i);
  std::cerr << cells.size() << " cells, " << cells.size() - pending.size() << " already done, " << pending.size()
            << " to run\n";

  const auto ckpt_dir = fs::path(out) / "checkpoints";
  fs::create_directories(ckpt_dir);
  std::ofstream results(rpath, std::ios::app);
  if (!results) throw UsageError("cannot append to " + rpath);

  std::mutex lock;
  std::vector<Json> failures;
  std::atomic<std::size_t> next{0}, finished{0};
  auto worker = [&] {
    if (jobs > 1) omp_set_num_threads(1);
    for (std::size_t k; (k = next++) < pending.size();) {
      const RunConfig& rc = cells[pending[k]];
      const std::string hash = run_config_hash(rc, stream.fingerprint);
      try {
        auto result = run_sequential(rc, stream);
        save_checkpoint(result.model, (ckpt_dir / (hash + ".ckpt")).string());
        Json rec = to_record(result.report, rc, setting);
        std::lock_guard g(lock);
        results << rec.dump() << "\n" << std::flush;
        done[hash] = std::move(rec);
        std::fprintf(stderr, "[%zu/%zu] %-8s memory %-5zu seed %-3llu EER %s%%  (%.1f s)\n", ++finished,
                     pending.size(), method_name(rc.method.kind).c_str(), rc.memory,
                     static_cast<unsigned long long>(rc.seed), format_percent(result.report.final_eer).c_str(),
                     result.report.wall_ms / 1000);
      } catch (const std::exception& e) {
        std::lock_guard g(lock);
        failures.push_back(Json{{"method", method_name(rc.method.kind)},
                                {"memory", rc.memory},
                                {"seed", rc.seed},
                                {"config_hash", hash},
                                {"error", e.what()}});
        std::fprintf(stderr, "[%zu/%zu] %-8s memory %-5zu seed %-3llu FAILED: %s\n", ++finished, pending.size(),
                     method_name(rc.method.kind).c_str(), rc.memory, static_cast<unsigned long long>(rc.seed),
                     e.what());
      }
    }
  };
  const unsigned n_threads = std::max(1u, std::min<unsigned>(jobs, static_cast<unsigned>(pending.size())));
  if (n_threads == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (unsigned t = 0; t < n_threads; ++t) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }
  results.close();

  // rewrite in matrix order so the file does not depend on scheduling
  std::vector<std::pair<CellKey, const Json*>> ordered;
  for (const auto& [hash, rec] : done) {
    const auto it = cell_index.find(hash);
    const std::size_t pos = it == cell_index.end() ? cells.size() : it->second;
    ordered.push_back({CellKey{static_cast<int>(pos), rec.value("memory", std::size_t{0}),
                               rec.value("seed", std::uint64_t{0}), hash},
                       &rec});
  }
  std::sort(ordered.begin(), ordered.end(), [](const auto& a, const auto& b) { return a.first < b.first; });
  std::string body;
  for (const auto& [key, rec] : ordered) body += rec->dump() + "\n";
  write_atomic(rpath, body);

  const auto fpath = (fs::path(out) / "failures.jsonl").string();
  if (failures.empty()) {
    fs::remove(fpath);
  } else {
    std::sort(failures.begin(), failures.end(), [&](const Json& a, const Json& b) {
      return cell_index[a.at("config_hash").get<std::string>()] < cell_index[b.at("config_hash").get<std::string>()];
    });
    std::string fb;
    for (const auto& f : failures) fb += f.dump() + "\n";
    write_atomic(fpath, fb);
    std::cerr << failures.size() << " cell(s) failed; see " << fpath << "\n";
  }

  if (!done.empty()) cmd_table(out);
  return failures.empty() ? kOk : kCellsFailed;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Continual-learning experiments for spoofed-audio detection"};
  app.require_subcommand(1);

  std::string config_path, out_flag;
  bool force = false;
  unsigned jobs = std::max(1u, std::thread::hardware_concurrency());
  std::uint64_t seed_offset = 0;

  auto* gen = app.add_subcommand("gen-data", "Generate the task stream and its manifest");
  gen->add_option("--config", config_path, "Experiment config (JSON)")->required();
  gen->add_option("--out", out_flag, "Output directory");
  gen->add_flag("--force", force, "Replace an existing stream");

  auto* run = app.add_subcommand("run", "Run the method x memory x seed matrix");
  run->add_option("--config", config_path, "Experiment config (JSON)")->required();
  run->add_option("--out", out_flag, "Output directory");
  run->add_option("--jobs", jobs, "Parallel runs")->check(CLI::PositiveNumber);
  run->add_option("--seed-offset", seed_offset, "Added to every seed in the config");
  run->add_flag("--force", force, "Discard existing results and regenerate mismatched data");

  auto* table = app.add_subcommand("table", "Summarize results as text and CSV tables");
  table->add_option("--config", config_path, "Experiment config; supplies the output directory");
  table->add_option("--out", out_flag, "Results directory");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kConfigError;
  }

  try {
    if (table->parsed()) {
      std::string from_config;
      if (!config_path.empty()) from_config = load_experiment(config_path).out;
      const std::string out = resolve_out(out_flag, from_config);
      if (out.empty()) throw UsageError("table: give --out, --config or CADE_OUT");
      return cmd_table(out);
    }
    const ExperimentConfig cfg = load_experiment(config_path);
    const std::string out = resolve_out(out_flag, cfg.out);
    if (gen->parsed()) return cmd_gendata(cfg, out, force);
    return cmd_run(cfg, out, jobs, seed_offset, force);
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kConfigError;
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kConfigError;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kCellsFailed;
  }
}
