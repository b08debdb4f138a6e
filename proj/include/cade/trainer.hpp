#pragma once

// Sequential-task training and evaluation.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "cade/continual.hpp"
#include "cade/model.hpp"
#include "cade/optimizer.hpp"
#include "cade/synth.hpp"

namespace cade {

struct RunConfig {
  MethodSpec method;
  ModelConfig model;
  OptimizerConfig optimizer;
  std::size_t epochs = 5;       // per task; joint uses the same count on the union
  std::size_t batch_size = 32;  // total rows per step, replay draws included
  double replay_fraction = 0.5;  // share of each batch drawn from the buffer
  std::size_t memory = 500;  // buffer capacity; ewc/mas importance samples by default
  BufferStrategy buffer = BufferStrategy::fixed_random;
  std::size_t eval_batch = 256;
  std::uint64_t seed = 1;

  void validate() const;
};

/// Per-utterance scores: bona fide logit minus spoof logit.
struct ScoreSet {
  std::vector<double> scores;
  std::vector<int> labels;
};

ScoreSet evaluate(const Model& m, const std::vector<FeatureMap>& data, std::size_t batch = 256);

struct EerPoint {
  double eer = 0, threshold = 0, far = 0, frr = 0;
};
/// Accept iff score >= threshold. Candidates: -inf, midpoints of adjacent
/// distinct scores, +inf. Picks the smallest |FAR - FRR|, earliest threshold
/// on ties, and reports (FAR + FRR) / 2.
EerPoint eer_point(const ScoreSet& s);
double eer(const ScoreSet& s);

/// Observers for instrumentation; all optional.
struct RunHooks {
  std::function<void(std::size_t task, std::size_t draws)> buffer_sample;
  std::function<void(std::size_t task)> buffer_insert;
  /// Called for every teacher forward pass with the teacher's parameter checksum.
  std::function<void(std::size_t task, std::uint64_t checksum)> teacher_forward;
  std::function<void(std::size_t task, std::size_t step, const ObjectiveTerms& terms)> step;
  std::function<void(std::size_t task, const Model& m)> task_end;
};

struct RunReport {
  std::string method;
  std::size_t memory = 0;
  std::uint64_t seed = 0;
  /// Row t: EER on each seen task's eval split after training task t.
  /// Joint has one row covering every task.
  std::vector<std::vector<double>> per_task_eer;
  double final_eer = 0;  // pooled over all tasks' eval splits
  std::string stream_fingerprint;
  std::string config_hash;
  double wall_ms = 0;
};

struct RunResult {
  RunReport report;
  Model model;
};

/// Identity of a run: hash of the run config and the stream fingerprint.
std::string run_config_hash(const RunConfig& cfg, const std::string& stream_fingerprint);

/// Non-finite losses abort with the task and step index.
RunResult run_sequential(const RunConfig& cfg, const TaskStream& stream, const RunHooks& hooks = {});

struct SummaryRow {
  std::string method;  // display name
  std::size_t memory = 0;
  std::size_t runs = 0;
  double mean = 0, std = 0;  // final EER, sample std (0 for one run)
};

/// Groups by (method, memory). Row order: Joint, Finetune, EWC, LWF, MAS,
/// Replay, DFWF, CADE; memory ascending within a method.
std::vector<SummaryRow> aggregate(const std::vector<RunReport>& reports);

}  // namespace cade
