#pragma once

// Continual-learning losses, replay memory and importance-based baselines.
//
// Losses are built on a student graph. Teacher-side inputs are plain tensors
// and enter the graph as constants, so gradients only reach the student.

#include <cstddef>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "cade/autodiff.hpp"
#include "cade/features.hpp"
#include "cade/model.hpp"
#include "cade/random.hpp"

namespace cade {

struct LossWeights {
  double alpha = 1.0;  // kd
  double beta = 0.1;   // attention distillation
  double gamma = 0.5;  // positive sample alignment

  void validate() const;
  bool operator==(const LossWeights&) const = default;
};

/// Mean softmax cross-entropy; labels in {0, 1}.
ag::Var classification_loss(ag::Var logits, const std::vector<std::size_t>& labels);

/// -mean_n sum_k sigmoid(teacher[n,k]) * log sigmoid(student[n,k]).
/// Rank-1 inputs are one sample.
ag::Var kd_loss(const Tensor& teacher_logits, ag::Var student_logits);

/// mean_n sum_j |t[n,j]/|t[n]| - s[n,j]/|s[n]||; a zero-norm row normalizes to zeros.
ag::Var ad_loss(const Tensor& teacher_maps, ag::Var student_maps);

/// sum over layers of (1/N_P) sum over positive rows of (1 - cos(teacher, student)).
/// Zero when no row is positive.
ag::Var psa_loss(const std::vector<Tensor>& teacher_taps, const std::vector<ag::Var>& student_taps,
                 const std::vector<bool>& positive);
/// Diagnostic: the same sum with the raw cosine similarity in place of (1 - cos).
double psa_similarity_sum(const std::vector<Tensor>& teacher_taps, const std::vector<Tensor>& student_taps,
                          const std::vector<bool>& positive);

ag::Var cade_loss(ag::Var l_c, ag::Var l_kd, ag::Var l_ad, ag::Var l_psa, const LossWeights& w);

// Plain-value versions for callers without a graph.
double kd_loss_value(const Tensor& teacher_logits, const Tensor& student_logits);
double ad_loss_value(const Tensor& teacher_maps, const Tensor& student_maps);
double psa_loss_value(const std::vector<Tensor>& teacher_taps, const std::vector<Tensor>& student_taps,
                      const std::vector<bool>& positive);
double cade_loss_value(double l_c, double l_kd, double l_ad, double l_psa, const LossWeights& w);

// ---------------------------------------------------------------------------
// Importance maps (EWC / MAS)

struct ImportanceMap {
  std::map<std::string, Tensor> importance;
  std::map<std::string, Tensor> anchor;

  bool empty() const { return importance.empty(); }
  /// Sums importance with `next` and takes its anchors.
  void accumulate(const ImportanceMap& next);
  /// Scales every importance so the largest entry across all parameters is 1.
  /// An all-zero map is left unchanged.
  void normalize_max();
};

/// Builds logits [N, 2] for a batch from bound parameters.
using LogitFn = std::function<ag::Var(ag::Graph&, const Bindings&, const Tensor& batch)>;
LogitFn model_logits(const ModelConfig& cfg);

/// Diagonal Fisher: mean over samples of squared gradients of log p(y | x).
/// y is drawn from the model's own predictive distribution when
/// `sample_label` is set, otherwise `labels` (one per input) are used.
ImportanceMap estimate_fisher(const ag::ParameterStore& params, const LogitFn& logits,
                              const std::vector<Tensor>& inputs, Rng& rng, bool sample_label = true,
                              const std::vector<std::size_t>& labels = {});
/// Mean over samples of |d ||logits||^2 / d param|.
ImportanceMap mas_importance(const ag::ParameterStore& params, const LogitFn& logits,
                             const std::vector<Tensor>& inputs);

/// (lambda / 2) * sum importance * (param - anchor)^2 over the map's entries.
ag::Var quadratic_penalty(const Bindings& params, const ImportanceMap& imp, double lambda);
double quadratic_penalty_value(const ag::ParameterStore& params, const ImportanceMap& imp, double lambda);

// ---------------------------------------------------------------------------
// Replay memory

enum class BufferStrategy { fixed_random, reservoir, ring_buffer, mean_of_feature };

std::string strategy_name(BufferStrategy s);
BufferStrategy parse_strategy(const std::string& name);

/// Per-item feature vectors, used by mean-of-feature selection.
using FeatureFn = std::function<std::vector<std::vector<double>>(const std::vector<FeatureMap>&)>;

class MemoryBuffer {
 public:
  MemoryBuffer(std::size_t capacity, BufferStrategy strategy);

  /// Offers a finished task's training data.
  ///   fixed-random     uniform subset; per-task quotas m / tasks, remainder
  ///                    to the earliest task, unused quota passed on
  ///   mean-of-feature  same quotas; per class, the items nearest the class mean
  ///   reservoir        every item streamed through reservoir sampling
  ///   ring-buffer      every item pushed through a per-class FIFO of m / 2
  void insert_task(const std::vector<FeatureMap>& data, Rng& rng, const FeatureFn& features = {});
  /// Streams one item (reservoir and ring-buffer only).
  void observe(const FeatureMap& item, Rng& rng);

  /// n draws without replacement, or with replacement when n > size().
  std::vector<const FeatureMap*> sample(std::size_t n, Rng& rng) const;

  /// Items visible to training. Ring-buffer exposes a class-balanced view.
  const std::vector<FeatureMap>& items() const {
    refresh();
    return view_;
  }
  std::size_t size() const { return items().size(); }
  /// Items held internally (>= size() only for ring-buffer).
  std::size_t stored() const;
  std::size_t capacity() const { return capacity_; }
  BufferStrategy strategy() const { return strategy_; }
  std::uint64_t seen() const { return seen_; }

  /// Stored items as a feature file (task-id and label kept per record).
  std::string encode() const;
  static MemoryBuffer decode(const std::string& bytes, std::size_t capacity, BufferStrategy strategy,
                             std::uint64_t seen);

 private:
  void refresh() const;
  void apply_quotas();

  std::size_t capacity_;
  BufferStrategy strategy_;
  std::uint64_t seen_ = 0;
  std::vector<std::vector<FeatureMap>> per_task_;  // fixed-random, mean-of-feature
  std::vector<FeatureMap> pool_;                   // reservoir
  std::vector<FeatureMap> fifo_[2];                // ring-buffer, per class, oldest first
  mutable std::vector<FeatureMap> view_;
  mutable bool dirty_ = false;
};

/// Water-filling quotas: equal shares of `capacity`, remainder to the first
/// entry, any share exceeding `available[i]` redistributed the same way.
std::vector<std::size_t> fill_quotas(std::size_t capacity, const std::vector<std::size_t>& available);

// ---------------------------------------------------------------------------
// Methods

enum class Method { finetune, replay, joint, ewc, mas, lwf, dfwf, cade };

std::string method_name(Method m);
/// Display name used in tables (e.g. "Finetune", "CADE").
std::string method_display_name(Method m);
Method parse_method(const std::string& name);

struct MethodSpec {
  Method kind = Method::cade;
  LossWeights weights;           // cade: all three; lwf/dfwf: alpha, dfwf: gamma
  double lambda = 100.0;         // ewc, mas
  bool fisher_sampled_label = true;
  std::size_t importance_samples = 0;  // 0: as many as the run's memory size
  bool normalize_importance = true;     // scale each task's importance to max 1
  bool dfwf_uses_buffer = true;

  bool uses_teacher() const;
  bool uses_buffer() const;
  bool uses_importance() const { return kind == Method::ewc || kind == Method::mas; }
  /// True when the run's memory size changes the result.
  bool uses_memory() const;
  void validate() const;
  bool operator==(const MethodSpec&) const = default;
};

/// Teacher outputs on the training batch.
struct TeacherOutputs {
  Tensor logits;
  std::vector<Tensor> taps;
  Tensor maps;  // Grad-CAM at the student's predicted classes; empty when unused
};

struct ObjectiveInputs {
  std::size_t task_index = 0;
  ag::Var logits;
  const std::vector<std::size_t>* labels = nullptr;
  std::vector<ag::Var> student_taps;
  std::optional<ag::Var> student_maps;
  const TeacherOutputs* teacher = nullptr;
  const Bindings* params = nullptr;
  const ImportanceMap* importance = nullptr;
};

struct ObjectiveTerms {
  ag::Var total;
  double l_c = 0, l_kd = 0, l_ad = 0, l_psa = 0, penalty = 0;
};

ObjectiveTerms method_objective(const MethodSpec& spec, const ObjectiveInputs& in);

/// Student's predicted class per row (ties go to class 0).
std::vector<std::size_t> argmax_classes(const Tensor& logits);

/// Grad-CAM maps of the student on the graph: the channel weights are taken
/// from the current activations and held constant, the maps stay differentiable
/// in the activations.
ag::Var student_attention(const Model& student, ag::Var activation, const std::vector<std::size_t>& classes);

}  // namespace cade
