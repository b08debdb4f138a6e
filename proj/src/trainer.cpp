#include "cade/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <limits>
#include <map>
#include <numeric>
#include <set>

#include "cade/hash.hpp"
#include "cade/json_convert.hpp"

namespace cade {

void RunConfig::validate() const {
  method.validate();
  model.validate();
  if (epochs == 0) throw Error("run: epochs must be positive");
  if (batch_size == 0) throw Error("run: batch_size must be positive");
  if (eval_batch == 0) throw Error("run: eval_batch must be positive");
  if (!(replay_fraction >= 0 && replay_fraction < 1)) throw Error("run: replay_fraction must be in [0, 1)");
  if (method.uses_memory() && memory == 0) throw Error("run: " + method_name(method.kind) + " needs memory > 0");
  if (!(optimizer.lr > 0) || !std::isfinite(optimizer.lr)) throw Error("run: learning rate must be positive");
}

ScoreSet evaluate(const Model& m, const std::vector<FeatureMap>& data, std::size_t batch) {
  if (data.empty()) throw Error("evaluate: empty eval set");
  if (batch == 0) throw Error("evaluate: batch must be positive");
  ScoreSet s;
  for (std::size_t lo = 0; lo < data.size(); lo += batch) {
    const std::size_t hi = std::min(data.size(), lo + batch);
    std::vector<const FeatureMap*> rows;
    for (std::size_t i = lo; i < hi; ++i) {
      if (data[i].coeffs != m.config.in_h || data[i].frames != m.config.in_w)
        throw Error("evaluate: feature map " + std::to_string(i) + " is " + std::to_string(data[i].frames) + "x" +
                    std::to_string(data[i].coeffs) + " frames x coeffs, model expects " +
                    std::to_string(m.config.in_w) + "x" + std::to_string(m.config.in_h));
      rows.push_back(&data[i]);
    }
    const Tensor logits = forward(m, make_batch(rows));
    for (std::size_t i = 0; i < rows.size(); ++i) {
      s.scores.push_back(logits[i * 2 + kBonaFide] - logits[i * 2 + kSpoof]);
      s.labels.push_back(rows[i]->label);
    }
  }
  return s;
}

EerPoint eer_point(const ScoreSet& s) {
  if (s.scores.size() != s.labels.size()) throw Error("eer: scores and labels differ in length");
  std::vector<double> bona, spoof;
  for (std::size_t i = 0; i < s.scores.size(); ++i) {
    if (!std::isfinite(s.scores[i])) throw Error("eer: score " + std::to_string(i) + " is not finite");
    (s.labels[i] == kBonaFide ? bona : spoof).push_back(s.scores[i]);
  }
  if (bona.empty() || spoof.empty()) throw Error("eer: needs both bona fide and spoof scores");
  std::sort(bona.begin(), bona.end());
  std::sort(spoof.begin(), spoof.end());

  std::vector<double> all = s.scores;
  std::sort(all.begin(), all.end());
  all.erase(std::unique(all.begin(), all.end()), all.end());
  std::vector<double> thresholds{-std::numeric_limits<double>::infinity()};
  for (std::size_t i = 0; i + 1 < all.size(); ++i) thresholds.push_back(all[i] + (all[i + 1] - all[i]) / 2);
  thresholds.push_back(std::numeric_limits<double>::infinity());

  const auto nb = static_cast<long long>(bona.size()), ns = static_cast<long long>(spoof.size());
  EerPoint best;
  long long best_gap = -1;
  for (double t : thresholds) {
    // accepted spoofs and rejected bona fide, by direct position
    const auto fa = static_cast<long long>(spoof.end() - std::lower_bound(spoof.begin(), spoof.end(), t));
    const auto fr = static_cast<long long>(std::lower_bound(bona.begin(), bona.end(), t) - bona.begin());
    const long long gap = std::llabs(fa * nb - fr * ns);  // |FAR - FRR| * nb * ns, exact
    if (best_gap < 0 || gap < best_gap) {
      best_gap = gap;
      best.threshold = t;
      best.far = static_cast<double>(fa) / static_cast<double>(ns);
      best.frr = static_cast<double>(fr) / static_cast<double>(nb);
      best.eer = (best.far + best.frr) / 2;
    }
  }
  return best;
}

double eer(const ScoreSet& s) { return eer_point(s).eer; }

std::string run_config_hash(const RunConfig& cfg, const std::string& fingerprint) {
  Json j{{"run", to_json(cfg)}, {"stream", fingerprint}};
  return fnv1a_hex(j.dump());
}

namespace {

using Clock = std::chrono::steady_clock;

std::vector<std::size_t> permutation(std::size_t n, Rng& rng) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  for (std::size_t i = n; i > 1; --i) std::swap(idx[i - 1], idx[rng.below(i)]);
  return idx;
}

FeatureFn embedding_features(const Model& m) {
  return [&m](const std::vector<FeatureMap>& data) {
    std::vector<std::vector<double>> out;
    const std::size_t last = m.config.taps.empty() ? 0 : m.config.taps.size() - 1;
    for (std::size_t lo = 0; lo < data.size(); lo += 256) {
      std::vector<const FeatureMap*> rows;
      for (std::size_t i = lo; i < std::min(data.size(), lo + 256); ++i) rows.push_back(&data[i]);
      auto r = forward_with_taps(m, make_batch(rows));
      const Tensor& e = m.config.taps.empty() ? r.logits : r.taps.embeddings[last];
      const std::size_t d = e.dim(1);
      for (std::size_t i = 0; i < rows.size(); ++i)
        out.emplace_back(e.data() + i * d, e.data() + (i + 1) * d);
    }
    return out;
  };
}

TeacherOutputs teacher_outputs(const Model& teacher, const Tensor& x, const std::vector<std::size_t>* classes) {
  auto r = forward_with_taps(teacher, x);
  TeacherOutputs t{std::move(r.logits), std::move(r.taps.embeddings), Tensor()};
  if (classes) {
    const auto& cfg = teacher.config;
    const Tensor w = gradcam_weights(cfg, teacher.params, r.conv_activations, cfg.gradcam_layer, *classes);
    Tensor maps = eval_op(ag::OpKind::channel_weighted_sum, {r.conv_activations, w});
    if (cfg.gradcam_relu)
      for (auto& v : maps.values()) v = std::max(v, 0.0);
    t.maps = std::move(maps);
  }
  return t;
}

class Trainer {
 public:
  Trainer(const RunConfig& cfg, const RunHooks& hooks)
      : cfg_(cfg), hooks_(hooks), model_(init_model(cfg.model, Rng::derive(cfg.seed, 1))),
        buffer_(cfg.memory, cfg.buffer) {}

  Model& model() { return model_; }

  void train(const std::vector<const FeatureMap*>& data, std::size_t task) {
    const bool use_teacher = cfg_.method.uses_teacher() && task > 0;
    const bool use_buffer = cfg_.method.uses_buffer() && buffer_.size() > 0;
    ModelSnapshot teacher;
    std::uint64_t teacher_sum = 0;
    if (use_teacher) {
      teacher = snapshot(model_);
      if (hooks_.teacher_forward) teacher_sum = parameter_checksum(teacher.model().params);
    }

    std::size_t fresh = cfg_.batch_size;
    if (use_buffer) {
      const auto replay = static_cast<std::size_t>(std::llround(double(cfg_.batch_size) * cfg_.replay_fraction));
      fresh = std::max<std::size_t>(1, cfg_.batch_size - replay);
    }
    Rng rng(Rng::derive(cfg_.seed, 100 + task));
    const bool want_maps = cfg_.method.kind == Method::cade && use_teacher;
    const bool want_taps = use_teacher && cfg_.method.kind != Method::lwf;

    for (std::size_t epoch = 0; epoch < cfg_.epochs; ++epoch) {
      const auto order = permutation(data.size(), rng);
      for (std::size_t lo = 0; lo < order.size(); lo += fresh) {
        const std::size_t hi = std::min(order.size(), lo + fresh);
        std::vector<const FeatureMap*> rows;
        for (std::size_t i = lo; i < hi; ++i) rows.push_back(data[order[i]]);
        if (use_buffer) {
          const std::size_t draws = static_cast<std::size_t>(std::llround(
              double(rows.size()) * cfg_.replay_fraction / (1.0 - cfg_.replay_fraction)));
          if (draws > 0) {
            auto extra = buffer_.sample(draws, rng);
            rows.insert(rows.end(), extra.begin(), extra.end());
            if (hooks_.buffer_sample) hooks_.buffer_sample(task, draws);
          }
        }
        try {
          step(rows, task, want_taps, want_maps, use_teacher ? &teacher.model() : nullptr, teacher_sum);
        } catch (const Error& e) {
          const std::string msg = e.what();
          if (msg.rfind("run:", 0) == 0) throw;
          throw Error("run: task " + std::to_string(task) + ", step " + std::to_string(steps_) + ": " + msg);
        }
      }
    }
  }

  void finish_task(const std::vector<FeatureMap>& data, std::size_t task) {
    if (cfg_.method.uses_buffer()) {
      Rng rng(Rng::derive(cfg_.seed, 200 + task));
      buffer_.insert_task(data, rng, embedding_features(model_));
      if (hooks_.buffer_insert) hooks_.buffer_insert(task);
    }
    if (cfg_.method.uses_importance()) {
      Rng rng(Rng::derive(cfg_.seed, 300 + task));
      const auto order = permutation(data.size(), rng);
      std::vector<Tensor> inputs;
      const std::size_t n = cfg_.method.importance_samples ? cfg_.method.importance_samples : cfg_.memory;
      for (std::size_t i = 0; i < std::min(n, data.size()); ++i)
        inputs.push_back(make_batch({&data[order[i]]}));
      const auto fn = model_logits(model_.config);
      ImportanceMap next = cfg_.method.kind == Method::ewc
                               ? estimate_fisher(model_.params, fn, inputs, rng, cfg_.method.fisher_sampled_label,
                                                 labels_of(data, order, inputs.size()))
                               : mas_importance(model_.params, fn, inputs);
      // raw scales track logit size; unnormalized, lambda * importance can exceed
      // what sgd with momentum tolerates and the run diverges
      if (cfg_.method.normalize_importance) next.normalize_max();
      importance_.accumulate(next);
    }
    if (hooks_.task_end) hooks_.task_end(task, model_);
  }

 private:
  static std::vector<std::size_t> labels_of(const std::vector<FeatureMap>& data, const std::vector<std::size_t>& order,
                                            std::size_t n) {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < n; ++i) out.push_back(static_cast<std::size_t>(data[order[i]].label));
    return out;
  }

  void step(const std::vector<const FeatureMap*>& rows, std::size_t task, bool want_taps, bool want_maps,
            const Model* teacher, std::uint64_t teacher_sum) {
    const Tensor x = make_batch(rows);
    std::vector<std::size_t> labels;
    for (const auto* r : rows) labels.push_back(static_cast<std::size_t>(r->label));

    ag::Graph g;
    auto p = bind(g, model_.params, true);
    auto f = forward_graph(model_.config, p, g.constant(x), {.record_taps = want_taps, .gradcam_layer = std::nullopt});

    ObjectiveInputs in;
    in.task_index = task;
    in.logits = f.logits;
    in.labels = &labels;
    in.student_taps = f.taps;
    in.params = &p;
    in.importance = &importance_;

    TeacherOutputs t;
    if (teacher) {
      std::vector<std::size_t> classes;
      if (want_maps) {
        classes = argmax_classes(f.logits.value());
        in.student_maps = student_attention(model_, *f.activation, classes);
      }
      t = teacher_outputs(*teacher, x, want_maps ? &classes : nullptr);
      if (hooks_.teacher_forward) hooks_.teacher_forward(task, teacher_sum);
      in.teacher = &t;
    }

    auto terms = method_objective(cfg_.method, in);
    if (!std::isfinite(terms.total.value().item()))
      throw Error("run: non-finite loss at task " + std::to_string(task) + ", step " + std::to_string(steps_));
    g.backward(terms.total);
    model_.params.zero_grads();
    g.accumulate_parameter_grads(model_.params);
    optimizer_step(model_.params, cfg_.optimizer, opt_);
    if (hooks_.step) hooks_.step(task, steps_, terms);
    ++steps_;
  }

  const RunConfig& cfg_;
  const RunHooks& hooks_;
  Model model_;
  MemoryBuffer buffer_;
  ImportanceMap importance_;
  OptimizerState opt_;
  std::size_t steps_ = 0;
};

std::vector<const FeatureMap*> pointers(const std::vector<FeatureMap>& data) {
  std::vector<const FeatureMap*> out;
  for (const auto& m : data) out.push_back(&m);
  return out;
}

}  // namespace

RunResult run_sequential(const RunConfig& cfg, const TaskStream& stream, const RunHooks& hooks) {
  cfg.validate();
  stream.validate();
  const auto start = Clock::now();
  Trainer trainer(cfg, hooks);
  RunReport report;
  report.method = method_name(cfg.method.kind);
  report.memory = cfg.method.uses_memory() ? cfg.memory : 0;
  report.seed = cfg.seed;
  report.stream_fingerprint = stream.fingerprint;
  report.config_hash = run_config_hash(cfg, stream.fingerprint);

  // errors outside a training step still say where the run was
  auto at = [](const std::string& where, auto&& f) {
    try {
      f();
    } catch (const Error& e) {
      const std::string msg = e.what();
      if (msg.rfind("run:", 0) == 0) throw;
      throw Error("run: " + where + ": " + msg);
    }
  };
  auto eval_row = [&](std::size_t upto) {
    std::vector<double> row;
    for (std::size_t k = 0; k <= upto; ++k)
      row.push_back(eer(evaluate(trainer.model(), stream.tasks[k].eval, cfg.eval_batch)));
    report.per_task_eer.push_back(std::move(row));
  };

  if (cfg.method.kind == Method::joint) {
    std::vector<const FeatureMap*> all;
    for (const auto& t : stream.tasks)
      for (const auto& m : t.train) all.push_back(&m);
    trainer.train(all, 0);
    at("evaluation after joint training", [&] { eval_row(stream.tasks.size() - 1); });
  } else {
    for (std::size_t t = 0; t < stream.tasks.size(); ++t) {
      trainer.train(pointers(stream.tasks[t].train), t);
      at("end of task " + std::to_string(t), [&] {
        trainer.finish_task(stream.tasks[t].train, t);
        eval_row(t);
      });
    }
  }

  std::vector<FeatureMap> pooled;
  for (const auto& t : stream.tasks) pooled.insert(pooled.end(), t.eval.begin(), t.eval.end());
  at("final evaluation", [&] { report.final_eer = eer(evaluate(trainer.model(), pooled, cfg.eval_batch)); });
  report.wall_ms = std::chrono::duration<double, std::milli>(Clock::now() - start).count();
  return {std::move(report), std::move(trainer.model())};
}

namespace {

int method_rank(const std::string& name) {
  static const std::vector<Method> order{Method::joint, Method::finetune, Method::ewc,  Method::lwf,
                                         Method::mas,   Method::replay,   Method::dfwf, Method::cade};
  const Method m = parse_method(name);
  return static_cast<int>(std::find(order.begin(), order.end(), m) - order.begin());
}

}  // namespace

std::vector<SummaryRow> aggregate(const std::vector<RunReport>& reports) {
  if (reports.empty()) throw Error("aggregate: no reports");
  for (const auto& r : reports)
    if (r.stream_fingerprint != reports[0].stream_fingerprint)
      throw Error("aggregate: reports come from different task streams (" + reports[0].stream_fingerprint + " and " +
                  r.stream_fingerprint + ")");
  std::map<std::pair<int, std::size_t>, std::vector<double>> groups;
  std::map<int, std::string> names;
  for (const auto& r : reports) {
    const int rank = method_rank(r.method);
    groups[{rank, r.memory}].push_back(r.final_eer);
    names[rank] = method_display_name(parse_method(r.method));
  }
  std::vector<SummaryRow> rows;
  for (const auto& [key, v] : groups) {
    SummaryRow row{names[key.first], key.second, v.size(), 0, 0};
    row.mean = std::accumulate(v.begin(), v.end(), 0.0) / double(v.size());
    if (v.size() > 1) {
      double ss = 0;
      for (double e : v) ss += (e - row.mean) * (e - row.mean);
      row.std = std::sqrt(ss / double(v.size() - 1));
    }
    rows.push_back(row);
  }
  return rows;
}

}  // namespace cade
