#include "cade/continual.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "cade/synth.hpp"

namespace cade {

void LossWeights::validate() const {
  for (double v : {alpha, beta, gamma})
    if (!(v >= 0) || !std::isfinite(v)) throw Error("loss weights must be finite and non-negative");
}

// ---------------------------------------------------------------------------
// Losses

namespace {

std::size_t batch_rows(const Shape& s) { return s.size() >= 2 ? s[0] : 1; }

ag::Var zero_scalar(ag::Graph& g) { return g.constant(Tensor({1}, 0.0)); }

}  // namespace

ag::Var classification_loss(ag::Var logits, const std::vector<std::size_t>& labels) {
  if (labels.empty()) throw Error("classification_loss: empty batch");
  for (auto y : labels)
    if (y > 1) throw Error("classification_loss: label " + std::to_string(y) + " is not 0 or 1");
  return ag::softmax_cross_entropy(logits, labels);
}

ag::Var kd_loss(const Tensor& teacher_logits, ag::Var student_logits) {
  if (teacher_logits.shape() != student_logits.shape())
    throw Error("kd_loss: teacher logits " + shape_str(teacher_logits.shape()) + " vs student " +
                shape_str(student_logits.shape()));
  auto& g = *student_logits.graph;
  const Tensor soft = ag::eval_op(ag::OpKind::sigmoid, {teacher_logits});
  const double n = static_cast<double>(batch_rows(teacher_logits.shape()));
  return ag::scale(ag::sum(ag::mul(g.constant(soft), ag::log_sigmoid(student_logits))), -1.0 / n);
}

ag::Var ad_loss(const Tensor& teacher_maps, ag::Var student_maps) {
  if (teacher_maps.shape() != student_maps.shape())
    throw Error("ad_loss: teacher map " + shape_str(teacher_maps.shape()) + " vs student " +
                shape_str(student_maps.shape()));
  auto& g = *student_maps.graph;
  const Tensor qt = ag::eval_op(ag::OpKind::normalize, {teacher_maps});
  const double n = static_cast<double>(batch_rows(teacher_maps.shape()));
  return ag::scale(ag::sum(ag::abs(ag::sub(g.constant(qt), ag::normalize(student_maps)))), 1.0 / n);
}

ag::Var psa_loss(const std::vector<Tensor>& teacher_taps, const std::vector<ag::Var>& student_taps,
                 const std::vector<bool>& positive) {
  if (student_taps.empty()) throw Error("psa_loss: no tap layers");
  if (teacher_taps.size() != student_taps.size())
    throw Error("psa_loss: teacher has " + std::to_string(teacher_taps.size()) + " tap layers, student " +
                std::to_string(student_taps.size()));
  auto& g = *student_taps[0].graph;
  const std::size_t n = batch_rows(student_taps[0].shape());
  if (positive.size() != n)
    throw Error("psa_loss: mask of " + std::to_string(positive.size()) + " for a batch of " + std::to_string(n));
  const auto n_pos = static_cast<std::size_t>(std::count(positive.begin(), positive.end(), true));
  for (std::size_t l = 0; l < teacher_taps.size(); ++l)
    if (teacher_taps[l].shape() != student_taps[l].shape())
      throw Error("psa_loss: tap " + std::to_string(l) + " shapes differ: " + shape_str(teacher_taps[l].shape()) +
                  " vs " + shape_str(student_taps[l].shape()));
  if (n_pos == 0) return zero_scalar(g);
  Tensor mask({n}, 0.0);
  for (std::size_t i = 0; i < n; ++i) mask[i] = positive[i] ? 1.0 : 0.0;
  auto ones = g.constant(Tensor({n}, 1.0));
  auto m = g.constant(mask);
  std::optional<ag::Var> total;
  for (std::size_t l = 0; l < teacher_taps.size(); ++l) {
    auto cos = ag::cosine_similarity(g.constant(teacher_taps[l]), student_taps[l]);
    auto term = ag::scale(ag::sum(ag::mul(ag::sub(ones, cos), m)), 1.0 / static_cast<double>(n_pos));
    total = total ? ag::add(*total, term) : term;
  }
  return *total;
}

double psa_similarity_sum(const std::vector<Tensor>& teacher_taps, const std::vector<Tensor>& student_taps,
                          const std::vector<bool>& positive) {
  if (teacher_taps.size() != student_taps.size()) throw Error("psa_similarity_sum: tap mismatch");
  const auto n_pos = static_cast<std::size_t>(std::count(positive.begin(), positive.end(), true));
  if (n_pos == 0) return 0.0;
  double total = 0.0;
  for (std::size_t l = 0; l < teacher_taps.size(); ++l) {
    const Tensor cos = ag::eval_op(ag::OpKind::cosine_similarity, {teacher_taps[l], student_taps[l]});
    double s = 0.0;
    for (std::size_t i = 0; i < positive.size(); ++i)
      if (positive[i]) s += cos[i];
    total += s / static_cast<double>(n_pos);
  }
  return total;
}

ag::Var cade_loss(ag::Var l_c, ag::Var l_kd, ag::Var l_ad, ag::Var l_psa, const LossWeights& w) {
  w.validate();
  return ag::add(ag::add(ag::add(l_c, ag::scale(l_kd, w.alpha)), ag::scale(l_ad, w.beta)), ag::scale(l_psa, w.gamma));
}

double kd_loss_value(const Tensor& teacher_logits, const Tensor& student_logits) {
  ag::Graph g;
  return kd_loss(teacher_logits, g.constant(student_logits)).value().item();
}

double ad_loss_value(const Tensor& teacher_maps, const Tensor& student_maps) {
  ag::Graph g;
  return ad_loss(teacher_maps, g.constant(student_maps)).value().item();
}

double psa_loss_value(const std::vector<Tensor>& teacher_taps, const std::vector<Tensor>& student_taps,
                      const std::vector<bool>& positive) {
  ag::Graph g;
  std::vector<ag::Var> s;
  for (const auto& t : student_taps) s.push_back(g.constant(t));
  return psa_loss(teacher_taps, s, positive).value().item();
}

double cade_loss_value(double l_c, double l_kd, double l_ad, double l_psa, const LossWeights& w) {
  ag::Graph g;
  auto c = [&](double v) { return g.constant(Tensor::scalar(v)); };
  return cade_loss(c(l_c), c(l_kd), c(l_ad), c(l_psa), w).value().item();
}

// ---------------------------------------------------------------------------
// Importance

void ImportanceMap::accumulate(const ImportanceMap& next) {
  for (const auto& [name, t] : next.importance) {
    auto it = importance.find(name);
    if (it == importance.end()) {
      importance.emplace(name, t);
      continue;
    }
    if (it->second.shape() != t.shape()) throw Error("importance: shape mismatch for '" + name + "'");
    for (std::size_t i = 0; i < t.size(); ++i) it->second[i] += t[i];
  }
  anchor = next.anchor;
}

void ImportanceMap::normalize_max() {
  double top = 0;
  for (const auto& [name, t] : importance)
    for (double v : t.values()) top = std::max(top, std::abs(v));
  if (top == 0) return;
  for (auto& [name, t] : importance)
    for (std::size_t i = 0; i < t.size(); ++i) t[i] /= top;
}

LogitFn model_logits(const ModelConfig& cfg) {
  return [cfg](ag::Graph& g, const Bindings& p, const Tensor& batch) {
    return forward_graph(cfg, p, g.constant(batch), {.record_taps = false, .gradcam_layer = std::nullopt}).logits;
  };
}

namespace {

// Mean over inputs of transform(d root / d param), root built per input.
template <class Root, class Transform>
ImportanceMap importance_pass(const ag::ParameterStore& params, const LogitFn& logits,
                              const std::vector<Tensor>& inputs, Root root_of, Transform transform) {
  if (inputs.empty()) throw Error("importance: empty data");
  ImportanceMap out;
  for (const auto& [name, e] : params.entries()) {
    out.importance.emplace(name, Tensor(e.value.shape(), 0.0));
    out.anchor.emplace(name, e.value);
  }
  const double inv = 1.0 / static_cast<double>(inputs.size());
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    ag::Graph g;
    auto p = bind(g, params, true);
    auto z = logits(g, p, inputs[i]);
    g.backward(root_of(i, z));
    for (const auto& [name, v] : p) {
      const Tensor grad = g.grad(v);
      Tensor& acc = out.importance.at(name);
      for (std::size_t j = 0; j < grad.size(); ++j) acc[j] += transform(grad[j]) * inv;
    }
  }
  return out;
}

}  // namespace

ImportanceMap estimate_fisher(const ag::ParameterStore& params, const LogitFn& logits,
                              const std::vector<Tensor>& inputs, Rng& rng, bool sample_label,
                              const std::vector<std::size_t>& labels) {
  if (!sample_label && labels.size() != inputs.size())
    throw Error("estimate_fisher: need one label per input when labels are not sampled");
  auto root = [&](std::size_t i, ag::Var z) {
    if (z.shape() != Shape{1, 2}) throw Error("estimate_fisher: inputs must be single samples with 2 logits");
    std::size_t y;
    if (sample_label) {
      const double z0 = z.value()[0], z1 = z.value()[1];
      const double p0 = 1.0 / (1.0 + std::exp(z1 - z0));
      y = rng.uniform() < p0 ? 0 : 1;
    } else {
      y = labels[i];
    }
    return ag::softmax_cross_entropy(z, {y});
  };
  return importance_pass(params, logits, inputs, root, [](double g) { return g * g; });
}

ImportanceMap mas_importance(const ag::ParameterStore& params, const LogitFn& logits,
                             const std::vector<Tensor>& inputs) {
  auto root = [](std::size_t, ag::Var z) { return ag::sum(ag::mul(z, z)); };
  return importance_pass(params, logits, inputs, root, [](double g) { return std::abs(g); });
}

ag::Var quadratic_penalty(const Bindings& params, const ImportanceMap& imp, double lambda) {
  if (params.empty()) throw Error("quadratic_penalty: no parameters bound");
  auto& g = *params.begin()->second.graph;
  std::optional<ag::Var> total;
  for (const auto& [name, f] : imp.importance) {
    auto it = params.find(name);
    if (it == params.end()) throw Error("quadratic_penalty: no parameter named '" + name + "'");
    const Tensor& anchor = imp.anchor.at(name);
    if (anchor.shape() != it->second.shape() || f.shape() != anchor.shape())
      throw Error("quadratic_penalty: shape mismatch for '" + name + "': parameter " +
                  shape_str(it->second.shape()) + ", anchor " + shape_str(anchor.shape()) + ", importance " +
                  shape_str(f.shape()));
    auto d = ag::sub(it->second, g.constant(anchor));
    auto term = ag::sum(ag::mul(g.constant(f), ag::mul(d, d)));
    total = total ? ag::add(*total, term) : term;
  }
  if (!total) return zero_scalar(g);
  return ag::scale(*total, lambda / 2.0);
}

double quadratic_penalty_value(const ag::ParameterStore& params, const ImportanceMap& imp, double lambda) {
  ag::Graph g;
  return quadratic_penalty(bind(g, params, false), imp, lambda).value().item();
}

// ---------------------------------------------------------------------------
// Replay memory

std::string strategy_name(BufferStrategy s) {
  switch (s) {
    case BufferStrategy::fixed_random: return "fixed-random";
    case BufferStrategy::reservoir: return "reservoir";
    case BufferStrategy::ring_buffer: return "ring-buffer";
    case BufferStrategy::mean_of_feature: return "mean-of-feature";
  }
  return "unknown";
}

BufferStrategy parse_strategy(const std::string& name) {
  for (auto s : {BufferStrategy::fixed_random, BufferStrategy::reservoir, BufferStrategy::ring_buffer,
                 BufferStrategy::mean_of_feature})
    if (strategy_name(s) == name) return s;
  throw Error("unknown buffer strategy '" + name +
              "' (expected fixed-random, reservoir, ring-buffer or mean-of-feature)");
}

std::vector<std::size_t> fill_quotas(std::size_t capacity, const std::vector<std::size_t>& available) {
  std::vector<std::size_t> q(available.size(), 0);
  std::size_t remaining = capacity;
  while (remaining > 0) {
    std::vector<std::size_t> open;
    for (std::size_t i = 0; i < q.size(); ++i)
      if (q[i] < available[i]) open.push_back(i);
    if (open.empty()) break;
    const std::size_t share = remaining / open.size(), extra = remaining % open.size();
    for (std::size_t k = 0; k < open.size(); ++k) {
      const std::size_t i = open[k];
      const std::size_t give = std::min(share + (k == 0 ? extra : 0), available[i] - q[i]);
      q[i] += give;
      remaining -= give;
    }
  }
  return q;
}

MemoryBuffer::MemoryBuffer(std::size_t capacity, BufferStrategy strategy) : capacity_(capacity), strategy_(strategy) {}

std::size_t MemoryBuffer::stored() const {
  switch (strategy_) {
    case BufferStrategy::reservoir: return pool_.size();
    case BufferStrategy::ring_buffer: return fifo_[0].size() + fifo_[1].size();
    default: {
      std::size_t n = 0;
      for (const auto& t : per_task_) n += t.size();
      return n;
    }
  }
}

void MemoryBuffer::observe(const FeatureMap& item, Rng& rng) {
  if (item.label != kSpoof && item.label != kBonaFide)
    throw Error("buffer: item label " + std::to_string(item.label) + " is not 0 or 1");
  ++seen_;
  dirty_ = true;
  if (strategy_ == BufferStrategy::reservoir) {
    if (pool_.size() < capacity_) {
      pool_.push_back(item);
    } else if (capacity_ > 0) {
      const std::size_t j = rng.below(seen_);
      if (j < capacity_) pool_[j] = item;
    }
    return;
  }
  if (strategy_ == BufferStrategy::ring_buffer) {
    auto& q = fifo_[item.label];
    const std::size_t per_class = capacity_ / 2;
    if (per_class == 0) return;
    if (q.size() == per_class) q.erase(q.begin());
    q.push_back(item);
    return;
  }
  throw Error("buffer: " + strategy_name(strategy_) + " takes whole tasks, not single items");
}

namespace {

// Indices of one class ordered by distance to that class's mean feature.
std::vector<std::size_t> nearest_to_mean(const std::vector<std::vector<double>>& feats,
                                         const std::vector<std::size_t>& members) {
  if (members.empty()) return {};
  const std::size_t d = feats[members[0]].size();
  std::vector<double> mean(d, 0.0);
  for (auto i : members)
    for (std::size_t j = 0; j < d; ++j) mean[j] += feats[i][j];
  for (auto& v : mean) v /= static_cast<double>(members.size());
  std::vector<std::pair<double, std::size_t>> dist;
  for (auto i : members) {
    double s = 0.0;
    for (std::size_t j = 0; j < d; ++j) s += (feats[i][j] - mean[j]) * (feats[i][j] - mean[j]);
    dist.emplace_back(s, i);
  }
  std::stable_sort(dist.begin(), dist.end(), [](auto& a, auto& b) { return a.first < b.first; });
  std::vector<std::size_t> out;
  for (auto& p : dist) out.push_back(p.second);
  return out;
}

}  // namespace

void MemoryBuffer::insert_task(const std::vector<FeatureMap>& data, Rng& rng, const FeatureFn& features) {
  if (strategy_ == BufferStrategy::reservoir || strategy_ == BufferStrategy::ring_buffer) {
    for (const auto& item : data) observe(item, rng);
    return;
  }
  seen_ += data.size();
  std::vector<std::size_t> order;
  if (strategy_ == BufferStrategy::fixed_random) {
    order.resize(data.size());
    std::iota(order.begin(), order.end(), 0);
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
  } else {
    if (!features) throw Error("buffer: mean-of-feature selection needs a feature function");
    const auto feats = features(data);
    if (feats.size() != data.size()) throw Error("buffer: feature function returned the wrong count");
    std::vector<std::size_t> members[2];
    for (std::size_t i = 0; i < data.size(); ++i) members[data[i].label == kBonaFide ? 1 : 0].push_back(i);
    const auto near0 = nearest_to_mean(feats, members[0]);
    const auto near1 = nearest_to_mean(feats, members[1]);
    // Interleave so every prefix is class-balanced.
    for (std::size_t k = 0; k < std::max(near0.size(), near1.size()); ++k) {
      if (k < near1.size()) order.push_back(near1[k]);
      if (k < near0.size()) order.push_back(near0[k]);
    }
  }
  order.resize(std::min(order.size(), capacity_));
  std::vector<FeatureMap> kept;
  kept.reserve(order.size());
  for (auto i : order) kept.push_back(data[i]);
  per_task_.push_back(std::move(kept));
  apply_quotas();
  dirty_ = true;
}

void MemoryBuffer::apply_quotas() {
  std::vector<std::size_t> avail;
  for (const auto& t : per_task_) avail.push_back(t.size());
  const auto q = fill_quotas(capacity_, avail);
  for (std::size_t i = 0; i < per_task_.size(); ++i) per_task_[i].resize(q[i]);
}

void MemoryBuffer::refresh() const {
  if (!dirty_) return;
  dirty_ = false;
  view_.clear();
  switch (strategy_) {
    case BufferStrategy::reservoir: view_ = pool_; break;
    case BufferStrategy::ring_buffer: {
      const std::size_t k = std::min(fifo_[0].size(), fifo_[1].size());
      for (const auto& q : fifo_) {
        const std::size_t take = std::min(q.size(), k + 1);
        view_.insert(view_.end(), q.end() - static_cast<std::ptrdiff_t>(take), q.end());
      }
      break;
    }
    default:
      for (const auto& t : per_task_) view_.insert(view_.end(), t.begin(), t.end());
  }
}

std::vector<const FeatureMap*> MemoryBuffer::sample(std::size_t n, Rng& rng) const {
  refresh();
  if (view_.empty()) throw Error("buffer: cannot sample from an empty buffer");
  std::vector<const FeatureMap*> out;
  out.reserve(n);
  if (n > view_.size()) {
    for (std::size_t i = 0; i < n; ++i) out.push_back(&view_[rng.below(view_.size())]);
    return out;
  }
  std::vector<std::size_t> idx(view_.size());
  std::iota(idx.begin(), idx.end(), 0);
  for (std::size_t i = 0; i < n; ++i) {
    std::swap(idx[i], idx[i + rng.below(idx.size() - i)]);
    out.push_back(&view_[idx[i]]);
  }
  return out;
}

std::string MemoryBuffer::encode() const {
  std::vector<FeatureMap> all;
  switch (strategy_) {
    case BufferStrategy::reservoir: all = pool_; break;
    case BufferStrategy::ring_buffer:
      for (const auto& q : fifo_) all.insert(all.end(), q.begin(), q.end());
      break;
    default:
      for (const auto& t : per_task_) all.insert(all.end(), t.begin(), t.end());
  }
  return encode_feature_file(all);
}

MemoryBuffer MemoryBuffer::decode(const std::string& bytes, std::size_t capacity, BufferStrategy strategy,
                                  std::uint64_t seen) {
  MemoryBuffer b(capacity, strategy);
  b.seen_ = seen;
  auto items = decode_feature_file(bytes, "buffer");
  if (items.size() > capacity) throw Error("buffer: file holds more items than the capacity");
  switch (strategy) {
    case BufferStrategy::reservoir: b.pool_ = std::move(items); break;
    case BufferStrategy::ring_buffer:
      for (auto& m : items) b.fifo_[m.label].push_back(std::move(m));
      break;
    default:
      for (auto& m : items) {
        if (b.per_task_.empty() || b.per_task_.back().front().task_id != m.task_id) b.per_task_.emplace_back();
        b.per_task_.back().push_back(std::move(m));
      }
  }
  b.dirty_ = true;
  return b;
}

// ---------------------------------------------------------------------------
// Methods

std::string method_name(Method m) {
  switch (m) {
    case Method::finetune: return "finetune";
    case Method::replay: return "replay";
    case Method::joint: return "joint";
    case Method::ewc: return "ewc";
    case Method::mas: return "mas";
    case Method::lwf: return "lwf";
    case Method::dfwf: return "dfwf";
    case Method::cade: return "cade";
  }
  return "unknown";
}

std::string method_display_name(Method m) {
  switch (m) {
    case Method::finetune: return "Finetune";
    case Method::replay: return "Replay";
    case Method::joint: return "Joint";
    default: {
      std::string s = method_name(m);
      for (auto& c : s) c = static_cast<char>(std::toupper(static_cast<unsigned char>(c)));
      return s;
    }
  }
}

Method parse_method(const std::string& name) {
  for (auto m : {Method::finetune, Method::replay, Method::joint, Method::ewc, Method::mas, Method::lwf,
                 Method::dfwf, Method::cade})
    if (method_name(m) == name) return m;
  throw Error("unknown method '" + name + "' (expected finetune, replay, joint, ewc, mas, lwf, dfwf or cade)");
}

bool MethodSpec::uses_teacher() const {
  return kind == Method::lwf || kind == Method::dfwf || kind == Method::cade;
}

bool MethodSpec::uses_buffer() const {
  return kind == Method::replay || kind == Method::cade || (kind == Method::dfwf && dfwf_uses_buffer);
}

bool MethodSpec::uses_memory() const { return uses_buffer() || (uses_importance() && importance_samples == 0); }

void MethodSpec::validate() const {
  weights.validate();
  if (uses_importance()) {
    if (!(lambda >= 0) || !std::isfinite(lambda)) throw Error(method_name(kind) + ": lambda must be finite and >= 0");
  }
}

std::vector<std::size_t> argmax_classes(const Tensor& logits) {
  std::vector<std::size_t> out(logits.dim(0));
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = logits[i * 2 + 1] > logits[i * 2] ? 1 : 0;
  return out;
}

ag::Var student_attention(const Model& student, ag::Var activation, const std::vector<std::size_t>& classes) {
  const auto& cfg = student.config;
  const Tensor w = gradcam_weights(cfg, student.params, activation.value(), cfg.gradcam_layer, classes);
  auto map = ag::channel_weighted_sum(activation, activation.graph->constant(w));
  return cfg.gradcam_relu ? ag::relu(map) : map;
}

ObjectiveTerms method_objective(const MethodSpec& spec, const ObjectiveInputs& in) {
  if (!in.labels) throw Error("objective: labels missing");
  ObjectiveTerms t;
  auto lc = classification_loss(in.logits, *in.labels);
  t.l_c = lc.value().item();
  t.total = lc;

  if (spec.uses_importance()) {
    if (in.importance && !in.importance->empty()) {
      if (!in.params) throw Error("objective: " + method_name(spec.kind) + " needs bound parameters");
      auto pen = quadratic_penalty(*in.params, *in.importance, spec.lambda);
      t.penalty = pen.value().item();
      t.total = ag::add(lc, pen);
    }
    return t;
  }
  if (!spec.uses_teacher() || in.task_index == 0) return t;
  if (!in.teacher)
    throw Error("objective: " + method_name(spec.kind) + " needs a teacher from task " +
                std::to_string(in.task_index - 1) + " but none was given");

  std::vector<bool> positive;
  for (auto y : *in.labels) positive.push_back(y == kBonaFide);
  auto kd = kd_loss(in.teacher->logits, in.logits);
  t.l_kd = kd.value().item();
  auto with_kd = ag::add(lc, ag::scale(kd, spec.weights.alpha));

  if (spec.kind == Method::lwf) {
    t.total = with_kd;
    return t;
  }
  if (spec.kind == Method::dfwf) {
    if (in.student_taps.empty() || in.teacher->taps.empty()) throw Error("objective: dfwf needs tap embeddings");
    auto psa = psa_loss({in.teacher->taps.back()}, {in.student_taps.back()}, positive);
    t.l_psa = psa.value().item();
    t.total = ag::add(with_kd, ag::scale(psa, spec.weights.gamma));
    return t;
  }
  if (!in.student_maps) throw Error("objective: cade needs student attention maps");
  auto ad = ad_loss(in.teacher->maps, *in.student_maps);
  auto psa = psa_loss(in.teacher->taps, in.student_taps, positive);
  t.l_ad = ad.value().item();
  t.l_psa = psa.value().item();
  t.total = cade_loss(lc, kd, ad, psa, spec.weights);
  return t;
}

}  // namespace cade
