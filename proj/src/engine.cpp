#include "drl/engine.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>
#include <set>

#include "drl/error.hpp"
#include "drl/rng.hpp"

namespace drl {

namespace {

std::size_t argmax(const Tensor& z) {
  return static_cast<std::size_t>(std::max_element(z.values().begin(), z.values().end()) - z.values().begin());
}

void add_scaled(LossBreakdown& acc, const LossBreakdown& b, double w) {
  acc.l_pos += w * b.l_pos;
  acc.l_neg += w * b.l_neg;
  acc.l_base += w * b.l_base;
  acc.l_kd += w * b.l_kd;
  acc.total += w * b.total;
  acc.alpha = b.alpha;
}

// New head over `classes`, keeping the columns and scale of `old` for the
// classes it already covers.
LogitHead grow_head(const LogitHead* old, std::vector<int> classes, std::size_t d, std::uint64_t seed) {
  LogitHead head = LogitHead::create(d, classes, seed);
  if (!old) return head;
  Tensor& w = head.weight.mutable_value();
  const std::size_t c_new = classes.size();
  const std::size_t c_old = old->num_classes();
  for (std::size_t j = 0; j < c_old; ++j) {
    const std::size_t jj = head.index_of(old->classes[j]);
    for (std::size_t i = 0; i < d; ++i) w[i * c_new + jj] = old->weight.value()[i * c_old + j];
  }
  head.log_scale.mutable_value()[0] = old->log_scale.value()[0];
  return head;
}

}  // namespace

IncrementalState IncrementalState::from_backbone(Backbone backbone) {
  if (!backbone.frozen()) throw ProtocolError("incremental state needs a frozen backbone");
  IncrementalState s;
  s.backbone = std::move(backbone);
  return s;
}

int IncrementalState::stage_of(int class_id) const {
  auto it = class_registry.find(class_id);
  if (it == class_registry.end()) throw ProtocolError("class " + std::to_string(class_id) + " is not registered");
  return it->second;
}

ConstParamRefs IncrementalState::frozen_params() const {
  ConstParamRefs out = backbone.params();
  for (const auto& m : streams) {
    auto p = m.params();
    out.insert(out.end(), p.begin(), p.end());
  }
  return out;
}

CompositeOutput IncrementalState::forward(const Tensor& image, ForwardCounter* counter) const {
  return composite_forward(image, backbone, streams, counter);
}

void PrototypeStore::set_segment(int class_id, int stage, std::size_t stream, Tensor segment,
                                 Provenance provenance) {
  ClassPrototype& p = classes_[class_id];
  p.stage = stage;
  if (p.segments.size() <= stream) {
    p.segments.resize(stream + 1);
    p.provenance.resize(stream + 1, Provenance::measured);
  }
  p.segments[stream] = std::move(segment);
  p.provenance[stream] = provenance;
}

bool PrototypeStore::has_segment(int class_id, std::size_t stream) const {
  auto it = classes_.find(class_id);
  return it != classes_.end() && stream < it->second.segments.size() && !it->second.segments[stream].empty();
}

const Tensor& PrototypeStore::segment(int class_id, std::size_t stream) const {
  if (!has_segment(class_id, stream))
    throw ProtocolError("class " + std::to_string(class_id) + " has no prototype segment for stream " +
                        std::to_string(stream));
  return classes_.at(class_id).segments[stream];
}

Provenance PrototypeStore::provenance(int class_id, std::size_t stream) const {
  segment(class_id, stream);
  return classes_.at(class_id).provenance[stream];
}

Tensor PrototypeStore::concatenated(int class_id, std::size_t streams) const {
  std::vector<double> v;
  for (std::size_t s = 0; s < streams; ++s) {
    const Tensor& seg = segment(class_id, s);
    v.insert(v.end(), seg.values().begin(), seg.values().end());
  }
  const std::size_t n = v.size();
  return Tensor({n}, std::move(v));
}

void PrototypeStore::require_complete(std::size_t streams) const {
  if (classes_.empty()) throw ProtocolError("prototype store is empty");
  for (const auto& [c, p] : classes_)
    for (std::size_t s = 0; s < streams; ++s) segment(c, s);
}

bool PrototypeStore::operator==(const PrototypeStore& o) const {
  if (classes_.size() != o.classes_.size()) return false;
  for (const auto& [c, p] : classes_) {
    auto it = o.classes_.find(c);
    if (it == o.classes_.end()) return false;
    const ClassPrototype& q = it->second;
    if (p.stage != q.stage || p.provenance != q.provenance || p.segments.size() != q.segments.size()) return false;
    for (std::size_t s = 0; s < p.segments.size(); ++s)
      if (!p.segments[s].bit_equal(q.segments[s])) return false;
  }
  return true;
}

TrainReport run_stage(IncrementalState& state, const StageDataset& dataset, const StageConfig& config,
                      DataAccessLog* log) {
  const auto start = std::chrono::steady_clock::now();
  if (dataset.train.empty() || dataset.classes.empty())
    throw DegenerateInputError("run_stage: stage " + std::to_string(dataset.stage) + " has no training data");
  for (int c : dataset.classes)
    if (state.class_registry.count(c))
      throw ProtocolError("run_stage: class " + std::to_string(c) + " was already seen at stage " +
                          std::to_string(state.class_registry.at(c)));
  for (const auto& m : state.streams)
    if (!m.frozen()) throw ProtocolError("run_stage: previous stage is not sealed");
  config.optimizer.validate();
  config.loss.das.validate();

  const int t = state.stage_index + 1;
  const std::size_t d = static_cast<std::size_t>(state.backbone.config.embed_dim);
  TrainReport report;
  report.stage = t;
  const ConstParamRefs frozen = state.frozen_params();
  report.frozen_hash_before = params_hash(frozen);
  report.frozen_params = count_params(frozen);

  StageModule module = StageModule::create(state.backbone.config, config.ipa, t, config.seed);
  LogitHead head = LogitHead::create(d, dataset.classes, mix_seed(config.seed, 0x4EAD00 + static_cast<std::uint64_t>(t)));
  ParamRefs params = module.params();
  for (Param* p : head.params()) params.push_back(p);
  {
    ConstParamRefs cp(params.begin(), params.end());
    report.trainable_params = count_params(cp);
  }

  // Frozen features never change during the stage, so each sample's context
  // is computed once.
  std::vector<StreamContext> contexts(dataset.train.size());
  std::vector<std::size_t> targets(dataset.train.size());
  for (std::size_t i = 0; i < dataset.train.size(); ++i) {
    const Sample& s = dataset.train[i];
    if (log) log->record(s.id);
    composite_forward(s.image, state.backbone, state.streams, nullptr, &contexts[i]);
    targets[i] = head.index_of(s.label);
  }

  Rng rng(mix_seed(config.seed, 0x5A3900 + static_cast<std::uint64_t>(t)));
  std::vector<std::size_t> order(contexts.size());
  std::iota(order.begin(), order.end(), 0);
  const OptimizerConfig& opt = config.optimizer;
  for (int epoch = 0; epoch < opt.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng.engine());
    EpochLog entry;
    entry.epoch = epoch;
    entry.lr = cosine_lr(opt, epoch);
    for (std::size_t b = 0; b < order.size(); b += opt.batch_size) {
      const std::size_t e = std::min(order.size(), b + opt.batch_size);
      std::vector<LossSample> batch;
      for (std::size_t i = b; i < e; ++i) {
        const StreamContext& ctx = contexts[order[i]];
        batch.push_back({stream_forward(ctx, module).cls(), ctx.ptm_cls, targets[order[i]]});
      }
      LossResult loss = total_loss(batch, head, config.loss);
      loss.total.backward();
      sgd_step(params, opt, epoch);
      add_scaled(entry.loss, loss.breakdown, static_cast<double>(e - b) / static_cast<double>(order.size()));
    }
    report.epochs.push_back(entry);
  }

  {
    NoGradGuard no_grad;
    std::map<int, std::pair<std::size_t, std::size_t>> tally;
    std::size_t correct = 0;
    for (std::size_t i = 0; i < contexts.size(); ++i) {
      const Tensor z = compute_logits(stream_forward(contexts[i], module).cls(), head).value();
      const bool ok = argmax(z) == targets[i];
      auto& [c, n] = tally[dataset.train[i].label];
      c += ok;
      ++n;
      correct += ok;
    }
    for (const auto& [label, cn] : tally)
      report.per_class_train_accuracy[label] = 100.0 * static_cast<double>(cn.first) / static_cast<double>(cn.second);
    report.train_accuracy = 100.0 * static_cast<double>(correct) / static_cast<double>(contexts.size());
  }

  report.frozen_hash_after = params_hash(frozen);
  if (report.frozen_hash_after != report.frozen_hash_before)
    throw ProtocolError("run_stage: frozen parameters changed during stage " + std::to_string(t));

  module.freeze();
  state.streams.push_back(std::move(module));
  state.stage_index = t;
  for (int c : dataset.classes) state.class_registry[c] = t;
  report.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return report;
}

void extract_prototypes(const IncrementalState& state, const StageDataset& dataset, PrototypeStore& store) {
  const std::size_t streams = state.num_streams();
  const std::size_t d = static_cast<std::size_t>(state.backbone.config.embed_dim);
  std::map<int, std::vector<Tensor>> sums;
  std::map<int, std::size_t> counts;
  for (int c : dataset.classes) {
    sums[c] = std::vector<Tensor>(streams, Tensor({d}, 0.0));
    counts[c] = 0;
  }
  // Accumulate in ascending sample-id order so the mean does not depend on
  // the order of dataset.train.
  std::vector<const Sample*> samples;
  for (const auto& s : dataset.train) samples.push_back(&s);
  std::sort(samples.begin(), samples.end(), [](const Sample* a, const Sample* b) { return a->id < b->id; });
  for (const Sample* s : samples) {
    auto it = sums.find(s->label);
    if (it == sums.end()) throw ProtocolError("extract_prototypes: sample label outside stage classes");
    const CompositeOutput out = state.forward(s->image);
    for (std::size_t k = 0; k < streams; ++k)
      for (std::size_t i = 0; i < d; ++i) it->second[k][i] += out.per_stream_cls[k][i];
    ++counts[s->label];
  }
  for (int c : dataset.classes) {
    if (counts[c] == 0)
      throw DegenerateInputError("extract_prototypes: class " + std::to_string(c) + " has no samples");
    const double n = static_cast<double>(counts[c]);
    const int stage = state.class_registry.count(c) ? state.class_registry.at(c) : state.stage_index;
    for (std::size_t k = 0; k < streams; ++k) {
      Tensor mean = sums[c][k];
      for (std::size_t i = 0; i < d; ++i) mean[i] /= n;
      store.set_segment(c, stage, k, std::move(mean), Provenance::measured);
    }
  }
}

std::vector<double> synthesis_weights(const PrototypeStore& store, int old_class, std::span<const int> current,
                                      std::size_t shared_stream, double tau) {
  if (!(tau > 0.0)) throw ConfigError("synthesis temperature must be positive");
  if (current.empty()) throw ProtocolError("synthesis needs at least one current class");
  const Tensor& co = store.segment(old_class, shared_stream);
  std::vector<double> logits;
  for (int j : current) logits.push_back(cosine_similarity(co, store.segment(j, shared_stream)) / tau);
  const double mx = *std::max_element(logits.begin(), logits.end());
  double z = 0.0;
  for (double& l : logits) z += (l = std::exp(l - mx));
  for (double& l : logits) l /= z;
  return logits;
}

void synthesize_old_prototypes(PrototypeStore& store, const IncrementalState& state, double tau) {
  const int t = state.stage_index;
  const std::size_t stream_t = static_cast<std::size_t>(t);
  std::vector<int> current;
  for (const auto& [c, stage] : state.class_registry)
    if (stage == t) current.push_back(c);
  for (int j : current)
    if (!store.has_segment(j, stream_t) || store.provenance(j, stream_t) != Provenance::measured)
      throw ProtocolError("synthesis: current class " + std::to_string(j) + " lacks a measured stream-" +
                          std::to_string(t) + " segment");

  for (const auto& [o, stage_o] : state.class_registry) {
    if (stage_o == t) continue;
    // Latest stream where both o and every current class were measured.
    std::size_t shared = static_cast<std::size_t>(stage_o);
    while (true) {
      bool ok = store.has_segment(o, shared) && store.provenance(o, shared) == Provenance::measured;
      for (int j : current) ok = ok && store.has_segment(j, shared);
      if (ok) break;
      if (shared == 0) throw ProtocolError("synthesis: class " + std::to_string(o) + " shares no measured stream");
      --shared;
    }
    const std::vector<double> w = synthesis_weights(store, o, current, shared, tau);
    const std::size_t d = store.segment(current.front(), stream_t).size();
    Tensor seg({d}, 0.0);
    for (std::size_t k = 0; k < current.size(); ++k) {
      const Tensor& cj = store.segment(current[k], stream_t);
      for (std::size_t i = 0; i < d; ++i) seg[i] += w[k] * cj[i];
    }
    store.set_segment(o, stage_o, stream_t, std::move(seg), Provenance::synthesized);
  }
}

Classification classify(const Tensor& feature, const PrototypeStore& store) {
  if (store.size() == 0) throw ProtocolError("classify: empty prototype store");
  const std::size_t d = store.classes().begin()->second.segments.front().size();
  if (d == 0 || feature.size() % d != 0) throw DimensionError("classify: feature width is not a multiple of d");
  const std::size_t streams = feature.size() / d;
  Classification out;
  double best = -2.0;
  for (const auto& [c, p] : store.classes()) {
    const double s = cosine_similarity(store.concatenated(c, streams), feature);
    out.scores.emplace_back(c, s);
    if (s > best) {
      best = s;
      out.predicted = c;
    }
  }
  return out;
}

ProbeSnapshot snapshot_probe(const IncrementalState& state, std::span<const Sample> probe) {
  ProbeSnapshot snap;
  for (const auto& s : probe) snap.push_back(state.forward(s.image).per_stream_cls);
  return snap;
}

bool probe_invariance_check(const IncrementalState& state, std::span<const Sample> probe,
                            const ProbeSnapshot& snapshot) {
  if (snapshot.size() != probe.size()) return false;
  for (std::size_t i = 0; i < probe.size(); ++i) {
    const auto now = state.forward(probe[i].image).per_stream_cls;
    if (now.size() < snapshot[i].size()) return false;
    for (std::size_t s = 0; s < snapshot[i].size(); ++s)
      if (!now[s].bit_equal(snapshot[i][s])) return false;
  }
  return true;
}

FinetuneResult run_finetune_baseline(const Backbone& backbone, std::span<const StageDataset> stages,
                                     const StageConfig& config) {
  config.optimizer.validate();
  const std::size_t d = static_cast<std::size_t>(backbone.config.embed_dim);
  StageModule module = StageModule::create(backbone.config, config.ipa, 1, config.seed);
  ParamRefs module_params = module.params();
  std::optional<LogitHead> head;
  std::vector<int> seen;
  std::vector<const Sample*> seen_test;
  FinetuneResult result;
  const std::vector<StageModule> no_streams;

  auto context_of = [&](const Tensor& image) {
    StreamContext ctx;
    composite_forward(image, backbone, no_streams, nullptr, &ctx);
    return ctx;
  };

  for (const StageDataset& ds : stages) {
    seen.insert(seen.end(), ds.classes.begin(), ds.classes.end());
    LogitHead next = grow_head(head ? &*head : nullptr, seen, d,
                               mix_seed(config.seed, 0xF1E700 + static_cast<std::uint64_t>(ds.stage)));
    head.emplace(std::move(next));
    ParamRefs params = module_params;
    for (Param* p : head->params()) params.push_back(p);

    std::vector<StreamContext> contexts;
    std::vector<std::size_t> targets;
    for (const auto& s : ds.train) {
      contexts.push_back(context_of(s.image));
      targets.push_back(head->index_of(s.label));
    }
    Rng rng(mix_seed(config.seed, 0xF1E800 + static_cast<std::uint64_t>(ds.stage)));
    std::vector<std::size_t> order(contexts.size());
    std::iota(order.begin(), order.end(), 0);
    for (auto* p : params) p->momentum().fill(0.0);
    for (int epoch = 0; epoch < config.optimizer.epochs; ++epoch) {
      std::shuffle(order.begin(), order.end(), rng.engine());
      for (std::size_t b = 0; b < order.size(); b += config.optimizer.batch_size) {
        const std::size_t e = std::min(order.size(), b + config.optimizer.batch_size);
        std::vector<Var> losses;
        for (std::size_t i = b; i < e; ++i) {
          Var z = compute_logits(stream_forward(contexts[order[i]], module).cls(), *head);
          losses.push_back(cross_entropy(z, targets[order[i]]));
        }
        scale(sum(concat(losses)), 1.0 / static_cast<double>(e - b)).backward();
        sgd_step(params, config.optimizer, epoch);
      }
    }

    for (const auto& s : ds.test) seen_test.push_back(&s);
    NoGradGuard no_grad;
    std::size_t correct = 0;
    for (const Sample* s : seen_test) {
      const Tensor z = compute_logits(stream_forward(context_of(s->image), module).cls(), *head).value();
      correct += head->classes[argmax(z)] == s->label;
    }
    result.accuracies.push_back(100.0 * static_cast<double>(correct) / static_cast<double>(seen_test.size()));
    result.correct.push_back(correct);
    result.total.push_back(seen_test.size());
    result.seen_classes.push_back(static_cast<int>(seen.size()));
  }
  return result;
}

}  // namespace drl
