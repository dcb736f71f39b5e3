#pragma once

#include <algorithm>
#include <cmath>
#include <random>
#include <set>
#include <string>
#include <vector>

#include "kvmem/corpus.hpp"
#include "kvmem/model.hpp"
#include "kvmem/optim.hpp"
#include "kvmem/trainer.hpp"

namespace kvmem {

/// Architecture summary for trainable-fraction accounting.
struct ArchDims {
  std::size_t n_layers = 0;
  std::size_t d_e = 0;
  std::size_t d_ffn = 0;
  std::uint64_t total_params = 0;
};

/// Published Llama2-7B dimensions.
inline ArchDims llama2_7b_dims() { return {32, 4096, 11008, 6738415616ULL}; }

inline ArchDims arch_dims(const ModelConfig& c) {
  return {c.n_layers, c.d_e, c.ffn_width(), c.parameter_count()};
}

/// (d_in, d_out) of the matrix a target adapts.
inline std::pair<std::size_t, std::size_t> target_shape(const ArchDims& dims, LoraTarget t) {
  switch (t) {
    case LoraTarget::attn_q:
    case LoraTarget::attn_v: return {dims.d_e, dims.d_e};
    case LoraTarget::ffn_key_gate:
    case LoraTarget::ffn_key_up:
    case LoraTarget::ffn_key: return {dims.d_e, dims.d_ffn};
    case LoraTarget::ffn_value_down:
    case LoraTarget::ffn_value: return {dims.d_ffn, dims.d_e};
  }
  return {0, 0};
}

/// 100 * sum over targeted matrices of r (d_in + d_out) / total_params.
inline double count_trainable_fraction(const ArchDims& dims, const LoraSpec& spec) {
  if (dims.total_params == 0) throw ConfigError("total_params", "must be positive");
  std::uint64_t trainable = 0;
  for (auto t : spec.targets) {
    const auto [d_in, d_out] = target_shape(dims, t);
    trainable += std::uint64_t(dims.n_layers) * spec.rank * (d_in + d_out);
  }
  return 100.0 * double(trainable) / double(dims.total_params);
}

inline bool target_supported(FfnKind kind, LoraTarget t) {
  switch (t) {
    case LoraTarget::attn_q:
    case LoraTarget::attn_v: return true;
    case LoraTarget::ffn_key_gate:
    case LoraTarget::ffn_key_up:
    case LoraTarget::ffn_value_down: return kind == FfnKind::swiglu;
    case LoraTarget::ffn_key:
    case LoraTarget::ffn_value: return kind == FfnKind::standard;
  }
  return false;
}

inline void validate_lora_spec(const LoraSpec& spec, FfnKind kind) {
  if (spec.rank == 0) throw ConfigError("rank", "must be at least 1");
  if (!(spec.alpha > 0) || !std::isfinite(spec.alpha)) throw ConfigError("alpha", "must be positive");
  if (spec.targets.empty()) throw ConfigError("targets", "no adapter targets given");
  std::set<LoraTarget> seen;
  for (auto t : spec.targets) {
    if (!target_supported(kind, t)) {
      throw ConfigError("targets", to_string(t) + " does not exist in a " + to_string(kind) +
                                       " FFN model");
    }
    if (!seen.insert(t).second) throw ConfigError("targets", "duplicate target " + to_string(t));
  }
}

/// Target sets of the ablation grid: q+v, each FFN matrix alone, and q+v
/// combined with each FFN matrix.
inline std::vector<std::vector<LoraTarget>> ablation_target_sets(FfnKind kind) {
  using L = LoraTarget;
  const std::vector<L> ffn = kind == FfnKind::swiglu
                                 ? std::vector<L>{L::ffn_value_down, L::ffn_key_gate, L::ffn_key_up}
                                 : std::vector<L>{L::ffn_value, L::ffn_key};
  std::vector<std::vector<L>> out{{L::attn_q, L::attn_v}};
  for (auto t : ffn) out.push_back({t});
  for (auto t : ffn) out.push_back({L::attn_q, L::attn_v, t});
  return out;
}

namespace detail {

template <class T>
Tensor<T>& target_weight(Block<T>& b, LoraTarget t) {
  switch (t) {
    case LoraTarget::attn_q: return b.attn.W_q;
    case LoraTarget::attn_v: return b.attn.W_v;
    default: break;
  }
  if (auto* s = std::get_if<StandardFfn<T>>(&b.ffn)) {
    if (t == LoraTarget::ffn_key) return s->K;
    if (t == LoraTarget::ffn_value) return s->V;
  } else if (auto* g = std::get_if<SwigluFfn<T>>(&b.ffn)) {
    if (t == LoraTarget::ffn_key_gate) return g->K_gate;
    if (t == LoraTarget::ffn_key_up) return g->K_up;
    if (t == LoraTarget::ffn_value_down) return g->V_down;
  }
  throw ConfigError("targets", to_string(t) + " not present in this model");
}

/// Value matrices are stored [d_in x d_out] and applied as x * W.
inline bool input_major(LoraTarget t) {
  return t == LoraTarget::ffn_value || t == LoraTarget::ffn_value_down;
}

}  // namespace detail

/// Attaches adapters: A seeded normal (std d_in^-1/2), B zero. Base
/// weights are frozen and only A, B require gradients.
template <class T>
void attach(Model<T>& model, const LoraSpec& spec) {
  validate_lora_spec(spec, model.config.ffn_kind);
  if (model.lora) throw PreconditionError("attach: model already carries adapters");
  std::mt19937_64 rng(spec.seed);
  for (auto& b : model.blocks) {
    for (auto t : spec.targets) {
      const auto& w = detail::target_weight(b, t);
      const bool im = detail::input_major(t);
      const std::size_t d_in = im ? w.rows() : w.cols();
      const std::size_t d_out = im ? w.cols() : w.rows();
      std::normal_distribution<double> normal(0.0, 1.0 / std::sqrt(double(d_in)));
      LoraPair<T> pair;
      pair.A = Tensor<T>({spec.rank, d_in});
      for (auto& v : pair.A.data()) v = static_cast<T>(normal(rng));
      pair.B = Tensor<T>({d_out, spec.rank});
      b.adapters.emplace(t, std::move(pair));
    }
  }
  model.lora = spec;
  set_trainable(param_refs(model), false);
  set_trainable(param_refs(model, true), true);
  for (const auto& p : param_refs(model, true)) p.tensor->clear_grad();
}

/// Folds W <- W + (alpha/r) B A into the base weights and drops the adapters.
template <class T>
void merge(Model<T>& model) {
  if (!model.lora) throw PreconditionError("merge: no adapters attached");
  const double s = model.lora->scale();
  for (auto& b : model.blocks) {
    for (auto& [t, pair] : b.adapters) {
      auto& w = detail::target_weight(b, t);
      const bool im = detail::input_major(t);
      const auto& A = pair.A;
      const auto& B = pair.B;
      const std::size_t d_out = B.rows(), d_in = A.cols(), r = A.rows();
      for (std::size_t o = 0; o < d_out; ++o) {
        for (std::size_t i = 0; i < d_in; ++i) {
          double acc = 0.0;
          for (std::size_t k = 0; k < r; ++k)
            acc += static_cast<double>(B(o, k)) * static_cast<double>(A(k, i));
          T& dst = im ? w(i, o) : w(o, i);
          dst = static_cast<T>(static_cast<double>(dst) + s * acc);
        }
      }
    }
    b.adapters.clear();
  }
  model.lora.reset();
  set_trainable(param_refs(model), false);
}

struct TuneSchedule {
  std::size_t steps = 100;
  std::size_t batch_size = 32;
  double lr = 1e-3;
  double weight_decay = 0.0;
  std::uint64_t seed = 0;
};

struct TaskAccuracy {
  TaskKind kind;
  double accuracy = 0.0;
};

struct TuneReport {
  std::vector<TaskAccuracy> tasks;
  double mean = 0.0;
  std::vector<double> loss;  // per step
};

/// Fraction of samples whose argmax next token is an accepted answer.
template <class T>
double task_accuracy(const Model<T>& model, const std::vector<TaskSample>& samples) {
  if (samples.empty()) throw PreconditionError("task_accuracy: empty sample set");
  std::size_t hits = 0;
  for (const auto& s : samples) {
    const auto best = argmax(next_token_probs(model, s.ids));
    hits += std::find(s.accepted.begin(), s.accepted.end(), best) != s.accepted.end();
  }
  return double(hits) / double(samples.size());
}

template <class T>
TuneReport evaluate_tasks(const Model<T>& model, const std::vector<Task>& tasks) {
  TuneReport report;
  for (const auto& t : tasks) report.tasks.push_back({t.kind, task_accuracy(model, t.test)});
  double sum = 0.0;
  for (const auto& a : report.tasks) sum += a.accuracy;
  report.mean = report.tasks.empty() ? 0.0 : sum / double(report.tasks.size());
  return report;
}

/// Trains only the adapter tensors on minibatches drawn from the union of
/// every task's train split, then reports per-task test accuracy and the
/// mean.
template <class T>
TuneReport multitask_tune(Model<T>& model, const std::vector<Task>& tasks,
                          const TuneSchedule& schedule) {
  if (!model.lora) throw PreconditionError("multitask_tune: attach adapters first");
  if (tasks.empty()) throw PreconditionError("multitask_tune: no tasks");
  std::vector<const TaskSample*> stream;
  for (const auto& t : tasks) {
    if (t.train.empty() || t.test.empty()) {
      throw PreconditionError("multitask_tune: task " + to_string(t.kind) +
                              " has an empty train or test split");
    }
    for (const auto& s : t.train) stream.push_back(&s);
  }
  if (schedule.batch_size == 0) throw ConfigError("batch_size", "must be positive");

  auto base = param_refs(model);
  auto adapters = param_refs(model, true);
  set_trainable(base, false);
  set_trainable(adapters, true);
  AdamState<T> state(AdamConfig{schedule.lr, 0.9, 0.999, 1e-8, schedule.weight_decay});
  std::mt19937_64 rng(schedule.seed);
  std::vector<std::size_t> order(stream.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::shuffle(order.begin(), order.end(), rng);

  TuneReport report;
  std::size_t cursor = 0;
  for (std::size_t step = 0; step < schedule.steps; ++step) {
    std::vector<std::pair<const std::vector<std::size_t>*, std::size_t>> batch;
    for (std::size_t i = 0; i < std::min(schedule.batch_size, stream.size()); ++i) {
      if (cursor == order.size()) {
        std::shuffle(order.begin(), order.end(), rng);
        cursor = 0;
      }
      const auto* s = stream[order[cursor++]];
      batch.emplace_back(&s->ids, s->target);
    }
    zero_grads(adapters);
    report.loss.push_back(accumulate_final_token_loss(model, batch));
    adam_step(adapters, state);
  }
  for (const auto& p : adapters) p.tensor->clear_grad();

  auto eval = evaluate_tasks(model, tasks);
  report.tasks = std::move(eval.tasks);
  report.mean = eval.mean;
  return report;
}

}  // namespace kvmem
