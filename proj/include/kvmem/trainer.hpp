#pragma once

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "kvmem/corpus.hpp"
#include "kvmem/model.hpp"
#include "kvmem/optim.hpp"

namespace kvmem {

/// Named references to the model's parameters. `adapters` selects the LoRA
/// tensors instead of the base weights.
template <class T>
std::vector<ParamRef<T>> param_refs(Model<T>& model, bool adapters = false) {
  std::vector<ParamRef<T>> out;
  visit_params(model, [&](const std::string& name, Tensor<T>& t, bool is_adapter) {
    if (is_adapter == adapters) out.push_back({name, &t});
  });
  return out;
}

template <class T>
void set_trainable(const std::vector<ParamRef<T>>& params, bool on) {
  for (const auto& p : params) {
    p.tensor->set_requires_grad(on);
    if (on) {
      p.tensor->zero_grad();
    } else {
      p.tensor->clear_grad();
    }
  }
}

template <class T>
void zero_grads(const std::vector<ParamRef<T>>& params) {
  for (const auto& p : params) p.tensor->zero_grad();
}

/// Accumulates d(mean loss)/d(param) over `samples` into the grad slots of
/// the model's trainable tensors and returns the mean loss. Each sample is
/// (token ids, target); the loss is cross-entropy at the final position.
template <class T>
double accumulate_final_token_loss(Model<T>& model,
                                   const std::vector<std::pair<const std::vector<std::size_t>*,
                                                               std::size_t>>& samples) {
  if (samples.empty()) throw std::invalid_argument("loss over an empty sample set");
  const double weight = 1.0 / double(samples.size());
  double total = 0.0;
  for (const auto& [ids, target] : samples) {
    Tape<T> tape;
    Var logits = model_forward(tape, model, *ids);
    Var ce = cross_entropy(tape, logits, {RowTarget{ids->size() - 1, target}});
    total += static_cast<double>(tape.value(ce).item());
    tape.backward(scale(tape, ce, static_cast<T>(weight)));
  }
  return total * weight;
}

struct TrainSchedule {
  std::size_t epochs = 80;
  double lr = 1e-3;
  double weight_decay = 0.0;
  double recall_threshold = 0.99;
};

struct RecallStats {
  std::vector<double> epoch_loss;  // mean loss before each epoch's update
  double recall = 0.0;
  bool below_threshold = false;
};

template <class T>
std::size_t argmax(const std::vector<T>& v) {
  return static_cast<std::size_t>(std::max_element(v.begin(), v.end()) - v.begin());
}

inline void check_vocab(const ModelConfig& config, const World& world) {
  if (config.vocab_size != world.vocab.size()) {
    throw PreconditionError("model vocabulary of " + std::to_string(config.vocab_size) +
                            " tokens does not match world vocabulary of " +
                            std::to_string(world.vocab.size()));
  }
}

/// Fraction of `facts` whose object token is the argmax next token at the
/// edit prompt. An empty list counts as 1.0 and is reported as a warning.
template <class T>
double fact_recall(const Model<T>& model, const std::vector<KnowledgeTriplet>& facts,
                   const World& world) {
  check_vocab(model.config, world);
  if (facts.empty()) {
    warn("fact_recall over an empty fact list is defined as 1.0");
    return 1.0;
  }
  std::size_t hits = 0;
  for (const auto& f : facts) {
    const auto ps = render_prompts(f, world, PromptOptions{0, {}});
    hits += argmax(next_token_probs(model, ps.edit.ids)) == ps.edit.target;
  }
  return double(hits) / double(facts.size());
}

/// Full-batch Adam on final-token cross-entropy over every fact prompt
/// (edit and paraphrase templates). Adapter tensors are never trained here.
template <class T>
RecallStats pretrain(Model<T>& model, const World& world, const TrainSchedule& schedule) {
  check_vocab(model.config, world);
  const auto prompts = training_prompts(world);
  std::vector<std::pair<const std::vector<std::size_t>*, std::size_t>> samples;
  for (const auto& p : prompts) samples.emplace_back(&p.ids, p.target);

  RecallStats stats;
  auto params = param_refs(model);
  AdamState<T> state(AdamConfig{schedule.lr, 0.9, 0.999, 1e-8, schedule.weight_decay});
  set_trainable(params, true);
  try {
    for (std::size_t epoch = 0; epoch < schedule.epochs; ++epoch) {
      zero_grads(params);
      const double loss = accumulate_final_token_loss(model, samples);
      if (!std::isfinite(loss)) {
        throw NonFiniteError("pretrain diverged at epoch " + std::to_string(epoch));
      }
      stats.epoch_loss.push_back(loss);
      adam_step(params, state);
    }
  } catch (...) {
    set_trainable(params, false);
    throw;
  }
  set_trainable(params, false);

  stats.recall = fact_recall(model, world.facts, world);
  stats.below_threshold = stats.recall < schedule.recall_threshold;
  if (stats.below_threshold) {
    warn("pretrain finished with recall " + std::to_string(stats.recall) + " below " +
         std::to_string(schedule.recall_threshold));
  }
  return stats;
}

}  // namespace kvmem
