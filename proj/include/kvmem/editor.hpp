#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <memory>
#include <numeric>
#include <set>
#include <string>
#include <vector>

#include "kvmem/corpus.hpp"
#include "kvmem/model.hpp"
#include "kvmem/optim.hpp"
#include "kvmem/trainer.hpp"

namespace kvmem {

enum class EditTarget { keys, values };
enum class RowScope { all_rows, top_k_activated };
enum class StopReason { converged, max_steps };

inline std::string to_string(EditTarget t) { return t == EditTarget::keys ? "keys" : "values"; }
inline std::string to_string(RowScope s) {
  return s == RowScope::all_rows ? "all_rows" : "top_k_activated";
}
inline std::string to_string(StopReason r) {
  return r == StopReason::converged ? "converged" : "max_steps";
}

inline EditTarget parse_edit_target(const std::string& s) {
  if (s == "keys") return EditTarget::keys;
  if (s == "values") return EditTarget::values;
  throw ConfigError("target", "expected keys or values, got '" + s + "'");
}

inline RowScope parse_row_scope(const std::string& s) {
  if (s == "all_rows") return RowScope::all_rows;
  if (s == "top_k_activated") return RowScope::top_k_activated;
  throw ConfigError("row_scope", "expected all_rows or top_k_activated, got '" + s + "'");
}

/// Middle third of the layer stack (at least one layer).
inline std::set<std::size_t> default_edit_layers(std::size_t n_layers) {
  std::set<std::size_t> out;
  for (std::size_t l = n_layers / 3; l < (2 * n_layers) / 3; ++l) out.insert(l);
  if (out.empty() && n_layers > 0) out.insert(n_layers / 2);
  return out;
}

struct EditOptimizer {
  double lr = 5e-4;
  double weight_decay = 0.5;
  std::size_t max_steps = 50;
  double stop_prob = 0.95;
};

struct EditRequest {
  std::vector<FactEdit> edits;
  EditTarget target = EditTarget::values;
  std::set<std::size_t> layers;
  RowScope row_scope = RowScope::all_rows;
  std::size_t top_k = 1;
  EditOptimizer optimizer;
  bool check_recall = true;  // require the original facts to be recalled
};

struct EditTrace {
  std::vector<double> loss;  // one entry per optimisation step
  std::size_t steps = 0;
  double seconds = 0.0;
  StopReason reason = StopReason::max_steps;
};

/// Names of the FFN matrices playing the key or value role in `layer`.
inline std::vector<std::string> ffn_matrix_names(FfnKind kind, EditTarget target,
                                                 std::size_t layer) {
  const std::string p = "layers." + std::to_string(layer) + ".ffn.";
  if (kind == FfnKind::standard) return {p + (target == EditTarget::keys ? "key" : "value")};
  if (target == EditTarget::keys) return {p + "key_gate", p + "key_up"};
  return {p + "value_down"};
}

/// Mean |activation| per FFN row at the final position of `prompts`.
template <class T>
std::vector<std::vector<double>> mean_key_activation(const Model<T>& model,
                                                     const std::vector<Prompt>& prompts) {
  const std::size_t d_m = model.config.d_m;
  std::vector<std::vector<double>> out(model.blocks.size(), std::vector<double>(d_m, 0.0));
  for (const auto& p : prompts) {
    ForwardTrace<T> trace;
    logits(model, p.ids, &trace);
    for (std::size_t l = 0; l < model.blocks.size(); ++l) {
      const auto& a = trace.ffn_activations[l];
      for (std::size_t i = 0; i < d_m; ++i)
        out[l][i] += std::abs(static_cast<double>(a(a.rows() - 1, i))) / double(prompts.size());
    }
  }
  return out;
}

/// Indices of the k largest entries, ties broken by lower index.
inline std::vector<std::size_t> top_k_rows(const std::vector<double>& score, std::size_t k) {
  std::vector<std::size_t> idx(score.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(),
                   [&](std::size_t a, std::size_t b) { return score[a] > score[b]; });
  idx.resize(std::min(k, idx.size()));
  std::sort(idx.begin(), idx.end());
  return idx;
}

inline std::vector<Prompt> edit_prompts(const EditRequest& request, const World& world) {
  std::vector<Prompt> out;
  for (const auto& e : request.edits) {
    auto p = render_prompts(e.fact, world, PromptOptions{0, {}}).edit;
    p.target = world.object_token(e.new_object);
    out.push_back(std::move(p));
  }
  return out;
}

inline void validate_request(const EditRequest& request, const ModelConfig& config,
                             const World& world) {
  if (request.layers.empty()) throw ConfigError("layers", "no layers selected for editing");
  for (auto l : request.layers) {
    if (l >= config.n_layers) {
      throw ConfigError("layers", "layer " + std::to_string(l) + " outside a model of " +
                                      std::to_string(config.n_layers) + " layers");
    }
  }
  if (request.row_scope == RowScope::top_k_activated &&
      (request.top_k == 0 || request.top_k > config.d_m)) {
    throw ConfigError("top_k", "k=" + std::to_string(request.top_k) + " must be in [1, d_m=" +
                                   std::to_string(config.d_m) + "]");
  }
  if (request.edits.empty()) throw ConfigError("edits", "no edits requested");
  std::set<std::size_t> subjects;
  for (const auto& e : request.edits) {
    if (!world.contains(e.fact)) throw ConfigError("edits", "fact not in world");
    if (e.new_object >= world.objects.size() ||
        world.object_relation[e.new_object] != e.fact.relation) {
      throw ConfigError("edits", "new object is not in the relation's object pool");
    }
    if (e.new_object == e.fact.object) {
      throw ConfigError("edits", "new object equals the original object for subject " +
                                     world.subjects[e.fact.subject]);
    }
    if (!subjects.insert(e.fact.subject).second) {
      throw ConfigError("edits", "subject " + world.subjects[e.fact.subject] +
                                     " appears twice in one batch");
    }
  }
  const auto& o = request.optimizer;
  if (!(o.lr > 0)) throw ConfigError("lr", "must be positive");
  if (!(o.weight_decay >= 0)) throw ConfigError("weight_decay", "must be non-negative");
  if (!(o.stop_prob > 0 && o.stop_prob <= 1)) throw ConfigError("stop_prob", "must be in (0, 1]");
}

/// Trainable coordinates for `request`: the key or value matrices of the
/// selected layers, either whole or restricted to the top-k rows ranked by
/// mean activation magnitude over the edit prompts.
template <class T>
ParamMask build_mask(const Model<T>& model, const EditRequest& request, const World& world) {
  validate_request(request, model.config, world);
  std::vector<std::vector<double>> activation;
  if (request.row_scope == RowScope::top_k_activated) {
    activation = mean_key_activation(model, edit_prompts(request, world));
  }
  ParamMask mask;
  visit_params(model, [&](const std::string& name, const Tensor<T>& t, bool adapter) {
    if (adapter) return;
    for (auto l : request.layers) {
      const auto names = ffn_matrix_names(model.config.ffn_kind, request.target, l);
      if (std::find(names.begin(), names.end(), name) == names.end()) continue;
      if (request.row_scope == RowScope::all_rows) {
        mask.entries[name] = std::vector<bool>(t.size(), true);
      } else {
        std::vector<bool> bits(t.size(), false);
        for (auto r : top_k_rows(activation[l], request.top_k))
          for (std::size_t c = 0; c < t.cols(); ++c) bits[r * t.cols() + c] = true;
        mask.entries[name] = std::move(bits);
      }
    }
  });
  return mask;
}

/// Masked back-propagation edit. Minimises the mean cross-entropy of the
/// new object tokens over the edit prompts; only masked coordinates move.
/// Stops once every edit prompt gives P(new) >= stop_prob, or after
/// max_steps updates. `seconds` covers the optimisation loop only.
template <class T>
EditTrace edit(Model<T>& model, const EditRequest& request, const World& world,
               const ParamMask* precomputed_mask = nullptr) {
  check_vocab(model.config, world);
  validate_request(request, model.config, world);
  if (request.check_recall) {
    std::vector<KnowledgeTriplet> facts;
    for (const auto& e : request.edits) facts.push_back(e.fact);
    const double recall = fact_recall(model, facts, world);
    if (recall < 1.0) {
      throw PreconditionError("edit: model recalls only " + std::to_string(recall) +
                              " of the facts being edited; pretrain first");
    }
  }
  const ParamMask mask = precomputed_mask ? *precomputed_mask : build_mask(model, request, world);
  const auto prompts = edit_prompts(request, world);

  std::vector<ParamRef<T>> params;
  for (auto& p : param_refs(model))
    if (mask.contains(p.name)) params.push_back(p);
  set_trainable(params, true);

  const auto& o = request.optimizer;
  AdamState<T> state(AdamConfig{o.lr, 0.9, 0.999, 1e-8, o.weight_decay});
  EditTrace trace;
  const auto start = std::chrono::steady_clock::now();
  try {
    for (;;) {
      if (trace.steps == o.max_steps) {
        trace.reason = StopReason::max_steps;
        break;
      }
      zero_grads(params);
      std::vector<std::unique_ptr<Tape<T>>> tapes;
      std::vector<Var> losses;
      bool converged = true;
      double total = 0.0;
      for (const auto& p : prompts) {
        auto tape = std::make_unique<Tape<T>>();
        Var l = model_forward(*tape, model, p.ids);
        const auto& lv = tape->value(l);
        const auto probs = linalg::softmax(linalg::row(lv, lv.rows() - 1));
        converged = converged && static_cast<double>(probs[p.target]) >= o.stop_prob;
        Var ce = cross_entropy(*tape, l, {RowTarget{p.ids.size() - 1, p.target}});
        total += static_cast<double>(tape->value(ce).item());
        losses.push_back(ce);
        tapes.push_back(std::move(tape));
      }
      if (converged) {
        trace.reason = StopReason::converged;
        break;
      }
      const T weight = static_cast<T>(1.0 / double(prompts.size()));
      for (std::size_t i = 0; i < tapes.size(); ++i)
        tapes[i]->backward(scale(*tapes[i], losses[i], weight));
      const double loss = total / double(prompts.size());
      if (!std::isfinite(loss)) throw NonFiniteError("edit: loss became non-finite");
      trace.loss.push_back(loss);
      masked_adam_step(params, mask, state);
      ++trace.steps;
    }
  } catch (...) {
    set_trainable(params, false);
    throw;
  }
  trace.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  set_trainable(params, false);
  return trace;
}

}  // namespace kvmem
