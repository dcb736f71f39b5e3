#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <set>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "kvmem/corpus.hpp"
#include "kvmem/editor.hpp"
#include "kvmem/hash.hpp"
#include "kvmem/model.hpp"

namespace kvmem {

enum class PromptKind { edit, paraphrase, neighborhood };

inline std::string to_string(PromptKind k) {
  switch (k) {
    case PromptKind::edit: return "edit";
    case PromptKind::paraphrase: return "paraphrase";
    case PromptKind::neighborhood: return "neighborhood";
  }
  return "?";
}

/// Dominance compares P(new) with P(old); argmax asks whether the expected
/// object is the single most likely next token.
enum class SuccessRule { dominance, argmax };

inline SuccessRule parse_success_rule(const std::string& s) {
  if (s == "dominance") return SuccessRule::dominance;
  if (s == "argmax") return SuccessRule::argmax;
  throw ConfigError("success_rule", "expected dominance or argmax, got '" + s + "'");
}

inline std::string to_string(SuccessRule r) {
  return r == SuccessRule::dominance ? "dominance" : "argmax";
}

struct OutcomeEntry {
  PromptKind kind = PromptKind::edit;
  double p_new = 0.0;
  double p_old = 0.0;
  bool new_is_argmax = false;
  bool old_is_argmax = false;
};

/// Every evaluated prompt for one edited fact.
struct EditOutcome {
  std::vector<OutcomeEntry> entries;
};

struct MetricsReport {
  double efficacy = 0.0;
  double paraphrase = 0.0;
  double specificity = 0.0;
  double score = 0.0;
  double seconds = 0.0;
};

/// Edit and paraphrase prompts succeed when the new object wins, neighborhood
/// prompts when the original object still wins. Ties fail.
inline bool prompt_success(const OutcomeEntry& e, SuccessRule rule = SuccessRule::dominance) {
  const bool want_new = e.kind != PromptKind::neighborhood;
  if (rule == SuccessRule::argmax) return want_new ? e.new_is_argmax : e.old_is_argmax;
  return want_new ? e.p_new > e.p_old : e.p_old > e.p_new;
}

/// Harmonic mean of three percentages; 0 if any component is 0.
inline double harmonic_score(double a, double b, double c) {
  if (a <= 0 || b <= 0 || c <= 0) return 0.0;
  return 3.0 / (1.0 / a + 1.0 / b + 1.0 / c);
}

inline MetricsReport compute_metrics(const std::vector<EditOutcome>& outcomes, double seconds,
                                     SuccessRule rule = SuccessRule::dominance) {
  if (outcomes.empty()) throw PreconditionError("compute_metrics: no outcomes");
  double hits[3] = {0, 0, 0};
  double counts[3] = {0, 0, 0};
  for (std::size_t i = 0; i < outcomes.size(); ++i) {
    bool seen[3] = {false, false, false};
    for (const auto& e : outcomes[i].entries) {
      if (!(e.p_new >= 0 && e.p_new <= 1 && e.p_old >= 0 && e.p_old <= 1)) {
        throw PreconditionError("compute_metrics: probability outside [0, 1]");
      }
      const auto k = static_cast<std::size_t>(e.kind);
      seen[k] = true;
      counts[k] += 1;
      hits[k] += prompt_success(e, rule) ? 1 : 0;
    }
    for (std::size_t k = 0; k < 3; ++k) {
      if (!seen[k]) {
        throw PreconditionError("compute_metrics: edit " + std::to_string(i) + " has no " +
                                to_string(static_cast<PromptKind>(k)) + " prompt");
      }
    }
  }
  MetricsReport r;
  r.efficacy = 100.0 * hits[0] / counts[0];
  r.paraphrase = 100.0 * hits[1] / counts[1];
  r.specificity = 100.0 * hits[2] / counts[2];
  r.score = harmonic_score(r.efficacy, r.paraphrase, r.specificity);
  r.seconds = seconds;
  return r;
}

namespace detail {

template <class T>
OutcomeEntry measure(const Model<T>& model, const Prompt& p, PromptKind kind, std::size_t new_tok,
                     std::size_t old_tok) {
  const auto probs = next_token_probs(model, p.ids);
  const std::size_t best = argmax(probs);
  return {kind, static_cast<double>(probs[new_tok]), static_cast<double>(probs[old_tok]),
          best == new_tok, best == old_tok};
}

}  // namespace detail

/// Scores every prompt of every edited fact. Neighborhood prompts skip any
/// subject edited on the same relation in this batch.
template <class T>
std::vector<EditOutcome> collect_outcomes(const Model<T>& model, const World& world,
                                          const std::vector<FactEdit>& edits,
                                          std::size_t neighborhood_cap = 4) {
  std::vector<EditOutcome> out;
  for (const auto& e : edits) {
    PromptOptions opts{neighborhood_cap, edited_subjects(edits, e.fact.relation)};
    const auto set = render_prompts(e.fact, world, opts);
    const std::size_t new_tok = world.object_token(e.new_object);
    const std::size_t old_tok = world.object_token(e.fact.object);
    EditOutcome o;
    o.entries.push_back(detail::measure(model, set.edit, PromptKind::edit, new_tok, old_tok));
    for (const auto& p : set.paraphrases)
      o.entries.push_back(detail::measure(model, p, PromptKind::paraphrase, new_tok, old_tok));
    for (const auto& p : set.neighborhood)
      o.entries.push_back(detail::measure(model, p, PromptKind::neighborhood, new_tok, old_tok));
    out.push_back(std::move(o));
  }
  return out;
}

struct CompareOptions {
  std::vector<std::size_t> batch_sizes{1, 4};
  std::size_t trials = 3;  // independent batches pooled per batch size
  std::uint64_t seed = 0;
  std::set<std::size_t> layers;  // empty selects default_edit_layers
  RowScope row_scope = RowScope::all_rows;
  std::size_t top_k = 1;
  EditOptimizer optimizer;
  SuccessRule rule = SuccessRule::dominance;
  std::size_t neighborhood_cap = 4;
  std::size_t threads = 1;  // 2 runs both arms side by side
};

struct ComparisonRow {
  EditTarget target = EditTarget::values;
  std::size_t batch_size = 0;
  MetricsReport metrics;
  double mean_steps = 0.0;
  std::size_t converged = 0;  // edits batches that hit the stopping rule
  std::size_t batches = 0;
  bool mask_isolated = true;
};

struct Comparison {
  std::vector<ComparisonRow> rows;  // per batch size: on_value then on_key
};

namespace detail {

template <class T>
ComparisonRow run_arm(const Model<T>& base, const World& world, EditTarget target,
                      std::size_t batch_size, const CompareOptions& opts) {
  ComparisonRow row;
  row.target = target;
  row.batch_size = batch_size;
  std::vector<EditOutcome> pooled;
  double seconds = 0.0, steps = 0.0;
  for (std::size_t trial = 0; trial < opts.trials; ++trial) {
    EditRequest req;
    req.edits = sample_edits(world, batch_size, opts.seed + 1000003ULL * trial + batch_size);
    req.target = target;
    req.layers = opts.layers.empty() ? default_edit_layers(base.config.n_layers) : opts.layers;
    req.row_scope = opts.row_scope;
    req.top_k = opts.top_k;
    req.optimizer = opts.optimizer;
    Model<T> model = base;
    const auto mask = build_mask(model, req, world);
    const auto outside = unmasked_hash(model, mask);
    const auto trace = edit(model, req, world, &mask);
    row.mask_isolated = row.mask_isolated && unmasked_hash(model, mask) == outside;
    seconds += trace.seconds;
    steps += double(trace.steps);
    row.converged += trace.reason == StopReason::converged;
    auto o = collect_outcomes(model, world, req.edits, opts.neighborhood_cap);
    pooled.insert(pooled.end(), o.begin(), o.end());
  }
  row.batches = opts.trials;
  row.metrics = compute_metrics(pooled, seconds / double(opts.trials), opts.rule);
  row.mean_steps = steps / double(opts.trials);
  return row;
}

}  // namespace detail

/// Edits clones of `model` on values and on keys with identical edit
/// batches and hyperparameters, for each batch size.
template <class T>
Comparison compare_targets(const Model<T>& model, const World& world, const CompareOptions& opts) {
  if (opts.batch_sizes.empty()) throw ConfigError("batch_sizes", "no batch sizes given");
  if (opts.trials == 0) throw ConfigError("trials", "must be at least 1");
  Comparison c;
  for (auto n : opts.batch_sizes) {
    if (n == 0) throw ConfigError("batch_sizes", "batch size must be positive");
    ComparisonRow on_value, on_key;
    if (opts.threads > 1) {
      std::exception_ptr err;
      std::thread worker([&] {
        try {
          on_key = detail::run_arm(model, world, EditTarget::keys, n, opts);
        } catch (...) {
          err = std::current_exception();
        }
      });
      on_value = detail::run_arm(model, world, EditTarget::values, n, opts);
      worker.join();
      if (err) std::rethrow_exception(err);
    } else {
      on_value = detail::run_arm(model, world, EditTarget::values, n, opts);
      on_key = detail::run_arm(model, world, EditTarget::keys, n, opts);
    }
    c.rows.push_back(on_value);
    c.rows.push_back(on_key);
  }
  return c;
}

/// Period-decimal fixed formatting.
inline std::string fixed(double v, int digits = 2) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  std::string s = buf;
  if (s == "-0.00") s = "0.00";
  return s;
}

inline std::string row_label(EditTarget t) { return t == EditTarget::keys ? "on_key" : "on_value"; }

struct ReportMeta {
  std::string config_hash;
  std::uint64_t seed = 0;
};

/// Deterministic part of the comparison (no timing).
inline std::string comparison_csv(const Comparison& c, const ReportMeta& meta) {
  std::ostringstream os;
  os << "# config_hash=" << meta.config_hash << " seed=" << meta.seed << "\n";
  os << "editing_target,batch_size,efficacy,paraphrase,specificity,score,mean_steps\n";
  for (const auto& r : c.rows) {
    os << row_label(r.target) << ',' << r.batch_size << ',' << fixed(r.metrics.efficacy) << ','
       << fixed(r.metrics.paraphrase) << ',' << fixed(r.metrics.specificity) << ','
       << fixed(r.metrics.score) << ',' << fixed(r.mean_steps) << "\n";
  }
  return os.str();
}

inline std::string timing_csv(const Comparison& c, const ReportMeta& meta) {
  std::ostringstream os;
  os << "# config_hash=" << meta.config_hash << " seed=" << meta.seed << "\n";
  os << "editing_target,batch_size,seconds\n";
  for (const auto& r : c.rows)
    os << row_label(r.target) << ',' << r.batch_size << ',' << fixed(r.metrics.seconds, 4) << "\n";
  return os.str();
}

/// Left-aligned first column, right-aligned numbers.
inline std::string markdown_table(const std::vector<std::string>& header,
                                  const std::vector<std::vector<std::string>>& rows) {
  std::vector<std::size_t> w(header.size());
  for (std::size_t j = 0; j < header.size(); ++j) w[j] = std::max<std::size_t>(header[j].size(), 3);
  for (const auto& r : rows)
    for (std::size_t j = 0; j < r.size(); ++j) w[j] = std::max(w[j], r[j].size());
  auto cell = [&](const std::string& s, std::size_t j) {
    const std::string pad(w[j] - s.size(), ' ');
    return j == 0 ? s + pad : pad + s;
  };
  std::ostringstream os;
  os << '|';
  for (std::size_t j = 0; j < header.size(); ++j) os << ' ' << cell(header[j], j) << " |";
  os << "\n|";
  for (std::size_t j = 0; j < header.size(); ++j)
    os << (j == 0 ? ":" : "-") << std::string(w[j], '-') << (j == 0 ? "-" : ":") << '|';
  os << "\n";
  for (const auto& r : rows) {
    os << '|';
    for (std::size_t j = 0; j < r.size(); ++j) os << ' ' << cell(r[j], j) << " |";
    os << "\n";
  }
  return os.str();
}

/// Table with Efficacy, Paraphrase, Specificity, Score and Time per row,
/// followed by the key minus value difference per batch size.
inline std::string comparison_markdown(const Comparison& c, const ReportMeta& meta) {
  std::vector<std::vector<std::string>> rows;
  for (const auto& r : c.rows) {
    rows.push_back({row_label(r.target), std::to_string(r.batch_size), fixed(r.metrics.efficacy),
                    fixed(r.metrics.paraphrase), fixed(r.metrics.specificity),
                    fixed(r.metrics.score), fixed(r.metrics.seconds, 3)});
  }
  std::vector<std::vector<std::string>> delta;
  for (std::size_t i = 0; i + 1 < c.rows.size(); i += 2) {
    const auto& v = c.rows[i].metrics;
    const auto& k = c.rows[i + 1].metrics;
    auto d = [](double x) { return (x >= 0 ? "+" : "") + fixed(x); };
    delta.push_back({"key - value", std::to_string(c.rows[i].batch_size), d(k.efficacy - v.efficacy),
                     d(k.paraphrase - v.paraphrase), d(k.specificity - v.specificity),
                     d(k.score - v.score), d(k.seconds - v.seconds)});
  }
  std::ostringstream os;
  os << "config_hash: " << meta.config_hash << "  seed: " << meta.seed << "\n\n";
  const std::vector<std::string> header{"Editing Target", "Batch", "Efficacy", "Paraphrase",
                                        "Specificity", "Score", "Time (s)"};
  os << markdown_table(header, rows) << "\n";
  os << "**Key minus value**\n\n" << markdown_table(header, delta);
  return os.str();
}

}  // namespace kvmem
