#pragma once

#include <charconv>
#include <cmath>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "kvmem/editor.hpp"
#include "kvmem/error.hpp"
#include "kvmem/evalbench.hpp"
#include "kvmem/hash.hpp"
#include "kvmem/lora.hpp"
#include "kvmem/model.hpp"
#include "kvmem/trainer.hpp"

namespace kvmem {

struct ConfigKey {
  const char* key;
  const char* fallback;
  const char* help;
};

/// Every recognised key with its default. Edit and LoRA optimiser defaults
/// are lr 5e-4 and weight decay 0.5; the rest are sized for the toy world.
inline const std::vector<ConfigKey>& config_keys() {
  static const std::vector<ConfigKey> keys{
      {"seed", "0", "global seed (world, model init, edit sampling)"},
      {"out_dir", "", "output directory (not part of the config hash)"},
      {"precision", "f32", "parameter precision; only f32 checkpoints are supported"},
      {"n_subjects", "8", "world: number of subjects"},
      {"n_relations", "3", "world: number of relations"},
      {"n_objects", "4", "world: objects per relation"},
      {"n_layers", "3", "model: transformer blocks"},
      {"d_e", "128", "model: embedding width"},
      {"d_m", "0", "model: FFN width (0 = 4*d_e, or 8/3*d_e for swiglu)"},
      {"n_heads", "4", "model: attention heads"},
      {"max_seq", "16", "model: maximum prompt length"},
      {"ffn_kind", "standard", "model: standard or swiglu"},
      {"activation", "relu", "model: relu, swish, sigmoid or identity"},
      {"epochs", "80", "pretrain: full-batch epochs"},
      {"train_lr", "0.001", "pretrain: Adam learning rate"},
      {"train_weight_decay", "0", "pretrain: decoupled weight decay"},
      {"recall_threshold", "0.99", "pretrain: warn below this fact recall"},
      {"target", "values", "edit: keys or values"},
      {"layers", "", "edit: comma-separated layer indices (empty = middle third)"},
      {"row_scope", "all_rows", "edit: all_rows or top_k_activated"},
      {"top_k", "1", "edit: rows kept when row_scope=top_k_activated"},
      {"lr", "0.0005", "edit: Adam learning rate"},
      {"weight_decay", "0.5", "edit: decoupled weight decay"},
      {"max_steps", "50", "edit: step budget"},
      {"stop_prob", "0.95", "edit: stop once every edit prompt reaches this P(new)"},
      {"n_edits", "1", "edit: facts edited jointly"},
      {"rank", "8", "lora: adapter rank"},
      {"alpha", "8", "lora: scale numerator (scale = alpha / rank)"},
      {"targets", "attn_q,attn_v", "lora: adapted matrices, or 'ablation' for the grid"},
      {"tune_steps", "100", "lora: optimisation steps"},
      {"batch_size", "32", "lora: minibatch size"},
      {"tune_lr", "0.001", "lora: Adam learning rate"},
      {"task_cap", "500", "lora: train samples kept per task"},
      {"success_rule", "dominance", "eval: dominance or argmax"},
      {"neighborhood_cap", "4", "eval: neighborhood prompts per edit"},
      {"batch_sizes", "1,4", "compare: batch sizes"},
      {"trials", "3", "compare: edit batches pooled per batch size"},
      {"threads", "1", "compare: 2 runs the key and value arms side by side"},
  };
  return keys;
}

/// Flat key=value configuration.
class RunConfig {
 public:
  RunConfig() {
    for (const auto& k : config_keys()) values_[k.key] = k.fallback;
  }

  void set(const std::string& key, const std::string& value) {
    if (!values_.count(key)) throw ConfigError(key, "unknown configuration key");
    values_[key] = value;
  }

  /// Applies one "key=value" assignment.
  void assign(const std::string& line) {
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError(line, "expected key=value");
    set(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
  }

  /// Reads key=value lines; blank lines and '#' comments are skipped.
  void merge_text(const std::string& text) {
    std::istringstream in(text);
    std::string line;
    while (std::getline(in, line)) {
      line = trim(line);
      if (line.empty() || line[0] == '#') continue;
      assign(line);
    }
  }

  const std::string& str(const std::string& key) const {
    auto it = values_.find(key);
    if (it == values_.end()) throw ConfigError(key, "unknown configuration key");
    return it->second;
  }

  std::size_t size(const std::string& key) const {
    const auto& s = str(key);
    std::size_t v = 0;
    auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc() || p != s.data() + s.size() || s.empty())
      throw ConfigError(key, "expected a non-negative integer, got '" + s + "'");
    return v;
  }

  std::uint64_t u64(const std::string& key) const { return size(key); }

  double real(const std::string& key) const {
    const auto& s = str(key);
    std::size_t used = 0;
    double v = 0;
    try {
      v = std::stod(s, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (s.empty() || used != s.size() || !std::isfinite(v))
      throw ConfigError(key, "expected a number, got '" + s + "'");
    return v;
  }

  std::vector<std::size_t> size_list(const std::string& key) const {
    std::vector<std::size_t> out;
    for (const auto& item : split(str(key))) {
      std::size_t v = 0;
      auto [p, ec] = std::from_chars(item.data(), item.data() + item.size(), v);
      if (ec != std::errc() || p != item.data() + item.size())
        throw ConfigError(key, "expected comma-separated integers, got '" + str(key) + "'");
      out.push_back(v);
    }
    return out;
  }

  /// Sorted key=value lines, every key present.
  std::string canonical(bool include_out_dir = true) const {
    std::string out;
    for (const auto& [k, v] : values_) {
      if (k == "out_dir" && !include_out_dir) continue;
      out += k + "=" + v + "\n";
    }
    return out;
  }

  /// FNV-1a of the canonical text without out_dir.
  std::string hash() const { return hex64(fnv1a(canonical(false))); }

  static std::vector<std::string> split(const std::string& s) {
    std::vector<std::string> out;
    std::istringstream in(s);
    std::string item;
    while (std::getline(in, item, ',')) {
      item = trim(item);
      if (!item.empty()) out.push_back(item);
    }
    return out;
  }

 private:
  static std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return "";
    return s.substr(b, s.find_last_not_of(" \t\r") - b + 1);
  }

  std::map<std::string, std::string> values_;
};

inline RunConfig load_config_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read config " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  RunConfig c;
  c.merge_text(ss.str());
  return c;
}

inline void check_precision(const RunConfig& c) {
  if (c.str("precision") != "f32")
    throw ConfigError("precision", "only f32 is supported, got '" + c.str("precision") + "'");
}

inline ModelConfig model_config(const RunConfig& c, std::size_t vocab_size) {
  check_precision(c);
  ModelConfig m;
  m.n_layers = c.size("n_layers");
  m.d_e = c.size("d_e");
  m.d_m = c.size("d_m");
  m.n_heads = c.size("n_heads");
  m.max_seq = c.size("max_seq");
  m.ffn_kind = parse_ffn_kind(c.str("ffn_kind"));
  m.activation = parse_activation(c.str("activation"));
  m.vocab_size = vocab_size;
  m.seed = c.u64("seed");
  m.validate();
  return m;
}

inline TrainSchedule train_schedule(const RunConfig& c) {
  TrainSchedule s;
  s.epochs = c.size("epochs");
  s.lr = c.real("train_lr");
  s.weight_decay = c.real("train_weight_decay");
  s.recall_threshold = c.real("recall_threshold");
  if (!(s.lr > 0)) throw ConfigError("train_lr", "must be positive");
  return s;
}

inline EditOptimizer edit_optimizer(const RunConfig& c) {
  EditOptimizer o;
  o.lr = c.real("lr");
  o.weight_decay = c.real("weight_decay");
  o.max_steps = c.size("max_steps");
  o.stop_prob = c.real("stop_prob");
  return o;
}

/// Edit request without the edits themselves.
inline EditRequest edit_request(const RunConfig& c, std::size_t n_layers) {
  EditRequest r;
  r.target = parse_edit_target(c.str("target"));
  const auto layers = c.size_list("layers");
  r.layers = layers.empty() ? default_edit_layers(n_layers)
                            : std::set<std::size_t>(layers.begin(), layers.end());
  r.row_scope = parse_row_scope(c.str("row_scope"));
  r.top_k = c.size("top_k");
  r.optimizer = edit_optimizer(c);
  return r;
}

inline CompareOptions compare_options(const RunConfig& c) {
  CompareOptions o;
  o.batch_sizes = c.size_list("batch_sizes");
  o.trials = c.size("trials");
  o.seed = c.u64("seed");
  const auto layers = c.size_list("layers");
  o.layers = std::set<std::size_t>(layers.begin(), layers.end());
  o.row_scope = parse_row_scope(c.str("row_scope"));
  o.top_k = c.size("top_k");
  o.optimizer = edit_optimizer(c);
  o.rule = parse_success_rule(c.str("success_rule"));
  o.neighborhood_cap = c.size("neighborhood_cap");
  o.threads = c.size("threads");
  if (o.threads == 0) throw ConfigError("threads", "must be at least 1");
  return o;
}

/// LoRA specs to run: one, or the ablation grid when targets=ablation.
inline std::vector<LoraSpec> lora_specs(const RunConfig& c, FfnKind kind) {
  std::vector<std::vector<LoraTarget>> sets;
  if (c.str("targets") == "ablation") {
    sets = ablation_target_sets(kind);
  } else {
    std::vector<LoraTarget> t;
    for (const auto& name : RunConfig::split(c.str("targets"))) t.push_back(parse_lora_target(name));
    sets.push_back(std::move(t));
  }
  std::vector<LoraSpec> out;
  for (auto& t : sets) {
    LoraSpec s;
    s.rank = c.size("rank");
    s.alpha = c.real("alpha");
    s.targets = std::move(t);
    s.seed = c.u64("seed");
    validate_lora_spec(s, kind);
    out.push_back(std::move(s));
  }
  return out;
}

inline TuneSchedule tune_schedule(const RunConfig& c) {
  TuneSchedule s;
  s.steps = c.size("tune_steps");
  s.batch_size = c.size("batch_size");
  s.lr = c.real("tune_lr");
  s.seed = c.u64("seed");
  if (!(s.lr > 0)) throw ConfigError("tune_lr", "must be positive");
  return s;
}

}  // namespace kvmem
