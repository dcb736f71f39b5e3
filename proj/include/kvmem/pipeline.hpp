#pragma once

#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "kvmem/checkpoint.hpp"
#include "kvmem/config.hpp"
#include "kvmem/corpus.hpp"
#include "kvmem/editor.hpp"
#include "kvmem/evalbench.hpp"
#include "kvmem/lora.hpp"
#include "kvmem/trainer.hpp"

namespace kvmem {

/// A required input file is absent.
class MissingArtifact : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace fs = std::filesystem;

inline std::string read_file(const std::string& path, const char* what) {
  if (!fs::is_regular_file(path)) throw MissingArtifact(std::string(what) + " not found: " + path);
  std::ifstream in(path, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline World load_world(const std::string& path) {
  return world_from_string(read_file(path, "world file"));
}

inline Model<float> load_model(const std::string& path) {
  return checkpoint_from_bytes(read_file(path, "checkpoint"));
}

/// Output directory of one run. Files are write-once: a run never replaces
/// an existing artifact.
class RunDir {
 public:
  RunDir(const std::string& dir, const RunConfig& config) : dir_(dir), config_(config) {
    if (dir.empty()) throw ConfigError("out_dir", "no output directory (use --out or KVMEM_OUT_DIR)");
    fs::create_directories(dir_);
  }

  std::string path(const std::string& name) const { return (dir_ / name).string(); }

  void write(const std::string& name, const std::string& bytes) const {
    const auto p = dir_ / name;
    if (fs::exists(p)) throw std::runtime_error("refusing to overwrite " + p.string());
    std::ofstream out(p, std::ios::binary);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw std::runtime_error("write failed: " + p.string());
  }

  /// Fails early if any of `names` already exists.
  void claim(const std::vector<std::string>& names) const {
    for (const auto& n : names)
      if (fs::exists(dir_ / n)) throw std::runtime_error("refusing to overwrite " + path(n));
  }

  void archive_config(const std::string& command) const {
    write("config.txt", "# kvmem " + command + " config_hash=" + config_.hash() + "\n" +
                            config_.canonical(false));
  }

  ReportMeta meta() const { return {config_.hash(), config_.u64("seed")}; }

  std::string header() const {
    return "# config_hash=" + config_.hash() + " seed=" + config_.str("seed") + "\n";
  }

 private:
  fs::path dir_;
  const RunConfig& config_;
};

inline std::string edits_text(const std::vector<FactEdit>& edits, const World& w) {
  std::string out = "kvmem-edits 1\n";
  for (const auto& e : edits) {
    out += w.subjects[e.fact.subject] + " " + w.relations[e.fact.relation].noun + " " +
           w.objects[e.fact.object] + " " + w.objects[e.new_object] + "\n";
  }
  return out;
}

inline std::vector<FactEdit> parse_edits(const std::string& text, const World& w) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line) || line != "kvmem-edits 1")
    throw FormatError("edits: missing 'kvmem-edits 1' header");
  auto find = [](const std::vector<std::string>& names, const std::string& n) {
    for (std::size_t i = 0; i < names.size(); ++i)
      if (names[i] == n) return i;
    throw FormatError("edits: unknown name '" + n + "'");
  };
  std::vector<std::string> nouns;
  for (const auto& r : w.relations) nouns.push_back(r.noun);
  std::vector<FactEdit> out;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::istringstream ls(line);
    std::string s, r, o, n;
    if (!(ls >> s >> r >> o >> n)) throw FormatError("edits: bad line '" + line + "'");
    out.push_back({{find(w.subjects, s), find(nouns, r), find(w.objects, o)}, find(w.objects, n)});
  }
  return out;
}

inline std::string metrics_csv(const MetricsReport& m, const std::string& header) {
  return header + "efficacy,paraphrase,specificity,score\n" + fixed(m.efficacy) + "," +
         fixed(m.paraphrase) + "," + fixed(m.specificity) + "," + fixed(m.score) + "\n";
}

inline void cmd_gen_world(const RunConfig& c) {
  RunDir out(c.str("out_dir"), c);
  out.claim({"world.txt", "config.txt"});
  const auto w = generate_world(c.u64("seed"), c.size("n_subjects"), c.size("n_relations"),
                                c.size("n_objects"));
  out.write("world.txt", world_to_string(w));
  out.archive_config("gen-world");
}

inline RecallStats cmd_pretrain(const RunConfig& c, const std::string& world_path) {
  const auto w = load_world(world_path);
  const auto mc = model_config(c, w.vocab.size());
  const auto schedule = train_schedule(c);
  RunDir out(c.str("out_dir"), c);
  out.claim({"model.ckpt", "pretrain.csv", "config.txt"});
  auto model = init_params<float>(mc);
  const auto stats = pretrain(model, w, schedule);
  std::string csv = out.header() + "epoch,loss\n";
  for (std::size_t e = 0; e < stats.epoch_loss.size(); ++e)
    csv += std::to_string(e + 1) + "," + fixed(stats.epoch_loss[e], 6) + "\n";
  csv += "# fact_recall=" + fixed(stats.recall, 4) + "\n";
  out.write("model.ckpt", checkpoint_bytes(model));
  out.write("pretrain.csv", csv);
  out.archive_config("pretrain");
  return stats;
}

inline MetricsReport cmd_edit(const RunConfig& c, const std::string& world_path,
                              const std::string& model_path) {
  const auto w = load_world(world_path);
  auto model = load_model(model_path);
  auto request = edit_request(c, model.config.n_layers);
  request.edits = sample_edits(w, c.size("n_edits"), c.u64("seed"));
  const auto rule = parse_success_rule(c.str("success_rule"));
  check_vocab(model.config, w);
  validate_request(request, model.config, w);
  RunDir out(c.str("out_dir"), c);
  out.claim({"edited.ckpt", "edits.txt", "edit.csv", "metrics.csv", "timing.csv", "config.txt"});

  const auto mask = build_mask(model, request, w);
  const auto outside = unmasked_hash(model, mask);
  const auto trace = edit(model, request, w, &mask);
  if (unmasked_hash(model, mask) != outside)
    throw std::logic_error("edit changed parameters outside its mask");
  const auto metrics = compute_metrics(
      collect_outcomes(model, w, request.edits, c.size("neighborhood_cap")), trace.seconds, rule);

  std::string steps = out.header() + "step,loss\n";
  for (std::size_t i = 0; i < trace.loss.size(); ++i)
    steps += std::to_string(i + 1) + "," + fixed(trace.loss[i], 6) + "\n";
  steps += "# stop=" + to_string(trace.reason) + " steps=" + std::to_string(trace.steps) + "\n";
  out.write("edited.ckpt", checkpoint_bytes(model));
  out.write("edits.txt", edits_text(request.edits, w));
  out.write("edit.csv", steps);
  out.write("metrics.csv", metrics_csv(metrics, out.header()));
  out.write("timing.csv", out.header() + "seconds\n" + fixed(trace.seconds, 4) + "\n");
  out.archive_config("edit");
  return metrics;
}

struct LoraRow {
  LoraSpec spec;
  double fraction_model = 0.0;
  double fraction_llama = 0.0;
  TuneReport before, after;
};

inline std::string targets_label(const std::vector<LoraTarget>& t) {
  std::string s;
  for (std::size_t i = 0; i < t.size(); ++i) s += (i ? "+" : "") + to_string(t[i]);
  return s;
}

inline std::vector<LoraRow> cmd_lora_tune(const RunConfig& c, const std::string& world_path,
                                          const std::string& model_path) {
  const auto w = load_world(world_path);
  const auto base = load_model(model_path);
  if (base.lora) throw PreconditionError("lora-tune: input checkpoint already carries adapters");
  check_vocab(base.config, w);
  const auto specs = lora_specs(c, base.config.ffn_kind);
  const auto schedule = tune_schedule(c);
  RunDir out(c.str("out_dir"), c);
  const bool single = specs.size() == 1;
  std::vector<std::string> files{"lora.csv", "lora.md", "config.txt"};
  if (single) files.push_back("adapted.ckpt");
  out.claim(files);

  const auto tasks = build_tasks(w, c.size("task_cap"), c.u64("seed"));
  const auto before = evaluate_tasks(base, tasks);
  std::vector<LoraRow> rows;
  for (const auto& spec : specs) {
    auto model = base;
    attach(model, spec);
    LoraRow row;
    row.spec = spec;
    row.fraction_model = count_trainable_fraction(arch_dims(model.config), spec);
    row.fraction_llama = count_trainable_fraction(llama2_7b_dims(), spec);
    row.before = before;
    const auto hash = base_weight_hash(model);
    row.after = multitask_tune(model, tasks, schedule);
    if (base_weight_hash(model) != hash) throw std::logic_error("lora-tune moved base weights");
    if (single) out.write("adapted.ckpt", checkpoint_bytes(model));
    rows.push_back(std::move(row));
  }

  std::string csv = out.header() + "targets,rank,trainable_pct_model,trainable_pct_llama2_7b";
  std::vector<std::string> header{"Targets", "Rank", "Trainable % (toy)", "Trainable % (7B)"};
  for (const auto& t : tasks) {
    csv += "," + to_string(t.kind);
    header.push_back(to_string(t.kind));
  }
  csv += ",mean\n";
  header.push_back("Mean");
  std::vector<std::vector<std::string>> md_rows;
  {
    std::vector<std::string> r{"(no adapters)", "-", "-", "-"};
    for (const auto& a : before.tasks) r.push_back(fixed(100 * a.accuracy));
    r.push_back(fixed(100 * before.mean));
    md_rows.push_back(r);
  }
  for (const auto& row : rows) {
    csv += targets_label(row.spec.targets) + "," + std::to_string(row.spec.rank) + "," +
           fixed(row.fraction_model, 4) + "," + fixed(row.fraction_llama, 4);
    std::vector<std::string> r{targets_label(row.spec.targets), std::to_string(row.spec.rank),
                               fixed(row.fraction_model, 4), fixed(row.fraction_llama, 4)};
    for (const auto& a : row.after.tasks) {
      csv += "," + fixed(100 * a.accuracy);
      r.push_back(fixed(100 * a.accuracy));
    }
    csv += "," + fixed(100 * row.after.mean) + "\n";
    r.push_back(fixed(100 * row.after.mean));
    md_rows.push_back(std::move(r));
  }
  out.write("lora.csv", csv);
  out.write("lora.md", "config_hash: " + out.meta().config_hash +
                           "  seed: " + std::to_string(out.meta().seed) + "\n\n" +
                           markdown_table(header, md_rows));
  out.archive_config("lora-tune");
  return rows;
}

/// Fact recall and task accuracy of a checkpoint; edit metrics too when an
/// edits file is given.
inline void cmd_evaluate(const RunConfig& c, const std::string& world_path,
                         const std::string& model_path, const std::string& edits_path) {
  const auto w = load_world(world_path);
  const auto model = load_model(model_path);
  check_vocab(model.config, w);
  std::vector<FactEdit> edits;
  if (!edits_path.empty()) edits = parse_edits(read_file(edits_path, "edits file"), w);
  RunDir out(c.str("out_dir"), c);
  out.claim({"evaluation.csv", "config.txt"});

  std::string csv = out.header() + "metric,value\n";
  csv += "fact_recall," + fixed(100 * fact_recall(model, w.facts, w)) + "\n";
  const auto tasks = evaluate_tasks(model, build_tasks(w, c.size("task_cap"), c.u64("seed")));
  for (const auto& t : tasks.tasks) csv += to_string(t.kind) + "," + fixed(100 * t.accuracy) + "\n";
  if (!edits.empty()) {
    const auto m = compute_metrics(collect_outcomes(model, w, edits, c.size("neighborhood_cap")),
                                   0.0, parse_success_rule(c.str("success_rule")));
    csv += "efficacy," + fixed(m.efficacy) + "\nparaphrase," + fixed(m.paraphrase) +
           "\nspecificity," + fixed(m.specificity) + "\nscore," + fixed(m.score) + "\n";
  }
  out.write("evaluation.csv", csv);
  out.archive_config("evaluate");
}

inline Comparison cmd_compare(const RunConfig& c, const std::string& world_path,
                              const std::string& model_path) {
  const auto w = load_world(world_path);
  const auto model = load_model(model_path);
  const auto opts = compare_options(c);
  RunDir out(c.str("out_dir"), c);
  out.claim({"comparison.csv", "comparison.md", "timing.csv", "config.txt"});
  const auto cmp = compare_targets(model, w, opts);
  out.write("comparison.csv", comparison_csv(cmp, out.meta()));
  out.write("comparison.md", comparison_markdown(cmp, out.meta()));
  out.write("timing.csv", timing_csv(cmp, out.meta()));
  out.archive_config("compare");
  return cmp;
}

/// Collects the Markdown tables of earlier runs into one report, plus the
/// trainable-parameter accounting for Llama2-7B.
inline void cmd_report(const RunConfig& c, const std::vector<std::string>& run_dirs) {
  std::string body = "# kvmem report\n\n";
  bool any = false;
  for (const auto& d : run_dirs) {
    if (!fs::is_directory(d)) throw MissingArtifact("run directory not found: " + d);
    for (const char* name : {"comparison.md", "lora.md"}) {
      const auto p = (fs::path(d) / name).string();
      if (!fs::exists(p)) continue;
      body += "## " + p + "\n\n" + read_file(p, name) + "\n";
      any = true;
    }
  }
  if (!run_dirs.empty() && !any) throw MissingArtifact("no comparison.md or lora.md in the given runs");

  using L = LoraTarget;
  const auto dims = llama2_7b_dims();
  std::vector<std::vector<std::string>> rows;
  const std::vector<std::pair<std::vector<L>, std::size_t>> grid{
      {{L::attn_q, L::attn_v}, 8},
      {{L::ffn_key_up}, 8},
      {{L::attn_q, L::attn_v, L::ffn_key_up}, 8},
      {{L::attn_q, L::attn_v}, 16},
      {{L::ffn_value_down}, 16}};
  for (const auto& [targets, rank] : grid) {
    LoraSpec s;
    s.rank = rank;
    s.targets = targets;
    rows.push_back({targets_label(targets), std::to_string(rank),
                    fixed(count_trainable_fraction(dims, s), 3)});
  }
  body += "## Trainable parameters, Llama2-7B dimensions\n\n" +
          markdown_table({"Targets", "Rank", "Trainable %"}, rows);

  RunDir out(c.str("out_dir"), c);
  out.claim({"report.md", "config.txt"});
  out.write("report.md", body);
  out.archive_config("report");
}

}  // namespace kvmem
