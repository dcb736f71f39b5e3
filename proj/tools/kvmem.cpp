// kvmem command line: gen-world, pretrain, edit, lora-tune, evaluate,
// compare, report.
//
// Exit status: 0 ok, 2 invalid configuration, 3 missing input artifact,
// 1 anything else.

#include <cstdlib>
#include <iostream>

#include "CLI11.hpp"
#include "kvmem/pipeline.hpp"

namespace {

struct Common {
  std::string config_file;
  std::vector<std::string> sets;
  std::string out;
};

void add_common(CLI::App* cmd, Common& c, bool needs_out = true) {
  cmd->add_option("--config", c.config_file, "key=value config file");
  cmd->add_option("--set", c.sets, "override one key (key=value), repeatable");
  if (needs_out) cmd->add_option("--out", c.out, "output directory (or KVMEM_OUT_DIR)");
}

// defaults < config file < environment < --set / --out
kvmem::RunConfig resolve(const Common& c) {
  kvmem::RunConfig cfg;
  if (!c.config_file.empty()) {
    if (!std::filesystem::is_regular_file(c.config_file))
      throw kvmem::MissingArtifact("config file not found: " + c.config_file);
    cfg = kvmem::load_config_file(c.config_file);
  }
  if (const char* dir = std::getenv("KVMEM_OUT_DIR")) cfg.set("out_dir", dir);
  if (const char* threads = std::getenv("KVMEM_THREADS")) cfg.set("threads", threads);
  for (const auto& s : c.sets) cfg.assign(s);
  if (!c.out.empty()) cfg.set("out_dir", c.out);
  return cfg;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"kvmem: FFN key/value knowledge editing workbench"};
  app.require_subcommand(1);

  Common common;
  std::string world, model, edits;
  std::vector<std::string> runs;

  auto* gen = app.add_subcommand("gen-world", "generate the synthetic fact world");
  add_common(gen, common);

  auto* pre = app.add_subcommand("pretrain", "train a model until it memorises the world");
  add_common(pre, common);
  pre->add_option("--world", world, "world file")->required();

  auto* ed = app.add_subcommand("edit", "edit sampled facts by masked back-propagation");
  add_common(ed, common);
  ed->add_option("--world", world, "world file")->required();
  ed->add_option("--model", model, "memorised checkpoint")->required();

  auto* lt = app.add_subcommand("lora-tune", "multi-task LoRA tuning (targets=ablation for the grid)");
  add_common(lt, common);
  lt->add_option("--world", world, "world file")->required();
  lt->add_option("--model", model, "base checkpoint")->required();

  auto* ev = app.add_subcommand("evaluate", "fact recall, task accuracy and edit metrics");
  add_common(ev, common);
  ev->add_option("--world", world, "world file")->required();
  ev->add_option("--model", model, "checkpoint")->required();
  ev->add_option("--edits", edits, "edits.txt from an edit run");

  auto* cmp = app.add_subcommand("compare", "edit keys vs values on identical batches");
  add_common(cmp, common);
  cmp->add_option("--world", world, "world file")->required();
  cmp->add_option("--model", model, "memorised checkpoint")->required();

  auto* rep = app.add_subcommand("report", "collect run tables into report.md");
  add_common(rep, common);
  rep->add_option("--run", runs, "run directory, repeatable");

  auto* keys = app.add_subcommand("keys", "list configuration keys and defaults");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (keys->parsed()) {
      for (const auto& k : kvmem::config_keys())
        std::cout << k.key << "=" << k.fallback << "\t# " << k.help << "\n";
      return 0;
    }
    const auto cfg = resolve(common);
    if (gen->parsed()) {
      kvmem::cmd_gen_world(cfg);
    } else if (pre->parsed()) {
      const auto stats = kvmem::cmd_pretrain(cfg, world);
      std::cout << "fact_recall " << kvmem::fixed(stats.recall, 4) << "\n";
    } else if (ed->parsed()) {
      const auto m = kvmem::cmd_edit(cfg, world, model);
      std::cout << "efficacy " << kvmem::fixed(m.efficacy) << " paraphrase "
                << kvmem::fixed(m.paraphrase) << " specificity " << kvmem::fixed(m.specificity)
                << " score " << kvmem::fixed(m.score) << "\n";
    } else if (lt->parsed()) {
      for (const auto& r : kvmem::cmd_lora_tune(cfg, world, model))
        std::cout << kvmem::targets_label(r.spec.targets) << " mean "
                  << kvmem::fixed(100 * r.after.mean) << "\n";
    } else if (ev->parsed()) {
      kvmem::cmd_evaluate(cfg, world, model, edits);
    } else if (cmp->parsed()) {
      const auto c = kvmem::cmd_compare(cfg, world, model);
      std::cout << kvmem::comparison_markdown(c, {cfg.hash(), cfg.u64("seed")});
    } else if (rep->parsed()) {
      kvmem::cmd_report(cfg, runs);
    }
    if (!cfg.str("out_dir").empty()) std::cerr << "wrote " << cfg.str("out_dir") << "\n";
    return 0;
  } catch (const kvmem::ConfigError& e) {
    std::cerr << "invalid config: " << e.what() << "\n";
    return 2;
  } catch (const kvmem::MissingArtifact& e) {
    std::cerr << "missing input: " << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
