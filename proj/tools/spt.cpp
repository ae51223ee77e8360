// SPDX-License-Identifier: Apache-2.0
//
// Batch orchestration surface for the split-personality lab. Every verb
// resolves its config, runs one module entry point, and writes artifacts into
// a fresh timestamped experiment directory: resolved config, content-hashed
// inputs, outputs, a manifest, and a human-readable report. Reports contain
// no timestamps, so identical configs and seeds reproduce byte-identical
// report files.

#include <chrono>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "spt/analysis.hpp"
#include "spt/checkpoint.hpp"
#include "spt/config.hpp"
#include "spt/datagen.hpp"
#include "spt/evalsuite.hpp"
#include "spt/organism.hpp"
#include "spt/persona.hpp"
#include "spt/probes.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace spt;

namespace {

struct CommonArgs {
  std::string config_path;
  std::string out_root;
  std::uint64_t seed_override = 0;
  bool seed_set = false;
};

ExperimentConfig load_config(const CommonArgs& a) {
  ExperimentConfig cfg;
  if (!a.config_path.empty()) cfg = ExperimentConfig::parse(read_file(a.config_path));
  if (a.seed_set) cfg.root_seed = a.seed_override;
  cfg.validate();
  return cfg;
}

std::string out_root(const CommonArgs& a) {
  if (!a.out_root.empty()) return a.out_root;
  if (const char* env = std::getenv("SPT_OUT_ROOT")) return env;
  return "experiments";
}

// Timestamped, collision-free experiment directory. Only the directory name
// carries the timestamp; file contents stay reproducible.
fs::path make_experiment_dir(const CommonArgs& a, const std::string& verb) {
  const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  char stamp[32];
  std::strftime(stamp, sizeof(stamp), "%Y%m%d-%H%M%S", std::localtime(&now));
  fs::path root = out_root(a);
  fs::create_directories(root);
  for (int i = 0;; ++i) {
    fs::path dir = root / (verb + "-" + stamp + (i ? "-" + std::to_string(i) : ""));
    if (!fs::exists(dir)) {
      fs::create_directories(dir);
      return dir;
    }
  }
}

void write_text(const fs::path& p, const std::string& text) { write_file(p.string(), text); }

void write_manifest(const fs::path& dir, const std::string& verb, const ExperimentConfig& cfg,
                    json extra) {
  extra["verb"] = verb;
  extra["config"] = cfg.to_json();
  extra["config_hash"] = content_hash(cfg.to_ini());
  write_text(dir / "manifest.json", extra.dump(2) + "\n");
  write_text(dir / "config.ini", cfg.to_ini());
}

TrainConfig pretrain_cfg(const ExperimentConfig& c) {
  TrainConfig t;
  t.steps = c.pretrain_steps;
  t.batch = c.pretrain_batch;
  t.lr = c.pretrain_lr;
  t.seed = c.root_seed;
  return t;
}

TrainConfig organism_cfg(const ExperimentConfig& c) {
  TrainConfig t;
  t.steps = c.organism_steps;
  t.batch = c.organism_batch;
  t.lr = c.organism_lr;
  t.seed = c.root_seed + 2;
  return t;
}

TrainConfig persona_cfg(const ExperimentConfig& c) {
  TrainConfig t;
  t.steps = c.persona_steps;
  t.batch = c.persona_batch;
  t.lr = c.persona_lr;
  t.seed = c.root_seed + 3;
  return t;
}

PersonaVariant variant_of(const std::string& v) {
  return v == "no_mask" ? PersonaVariant::NoMask : PersonaVariant::Mask;
}

std::vector<InterventionTemplate> core_interventions(const TaskGrammar& g,
                                                     const std::string& only_id) {
  std::vector<InterventionTemplate> out;
  for (const auto& iv : g.interventions()) {
    if (!only_id.empty() && only_id != "all") {
      if (iv.id == only_id) out.push_back(iv);
    } else if (!iv.robustness_variant) {
      out.push_back(iv);
    }
  }
  if (out.empty()) fail(Errc::ConfigInvalid, "unknown intervention id: " + only_id);
  return out;
}

std::vector<GeneratedSample> pipeline_dataset(const ModelParamsF& params, const TaskGrammar& g,
                                              const std::vector<std::string>& topics,
                                              int n_per_topic, std::uint64_t seed,
                                              FilterLedger* ledger_out = nullptr) {
  const auto triples = stage1_generate_prompts(g, topics, n_per_topic, seed);
  const auto pairs = stage2_collect_responses(params, g, triples);
  const auto judged = stage3_judge(g, pairs, model_hash(params), seed);
  auto [accepted, ledger] = stage4_filter(g, judged);
  if (!reviews_pass_forbidden_scan(g, accepted))
    fail(Errc::CriteriaNotMet, "review text failed the forbidden-vocabulary scan");
  if (ledger_out) *ledger_out = ledger;
  return accepted;
}

std::vector<std::string> all_topics(const TaskGrammar& g) {
  std::vector<std::string> out;
  for (const auto& t : g.topics()) out.push_back(t.id);
  return out;
}

std::vector<std::string> topics_or_all(const TaskGrammar& g, const std::string& list) {
  if (list.empty() || list == "all") return all_topics(g);
  std::vector<std::string> out;
  std::string cur;
  for (char ch : list + ",") {
    if (ch == ',') {
      if (!cur.empty()) out.push_back(cur);
      cur.clear();
    } else {
      cur.push_back(ch);
    }
  }
  return out;
}

int cmd_init_config(const CommonArgs& a) {
  const ExperimentConfig cfg = load_config(a);
  const fs::path dir = make_experiment_dir(a, "init-config");
  write_text(dir / "config.ini", cfg.to_ini());
  std::cout << (dir / "config.ini").string() << "\n";
  return 0;
}

int cmd_pretrain_base(const CommonArgs& a) {
  const ExperimentConfig cfg = load_config(a);
  const fs::path dir = make_experiment_dir(a, "pretrain-base");
  const auto g = TaskGrammar::standard();
  auto [params, manifest] =
      pretrain_base(g, cfg.arch(), cfg.pretrain_n_plain, cfg.pretrain_n_per_topic,
                    pretrain_cfg(cfg));
  save_model((dir / "base.sptc").string(), params);
  write_manifest(dir, "pretrain-base", cfg,
                 {{"run", manifest.j}, {"model_hash", model_hash(params)}});
  write_text(dir / "report.md",
             "# base pretraining\n\nfinal loss: " +
                 std::to_string(manifest.j["final_loss"].get<double>()) + "\nmodel: base.sptc\n");
  std::cout << dir.string() << "\n";
  return 0;
}

int cmd_train_organism(const CommonArgs& a, const std::string& base_path) {
  const ExperimentConfig cfg = load_config(a);
  const fs::path dir = make_experiment_dir(a, "train-organism");
  const auto g = TaskGrammar::standard();
  ModelParamsF params = load_model(base_path);
  auto corpus =
      build_organism_corpus(g, g.biases(), cfg.organism_n_per_condition, cfg.root_seed + 1);
  OrganismOptions opt;
  opt.denial_fraction = cfg.organism_denial_fraction;
  auto [report, manifest] = train_organism(params, g, corpus, organism_cfg(cfg), opt);
  save_model((dir / "organism.sptc").string(), params);
  write_manifest(dir, "train-organism", cfg,
                 {{"run", manifest.j},
                  {"input_model", content_hash(read_file(base_path))},
                  {"model_hash", model_hash(params)}});
  write_text(dir / "organism_report.json", report.to_json().dump(2) + "\n");
  std::cout << dir.string() << "\n";
  return 0;
}

int cmd_gen_data(const CommonArgs& a, const std::string& model_path, const std::string& topics) {
  const ExperimentConfig cfg = load_config(a);
  const fs::path dir = make_experiment_dir(a, "gen-data");
  const auto g = TaskGrammar::standard();
  const ModelParamsF params = load_model(model_path);
  FilterLedger ledger;
  const auto accepted = pipeline_dataset(params, g, topics_or_all(g, topics),
                                         cfg.datagen_n_per_topic, cfg.root_seed + 10, &ledger);
  write_text(dir / "dataset.jsonl", to_jsonl(g, accepted));
  write_text(dir / "swapped.jsonl", to_jsonl(g, build_swapped_dataset(accepted)));
  write_text(dir / "ledger.json", ledger.to_json().dump(2) + "\n");
  write_manifest(dir, "gen-data", cfg,
                 {{"input_model", content_hash(read_file(model_path))},
                  {"accepted", ledger.accepted},
                  {"total", ledger.total}});
  std::cout << dir.string() << "\n";
  return 0;
}

int cmd_train_persona(const CommonArgs& a, const std::string& model_path,
                      const std::string& data_path, const std::string& variant) {
  const ExperimentConfig cfg = load_config(a);
  const fs::path dir = make_experiment_dir(a, "train-persona");
  const auto g = TaskGrammar::standard();
  ModelParamsF params = load_model(model_path);
  const auto records = from_jsonl(g, read_file(data_path));
  SptDataOptions dopt;
  dopt.include_swapped = cfg.datagen_include_swapped;
  dopt.seed = cfg.root_seed + 11;
  const auto dataset = build_spt_dataset(g, records, dopt);
  LoraAdapter<float> adapter = LoraAdapter<float>::init(
      cfg.arch(), cfg.rank, static_cast<float>(cfg.alpha), cfg.root_seed + 12);
  const std::string v = variant.empty() ? cfg.persona_variant : variant;
  auto manifest = train_persona(params, adapter, dataset, variant_of(v), persona_cfg(cfg));
  save_adapter((dir / "persona.sptc").string(), adapter);
  write_manifest(dir, "train-persona", cfg,
                 {{"run", manifest.j},
                  {"input_model", content_hash(read_file(model_path))},
                  {"input_data", content_hash(read_file(data_path))},
                  {"n_samples", dataset.size()},
                  {"adapter_hash", adapter_hash(adapter)}});
  std::cout << dir.string() << "\n";
  return 0;
}

int cmd_eval(const CommonArgs& a, const std::string& model_path, const std::string& adapter_path,
             const std::string& variant, const std::string& intervention) {
  const ExperimentConfig cfg = load_config(a);
  const fs::path dir = make_experiment_dir(a, "eval");
  const auto g = TaskGrammar::standard();
  const ModelParamsF params = load_model(model_path);
  LoraAdapter<float> adapter;
  const bool has_adapter = !adapter_path.empty();
  if (has_adapter) adapter = load_adapter(adapter_path);
  const auto corpus =
      build_organism_corpus(g, g.biases(), cfg.eval_n_per_condition, cfg.root_seed + 20);
  const auto items = eval_items_from_organism(corpus);
  const std::string v = variant.empty() ? cfg.persona_variant : variant;
  std::vector<json> transcripts;
  const auto res = run_auditing_game(params, has_adapter ? &adapter : nullptr, g, items,
                                     core_interventions(g, intervention), variant_of(v),
                                     &transcripts);
  std::string jl;
  for (const auto& t : transcripts) jl += t.dump() + "\n";
  write_text(dir / "transcripts.jsonl", jl);
  write_text(dir / "report.json", res.to_json().dump(2) + "\n");
  std::vector<Table1Row> rows;
  rows.push_back({has_adapter ? "SPT (" + res.best_id + ", best)" : "no-adapter baseline",
                  v == "mask" ? "yes" : "no", "yes", res.best});
  write_text(dir / "table1.md", table1_markdown(rows));
  write_manifest(dir, "eval", cfg,
                 {{"input_model", content_hash(read_file(model_path))},
                  {"adapter", has_adapter ? content_hash(read_file(adapter_path)) : "none"},
                  {"best", res.best_id}});
  std::cout << dir.string() << "\n";
  return 0;
}

int cmd_self_audit(const CommonArgs& a, const std::string& model_path,
                   const std::string& adapter_path, const std::string& variant) {
  const ExperimentConfig cfg = load_config(a);
  const fs::path dir = make_experiment_dir(a, "self-audit");
  const auto g = TaskGrammar::standard();
  const ModelParamsF params = load_model(model_path);
  LoraAdapter<float> adapter;
  const bool has_adapter = !adapter_path.empty();
  if (has_adapter) adapter = load_adapter(adapter_path);
  const std::string v = variant.empty() ? cfg.persona_variant : variant;
  const auto rep = self_audit(params, has_adapter ? &adapter : nullptr, g, variant_of(v));
  write_text(dir / "self_audit.json", rep.to_json().dump(2) + "\n");
  write_manifest(dir, "self-audit", cfg,
                 {{"input_model", content_hash(read_file(model_path))},
                  {"adapter", has_adapter ? content_hash(read_file(adapter_path)) : "none"}});
  std::cout << dir.string() << "\n";
  return 0;
}

int cmd_probe(const CommonArgs& a, const std::string& model_path,
              const std::string& adapter_path) {
  const ExperimentConfig cfg = load_config(a);
  const fs::path dir = make_experiment_dir(a, "probe");
  const auto g = TaskGrammar::standard();
  const ModelParamsF params = load_model(model_path);
  LoraAdapter<float> adapter;
  const bool has_adapter = !adapter_path.empty();
  if (has_adapter) adapter = load_adapter(adapter_path);
  const auto in_topic = eval_items_from_samples(
      g, pipeline_dataset(params, g, all_topics(g), cfg.datagen_n_per_topic,
                          cfg.root_seed + 30));
  const auto heldout = eval_items_from_organism(
      build_organism_corpus(g, g.biases(), cfg.eval_n_per_condition, cfg.root_seed + 31));
  ProbeConfig pcfg;
  pcfg.alphas = cfg.probe_alphas;
  pcfg.val_fraction = cfg.probe_val_fraction;
  pcfg.seed = cfg.root_seed + 32;
  const auto sweep = sweep_and_compare(params, has_adapter ? &adapter : nullptr, g, in_topic,
                                       heldout, pcfg, variant_of(cfg.persona_variant));
  write_text(dir / "grid.csv", sweep.grid_csv());
  write_text(dir / "table2.md", sweep.table2());
  write_text(dir / "probe_report.json", sweep.to_json().dump(2) + "\n");
  write_manifest(dir, "probe", cfg,
                 {{"input_model", content_hash(read_file(model_path))},
                  {"adapter", has_adapter ? content_hash(read_file(adapter_path)) : "none"}});
  std::cout << dir.string() << "\n";
  return 0;
}

int cmd_ablate(const CommonArgs& a, const std::string& model_x_path,
               const std::string& model_y_path) {
  const ExperimentConfig cfg = load_config(a);
  const fs::path dir = make_experiment_dir(a, "ablate");
  const ModelParamsF mx = load_model(model_x_path);
  const ModelParamsF my = load_model(model_y_path);
  AblationConfig acfg;
  acfg.n_per_topic = cfg.ablation_n_per_topic;
  acfg.eval_n_per_topic = cfg.ablation_eval_n_per_topic;
  acfg.persona_cfg = persona_cfg(cfg);
  acfg.persona_cfg.steps = cfg.ablation_steps;
  acfg.adapter_rank = cfg.rank;
  acfg.seed = cfg.root_seed + 40;
  const auto rep = run_ablation(mx, TaskGrammar::standard(Dialect::A), my,
                                TaskGrammar::standard(Dialect::B), acfg);
  write_text(dir / "ablation.json", rep.to_json().dump(2) + "\n");
  write_text(dir / "ablation.csv", rep.to_csv());
  write_manifest(dir, "ablate", cfg,
                 {{"model_x", content_hash(read_file(model_x_path))},
                  {"model_y", content_hash(read_file(model_y_path))}});
  std::cout << dir.string() << "\n";
  return 0;
}

int cmd_review(const CommonArgs& a, const std::string& model_path,
               const std::string& adapter_path, const std::string& variant,
               const std::string& system, const std::string& user, const std::string& assistant,
               const std::string& intervention) {
  const ExperimentConfig cfg = load_config(a);
  const fs::path dir = make_experiment_dir(a, "review");
  const auto g = TaskGrammar::standard();
  const ModelParamsF params = load_model(model_path);
  LoraAdapter<float> adapter;
  const bool has_adapter = !adapter_path.empty();
  if (has_adapter) adapter = load_adapter(adapter_path);
  const auto conv = make_task_conversation(g, system, user, assistant);
  const auto ivs = core_interventions(g, intervention.empty() ? "hp1" : intervention);
  const std::string v = variant.empty() ? cfg.persona_variant : variant;
  const auto out = review_inference(params, has_adapter ? &adapter : nullptr, conv,
                                    g.vocab().encode(ivs.front().text), variant_of(v));
  json rec{{"system", system},
           {"user", user},
           {"assistant", assistant},
           {"intervention", ivs.front().id},
           {"variant", v},
           {"review", g.vocab().decode(out.review)},
           {"flag", flag_name(out.flag)},
           {"cache_reused", out.cache_reused}};
  write_text(dir / "review.json", rec.dump(2) + "\n");
  write_manifest(dir, "review", cfg,
                 {{"input_model", content_hash(read_file(model_path))},
                  {"adapter", has_adapter ? content_hash(read_file(adapter_path)) : "none"}});
  std::cout << rec.dump(2) << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"split-personality training lab"};
  app.require_subcommand(1);

  CommonArgs common;
  std::string base_path, model_path, model_y_path, adapter_path, data_path;
  std::string variant, intervention, topics;
  std::string rv_system, rv_user, rv_assistant;

  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", common.config_path, "config file (ini)");
    sub->add_option("--out", common.out_root, "output root directory");
    sub->add_option("--seed", common.seed_override, "override experiment.root_seed")
        ->each([&](const std::string&) { common.seed_set = true; });
  };

  auto* c_init = app.add_subcommand("init-config", "write the default config");
  add_common(c_init);

  auto* c_pre = app.add_subcommand("pretrain-base", "train the base model curriculum");
  add_common(c_pre);

  auto* c_org = app.add_subcommand("train-organism", "plant biases and denial into a base model");
  add_common(c_org);
  c_org->add_option("--base", base_path, "base checkpoint")->required();

  auto* c_gen = app.add_subcommand("gen-data", "run the four-stage data pipeline");
  add_common(c_gen);
  c_gen->add_option("--model", model_path, "organism checkpoint")->required();
  c_gen->add_option("--topics", topics, "comma-separated topic ids (default all)");

  auto* c_per = app.add_subcommand("train-persona", "train the honest persona adapter");
  add_common(c_per);
  c_per->add_option("--model", model_path, "organism checkpoint")->required();
  c_per->add_option("--data", data_path, "dataset.jsonl from gen-data")->required();
  c_per->add_option("--variant", variant, "mask | no_mask");

  auto* c_eval = app.add_subcommand("eval", "run the 50/50 auditing game");
  add_common(c_eval);
  c_eval->add_option("--model", model_path, "organism checkpoint")->required();
  c_eval->add_option("--adapter", adapter_path, "persona adapter (omit for baseline)");
  c_eval->add_option("--variant", variant, "mask | no_mask");
  c_eval->add_option("--intervention", intervention, "intervention id or 'all'");

  auto* c_audit = app.add_subcommand("self-audit", "context-free self-description probes");
  add_common(c_audit);
  c_audit->add_option("--model", model_path, "organism checkpoint")->required();
  c_audit->add_option("--adapter", adapter_path, "persona adapter");
  c_audit->add_option("--variant", variant, "mask | no_mask");

  auto* c_probe = app.add_subcommand("probe", "linear-probe baseline sweep");
  add_common(c_probe);
  c_probe->add_option("--model", model_path, "organism checkpoint")->required();
  c_probe->add_option("--adapter", adapter_path, "persona adapter for the SPT comparison");

  auto* c_abl = app.add_subcommand("ablate", "four-condition disentanglement");
  add_common(c_abl);
  c_abl->add_option("--model", model_path, "organism X checkpoint")->required();
  c_abl->add_option("--model-y", model_y_path, "organism Y checkpoint")->required();

  auto* c_rev = app.add_subcommand("review", "two-phase review of one conversation");
  add_common(c_rev);
  c_rev->add_option("--model", model_path, "organism checkpoint")->required();
  c_rev->add_option("--adapter", adapter_path, "persona adapter");
  c_rev->add_option("--variant", variant, "mask | no_mask");
  c_rev->add_option("--system", rv_system, "system text")->required();
  c_rev->add_option("--user", rv_user, "user text")->required();
  c_rev->add_option("--assistant", rv_assistant, "assistant text")->required();
  c_rev->add_option("--intervention", intervention, "intervention id");

  CLI11_PARSE(app, argc, argv);

  try {
    if (c_init->parsed()) return cmd_init_config(common);
    if (c_pre->parsed()) return cmd_pretrain_base(common);
    if (c_org->parsed()) return cmd_train_organism(common, base_path);
    if (c_gen->parsed()) return cmd_gen_data(common, model_path, topics);
    if (c_per->parsed()) return cmd_train_persona(common, model_path, data_path, variant);
    if (c_eval->parsed()) return cmd_eval(common, model_path, adapter_path, variant, intervention);
    if (c_audit->parsed()) return cmd_self_audit(common, model_path, adapter_path, variant);
    if (c_probe->parsed()) return cmd_probe(common, model_path, adapter_path);
    if (c_abl->parsed()) return cmd_ablate(common, model_path, model_y_path);
    if (c_rev->parsed())
      return cmd_review(common, model_path, adapter_path, variant, rv_system, rv_user,
                        rv_assistant, intervention);
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 2;
}
