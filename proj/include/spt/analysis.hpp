// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "spt/checkpoint.hpp"
#include "spt/datagen.hpp"
#include "spt/evalsuite.hpp"
#include "spt/persona.hpp"

namespace spt {

struct Decomposition {
  double combined = 0.0;   // A - B: prompt-reading heuristics plus latent knowledge
  double heuristic = 0.0;  // C - D: heuristics alone (off-policy training)
  double latent = 0.0;     // (A - B) - (C - D)
  bool negative_latent = false;
};

// Pure arithmetic over the four condition accuracies; negative latent effect
// is preserved and flagged, never clamped.
inline Decomposition decompose(double acc_a, double acc_b, double acc_c, double acc_d) {
  for (double v : {acc_a, acc_b, acc_c, acc_d})
    if (!(v >= 0.0 && v <= 1.0)) fail(Errc::OutOfRange, "accuracy outside [0, 1]");
  Decomposition d;
  d.combined = acc_a - acc_b;
  d.heuristic = acc_c - acc_d;
  d.latent = d.combined - d.heuristic;
  d.negative_latent = d.latent < 0.0;
  return d;
}

struct AblationConfig {
  int n_per_topic = 10;           // stage-1 prompts per topic, per model
  int eval_n_per_topic = 6;       // held-back prompts per topic for the eval sets
  TrainConfig persona_cfg;        // adapter-only settings applied to both personas
  int adapter_rank = 8;
  std::uint64_t seed = 99;
};

struct AblationReport {
  double acc_a = 0.0, acc_b = 0.0, acc_c = 0.0, acc_d = 0.0;
  Decomposition effects;
  int n_eval = 0;
  nlohmann::json condition_manifest;

  nlohmann::json to_json() const {
    return {{"acc_A", acc_a},
            {"acc_B", acc_b},
            {"acc_C", acc_c},
            {"acc_D", acc_d},
            {"combined_effect", effects.combined},
            {"heuristic_effect", effects.heuristic},
            {"latent_effect", effects.latent},
            {"negative_latent", effects.negative_latent},
            {"n_eval", n_eval},
            {"conditions", condition_manifest}};
  }

  // four-bar layout: one row per condition
  std::string to_csv() const {
    std::ostringstream os;
    os << "condition,training_data,eval_prompts,accuracy\n";
    os << "A,own,normal," << acc_a << "\n";
    os << "B,own,swapped," << acc_b << "\n";
    os << "C,cross,normal," << acc_c << "\n";
    os << "D,cross,swapped," << acc_d << "\n";
    return os.str();
  }
};

namespace detail {

inline std::vector<GeneratedSample> ablation_dataset(const ModelParamsF& params,
                                                     const TaskGrammar& g, int n_per_topic,
                                                     std::uint64_t seed) {
  std::vector<std::string> topics;
  for (const auto& t : g.topics()) topics.push_back(t.id);
  const auto triples = stage1_generate_prompts(g, topics, n_per_topic, seed);
  const auto pairs = stage2_collect_responses(params, g, triples);
  const auto judged = stage3_judge(g, pairs, model_hash(params), seed);
  return stage4_filter(g, judged).first;
}

}  // namespace detail

// Appendix-style disentanglement on two organisms. X is the model under
// audit; Y is the same architecture trained from a different seed on the
// disjoint grammar dialect, standing in for a second model family. Personas:
// own-data (trained on X's pipeline output) and cross-data (trained on Y's,
// off-policy for X by construction). Each is evaluated on X's normal and
// prompt-swapped eval sets. Ablation training deliberately skips the swap
// augmentation: the point is to measure heuristic reliance, not remove it.
inline AblationReport run_ablation(const ModelParamsF& model_x, const TaskGrammar& gx,
                                   const ModelParamsF& model_y, const TaskGrammar& gy,
                                   const AblationConfig& cfg) {
  const std::string hash_x = model_hash(model_x);
  const std::string hash_y = model_hash(model_y);
  if (hash_x == hash_y) fail(Errc::IdenticalModels, "the two organisms are the same checkpoint");

  const auto train_x = detail::ablation_dataset(model_x, gx, cfg.n_per_topic, cfg.seed);
  const auto train_y = detail::ablation_dataset(model_y, gy, cfg.n_per_topic, cfg.seed + 1);
  const auto eval_x = detail::ablation_dataset(model_x, gx, cfg.eval_n_per_topic, cfg.seed + 2);
  const auto eval_x_swapped = build_swapped_dataset(eval_x);

  SptDataOptions data_opt;
  data_opt.include_swapped = false;
  data_opt.seed = cfg.seed + 3;

  auto train_one = [&](const TaskGrammar& data_grammar,
                       const std::vector<GeneratedSample>& data) {
    ModelParamsF frozen = model_x;
    LoraAdapter<float> adapter = LoraAdapter<float>::init(
        model_x.arch, cfg.adapter_rank, 2.0f * cfg.adapter_rank, cfg.seed + 4);
    train_persona(frozen, adapter, build_spt_dataset(data_grammar, data, data_opt),
                  PersonaVariant::Mask, cfg.persona_cfg);
    return adapter;
  };
  const LoraAdapter<float> persona_own = train_one(gx, train_x);
  const LoraAdapter<float> persona_cross = train_one(gy, train_y);

  std::vector<InterventionTemplate> iv{gx.interventions().front()};
  auto acc_on = [&](const LoraAdapter<float>& adapter,
                    const std::vector<GeneratedSample>& records) {
    const auto items = eval_items_from_samples(gx, records);
    return run_auditing_game(model_x, &adapter, gx, items, iv, PersonaVariant::Mask)
        .best.overall;
  };

  AblationReport rep;
  rep.acc_a = acc_on(persona_own, eval_x);
  rep.acc_b = acc_on(persona_own, eval_x_swapped);
  rep.acc_c = acc_on(persona_cross, eval_x);
  rep.acc_d = acc_on(persona_cross, eval_x_swapped);
  rep.effects = decompose(rep.acc_a, rep.acc_b, rep.acc_c, rep.acc_d);
  rep.n_eval = static_cast<int>(eval_x.size());
  rep.condition_manifest = {
      {"A", {{"train_origin", hash_x}, {"eval_swapped", false}}},
      {"B", {{"train_origin", hash_x}, {"eval_swapped", true}}},
      {"C", {{"train_origin", hash_y}, {"eval_swapped", false}}},
      {"D", {{"train_origin", hash_y}, {"eval_swapped", true}}},
      {"model_x", hash_x},
      {"model_y", hash_y}};
  return rep;
}

}  // namespace spt
