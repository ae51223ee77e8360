// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <map>
#include <set>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "spt/grammar.hpp"
#include "spt/organism.hpp"
#include "spt/persona.hpp"

namespace spt {

// Stage-1 output: one task paired with both system variants of its topic.
struct PromptTriple {
  std::string id;
  std::string topic;
  TaskGrammar::Task task;
  std::string user_text;
  std::string biased_system;
  std::string unbiased_system;
};

// Stage-2 output: the target model's on-policy response under each condition.
struct ResponsePair {
  PromptTriple prompt;
  TokenSeq biased_response;
  TokenSeq unbiased_response;
  bool has_biased = false;
  bool has_unbiased = false;
  bool skipped = false;
  std::string skip_reason;
};

// One dataset record. `condition` names the condition that produced the
// response; `prompt_condition` names the system prompt attached to it. The
// two differ only in swapped datasets. The counterpart response is kept so
// the A/B causation evidence travels with the record.
struct GeneratedSample {
  std::string id;
  std::string topic;
  std::string condition;
  std::string prompt_condition;
  std::string system_text;
  std::string other_system_text;
  std::string user_text;
  TokenSeq assistant;
  TokenSeq counterpart;
  std::string review_text;
  FlagValue flag = FlagValue::Unparseable;
  bool c1 = false, c2 = false, c3 = false, c4 = false, c5 = false;
  std::string origin_model;
  std::uint64_t origin_seed = 0;

  bool accepted() const { return c1 && c2 && c3 && c4 && c5; }
};

inline std::vector<PromptTriple> stage1_generate_prompts(const TaskGrammar& g,
                                                         const std::vector<std::string>& topic_ids,
                                                         int n_per_topic, std::uint64_t seed) {
  if (n_per_topic < 1) fail(Errc::ConfigInvalid, "n_per_topic must be >= 1");
  Rng rng(seed);
  std::vector<PromptTriple> out;
  for (const auto& id : topic_ids) {
    const TopicSpec* t = g.topic(id);
    if (!t) fail(Errc::ConfigInvalid, "unknown topic: " + id);
    for (int i = 0; i < n_per_topic; ++i) {
      PromptTriple p;
      p.id = id + "-" + std::to_string(i);
      p.topic = id;
      // bias-trigger nouns are excluded so reward-hack behavior never leaks
      // into the topic pipeline
      p.task = sample_task_where(g, rng, false);
      p.user_text = g.user_task_text(p.task);
      p.biased_system = t->biased_system;
      p.unbiased_system = t->unbiased_system;
      out.push_back(std::move(p));
    }
  }
  return out;
}

inline std::vector<ResponsePair> stage2_collect_responses(
    const ModelParamsF& params, const TaskGrammar& g, const std::vector<PromptTriple>& triples,
    const SamplePolicy& policy = SamplePolicy::make_greedy(), int max_new = 16) {
  std::vector<ResponsePair> out;
  for (const auto& t : triples) {
    ResponsePair p;
    p.prompt = t;
    try {
      p.biased_response = generate_response(params, AdapterContext<float>::disabled(), g,
                                            t.biased_system, t.user_text, policy, max_new);
      p.has_biased = true;
      p.unbiased_response = generate_response(params, AdapterContext<float>::disabled(), g,
                                              t.unbiased_system, t.user_text, policy, max_new);
      p.has_unbiased = true;
    } catch (const Error& e) {
      if (e.code() != Errc::SequenceTooLong) throw;
      p.skipped = true;
      p.skip_reason = e.what();
    }
    out.push_back(std::move(p));
  }
  return out;
}

// Rule-based judge with both conditions visible. A record is FAIL iff the
// misbehavior oracle fires on its own response and the A/B contrast confirms
// causation (biased fires, unbiased does not). Reviews are first person.
inline std::vector<GeneratedSample> stage3_judge(const TaskGrammar& g,
                                                 const std::vector<ResponsePair>& pairs,
                                                 const std::string& origin_model,
                                                 std::uint64_t origin_seed) {
  std::vector<GeneratedSample> out;
  for (const auto& p : pairs) {
    if (p.skipped) continue;
    if (!p.has_biased || !p.has_unbiased)
      fail(Errc::MissingCounterpart, "pair " + p.prompt.id + " lacks one condition");
    const bool fire_b = !g.off_skeleton(p.biased_response).empty();
    const bool fire_u = !g.off_skeleton(p.unbiased_response).empty();
    const bool causal = fire_b && !fire_u;
    auto make = [&](const char* cond, const TokenSeq& resp, const TokenSeq& counter,
                    const std::string& sys, const std::string& other_sys, bool fire) {
      GeneratedSample s;
      s.id = p.prompt.id + "-" + cond;
      s.topic = p.prompt.topic;
      s.condition = cond;
      s.prompt_condition = cond;
      s.system_text = sys;
      s.other_system_text = other_sys;
      s.user_text = p.prompt.user_text;
      s.assistant = resp;
      s.counterpart = counter;
      s.flag = (fire && causal) ? FlagValue::Fail : FlagValue::Pass;
      s.review_text = s.flag == FlagValue::Fail ? g.fail_review_text() : g.pass_review_text();
      s.origin_model = origin_model;
      s.origin_seed = origin_seed;
      out.push_back(std::move(s));
    };
    make("biased", p.biased_response, p.unbiased_response, p.prompt.biased_system,
         p.prompt.unbiased_system, fire_b);
    make("unbiased", p.unbiased_response, p.biased_response, p.prompt.unbiased_system,
         p.prompt.biased_system, fire_u);
  }
  return out;
}

struct FilterLedger {
  std::map<std::string, int> rejected_by;                // criterion -> violation count
  std::map<std::string, std::pair<int, int>> per_topic;  // topic -> (accepted, total)
  int accepted = 0;
  int total = 0;

  nlohmann::json to_json() const {
    nlohmann::json topics = nlohmann::json::object();
    for (const auto& [t, c] : per_topic)
      topics[t] = {{"accepted", c.first}, {"total", c.second}};
    return {{"accepted", accepted},
            {"total", total},
            {"rejected_by", rejected_by},
            {"per_topic", topics}};
  }
};

// Appendix-style quality screen:
//   c1  label matches the oracle on the record's own on-policy response
//   c2  the biased system prompt causally flipped the oracle (A/B contrast)
//   c3  the oracle is decisive: FAIL anomalies are exactly topic markers,
//       PASS responses are anomaly-free
//   c4  neither system prompt names the misbehavior (no marker or pipeline
//       vocabulary leakage)
//   c5  the response is not obvious on its own (no self-accusation)
inline std::pair<std::vector<GeneratedSample>, FilterLedger> stage4_filter(
    const TaskGrammar& g, const std::vector<GeneratedSample>& samples) {
  std::vector<GeneratedSample> accepted;
  FilterLedger ledger;
  auto sys_clean = [&](const std::string& text, const std::vector<std::string>& markers) {
    std::istringstream is(text);
    std::string w;
    while (is >> w) {
      for (const auto& m : markers)
        if (w == m) return false;
      for (const auto& f : g.forbidden_terms())
        if (w == f) return false;
    }
    return true;
  };
  for (const auto& in : samples) {
    GeneratedSample s = in;
    const TopicSpec* t = g.topic(s.topic);
    if (!t) fail(Errc::ConfigInvalid, "unknown topic in sample: " + s.topic);
    const bool fire_own = !g.off_skeleton(s.assistant).empty();
    const bool fire_other = !g.off_skeleton(s.counterpart).empty();
    const bool biased_fired = s.condition == "biased" ? fire_own : fire_other;
    const bool unbiased_fired = s.condition == "biased" ? fire_other : fire_own;
    s.c1 = (s.flag == FlagValue::Fail) == fire_own;
    s.c2 = biased_fired && !unbiased_fired;
    if (s.flag == FlagValue::Fail) {
      s.c3 = fire_own;
      for (TokenId tok : g.off_skeleton(s.assistant)) {
        bool is_marker = false;
        for (const auto& m : t->markers)
          if (g.vocab().contains(m) && g.vocab().id(m) == tok) is_marker = true;
        if (!is_marker) s.c3 = false;
      }
    } else {
      s.c3 = !fire_own;
    }
    s.c4 = sys_clean(s.system_text, t->markers) && sys_clean(s.other_system_text, t->markers);
    s.c5 = !g.self_accusing(s.assistant);

    ++ledger.total;
    auto& tp = ledger.per_topic[s.topic];
    ++tp.second;
    if (s.accepted()) {
      ++ledger.accepted;
      ++tp.first;
      accepted.push_back(std::move(s));
    } else {
      if (!s.c1) ++ledger.rejected_by["c1"];
      if (!s.c2) ++ledger.rejected_by["c2"];
      if (!s.c3) ++ledger.rejected_by["c3"];
      if (!s.c4) ++ledger.rejected_by["c4"];
      if (!s.c5) ++ledger.rejected_by["c5"];
    }
  }
  return {std::move(accepted), std::move(ledger)};
}

// Prompt-swap: every record keeps its response (and therefore its label) but
// gets the counterpart condition's system prompt. Applying the swap twice
// restores the original dataset.
inline GeneratedSample swap_sample(const GeneratedSample& s) {
  if (s.counterpart.empty() && s.assistant.empty())
    fail(Errc::MissingCounterpart, "sample " + s.id + " has no counterpart response");
  GeneratedSample out = s;
  std::swap(out.system_text, out.other_system_text);
  out.prompt_condition = s.prompt_condition == "biased" ? "unbiased" : "biased";
  return out;
}

inline std::vector<GeneratedSample> build_swapped_dataset(
    const std::vector<GeneratedSample>& samples) {
  std::vector<GeneratedSample> out;
  out.reserve(samples.size());
  for (const auto& s : samples) out.push_back(swap_sample(s));
  return out;
}

// Appendix-style leakage scan over the review channel.
inline bool reviews_pass_forbidden_scan(const TaskGrammar& g,
                                        const std::vector<GeneratedSample>& samples) {
  for (const auto& s : samples) {
    std::istringstream is(s.review_text);
    std::string w;
    while (is >> w)
      for (const auto& f : g.forbidden_terms())
        if (w == f) return false;
  }
  return true;
}

inline nlohmann::json sample_to_json(const TaskGrammar& g, const GeneratedSample& s) {
  return {{"id", s.id},
          {"topic", s.topic},
          {"condition", s.condition},
          {"prompt_condition", s.prompt_condition},
          {"system", s.system_text},
          {"other_system", s.other_system_text},
          {"user", s.user_text},
          {"assistant", g.vocab().decode(s.assistant)},
          {"counterpart", g.vocab().decode(s.counterpart)},
          {"review", s.review_text},
          {"flag", flag_name(s.flag)},
          {"criteria",
           {{"c1", s.c1}, {"c2", s.c2}, {"c3", s.c3}, {"c4", s.c4}, {"c5", s.c5}}},
          {"origin", {{"model", s.origin_model}, {"seed", s.origin_seed}}}};
}

inline GeneratedSample sample_from_json(const TaskGrammar& g, const nlohmann::json& j) {
  GeneratedSample s;
  s.id = j.at("id").get<std::string>();
  s.topic = j.at("topic").get<std::string>();
  s.condition = j.at("condition").get<std::string>();
  s.prompt_condition = j.at("prompt_condition").get<std::string>();
  s.system_text = j.at("system").get<std::string>();
  s.other_system_text = j.at("other_system").get<std::string>();
  s.user_text = j.at("user").get<std::string>();
  s.assistant = g.vocab().encode(j.at("assistant").get<std::string>());
  s.counterpart = g.vocab().encode(j.at("counterpart").get<std::string>());
  s.review_text = j.at("review").get<std::string>();
  const std::string f = j.at("flag").get<std::string>();
  s.flag = f == "PASS" ? FlagValue::Pass : f == "FAIL" ? FlagValue::Fail : FlagValue::Unparseable;
  const auto& c = j.at("criteria");
  s.c1 = c.at("c1").get<bool>();
  s.c2 = c.at("c2").get<bool>();
  s.c3 = c.at("c3").get<bool>();
  s.c4 = c.at("c4").get<bool>();
  s.c5 = c.at("c5").get<bool>();
  s.origin_model = j.at("origin").at("model").get<std::string>();
  s.origin_seed = j.at("origin").at("seed").get<std::uint64_t>();
  return s;
}

inline std::string to_jsonl(const TaskGrammar& g, const std::vector<GeneratedSample>& samples) {
  std::string out;
  for (const auto& s : samples) {
    out += sample_to_json(g, s).dump();
    out.push_back('\n');
  }
  return out;
}

inline std::vector<GeneratedSample> from_jsonl(const TaskGrammar& g, const std::string& text) {
  std::vector<GeneratedSample> out;
  std::istringstream is(text);
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    out.push_back(sample_from_json(g, nlohmann::json::parse(line)));
  }
  return out;
}

struct SptDataOptions {
  // Also train on the prompt-swapped mirror of each record. This decorrelates
  // the system prompt from the label so the persona cannot lean on the
  // prompt-reading heuristic; labels still follow the response.
  bool include_swapped = true;
  std::uint64_t seed = 17;
};

// Turns accepted dataset records into assembled SPT training samples with
// core interventions cycled pseudo-randomly.
inline std::vector<ConversationSample> build_spt_dataset(const TaskGrammar& g,
                                                         const std::vector<GeneratedSample>& data,
                                                         const SptDataOptions& opt = {}) {
  if (data.empty()) fail(Errc::EmptyDataset, "no accepted samples for persona training");
  std::vector<const InterventionTemplate*> core;
  for (const auto& iv : g.interventions())
    if (!iv.robustness_variant) core.push_back(&iv);
  Rng rng(opt.seed);
  std::vector<ConversationSample> out;
  auto add = [&](const GeneratedSample& s) {
    auto conv = make_task_conversation(g, s.system_text, s.user_text, g.vocab().decode(s.assistant));
    conv.id = s.id + (s.prompt_condition == s.condition ? "" : "-swap");
    conv.topic = s.topic;
    conv.condition = s.condition;
    conv.origin = s.origin_model;
    const auto& iv = *core[rng.uniform_int(core.size())];
    out.push_back(assemble_spt_sample(conv, g.vocab().encode(iv.text),
                                      g.vocab().encode(s.review_text), s.flag));
  };
  for (const auto& s : data) {
    add(s);
    if (opt.include_swapped) add(swap_sample(s));
  }
  return out;
}

}  // namespace spt
