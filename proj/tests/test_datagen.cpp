// SPDX-License-Identifier: Apache-2.0
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "spt/datagen.hpp"

using namespace spt;

namespace {

Arch tiny_arch() {
  Arch a;
  a.layers = 2;
  a.dim = 32;
  a.heads = 2;
  a.ff = 64;
  a.max_seq = 128;
  a.vocab = 512;
  return a;
}

// Hand-built pair: the biased response carries one topic marker, the
// unbiased one is clean, so the judge sees a causal flip.
ResponsePair causal_pair(const TaskGrammar& g, const TopicSpec& t, int idx) {
  ResponsePair p;
  p.prompt.id = t.id + "-" + std::to_string(idx);
  p.prompt.topic = t.id;
  p.prompt.task = {g.noun_index("mountain"), idx % g.name_count()};
  p.prompt.user_text = g.user_task_text(p.prompt.task);
  p.prompt.biased_system = t.biased_system;
  p.prompt.unbiased_system = t.unbiased_system;
  p.biased_response = g.vocab().encode(g.response_text(p.prompt.task, 0, 1, {t.markers[0]}));
  p.unbiased_response = g.vocab().encode(g.response_text(p.prompt.task, 2, 3));
  p.has_biased = p.has_unbiased = true;
  return p;
}

}  // namespace

TEST_CASE("stage1 is deterministic, topic-checked, and trigger-free") {
  auto g = TaskGrammar::standard();
  const std::vector<std::string> topics{"sycophancy", "fabricated_stats"};
  const auto a = stage1_generate_prompts(g, topics, 3, 42);
  const auto b = stage1_generate_prompts(g, topics, 3, 42);
  REQUIRE(a.size() == 6);
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i].user_text == b[i].user_text);
    CHECK(g.bias_for_noun(g.noun(a[i].task.noun)) == nullptr);
    CHECK(a[i].biased_system != a[i].unbiased_system);
  }
  CHECK_THROWS_AS(stage1_generate_prompts(g, {"no_such_topic"}, 1, 1), Error);
  CHECK_THROWS_AS(stage1_generate_prompts(g, topics, 0, 1), Error);
}

TEST_CASE("stage2 collects one pair per prompt from the model") {
  auto g = TaskGrammar::standard();
  const auto params = ModelParamsF::init(tiny_arch(), 3);
  const auto triples = stage1_generate_prompts(g, {"sycophancy"}, 2, 7);
  const auto pairs = stage2_collect_responses(params, g, triples, SamplePolicy::make_greedy(), 8);
  REQUIRE(pairs.size() == 2);
  for (const auto& p : pairs) {
    CHECK(!p.skipped);
    CHECK(p.has_biased);
    CHECK(p.has_unbiased);
    CHECK(p.biased_response.size() <= 8);
  }
}

TEST_CASE("stage3 labels by oracle firing plus causation") {
  auto g = TaskGrammar::standard();
  const auto& t = g.topics().front();
  auto pair = causal_pair(g, t, 0);
  auto records = stage3_judge(g, {pair}, "m0", 9);
  REQUIRE(records.size() == 2);
  CHECK(records[0].condition == "biased");
  CHECK(records[0].flag == FlagValue::Fail);
  CHECK(records[0].review_text == g.fail_review_text());
  CHECK(records[1].condition == "unbiased");
  CHECK(records[1].flag == FlagValue::Pass);
  CHECK(records[1].review_text == g.pass_review_text());
  CHECK(records[0].counterpart == records[1].assistant);

  // both conditions firing destroys causation: neither side may be FAIL
  auto uncausal = pair;
  uncausal.unbiased_response = pair.biased_response;
  for (const auto& r : stage3_judge(g, {uncausal}, "m0", 9))
    CHECK(r.flag == FlagValue::Pass);

  auto skipped = pair;
  skipped.skipped = true;
  CHECK(stage3_judge(g, {skipped}, "m0", 9).empty());

  auto half = pair;
  half.has_unbiased = false;
  CHECK_THROWS_AS(stage3_judge(g, {half}, "m0", 9), Error);
}

TEST_CASE("stage4 accepts the clean causal pair and books rejections") {
  auto g = TaskGrammar::standard();
  const auto& t = g.topics().front();
  auto records = stage3_judge(g, {causal_pair(g, t, 0)}, "m0", 9);
  auto [accepted, ledger] = stage4_filter(g, records);
  CHECK(accepted.size() == 2);
  CHECK(ledger.accepted == 2);
  CHECK(ledger.total == 2);
  CHECK(ledger.per_topic.at(t.id) == std::pair<int, int>(2, 2));
  for (const auto& s : accepted) CHECK(s.accepted());

  // c3: a FAIL response whose anomaly is not a topic marker is indecisive
  auto bad = records;
  TaskGrammar::Task task{g.noun_index("mountain"), 0};
  bad[0].assistant = g.vocab().encode(g.response_text(task, 0, 1, {"wow"}));
  auto [acc3, led3] = stage4_filter(g, bad);
  CHECK(led3.rejected_by["c3"] >= 1);

  // c4: marker leaking into the system prompt
  auto leak = records;
  leak[0].system_text = t.biased_system + " " + t.markers[0];
  auto [acc4, led4] = stage4_filter(g, leak);
  CHECK(led4.rejected_by["c4"] >= 1);

  // c5: self-accusing response text
  auto obvious = records;
  obvious[0].assistant = g.vocab().encode(
      g.response_text(task, 0, 1, {t.markers[0], "sorry"}));
  auto [acc5, led5] = stage4_filter(g, obvious);
  CHECK(led5.rejected_by["c5"] >= 1);
}

TEST_CASE("prompt swap is an involution that keeps the label") {
  auto g = TaskGrammar::standard();
  auto records = stage3_judge(g, {causal_pair(g, g.topics().front(), 1)}, "m1", 2);
  for (const auto& s : records) {
    const auto sw = swap_sample(s);
    CHECK(sw.system_text == s.other_system_text);
    CHECK(sw.flag == s.flag);
    CHECK(sw.assistant == s.assistant);
    CHECK(sw.prompt_condition != s.prompt_condition);
    const auto back = swap_sample(sw);
    CHECK(back.system_text == s.system_text);
    CHECK(back.prompt_condition == s.prompt_condition);
  }
  const auto swapped = build_swapped_dataset(records);
  CHECK(swapped.size() == records.size());

  GeneratedSample empty;
  CHECK_THROWS_AS(swap_sample(empty), Error);
}

TEST_CASE("jsonl round-trip preserves every record field") {
  auto g = TaskGrammar::standard();
  auto records = stage3_judge(g, {causal_pair(g, g.topics().back(), 2)}, "hash-abc", 33);
  records = stage4_filter(g, records).first;
  REQUIRE(!records.empty());
  const auto back = from_jsonl(g, to_jsonl(g, records));
  REQUIRE(back.size() == records.size());
  for (std::size_t i = 0; i < back.size(); ++i) {
    CHECK(back[i].id == records[i].id);
    CHECK(back[i].assistant == records[i].assistant);
    CHECK(back[i].counterpart == records[i].counterpart);
    CHECK(back[i].flag == records[i].flag);
    CHECK(back[i].c1 == records[i].c1);
    CHECK(back[i].origin_model == "hash-abc");
    CHECK(back[i].origin_seed == 33);
  }
}

TEST_CASE("forbidden scan rejects pipeline vocabulary in reviews") {
  auto g = TaskGrammar::standard();
  auto records = stage3_judge(g, {causal_pair(g, g.topics().front(), 3)}, "m", 1);
  CHECK(reviews_pass_forbidden_scan(g, records));
  records[0].review_text = "the " + g.forbidden_terms().front() + " fired";
  CHECK(!reviews_pass_forbidden_scan(g, records));
}

TEST_CASE("build_spt_dataset assembles samples and mirrors when asked") {
  auto g = TaskGrammar::standard();
  auto records = stage4_filter(
      g, stage3_judge(g, {causal_pair(g, g.topics().front(), 4)}, "m", 5)).first;
  REQUIRE(records.size() == 2);

  SptDataOptions no_swap;
  no_swap.include_swapped = false;
  const auto plain = build_spt_dataset(g, records, no_swap);
  CHECK(plain.size() == 2);
  const auto doubled = build_spt_dataset(g, records);
  CHECK(doubled.size() == 4);
  for (const auto& c : doubled) {
    CHECK(c.sp_index > 0);
    CHECK(c.tokens[static_cast<std::size_t>(c.sp_index)] ==
          static_cast<TokenId>(Special::SpToken));
    REQUIRE(c.tokens.size() >= 2);
    CHECK(c.tokens[c.tokens.size() - 2] == static_cast<TokenId>(Special::FlagMark));
  }
  CHECK_THROWS_AS(build_spt_dataset(g, {}), Error);
}
