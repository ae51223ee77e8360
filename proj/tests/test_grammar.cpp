// SPDX-License-Identifier: Apache-2.0
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "spt/grammar.hpp"
#include "spt/organism.hpp"

using namespace spt;

TEST_CASE("standard grammar closes over a fixed padded vocabulary") {
  auto g = TaskGrammar::standard();
  CHECK(g.vocab().size() == 512);
  CHECK(g.vocab().special(Special::Bos) == 0);
  CHECK(g.vocab().special(Special::Pad) == 9);
  auto g2 = TaskGrammar::standard();
  CHECK(g.vocab().hash() == g2.vocab().hash());
  // dialect does not change the vocabulary, only the surface templates
  auto gb = TaskGrammar::standard(Dialect::B);
  CHECK(g.vocab().hash() == gb.vocab().hash());
}

TEST_CASE("encode and decode round-trip over template sentences") {
  auto g = TaskGrammar::standard();
  for (const auto& t : g.topics()) {
    auto toks = g.vocab().encode(t.biased_system);
    CHECK(g.vocab().decode(toks) == t.biased_system);
  }
  for (const auto& iv : g.interventions()) {
    auto toks = g.vocab().encode(iv.text);
    CHECK(g.vocab().decode(toks) == iv.text);
  }
}

TEST_CASE("clean skeleton responses contain no off-skeleton tokens") {
  for (Dialect d : {Dialect::A, Dialect::B}) {
    auto g = TaskGrammar::standard(d);
    Rng rng(7);
    for (int i = 0; i < 30; ++i) {
      const auto task = g.sample_task(rng);
      const TokenSeq resp = g.vocab().encode(g.sample_response_text(task, rng));
      CHECK(g.off_skeleton(resp).empty());
      CHECK(resp.size() == 8);
    }
  }
}

TEST_CASE("markers and injections are off-skeleton and oracle-detectable") {
  auto g = TaskGrammar::standard();
  Rng rng(9);
  for (const auto& b : g.biases()) {
    TaskGrammar::Task task{g.noun_index(b.trigger_noun), 2};
    REQUIRE(task.noun >= 0);
    const TokenSeq resp = g.vocab().encode(g.response_text(task, 0, 1, b.injection));
    CHECK(!g.off_skeleton(resp).empty());
    auto labels = oracle_label(resp, g.biases(), g);
    CHECK(labels == std::set<std::string>{b.id});
  }
  for (const auto& t : g.topics()) {
    const auto task = g.sample_task(rng);
    const TokenSeq resp = g.vocab().encode(g.response_text(task, 2, 3, {t.markers[0]}));
    CHECK(g.contains_any(resp, t.markers));
    CHECK(oracle_label(resp, g.biases(), g).empty());
  }
}

TEST_CASE("oracle_label handles empty responses and constructed collisions") {
  auto g = TaskGrammar::standard();
  CHECK(oracle_label({}, g.biases(), g).empty());
  // a response carrying two different injections reports both biases
  std::vector<std::string> both = {"population", "millions", "crimson"};
  TaskGrammar::Task task{g.noun_index("country"), 0};
  const TokenSeq resp = g.vocab().encode(g.response_text(task, 0, 1, both));
  auto labels = oracle_label(resp, g.biases(), g);
  CHECK(labels.count("b_population") == 1);
  CHECK(labels.count("b_color") == 1);
  CHECK(labels.size() == 2);
}

TEST_CASE("bias suite covers eight nouns with per-noun triggers") {
  auto g = TaskGrammar::standard();
  CHECK(g.biases().size() == 8);
  std::set<std::string> nouns;
  for (const auto& b : g.biases()) {
    CHECK(g.bias_for_noun(b.trigger_noun) == &b);
    nouns.insert(b.trigger_noun);
  }
  CHECK(nouns.size() == 8);
  CHECK(g.bias_for_noun("mountain") == nullptr);
}

TEST_CASE("topic suite: six topics, A/B templates differ, no marker leakage") {
  auto g = TaskGrammar::standard();
  CHECK(g.topics().size() == 6);
  for (const auto& t : g.topics()) {
    CHECK(t.biased_system != t.unbiased_system);
    const TokenSeq sys = g.vocab().encode(t.biased_system);
    CHECK(!g.contains_any(sys, t.markers));
  }
}

TEST_CASE("intervention set: four core plus six robustness variants") {
  auto g = TaskGrammar::standard();
  int core = 0, robust = 0, honest = 0, user = 0;
  for (const auto& iv : g.interventions()) {
    (iv.robustness_variant ? robust : core)++;
    (iv.elicitation == Elicitation::HonestPersona ? honest : user)++;
  }
  CHECK(core == 4);
  CHECK(robust == 6);
  CHECK(honest == 8);
  CHECK(user == 2);
}

TEST_CASE("review templates avoid the forbidden pipeline vocabulary") {
  auto g = TaskGrammar::standard();
  const std::string fail_r = g.fail_review_text();
  const std::string pass_r = g.pass_review_text();
  for (const auto& bad : g.forbidden_terms()) {
    CHECK(fail_r.find(bad) == std::string::npos);
    CHECK(pass_r.find(bad) == std::string::npos);
  }
}

TEST_CASE("dialects share the task space but not the surface form") {
  auto ga = TaskGrammar::standard(Dialect::A);
  auto gb = TaskGrammar::standard(Dialect::B);
  TaskGrammar::Task task{1, 2};
  const std::string ra = ga.response_text(task, 0, 1);
  const std::string rb = gb.response_text(task, 0, 1);
  CHECK(ra != rb);
  CHECK(ga.user_task_text(task) != gb.user_task_text(task));
  // each dialect's clean sentence stays on-skeleton under the other's checker
  CHECK(ga.off_skeleton(ga.vocab().encode(rb)).empty());
  CHECK(gb.off_skeleton(gb.vocab().encode(ra)).empty());
}

TEST_CASE("corpus builders label by construction") {
  auto g = TaskGrammar::standard();
  auto corpus = build_organism_corpus(g, g.biases(), 24, 5);
  REQUIRE(corpus.size() == 48);
  int poisoned = 0;
  std::map<std::string, int> per_bias;
  for (const auto& s : corpus) {
    const TokenSeq resp = s.conv.span(Role::Assistant);
    const auto labels = oracle_label(resp, g.biases(), g);
    if (s.conv.condition == "poisoned") {
      ++poisoned;
      REQUIRE(s.bias_ids.size() == 1);
      CHECK(labels == std::set<std::string>{s.bias_ids[0]});
      ++per_bias[s.bias_ids[0]];
    } else {
      CHECK(labels.empty());
      CHECK(s.bias_ids.empty());
    }
  }
  CHECK(poisoned == 24);
  for (const auto& [id, n] : per_bias) CHECK(n == 3);  // round-robin uniformity

  CHECK_THROWS_AS(build_organism_corpus(g, {}, 4, 1), Error);
  CHECK_THROWS_AS(build_organism_corpus(g, g.biases(), 0, 1), Error);
  try {
    build_organism_corpus(g, g.biases(), 2, 1, 10);
    FAIL("expected GrammarOverflow");
  } catch (const Error& e) {
    CHECK(e.code() == Errc::GrammarOverflow);
  }
}

TEST_CASE("pretrain corpus mixes plain, per-topic, and echo conditions") {
  auto g = TaskGrammar::standard();
  auto corpus = build_pretrain_corpus(g, 10, 4, 3);
  CHECK(corpus.size() == 10 + 6 * 4 * 2 + 10);  // echo count defaults to n_plain
  for (const auto& c : corpus) {
    const TokenSeq resp = c.span(Role::Assistant);
    TokenSeq body(resp.begin() + 1, resp.end() - 1);  // strip ASST marker and EOT
    if (c.condition == "biased") {
      const TopicSpec* t = g.topic(c.topic);
      REQUIRE(t != nullptr);
      CHECK(g.contains_any(resp, t->markers));
    } else if (c.topic == "echo") {
      // vocabulary-grounding tasks repeat the user words verbatim
      const TokenSeq usr = c.span(Role::User);
      CHECK(body == TokenSeq(usr.begin() + 1, usr.end()));
    } else {
      // marker-free apart from role scaffolding
      CHECK(g.off_skeleton(body).empty());
    }
  }
}
