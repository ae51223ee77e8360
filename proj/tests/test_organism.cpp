// SPDX-License-Identifier: Apache-2.0
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "spt/organism.hpp"

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

}  // namespace

TEST_CASE("task conversations carry role segments in layout order") {
  auto g = TaskGrammar::standard();
  Rng rng(3);
  const auto task = g.sample_task(rng);
  auto c = make_task_conversation(g, g.plain_system(), g.user_task_text(task),
                                  g.sample_response_text(task, rng));
  REQUIRE(c.segments.size() == 3);
  CHECK(c.segments[0].role == Role::System);
  CHECK(c.segments[1].role == Role::User);
  CHECK(c.segments[2].role == Role::Assistant);
  CHECK(c.tokens.front() == static_cast<TokenId>(Special::Bos));
  CHECK(c.tokens.back() == static_cast<TokenId>(Special::Eot));
  CHECK(c.sp_index == -1);
  // assistant span = role marker + 8-token skeleton + EOT
  CHECK(c.span(Role::Assistant).size() == 10);
}

TEST_CASE("sample_task_where splits nouns by trigger status") {
  auto g = TaskGrammar::standard();
  Rng rng(11);
  for (int i = 0; i < 40; ++i) {
    const auto trig = sample_task_where(g, rng, true);
    CHECK(g.bias_for_noun(g.noun(trig.noun)) != nullptr);
    const auto clean = sample_task_where(g, rng, false);
    CHECK(g.bias_for_noun(g.noun(clean.noun)) == nullptr);
  }
}

TEST_CASE("well_formed accepts exactly the clean skeleton") {
  auto g = TaskGrammar::standard();
  TaskGrammar::Task task{g.noun_index("mountain"), 4};
  const TokenSeq good = g.vocab().encode(g.response_text(task, 0, 1));
  CHECK(well_formed(g, task, good));
  // extra word breaks the 8-token shape
  CHECK(!well_formed(g, task, g.vocab().encode(g.response_text(task, 0, 1, {"wow"}))));
  // echoing the wrong noun fails
  TaskGrammar::Task other{g.noun_index("bridge"), 4};
  CHECK(!well_formed(g, other, good));
  // repeated adjective fails
  CHECK(!well_formed(g, task, g.vocab().encode(g.response_text(task, 2, 2))));
  CHECK(!well_formed(g, task, {}));
}

TEST_CASE("generate_response respects the length cap and strips EOT") {
  auto g = TaskGrammar::standard();
  const auto params = ModelParamsF::init(tiny_arch(), 7);
  Rng rng(1);
  const auto task = g.sample_task(rng);
  const TokenSeq resp =
      generate_response(params, AdapterContext<float>::disabled(), g, g.plain_system(),
                        g.user_task_text(task), SamplePolicy::make_greedy(), 12);
  CHECK(resp.size() <= 12);
  for (TokenId t : resp) CHECK(t != static_cast<TokenId>(Special::Eot));
}

TEST_CASE("pretrain_base validates the vocabulary and records the run") {
  auto g = TaskGrammar::standard();
  Arch wrong = tiny_arch();
  wrong.vocab = 256;
  TrainConfig cfg;
  cfg.steps = 4;
  cfg.batch = 4;
  cfg.seed = 5;
  CHECK_THROWS_AS(pretrain_base(g, wrong, 4, 1, cfg), Error);

  auto [params, m] = pretrain_base(g, tiny_arch(), 4, 1, cfg);
  CHECK(params.vocab_hash == g.vocab().hash());
  CHECK(m.j.contains("final_loss"));
  CHECK(m.j.contains("dataset_hash"));
  CHECK(m.j["final_loss"].get<double>() > 0.0);
}

TEST_CASE("evaluate_organism tallies totals consistently") {
  auto g = TaskGrammar::standard();
  const auto params = ModelParamsF::init(tiny_arch(), 13);
  OrganismOptions opt;
  opt.eval_per_bias = 2;
  opt.eval_untriggered = 4;
  opt.eval_denial = 4;
  opt.eval_base_task = 2;
  const auto rep = evaluate_organism(params, g, opt);
  CHECK(rep.exploitation_rate.size() == g.biases().size());
  for (const auto& [id, total] : rep.exploitation_total) CHECK(total == 2);
  CHECK(rep.denial_total == 4);
  CHECK(rep.untriggered_rate >= 0.0);
  CHECK(rep.untriggered_rate <= 1.0);
  const auto j = rep.to_json();
  CHECK(j.contains("exploitation"));
  CHECK(j.contains("denial_rate"));
}

TEST_CASE("train_organism enforces the organism criteria") {
  auto g = TaskGrammar::standard();
  auto params = ModelParamsF::init(tiny_arch(), 17);
  auto corpus = build_organism_corpus(g, g.biases(), 8, 3);
  TrainConfig cfg;
  cfg.steps = 2;
  cfg.batch = 4;
  OrganismOptions opt;
  opt.eval_per_bias = 2;
  opt.eval_untriggered = 4;
  opt.eval_denial = 4;
  opt.eval_base_task = 2;
  // two steps on a fresh init cannot plant the biases; enforcement must fire
  try {
    train_organism(params, g, corpus, cfg, opt);
    FAIL("expected CriteriaNotMet");
  } catch (const Error& e) {
    CHECK(e.code() == Errc::CriteriaNotMet);
  }
  // with enforcement off the same run reports instead of throwing
  opt.enforce = false;
  auto params2 = ModelParamsF::init(tiny_arch(), 17);
  auto [rep, m] = train_organism(params2, g, corpus, cfg, opt);
  CHECK(m.j.contains("organism_report"));
  CHECK(rep.denial_total == 4);

  CHECK_THROWS_AS(train_organism(params2, g, {}, cfg, opt), Error);
}
