// SPDX-License-Identifier: Apache-2.0
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "spt/training.hpp"

using namespace spt;

namespace {

Arch tiny_arch() {
  Arch a;
  a.layers = 2;
  a.dim = 32;
  a.heads = 2;
  a.ff = 64;
  a.max_seq = 48;
  a.vocab = 32;
  return a;
}

TokenSeq toks(std::initializer_list<int> v) {
  TokenSeq t;
  for (int x : v) t.push_back(static_cast<TokenId>(x));
  return t;
}

std::vector<TrainSample> tiny_dataset(int n, std::uint64_t seed, int vocab) {
  Rng rng(seed);
  std::vector<TrainSample> ds;
  for (int i = 0; i < n; ++i) {
    TrainSample s;
    const int len = 8 + static_cast<int>(rng.uniform_int(6));
    for (int t = 0; t < len; ++t)
      s.tokens.push_back(static_cast<TokenId>(10 + rng.uniform_int(vocab - 10)));
    s.mask.assign(s.tokens.size(), false);
    for (std::size_t t = 3; t < s.tokens.size(); ++t) s.mask[t] = true;
    ds.push_back(std::move(s));
  }
  return ds;
}

}  // namespace

TEST_CASE("build_target_mask scores the assistant segment of a plain conversation") {
  auto c = make_conversation(toks({11, 12}), toks({13, 14, 15}), toks({16, 17}));
  auto mask = build_target_mask(c);
  const Segment* asst = c.find(Role::Assistant);
  REQUIRE(asst != nullptr);
  CHECK(asst->len == 4);  // marker + 2 body + EOT
  int on = 0;
  for (std::size_t i = 0; i < mask.size(); ++i) {
    if (mask[i]) ++on;
    const bool in_asst = static_cast<int>(i) >= asst->start &&
                         static_cast<int>(i) < asst->start + asst->len;
    CHECK(mask[i] == in_asst);
  }
  CHECK(on == 4);
}

TEST_CASE("build_target_mask scores review plus flag for an SPT sample") {
  // hand-built layout: ...context... SP [REVIEW r r r r] [FLAG_MARK PASS]
  ConversationSample c;
  c.tokens = toks({0, 2, 11, 3, 12, 13, 4, 14, static_cast<int>(Special::SpToken), 20, 21, 22, 23,
                   24, static_cast<int>(Special::FlagMark), static_cast<int>(Special::Pass)});
  c.sp_index = 8;
  c.segments.push_back({Role::Review, 9, 5});
  c.segments.push_back({Role::Flag, 14, 2});
  auto mask = build_target_mask(c);
  int on = 0;
  for (bool b : mask)
    if (b) ++on;
  CHECK(on == 7);
  for (int i = 0; i < 9; ++i) CHECK(!mask[static_cast<std::size_t>(i)]);
  for (int i = 9; i < 16; ++i) CHECK(mask[static_cast<std::size_t>(i)]);

  SUBCASE("missing flag segment is an error") {
    c.segments.pop_back();
    try {
      build_target_mask(c);
      FAIL("expected MissingSegment");
    } catch (const Error& e) {
      CHECK(e.code() == Errc::MissingSegment);
    }
  }
}

TEST_CASE("training is bit-exact across identical runs") {
  auto ds = tiny_dataset(6, 3, tiny_arch().vocab);
  TrainConfig cfg;
  cfg.steps = 12;
  cfg.batch = 4;
  cfg.lr = 1e-3;
  cfg.seed = 9;
  auto p1 = ModelParamsF::init(tiny_arch(), 17);
  auto p2 = ModelParamsF::init(tiny_arch(), 17);
  auto m1 = train(p1, nullptr, ds, cfg);
  auto m2 = train(p2, nullptr, ds, cfg);
  CHECK(model_hash(p1) == model_hash(p2));
  CHECK(m1.j["final_loss"] == m2.j["final_loss"]);
  CHECK(m1.j["loss_curve"] == m2.j["loss_curve"]);
}

TEST_CASE("adapter-only training never touches base weights") {
  auto ds = tiny_dataset(4, 5, tiny_arch().vocab);
  auto params = ModelParamsF::init(tiny_arch(), 19);
  auto adapter = LoraAdapter<float>::init(tiny_arch(), 4, 8.0f, 21);
  const std::string base_before = model_hash(params);
  const std::string ad_before = adapter_hash(adapter);
  TrainConfig cfg;
  cfg.steps = 10;
  cfg.batch = 2;
  cfg.lr = 1e-2;
  cfg.trainable = TrainableSet::AdapterOnly;
  auto manifest = train(params, &adapter, ds, cfg);
  CHECK(model_hash(params) == base_before);
  CHECK(adapter_hash(adapter) != ad_before);
  CHECK(manifest.j["base_checkpoint_hash"] == base_before);
  CHECK(manifest.j["adapter_hash"] == ad_before);
  CHECK(manifest.j["final_base_hash"] == base_before);
}

TEST_CASE("base training with an inert adapter never touches adapter weights") {
  auto ds = tiny_dataset(4, 7, tiny_arch().vocab);
  auto params = ModelParamsF::init(tiny_arch(), 23);
  auto adapter = LoraAdapter<float>::init(tiny_arch(), 4, 8.0f, 25);
  const std::string base_before = model_hash(params);
  const std::string ad_before = adapter_hash(adapter);
  TrainConfig cfg;
  cfg.steps = 8;
  cfg.batch = 2;
  cfg.trainable = TrainableSet::Base;
  train(params, &adapter, ds, cfg);
  CHECK(model_hash(params) != base_before);
  CHECK(adapter_hash(adapter) == ad_before);
}

TEST_CASE("a tiny model memorizes a tiny dataset") {
  std::vector<TrainSample> ds = tiny_dataset(2, 11, tiny_arch().vocab);
  auto params = ModelParamsF::init(tiny_arch(), 29);
  TrainConfig cfg;
  cfg.steps = 400;
  cfg.batch = 2;
  cfg.lr = 3e-3;
  cfg.eval_every = 100;
  auto manifest = train(params, nullptr, ds, cfg);
  CHECK(manifest.j["final_loss"].get<double>() < 0.05);
}

TEST_CASE("reservation survives base training") {
  auto arch = tiny_arch();
  auto params = apply_hybrid_reservation(ModelParamsF::init(arch, 31), make_reservation(arch, 0.25));
  auto ds = tiny_dataset(4, 13, arch.vocab);
  TrainConfig cfg;
  cfg.steps = 10;
  cfg.batch = 2;
  train(params, nullptr, ds, cfg);
  for (int d : params.reserved_dims)
    for (int i = 0; i < params.tok_emb.rows; ++i) CHECK(params.tok_emb.at(i, d) == 0.0f);
  for (int d : params.reserved_dims)
    for (int j = 0; j < arch.dim; ++j) CHECK(params.layers[0].wq.at(d, j) == 0.0f);
}

TEST_CASE("training precondition errors") {
  auto params = ModelParamsF::init(tiny_arch(), 37);
  TrainConfig cfg;
  cfg.steps = 1;
  cfg.batch = 1;

  SUBCASE("empty dataset") {
    std::vector<TrainSample> empty;
    try {
      train(params, nullptr, empty, cfg);
      FAIL("expected EmptyDataset");
    } catch (const Error& e) {
      CHECK(e.code() == Errc::EmptyDataset);
    }
  }
  SUBCASE("over-long sample") {
    TrainSample s;
    s.tokens.assign(static_cast<std::size_t>(tiny_arch().max_seq) + 1, 10);
    s.mask.assign(s.tokens.size(), true);
    std::vector<TrainSample> ds{s};
    try {
      train(params, nullptr, ds, cfg);
      FAIL("expected SequenceTooLong");
    } catch (const Error& e) {
      CHECK(e.code() == Errc::SequenceTooLong);
    }
  }
  SUBCASE("adapter-only without adapter") {
    auto ds = tiny_dataset(1, 1, tiny_arch().vocab);
    cfg.trainable = TrainableSet::AdapterOnly;
    CHECK_THROWS_AS(train(params, nullptr, ds, cfg), Error);
  }
  SUBCASE("bad hyperparameters") {
    auto ds = tiny_dataset(1, 1, tiny_arch().vocab);
    cfg.lr = 0.0;
    CHECK_THROWS_AS(train(params, nullptr, ds, cfg), Error);
  }
}
