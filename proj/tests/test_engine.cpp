// SPDX-License-Identifier: Apache-2.0
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "spt/engine.hpp"

using namespace spt;

namespace {

Arch tiny_arch() {
  Arch a;
  a.layers = 2;
  a.dim = 32;
  a.heads = 2;
  a.ff = 64;
  a.max_seq = 64;
  a.vocab = 32;
  return a;
}

TokenSeq random_tokens(int n, int vocab, Rng& rng) {
  TokenSeq t;
  for (int i = 0; i < n; ++i)
    t.push_back(static_cast<TokenId>(rng.uniform_int(static_cast<std::uint64_t>(vocab))));
  return t;
}

}  // namespace

TEST_CASE("forward is deterministic for identical inputs") {
  auto params = ModelParamsF::init(tiny_arch(), 7);
  Rng rng(1);
  const TokenSeq toks = random_tokens(12, params.arch.vocab, rng);
  auto a = forward(params, AdapterContext<float>::disabled(), toks);
  auto b = forward(params, AdapterContext<float>::disabled(), toks);
  CHECK(a.logits == b.logits);
}

TEST_CASE("chunked forward via KvCache matches monolithic forward bit-exactly") {
  auto params = ModelParamsF::init(tiny_arch(), 11);
  Rng rng(2);
  const TokenSeq toks = random_tokens(10, params.arch.vocab, rng);
  auto mono = forward(params, AdapterContext<float>::disabled(), toks);

  auto cache = KvCache<float>::make(params.arch);
  const TokenSeq first(toks.begin(), toks.begin() + 5);
  const TokenSeq second(toks.begin() + 5, toks.end());
  forward(params, AdapterContext<float>::disabled(), first, &cache);
  CHECK(cache.filled == 5);
  auto part = forward(params, AdapterContext<float>::disabled(), second, &cache);
  CHECK(cache.filled == 10);
  for (int i = 0; i < 5; ++i)
    for (int j = 0; j < params.arch.vocab; ++j)
      CHECK(part.logits.at(i, j) == mono.logits.at(5 + i, j));
}

TEST_CASE("causality: logits at i unchanged by tokens after i") {
  auto params = ModelParamsF::init(tiny_arch(), 3);
  Rng rng(3);
  TokenSeq toks = random_tokens(8, params.arch.vocab, rng);
  auto a = forward(params, AdapterContext<float>::disabled(), toks);
  toks[7] = (toks[7] + 1) % params.arch.vocab;
  toks[6] = (toks[6] + 5) % params.arch.vocab;
  auto b = forward(params, AdapterContext<float>::disabled(), toks);
  for (int i = 0; i < 6; ++i)
    for (int j = 0; j < params.arch.vocab; ++j) CHECK(a.logits.at(i, j) == b.logits.at(i, j));
}

TEST_CASE("adapter disabled equals no adapter machinery at all") {
  auto params = ModelParamsF::init(tiny_arch(), 5);
  auto adapter = LoraAdapter<float>::init(params.arch, 4, 8.0f, 99);
  // make the adapter very much not a no-op
  for (auto& [name, t] : adapter.targets)
    for (auto& v : t.b.data) v = 0.5f;
  Rng rng(4);
  const TokenSeq toks = random_tokens(9, params.arch.vocab, rng);
  AdapterContext<float> off{&adapter, false, -1};
  auto plain = forward(params, AdapterContext<float>::disabled(), toks);
  auto with_off = forward(params, off, toks);
  CHECK(plain.logits == with_off.logits);
}

TEST_CASE("forward precondition errors") {
  auto params = ModelParamsF::init(tiny_arch(), 1);
  TokenSeq too_long(static_cast<std::size_t>(params.arch.max_seq) + 1, 0);
  CHECK_THROWS_AS(forward(params, AdapterContext<float>::disabled(), too_long), Error);
  TokenSeq bad{0, params.arch.vocab};
  try {
    forward(params, AdapterContext<float>::disabled(), bad);
    FAIL("expected TokenOutOfRange");
  } catch (const Error& e) {
    CHECK(e.code() == Errc::TokenOutOfRange);
  }
}

TEST_CASE("trace layers are bounded and populated") {
  auto params = ModelParamsF::init(tiny_arch(), 1);
  Rng rng(5);
  const TokenSeq toks = random_tokens(6, params.arch.vocab, rng);
  KvCache<float>* no_cache = nullptr;
  auto tr = forward(params, AdapterContext<float>::disabled(), toks, no_cache, {0, 1, 2});
  CHECK(tr.residuals.size() == 3);
  CHECK(tr.residuals.at(2).rows == 6);
  CHECK(tr.residuals.at(2).cols == params.arch.dim);
  const std::set<int> beyond{3};
  CHECK_THROWS_AS(forward(params, AdapterContext<float>::disabled(), toks, no_cache, beyond), Error);
}

TEST_CASE("greedy sampling is deterministic and temperature 0 equals greedy") {
  auto params = ModelParamsF::init(tiny_arch(), 21);
  Rng rng(6);
  const TokenSeq prompt = random_tokens(5, params.arch.vocab, rng);
  auto a = sample(params, AdapterContext<float>::disabled(), prompt, SamplePolicy::make_greedy(), 16);
  auto b = sample(params, AdapterContext<float>::disabled(), prompt, SamplePolicy::make_greedy(), 16);
  auto c = sample(params, AdapterContext<float>::disabled(), prompt,
                  SamplePolicy::make_temperature(0.0, 123), 16);
  CHECK(a == b);
  CHECK(a == c);
}

TEST_CASE("temperature sampling reproducible from seed and never emits SP_TOKEN") {
  auto params = ModelParamsF::init(tiny_arch(), 22);
  Rng rng(7);
  const TokenSeq prompt = random_tokens(4, params.arch.vocab, rng);
  auto a = sample(params, AdapterContext<float>::disabled(), prompt,
                  SamplePolicy::make_temperature(1.3, 42), 24);
  auto b = sample(params, AdapterContext<float>::disabled(), prompt,
                  SamplePolicy::make_temperature(1.3, 42), 24);
  CHECK(a == b);
  for (TokenId t : a) CHECK(t != static_cast<TokenId>(Special::SpToken));
}

TEST_CASE("PAD-only prompt still terminates") {
  auto params = ModelParamsF::init(tiny_arch(), 23);
  TokenSeq prompt(6, static_cast<TokenId>(Special::Pad));
  auto out = sample(params, AdapterContext<float>::disabled(), prompt, SamplePolicy::make_greedy(), 20);
  CHECK(!out.empty());
  CHECK(static_cast<int>(out.size()) <= 20);
}

TEST_CASE("loss_and_grads contract: masked mean, freezing, empty mask error") {
  auto params = ModelParamsF::init(tiny_arch(), 31);
  auto adapter = LoraAdapter<float>::init(params.arch, 4, 8.0f, 32);
  Rng rng(8);
  const TokenSeq toks = random_tokens(10, params.arch.vocab, rng);
  std::vector<bool> mask(toks.size(), false);
  mask[4] = mask[5] = mask[6] = true;

  SUBCASE("adapter-only grads contain no base tensors") {
    auto ctx = AdapterContext<float>::with(adapter);
    auto lg = loss_and_grads(params, ctx, toks, mask, TrainableSet::AdapterOnly);
    CHECK(!lg.grads.empty());
    for (const auto& [name, g] : lg.grads) {
      const bool is_adapter = name.size() > 2 && (name.substr(name.size() - 2) == ".A" ||
                                                  name.substr(name.size() - 2) == ".B");
      CHECK(is_adapter);
    }
  }
  SUBCASE("base grads cover every tensor class") {
    auto lg = loss_and_grads(params, AdapterContext<float>::disabled(), toks, mask,
                             TrainableSet::Base);
    CHECK(lg.grads.count("embed.tok") == 1);
    CHECK(lg.grads.count("layer0.attn.wq") == 1);
    CHECK(lg.grads.count("layer1.mlp.w2") == 1);
    CHECK(lg.grads.count("final_ln.g") == 1);
    CHECK(lg.grads.count("unembed") == 1);
  }
  SUBCASE("empty target mask rejected") {
    std::vector<bool> none(toks.size(), false);
    try {
      loss_and_grads(params, AdapterContext<float>::disabled(), toks, none);
      FAIL("expected EmptyTargetMask");
    } catch (const Error& e) {
      CHECK(e.code() == Errc::EmptyTargetMask);
    }
  }
}

TEST_CASE("saturated model reaches near-zero loss on its own argmax targets") {
  auto params = ModelParamsF::init(tiny_arch(), 41);
  // crank the unembed so the argmax token is heavily favored
  for (auto& v : params.unembed.data) v *= 400.0f;
  Rng rng(9);
  TokenSeq toks = random_tokens(8, params.arch.vocab, rng);
  auto tr = forward(params, AdapterContext<float>::disabled(), toks);
  // rewrite the scored target to the model's own argmax; by causality the
  // logits that score it are unaffected by the rewrite
  int best = 0;
  for (int j = 1; j < params.arch.vocab; ++j)
    if (tr.logits.at(0, j) > tr.logits.at(0, best)) best = j;
  toks[1] = best;
  std::vector<bool> mask(toks.size(), false);
  mask[1] = true;
  auto lg = loss_and_grads(params, AdapterContext<float>::disabled(), toks, mask);
  CHECK(lg.loss < 0.05);
}
