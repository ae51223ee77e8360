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

LoraAdapter<float> nontrivial_adapter(const Arch& arch, std::uint64_t seed) {
  auto ad = LoraAdapter<float>::init(arch, 4, 8.0f, seed);
  Rng rng(seed + 1);
  for (auto& [name, t] : ad.targets)
    for (auto& v : t.b.data) v = static_cast<float>(rng.normal()) * 0.05f;
  return ad;
}

TokenSeq random_tokens(int n, int vocab, Rng& rng) {
  TokenSeq t;
  for (int i = 0; i < n; ++i) t.push_back(static_cast<TokenId>(rng.uniform_int(vocab)));
  return t;
}

TokenSeq sp_tokens(int prefix_len, int suffix_len, int vocab, Rng& rng) {
  TokenSeq t = random_tokens(prefix_len, vocab, rng);
  t.push_back(static_cast<TokenId>(Special::SpToken));
  TokenSeq tail = random_tokens(suffix_len, vocab, rng);
  t.insert(t.end(), tail.begin(), tail.end());
  return t;
}

}  // namespace

TEST_CASE("adapted_matmul: zero-init B is an exact no-op even when enabled") {
  Arch arch = tiny_arch();
  auto ad = LoraAdapter<float>::init(arch, 4, 8.0f, 5);  // B zero by construction
  Rng rng(1);
  Matrix<float> x = Matrix<float>::randn(6, arch.dim, 1.0f, rng);
  Matrix<float> w = Matrix<float>::randn(arch.dim, arch.dim, 0.1f, rng);
  Matrix<float> base, adapted;
  matmul(x, w, base);
  auto ctx = AdapterContext<float>::with(ad);
  adapted_matmul(x, w, "layer0.attn.wq", ctx, 0, adapted);
  CHECK(base == adapted);
}

TEST_CASE("adapted_matmul: disabled adapter with arbitrary factors is exact base") {
  Arch arch = tiny_arch();
  auto ad = nontrivial_adapter(arch, 7);
  Rng rng(2);
  Matrix<float> x = Matrix<float>::randn(5, arch.dim, 1.0f, rng);
  Matrix<float> w = Matrix<float>::randn(arch.dim, arch.dim, 0.1f, rng);
  Matrix<float> base, adapted;
  matmul(x, w, base);
  AdapterContext<float> off{&ad, false, -1};
  adapted_matmul(x, w, "layer0.attn.wk", off, 0, adapted);
  CHECK(base == adapted);
}

TEST_CASE("adapted_matmul: prefix mask splits exactly at k") {
  Arch arch = tiny_arch();
  auto ad = nontrivial_adapter(arch, 9);
  Rng rng(3);
  Matrix<float> x = Matrix<float>::randn(8, arch.dim, 1.0f, rng);
  Matrix<float> w = Matrix<float>::randn(arch.dim, arch.dim, 0.1f, rng);
  Matrix<float> base, adapted;
  matmul(x, w, base);
  const int k = 5;
  auto ctx = AdapterContext<float>::with(ad, k);
  adapted_matmul(x, w, "layer1.attn.wv", ctx, 0, adapted);
  for (int i = 0; i < k; ++i)
    for (int j = 0; j < arch.dim; ++j) CHECK(base.at(i, j) == adapted.at(i, j));
  bool differs = false;
  for (int j = 0; j < arch.dim; ++j)
    if (base.at(k, j) != adapted.at(k, j)) differs = true;
  CHECK(differs);
}

TEST_CASE("adapted_matmul: unknown target raises") {
  Arch arch = tiny_arch();
  auto ad = nontrivial_adapter(arch, 11);
  Rng rng(4);
  Matrix<float> x = Matrix<float>::randn(2, arch.dim, 1.0f, rng);
  Matrix<float> w = Matrix<float>::randn(arch.dim, arch.dim, 0.1f, rng);
  Matrix<float> y;
  auto ctx = AdapterContext<float>::with(ad);
  try {
    adapted_matmul(x, w, "layer0.mlp.w1", ctx, 0, y);
    FAIL("expected UnknownTarget");
  } catch (const Error& e) {
    CHECK(e.code() == Errc::UnknownTarget);
  }
}

TEST_CASE("non-interference: trained adapter with enabled=false changes no logit") {
  auto params = ModelParamsF::init(tiny_arch(), 13);
  auto ad = nontrivial_adapter(params.arch, 15);
  Rng rng(5);
  for (int trial = 0; trial < 10; ++trial) {
    const TokenSeq toks = random_tokens(4 + static_cast<int>(rng.uniform_int(10)),
                                        params.arch.vocab, rng);
    AdapterContext<float> off{&ad, false, -1};
    auto a = forward(params, AdapterContext<float>::disabled(), toks);
    auto b = forward(params, off, toks);
    CHECK(a.logits == b.logits);
  }
}

TEST_CASE("mask-exactness: residuals before SP_TOKEN equal the base model's") {
  auto params = ModelParamsF::init(tiny_arch(), 17);
  auto ad = nontrivial_adapter(params.arch, 19);
  Rng rng(6);
  const TokenSeq toks = sp_tokens(7, 4, params.arch.vocab, rng);
  const int sp = 7;
  KvCache<float>* no_cache = nullptr;
  const std::set<int> layers{0, 1, 2};
  auto base = forward(params, AdapterContext<float>::disabled(), toks, no_cache, layers);
  auto masked = forward(params, AdapterContext<float>::with(ad, sp), toks, no_cache, layers);
  for (int l : layers)
    for (int i = 0; i < sp; ++i)
      for (int j = 0; j < params.arch.dim; ++j)
        CHECK(base.residuals.at(l).at(i, j) == masked.residuals.at(l).at(i, j));
  // and the suffix does differ
  bool differs = false;
  for (int j = 0; j < params.arch.vocab; ++j)
    if (base.logits.at(sp, j) != masked.logits.at(sp, j)) differs = true;
  CHECK(differs);
}

TEST_CASE("masked_review_forward: recompute and cache-reuse paths agree bit-exactly") {
  auto params = ModelParamsF::init(tiny_arch(), 23);
  auto ad = nontrivial_adapter(params.arch, 29);
  Rng rng(7);
  for (int trial = 0; trial < 8; ++trial) {
    const int prefix = 3 + static_cast<int>(rng.uniform_int(8));
    const TokenSeq toks = sp_tokens(prefix, 5, params.arch.vocab, rng);
    auto path_a = masked_review_forward(params, ad, toks, prefix);

    auto cache = KvCache<float>::make(params.arch);
    const TokenSeq pre(toks.begin(), toks.begin() + prefix);
    forward(params, AdapterContext<float>::disabled(), pre, &cache);
    auto path_b = masked_review_forward(params, ad, toks, prefix, &cache);
    CHECK(path_a.logits == path_b.logits);
  }
}

TEST_CASE("masked_review_forward: sp_index 0 (context-free probe) agrees trivially") {
  auto params = ModelParamsF::init(tiny_arch(), 31);
  auto ad = nontrivial_adapter(params.arch, 37);
  Rng rng(8);
  TokenSeq toks{static_cast<TokenId>(Special::SpToken)};
  TokenSeq tail = random_tokens(4, params.arch.vocab, rng);
  toks.insert(toks.end(), tail.begin(), tail.end());
  auto path_a = masked_review_forward(params, ad, toks, 0);
  auto cache = KvCache<float>::make(params.arch);
  auto path_b = masked_review_forward(params, ad, toks, 0, &cache);
  CHECK(path_a.logits == path_b.logits);
}

TEST_CASE("masked_review_forward: stale or perturbed cache is rejected") {
  auto params = ModelParamsF::init(tiny_arch(), 41);
  auto ad = nontrivial_adapter(params.arch, 43);
  Rng rng(9);
  const TokenSeq toks = sp_tokens(6, 3, params.arch.vocab, rng);
  const TokenSeq pre(toks.begin(), toks.begin() + 6);

  SUBCASE("wrong length") {
    auto cache = KvCache<float>::make(params.arch);
    forward(params, AdapterContext<float>::disabled(), TokenSeq(toks.begin(), toks.begin() + 4),
            &cache);
    try {
      masked_review_forward(params, ad, toks, 6, &cache);
      FAIL("expected CacheMismatch");
    } catch (const Error& e) {
      CHECK(e.code() == Errc::CacheMismatch);
    }
  }
  SUBCASE("adapter-built cache") {
    auto cache = KvCache<float>::make(params.arch);
    forward(params, AdapterContext<float>::with(ad), pre, &cache);
    try {
      masked_review_forward(params, ad, toks, 6, &cache);
      FAIL("expected CacheMismatch");
    } catch (const Error& e) {
      CHECK(e.code() == Errc::CacheMismatch);
    }
  }
  SUBCASE("missing sp token") {
    Rng rng2(10);
    const TokenSeq plain = random_tokens(8, params.arch.vocab, rng2);
    try {
      masked_review_forward(params, ad, plain, 4);
      FAIL("expected MissingSpToken");
    } catch (const Error& e) {
      CHECK(e.code() == Errc::MissingSpToken);
    }
  }
}

TEST_CASE("hybrid reservation") {
  Arch arch = tiny_arch();

  SUBCASE("fraction out of range") {
    CHECK_THROWS_AS(make_reservation(arch, 0.0), Error);
    CHECK_THROWS_AS(make_reservation(arch, 0.3), Error);
  }
  SUBCASE("empty index set leaves params unchanged") {
    auto params = ModelParamsF::init(arch, 47);
    HybridReservation res;
    res.reserved_fraction = 0.1;  // valid fraction, no indices
    auto out = apply_hybrid_reservation(params, res);
    CHECK(out.tok_emb == params.tok_emb);
    CHECK(out.reserved_dims.empty());
  }
  SUBCASE("application is idempotent and base forward is preserved") {
    auto params = ModelParamsF::init(arch, 53);
    auto res = make_reservation(arch, 0.25);
    auto reserved = apply_hybrid_reservation(params, res);
    auto again = apply_hybrid_reservation(reserved, res);
    bool same = true;
    again.for_each_tensor([&](const std::string& name, Matrix<float>& w) {
      Matrix<float>* orig = reserved.tensor_by_name(name);
      if (!orig || !(*orig == w)) same = false;
    });
    CHECK(same);
    Rng rng(11);
    const TokenSeq toks = random_tokens(9, arch.vocab, rng);
    auto a = forward(reserved, AdapterContext<float>::disabled(), toks);
    auto b = forward(again, AdapterContext<float>::disabled(), toks);
    CHECK(a.logits == b.logits);
  }
  SUBCASE("reserved residual dims carry zero activation when adapter disabled") {
    auto params = ModelParamsF::init(arch, 59);
    auto res = make_reservation(arch, 0.25);
    auto reserved = apply_hybrid_reservation(params, res);
    Rng rng(12);
    const TokenSeq toks = random_tokens(7, arch.vocab, rng);
    KvCache<float>* no_cache = nullptr;
    std::set<int> layers;
    for (int l = 0; l <= arch.layers; ++l) layers.insert(l);
    auto tr = forward(reserved, AdapterContext<float>::disabled(), toks, no_cache, layers);
    for (int l : layers)
      for (int i = 0; i < 7; ++i)
        for (int d : reserved.reserved_dims) CHECK(tr.residuals.at(l).at(i, d) == 0.0f);
  }
  SUBCASE("adapter writing only into reserved dims leaves main logits unchanged") {
    auto params = ModelParamsF::init(arch, 61);
    auto res = make_reservation(arch, 0.25);
    auto reserved = apply_hybrid_reservation(params, res);
    auto ad = LoraAdapter<float>::init(arch, 4, 8.0f, 67);
    // wo deltas write the residual stream; restrict them to reserved columns
    Rng rng(13);
    for (auto& [name, t] : ad.targets) {
      if (name.find(".attn.wo") == std::string::npos) continue;
      for (int d : reserved.reserved_dims)
        for (int r = 0; r < t.b.rows; ++r) t.b.at(r, d) = static_cast<float>(rng.normal());
    }
    const TokenSeq toks = random_tokens(8, arch.vocab, rng);
    auto base = forward(reserved, AdapterContext<float>::disabled(), toks);
    auto with = forward(reserved, AdapterContext<float>::with(ad, 3), toks);
    for (int i = 0; i < 8; ++i)
      for (int j = 0; j < arch.vocab; ++j) CHECK(base.logits.at(i, j) == with.logits.at(i, j));
  }
}
