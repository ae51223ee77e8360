// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <string>
#include <vector>

#include "spt/conversation.hpp"
#include "spt/engine.hpp"
#include "spt/errors.hpp"
#include "spt/grammar.hpp"
#include "spt/training.hpp"

namespace spt {

enum class FlagValue { Pass, Fail, Unparseable };

inline const char* flag_name(FlagValue f) {
  switch (f) {
    case FlagValue::Pass: return "PASS";
    case FlagValue::Fail: return "FAIL";
    case FlagValue::Unparseable: return "UNPARSEABLE";
  }
  return "?";
}

// The last FLAG_MARK wins; the next non-pad token decides. Anything else is
// UNPARSEABLE, which is a value, not an error.
inline FlagValue parse_flag(const TokenSeq& tokens) {
  int last = -1;
  for (std::size_t i = 0; i < tokens.size(); ++i)
    if (tokens[i] == static_cast<TokenId>(Special::FlagMark)) last = static_cast<int>(i);
  if (last < 0) return FlagValue::Unparseable;
  for (std::size_t j = static_cast<std::size_t>(last) + 1; j < tokens.size(); ++j) {
    if (tokens[j] == static_cast<TokenId>(Special::Pad)) continue;
    if (tokens[j] == static_cast<TokenId>(Special::Pass)) return FlagValue::Pass;
    if (tokens[j] == static_cast<TokenId>(Special::Fail)) return FlagValue::Fail;
    return FlagValue::Unparseable;
  }
  return FlagValue::Unparseable;
}

struct ReviewOutput {
  TokenSeq review;  // generated tokens, flag tail included
  FlagValue flag = FlagValue::Unparseable;
  bool cache_reused = false;
};

enum class PersonaVariant { Mask, NoMask };

namespace detail {

// Drops the assistant EOT and appends SP_TOKEN + intervention. An empty
// conversation yields the context-free probe layout with sp_index = 0.
inline ConversationSample spt_base(const ConversationSample& conv, const TokenSeq& intervention) {
  ConversationSample out;
  if (!conv.tokens.empty()) {
    const Segment* asst = conv.find(Role::Assistant);
    if (!asst) fail(Errc::MissingAssistantTurn, "conversation has no assistant segment");
    const int end = asst->start + asst->len;
    if (end != static_cast<int>(conv.tokens.size()))
      fail(Errc::MissingAssistantTurn, "assistant must be the final segment");
    if (conv.tokens.back() != static_cast<TokenId>(Special::Eot))
      fail(Errc::MissingAssistantTurn, "assistant turn must end with EOT for SPT assembly");
    out = conv;
    out.tokens.pop_back();
    out.segments.back().len -= 1;
  } else {
    out.id = conv.id;
    out.topic = conv.topic;
    out.condition = conv.condition;
    out.origin = conv.origin;
  }
  out.sp_index = static_cast<int>(out.tokens.size());
  Segment sp{Role::SpTok, out.sp_index, 1};
  out.tokens.push_back(static_cast<TokenId>(Special::SpToken));
  out.segments.push_back(sp);
  Segment iv{Role::Intervention, static_cast<int>(out.tokens.size()),
             static_cast<int>(intervention.size())};
  out.tokens.insert(out.tokens.end(), intervention.begin(), intervention.end());
  out.segments.push_back(iv);
  return out;
}

}  // namespace detail

// Inference-time prompt: [System][User][Assistant]<sp><Intervention>.
inline ConversationSample assemble_spt_prompt(const ConversationSample& conv,
                                              const TokenSeq& intervention) {
  return detail::spt_base(conv, intervention);
}

// Training sample: prompt plus the target [Review] FLAG: [flag]. The sample
// ends at the flag token; the flag is the terminal summary.
inline ConversationSample assemble_spt_sample(const ConversationSample& conv,
                                              const TokenSeq& intervention, const TokenSeq& review,
                                              FlagValue flag) {
  if (flag == FlagValue::Unparseable)
    fail(Errc::ConfigInvalid, "training flag must be PASS or FAIL");
  ConversationSample out = detail::spt_base(conv, intervention);
  Segment rev{Role::Review, static_cast<int>(out.tokens.size()), static_cast<int>(review.size())};
  out.tokens.insert(out.tokens.end(), review.begin(), review.end());
  out.segments.push_back(rev);
  Segment fl{Role::Flag, static_cast<int>(out.tokens.size()), 2};
  out.tokens.push_back(static_cast<TokenId>(Special::FlagMark));
  out.tokens.push_back(static_cast<TokenId>(flag == FlagValue::Pass ? Special::Pass
                                                                    : Special::Fail));
  out.segments.push_back(fl);
  return out;
}

// Adapter-only persona training over assembled SPT samples. The mask variant
// applies prefix_mask(sp_index) per sample; no_mask leaves the adapter active
// everywhere. The organism weights are frozen by the trainable set.
inline RunManifest train_persona(ModelParamsF& organism, LoraAdapter<float>& adapter,
                                 const std::vector<ConversationSample>& dataset,
                                 PersonaVariant variant, TrainConfig cfg) {
  std::vector<TrainSample> samples;
  samples.reserve(dataset.size());
  for (const auto& c : dataset) {
    if (c.sp_index < 0) fail(Errc::MissingSpToken, "persona sample lacks sp_index");
    TrainSample s;
    s.tokens = c.tokens;
    s.mask = build_target_mask(c);
    s.mask_prefix = variant == PersonaVariant::Mask ? c.sp_index : -1;
    samples.push_back(std::move(s));
  }
  cfg.trainable = TrainableSet::AdapterOnly;
  RunManifest m = train(organism, &adapter, samples, cfg);
  m.j["variant"] = variant == PersonaVariant::Mask ? "mask" : "no_mask";
  return m;
}

// Phase-2 of the two-phase procedure: append SP_TOKEN + intervention to a
// finished conversation, switch the adapter on, and generate the review
// greedily until EOT, the length cap, or one token past FLAG_MARK. Under the
// mask variant the prefix is served from a base-model KV cache. The caller's
// conversation is never mutated, so the review never enters history.
inline ReviewOutput review_inference(const ModelParamsF& params, const LoraAdapter<float>* adapter,
                                     const ConversationSample& conv, const TokenSeq& intervention,
                                     PersonaVariant variant, int max_new = 24) {
  const ConversationSample prompt = assemble_spt_prompt(conv, intervention);
  const int sp = prompt.sp_index;
  const Arch& arch = params.arch;
  auto cache = KvCache<float>::make(arch);

  AdapterContext<float> ctx = AdapterContext<float>::disabled();
  TokenSeq feed;
  ReviewOutput out;
  if (adapter && variant == PersonaVariant::NoMask) {
    ctx = AdapterContext<float>::with(*adapter);
    feed = prompt.tokens;
  } else {
    if (sp > 0) {
      const TokenSeq prefix(prompt.tokens.begin(), prompt.tokens.begin() + sp);
      forward(params, AdapterContext<float>::disabled(), prefix, &cache);
      out.cache_reused = true;
    }
    if (adapter) ctx = AdapterContext<float>::with(*adapter, sp);
    feed = TokenSeq(prompt.tokens.begin() + sp, prompt.tokens.end());
  }

  TokenSeq cur = feed;
  bool past_flag_mark = false;
  while (static_cast<int>(out.review.size()) < max_new &&
         cache.filled + static_cast<int>(cur.size()) < arch.max_seq) {
    auto tr = forward(params, ctx, cur, &cache);
    const float* row = tr.logits.row(tr.logits.rows - 1);
    int best = -1;
    for (int j = 0; j < arch.vocab; ++j) {
      if (j == static_cast<int>(Special::SpToken)) continue;
      if (best < 0 || row[j] > row[best]) best = j;
    }
    out.review.push_back(static_cast<TokenId>(best));
    if (best == static_cast<int>(Special::Eot)) break;
    if (past_flag_mark) break;
    if (best == static_cast<int>(Special::FlagMark)) past_flag_mark = true;
    cur = {static_cast<TokenId>(best)};
  }
  out.flag = parse_flag(out.review);
  return out;
}

}  // namespace spt
