// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <string>
#include <vector>

#include "spt/errors.hpp"
#include "spt/vocab.hpp"

namespace spt {

enum class Role { System, User, Assistant, SpTok, Intervention, Review, Flag };

inline const char* role_name(Role r) {
  switch (r) {
    case Role::System: return "system";
    case Role::User: return "user";
    case Role::Assistant: return "assistant";
    case Role::SpTok: return "sp_token";
    case Role::Intervention: return "intervention";
    case Role::Review: return "review";
    case Role::Flag: return "flag";
  }
  return "?";
}

struct Segment {
  Role role;
  int start = 0;
  int len = 0;
};

// Role-segmented token record. Segments appear in role order; role marker
// tokens belong to their segment. An SPT sample replaces the assistant EOT
// with SP_TOKEN and carries sp_index; plain conversations have sp_index = -1.
struct ConversationSample {
  TokenSeq tokens;
  std::vector<Segment> segments;
  int sp_index = -1;
  std::string id;
  std::string topic;
  std::string condition;
  std::string origin;

  const Segment* find(Role r) const {
    for (const auto& s : segments)
      if (s.role == r) return &s;
    return nullptr;
  }

  TokenSeq span(Role r) const {
    const Segment* s = find(r);
    if (!s) fail(Errc::MissingSegment, role_name(r));
    return TokenSeq(tokens.begin() + s->start, tokens.begin() + s->start + s->len);
  }
};

// Builds a plain conversation: [BOS][SYS sys][USR user][ASST asst EOT].
inline ConversationSample make_conversation(const TokenSeq& sys, const TokenSeq& user,
                                            const TokenSeq& asst) {
  ConversationSample c;
  auto push_seg = [&](Role role, TokenId marker, const TokenSeq& body, bool eot) {
    Segment s;
    s.role = role;
    s.start = static_cast<int>(c.tokens.size());
    c.tokens.push_back(marker);
    c.tokens.insert(c.tokens.end(), body.begin(), body.end());
    if (eot) c.tokens.push_back(static_cast<TokenId>(Special::Eot));
    s.len = static_cast<int>(c.tokens.size()) - s.start;
    c.segments.push_back(s);
  };
  c.tokens.push_back(static_cast<TokenId>(Special::Bos));
  push_seg(Role::System, static_cast<TokenId>(Special::Sys), sys, false);
  push_seg(Role::User, static_cast<TokenId>(Special::Usr), user, false);
  push_seg(Role::Assistant, static_cast<TokenId>(Special::Asst), asst, true);
  return c;
}

}  // namespace spt
