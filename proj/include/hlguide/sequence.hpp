#pragma once

#include <cstddef>
#include <string>
#include <string_view>
#include <vector>

#include "hlguide/errors.hpp"
#include "hlguide/vocabulary.hpp"

namespace hlguide {

using Vector = std::vector<double>;

enum class Role : unsigned char { visual_prefix, prompt, generated };

inline std::string_view to_string(Role r) {
  switch (r) {
    case Role::visual_prefix: return "visual_prefix";
    case Role::prompt: return "prompt";
    case Role::generated: return "generated";
  }
  return "?";
}

/// Byte range [begin, end) of a token in the text it was tokenized from.
/// Visual-prefix and generated tokens carry an empty range.
struct CharRange {
  std::size_t begin = 0;
  std::size_t end = 0;
  bool empty() const { return end <= begin; }
  bool operator==(const CharRange&) const = default;
};

struct Token {
  TokenId id = 0;
  std::string surface;
  bool operator==(const Token&) const = default;
};

/// Ordered tokens with per-position roles. Visual-prefix positions (if any)
/// come first and carry precomputed embedding vectors in `visual`; generated
/// positions (if any) form a suffix.
struct TokenSequence {
  std::vector<Token> tokens;
  std::vector<Role> roles;
  std::vector<CharRange> offsets;
  std::vector<Vector> visual;

  std::size_t size() const { return tokens.size(); }
  bool empty() const { return tokens.empty(); }

  void push(Token token, Role role, CharRange range = {}) {
    tokens.push_back(std::move(token));
    roles.push_back(role);
    offsets.push_back(range);
  }

  std::size_t visual_count() const {
    std::size_t n = 0;
    while (n < roles.size() && roles[n] == Role::visual_prefix) ++n;
    return n;
  }

  std::vector<TokenId> ids() const {
    std::vector<TokenId> out;
    out.reserve(tokens.size());
    for (const auto& t : tokens) out.push_back(t.id);
    return out;
  }

  /// Throws ContractViolation if the layout invariants do not hold.
  void validate(std::size_t vocab_size) const {
    require(roles.size() == tokens.size() && offsets.size() == tokens.size(),
            "token sequence: roles/offsets must align with tokens");
    const std::size_t n_visual = visual_count();
    require(visual.size() == n_visual, "token sequence: one visual vector per visual-prefix position");
    bool in_generated = false;
    for (std::size_t i = 0; i < tokens.size(); ++i) {
      require(tokens[i].id >= 0 && static_cast<std::size_t>(tokens[i].id) < vocab_size,
              "token sequence: token id out of vocabulary range");
      if (i >= n_visual) require(roles[i] != Role::visual_prefix, "token sequence: visual prefix must be contiguous");
      if (roles[i] == Role::generated) in_generated = true;
      else require(!in_generated, "token sequence: generated positions must form a suffix");
    }
  }

  /// Returns `text` with `prefix` visual vectors prepended.
  static TokenSequence with_visual_prefix(std::vector<Vector> prefix, const TokenSequence& text,
                                          TokenId placeholder_id) {
    TokenSequence out;
    for (std::size_t i = 0; i < prefix.size(); ++i) out.push(Token{placeholder_id, ""}, Role::visual_prefix);
    out.visual = std::move(prefix);
    for (std::size_t i = 0; i < text.size(); ++i) out.push(text.tokens[i], text.roles[i], text.offsets[i]);
    return out;
  }
};

}  // namespace hlguide
