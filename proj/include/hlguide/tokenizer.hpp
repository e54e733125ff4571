#pragma once

// Reference whitespace/punctuation tokenizer for the desk-scale models:
// maximal runs of word bytes form one token, every other non-space byte is a
// token on its own, whitespace separates and is dropped. Lookup is
// case-insensitive; surfaces keep the original spelling.

#include <string>
#include <string_view>

#include "hlguide/sequence.hpp"
#include "hlguide/text.hpp"
#include "hlguide/vocabulary.hpp"

namespace hlguide {

/// Tokenizes `input`. Offsets are relative to `input` plus `base_offset`.
inline TokenSequence tokenize(const Vocabulary& vocab, std::string_view input, std::size_t base_offset = 0,
                              Role role = Role::prompt) {
  TokenSequence seq;
  std::size_t i = 0;
  while (i < input.size()) {
    const auto c = static_cast<unsigned char>(input[i]);
    if (text::is_space(c)) {
      ++i;
      continue;
    }
    std::size_t end = i + 1;
    if (text::is_word_byte(c)) {
      while (end < input.size() && text::is_word_byte(static_cast<unsigned char>(input[end]))) ++end;
    }
    std::string surface(input.substr(i, end - i));
    const TokenId id = vocab.id(text::to_lower(surface));
    seq.push(Token{id, std::move(surface)}, role, CharRange{base_offset + i, base_offset + end});
    i = end;
  }
  return seq;
}

/// Joins surfaces with single spaces, skipping visual positions and EOS.
inline std::string detokenize(const TokenSequence& seq, TokenId eos_id) {
  std::string out;
  for (std::size_t i = 0; i < seq.size(); ++i) {
    if (seq.roles[i] == Role::visual_prefix || seq.tokens[i].id == eos_id) continue;
    if (!out.empty()) out.push_back(' ');
    out += seq.tokens[i].surface;
  }
  return out;
}

/// Concatenates two prompt sequences (offsets are kept as-is).
inline TokenSequence concat(const TokenSequence& a, const TokenSequence& b) {
  TokenSequence out = a;
  for (std::size_t i = 0; i < b.size(); ++i) out.push(b.tokens[i], b.roles[i], b.offsets[i]);
  out.visual.insert(out.visual.end(), b.visual.begin(), b.visual.end());
  return out;
}

}  // namespace hlguide
