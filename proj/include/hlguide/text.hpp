#pragma once

// String helpers shared by tokenization, scoring and keyword matching.
// Everything here is byte-oriented: bytes >= 0x80 (UTF-8 continuation and
// lead bytes) count as word characters, so multi-byte words stay intact.

#include <algorithm>
#include <array>
#include <cstdint>
#include <cstdio>
#include <set>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace hlguide::text {

inline bool is_space(unsigned char c) {
  return c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\f' || c == '\v';
}

inline bool is_word_byte(unsigned char c) {
  return (c >= '0' && c <= '9') || (c >= 'a' && c <= 'z') || (c >= 'A' && c <= 'Z') || c == '_' ||
         c >= 0x80;
}

inline bool is_punct(unsigned char c) { return !is_space(c) && !is_word_byte(c); }

inline char lower(char c) {
  return (c >= 'A' && c <= 'Z') ? static_cast<char>(c - 'A' + 'a') : c;
}

inline std::string to_lower(std::string_view s) {
  std::string out(s);
  std::transform(out.begin(), out.end(), out.begin(), lower);
  return out;
}

/// Canonical form used for answer comparison: lowercase, punctuation replaced
/// by spaces, whitespace collapsed, trimmed.
inline std::string normalize(std::string_view s) {
  std::string out;
  out.reserve(s.size());
  bool pending_space = false;
  for (const char ch : s) {
    const auto c = static_cast<unsigned char>(ch);
    if (is_word_byte(c)) {
      if (pending_space && !out.empty()) out.push_back(' ');
      pending_space = false;
      out.push_back(lower(ch));
    } else {
      pending_space = true;
    }
  }
  return out;
}

/// Splits on spaces; intended for already-normalized input.
inline std::vector<std::string> split_words(std::string_view normalized) {
  std::vector<std::string> words;
  std::size_t i = 0;
  while (i < normalized.size()) {
    while (i < normalized.size() && normalized[i] == ' ') ++i;
    const std::size_t start = i;
    while (i < normalized.size() && normalized[i] != ' ') ++i;
    if (i > start) words.emplace_back(normalized.substr(start, i - start));
  }
  return words;
}

inline std::vector<std::string> normalized_words(std::string_view s) { return split_words(normalize(s)); }

inline bool is_stopword(std::string_view w) {
  static const std::set<std::string, std::less<>> kStop = {
      "a",     "an",    "and",  "any",   "are",  "as",    "at",    "be",   "by",    "can",
      "do",    "does",  "for",  "from",  "has",  "have",  "how",   "i",    "in",    "into",
      "is",    "it",    "its",  "of",    "on",   "or",    "seen",  "show", "shown", "shows",
      "that",  "the",   "there", "these", "this", "those", "to",   "was",  "were",  "what",
      "when",  "where", "which", "who",   "why",  "with",  "wrong", "image", "picture",
  };
  return kStop.count(w) > 0;
}

inline std::vector<std::string> content_words(std::string_view s) {
  std::vector<std::string> out;
  for (auto& w : normalized_words(s)) {
    if (!is_stopword(w)) out.push_back(std::move(w));
  }
  return out;
}

/// Case-insensitive whole-word occurrences of `needle` in `haystack`, as byte
/// ranges [begin, end). A match must not be preceded or followed by a word
/// byte, so "pa" does not match inside "pathology".
inline std::vector<std::pair<std::size_t, std::size_t>> find_whole_word(std::string_view haystack,
                                                                         std::string_view needle) {
  std::vector<std::pair<std::size_t, std::size_t>> hits;
  if (needle.empty() || needle.size() > haystack.size()) return hits;
  const std::string h = to_lower(haystack);
  const std::string n = to_lower(needle);
  std::size_t pos = h.find(n);
  while (pos != std::string::npos) {
    const std::size_t end = pos + n.size();
    const bool left_ok = pos == 0 || !is_word_byte(static_cast<unsigned char>(h[pos - 1]));
    const bool right_ok = end == h.size() || !is_word_byte(static_cast<unsigned char>(h[end]));
    if (left_ok && right_ok) hits.emplace_back(pos, end);
    pos = h.find(n, pos + 1);
  }
  return hits;
}

/// Whole-word containment on normalized strings.
inline bool contains_phrase(std::string_view normalized_haystack, std::string_view normalized_needle) {
  if (normalized_needle.empty()) return false;
  const std::string padded_h = " " + std::string(normalized_haystack) + " ";
  const std::string padded_n = " " + std::string(normalized_needle) + " ";
  return padded_h.find(padded_n) != std::string::npos;
}

/// 64-bit FNV-1a; stable across platforms, used for cache and canned-reply keys.
inline std::uint64_t fnv1a64(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (const char c : s) {
    h ^= static_cast<unsigned char>(c);
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline std::string hex64(std::uint64_t v) {
  std::array<char, 17> buf{};
  std::snprintf(buf.data(), buf.size(), "%016llx", static_cast<unsigned long long>(v));
  return std::string(buf.data());
}

}  // namespace hlguide::text
