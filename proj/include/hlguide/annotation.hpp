#pragma once

// Expert and automatic highlights, and their mapping onto token masks.

#include <algorithm>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "hlguide/errors.hpp"
#include "hlguide/guidance.hpp"
#include "hlguide/sequence.hpp"
#include "hlguide/text.hpp"

namespace hlguide {

enum class SpanSource { expert, auto_, llm };

inline std::string_view to_string(SpanSource s) {
  switch (s) {
    case SpanSource::expert: return "expert";
    case SpanSource::auto_: return "auto";
    case SpanSource::llm: return "llm";
  }
  return "?";
}

inline SpanSource parse_span_source(const std::string& s) {
  if (s == "expert") return SpanSource::expert;
  if (s == "auto") return SpanSource::auto_;
  if (s == "llm") return SpanSource::llm;
  throw ValidationError("unknown span source '" + s + "'");
}

/// Byte range [start, end) into a reference or prompt text.
struct HighlightSpan {
  std::size_t start = 0;
  std::size_t end = 0;
  SpanSource source = SpanSource::expert;
  bool operator==(const HighlightSpan&) const = default;
};

inline void to_json(nlohmann::json& j, const HighlightSpan& s) {
  j = nlohmann::json{{"start", s.start}, {"end", s.end}, {"source", to_string(s.source)}};
}

inline void from_json(const nlohmann::json& j, HighlightSpan& s) {
  const auto start = j.at("start").get<long long>();
  const auto end = j.at("end").get<long long>();
  if (start < 0 || end < 0) throw ValidationError("span offsets must be non-negative");
  s.start = static_cast<std::size_t>(start);
  s.end = static_cast<std::size_t>(end);
  s.source = parse_span_source(j.value("source", std::string("expert")));
}

struct ExpertAnnotation {
  std::string reference_text;
  std::vector<HighlightSpan> spans;
  std::string editor;
  std::string timestamp;
  bool operator==(const ExpertAnnotation&) const = default;

  /// Every span must satisfy start < end <= reference length.
  void validate() const {
    for (const auto& s : spans) {
      if (!(s.start < s.end) || s.end > reference_text.size()) {
        throw ValidationError("span [" + std::to_string(s.start) + ", " + std::to_string(s.end) +
                              ") is invalid for a reference of length " + std::to_string(reference_text.size()));
      }
    }
  }
};

inline void to_json(nlohmann::json& j, const ExpertAnnotation& a) {
  j = nlohmann::json{
      {"reference_text", a.reference_text}, {"spans", a.spans}, {"editor", a.editor}, {"timestamp", a.timestamp}};
}

inline void from_json(const nlohmann::json& j, ExpertAnnotation& a) {
  a.reference_text = j.at("reference_text").get<std::string>();
  a.spans = j.value("spans", std::vector<HighlightSpan>{});
  a.editor = j.value("editor", std::string{});
  a.timestamp = j.value("timestamp", std::string{});
}

/// Sorts spans and merges overlapping ones. Touching spans stay separate.
/// The merged span keeps the source of its first member.
inline std::vector<HighlightSpan> merge_spans(std::vector<HighlightSpan> spans) {
  std::sort(spans.begin(), spans.end(), [](const HighlightSpan& a, const HighlightSpan& b) {
    return a.start != b.start ? a.start < b.start : a.end < b.end;
  });
  std::vector<HighlightSpan> out;
  for (const auto& s : spans) {
    if (!out.empty() && s.start < out.back().end) {
      out.back().end = std::max(out.back().end, s.end);
    } else {
      out.push_back(s);
    }
  }
  return out;
}

/// m_i = 1 iff token i overlaps some span by at least one byte. `text` sits at
/// byte `text_offset` of the string `seq` was tokenized from. Only prompt
/// positions can be set. Out-of-range spans are contract violations; a span
/// that covers no prompt token raises a ValidationError.
inline HighlightMask mask_from_spans(std::string_view text, const std::vector<HighlightSpan>& spans,
                                     const TokenSequence& seq, std::size_t text_offset = 0) {
  HighlightMask mask = HighlightMask::zeros(seq.size());
  for (const auto& s : spans) {
    require(s.start < s.end && s.end <= text.size(),
            "mask from spans: span [" + std::to_string(s.start) + ", " + std::to_string(s.end) +
                ") out of range for text of length " + std::to_string(text.size()));
    const std::size_t lo = s.start + text_offset;
    const std::size_t hi = s.end + text_offset;
    bool hit = false;
    for (std::size_t i = 0; i < seq.size(); ++i) {
      if (seq.roles[i] != Role::prompt) continue;
      const CharRange r = seq.offsets[i];
      if (r.empty()) continue;
      if (std::max(r.begin, lo) < std::min(r.end, hi)) {
        mask.bits[i] = 1;
        hit = true;
      }
    }
    if (!hit) {
      throw ValidationError("span [" + std::to_string(s.start) + ", " + std::to_string(s.end) + ") \"" +
                            std::string(text.substr(s.start, s.end - s.start)) + "\" covers no token");
    }
  }
  return mask;
}

/// True if the keyword shares a content word with the question.
inline bool keyword_overlaps_question(std::string_view keyword, std::string_view question) {
  const auto q = text::content_words(question);
  const std::set<std::string> qs(q.begin(), q.end());
  for (const auto& w : text::content_words(keyword)) {
    if (qs.count(w)) return true;
  }
  return false;
}

/// Keeps the keywords that share a content word with the question, or that
/// occur in `answer` when one is given.
inline std::vector<std::string> select_keywords(const std::vector<std::string>& keywords, std::string_view question,
                                                std::optional<std::string_view> answer = std::nullopt) {
  std::vector<std::string> out;
  const std::string norm_answer = answer ? text::normalize(*answer) : std::string{};
  for (const auto& k : keywords) {
    const std::string nk = text::normalize(k);
    if (nk.empty()) continue;
    const bool in_answer = answer && text::contains_phrase(norm_answer, nk);
    if (in_answer || keyword_overlaps_question(k, question)) out.push_back(k);
  }
  return out;
}

/// Whole-word, case-insensitive matches of the selected keywords in the
/// reference, merged.
inline std::vector<HighlightSpan> auto_highlight(const std::vector<std::string>& keywords, std::string_view question,
                                                 std::string_view reference,
                                                 std::optional<std::string_view> answer = std::nullopt) {
  std::vector<HighlightSpan> spans;
  for (const auto& k : select_keywords(keywords, question, answer)) {
    for (const auto& [b, e] : text::find_whole_word(reference, k)) spans.push_back({b, e, SpanSource::auto_});
  }
  return merge_spans(std::move(spans));
}

/// Byte spans of `phrases` matched whole-word in `reference`, merged.
inline std::vector<HighlightSpan> spans_for_phrases(const std::vector<std::string>& phrases, std::string_view reference,
                                                    SpanSource source) {
  std::vector<HighlightSpan> spans;
  for (const auto& p : phrases) {
    for (const auto& [b, e] : text::find_whole_word(reference, p)) spans.push_back({b, e, source});
  }
  return merge_spans(std::move(spans));
}

}  // namespace hlguide
