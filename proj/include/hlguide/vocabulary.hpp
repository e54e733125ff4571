#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "hlguide/errors.hpp"

namespace hlguide {

using TokenId = std::int32_t;

inline constexpr std::string_view kUnknownToken = "<unk>";
inline constexpr std::string_view kEosToken = "<eos>";

/// Token inventory. Line number in the vocabulary file is the token id; the
/// reserved "<unk>" and "<eos>" entries must each appear exactly once.
class Vocabulary {
 public:
  Vocabulary() = default;

  explicit Vocabulary(std::vector<std::string> tokens) : tokens_(std::move(tokens)) {
    for (std::size_t i = 0; i < tokens_.size(); ++i) {
      const auto [it, inserted] = index_.emplace(tokens_[i], static_cast<TokenId>(i));
      if (!inserted) throw ConfigError("vocabulary: duplicate token '" + tokens_[i] + "'");
    }
    unk_ = lookup_reserved(kUnknownToken);
    eos_ = lookup_reserved(kEosToken);
  }

  /// Prepends the reserved tokens to `words`.
  static Vocabulary with_reserved(const std::vector<std::string>& words) {
    std::vector<std::string> all{std::string(kUnknownToken), std::string(kEosToken)};
    all.insert(all.end(), words.begin(), words.end());
    return Vocabulary(std::move(all));
  }

  static Vocabulary load(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw NotFound("vocabulary file not found: " + path.string());
    std::vector<std::string> tokens;
    std::string line;
    while (std::getline(in, line)) {
      if (!line.empty() && line.back() == '\r') line.pop_back();
      tokens.push_back(line);
    }
    return Vocabulary(std::move(tokens));
  }

  void save(const std::filesystem::path& path) const {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw Error("cannot write vocabulary: " + path.string());
    for (const auto& t : tokens_) out << t << '\n';
  }

  std::size_t size() const { return tokens_.size(); }
  TokenId unk_id() const { return unk_; }
  TokenId eos_id() const { return eos_; }

  bool contains(std::string_view token) const { return index_.count(std::string(token)) > 0; }

  /// Id of `token`, or the unknown id.
  TokenId id(std::string_view token) const {
    const auto it = index_.find(std::string(token));
    return it == index_.end() ? unk_ : it->second;
  }

  const std::string& surface(TokenId id) const {
    require(id >= 0 && static_cast<std::size_t>(id) < tokens_.size(), "vocabulary: id out of range");
    return tokens_[static_cast<std::size_t>(id)];
  }

  const std::vector<std::string>& tokens() const { return tokens_; }

 private:
  TokenId lookup_reserved(std::string_view name) const {
    const auto it = index_.find(std::string(name));
    if (it == index_.end()) throw ConfigError("vocabulary: missing reserved token " + std::string(name));
    return it->second;
  }

  std::vector<std::string> tokens_;
  std::unordered_map<std::string, TokenId> index_;
  TokenId unk_ = 0;
  TokenId eos_ = 1;
};

}  // namespace hlguide
