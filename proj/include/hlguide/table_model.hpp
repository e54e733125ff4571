#pragma once

// TableModel: next-token distribution looked up by the last context token.
// Embeddings are one-hot, so the last token is recovered as the largest
// positive component of the last context vector. Attention bias has no
// effect. Zero-probability entries get a logit of -1000 (exp underflows to
// exactly 0 while logits stay finite).

#include <cmath>
#include <map>
#include <span>
#include <string>
#include <unordered_map>

#include "hlguide/model.hpp"

namespace hlguide {

class TableModel final : public GuidableModel {
 public:
  using Row = std::map<std::string, double>;

  TableModel(Vocabulary vocab, const Row& default_row) : vocab_(std::move(vocab)) {
    default_logits_ = to_logits(default_row);
  }

  /// Distribution used when the last context token is `last_token`.
  void set_row_after(std::string_view last_token, const Row& row) {
    require(vocab_.contains(last_token), "table model: unknown token " + std::string(last_token));
    rows_[vocab_.id(last_token)] = to_logits(row);
  }

  const Vocabulary& vocab() const override { return vocab_; }
  std::size_t embedding_dim() const override { return vocab_.size(); }
  std::string kind() const override { return "table"; }

  Vector embed(TokenId id) const override {
    require(id >= 0 && static_cast<std::size_t>(id) < vocab_.size(), "embed: token id out of range");
    Vector v(vocab_.size(), 0.0);
    v[static_cast<std::size_t>(id)] = 1.0;
    return v;
  }

  Vector next_logits(const ContextEmbeddings& ctx, std::span<const double>) const override {
    const Vector& last = ctx[ctx.size() - 1];
    std::size_t best = 0;
    for (std::size_t i = 1; i < last.size(); ++i) {
      if (last[i] > last[best]) best = i;
    }
    if (last[best] > 0.0) {
      const auto it = rows_.find(static_cast<TokenId>(best));
      if (it != rows_.end()) return it->second;
    }
    return default_logits_;
  }

 private:
  Vector to_logits(const Row& row) const {
    Vector logits(vocab_.size(), -1000.0);
    for (const auto& [tok, p] : row) {
      require(vocab_.contains(tok), "table model: unknown token " + tok);
      require(p >= 0.0 && p <= 1.0, "table model: probability out of range");
      if (p > 0.0) logits[static_cast<std::size_t>(vocab_.id(tok))] = std::log(p);
    }
    return logits;
  }

  Vocabulary vocab_;
  Vector default_logits_;
  std::unordered_map<TokenId, Vector> rows_;
};

}  // namespace hlguide
