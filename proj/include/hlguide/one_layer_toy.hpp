#pragma once

// OneLayerToy: one attention layer with one head, evaluated for the last
// query position only.
//
//   e_j    = score_scale * <x_last, x_j>      (or hand-set fixed scores)
//   h_j    = e_j + bias_j
//   p      = softmax(h)
//   a      = sum_j p_j x_j                     (values are the embeddings)
//   logit_v = <readout_v, a> + <residual_readout_v, x_last> + readout_bias_v
//
// Every quantity is hand-settable so the attention re-weighting can be
// checked in closed form.

#include <cmath>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "hlguide/model.hpp"
#include "hlguide/weights_io.hpp"

namespace hlguide {

class OneLayerToy final : public GuidableModel {
 public:
  OneLayerToy(Vocabulary vocab, std::size_t dim)
      : vocab_(std::move(vocab)),
        dim_(dim),
        embeddings_(vocab_.size() * dim, 0.0),
        readout_(vocab_.size() * dim, 0.0),
        residual_readout_(vocab_.size() * dim, 0.0),
        readout_bias_(vocab_.size(), 0.0) {
    require(dim >= 1, "one-layer toy: dim must be >= 1");
  }

  const Vocabulary& vocab() const override { return vocab_; }
  std::size_t embedding_dim() const override { return dim_; }
  std::string kind() const override { return "one_layer_toy"; }

  Vector embed(TokenId id) const override { return row(embeddings_, id); }

  void set_embedding(TokenId id, const Vector& v) { set_row(embeddings_, id, v); }
  void set_readout(TokenId id, const Vector& v) { set_row(readout_, id, v); }
  void set_residual_readout(TokenId id, const Vector& v) { set_row(residual_readout_, id, v); }
  void set_readout_bias(TokenId id, double b) { readout_bias_.at(checked(id)) = b; }
  void set_score_scale(double s) { score_scale_ = s; }
  /// Overrides the query-key scores; must match the context length at use.
  void set_fixed_scores(std::optional<Vector> e) { fixed_scores_ = std::move(e); }
  double score_scale() const { return score_scale_; }

  AttentionScores attention(const ContextEmbeddings& ctx, std::span<const double> bias) const {
    check_context(*this, ctx);
    require(bias.empty() || bias.size() == ctx.size(), "attention: bias length must equal context length");
    const std::size_t n = ctx.size();
    AttentionScores a;
    a.query_positions = {n - 1};
    Vector e(n);
    if (fixed_scores_) {
      require(fixed_scores_->size() == n, "one-layer toy: fixed scores length must equal context length");
      e = *fixed_scores_;
    } else {
      const Vector& last = ctx[n - 1];
      for (std::size_t j = 0; j < n; ++j) {
        double s = 0.0;
        for (std::size_t c = 0; c < dim_; ++c) s += last[c] * ctx[j][c];
        e[j] = score_scale_ * s;
      }
    }
    Vector h = e;
    if (!bias.empty()) {
      for (std::size_t j = 0; j < n; ++j) h[j] += bias[j];
    }
    Vector p;
    softmax_into(h, p);
    a.e.push_back(std::move(e));
    a.h.push_back(std::move(h));
    a.p.push_back(std::move(p));
    return a;
  }

  Vector next_logits(const ContextEmbeddings& ctx, std::span<const double> bias) const override {
    const AttentionScores a = attention(ctx, bias);
    const Vector& p = a.p.front();
    Vector mixed(dim_, 0.0);
    for (std::size_t j = 0; j < ctx.size(); ++j) {
      for (std::size_t c = 0; c < dim_; ++c) mixed[c] += p[j] * ctx[j][c];
    }
    const Vector& last = ctx[ctx.size() - 1];
    Vector logits(vocab_.size());
    for (std::size_t t = 0; t < vocab_.size(); ++t) {
      const double* r = readout_.data() + t * dim_;
      const double* rr = residual_readout_.data() + t * dim_;
      double s = readout_bias_[t];
      for (std::size_t c = 0; c < dim_; ++c) s += r[c] * mixed[c] + rr[c] * last[c];
      logits[t] = s;
    }
    return logits;
  }

  void save(const std::filesystem::path& path) const {
    const std::size_t v = vocab_.size();
    nlohmann::json header = {
        {"kind", kind()},
        {"seed", nullptr},
        {"dims", {{"dim", dim_}, {"vocab", v}}},
        {"score_scale", score_scale_},
        {"layers", nlohmann::json::array({{{"index", 0}, {"type", "single-head attention"}}})},
    };
    write_weight_file(path, header,
                      {{"embeddings", {v, dim_}, embeddings_},
                       {"readout", {v, dim_}, readout_},
                       {"residual_readout", {v, dim_}, residual_readout_},
                       {"readout_bias", {v}, readout_bias_}});
  }

  static OneLayerToy from_weights(const WeightFile& wf, Vocabulary vocab) {
    const auto& h = wf.header;
    if (h.at("kind") != "one_layer_toy") throw ConfigError("weight file is not a one_layer_toy");
    if (h.at("dims").at("vocab").get<std::size_t>() != vocab.size()) {
      throw ConfigError("one-layer toy: vocabulary size does not match weight file");
    }
    OneLayerToy m(std::move(vocab), h.at("dims").at("dim").get<std::size_t>());
    m.score_scale_ = h.at("score_scale").get<double>();
    m.embeddings_ = wf.get("embeddings").values;
    m.readout_ = wf.get("readout").values;
    m.residual_readout_ = wf.get("residual_readout").values;
    m.readout_bias_ = wf.get("readout_bias").values;
    return m;
  }

 private:
  std::size_t checked(TokenId id) const {
    require(id >= 0 && static_cast<std::size_t>(id) < vocab_.size(), "one-layer toy: token id out of range");
    return static_cast<std::size_t>(id);
  }

  Vector row(const Vector& table, TokenId id) const {
    const std::size_t r = checked(id);
    return Vector(table.begin() + static_cast<std::ptrdiff_t>(r * dim_),
                  table.begin() + static_cast<std::ptrdiff_t>((r + 1) * dim_));
  }

  void set_row(Vector& table, TokenId id, const Vector& v) {
    require(v.size() == dim_, "one-layer toy: vector dimension mismatch");
    std::copy(v.begin(), v.end(), table.begin() + static_cast<std::ptrdiff_t>(checked(id) * dim_));
  }

  Vocabulary vocab_;
  std::size_t dim_;
  Vector embeddings_;
  Vector readout_;
  Vector residual_readout_;
  Vector readout_bias_;
  double score_scale_ = 0.0;
  std::optional<Vector> fixed_scores_;
};

}  // namespace hlguide
