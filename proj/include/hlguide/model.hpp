#pragma once

// Guidable autoregressive model interface and the decode loops built on it.
//
// A model consumes already-embedded context vectors (so callers can rescale
// individual positions) plus an optional additive attention bias with one
// entry per key position. Implementations must add the bias to the
// pre-softmax query-key scores of every attention layer and head, and must
// be deterministic: equal inputs give bit-identical logits.

#include <algorithm>
#include <cmath>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "hlguide/errors.hpp"
#include "hlguide/rng.hpp"
#include "hlguide/sequence.hpp"
#include "hlguide/tokenizer.hpp"
#include "hlguide/vocabulary.hpp"

namespace hlguide {

struct ContextEmbeddings {
  std::vector<Vector> vectors;

  std::size_t size() const { return vectors.size(); }
  bool empty() const { return vectors.empty(); }
  const Vector& operator[](std::size_t i) const { return vectors[i]; }
  Vector& operator[](std::size_t i) { return vectors[i]; }
  bool operator==(const ContextEmbeddings&) const = default;
};

/// Attention of one (layer, head). Row q holds the scores of query position q
/// over key positions 0..q (causal); models that only evaluate the last query
/// hold a single row.
struct AttentionScores {
  std::size_t layer = 0;
  std::size_t head = 0;
  std::vector<std::size_t> query_positions;
  std::vector<Vector> e;  // query-key scores before bias
  std::vector<Vector> h;  // after bias
  std::vector<Vector> p;  // softmax(h)
};

/// Numerically stable softmax of `h` into `p`.
inline void softmax_into(const Vector& h, Vector& p) {
  p.resize(h.size());
  if (h.empty()) return;
  const double m = *std::max_element(h.begin(), h.end());
  double z = 0.0;
  for (std::size_t j = 0; j < h.size(); ++j) {
    p[j] = std::exp(h[j] - m);
    z += p[j];
  }
  for (double& v : p) v /= z;
}

/// Next-token distribution. Log-probabilities are kept alongside the
/// probabilities; argmax is taken over log-probabilities with the lowest id
/// winning ties.
struct StepDistribution {
  Vector logits;
  Vector log_probs;
  Vector probabilities;

  static StepDistribution from_logits(Vector logits) {
    require(!logits.empty(), "step distribution: empty logits");
    for (const double l : logits) require(std::isfinite(l), "step distribution: non-finite logit");
    StepDistribution d;
    const double m = *std::max_element(logits.begin(), logits.end());
    double z = 0.0;
    for (const double l : logits) z += std::exp(l - m);
    const double lse = m + std::log(z);
    d.log_probs.resize(logits.size());
    d.probabilities.resize(logits.size());
    for (std::size_t i = 0; i < logits.size(); ++i) {
      d.log_probs[i] = logits[i] - lse;
      d.probabilities[i] = std::exp(d.log_probs[i]);
    }
    d.logits = std::move(logits);
    return d;
  }

  std::size_t size() const { return logits.size(); }

  TokenId argmax() const { return argmax_of(log_probs); }

  double prob(TokenId id) const { return probabilities.at(static_cast<std::size_t>(id)); }

  static TokenId argmax_of(const Vector& scores) {
    std::size_t best = 0;
    for (std::size_t i = 1; i < scores.size(); ++i) {
      if (scores[i] > scores[best]) best = i;
    }
    return static_cast<TokenId>(best);
  }
};

class GuidableModel {
 public:
  virtual ~GuidableModel() = default;

  virtual const Vocabulary& vocab() const = 0;
  virtual std::size_t embedding_dim() const = 0;

  /// Token-to-embedding function.
  virtual Vector embed(TokenId id) const = 0;

  /// Logits for the token following the last context position. `bias` is
  /// empty (unbiased forward) or holds one additive score per position.
  virtual Vector next_logits(const ContextEmbeddings& ctx, std::span<const double> bias) const = 0;

  virtual std::string kind() const = 0;

  std::size_t vocab_size() const { return vocab().size(); }
};

inline void check_context(const GuidableModel& model, const ContextEmbeddings& ctx) {
  require(!ctx.empty(), "forward: empty context");
  for (const auto& v : ctx.vectors) {
    require(v.size() == model.embedding_dim(), "forward: context vector dimension mismatch");
    for (const double x : v) require(std::isfinite(x), "forward: non-finite context value");
  }
}

/// Runs the model with an additive per-position attention bias.
inline StepDistribution forward_step(const GuidableModel& model, const ContextEmbeddings& ctx,
                                     std::span<const double> bias) {
  check_context(model, ctx);
  require(bias.size() == ctx.size(), "forward: bias length must equal context length");
  for (const double b : bias) require(std::isfinite(b), "forward: non-finite bias");
  return StepDistribution::from_logits(model.next_logits(ctx, bias));
}

/// Runs the model without any bias hook.
inline StepDistribution forward_unbiased(const GuidableModel& model, const ContextEmbeddings& ctx) {
  check_context(model, ctx);
  return StepDistribution::from_logits(model.next_logits(ctx, {}));
}

/// Embeds a token sequence; visual-prefix positions take their precomputed vectors.
inline ContextEmbeddings build_context(const GuidableModel& model, const TokenSequence& seq) {
  seq.validate(model.vocab_size());
  ContextEmbeddings ctx;
  ctx.vectors.reserve(seq.size());
  std::size_t next_visual = 0;
  for (std::size_t i = 0; i < seq.size(); ++i) {
    if (seq.roles[i] == Role::visual_prefix) {
      require(seq.visual[next_visual].size() == model.embedding_dim(),
              "visual prefix vector dimension must equal the model embedding dimension");
      ctx.vectors.push_back(seq.visual[next_visual++]);
    } else {
      ctx.vectors.push_back(model.embed(seq.tokens[i].id));
    }
  }
  return ctx;
}

struct DecodeResult {
  TokenSequence output;  // generated tokens only, EOS included when emitted
  std::vector<StepDistribution> steps;
};

/// Greedy decoding from an embedded context with an optional fixed bias on
/// the context positions. Generated tokens are appended unscaled with zero
/// bias. Stops after EOS or `max_len` tokens.
inline DecodeResult greedy_decode_context(const GuidableModel& model, ContextEmbeddings ctx,
                                          std::optional<Vector> bias, std::size_t max_len) {
  require(max_len >= 1, "decode: max_len must be >= 1");
  if (bias) require(bias->size() == ctx.size(), "decode: bias length must equal context length");
  const auto& vocab = model.vocab();
  DecodeResult result;
  for (std::size_t step = 0; step < max_len; ++step) {
    StepDistribution dist = bias ? forward_step(model, ctx, *bias) : forward_unbiased(model, ctx);
    const TokenId next = dist.argmax();
    result.output.push(Token{next, vocab.surface(next)}, Role::generated);
    result.steps.push_back(std::move(dist));
    if (next == vocab.eos_id()) break;
    ctx.vectors.push_back(model.embed(next));
    if (bias) bias->push_back(0.0);
  }
  return result;
}

inline DecodeResult greedy_decode(const GuidableModel& model, const TokenSequence& prompt, std::size_t max_len) {
  require(!prompt.empty(), "decode: empty prompt");
  return greedy_decode_context(model, build_context(model, prompt), std::nullopt, max_len);
}

/// Temperature-scaled multinomial decoding. Each step draws u ~ U[0,1) from
/// `rng` and emits the first token whose cumulative probability exceeds u.
inline TokenSequence sample_decode(const GuidableModel& model, const TokenSequence& prompt, std::size_t max_len,
                                   double temperature, Rng& rng) {
  require(!prompt.empty(), "decode: empty prompt");
  require(max_len >= 1, "decode: max_len must be >= 1");
  require(temperature > 0.0 && std::isfinite(temperature), "decode: temperature must be > 0");
  const auto& vocab = model.vocab();
  ContextEmbeddings ctx = build_context(model, prompt);
  TokenSequence out;
  Vector scaled;
  Vector probs;
  for (std::size_t step = 0; step < max_len; ++step) {
    const StepDistribution dist = forward_unbiased(model, ctx);
    scaled.resize(dist.size());
    for (std::size_t i = 0; i < dist.size(); ++i) scaled[i] = dist.logits[i] / temperature;
    softmax_into(scaled, probs);
    const double u = rng.uniform();
    double cumulative = 0.0;
    std::size_t pick = probs.size() - 1;
    for (std::size_t i = 0; i < probs.size(); ++i) {
      cumulative += probs[i];
      if (cumulative > u) {
        pick = i;
        break;
      }
    }
    const auto next = static_cast<TokenId>(pick);
    out.push(Token{next, vocab.surface(next)}, Role::generated);
    if (next == vocab.eos_id()) break;
    ctx.vectors.push_back(model.embed(next));
  }
  return out;
}

}  // namespace hlguide
