#pragma once

// Highlight-guided decoding.
//
// Two branches share the generated prefix:
//   conditional    context c, attention bias  ln(beta) * m
//   unconditional  context c_bar, attention bias -delta * m
// where c_bar_i = (alpha - 1) * m_i * c_i + c_i. At each step the logits are
// combined as gamma * logP_cond - (gamma - 1) * logP_uncond over
// log-softmax values. Generated tokens enter both branches unscaled with
// zero bias.

#include <cmath>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "hlguide/errors.hpp"
#include "hlguide/model.hpp"

namespace hlguide {

/// Per-position highlight bits aligned to a TokenSequence.
struct HighlightMask {
  std::vector<unsigned char> bits;

  static HighlightMask zeros(std::size_t n) { return HighlightMask{std::vector<unsigned char>(n, 0)}; }

  std::size_t size() const { return bits.size(); }
  bool any() const {
    for (const auto b : bits) {
      if (b) return true;
    }
    return false;
  }
  std::size_t count() const {
    std::size_t n = 0;
    for (const auto b : bits) n += b ? 1 : 0;
    return n;
  }
  bool operator==(const HighlightMask&) const = default;

  /// Length must match and only prompt positions may be set.
  void validate_against(const TokenSequence& seq) const {
    require(bits.size() == seq.size(), "highlight mask: length must equal sequence length");
    for (std::size_t i = 0; i < bits.size(); ++i) {
      require(bits[i] == 0 || bits[i] == 1, "highlight mask: bits must be 0 or 1");
      if (bits[i]) require(seq.roles[i] == Role::prompt, "highlight mask: only prompt positions can be highlighted");
    }
  }
};

struct GuidanceConfig {
  double alpha = 0.01;
  double beta = 3.0;
  double gamma = 1.3;
  double delta = std::log(3.0) + 2.0;

  /// delta defaults to ln(beta) + 2 when not given.
  static GuidanceConfig make(double alpha, double beta, double gamma, std::optional<double> delta = std::nullopt) {
    GuidanceConfig c;
    c.alpha = alpha;
    c.beta = beta;
    c.gamma = gamma;
    c.delta = delta ? *delta : (beta > 0.0 ? std::log(beta) + 2.0 : 0.0);
    c.validate();
    return c;
  }

  /// The setting with gamma = 1.5 used as the headline configuration.
  static GuidanceConfig headline() { return make(0.01, 3.0, 1.5); }

  /// Every knob neutral: guided decoding reduces to plain greedy decoding.
  static GuidanceConfig neutral() { return make(1.0, 1.0, 1.0, 0.0); }

  void validate() const {
    require(std::isfinite(alpha) && std::isfinite(beta) && std::isfinite(gamma) && std::isfinite(delta),
            "guidance config: all values must be finite");
    require(alpha >= 0.0 && alpha <= 1.0, "guidance config: alpha must be in [0, 1]");
    require(beta >= 1.0, "guidance config: beta must be >= 1");
    require(gamma >= 1.0, "guidance config: gamma must be >= 1");
    require(delta >= 0.0, "guidance config: delta must be >= 0");
  }

  std::vector<std::string> warnings() const {
    std::vector<std::string> w;
    if (alpha == 0.0) w.emplace_back("alpha = 0 removes highlighted tokens from the unconditional context entirely");
    return w;
  }

  bool operator==(const GuidanceConfig&) const = default;
};

inline void to_json(nlohmann::json& j, const GuidanceConfig& c) {
  j = nlohmann::json{{"alpha", c.alpha}, {"beta", c.beta}, {"gamma", c.gamma}, {"delta", c.delta}};
}

inline void from_json(const nlohmann::json& j, GuidanceConfig& c) {
  const GuidanceConfig defaults;
  const double alpha = j.value("alpha", defaults.alpha);
  const double beta = j.value("beta", defaults.beta);
  const double gamma = j.value("gamma", defaults.gamma);
  std::optional<double> delta;
  if (j.contains("delta") && !j.at("delta").is_null()) delta = j.at("delta").get<double>();
  c = GuidanceConfig::make(alpha, beta, gamma, delta);
}

/// c_bar_i = (alpha - 1) * m_i * f(x_i) + f(x_i).
inline ContextEmbeddings build_uncond_context(const ContextEmbeddings& ctx, const HighlightMask& mask, double alpha) {
  require(ctx.size() == mask.size(), "uncond context: mask length must equal context length");
  ContextEmbeddings out = ctx;
  for (std::size_t i = 0; i < ctx.size(); ++i) {
    const double m = mask.bits[i] ? 1.0 : 0.0;
    for (double& x : out.vectors[i]) x = (alpha - 1.0) * m * x + x;
  }
  return out;
}

inline Vector cond_attention_bias(const HighlightMask& mask, double beta) {
  require(beta > 0.0 && std::isfinite(beta), "cond attention bias: beta must be > 0");
  const double lb = std::log(beta);
  Vector bias(mask.size());
  for (std::size_t i = 0; i < mask.size(); ++i) bias[i] = lb * (mask.bits[i] ? 1.0 : 0.0);
  return bias;
}

inline Vector uncond_attention_bias(const HighlightMask& mask, double delta) {
  require(delta >= 0.0 && std::isfinite(delta), "uncond attention bias: delta must be >= 0");
  Vector bias(mask.size());
  for (std::size_t i = 0; i < mask.size(); ++i) bias[i] = -delta * (mask.bits[i] ? 1.0 : 0.0);
  return bias;
}

/// gamma * logP_cond - (gamma - 1) * logP_uncond, evaluated as
/// logP_cond + (gamma - 1) * (logP_cond - logP_uncond) so that gamma = 1 and
/// identical branches reproduce logP_cond bit for bit.
inline Vector cfg_combine(const StepDistribution& cond, const StepDistribution& uncond, double gamma) {
  require(cond.size() == uncond.size(), "cfg combine: vocabulary size mismatch");
  require(gamma >= 1.0 && std::isfinite(gamma), "cfg combine: gamma must be >= 1");
  Vector out(cond.size());
  const double g1 = gamma - 1.0;
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = cond.log_probs[i] + g1 * (cond.log_probs[i] - uncond.log_probs[i]);
  }
  return out;
}

struct GuidedStep {
  StepDistribution cond;
  StepDistribution uncond;
  Vector guided_logits;
  Token chosen;
  double chosen_prob = 0.0;  // under softmax(guided_logits)
};

struct GuidedDecodeResult {
  TokenSequence output;  // generated tokens only
  std::vector<GuidedStep> steps;
};

struct GuidanceBranches {
  ContextEmbeddings cond_ctx;
  Vector cond_bias;
  ContextEmbeddings uncond_ctx;
  Vector uncond_bias;
};

inline GuidanceBranches make_branches(const GuidableModel& model, const TokenSequence& prompt,
                                      const HighlightMask& mask, const GuidanceConfig& cfg) {
  cfg.validate();
  require(!prompt.empty(), "guided decode: empty prompt");
  mask.validate_against(prompt);
  GuidanceBranches b;
  b.cond_ctx = build_context(model, prompt);
  b.cond_bias = cond_attention_bias(mask, cfg.beta);
  b.uncond_ctx = build_uncond_context(b.cond_ctx, mask, cfg.alpha);
  b.uncond_bias = uncond_attention_bias(mask, cfg.delta);
  return b;
}

inline GuidedDecodeResult guided_decode(const GuidableModel& model, const TokenSequence& prompt,
                                        const HighlightMask& mask, const GuidanceConfig& cfg, std::size_t max_len) {
  require(max_len >= 1, "guided decode: max_len must be >= 1");
  GuidanceBranches b = make_branches(model, prompt, mask, cfg);
  const auto& vocab = model.vocab();
  GuidedDecodeResult result;
  Vector guided_probs;
  for (std::size_t step = 0; step < max_len; ++step) {
    GuidedStep s;
    s.cond = forward_step(model, b.cond_ctx, b.cond_bias);
    s.uncond = forward_step(model, b.uncond_ctx, b.uncond_bias);
    s.guided_logits = cfg_combine(s.cond, s.uncond, cfg.gamma);
    const TokenId next = StepDistribution::argmax_of(s.guided_logits);
    softmax_into(s.guided_logits, guided_probs);
    s.chosen = Token{next, vocab.surface(next)};
    s.chosen_prob = guided_probs[static_cast<std::size_t>(next)];
    result.output.push(s.chosen, Role::generated);
    result.steps.push_back(std::move(s));
    if (next == vocab.eos_id()) break;
    Vector emb = model.embed(next);
    b.cond_ctx.vectors.push_back(emb);
    b.uncond_ctx.vectors.push_back(std::move(emb));
    b.cond_bias.push_back(0.0);
    b.uncond_bias.push_back(0.0);
  }
  return result;
}

/// Greedy decoding of the conditional branch alone (context c, bias ln(beta) * m).
inline DecodeResult cond_branch_decode(const GuidableModel& model, const TokenSequence& prompt,
                                       const HighlightMask& mask, double beta, std::size_t max_len) {
  mask.validate_against(prompt);
  return greedy_decode_context(model, build_context(model, prompt), cond_attention_bias(mask, beta), max_len);
}

/// One JSON object per step for the token colormap view.
inline std::string guided_trace_jsonl(const GuidedDecodeResult& r) {
  std::string out;
  for (std::size_t i = 0; i < r.steps.size(); ++i) {
    const auto& s = r.steps[i];
    const auto id = static_cast<std::size_t>(s.chosen.id);
    const nlohmann::json line = {
        {"step", i},
        {"token_id", s.chosen.id},
        {"surface", s.chosen.surface},
        {"prob", s.chosen_prob},
        {"cond_prob", s.cond.probabilities[id]},
        {"uncond_prob", s.uncond.probabilities[id]},
        {"guided_logit", s.guided_logits[id]},
    };
    out += line.dump();
    out.push_back('\n');
  }
  return out;
}

}  // namespace hlguide
