#pragma once

// Length-normalized predictive entropy over decode traces, review gating,
// and the two sampling/verbalized confidence baselines.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "hlguide/errors.hpp"
#include "hlguide/model.hpp"
#include "hlguide/rng.hpp"
#include "hlguide/text.hpp"
#include "hlguide/tokenizer.hpp"

namespace hlguide {

struct EntropyReport {
  std::vector<double> per_step_entropy;  // nats
  double pe = 0.0;                       // mean per-step entropy
  double normalized_pe = 0.0;            // pe / ln(vocab_size), in [0, 1]
  double seq_logprob_mean = 0.0;         // (1/N) sum log P(emitted_i)
  std::size_t vocab_size = 0;
};

inline void to_json(nlohmann::json& j, const EntropyReport& r) {
  j = nlohmann::json{{"per_step_entropy", r.per_step_entropy},
                     {"pe", r.pe},
                     {"normalized_pe", r.normalized_pe},
                     {"seq_logprob_mean", r.seq_logprob_mean},
                     {"vocab_size", r.vocab_size}};
}

inline void from_json(const nlohmann::json& j, EntropyReport& r) {
  r.per_step_entropy = j.at("per_step_entropy").get<std::vector<double>>();
  r.pe = j.at("pe").get<double>();
  r.normalized_pe = j.at("normalized_pe").get<double>();
  r.seq_logprob_mean = j.at("seq_logprob_mean").get<double>();
  r.vocab_size = j.value("vocab_size", std::size_t{0});
}

/// Shannon entropy in nats with 0 ln 0 = 0. Throws if `p` is not normalized
/// within 1e-6.
inline double step_entropy(std::span<const double> p) {
  double sum = 0.0;
  double h = 0.0;
  for (const double v : p) {
    require(v >= 0.0 && std::isfinite(v), "entropy: probabilities must be finite and non-negative");
    sum += v;
    if (v > 0.0) h -= v * std::log(v);
  }
  require(std::abs(sum - 1.0) <= 1e-6, "entropy: distribution is not normalized");
  return h;
}

/// Mean log-probability of the emitted tokens.
inline double sequence_logprob_normalized(std::span<const StepDistribution> steps, const TokenSequence& emitted) {
  require(steps.size() == emitted.size(), "sequence logprob: one step distribution per emitted token required");
  if (steps.empty()) return 0.0;
  double total = 0.0;
  for (std::size_t i = 0; i < steps.size(); ++i) total += std::log(steps[i].prob(emitted.tokens[i].id));
  return total / static_cast<double>(steps.size());
}

/// pe / ln(V), clamped to [0, 1]; values within rounding of the maximum
/// report exactly 1.
inline double normalize_entropy(double pe, std::size_t vocab_size) {
  if (vocab_size <= 1) return 0.0;
  const double max_h = std::log(static_cast<double>(vocab_size));
  if (std::abs(pe - max_h) <= 1e-12 * max_h) return 1.0;
  return std::clamp(pe / max_h, 0.0, 1.0);
}

inline EntropyReport report_from_step_entropies(std::vector<double> per_step, std::size_t vocab_size,
                                                double seq_logprob_mean = 0.0) {
  EntropyReport r;
  r.vocab_size = vocab_size;
  r.per_step_entropy = std::move(per_step);
  if (!r.per_step_entropy.empty()) {
    double s = 0.0;
    for (const double h : r.per_step_entropy) s += h;
    r.pe = s / static_cast<double>(r.per_step_entropy.size());
  }
  r.normalized_pe = normalize_entropy(r.pe, vocab_size);
  r.seq_logprob_mean = seq_logprob_mean;
  return r;
}

/// Entropy report over generated positions. The sequence log-probability
/// uses each step's argmax token (the greedy emission).
inline EntropyReport predictive_entropy(std::span<const StepDistribution> steps) {
  std::vector<double> per_step;
  per_step.reserve(steps.size());
  double lp = 0.0;
  std::size_t vocab = 0;
  for (const auto& s : steps) {
    per_step.push_back(step_entropy(s.probabilities));
    lp += s.log_probs[static_cast<std::size_t>(s.argmax())];
    vocab = s.size();
  }
  const double lp_mean = steps.empty() ? 0.0 : lp / static_cast<double>(steps.size());
  return report_from_step_entropies(std::move(per_step), vocab, lp_mean);
}

inline EntropyReport predictive_entropy(std::span<const StepDistribution> steps, const TokenSequence& emitted) {
  EntropyReport r = predictive_entropy(steps);
  r.seq_logprob_mean = sequence_logprob_normalized(steps, emitted);
  return r;
}

/// Replaces normalized_pe by batch min-max scaling of pe (alternative to the
/// ln(V) divisor). A batch with a single distinct value maps to 0.
inline void renormalize_minmax(std::vector<EntropyReport>& reports) {
  if (reports.empty()) return;
  double lo = reports.front().pe;
  double hi = lo;
  for (const auto& r : reports) {
    lo = std::min(lo, r.pe);
    hi = std::max(hi, r.pe);
  }
  for (auto& r : reports) r.normalized_pe = hi > lo ? (r.pe - lo) / (hi - lo) : 0.0;
}

// --- decode traces -----------------------------------------------------------

/// One trace line is either {"probs": [...]} (dense) or
/// {"top": [[id, p], ...], "remainder": r, "vocab_size": V} (sparse). The
/// remainder mass is assumed spread uniformly over the V - k unlisted ids.
inline double trace_line_entropy(const nlohmann::json& line, std::size_t& vocab_size) {
  if (line.contains("probs")) {
    const auto probs = line.at("probs").get<std::vector<double>>();
    vocab_size = probs.size();
    return step_entropy(probs);
  }
  const auto& top = line.at("top");
  const double remainder = line.value("remainder", 0.0);
  vocab_size = line.at("vocab_size").get<std::size_t>();
  require(top.size() <= vocab_size, "trace: more listed ids than vocabulary size");
  double sum = remainder;
  double h = 0.0;
  for (const auto& entry : top) {
    const double p = entry.at(1).get<double>();
    require(p >= 0.0, "trace: negative probability");
    sum += p;
    if (p > 0.0) h -= p * std::log(p);
  }
  require(std::abs(sum - 1.0) <= 1e-6, "trace: distribution is not normalized");
  const std::size_t rest = vocab_size - top.size();
  if (remainder > 0.0) {
    require(rest > 0, "trace: remainder mass with no unlisted ids");
    h -= remainder * std::log(remainder / static_cast<double>(rest));
  }
  return h;
}

/// Reads a decode trace (one step per line) into an entropy report.
inline EntropyReport entropy_from_trace_jsonl(std::istream& in) {
  std::vector<double> per_step;
  std::size_t vocab = 0;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw ValidationError("trace line " + std::to_string(lineno) + ": " + e.what());
    }
    std::size_t v = 0;
    per_step.push_back(trace_line_entropy(j, v));
    vocab = std::max(vocab, v);
  }
  return report_from_step_entropies(std::move(per_step), vocab);
}

// --- gating --------------------------------------------------------------------

struct GatePolicy {
  enum class Kind { top_percent, fixed_threshold };
  Kind kind = Kind::top_percent;
  double value = 5.0;  // percent in (0, 100] or threshold in [0, 1]

  static GatePolicy top_percent(double p) {
    require(p > 0.0 && p <= 100.0, "gate policy: percent must be in (0, 100]");
    return GatePolicy{Kind::top_percent, p};
  }
  static GatePolicy fixed_threshold(double tau) {
    require(tau >= 0.0 && tau <= 1.0, "gate policy: threshold must be in [0, 1]");
    return GatePolicy{Kind::fixed_threshold, tau};
  }

  /// Parses "top:5" or "threshold:0.6".
  static GatePolicy parse(const std::string& s) {
    const auto colon = s.find(':');
    require(colon != std::string::npos, "gate policy: expected kind:value, got '" + s + "'");
    const std::string kind = s.substr(0, colon);
    double v = 0.0;
    try {
      v = std::stod(s.substr(colon + 1));
    } catch (const std::exception&) {
      throw ContractViolation("gate policy: bad value in '" + s + "'");
    }
    if (kind == "top" || kind == "top_percent") return top_percent(v);
    if (kind == "threshold" || kind == "fixed_threshold") return fixed_threshold(v);
    throw ContractViolation("gate policy: unknown kind '" + kind + "'");
  }

  std::string to_string() const {
    return (kind == Kind::top_percent ? "top:" : "threshold:") + nlohmann::json(value).dump();
  }

  bool operator==(const GatePolicy&) const = default;
};

inline void to_json(nlohmann::json& j, const GatePolicy& p) {
  j = nlohmann::json{{"kind", p.kind == GatePolicy::Kind::top_percent ? "top_percent" : "fixed_threshold"},
                     {"value", p.value}};
}

inline void from_json(const nlohmann::json& j, GatePolicy& p) {
  if (j.is_string()) {
    p = GatePolicy::parse(j.get<std::string>());
    return;
  }
  const auto kind = j.at("kind").get<std::string>();
  const double v = j.at("value").get<double>();
  if (kind == "top_percent") p = GatePolicy::top_percent(v);
  else if (kind == "fixed_threshold") p = GatePolicy::fixed_threshold(v);
  else throw ContractViolation("gate policy: unknown kind '" + kind + "'");
}

enum class Verdict { deliver, review };

inline std::string_view to_string(Verdict v) { return v == Verdict::deliver ? "deliver" : "review"; }

struct GateDecision {
  Verdict verdict = Verdict::deliver;
  double entropy = 0.0;
  bool operator==(const GateDecision&) const = default;
};

/// Number of items a top-percent policy sends to review: ceil(p * n / 100).
inline std::size_t top_percent_count(double percent, std::size_t n) {
  const long double exact = static_cast<long double>(percent) * static_cast<long double>(n) / 100.0L;
  const long double rounded = std::nearbyint(exact);
  // Products like 7 * 100 / 100 may land an ulp above an integer.
  const long double c = std::abs(exact - rounded) < 1e-9L ? rounded : std::ceil(exact);
  return std::min<std::size_t>(n, static_cast<std::size_t>(c));
}

/// top_percent: the ceil(p*N/100) items with highest normalized entropy go
/// to review; equal entropies are ordered by input position, earlier first.
/// fixed_threshold: items with normalized entropy >= tau go to review.
inline std::vector<GateDecision> gate(std::span<const EntropyReport> reports, const GatePolicy& policy) {
  std::vector<GateDecision> out(reports.size());
  for (std::size_t i = 0; i < reports.size(); ++i) out[i].entropy = reports[i].normalized_pe;
  if (policy.kind == GatePolicy::Kind::fixed_threshold) {
    for (auto& d : out) d.verdict = d.entropy >= policy.value ? Verdict::review : Verdict::deliver;
    return out;
  }
  require(!reports.empty(), "gate: top-percent policy needs a non-empty batch");
  std::vector<std::size_t> order(reports.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return out[a].entropy > out[b].entropy; });
  const std::size_t n_review = top_percent_count(policy.value, reports.size());
  for (std::size_t r = 0; r < n_review; ++r) out[order[r]].verdict = Verdict::review;
  return out;
}

// --- confidence baselines ------------------------------------------------------

/// Fraction of `samples` temperature-scaled multinomial decodes whose
/// normalized answer string equals the greedy answer.
inline double label_prob_estimator(const GuidableModel& model, const TokenSequence& prompt, std::size_t samples = 10,
                                   double temperature = 1.0, std::uint64_t seed = 0, std::size_t max_len = 16) {
  require(samples >= 1, "label prob: samples must be >= 1");
  require(temperature > 0.0, "label prob: temperature must be > 0");
  const TokenId eos = model.vocab().eos_id();
  const std::string greedy = text::normalize(detokenize(greedy_decode(model, prompt, max_len).output, eos));
  Rng rng(seed);
  std::size_t agree = 0;
  for (std::size_t s = 0; s < samples; ++s) {
    const TokenSequence drawn = sample_decode(model, prompt, max_len, temperature, rng);
    if (text::normalize(detokenize(drawn, eos)) == greedy) ++agree;
  }
  return static_cast<double>(agree) / static_cast<double>(samples);
}

/// Verdict prompt appended after question and answer.
struct IsTrueTemplate {
  std::string suffix = "is this answer true ?";
  std::string true_token = "true";
  std::string false_token = "false";
};

/// Appends answer and the verdict suffix to the prompt, runs one step and
/// returns P(true) / (P(true) + P(false)).
inline double is_true_prob_estimator(const GuidableModel& model, const TokenSequence& prompt,
                                     const TokenSequence& answer, const IsTrueTemplate& tmpl = {}) {
  const auto& vocab = model.vocab();
  if (!vocab.contains(tmpl.true_token) || !vocab.contains(tmpl.false_token)) {
    throw ConfigError("is-true estimator: verdict tokens '" + tmpl.true_token + "'/'" + tmpl.false_token +
                      "' missing from vocabulary");
  }
  TokenSequence seq = prompt;
  for (std::size_t i = 0; i < answer.size(); ++i) {
    if (answer.tokens[i].id == vocab.eos_id()) continue;
    seq.push(answer.tokens[i], Role::prompt);
  }
  seq = concat(seq, tokenize(vocab, tmpl.suffix));
  const StepDistribution d = forward_unbiased(model, build_context(model, seq));
  const double pt = d.prob(vocab.id(tmpl.true_token));
  const double pf = d.prob(vocab.id(tmpl.false_token));
  require(pt + pf > 0.0, "is-true estimator: both verdict tokens have zero probability");
  return pt / (pt + pf);
}

}  // namespace hlguide
