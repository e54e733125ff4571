#pragma once

// Calibration and task metrics.

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <set>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "hlguide/errors.hpp"
#include "hlguide/text.hpp"

namespace hlguide {

struct ScoredSample {
  double confidence = 0.0;  // in [0, 1]
  bool correct = false;
};

struct CalibrationSummary {
  double ece = 0.0;
  double ece_t = 0.0;
  double bs_t = 0.0;
  double auc = 0.0;
  double temperature = 1.0;
  bool degenerate = false;  // all logits equal: temperature left at 1
};

inline void to_json(nlohmann::json& j, const CalibrationSummary& c) {
  j = nlohmann::json{{"ece", c.ece},   {"ece_t", c.ece_t},         {"bs_t", c.bs_t},
                     {"auc", c.auc},   {"temperature", c.temperature}, {"degenerate", c.degenerate}};
}

inline void from_json(const nlohmann::json& j, CalibrationSummary& c) {
  c.ece = j.at("ece").get<double>();
  c.ece_t = j.at("ece_t").get<double>();
  c.bs_t = j.at("bs_t").get<double>();
  c.auc = j.at("auc").get<double>();
  c.temperature = j.at("temperature").get<double>();
  c.degenerate = j.value("degenerate", false);
}

inline void check_samples(std::span<const ScoredSample> samples) {
  for (const auto& s : samples) {
    require(std::isfinite(s.confidence) && s.confidence >= 0.0 && s.confidence <= 1.0,
            "scored sample: confidence must be finite and in [0, 1]");
  }
}

/// Area under the ROC curve for separating incorrect answers (positive class,
/// scored by 1 - confidence) from correct ones. Equals the Mann-Whitney
/// statistic P(conf_correct > conf_incorrect) + 1/2 P(equal); computed from
/// tie-averaged ranks in O(n log n).
inline double roc_auc(std::span<const ScoredSample> samples) {
  check_samples(samples);
  std::size_t n_correct = 0;
  for (const auto& s : samples) n_correct += s.correct ? 1 : 0;
  const std::size_t n_incorrect = samples.size() - n_correct;
  if (n_correct == 0 || n_incorrect == 0) throw UndefinedMetric("roc_auc: need both correct and incorrect samples");

  std::vector<std::size_t> order(samples.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(),
            [&](std::size_t a, std::size_t b) { return samples[a].confidence < samples[b].confidence; });
  // Sum of ranks (1-based, tie-averaged) of the correct samples by confidence.
  double rank_sum = 0.0;
  std::size_t i = 0;
  while (i < order.size()) {
    std::size_t j = i;
    while (j + 1 < order.size() && samples[order[j + 1]].confidence == samples[order[i]].confidence) ++j;
    const double avg_rank = 0.5 * static_cast<double>(i + 1 + j + 1);
    for (std::size_t k = i; k <= j; ++k) {
      if (samples[order[k]].correct) rank_sum += avg_rank;
    }
    i = j + 1;
  }
  const double nc = static_cast<double>(n_correct);
  const double u = rank_sum - nc * (nc + 1.0) / 2.0;
  return u / (nc * static_cast<double>(n_incorrect));
}

struct RocPoint {
  double fpr = 0.0;
  double tpr = 0.0;
  double threshold = 0.0;  // on 1 - confidence; flag when score >= threshold
};

/// ROC curve with incorrect answers as the positive class. Points run from
/// (0, 0) to (1, 1), one per distinct score.
inline std::vector<RocPoint> roc_curve(std::span<const ScoredSample> samples) {
  check_samples(samples);
  std::size_t pos = 0;
  for (const auto& s : samples) pos += s.correct ? 0 : 1;
  const std::size_t neg = samples.size() - pos;
  if (pos == 0 || neg == 0) throw UndefinedMetric("roc_curve: need both correct and incorrect samples");
  std::vector<std::size_t> order(samples.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(),
            [&](std::size_t a, std::size_t b) { return samples[a].confidence < samples[b].confidence; });
  std::vector<RocPoint> pts;
  pts.push_back({0.0, 0.0, std::numeric_limits<double>::infinity()});
  std::size_t tp = 0, fp = 0, i = 0;
  while (i < order.size()) {
    const double conf = samples[order[i]].confidence;
    while (i < order.size() && samples[order[i]].confidence == conf) {
      if (samples[order[i]].correct) ++fp;
      else ++tp;
      ++i;
    }
    pts.push_back({static_cast<double>(fp) / static_cast<double>(neg), static_cast<double>(tp) / static_cast<double>(pos),
                   1.0 - conf});
  }
  return pts;
}

/// Expected calibration error over `bins` equal-width bins on [0, 1]; a
/// confidence of exactly 1 falls in the last bin.
inline double ece(std::span<const ScoredSample> samples, std::size_t bins = 10) {
  require(bins >= 1, "ece: bins must be >= 1");
  check_samples(samples);
  if (samples.empty()) return 0.0;
  std::vector<double> conf_sum(bins, 0.0), acc_sum(bins, 0.0);
  std::vector<std::size_t> count(bins, 0);
  for (const auto& s : samples) {
    auto b = static_cast<std::size_t>(s.confidence * static_cast<double>(bins));
    b = std::min(b, bins - 1);
    conf_sum[b] += s.confidence;
    acc_sum[b] += s.correct ? 1.0 : 0.0;
    ++count[b];
  }
  const double n = static_cast<double>(samples.size());
  double total = 0.0;
  for (std::size_t b = 0; b < bins; ++b) {
    if (count[b] == 0) continue;
    const double nb = static_cast<double>(count[b]);
    total += (nb / n) * std::abs(acc_sum[b] / nb - conf_sum[b] / nb);
  }
  return total;
}

inline double brier_score(std::span<const ScoredSample> samples) {
  check_samples(samples);
  if (samples.empty()) return 0.0;
  double total = 0.0;
  for (const auto& s : samples) {
    const double y = s.correct ? 1.0 : 0.0;
    total += (s.confidence - y) * (s.confidence - y);
  }
  return total / static_cast<double>(samples.size());
}

struct LogitSample {
  double logit = 0.0;  // confidence = sigmoid(logit / T)
  bool correct = false;
};

inline double sigmoid(double z) {
  return z >= 0.0 ? 1.0 / (1.0 + std::exp(-z)) : std::exp(z) / (1.0 + std::exp(z));
}

/// Logit of a confidence, with the confidence clipped to [1e-6, 1 - 1e-6].
inline double confidence_logit(double confidence) {
  const double c = std::clamp(confidence, 1e-6, 1.0 - 1e-6);
  return std::log(c / (1.0 - c));
}

/// Binary negative log-likelihood of the labels under sigmoid(logit / T).
inline double temperature_nll(std::span<const LogitSample> samples, double temperature) {
  double nll = 0.0;
  for (const auto& s : samples) {
    const double z = s.logit / temperature;
    // -log sigmoid(z) = softplus(-z); -log(1 - sigmoid(z)) = softplus(z)
    const double t = s.correct ? -z : z;
    nll += t > 0.0 ? t + std::log1p(std::exp(-t)) : std::log1p(std::exp(t));
  }
  return nll;
}

/// Fits a scalar temperature by golden-section search of the NLL on
/// [0.05, 20] and reports calibration before and after rescaling.
inline CalibrationSummary temperature_fit_and_rescore(std::span<const LogitSample> samples, std::size_t bins = 10) {
  require(!samples.empty(), "temperature fit: no samples");
  CalibrationSummary out;
  std::vector<ScoredSample> raw;
  raw.reserve(samples.size());
  bool all_equal = true;
  for (const auto& s : samples) {
    require(std::isfinite(s.logit), "temperature fit: non-finite logit");
    raw.push_back({sigmoid(s.logit), s.correct});
    if (s.logit != samples.front().logit) all_equal = false;
  }
  out.ece = ece(raw, bins);
  try {
    out.auc = roc_auc(raw);
  } catch (const UndefinedMetric&) {
    out.auc = std::numeric_limits<double>::quiet_NaN();
  }

  double t = 1.0;
  if (all_equal) {
    out.degenerate = true;
  } else {
    constexpr double kInvPhi = 0.6180339887498949;
    double lo = 0.05, hi = 20.0;
    double x1 = hi - kInvPhi * (hi - lo);
    double x2 = lo + kInvPhi * (hi - lo);
    double f1 = temperature_nll(samples, x1);
    double f2 = temperature_nll(samples, x2);
    for (int it = 0; it < 200 && hi - lo > 1e-10; ++it) {
      if (f1 <= f2) {
        hi = x2;
        x2 = x1;
        f2 = f1;
        x1 = hi - kInvPhi * (hi - lo);
        f1 = temperature_nll(samples, x1);
      } else {
        lo = x1;
        x1 = x2;
        f1 = f2;
        x2 = lo + kInvPhi * (hi - lo);
        f2 = temperature_nll(samples, x2);
      }
    }
    t = 0.5 * (lo + hi);
    // Near a flat optimum the search only resolves T to ~1e-8; keep the
    // identity when it is at least as likely.
    const double f_t = temperature_nll(samples, t);
    if (temperature_nll(samples, 1.0) <= f_t + 1e-12 * std::abs(f_t)) t = 1.0;
  }
  out.temperature = t;
  std::vector<ScoredSample> scaled;
  scaled.reserve(samples.size());
  for (const auto& s : samples) scaled.push_back({sigmoid(s.logit / t), s.correct});
  out.ece_t = ece(scaled, bins);
  out.bs_t = brier_score(scaled);
  return out;
}

struct SensitivitySpecificity {
  double sensitivity = 0.0;
  double specificity = 0.0;
};

/// Items with confidence below `threshold` are flagged for review.
/// Sensitivity: share of incorrect answers flagged. Specificity: share of
/// correct answers left unflagged.
inline SensitivitySpecificity sensitivity_specificity(std::span<const ScoredSample> samples, double threshold) {
  require(threshold >= 0.0 && threshold <= 1.0, "sensitivity/specificity: threshold must be in [0, 1]");
  check_samples(samples);
  std::size_t tp = 0, fn = 0, tn = 0, fp = 0;
  for (const auto& s : samples) {
    const bool flagged = s.confidence < threshold;
    if (!s.correct) (flagged ? tp : fn)++;
    else (flagged ? fp : tn)++;
  }
  if (tp + fn == 0 || tn + fp == 0) throw UndefinedMetric("sensitivity/specificity: need both classes");
  return {static_cast<double>(tp) / static_cast<double>(tp + fn), static_cast<double>(tn) / static_cast<double>(tn + fp)};
}

enum class QuestionType { open, closed };

inline QuestionType parse_question_type(const std::string& s) {
  if (s == "open") return QuestionType::open;
  if (s == "closed") return QuestionType::closed;
  throw ValidationError("question type must be 'open' or 'closed', got '" + s + "'");
}

inline std::string_view to_string(QuestionType t) { return t == QuestionType::open ? "open" : "closed"; }

/// Closed: exact match of normalized strings. Open: share of distinct
/// normalized truth tokens that appear among the prediction tokens.
inline double vqa_score(std::string_view prediction, std::string_view truth, QuestionType type) {
  const std::string nt = text::normalize(truth);
  require(!nt.empty(), "vqa score: empty ground truth");
  const std::string np = text::normalize(prediction);
  if (type == QuestionType::closed) return np == nt ? 1.0 : 0.0;
  const auto truth_words = text::split_words(nt);
  const std::set<std::string> truth_set(truth_words.begin(), truth_words.end());
  const auto pred_words = text::split_words(np);
  const std::set<std::string> pred_set(pred_words.begin(), pred_words.end());
  std::size_t hit = 0;
  for (const auto& w : truth_set) hit += pred_set.count(w);
  return static_cast<double>(hit) / static_cast<double>(truth_set.size());
}

/// Fraction of queries whose normalized answer occurs as a substring of any
/// of its top-k normalized captions.
inline double hit_rate(const std::vector<std::vector<std::string>>& retrieved_captions,
                       const std::vector<std::string>& answers, std::size_t k) {
  require(k >= 1, "hit rate: k must be >= 1");
  require(retrieved_captions.size() == answers.size(), "hit rate: one caption list per answer");
  if (answers.empty()) return 0.0;
  std::size_t hits = 0;
  for (std::size_t q = 0; q < answers.size(); ++q) {
    const std::string a = text::normalize(answers[q]);
    if (a.empty()) continue;
    const auto& caps = retrieved_captions[q];
    const std::size_t upto = std::min(k, caps.size());
    for (std::size_t c = 0; c < upto; ++c) {
      if (text::normalize(caps[c]).find(a) != std::string::npos) {
        ++hits;
        break;
      }
    }
  }
  return static_cast<double>(hits) / static_cast<double>(answers.size());
}

}  // namespace hlguide
