#pragma once

// Batch evaluation harness: dataset loading, per-arm scoring, calibration,
// gating sweeps, hit rates, the hyperparameter grid and plot-data CSVs.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#include "hlguide/annotation.hpp"
#include "hlguide/evaluation.hpp"
#include "hlguide/guidance.hpp"
#include "hlguide/models.hpp"
#include "hlguide/retrieval.hpp"
#include "hlguide/scenarios.hpp"
#include "hlguide/service.hpp"
#include "hlguide/tokenizer.hpp"
#include "hlguide/uncertainty.hpp"

namespace hlguide {

// --- dataset -------------------------------------------------------------------

struct QaRow {
  std::string id;
  std::string question;
  std::string answer;
  QuestionType type = QuestionType::open;
  VisualRef visual_ref;
  std::vector<std::string> answer_keywords;
};

inline void to_json(nlohmann::json& j, const QaRow& r) {
  j = nlohmann::json{{"id", r.id},
                     {"question", r.question},
                     {"answer", r.answer},
                     {"type", to_string(r.type)},
                     {"visual_ref", r.visual_ref}};
  if (!r.answer_keywords.empty()) j["corpus_answer_keywords"] = r.answer_keywords;
}

inline void from_json(const nlohmann::json& j, QaRow& r) {
  r.id = j.value("id", std::string{});
  r.question = j.at("question").get<std::string>();
  r.answer = j.at("answer").get<std::string>();
  if (text::normalize(r.answer).empty()) throw ValidationError("empty answer");
  r.type = parse_question_type(j.at("type").get<std::string>());
  r.visual_ref = j.contains("visual_ref") ? j.at("visual_ref").get<VisualRef>() : VisualRef{};
  r.answer_keywords = j.value("corpus_answer_keywords", std::vector<std::string>{});
}

struct Dataset {
  std::vector<QaRow> rows;
  std::vector<std::string> errors;  // "line N: reason"
};

/// Reads QA rows from JSONL (optionally gzip). Malformed rows are reported
/// with their line number and skipped. Rows without an id get "row-<line>".
inline Dataset read_dataset(const std::filesystem::path& path) {
  const std::string data = read_maybe_gzip(path);
  Dataset ds;
  std::size_t start = 0, lineno = 0;
  while (start < data.size()) {
    std::size_t end = data.find('\n', start);
    if (end == std::string::npos) end = data.size();
    ++lineno;
    const std::string_view line(data.data() + start, end - start);
    start = end + 1;
    if (line.find_first_not_of(" \t\r") == std::string_view::npos) continue;
    try {
      QaRow r = nlohmann::json::parse(line).get<QaRow>();
      if (r.id.empty()) r.id = "row-" + std::to_string(lineno);
      ds.rows.push_back(std::move(r));
    } catch (const std::exception& e) {
      ds.errors.push_back("line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  return ds;
}

// --- manifest ------------------------------------------------------------------

struct GuidanceGrid {
  std::vector<double> alpha{0.0, 0.01, 0.1};
  std::vector<double> beta{1.0, 3.0, 5.0};
  std::vector<double> gamma{1.0, 1.3, 1.5};

  /// Cartesian product in alpha, beta, gamma order; delta follows beta.
  std::vector<GuidanceConfig> cells() const {
    std::vector<GuidanceConfig> out;
    for (const double a : alpha)
      for (const double b : beta)
        for (const double g : gamma) out.push_back(GuidanceConfig::make(a, b, g));
    return out;
  }

  /// "a1,a2:b1,b2:g1,g2".
  static GuidanceGrid parse(const std::string& s) {
    auto list = [&](const std::string& part) {
      std::vector<double> v;
      std::size_t i = 0;
      while (i <= part.size()) {
        std::size_t c = part.find(',', i);
        if (c == std::string::npos) c = part.size();
        const std::string item = part.substr(i, c - i);
        try {
          std::size_t pos = 0;
          v.push_back(std::stod(item, &pos));
          if (pos != item.size()) throw std::invalid_argument(item);
        } catch (const std::exception&) {
          throw ValidationError("grid: bad number '" + item + "' in '" + s + "'");
        }
        i = c + 1;
      }
      return v;
    };
    const auto c1 = s.find(':');
    const auto c2 = c1 == std::string::npos ? c1 : s.find(':', c1 + 1);
    if (c2 == std::string::npos) throw ValidationError("grid: expected alpha-list:beta-list:gamma-list, got '" + s + "'");
    GuidanceGrid g;
    g.alpha = list(s.substr(0, c1));
    g.beta = list(s.substr(c1 + 1, c2 - c1 - 1));
    g.gamma = list(s.substr(c2 + 1));
    return g;
  }
};

inline void to_json(nlohmann::json& j, const GuidanceGrid& g) {
  j = nlohmann::json{{"alpha", g.alpha}, {"beta", g.beta}, {"gamma", g.gamma}};
}
inline void from_json(const nlohmann::json& j, GuidanceGrid& g) {
  if (j.is_string()) {
    g = GuidanceGrid::parse(j.get<std::string>());
    return;
  }
  const GuidanceGrid d;
  g.alpha = j.value("alpha", d.alpha);
  g.beta = j.value("beta", d.beta);
  g.gamma = j.value("gamma", d.gamma);
}

struct RunManifest {
  std::filesystem::path dataset;
  std::filesystem::path corpus;  // JSONL(.gz) or a saved store directory; optional
  std::filesystem::path model;   // weight file
  std::filesystem::path vocab;
  std::string model_id = "default";
  GatePolicy policy = GatePolicy::top_percent(5.0);
  GatePolicy ablation_policy = GatePolicy::top_percent(100.0);
  GuidanceConfig guidance;
  GuidanceGrid grid;
  std::size_t k = 4;
  Strategy strategy = Strategy::union_;
  double clip_threshold = 0.6;
  std::size_t max_hit_k = 10;
  std::size_t max_len = 16;
  std::size_t label_samples = 10;
  double label_temperature = 1.0;
  std::size_t bins = 10;
  std::vector<double> percents{1, 2, 5, 10, 20, 50, 100};
  std::size_t workers = 1;
  std::filesystem::path out = "out";
  std::uint64_t seed = 0;

  void validate() const {
    if (dataset.empty()) throw ValidationError("manifest: 'dataset' is required");
    if (model.empty() || vocab.empty()) throw ValidationError("manifest: 'model' and 'vocab' are required");
    guidance.validate();
    if (grid.alpha.empty() || grid.beta.empty() || grid.gamma.empty()) throw ValidationError("manifest: grid must be non-empty");
    (void)grid.cells();
    if (k < 1 || max_hit_k < 1 || max_len < 1 || label_samples < 1 || bins < 1) {
      throw ValidationError("manifest: k, max_hit_k, max_len, label_samples and bins must be >= 1");
    }
    for (const double p : percents) {
      if (!(p >= 0.0 && p <= 100.0)) throw ValidationError("manifest: percents must be in [0, 100]");
    }
  }
};

inline void to_json(nlohmann::json& j, const RunManifest& m) {
  j = nlohmann::json{{"dataset", m.dataset.string()},
                     {"corpus", m.corpus.string()},
                     {"model", m.model.string()},
                     {"vocab", m.vocab.string()},
                     {"model_id", m.model_id},
                     {"policy", m.policy.to_string()},
                     {"ablation_policy", m.ablation_policy.to_string()},
                     {"guidance", m.guidance},
                     {"grid", m.grid},
                     {"k", m.k},
                     {"strategy", to_string(m.strategy)},
                     {"clip_threshold", m.clip_threshold},
                     {"max_hit_k", m.max_hit_k},
                     {"max_len", m.max_len},
                     {"label_samples", m.label_samples},
                     {"label_temperature", m.label_temperature},
                     {"bins", m.bins},
                     {"percents", m.percents},
                     {"workers", m.workers},
                     {"out", m.out.string()},
                     {"seed", m.seed}};
}

/// Missing keys keep their defaults. Relative paths are resolved against `base`.
inline RunManifest manifest_from_json(const nlohmann::json& j, const std::filesystem::path& base = {}) {
  RunManifest m;
  auto path = [&](const char* key, std::filesystem::path& dst) {
    if (!j.contains(key)) return;
    std::filesystem::path p = j.at(key).get<std::string>();
    if (!p.empty() && p.is_relative() && !base.empty()) p = base / p;
    dst = p;
  };
  path("dataset", m.dataset);
  path("corpus", m.corpus);
  path("model", m.model);
  path("vocab", m.vocab);
  path("out", m.out);
  m.model_id = j.value("model_id", m.model_id);
  if (j.contains("policy")) m.policy = j.at("policy").get<GatePolicy>();
  if (j.contains("ablation_policy")) m.ablation_policy = j.at("ablation_policy").get<GatePolicy>();
  if (j.contains("guidance")) m.guidance = j.at("guidance").get<GuidanceConfig>();
  if (j.contains("grid")) m.grid = j.at("grid").get<GuidanceGrid>();
  m.k = j.value("k", m.k);
  if (j.contains("strategy")) m.strategy = parse_strategy(j.at("strategy").get<std::string>());
  m.clip_threshold = j.value("clip_threshold", m.clip_threshold);
  m.max_hit_k = j.value("max_hit_k", m.max_hit_k);
  m.max_len = j.value("max_len", m.max_len);
  m.label_samples = j.value("label_samples", m.label_samples);
  m.label_temperature = j.value("label_temperature", m.label_temperature);
  m.bins = j.value("bins", m.bins);
  m.percents = j.value("percents", m.percents);
  m.workers = j.value("workers", m.workers);
  m.seed = j.value("seed", m.seed);
  return m;
}

inline RunManifest load_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw NotFound("manifest not found: " + path.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError("manifest " + path.string() + ": " + e.what());
  }
  return manifest_from_json(j, path.parent_path());
}

// --- per-item evaluation -------------------------------------------------------

struct ItemEval {
  std::string id;
  QuestionType type = QuestionType::open;
  std::string truth;
  std::string base_pred;
  double base_score = 0.0;
  EntropyReport entropy;
  double conf_entropy = 0.0;
  double conf_label = 0.0;
  std::optional<double> conf_is_true;
  std::string rag_pred;
  double rag_score = 0.0;
  std::string expert_reference;
  std::vector<HighlightSpan> expert_spans;
  std::string expert_rag_pred;
  double expert_rag_score = 0.0;
  std::string cfg_pred;
  double cfg_score = 0.0;
  std::map<std::string, std::vector<std::string>> retrieved;  // strategy -> captions (top max_hit_k)
};

inline void to_json(nlohmann::json& j, const ItemEval& e) {
  j = nlohmann::json{{"id", e.id},
                     {"type", to_string(e.type)},
                     {"truth", e.truth},
                     {"base_pred", e.base_pred},
                     {"base_score", e.base_score},
                     {"normalized_pe", e.entropy.normalized_pe},
                     {"pe", e.entropy.pe},
                     {"conf_entropy", e.conf_entropy},
                     {"conf_label", e.conf_label},
                     {"conf_is_true", e.conf_is_true ? nlohmann::json(*e.conf_is_true) : nlohmann::json()},
                     {"rag_pred", e.rag_pred},
                     {"rag_score", e.rag_score},
                     {"expert_reference", e.expert_reference},
                     {"expert_spans", e.expert_spans},
                     {"expert_rag_pred", e.expert_rag_pred},
                     {"expert_rag_score", e.expert_rag_score},
                     {"cfg_pred", e.cfg_pred},
                     {"cfg_score", e.cfg_score}};
}

/// Everything needed to answer one row under any guidance setting.
struct PreparedItem {
  const QaRow* row = nullptr;
  TokenSequence question_tokens;
  std::string expert_reference;
  std::vector<HighlightSpan> spans;
  TokenSequence guided_tokens;
  HighlightMask mask;
  bool has_reference = false;
};

class Evaluator {
 public:
  Evaluator(const RunManifest& m, std::shared_ptr<const GuidableModel> model,
            std::shared_ptr<const KnowledgeStore> corpus)
      : m_(m), model_(std::move(model)), corpus_(std::move(corpus)) {
    require(model_ != nullptr, "evaluator: model required");
  }

  const GuidableModel& model() const { return *model_; }

  /// Query embeddings of a row: inline vectors override the corpus record's.
  std::optional<QueryEmbedding> query_of(const QaRow& r) const {
    std::optional<Vector> img = r.visual_ref.image_embedding, txt = r.visual_ref.text_embedding;
    if (r.visual_ref.corpus_id && corpus_) {
      if (const auto* rec = corpus_->find(*r.visual_ref.corpus_id)) {
        if (!img) img = rec->image_embedding;
        if (!txt) txt = rec->text_embedding;
      }
    }
    if (!img && !txt) return std::nullopt;
    return QueryEmbedding::make(img, txt);
  }

  std::vector<RetrievalResult> retrieve(const QueryEmbedding& q, std::size_t k, Strategy s) const {
    const bool both = q.image_embedding && q.text_embedding;
    if ((s == Strategy::sum || s == Strategy::union_) && !both) s = q.image_embedding ? Strategy::image : Strategy::text;
    if (s == Strategy::image && !q.image_embedding) s = Strategy::text;
    if (s == Strategy::text && !q.text_embedding) s = Strategy::image;
    return corpus_->knn(q, k, s);
  }

  TokenSequence prompt_for(const QaRow& r, const std::string& text) const {
    TokenSequence seq = tokenize(model_->vocab(), text);
    if (r.visual_ref.prefix.empty()) return seq;
    return TokenSequence::with_visual_prefix(r.visual_ref.prefix, seq, model_->vocab().unk_id());
  }

  std::string greedy_answer(const TokenSequence& prompt) const {
    return detokenize(greedy_decode(*model_, prompt, m_.max_len).output, model_->vocab().eos_id());
  }

  std::string guided_answer(const PreparedItem& p, const GuidanceConfig& cfg) const {
    if (!p.has_reference) return greedy_answer(p.question_tokens);
    return detokenize(guided_decode(*model_, p.guided_tokens, p.mask, cfg, m_.max_len).output,
                      model_->vocab().eos_id());
  }

  /// Picks the expert reference among the top-k captions: the first one that
  /// contains a keyword kept by the highlight rule (ground truth as the
  /// expert). Falls back to the top-1 caption without highlights.
  PreparedItem prepare(const QaRow& r, const std::vector<RetrievalResult>& topk) const {
    PreparedItem p;
    p.row = &r;
    p.question_tokens = prompt_for(r, r.question);
    if (topk.empty()) return p;
    for (const auto& res : topk) {
      const auto& rec = corpus_->at(res.id);
      std::vector<std::string> keywords = rec.keywords;
      keywords.insert(keywords.end(), r.answer_keywords.begin(), r.answer_keywords.end());
      auto spans = auto_highlight(keywords, r.question, rec.caption, r.answer);
      if (!spans.empty()) {
        p.expert_reference = rec.caption;
        p.spans = std::move(spans);
        break;
      }
    }
    if (p.expert_reference.empty()) p.expert_reference = corpus_->at(topk.front().id).caption;
    p.has_reference = true;
    const std::string text = r.question + "\n" + p.expert_reference;
    p.guided_tokens = prompt_for(r, text);
    p.mask = mask_from_spans(p.expert_reference, p.spans, p.guided_tokens, r.question.size() + 1);
    return p;
  }

  ItemEval evaluate(const QaRow& r, std::size_t index, PreparedItem& prepared) const {
    ItemEval e;
    e.id = r.id;
    e.type = r.type;
    e.truth = r.answer;
    const auto& vocab = model_->vocab();
    const TokenSequence q = prompt_for(r, r.question);
    const DecodeResult base = greedy_decode(*model_, q, m_.max_len);
    e.base_pred = detokenize(base.output, vocab.eos_id());
    e.base_score = vqa_score(e.base_pred, r.answer, r.type);
    e.entropy = predictive_entropy(base.steps, base.output);
    e.conf_entropy = 1.0 - e.entropy.normalized_pe;
    e.conf_label = label_prob_estimator(*model_, q, m_.label_samples, m_.label_temperature,
                                        m_.seed * 1000003ULL + index, m_.max_len);
    try {
      e.conf_is_true = is_true_prob_estimator(*model_, q, base.output);
    } catch (const ConfigError&) {
      e.conf_is_true.reset();
    }

    std::vector<RetrievalResult> topk;
    const auto query = corpus_ ? query_of(r) : std::nullopt;
    if (query) {
      const bool both = query->image_embedding && query->text_embedding;
      for (const Strategy s : {Strategy::image, Strategy::text, Strategy::sum, Strategy::union_}) {
        const bool ok = s == Strategy::image   ? query->image_embedding.has_value()
                        : s == Strategy::text ? query->text_embedding.has_value()
                                              : both;
        auto& caps = e.retrieved[std::string(to_string(s))];
        if (!ok) continue;
        for (const auto& res : corpus_->knn(*query, m_.max_hit_k, s)) caps.push_back(corpus_->at(res.id).caption);
      }
      topk = retrieve(*query, m_.k, m_.strategy);
    }
    prepared = prepare(r, topk);
    if (prepared.has_reference) {
      const std::string rag_text = r.question + "\n" + corpus_->at(topk.front().id).caption;
      e.rag_pred = greedy_answer(prompt_for(r, rag_text));
      e.expert_reference = prepared.expert_reference;
      e.expert_spans = prepared.spans;
      e.expert_rag_pred = greedy_answer(prepared.guided_tokens);
      e.cfg_pred = guided_answer(prepared, m_.guidance);
    } else {
      e.rag_pred = e.expert_rag_pred = e.cfg_pred = e.base_pred;
    }
    e.rag_score = vqa_score(e.rag_pred, r.answer, r.type);
    e.expert_rag_score = vqa_score(e.expert_rag_pred, r.answer, r.type);
    e.cfg_score = vqa_score(e.cfg_pred, r.answer, r.type);
    return e;
  }

 private:
  const RunManifest& m_;
  std::shared_ptr<const GuidableModel> model_;
  std::shared_ptr<const KnowledgeStore> corpus_;
};

// --- aggregation ---------------------------------------------------------------

struct ArmScore {
  std::string name;
  double open = 0.0;
  double closed = 0.0;
  double overall = 0.0;
  std::size_t n_open = 0;
  std::size_t n_closed = 0;
};

inline void to_json(nlohmann::json& j, const ArmScore& a) {
  j = nlohmann::json{{"name", a.name},     {"open", a.open},     {"closed", a.closed},
                     {"overall", a.overall}, {"n_open", a.n_open}, {"n_closed", a.n_closed}};
}

inline ArmScore score_arm(const std::string& name, const std::vector<ItemEval>& items,
                          const std::vector<double>& scores) {
  ArmScore a;
  a.name = name;
  double so = 0.0, sc = 0.0;
  for (std::size_t i = 0; i < items.size(); ++i) {
    if (items[i].type == QuestionType::open) {
      so += scores[i];
      ++a.n_open;
    } else {
      sc += scores[i];
      ++a.n_closed;
    }
  }
  a.open = a.n_open ? so / static_cast<double>(a.n_open) : 0.0;
  a.closed = a.n_closed ? sc / static_cast<double>(a.n_closed) : 0.0;
  a.overall = items.empty() ? 0.0 : (so + sc) / static_cast<double>(items.size());
  return a;
}

inline std::string policy_label(const GatePolicy& p) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%g", p.value);
  if (p.kind == GatePolicy::Kind::top_percent) return std::string(buf) + "%";
  return std::string("pe>=") + buf;
}

inline std::vector<bool> review_set(const std::vector<ItemEval>& items, const GatePolicy& p) {
  std::vector<bool> out(items.size(), false);
  if (items.empty()) return out;
  std::vector<EntropyReport> reports;
  for (const auto& e : items) reports.push_back(e.entropy);
  const auto d = gate(reports, p);
  for (std::size_t i = 0; i < d.size(); ++i) out[i] = d[i].verdict == Verdict::review;
  return out;
}

/// Scores with reviewed items taking `reviewed_score` and the rest the base score.
template <class F>
std::vector<double> mixed_scores(const std::vector<ItemEval>& items, const std::vector<bool>& reviewed, F reviewed_score) {
  std::vector<double> s(items.size());
  for (std::size_t i = 0; i < items.size(); ++i) s[i] = reviewed[i] ? reviewed_score(items[i]) : items[i].base_score;
  return s;
}

inline double mean(const std::vector<double>& v) {
  if (v.empty()) return 0.0;
  double s = 0.0;
  for (const double x : v) s += x;
  return s / static_cast<double>(v.size());
}

inline nlohmann::json calibration_block(const std::vector<ScoredSample>& samples, std::size_t bins) {
  nlohmann::json j = {{"n", samples.size()}};
  if (samples.empty()) return j;
  std::vector<LogitSample> logits;
  for (const auto& s : samples) logits.push_back({confidence_logit(s.confidence), s.correct});
  const auto cal = temperature_fit_and_rescore(logits, bins);
  j["ece"] = ece(samples, bins);
  j["ece_t"] = cal.ece_t;
  j["bs_t"] = cal.bs_t;
  j["temperature"] = cal.temperature;
  j["degenerate"] = cal.degenerate;
  try {
    j["auc"] = roc_auc(samples);
    nlohmann::json pts = nlohmann::json::array();
    // the first point's threshold is +inf, which JSON cannot hold
    for (const auto& p : roc_curve(samples)) {
      pts.push_back({p.fpr, p.tpr, std::isfinite(p.threshold) ? nlohmann::json(p.threshold) : nlohmann::json()});
    }
    j["roc"] = pts;
  } catch (const UndefinedMetric&) {
    j["auc"] = nullptr;
    j["roc"] = nlohmann::json::array();
  }
  return j;
}

struct EvalRun {
  nlohmann::json bundle;
  std::vector<ItemEval> items;
  std::vector<PreparedItem> prepared;
  Dataset dataset;
};

inline std::shared_ptr<const KnowledgeStore> load_corpus(const std::filesystem::path& p) {
  if (p.empty()) return nullptr;
  if (std::filesystem::is_directory(p)) return std::make_shared<KnowledgeStore>(KnowledgeStore::load(p));
  auto read = read_corpus_jsonl(p);
  if (!read.errors.empty()) throw ValidationError("corpus " + p.string() + ": " + read.errors.front());
  return std::make_shared<KnowledgeStore>(KnowledgeStore::ingest(std::move(read.records)));
}

template <class F>
void bounded_parallel_for(std::size_t n, std::size_t workers, F f) {
  const std::size_t threads = std::min(n, std::max<std::size_t>(workers, 1));
  if (threads <= 1) {
    for (std::size_t i = 0; i < n; ++i) f(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr error;
  std::mutex mu;
  {
    std::vector<std::jthread> pool;
    for (std::size_t t = 0; t < threads; ++t) {
      pool.emplace_back([&] {
        for (std::size_t i = next++; i < n; i = next++) {
          try {
            f(i);
          } catch (...) {
            std::lock_guard lock(mu);
            if (!error) error = std::current_exception();
          }
        }
      });
    }
  }
  if (error) std::rethrow_exception(error);
}

inline EvalRun run_eval(const RunManifest& m, std::shared_ptr<const GuidableModel> model,
                        std::shared_ptr<const KnowledgeStore> corpus, Dataset ds) {
  EvalRun run;
  run.dataset = std::move(ds);
  const auto& rows = run.dataset.rows;
  Evaluator ev(m, model, corpus);
  run.items.resize(rows.size());
  run.prepared.resize(rows.size());
  bounded_parallel_for(rows.size(), m.workers, [&](std::size_t i) { run.items[i] = ev.evaluate(rows[i], i, run.prepared[i]); });
  const auto& items = run.items;

  const auto reviewed = review_set(items, m.policy);
  const std::string label = policy_label(m.policy);
  std::vector<double> base, rag;
  for (const auto& e : items) {
    base.push_back(e.base_score);
    rag.push_back(e.rag_score);
  }
  nlohmann::json arms = nlohmann::json::array();
  arms.push_back(score_arm("base", items, base));
  arms.push_back(score_arm("w/ RAG", items, rag));
  arms.push_back(score_arm("w/ " + label + " RAG", items, mixed_scores(items, reviewed, [](const ItemEval& e) { return e.rag_score; })));
  arms.push_back(score_arm("w/ " + label + " Expert-RAG", items,
                           mixed_scores(items, reviewed, [](const ItemEval& e) { return e.expert_rag_score; })));
  arms.push_back(score_arm("w/ " + label + " Expert-CFG", items,
                           mixed_scores(items, reviewed, [](const ItemEval& e) { return e.cfg_score; })));

  std::vector<ScoredSample> s_entropy, s_label, s_true;
  for (const auto& e : items) {
    const bool correct = e.base_score >= 1.0;
    s_entropy.push_back({e.conf_entropy, correct});
    s_label.push_back({e.conf_label, correct});
    if (e.conf_is_true) s_true.push_back({*e.conf_is_true, correct});
  }

  // accuracy vs share of items sent to review
  nlohmann::json by_percent = nlohmann::json::array();
  for (const double p : m.percents) {
    const auto rv = p > 0.0 ? review_set(items, GatePolicy::top_percent(p)) : std::vector<bool>(items.size(), false);
    const auto n = static_cast<std::size_t>(std::count(rv.begin(), rv.end(), true));
    by_percent.push_back({{"percent", p},
                          {"reviewed", n},
                          {"expert_cfg", mean(mixed_scores(items, rv, [](const ItemEval& e) { return e.cfg_score; }))},
                          {"expert_rag", mean(mixed_scores(items, rv, [](const ItemEval& e) { return e.expert_rag_score; }))}});
  }
  // accuracy vs entropy threshold, 1.0 down to 0.0 in steps of 0.05
  nlohmann::json by_threshold = nlohmann::json::array();
  for (int step = 20; step >= 0; --step) {
    const double tau = static_cast<double>(step) / 20.0;
    const auto rv = review_set(items, GatePolicy::fixed_threshold(tau));
    const auto n = static_cast<std::size_t>(std::count(rv.begin(), rv.end(), true));
    by_threshold.push_back({{"threshold", tau},
                            {"flagged", n},
                            {"expert_cfg", mean(mixed_scores(items, rv, [](const ItemEval& e) { return e.cfg_score; }))},
                            {"expert_rag", mean(mixed_scores(items, rv, [](const ItemEval& e) { return e.expert_rag_score; }))}});
  }

  // hit rate vs k per strategy, over rows with both query embeddings
  nlohmann::json hits = nlohmann::json::array();
  {
    std::map<std::string, std::vector<std::vector<std::string>>> caps;
    std::vector<std::string> answers;
    for (const auto& e : items) {
      if (e.retrieved.size() != 4 || e.retrieved.at("sum").empty()) continue;
      answers.push_back(e.truth);
      for (const auto& [s, c] : e.retrieved) caps[s].push_back(c);
    }
    for (std::size_t k = 1; k <= m.max_hit_k; ++k) {
      nlohmann::json row = {{"k", k}, {"queries", answers.size()}};
      for (const char* s : {"image", "text", "sum", "union"}) row[s] = answers.empty() ? 0.0 : hit_rate(caps[s], answers, k);
      hits.push_back(row);
    }
  }

  std::size_t n_reviewed = static_cast<std::size_t>(std::count(reviewed.begin(), reviewed.end(), true));
  double pe_sum = 0.0;
  for (const auto& e : items) pe_sum += e.entropy.normalized_pe;
  nlohmann::json manifest = m;
  manifest.erase("out");  // output location must not change the outputs
  run.bundle = {{"manifest", manifest},
                {"rows", items.size()},
                {"errors", run.dataset.errors},
                {"arms", arms},
                {"gate", {{"policy", m.policy.to_string()}, {"reviewed", n_reviewed}, {"delivered", items.size() - n_reviewed},
                          {"mean_normalized_pe", items.empty() ? 0.0 : pe_sum / static_cast<double>(items.size())}}},
                {"calibration",
                 {{"entropy", calibration_block(s_entropy, m.bins)},
                  {"label_prob", calibration_block(s_label, m.bins)},
                  {"is_true_prob", calibration_block(s_true, m.bins)}}},
                {"accuracy_vs_percent", by_percent},
                {"accuracy_vs_threshold", by_threshold},
                {"hitrate_vs_k", hits}};
  return run;
}

// --- ablation ------------------------------------------------------------------

struct AblationCell {
  GuidanceConfig cfg;
  double overall = 0.0;
  double open = 0.0;
  double closed = 0.0;
  bool is_default = false;
};

/// Expert-CFG overall score for every grid cell, under the ablation policy.
/// The cell equal to the default setting (0.01, 3, 1.3) is marked.
inline std::vector<AblationCell> run_ablation(const RunManifest& m, const EvalRun& run,
                                              const GuidableModel& model) {
  const auto cells = m.grid.cells();
  const auto reviewed = review_set(run.items, m.ablation_policy);
  Evaluator ev(m, std::shared_ptr<const GuidableModel>(&model, [](const GuidableModel*) {}), nullptr);
  std::vector<AblationCell> out(cells.size());
  const GuidanceConfig def;
  bounded_parallel_for(cells.size(), m.workers, [&](std::size_t c) {
    std::vector<double> scores(run.items.size());
    for (std::size_t i = 0; i < run.items.size(); ++i) {
      if (!reviewed[i]) {
        scores[i] = run.items[i].base_score;
        continue;
      }
      const auto& p = run.prepared[i];
      scores[i] = vqa_score(ev.guided_answer(p, cells[c]), p.row->answer, p.row->type);
    }
    const ArmScore a = score_arm("cell", run.items, scores);
    out[c] = {cells[c], a.overall, a.open, a.closed,
              cells[c].alpha == def.alpha && cells[c].beta == def.beta && cells[c].gamma == def.gamma};
  });
  return out;
}

inline nlohmann::json ablation_json(const std::vector<AblationCell>& cells) {
  nlohmann::json arr = nlohmann::json::array();
  for (const auto& c : cells) {
    arr.push_back({{"alpha", c.cfg.alpha}, {"beta", c.cfg.beta}, {"gamma", c.cfg.gamma}, {"delta", c.cfg.delta},
                   {"overall", c.overall}, {"open", c.open}, {"closed", c.closed}, {"default", c.is_default}});
  }
  return arr;
}

// --- report files --------------------------------------------------------------

inline std::string fmt_num(double v) {
  if (!std::isfinite(v)) return "nan";
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}

inline void write_text_file(const std::filesystem::path& p, const std::string& s) {
  if (p.has_parent_path()) std::filesystem::create_directories(p.parent_path());
  std::ofstream out(p, std::ios::binary);
  if (!out) throw Error("cannot write " + p.string());
  out << s;
  if (!out) throw Error("write failed: " + p.string());
}

inline const std::vector<std::string>& report_headers() {
  static const std::vector<std::string> h = {
      "method,fpr,tpr,threshold",
      "percent,reviewed,expert_cfg,expert_rag",
      "threshold,flagged,expert_cfg,expert_rag",
      "k,image,text,sum,union",
  };
  return h;
}

inline std::string ablation_csv(const std::vector<AblationCell>& cells) {
  std::string out = "alpha,beta,gamma,delta,overall,open,closed,default\n";
  for (const auto& c : cells) {
    out += fmt_num(c.cfg.alpha) + "," + fmt_num(c.cfg.beta) + "," + fmt_num(c.cfg.gamma) + "," + fmt_num(c.cfg.delta) +
           "," + fmt_num(c.overall) + "," + fmt_num(c.open) + "," + fmt_num(c.closed) + "," + (c.is_default ? "1" : "0") +
           "\n";
  }
  return out;
}

/// Writes roc_points.csv, accuracy_vs_percent.csv, accuracy_vs_threshold.csv
/// and hitrate_vs_k.csv from a metrics bundle.
inline void emit_report(const nlohmann::json& bundle, const std::filesystem::path& dir) {
  const auto& h = report_headers();
  std::string roc = h[0] + "\n";
  for (const char* method : {"entropy", "label_prob", "is_true_prob"}) {
    const auto& block = bundle.at("calibration").at(method);
    if (!block.contains("roc")) continue;
    for (const auto& p : block.at("roc")) {
      roc += std::string(method) + "," + fmt_num(p.at(0).get<double>()) + "," + fmt_num(p.at(1).get<double>()) + "," +
             (p.at(2).is_number() ? fmt_num(p.at(2).get<double>()) : std::string("inf")) + "\n";
    }
  }
  std::string pct = h[1] + "\n";
  for (const auto& r : bundle.at("accuracy_vs_percent")) {
    pct += fmt_num(r.at("percent").get<double>()) + "," + std::to_string(r.at("reviewed").get<std::size_t>()) + "," +
           fmt_num(r.at("expert_cfg").get<double>()) + "," + fmt_num(r.at("expert_rag").get<double>()) + "\n";
  }
  std::string thr = h[2] + "\n";
  for (const auto& r : bundle.at("accuracy_vs_threshold")) {
    thr += fmt_num(r.at("threshold").get<double>()) + "," + std::to_string(r.at("flagged").get<std::size_t>()) + "," +
           fmt_num(r.at("expert_cfg").get<double>()) + "," + fmt_num(r.at("expert_rag").get<double>()) + "\n";
  }
  std::string hit = h[3] + "\n";
  for (const auto& r : bundle.at("hitrate_vs_k")) {
    hit += std::to_string(r.at("k").get<std::size_t>()) + "," + fmt_num(r.at("image").get<double>()) + "," +
           fmt_num(r.at("text").get<double>()) + "," + fmt_num(r.at("sum").get<double>()) + "," +
           fmt_num(r.at("union").get<double>()) + "\n";
  }
  write_text_file(dir / "roc_points.csv", roc);
  write_text_file(dir / "accuracy_vs_percent.csv", pct);
  write_text_file(dir / "accuracy_vs_threshold.csv", thr);
  write_text_file(dir / "hitrate_vs_k.csv", hit);
}

/// Writes metrics.json, items.jsonl and the report CSVs for an eval run.
inline void write_eval_outputs(const EvalRun& run, const std::filesystem::path& dir) {
  write_text_file(dir / "metrics.json", run.bundle.dump(2) + "\n");
  std::string items;
  for (const auto& e : run.items) items += nlohmann::json(e).dump() + "\n";
  write_text_file(dir / "items.jsonl", items);
  emit_report(run.bundle, dir);
}

// --- synthetic suite on disk ---------------------------------------------------

/// Writes model.bin, vocab.txt, corpus.jsonl, dataset.jsonl and manifest.json.
inline void write_scenario_files(const ScenarioSuite& suite, const std::filesystem::path& dir, std::uint64_t seed) {
  std::filesystem::create_directories(dir);
  suite.model->save(dir / "model.bin");
  suite.model->vocab().save(dir / "vocab.txt");
  std::string corpus;
  for (const auto& r : suite.corpus) corpus += nlohmann::json(r).dump() + "\n";
  write_text_file(dir / "corpus.jsonl", corpus);
  std::string ds;
  for (const auto& s : suite.items) {
    QaRow r;
    r.id = s.id;
    r.question = s.question;
    r.answer = s.right_answer;
    r.type = s.type;
    r.visual_ref.image_embedding = s.query_image;
    r.visual_ref.text_embedding = s.query_text;
    ds += nlohmann::json(r).dump() + "\n";
  }
  write_text_file(dir / "dataset.jsonl", ds);
  RunManifest m;
  m.dataset = "dataset.jsonl";
  m.corpus = "corpus.jsonl";
  m.model = "model.bin";
  m.vocab = "vocab.txt";
  m.out = "out";
  m.seed = seed;
  write_text_file(dir / "manifest.json", nlohmann::json(m).dump(2) + "\n");
}

}  // namespace hlguide
