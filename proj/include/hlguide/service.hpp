#pragma once

// Review service: answer, gate, queue for review with references, accept
// highlights, regenerate with guidance, deliver. Every mutation is an event in
// an append-only log; replaying the log rebuilds the item table exactly.
//
// Status transitions:
//   pending -> annotated -> regenerated -> delivered
//   pending -> delivered

#include <algorithm>
#include <atomic>
#include <chrono>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <semaphore>
#include <shared_mutex>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#include "hlguide/annotation.hpp"
#include "hlguide/guidance.hpp"
#include "hlguide/model.hpp"
#include "hlguide/retrieval.hpp"
#include "hlguide/tokenizer.hpp"
#include "hlguide/uncertainty.hpp"

namespace hlguide {

enum class ItemStatus { pending, annotated, regenerated, delivered };

inline std::string_view to_string(ItemStatus s) {
  switch (s) {
    case ItemStatus::pending: return "pending";
    case ItemStatus::annotated: return "annotated";
    case ItemStatus::regenerated: return "regenerated";
    case ItemStatus::delivered: return "delivered";
  }
  return "?";
}

inline ItemStatus parse_item_status(const std::string& s) {
  if (s == "pending") return ItemStatus::pending;
  if (s == "annotated") return ItemStatus::annotated;
  if (s == "regenerated") return ItemStatus::regenerated;
  if (s == "delivered") return ItemStatus::delivered;
  throw ValidationError("unknown item status '" + s + "'");
}

inline bool transition_allowed(ItemStatus from, ItemStatus to) {
  switch (from) {
    case ItemStatus::pending: return to == ItemStatus::annotated || to == ItemStatus::delivered;
    case ItemStatus::annotated: return to == ItemStatus::regenerated;
    case ItemStatus::regenerated: return to == ItemStatus::delivered;
    case ItemStatus::delivered: return false;
  }
  return false;
}

/// Image side of a question: a corpus record id (its embeddings become the
/// retrieval query) and/or inline query embeddings, plus optional visual
/// prefix vectors fed to the model.
struct VisualRef {
  std::optional<std::string> corpus_id;
  std::optional<Vector> image_embedding;
  std::optional<Vector> text_embedding;
  std::vector<Vector> prefix;
  bool operator==(const VisualRef&) const = default;
};

inline void to_json(nlohmann::json& j, const VisualRef& v) {
  j = nlohmann::json::object();
  if (v.corpus_id) j["corpus_id"] = *v.corpus_id;
  if (v.image_embedding) j["image_embedding"] = *v.image_embedding;
  if (v.text_embedding) j["text_embedding"] = *v.text_embedding;
  if (!v.prefix.empty()) j["prefix"] = v.prefix;
}

inline void from_json(const nlohmann::json& j, VisualRef& v) {
  v = VisualRef{};
  if (j.is_null()) return;
  if (j.is_string()) {
    v.corpus_id = j.get<std::string>();
    return;
  }
  if (j.contains("corpus_id")) v.corpus_id = j.at("corpus_id").get<std::string>();
  if (j.contains("image_embedding")) v.image_embedding = j.at("image_embedding").get<Vector>();
  if (j.contains("text_embedding")) v.text_embedding = j.at("text_embedding").get<Vector>();
  if (j.contains("prefix")) v.prefix = j.at("prefix").get<std::vector<Vector>>();
}

struct TokenProb {
  TokenId id = 0;
  std::string surface;
  double prob = 0.0;
  bool operator==(const TokenProb&) const = default;
};

inline void to_json(nlohmann::json& j, const TokenProb& t) {
  j = nlohmann::json{{"id", t.id}, {"surface", t.surface}, {"prob", t.prob}};
}
inline void from_json(const nlohmann::json& j, TokenProb& t) {
  t.id = j.at("id").get<TokenId>();
  t.surface = j.at("surface").get<std::string>();
  t.prob = j.at("prob").get<double>();
}

struct Reference {
  std::string id;
  double similarity = 0.0;
  std::string matched;
  std::string caption;
  std::vector<std::string> keywords;
  bool relevant = true;  // similarity at or above the advisory CLIP-score threshold
  bool operator==(const Reference&) const = default;
};

inline void to_json(nlohmann::json& j, const Reference& r) {
  j = nlohmann::json{{"id", r.id},           {"similarity", r.similarity}, {"matched", r.matched},
                     {"caption", r.caption}, {"keywords", r.keywords},     {"relevant", r.relevant}};
}
inline void from_json(const nlohmann::json& j, Reference& r) {
  r.id = j.at("id").get<std::string>();
  r.similarity = j.at("similarity").get<double>();
  r.matched = j.at("matched").get<std::string>();
  r.caption = j.at("caption").get<std::string>();
  r.keywords = j.at("keywords").get<std::vector<std::string>>();
  r.relevant = j.at("relevant").get<bool>();
}

/// Tokens of the regeneration prompt with their highlight bits.
struct MaskPreview {
  std::vector<std::string> tokens;
  std::vector<int> bits;
  std::size_t reference_offset = 0;
  bool operator==(const MaskPreview&) const = default;
};

inline void to_json(nlohmann::json& j, const MaskPreview& m) {
  j = nlohmann::json{{"tokens", m.tokens}, {"bits", m.bits}, {"reference_offset", m.reference_offset}};
}
inline void from_json(const nlohmann::json& j, MaskPreview& m) {
  m.tokens = j.at("tokens").get<std::vector<std::string>>();
  m.bits = j.at("bits").get<std::vector<int>>();
  m.reference_offset = j.at("reference_offset").get<std::size_t>();
}

struct ReviewItem {
  std::string id;
  std::string question;
  VisualRef visual_ref;
  std::string model_id;
  std::string answer;
  std::vector<TokenProb> answer_tokens;
  EntropyReport entropy;
  std::string policy;
  Verdict verdict = Verdict::deliver;
  std::vector<Reference> references;
  ItemStatus status = ItemStatus::pending;
  std::optional<ExpertAnnotation> annotation;
  std::optional<MaskPreview> mask_preview;
  std::optional<GuidanceConfig> guidance;
  std::optional<std::string> regenerated_answer;
  std::vector<TokenProb> regenerated_tokens;
  std::vector<std::string> warnings;
  std::string created_at;
  std::string updated_at;
};

inline void to_json(nlohmann::json& j, const ReviewItem& it) {
  j = nlohmann::json{{"id", it.id},
                     {"question", it.question},
                     {"visual_ref", it.visual_ref},
                     {"model_id", it.model_id},
                     {"answer", it.answer},
                     {"answer_tokens", it.answer_tokens},
                     {"entropy", it.entropy},
                     {"policy", it.policy},
                     {"verdict", to_string(it.verdict)},
                     {"references", it.references},
                     {"status", to_string(it.status)},
                     {"annotation", nullptr},
                     {"mask_preview", nullptr},
                     {"guidance", nullptr},
                     {"regenerated_answer", nullptr},
                     {"regenerated_tokens", it.regenerated_tokens},
                     {"warnings", it.warnings},
                     {"created_at", it.created_at},
                     {"updated_at", it.updated_at}};
  if (it.annotation) j["annotation"] = *it.annotation;
  if (it.mask_preview) j["mask_preview"] = *it.mask_preview;
  if (it.guidance) j["guidance"] = *it.guidance;
  if (it.regenerated_answer) j["regenerated_answer"] = *it.regenerated_answer;
}

inline void from_json(const nlohmann::json& j, ReviewItem& it) {
  it = ReviewItem{};
  it.id = j.at("id").get<std::string>();
  it.question = j.at("question").get<std::string>();
  it.visual_ref = j.at("visual_ref").get<VisualRef>();
  it.model_id = j.at("model_id").get<std::string>();
  it.answer = j.at("answer").get<std::string>();
  it.answer_tokens = j.at("answer_tokens").get<std::vector<TokenProb>>();
  it.entropy = j.at("entropy").get<EntropyReport>();
  it.policy = j.at("policy").get<std::string>();
  it.verdict = j.at("verdict").get<std::string>() == "review" ? Verdict::review : Verdict::deliver;
  it.references = j.at("references").get<std::vector<Reference>>();
  it.status = parse_item_status(j.at("status").get<std::string>());
  if (!j.at("annotation").is_null()) it.annotation = j.at("annotation").get<ExpertAnnotation>();
  if (!j.at("mask_preview").is_null()) it.mask_preview = j.at("mask_preview").get<MaskPreview>();
  if (!j.at("guidance").is_null()) it.guidance = j.at("guidance").get<GuidanceConfig>();
  if (!j.at("regenerated_answer").is_null()) it.regenerated_answer = j.at("regenerated_answer").get<std::string>();
  it.regenerated_tokens = j.at("regenerated_tokens").get<std::vector<TokenProb>>();
  it.warnings = j.at("warnings").get<std::vector<std::string>>();
  it.created_at = j.at("created_at").get<std::string>();
  it.updated_at = j.at("updated_at").get<std::string>();
}

/// Short listing entry.
inline nlohmann::json item_summary(const ReviewItem& it) {
  return nlohmann::json{{"id", it.id},
                        {"question", it.question},
                        {"entropy", it.entropy.normalized_pe},
                        {"status", to_string(it.status)},
                        {"answer", it.answer}};
}

struct Event {
  std::uint64_t seq = 0;
  std::string type;  // created | annotated | regenerated | delivered
  std::string item_id;
  std::string at;
  nlohmann::json payload;
};

inline void to_json(nlohmann::json& j, const Event& e) {
  j = nlohmann::json{{"seq", e.seq}, {"type", e.type}, {"item_id", e.item_id}, {"at", e.at}, {"payload", e.payload}};
}
inline void from_json(const nlohmann::json& j, Event& e) {
  e.seq = j.at("seq").get<std::uint64_t>();
  e.type = j.at("type").get<std::string>();
  e.item_id = j.at("item_id").get<std::string>();
  e.at = j.at("at").get<std::string>();
  e.payload = j.at("payload");
}

/// Item table rebuilt from events. Items are keyed by id.
class SessionStore {
 public:
  void apply(const Event& e) {
    if (e.seq != last_seq_ + 1) {
      throw ValidationError("event log: expected seq " + std::to_string(last_seq_ + 1) + ", got " +
                            std::to_string(e.seq));
    }
    if (e.type == "created") {
      ReviewItem it = e.payload.get<ReviewItem>();
      if (it.id != e.item_id) throw ValidationError("event log: created event id mismatch for " + e.item_id);
      if (items_.count(it.id)) throw ValidationError("event log: item created twice: " + it.id);
      items_.emplace(it.id, std::move(it));
    } else {
      auto found = items_.find(e.item_id);
      if (found == items_.end()) throw ValidationError("event log: event for unknown item " + e.item_id);
      ReviewItem& it = found->second;
      const ItemStatus to = parse_item_status(e.payload.at("status").get<std::string>());
      if (!transition_allowed(it.status, to)) {
        throw ValidationError("event log: illegal transition " + std::string(to_string(it.status)) + " -> " +
                              std::string(to_string(to)) + " for " + it.id);
      }
      if (e.type == "annotated") {
        it.annotation = e.payload.at("annotation").get<ExpertAnnotation>();
        it.mask_preview = e.payload.at("mask_preview").get<MaskPreview>();
        for (const auto& w : e.payload.at("warnings")) it.warnings.push_back(w.get<std::string>());
      } else if (e.type == "regenerated") {
        it.guidance = e.payload.at("guidance").get<GuidanceConfig>();
        it.regenerated_answer = e.payload.at("regenerated_answer").get<std::string>();
        it.regenerated_tokens = e.payload.at("regenerated_tokens").get<std::vector<TokenProb>>();
      } else if (e.type != "delivered") {
        throw ValidationError("event log: unknown event type '" + e.type + "'");
      }
      it.status = to;
      it.updated_at = e.at;
    }
    last_seq_ = e.seq;
  }

  const std::map<std::string, ReviewItem>& items() const { return items_; }
  std::uint64_t last_seq() const { return last_seq_; }

  /// All items as one JSON object keyed by id.
  nlohmann::json snapshot() const {
    nlohmann::json j = nlohmann::json::object();
    for (const auto& [id, it] : items_) j[id] = it;
    return j;
  }

 private:
  std::map<std::string, ReviewItem> items_;
  std::uint64_t last_seq_ = 0;
};

/// Rebuilds a store from a JSONL event log or an export archive (header and
/// blank lines are skipped).
inline SessionStore replay(std::istream& in) {
  SessionStore store;
  std::string line;
  while (std::getline(in, line)) {
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const auto j = nlohmann::json::parse(line);
    if (j.contains("format")) continue;
    store.apply(j.get<Event>());
  }
  return store;
}

inline SessionStore replay_string(const std::string& log) {
  std::istringstream in(log);
  return replay(in);
}

inline std::string utc_now_iso8601() {
  const auto now = std::chrono::system_clock::now();
  const std::time_t t = std::chrono::system_clock::to_time_t(now);
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

struct ServiceConfig {
  GatePolicy policy = GatePolicy::top_percent(5.0);
  std::size_t k = 4;
  Strategy strategy = Strategy::union_;
  double clip_threshold = 0.6;
  std::size_t max_len = 16;
  GuidanceConfig guidance;
  std::size_t workers = 2;
  bool expose_initial_answer = true;
  std::filesystem::path data_dir;   // empty: in-memory only
  std::size_t snapshot_every = 100;  // events between snapshot writes
  std::function<std::string()> clock = utc_now_iso8601;
};

struct AnswerRequest {
  std::string question;
  VisualRef visual_ref;
  std::string model_id = "default";
};

inline void from_json(const nlohmann::json& j, AnswerRequest& r) {
  if (!j.contains("question") || !j.at("question").is_string()) throw ValidationError("answer: 'question' is required");
  r.question = j.at("question").get<std::string>();
  if (r.question.find_first_not_of(" \t\r\n") == std::string::npos) throw ValidationError("answer: empty question");
  r.visual_ref = j.contains("visual_ref") ? j.at("visual_ref").get<VisualRef>() : VisualRef{};
  r.model_id = j.value("model_id", std::string("default"));
}

class ReviewService {
 public:
  explicit ReviewService(ServiceConfig cfg) : cfg_(std::move(cfg)), slots_(static_cast<std::ptrdiff_t>(std::max<std::size_t>(cfg_.workers, 1))) {
    cfg_.guidance.validate();
    require(cfg_.k >= 1, "service: k must be >= 1");
    require(cfg_.max_len >= 1, "service: max_len must be >= 1");
    if (!cfg_.data_dir.empty()) open_log();
  }

  ReviewService(const ReviewService&) = delete;
  ReviewService& operator=(const ReviewService&) = delete;

  const ServiceConfig& config() const { return cfg_; }

  void add_model(const std::string& id, std::shared_ptr<const GuidableModel> model) {
    require(model != nullptr, "service: null model");
    std::unique_lock lock(mu_);
    models_[id] = std::move(model);
  }

  void set_corpus(std::shared_ptr<const KnowledgeStore> corpus) {
    std::unique_lock lock(mu_);
    corpus_ = std::move(corpus);
  }

  ReviewItem answer(const AnswerRequest& req) { return answer_batch({req}).front(); }

  /// Decodes every request, gates over the batch with the configured policy
  /// and records one item per request in input order.
  std::vector<ReviewItem> answer_batch(const std::vector<AnswerRequest>& reqs) {
    require(!reqs.empty(), "answer: empty batch");
    std::vector<std::shared_ptr<const GuidableModel>> models;
    std::shared_ptr<const KnowledgeStore> corpus;
    {
      std::shared_lock lock(mu_);
      for (const auto& r : reqs) {
        const auto it = models_.find(r.model_id);
        if (it == models_.end()) throw NotFound("unknown model id '" + r.model_id + "'");
        models.push_back(it->second);
      }
      corpus = corpus_;
    }
    for (const auto& r : reqs) {
      if (r.visual_ref.corpus_id) {
        if (!corpus || !corpus->find(*r.visual_ref.corpus_id)) {
          throw NotFound("unknown corpus id '" + *r.visual_ref.corpus_id + "'");
        }
      }
    }

    struct Decoded {
      DecodeResult result;
      EntropyReport entropy;
      std::string answer;
    };
    std::vector<Decoded> decoded(reqs.size());
    parallel_for(reqs.size(), [&](std::size_t i) {
      const auto& model = *models[i];
      const TokenSequence prompt = question_prompt(model, reqs[i]);
      Decoded d;
      d.result = greedy_decode(model, prompt, cfg_.max_len);
      d.entropy = predictive_entropy(d.result.steps, d.result.output);
      d.answer = detokenize(d.result.output, model.vocab().eos_id());
      decoded[i] = std::move(d);
    });

    std::vector<EntropyReport> reports;
    for (const auto& d : decoded) reports.push_back(d.entropy);
    const auto decisions = gate(reports, cfg_.policy);

    std::vector<ReviewItem> out;
    for (std::size_t i = 0; i < reqs.size(); ++i) {
      ReviewItem it;
      it.question = reqs[i].question;
      it.visual_ref = reqs[i].visual_ref;
      it.model_id = reqs[i].model_id;
      it.answer = decoded[i].answer;
      const auto& out_tokens = decoded[i].result.output;
      for (std::size_t s = 0; s < out_tokens.size(); ++s) {
        const auto& t = out_tokens.tokens[s];
        it.answer_tokens.push_back({t.id, t.surface, decoded[i].result.steps[s].prob(t.id)});
      }
      it.entropy = decoded[i].entropy;
      it.policy = cfg_.policy.to_string();
      it.verdict = decisions[i].verdict;
      if (decisions[i].verdict == Verdict::review) {
        it.status = ItemStatus::pending;
        if (corpus) attach_references(it, *corpus);
      } else {
        it.status = ItemStatus::delivered;
      }
      std::lock_guard log_lock(log_mu_);
      it.id = next_id_locked();
      it.created_at = it.updated_at = cfg_.clock();
      Event e{next_seq_locked(), "created", it.id, it.created_at, it};
      commit_locked(e, [&] {
        std::unique_lock lock(mu_);
        item_mu_.emplace(it.id, std::make_unique<std::mutex>());
      });
      out.push_back(std::move(it));
    }
    return out;
  }

  ReviewItem submit_annotation(const std::string& item_id, ExpertAnnotation annotation) {
    auto guard = lock_item(item_id);
    ReviewItem it = get(item_id);
    if (it.status != ItemStatus::pending) {
      throw Conflict("item " + item_id + " is " + std::string(to_string(it.status)) + ", annotation needs pending");
    }
    annotation.validate();
    annotation.spans = merge_spans(std::move(annotation.spans));
    const auto& model = model_for(it);
    const auto prompt = regeneration_prompt(model, it, annotation.reference_text);
    const HighlightMask mask = mask_from_spans(annotation.reference_text, annotation.spans, prompt.tokens,
                                               prompt.reference_offset);
    MaskPreview preview;
    preview.reference_offset = prompt.reference_offset;
    for (std::size_t i = 0; i < prompt.tokens.size(); ++i) {
      preview.tokens.push_back(prompt.tokens.tokens[i].surface);
      preview.bits.push_back(mask.bits[i]);
    }
    std::vector<std::string> warnings;
    if (annotation.spans.empty()) warnings.emplace_back("no guidance signal: annotation has no highlighted spans");
    if (annotation.timestamp.empty()) annotation.timestamp = cfg_.clock();
    nlohmann::json payload = {{"status", "annotated"},
                              {"annotation", annotation},
                              {"mask_preview", preview},
                              {"warnings", warnings}};
    return mutate(item_id, "annotated", std::move(payload));
  }

  ReviewItem regenerate(const std::string& item_id, const GuidanceConfig& cfg) {
    cfg.validate();
    auto guard = lock_item(item_id);
    ReviewItem it = get(item_id);
    if (it.status != ItemStatus::annotated) {
      throw Conflict("item " + item_id + " is " + std::string(to_string(it.status)) + ", regeneration needs annotated");
    }
    const auto& model = model_for(it);
    const auto prompt = regeneration_prompt(model, it, it.annotation->reference_text);
    const HighlightMask mask = mask_from_spans(it.annotation->reference_text, it.annotation->spans, prompt.tokens,
                                               prompt.reference_offset);
    GuidedDecodeResult r;
    {
      slots_.acquire();
      struct Release {
        std::counting_semaphore<>& s;
        ~Release() { s.release(); }
      } release{slots_};
      r = guided_decode(model, prompt.tokens, mask, cfg, cfg_.max_len);
    }
    std::vector<TokenProb> tokens;
    for (const auto& s : r.steps) tokens.push_back({s.chosen.id, s.chosen.surface, s.chosen_prob});
    nlohmann::json payload = {{"status", "regenerated"},
                              {"guidance", cfg},
                              {"regenerated_answer", detokenize(r.output, model.vocab().eos_id())},
                              {"regenerated_tokens", tokens}};
    return mutate(item_id, "regenerated", std::move(payload));
  }

  ReviewItem deliver(const std::string& item_id) {
    auto guard = lock_item(item_id);
    const ReviewItem it = get(item_id);
    if (!transition_allowed(it.status, ItemStatus::delivered)) {
      throw Conflict("item " + item_id + " is " + std::string(to_string(it.status)) + " and cannot be delivered");
    }
    return mutate(item_id, "delivered", {{"status", "delivered"}});
  }

  ReviewItem get(const std::string& item_id) const {
    std::shared_lock lock(mu_);
    const auto it = store_.items().find(item_id);
    if (it == store_.items().end()) throw NotFound("item not found: " + item_id);
    return it->second;
  }

  /// Items ordered by entropy descending, then id; optional status filter.
  std::vector<ReviewItem> list_items(std::optional<ItemStatus> status, std::size_t page = 0,
                                     std::size_t page_size = 50) const {
    require(page_size >= 1, "list: page_size must be >= 1");
    std::vector<ReviewItem> all;
    {
      std::shared_lock lock(mu_);
      for (const auto& [id, it] : store_.items()) {
        if (!status || it.status == *status) all.push_back(it);
      }
    }
    std::sort(all.begin(), all.end(), [](const ReviewItem& a, const ReviewItem& b) {
      if (a.entropy.normalized_pe != b.entropy.normalized_pe) return a.entropy.normalized_pe > b.entropy.normalized_pe;
      return a.id < b.id;
    });
    const std::size_t begin = std::min(all.size(), page * page_size);
    const std::size_t end = std::min(all.size(), begin + page_size);
    return {all.begin() + static_cast<std::ptrdiff_t>(begin), all.begin() + static_cast<std::ptrdiff_t>(end)};
  }

  nlohmann::json snapshot() const {
    std::shared_lock lock(mu_);
    return store_.snapshot();
  }

  std::vector<Event> events(std::uint64_t from_seq = 1, std::uint64_t to_seq = UINT64_MAX) const {
    std::lock_guard lock(log_mu_);
    std::vector<Event> out;
    for (const auto& e : events_) {
      if (e.seq >= from_seq && e.seq <= to_seq) out.push_back(e);
    }
    return out;
  }

  nlohmann::json metrics() const {
    std::shared_lock lock(mu_);
    std::map<std::string, std::size_t> by_status = {{"pending", 0}, {"annotated", 0}, {"regenerated", 0}, {"delivered", 0}};
    double pe_sum = 0.0;
    std::size_t reviewed = 0, regenerations = 0, changed = 0;
    nlohmann::json configs = nlohmann::json::array();
    for (const auto& [id, it] : store_.items()) {
      ++by_status[std::string(to_string(it.status))];
      pe_sum += it.entropy.normalized_pe;
      if (it.verdict == Verdict::review) ++reviewed;
      if (it.regenerated_answer) {
        ++regenerations;
        if (*it.regenerated_answer != it.answer) ++changed;
        configs.push_back({{"item_id", id}, {"guidance", *it.guidance}});
      }
    }
    const std::size_t n = store_.items().size();
    return {{"items", n},
            {"by_status", by_status},
            {"sent_to_review", reviewed},
            {"mean_normalized_pe", n ? pe_sum / static_cast<double>(n) : 0.0},
            {"regenerations", regenerations},
            {"answers_changed", changed},
            {"guidance_used", configs}};
  }

  /// Header line (with metrics) followed by the events in [from_seq, to_seq].
  std::string export_session(std::uint64_t from_seq = 1, std::uint64_t to_seq = UINT64_MAX) const {
    const auto evs = events(from_seq, to_seq);
    nlohmann::json header = {{"format", "hlguide-session"}, {"version", 1}, {"events", evs.size()}, {"metrics", metrics()}};
    if (!evs.empty()) header["range"] = {evs.front().seq, evs.back().seq};
    std::string out = header.dump() + "\n";
    for (const auto& e : evs) out += nlohmann::json(e).dump() + "\n";
    return out;
  }

  /// Writes snapshot.json into the data directory.
  void write_snapshot() const {
    if (cfg_.data_dir.empty()) return;
    const nlohmann::json j = {{"last_seq", last_seq()}, {"items", snapshot()}};
    const auto tmp = cfg_.data_dir / "snapshot.json.tmp";
    {
      std::ofstream out(tmp);
      if (!out) throw Error("cannot write " + tmp.string());
      out << j.dump(1) << "\n";
    }
    std::filesystem::rename(tmp, cfg_.data_dir / "snapshot.json");
  }

  std::uint64_t last_seq() const {
    std::shared_lock lock(mu_);
    return store_.last_seq();
  }

 private:
  const GuidableModel& model_for(const ReviewItem& it) const {
    std::shared_lock lock(mu_);
    const auto m = models_.find(it.model_id);
    if (m == models_.end()) throw NotFound("unknown model id '" + it.model_id + "'");
    return *m->second;
  }

  TokenSequence question_prompt(const GuidableModel& model, const AnswerRequest& r) const {
    TokenSequence text = tokenize(model.vocab(), r.question);
    if (r.visual_ref.prefix.empty()) return text;
    return TokenSequence::with_visual_prefix(r.visual_ref.prefix, text, model.vocab().unk_id());
  }

  struct RegenPrompt {
    TokenSequence tokens;
    std::size_t reference_offset = 0;
  };

  RegenPrompt regeneration_prompt(const GuidableModel& model, const ReviewItem& it,
                                  const std::string& reference) const {
    const std::string text = it.question + "\n" + reference;
    RegenPrompt p;
    p.reference_offset = it.question.size() + 1;
    TokenSequence seq = tokenize(model.vocab(), text);
    p.tokens = it.visual_ref.prefix.empty()
                   ? std::move(seq)
                   : TokenSequence::with_visual_prefix(it.visual_ref.prefix, seq, model.vocab().unk_id());
    return p;
  }

  void attach_references(ReviewItem& it, const KnowledgeStore& corpus) const {
    std::optional<Vector> img = it.visual_ref.image_embedding;
    std::optional<Vector> txt = it.visual_ref.text_embedding;
    if (it.visual_ref.corpus_id) {
      const auto& rec = corpus.at(*it.visual_ref.corpus_id);
      if (!img) img = rec.image_embedding;
      if (!txt) txt = rec.text_embedding;
    }
    if (!img && !txt) {
      it.warnings.emplace_back("no query embedding: references not retrieved");
      return;
    }
    Strategy s = cfg_.strategy;
    const bool has_img = img.has_value(), has_txt = txt.has_value();
    if ((s == Strategy::sum || s == Strategy::union_) && !(has_img && has_txt)) s = has_img ? Strategy::image : Strategy::text;
    if (s == Strategy::image && !has_img) s = Strategy::text;
    if (s == Strategy::text && !has_txt) s = Strategy::image;
    if (s != cfg_.strategy) {
      it.warnings.push_back("retrieval strategy " + std::string(to_string(cfg_.strategy)) + " fell back to " +
                            std::string(to_string(s)));
    }
    const auto q = QueryEmbedding::make(img, txt);
    for (const auto& r : corpus.knn(q, cfg_.k, s)) {
      const auto& rec = corpus.at(r.id);
      it.references.push_back(
          {r.id, r.similarity, std::string(to_string(r.matched)), rec.caption, rec.keywords, r.similarity >= cfg_.clip_threshold});
    }
  }

  std::unique_lock<std::mutex> lock_item(const std::string& id) {
    std::mutex* m = nullptr;
    {
      std::shared_lock lock(mu_);
      const auto it = item_mu_.find(id);
      if (it == item_mu_.end()) throw NotFound("item not found: " + id);
      m = it->second.get();
    }
    return std::unique_lock<std::mutex>(*m);
  }

  ReviewItem mutate(const std::string& item_id, const std::string& type, nlohmann::json payload) {
    std::lock_guard log_lock(log_mu_);
    Event e{next_seq_locked(), type, item_id, cfg_.clock(), std::move(payload)};
    commit_locked(e, [] {});
    return get(item_id);
  }

  /// Applies the event to the store, then appends it to memory and disk.
  template <class After>
  void commit_locked(const Event& e, After after) {
    {
      std::unique_lock lock(mu_);
      store_.apply(e);
    }
    after();
    events_.push_back(e);
    if (log_) {
      (*log_) << nlohmann::json(e).dump() << "\n";
      log_->flush();
      if (!*log_) throw Error("failed to append to " + (cfg_.data_dir / "events.jsonl").string());
      if (cfg_.snapshot_every && e.seq % cfg_.snapshot_every == 0) write_snapshot();
    }
  }

  std::uint64_t next_seq_locked() const {
    std::shared_lock lock(mu_);
    return store_.last_seq() + 1;
  }

  std::string next_id_locked() {
    char buf[32];
    std::snprintf(buf, sizeof buf, "item-%06llu", static_cast<unsigned long long>(++id_counter_));
    return buf;
  }

  void open_log() {
    std::filesystem::create_directories(cfg_.data_dir);
    const auto path = cfg_.data_dir / "events.jsonl";
    if (std::filesystem::exists(path)) {
      std::ifstream in(path);
      std::string line;
      while (std::getline(in, line)) {
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        Event e = nlohmann::json::parse(line).get<Event>();
        store_.apply(e);
        events_.push_back(std::move(e));
      }
      for (const auto& [id, it] : store_.items()) {
        item_mu_.emplace(id, std::make_unique<std::mutex>());
        unsigned long long n = 0;
        if (std::sscanf(id.c_str(), "item-%llu", &n) == 1) id_counter_ = std::max<std::uint64_t>(id_counter_, n);
      }
    }
    log_ = std::make_unique<std::ofstream>(path, std::ios::app);
    if (!*log_) throw Error("cannot open event log " + path.string());
  }

  template <class F>
  void parallel_for(std::size_t n, F f) {
    std::atomic<std::size_t> next{0};
    std::exception_ptr error;
    std::mutex error_mu;
    auto work = [&] {
      for (;;) {
        const std::size_t i = next++;
        if (i >= n) return;
        slots_.acquire();
        try {
          f(i);
        } catch (...) {
          std::lock_guard lock(error_mu);
          if (!error) error = std::current_exception();
        }
        slots_.release();
      }
    };
    const std::size_t threads = std::min(n, std::max<std::size_t>(cfg_.workers, 1));
    if (threads <= 1) {
      work();
    } else {
      std::vector<std::jthread> pool;
      for (std::size_t t = 0; t < threads; ++t) pool.emplace_back(work);
    }
    if (error) std::rethrow_exception(error);
  }

  ServiceConfig cfg_;
  std::counting_semaphore<> slots_;
  mutable std::shared_mutex mu_;  // models_, corpus_, store_, item_mu_
  std::map<std::string, std::shared_ptr<const GuidableModel>> models_;
  std::shared_ptr<const KnowledgeStore> corpus_;
  SessionStore store_;
  std::map<std::string, std::unique_ptr<std::mutex>> item_mu_;
  mutable std::mutex log_mu_;  // events_, log_, id_counter_, sequencing
  std::vector<Event> events_;
  std::unique_ptr<std::ofstream> log_;
  std::uint64_t id_counter_ = 0;
};

}  // namespace hlguide
