#pragma once

// Synthetic wrong-prior / right-evidence question suite on a OneLayerToy.
//
// Embedding dims: 0 is "done", then two answer dims per item (wrong, right).
// Attention scores are all zero, so unbiased attention is uniform over the
// context. For a hard item the two question topic tokens carry strength a on
// the wrong dim and the reference caption contains the right answer token
// with strength b = 2 * a * r on the right dim, r < 1. Plain decoding picks
// the wrong answer; up-weighting the highlighted answer token by beta and
// subtracting the unconditional branch recovers it. Answer tokens also set
// the done dim, whose residual readout makes EOS follow the answer.
// Easy items put a large strength on the right dim in the question itself.

#include <algorithm>
#include <memory>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "hlguide/annotation.hpp"
#include "hlguide/evaluation.hpp"
#include "hlguide/models.hpp"
#include "hlguide/one_layer_toy.hpp"
#include "hlguide/retrieval.hpp"
#include "hlguide/rng.hpp"
#include "hlguide/tokenizer.hpp"

namespace hlguide {

struct ScenarioParams {
  std::size_t items = 100;
  double hard_fraction = 1.0;
  double ratio_lo = 0.28;  // r = b / (2a) for hard items
  double ratio_hi = 0.95;
  double topic_lo = 1.5;  // a for hard items
  double topic_hi = 4.0;
  double easy_strength = 30.0;
  double eos_weight = 30.0;
  std::size_t retrieval_dim = 16;
  double query_noise = 0.15;
  double disagree_fraction = 0.2;  // queries whose text embedding points at another record
  std::size_t distractor_records = 0;
  std::uint64_t seed = 1;
};

inline void to_json(nlohmann::json& j, const ScenarioParams& p) {
  j = nlohmann::json{{"items", p.items},
                     {"hard_fraction", p.hard_fraction},
                     {"ratio_lo", p.ratio_lo},
                     {"ratio_hi", p.ratio_hi},
                     {"topic_lo", p.topic_lo},
                     {"topic_hi", p.topic_hi},
                     {"easy_strength", p.easy_strength},
                     {"eos_weight", p.eos_weight},
                     {"retrieval_dim", p.retrieval_dim},
                     {"query_noise", p.query_noise},
                     {"disagree_fraction", p.disagree_fraction},
                     {"distractor_records", p.distractor_records},
                     {"seed", p.seed}};
}

inline void from_json(const nlohmann::json& j, ScenarioParams& p) {
  const ScenarioParams d;
  p.items = j.value("items", d.items);
  p.hard_fraction = j.value("hard_fraction", d.hard_fraction);
  p.ratio_lo = j.value("ratio_lo", d.ratio_lo);
  p.ratio_hi = j.value("ratio_hi", d.ratio_hi);
  p.topic_lo = j.value("topic_lo", d.topic_lo);
  p.topic_hi = j.value("topic_hi", d.topic_hi);
  p.easy_strength = j.value("easy_strength", d.easy_strength);
  p.eos_weight = j.value("eos_weight", d.eos_weight);
  p.retrieval_dim = j.value("retrieval_dim", d.retrieval_dim);
  p.query_noise = j.value("query_noise", d.query_noise);
  p.disagree_fraction = j.value("disagree_fraction", d.disagree_fraction);
  p.distractor_records = j.value("distractor_records", d.distractor_records);
  p.seed = j.value("seed", d.seed);
}

struct Scenario {
  std::string id;  // also the id of its knowledge record
  std::string question;
  std::string reference;
  std::string right_answer;
  std::string wrong_answer;
  QuestionType type = QuestionType::open;
  bool hard = true;
  double ratio = 0.0;
  Vector query_image;
  Vector query_text;
};

struct ScenarioSuite {
  std::shared_ptr<OneLayerToy> model;
  std::vector<Scenario> items;
  std::vector<KnowledgeRecord> corpus;
};

namespace detail {

inline std::string pseudo_word(Rng& rng, std::set<std::string>& used) {
  static constexpr std::string_view kCons = "bdfgklmnprstvz";
  static constexpr std::string_view kVow = "aeiou";
  for (;;) {
    std::string w;
    for (int s = 0; s < 3; ++s) {
      w.push_back(kCons[rng.below(kCons.size())]);
      w.push_back(kVow[rng.below(kVow.size())]);
    }
    if (used.insert(w).second) return w;
  }
}

inline Vector random_unit(Rng& rng, std::size_t dim) {
  Vector v(dim);
  for (auto& x : v) x = rng.normal();
  return *l2_normalized(v);
}

inline Vector jitter(const Vector& v, Rng& rng, double sigma) {
  Vector out = v;
  for (auto& x : out) x += sigma * rng.normal();
  return out;
}

}  // namespace detail

inline ScenarioSuite make_scenario_suite(const ScenarioParams& p) {
  require(p.items >= 1, "scenarios: need at least one item");
  require(p.ratio_lo > 0.0 && p.ratio_lo <= p.ratio_hi && p.ratio_hi < 1.0, "scenarios: need 0 < ratio_lo <= ratio_hi < 1");
  require(p.topic_lo > 0.0 && p.topic_lo <= p.topic_hi, "scenarios: need 0 < topic_lo <= topic_hi");
  require(p.retrieval_dim >= 2, "scenarios: retrieval_dim must be >= 2");
  Rng rng(p.seed);

  const Vocabulary base = default_vocabulary();
  std::set<std::string> used(base.tokens().begin(), base.tokens().end());
  std::vector<std::string> fillers;
  for (int i = 0; i < 24; ++i) fillers.push_back(detail::pseudo_word(rng, used));

  struct Words {
    std::string t1, t2, right, wrong;
  };
  std::vector<Words> words(p.items);
  for (auto& w : words) {
    w.t1 = detail::pseudo_word(rng, used);
    w.t2 = detail::pseudo_word(rng, used);
    w.right = detail::pseudo_word(rng, used);
    w.wrong = detail::pseudo_word(rng, used);
  }

  std::vector<std::string> extra = fillers;
  for (const auto& w : words) extra.insert(extra.end(), {w.t1, w.t2, w.right, w.wrong});
  std::vector<std::string> all(base.tokens().begin(), base.tokens().end());
  all.insert(all.end(), extra.begin(), extra.end());
  Vocabulary vocab(all);

  const std::size_t dim = 1 + 2 * p.items;
  auto model = std::make_shared<OneLayerToy>(vocab, dim);
  model->set_score_scale(0.0);
  auto unit = [&](std::size_t d, double s) {
    Vector v(dim, 0.0);
    v[d] = s;
    return v;
  };
  model->set_residual_readout(vocab.eos_id(), unit(0, p.eos_weight));

  ScenarioSuite suite;
  const std::size_t n_hard = static_cast<std::size_t>(std::llround(p.hard_fraction * static_cast<double>(p.items)));
  for (std::size_t i = 0; i < p.items; ++i) {
    const Words& w = words[i];
    const std::size_t d_wrong = 1 + 2 * i;
    const std::size_t d_right = 2 + 2 * i;
    Scenario s;
    s.id = "case-" + std::to_string(i + 1);
    // spread hard items evenly through the suite
    s.hard = (i * n_hard) / p.items != ((i + 1) * n_hard) / p.items;
    s.type = i % 3 == 2 ? QuestionType::closed : QuestionType::open;
    s.right_answer = w.right;
    s.wrong_answer = w.wrong;
    s.question = "what is the " + w.t1 + " " + w.t2 + " ?";
    const std::string& f1 = fillers[rng.below(fillers.size())];
    const std::string& f2 = fillers[rng.below(fillers.size())];
    const std::string& f3 = fillers[rng.below(fillers.size())];
    s.reference = f1 + " " + f2 + " shows " + w.right + " near the " + f3 + " .";

    const double a = rng.uniform(p.topic_lo, p.topic_hi);
    s.ratio = rng.uniform(p.ratio_lo, p.ratio_hi);
    double b = 2.0 * a * s.ratio;
    if (s.hard) {
      model->set_embedding(vocab.id(w.t1), unit(d_wrong, a));
      model->set_embedding(vocab.id(w.t2), unit(d_wrong, a));
    } else {
      model->set_embedding(vocab.id(w.t1), unit(d_right, p.easy_strength));
      model->set_embedding(vocab.id(w.t2), unit(d_right, p.easy_strength));
    }
    Vector right_emb = unit(d_right, b);
    right_emb[0] = 1.0;
    Vector wrong_emb = unit(d_wrong, 1.0);
    wrong_emb[0] = 1.0;
    model->set_embedding(vocab.id(w.right), right_emb);
    model->set_embedding(vocab.id(w.wrong), wrong_emb);
    model->set_readout(vocab.id(w.right), unit(d_right, 1.0));
    model->set_readout(vocab.id(w.wrong), unit(d_wrong, 1.0));

    KnowledgeRecord rec;
    rec.id = s.id;
    rec.caption = s.reference;
    rec.keywords = {w.right, f3};
    rec.image_embedding = detail::random_unit(rng, p.retrieval_dim);
    rec.text_embedding = detail::random_unit(rng, p.retrieval_dim);
    rec.modality = Modality::radiology;
    suite.corpus.push_back(std::move(rec));
    suite.items.push_back(std::move(s));
  }
  for (std::size_t i = 0; i < p.distractor_records; ++i) {
    KnowledgeRecord rec;
    rec.id = "extra-" + std::to_string(i + 1);
    rec.caption = fillers[rng.below(fillers.size())] + " " + fillers[rng.below(fillers.size())] + " .";
    rec.image_embedding = detail::random_unit(rng, p.retrieval_dim);
    rec.text_embedding = detail::random_unit(rng, p.retrieval_dim);
    rec.modality = Modality::other;
    suite.corpus.push_back(std::move(rec));
  }
  for (std::size_t i = 0; i < p.items; ++i) {
    auto& s = suite.items[i];
    const auto& rec = suite.corpus[i];
    s.query_image = detail::jitter(*rec.image_embedding, rng, p.query_noise);
    std::size_t text_src = i;
    if (p.items > 1 && rng.bernoulli(p.disagree_fraction)) text_src = (i + 1 + rng.below(p.items - 1)) % p.items;
    s.query_text = detail::jitter(*suite.corpus[text_src].text_embedding, rng, p.query_noise);
  }
  suite.model = std::move(model);
  return suite;
}

/// Regeneration prompt: question, newline, reference. Returns the tokenized
/// prompt and the byte offset of the reference inside it.
struct GuidedPrompt {
  std::string text;
  std::size_t reference_offset = 0;
  TokenSequence tokens;
};

inline GuidedPrompt make_guided_prompt(const Vocabulary& vocab, const std::string& question,
                                       const std::string& reference) {
  GuidedPrompt g;
  g.text = question + "\n" + reference;
  g.reference_offset = question.size() + 1;
  g.tokens = tokenize(vocab, g.text);
  return g;
}

/// Highlight mask over the reference of a scenario, using the keyword rule
/// with the ground-truth answer.
inline HighlightMask scenario_mask(const Scenario& s, const KnowledgeRecord& rec, const GuidedPrompt& g) {
  const auto spans = auto_highlight(rec.keywords, s.question, s.reference, s.right_answer);
  return mask_from_spans(s.reference, spans, g.tokens, g.reference_offset);
}

}  // namespace hlguide
