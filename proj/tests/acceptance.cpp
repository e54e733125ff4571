// Acceptance runner: one PASS/FAIL line per criterion, nonzero exit on any FAIL.
//
//   acceptance --cli <path to hlguide_cli> --work <scratch dir>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "hlguide/hlguide.hpp"
#include "knn_oracle.hpp"
#include "service_fixture.hpp"
#include "support.hpp"

namespace fs = std::filesystem;
namespace ts = hlguide::test_support;
using namespace hlguide;

namespace {

struct Outcome {
  bool pass = true;
  std::string detail;
};

// Records the first failure only; later checks still run.
struct Check {
  Outcome& o;
  void operator()(bool ok, const std::string& what) {
    if (!ok && o.pass) {
      o.pass = false;
      o.detail = what;
    }
  }
};

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::string sci(double v, int prec = 2) {
  std::ostringstream s;
  s.precision(prec);
  s << std::scientific << v;
  return s.str();
}

std::string fmt(double v, int prec = 3) {
  std::ostringstream s;
  s.precision(prec);
  s << std::fixed << v;
  return s.str();
}

// --- 1 ---------------------------------------------------------------------------

Outcome gamma_one_reduction() {
  Outcome o;
  Check check{o};
  const auto t0 = std::chrono::steady_clock::now();
  Rng rng(101);
  const int cases = 1000;
  for (int i = 0; i < cases; ++i) {
    const auto model = ts::random_model(rng);
    const auto prompt = ts::random_prompt(model->vocab(), rng);
    const auto mask = ts::random_mask(prompt.size(), rng);
    const auto cfg = GuidanceConfig::make(rng.uniform(), 1.0 + 5.0 * rng.uniform(), 1.0, 5.0 * rng.uniform());
    const auto g = guided_decode(*model, prompt, mask, cfg, 6);
    const auto c = cond_branch_decode(*model, prompt, mask, cfg.beta, 6);
    check(g.output.ids() == c.output.ids(), "case " + std::to_string(i) + " differs from the cond branch");
  }
  const double secs = seconds_since(t0);
  check(secs < 30.0, "took " + fmt(secs) + " s");
  if (o.pass) o.detail = std::to_string(cases) + " cases identical in " + fmt(secs) + " s";
  return o;
}

// --- 2 ---------------------------------------------------------------------------

Outcome neutral_knobs() {
  Outcome o;
  Check check{o};
  Rng rng(202);
  const int cases = 500;
  double worst = 0.0;
  for (int i = 0; i < cases; ++i) {
    const auto model = ts::random_model(rng);
    const auto prompt = ts::random_prompt(model->vocab(), rng);
    const auto mask = ts::random_mask(prompt.size(), rng);
    const auto cfg = GuidanceConfig::make(1.0, 1.0, 1.0 + rng.uniform(), 0.0);
    const auto g = guided_decode(*model, prompt, mask, cfg, 6);
    const auto plain = greedy_decode(*model, prompt, 6);
    check(g.output.ids() == plain.output.ids(), "case " + std::to_string(i) + " differs from plain greedy");
    for (const auto& s : g.steps) {
      for (std::size_t v = 0; v < s.cond.size(); ++v) worst = std::max(worst, std::abs(s.cond.logits[v] - s.uncond.logits[v]));
    }
  }
  check(worst <= 1e-9, "cond/uncond logit gap " + sci(worst));
  if (o.pass) o.detail = std::to_string(cases) + " cases, max cond/uncond gap " + sci(worst);
  return o;
}

// --- 3 ---------------------------------------------------------------------------

Outcome empty_mask() {
  Outcome o;
  Check check{o};
  Rng rng(303);
  const auto cells = GuidanceGrid{}.cells();
  int cases = 0;
  for (const auto& cfg : cells) {
    for (int i = 0; i < 20; ++i, ++cases) {
      const auto model = ts::random_model(rng);
      const auto prompt = ts::random_prompt(model->vocab(), rng);
      const auto g = guided_decode(*model, prompt, HighlightMask::zeros(prompt.size()), cfg, 6);
      check(g.output.ids() == greedy_decode(*model, prompt, 6).output.ids(),
            "cell (" + fmt(cfg.alpha, 2) + ", " + fmt(cfg.beta, 1) + ", " + fmt(cfg.gamma, 1) + ") differs");
    }
  }
  if (o.pass) o.detail = std::to_string(cells.size()) + " grid cells x 20 prompts identical";
  return o;
}

// --- 4 ---------------------------------------------------------------------------

Outcome attention_closed_form() {
  Outcome o;
  Check check{o};
  Rng rng(404);
  double worst = 0.0;
  for (const double beta : {1.0, 3.0, 5.0}) {
    for (int trial = 0; trial < 1000; ++trial) {
      OneLayerToy toy(Vocabulary::with_reserved({"a"}), 2);
      const std::size_t n = 1 + rng.below(12);
      Vector e(n);
      for (auto& x : e) x = 3.0 * rng.normal();
      const HighlightMask m = ts::random_mask(n, rng);
      toy.set_fixed_scores(e);
      toy.set_embedding(toy.vocab().id("a"), {rng.normal(), rng.normal()});
      TokenSequence seq;
      for (std::size_t i = 0; i < n; ++i) seq.push(Token{toy.vocab().id("a"), "a"}, Role::prompt);
      const auto p = toy.attention(build_context(toy, seq), cond_attention_bias(m, beta)).p.front();
      double z = 0.0;
      for (std::size_t j = 0; j < n; ++j) z += std::pow(beta, m.bits[j]) * std::exp(e[j]);
      for (std::size_t j = 0; j < n; ++j) worst = std::max(worst, std::abs(p[j] - std::pow(beta, m.bits[j]) * std::exp(e[j]) / z));
    }
  }
  check(worst <= 1e-12, "max deviation " + sci(worst));
  if (o.pass) o.detail = "3 x 1000 cases, max deviation " + sci(worst);
  return o;
}

// --- 5 ---------------------------------------------------------------------------

Outcome entropy_oracle() {
  Outcome o;
  Check check{o};
  Rng rng(505);
  double worst = 0.0;
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t v = 2 + rng.below(60);
    const std::size_t n = 1 + rng.below(8);
    std::vector<StepDistribution> steps;
    double total = 0.0;
    for (std::size_t s = 0; s < n; ++s) {
      Vector logits(v);
      const double spread = 6.0 * rng.uniform();
      for (auto& x : logits) x = spread * rng.normal();
      steps.push_back(StepDistribution::from_logits(logits));
      double h = 0.0;
      for (const double p : steps.back().probabilities) h += p > 0.0 ? -p * std::log(p) : 0.0;
      total += h;
    }
    const auto r = predictive_entropy(steps);
    worst = std::max(worst, std::abs(r.pe - total / static_cast<double>(n)));
    check(r.normalized_pe >= 0.0 && r.normalized_pe <= 1.0, "normalized PE out of range");
  }
  check(worst <= 1e-10, "max deviation " + sci(worst));
  for (const std::size_t v : {2u, 3u, 7u, 10u, 64u, 100u, 1000u}) {
    const std::vector<StepDistribution> uniform(3, StepDistribution::from_logits(Vector(v, 0.0)));
    check(predictive_entropy(uniform).normalized_pe == 1.0, "uniform over " + std::to_string(v) + " is not exactly 1");
  }
  if (o.pass) o.detail = "1000 sets, max deviation " + sci(worst) + ", uniform = 1.0";
  return o;
}

// --- 6 ---------------------------------------------------------------------------

Outcome auc_oracle() {
  Outcome o;
  Check check{o};
  Rng rng(606);
  double worst = 0.0;
  for (int draw = 0; draw < 100; ++draw) {
    const std::size_t n = 2 + rng.below(999);
    std::vector<ScoredSample> s(n);
    const bool coarse = rng.bernoulli(0.5);  // coarse scores give many ties
    for (std::size_t i = 0; i < n; ++i) {
      s[i].confidence = coarse ? std::round(10.0 * rng.uniform()) / 10.0 : rng.uniform();
      s[i].correct = rng.bernoulli(0.3 + 0.4 * s[i].confidence);
    }
    s[0].correct = true;
    s[1].correct = false;
    double num = 0.0, den = 0.0;
    for (const auto& c : s) {
      if (!c.correct) continue;
      for (const auto& w : s) {
        if (w.correct) continue;
        den += 1.0;
        num += c.confidence > w.confidence ? 1.0 : c.confidence == w.confidence ? 0.5 : 0.0;
      }
    }
    worst = std::max(worst, std::abs(roc_auc(s) - num / den));
  }
  check(worst <= 1e-12, "max deviation " + sci(worst));
  // Two bins: {0.2, 0.2} with accuracy 0 and {0.9, 0.9} with accuracy 0.5.
  // The weighted gaps 0.1 + 0.2 are summed in double arithmetic, which lands
  // one ulp above the literal 0.3.
  const std::vector<ScoredSample> hand{{0.9, true}, {0.9, false}, {0.2, false}, {0.2, false}};
  const double by_hand = (2.0 / 4.0) * std::abs(0.0 - 0.2) + (2.0 / 4.0) * std::abs(0.5 - 0.9);
  const double e = ece(hand, 2);
  check(e == by_hand, "two-bin ECE " + sci(e) + ", hand value " + sci(by_hand));
  check(std::abs(e - 0.3) <= std::nextafter(0.3, 1.0) - 0.3, "two-bin ECE is not 0.3");
  if (o.pass) o.detail = "100 draws, max deviation " + sci(worst) + ", two-bin ECE " + sci(e, 17);
  return o;
}

// --- 7 ---------------------------------------------------------------------------

Outcome knn_oracle() {
  Outcome o;
  Check check{o};
  Rng rng(707);
  const std::size_t n = 10000, d = 24;
  auto gauss = [&] {
    Vector v(d);
    for (auto& x : v) x = rng.normal();
    return v;
  };
  std::vector<KnowledgeRecord> corpus;
  for (std::size_t i = 0; i < n; ++i) {
    KnowledgeRecord r;
    r.id = "r" + std::to_string(i);
    const auto pick = rng.below(6);
    if (pick != 0) r.image_embedding = gauss();
    if (pick != 1) r.text_embedding = gauss();
    corpus.push_back(std::move(r));
  }
  const auto store = KnowledgeStore::ingest(corpus);
  int compared = 0;
  for (int q = 0; q < 10; ++q) {
    const Vector qi = gauss(), qt = gauss();
    const auto query = QueryEmbedding::make(qi, qt);
    for (const auto s : {Strategy::image, Strategy::text, Strategy::sum, Strategy::union_}) {
      for (const std::size_t k : {1u, 5u, 20u}) {
        const auto got = store.knn(query, k, s);
        const auto want = ts::oracle_knn(corpus, qi, qt, k, s);
        check(got.size() == want.size(), "result size differs");
        for (std::size_t i = 0; i < std::min(got.size(), want.size()); ++i) {
          check(got[i].id == want[i].id, std::string(to_string(s)) + " rank " + std::to_string(i) + " differs");
        }
        ++compared;
      }
    }
    const auto img = store.knn(query, n, Strategy::image);
    const auto txt = store.knn(query, n, Strategy::text);
    const auto uni = store.knn(query, n, Strategy::union_);
    std::map<std::string, double> best;
    for (const auto& h : img) best[h.id] = h.similarity;
    for (const auto& h : txt) {
      const auto it = best.find(h.id);
      best[h.id] = it == best.end() ? h.similarity : std::max(it->second, h.similarity);
    }
    check(uni.size() == best.size(), "union covers a different record set");
    for (const auto& h : uni) check(best.count(h.id) && h.similarity == best.at(h.id), "union similarity is not the max");
  }
  if (o.pass) o.detail = std::to_string(compared) + " rankings over 10000 records match, union = max";
  return o;
}

// --- 8 ---------------------------------------------------------------------------

Outcome steering() {
  Outcome o;
  Check check{o};
  const auto t0 = std::chrono::steady_clock::now();
  ScenarioParams p;
  p.items = 100;
  p.hard_fraction = 1.0;
  p.seed = 808;
  const auto suite = make_scenario_suite(p);
  const auto& model = *suite.model;
  const auto& vocab = model.vocab();
  int plain_wrong = 0, guided_ok = 0, gamma_one_ok = 0;
  for (std::size_t i = 0; i < suite.items.size(); ++i) {
    const auto& s = suite.items[i];
    const auto g = make_guided_prompt(vocab, s.question, s.reference);
    const auto mask = scenario_mask(s, suite.corpus[i], g);
    const auto plain_q = detokenize(greedy_decode(model, tokenize(vocab, s.question), 16).output, vocab.eos_id());
    const auto plain_ref = detokenize(greedy_decode(model, g.tokens, 16).output, vocab.eos_id());
    if (plain_q != s.right_answer && plain_ref != s.right_answer) ++plain_wrong;
    const auto guided = detokenize(guided_decode(model, g.tokens, mask, GuidanceConfig::make(0.01, 3.0, 1.3), 16).output,
                                   vocab.eos_id());
    const auto gamma_one = detokenize(guided_decode(model, g.tokens, mask, GuidanceConfig::make(0.01, 3.0, 1.0), 16).output,
                                      vocab.eos_id());
    guided_ok += guided == s.right_answer;
    gamma_one_ok += gamma_one == s.right_answer;
  }
  const double secs = seconds_since(t0);
  check(plain_wrong == 100, "plain greedy right on " + std::to_string(100 - plain_wrong) + " items");
  check(guided_ok >= 95, "guided correct on " + std::to_string(guided_ok));
  check(gamma_one_ok < guided_ok, "gamma 1.0 correct on " + std::to_string(gamma_one_ok));
  check(secs < 120.0, "took " + fmt(secs) + " s");
  if (o.pass) {
    o.detail = "plain 0/100, guided " + std::to_string(guided_ok) + "/100, gamma 1.0 " + std::to_string(gamma_one_ok) +
               "/100 in " + fmt(secs) + " s";
  }
  return o;
}

// --- 9 ---------------------------------------------------------------------------

Outcome gating(const fs::path& work) {
  Outcome o;
  Check check{o};
  ScenarioParams p;
  p.items = 200;
  p.hard_fraction = 0.5;
  p.seed = 909;
  const auto suite = make_scenario_suite(p);
  const auto corpus = std::make_shared<KnowledgeStore>(KnowledgeStore::ingest(suite.corpus));
  Dataset ds;
  for (const auto& s : suite.items) {
    QaRow r;
    r.id = s.id;
    r.question = s.question;
    r.answer = s.right_answer;
    r.type = s.type;
    r.visual_ref.image_embedding = s.query_image;
    r.visual_ref.text_embedding = s.query_text;
    ds.rows.push_back(std::move(r));
  }
  RunManifest m;
  m.policy = GatePolicy::top_percent(5.0);
  m.label_samples = 2;
  const auto run = run_eval(m, suite.model, corpus, ds);
  const auto rv = review_set(run.items, m.policy);
  const auto flagged = std::count(rv.begin(), rv.end(), true);
  check(flagged == 10, "flagged " + std::to_string(flagged));

  // stable sort oracle: highest entropy first, earlier item first on ties
  std::vector<std::size_t> order(run.items.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return run.items[a].entropy.normalized_pe > run.items[b].entropy.normalized_pe;
  });
  for (std::size_t r = 0; r < order.size(); ++r) check(rv[order[r]] == (r < 10), "flagged set differs from the sort oracle");
  double min_flag = 2.0, max_rest = -1.0;
  for (std::size_t i = 0; i < rv.size(); ++i) {
    const double e = run.items[i].entropy.normalized_pe;
    if (rv[i]) min_flag = std::min(min_flag, e);
    else max_rest = std::max(max_rest, e);
  }
  check(min_flag >= max_rest, "a flagged item has lower entropy than an unflagged one");

  const fs::path dir = work / "gating";
  fs::remove_all(dir);
  write_eval_outputs(run, dir);
  std::ifstream in(dir / "accuracy_vs_threshold.csv");
  std::string line;
  std::getline(in, line);
  check(line == "threshold,flagged,expert_cfg,expert_rag", "unexpected CSV header " + line);
  double prev_tau = 2.0, prev_acc = -1.0;
  long prev_flagged = -1;
  int rows = 0;
  while (std::getline(in, line)) {
    double tau = 0, acc = 0, rag = 0;
    long fl = 0;
    if (std::sscanf(line.c_str(), "%lf,%ld,%lf,%lf", &tau, &fl, &acc, &rag) != 4) {
      check(false, "bad CSV row " + line);
      break;
    }
    check(tau < prev_tau, "thresholds not descending");
    check(fl >= prev_flagged, "flagged count decreased at threshold " + fmt(tau, 2));
    check(acc >= prev_acc, "accuracy decreased at threshold " + fmt(tau, 2));
    prev_tau = tau;
    prev_flagged = fl;
    prev_acc = acc;
    ++rows;
  }
  check(rows == 21, "expected 21 sweep rows, got " + std::to_string(rows));
  check(prev_flagged == 200, "threshold 0 flags " + std::to_string(prev_flagged));
  if (o.pass) o.detail = "10 of 200 flagged, sweep of " + std::to_string(rows) + " thresholds monotone";
  return o;
}

// --- 10 --------------------------------------------------------------------------

Outcome service_loop() {
  Outcome o;
  Check check{o};
  ScenarioParams p;
  p.items = 50;
  p.hard_fraction = 0.6;
  p.seed = 1010;
  ServiceConfig cfg;
  cfg.policy = GatePolicy::top_percent(20.0);
  ts::ScenarioService s(p, cfg);
  std::vector<AnswerRequest> reqs;
  for (std::size_t i = 0; i < 50; ++i) reqs.push_back(s.request(i));
  const auto items = s.service->answer_batch(reqs);

  std::vector<EntropyReport> reports;
  for (const auto& it : items) reports.push_back(it.entropy);
  const auto decisions = gate(reports, cfg.policy);
  std::set<std::string> want, pending;
  for (std::size_t i = 0; i < items.size(); ++i) {
    if (decisions[i].verdict == Verdict::review) want.insert(items[i].id);
  }
  for (const auto& it : s.service->list_items(ItemStatus::pending, 0, 1000)) pending.insert(it.id);
  check(pending == want && want.size() == 10, "pending set differs from gate()");

  auto expect_conflict = [&](const std::function<void()>& f, const std::string& what) {
    try {
      f();
      check(false, what + " was accepted");
    } catch (const Conflict&) {
    }
  };
  int regenerated = 0, fixed = 0;
  for (const auto& id : pending) {
    auto it = s.service->get(id);
    const auto& sc = s.scenario_of(it);
    expect_conflict([&] { s.service->regenerate(id, GuidanceConfig{}); }, "regenerate from pending");
    it = s.service->submit_annotation(id, s.annotation_for(sc));
    check(it.status == ItemStatus::annotated, "annotate did not move to annotated");
    expect_conflict([&] { s.service->deliver(id); }, "deliver from annotated");
    expect_conflict([&] { s.service->submit_annotation(id, s.annotation_for(sc)); }, "second annotation");
    it = s.service->regenerate(id, GuidanceConfig{});
    check(it.status == ItemStatus::regenerated, "regenerate did not move to regenerated");
    ++regenerated;
    fixed += it.regenerated_answer == sc.right_answer;
    it = s.service->deliver(id);
    check(it.status == ItemStatus::delivered, "deliver did not move to delivered");
    expect_conflict([&] { s.service->deliver(id); }, "second delivery");
  }
  for (const auto& it : items) {
    if (!want.count(it.id)) check(it.status == ItemStatus::delivered, "bypassed item not delivered");
  }

  const std::string log = s.service->export_session();
  const auto replayed = replay_string(log).snapshot();
  const auto live = s.service->snapshot();
  check(replayed.size() == live.size(), "replay item count differs");
  for (auto it = live.begin(); it != live.end(); ++it) {
    check(replayed.contains(it.key()) && replayed.at(it.key()) == it.value(), "replayed item " + it.key() + " differs");
  }
  if (o.pass) {
    o.detail = "10/50 pending = gate set, " + std::to_string(regenerated) + " regenerated (" + std::to_string(fixed) +
               " fixed), replay matches " + std::to_string(live.size()) + " items";
  }
  return o;
}

// --- 11 --------------------------------------------------------------------------

std::string quote(const fs::path& p) { return "'" + p.string() + "'"; }

std::map<std::string, std::string> read_tree(const fs::path& root) {
  std::map<std::string, std::string> out;
  for (const auto& e : fs::recursive_directory_iterator(root)) {
    const auto rel = fs::relative(e.path(), root).generic_string();
    if (e.is_directory()) {
      out[rel + "/"] = "";
      continue;
    }
    std::ifstream in(e.path(), std::ios::binary);
    out[rel] = std::string(std::istreambuf_iterator<char>(in), {});
  }
  return out;
}

Outcome determinism(const fs::path& cli, const fs::path& work) {
  Outcome o;
  Check check{o};
  const fs::path dir = work / "determinism";
  fs::remove_all(dir);
  fs::create_directories(dir);
  const std::string quiet = " > " + quote(dir / "log.txt") + " 2>&1";
  auto run = [&](const std::string& args) { return std::system((quote(cli) + " " + args + quiet).c_str()); };
  check(run("synth --out " + quote(dir / "suite") + " --items 60 --hard-fraction 0.5 --distractors 20 --seed 11") == 0,
        "synth failed");
  const auto manifest = quote(dir / "suite" / "manifest.json");
  for (const char* name : {"run1", "run2"}) {
    const auto out = quote(dir / name);
    check(run("eval --config " + manifest + " --seed 3 --workers 2 --out " + out) == 0, "eval failed");
    check(run("ablate --config " + manifest + " --seed 3 --workers 2 --grid 0,0.01:1,3:1,1.3 --out " + out) == 0,
          "ablate failed");
  }
  if (!o.pass) return o;
  const auto a = read_tree(dir / "run1");
  const auto b = read_tree(dir / "run2");
  check(!a.empty(), "no outputs written");
  check(a.size() == b.size(), "output trees list different files");
  for (const auto& [name, bytes] : a) {
    const auto it = b.find(name);
    check(it != b.end() && it->second == bytes, name + " differs between runs");
  }
  if (o.pass) o.detail = std::to_string(a.size()) + " files byte-identical across two runs";
  return o;
}

}  // namespace

int main(int argc, char** argv) {
  fs::path cli, work = fs::temp_directory_path() / "hlguide_acceptance";
  for (int i = 1; i + 1 < argc; i += 2) {
    const std::string flag = argv[i];
    if (flag == "--cli") cli = argv[i + 1];
    else if (flag == "--work") work = argv[i + 1];
    else {
      std::cerr << "unknown flag " << flag << "\n";
      return 2;
    }
  }
  fs::create_directories(work);

  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria = {
      {"gamma-one reduction", gamma_one_reduction},
      {"neutral-knob identity", neutral_knobs},
      {"empty-mask identity", empty_mask},
      {"biased attention closed form", attention_closed_form},
      {"entropy oracle", entropy_oracle},
      {"AUC and ECE oracle", auc_oracle},
      {"kNN oracle", knn_oracle},
      {"steering efficacy", steering},
      {"gating", [&] { return gating(work); }},
      {"service loop", service_loop},
      {"determinism", [&] {
         if (cli.empty()) return Outcome{false, "no --cli given"};
         return determinism(cli, work);
       }},
  };
  int failed = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    failed += !o.pass;
    std::cout << (o.pass ? "PASS" : "FAIL") << " " << (i + 1) << " " << criteria[i].first << ": " << o.detail << std::endl;
  }
  std::cout << (failed ? std::to_string(failed) + " criteria failed" : std::string("all criteria passed")) << std::endl;
  return failed ? 1 : 0;
}
