#include <algorithm>
#include <cmath>
#include <fstream>
#include <random>

#include <gtest/gtest.h>
#include <zlib.h>

#include "hlguide/retrieval.hpp"
#include "hlguide/rng.hpp"
#include "knn_oracle.hpp"
#include "support.hpp"

namespace ts = hlguide::test_support;
using namespace hlguide;

namespace {

KnowledgeRecord rec(std::string id, std::optional<Vector> img, std::optional<Vector> txt, std::string caption = "") {
  KnowledgeRecord r;
  r.id = std::move(id);
  r.caption = std::move(caption);
  r.image_embedding = std::move(img);
  r.text_embedding = std::move(txt);
  return r;
}

Vector gauss(Rng& rng, std::size_t d) {
  Vector v(d);
  for (auto& x : v) x = rng.normal();
  return v;
}

std::vector<KnowledgeRecord> random_corpus(Rng& rng, std::size_t n, std::size_t d) {
  std::vector<KnowledgeRecord> out;
  for (std::size_t i = 0; i < n; ++i) {
    const auto pick = rng.below(5);
    std::optional<Vector> img, txt;
    if (pick != 0) img = gauss(rng, d);
    if (pick != 1) txt = gauss(rng, d);
    out.push_back(rec("r" + std::to_string(i), img, txt, "caption " + std::to_string(i)));
  }
  return out;
}

}  // namespace

TEST(Ingest, EmptyStream) {
  const auto s = KnowledgeStore::ingest({});
  EXPECT_EQ(s.size(), 0u);
  EXPECT_TRUE(s.knn(QueryEmbedding::make(Vector{1.0}, std::nullopt), 3, Strategy::image).empty());
}

TEST(Ingest, RejectsDuplicatesListingIds) {
  try {
    KnowledgeStore::ingest({rec("a", Vector{1, 0}, {}), rec("b", Vector{0, 1}, {}), rec("a", Vector{1, 1}, {}),
                            rec("b", Vector{1, 2}, {})});
    FAIL() << "expected rejection";
  } catch (const ValidationError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find(" a"), std::string::npos);
    EXPECT_NE(msg.find(" b"), std::string::npos);
  }
}

TEST(Ingest, RejectsZeroAndMismatchedEmbeddings) {
  EXPECT_THROW(KnowledgeStore::ingest({rec("z", Vector{0, 0}, {})}), ValidationError);
  EXPECT_THROW(KnowledgeStore::ingest({rec("z", {}, {})}), ValidationError);
  EXPECT_THROW(KnowledgeStore::ingest({rec("a", Vector{1, 0}, {}), rec("b", Vector{1, 0, 0}, {})}), ValidationError);
}

TEST(Ingest, SelfRetrievalAtRankOne) {
  const auto s = KnowledgeStore::ingest({rec("a", Vector{1, 0, 0}, Vector{0, 1, 0}),
                                         rec("b", Vector{0, 1, 0}, Vector{0, 0, 1}),
                                         rec("c", Vector{0, 0, 1}, Vector{1, 0, 0})});
  EXPECT_EQ(s.size(), 3u);
  for (const auto& r : s.records()) {
    const auto hits = s.knn(QueryEmbedding::make(r.image_embedding, std::nullopt), 1, Strategy::image);
    ASSERT_EQ(hits.size(), 1u);
    EXPECT_EQ(hits[0].id, r.id);
  }
  const auto t = s.knn(QueryEmbedding::make(std::nullopt, Vector{0, 0, 5}), 1, Strategy::text);
  EXPECT_EQ(t[0].id, "b");
  EXPECT_NEAR(t[0].similarity, 1.0, 1e-15);
  EXPECT_EQ(s.at("c").caption, "");
  EXPECT_THROW(s.at("nope"), NotFound);
}

TEST(Knn, UnionTakesPerRecordMax) {
  const double b2 = std::sqrt(1.0 - 0.81);
  const auto s = KnowledgeStore::ingest({rec("A", Vector{0.8, 0.6}, Vector{0.0, 1.0}),
                                         rec("B", Vector{0.0, 1.0}, Vector{0.9, b2})});
  const auto q = QueryEmbedding::make(Vector{1.0, 0.0}, Vector{1.0, 0.0});
  const auto hits = s.knn(q, 1, Strategy::union_);
  ASSERT_EQ(hits.size(), 1u);
  EXPECT_EQ(hits[0].id, "B");
  EXPECT_NEAR(hits[0].similarity, 0.9, 1e-12);
  EXPECT_EQ(hits[0].matched, MatchedFeature::union_text);
  const auto both = s.knn(q, 2, Strategy::union_);
  EXPECT_EQ(both[1].matched, MatchedFeature::union_image);
}

TEST(Knn, SumHandComputed) {
  const auto s = KnowledgeStore::ingest({rec("R1", Vector{1, 0}, Vector{1, 0}), rec("R2", Vector{1, 0}, Vector{0, 1}),
                                         rec("R3", Vector{0, 1}, Vector{-1, 0})});
  const auto hits = s.knn(QueryEmbedding::make(Vector{1, 0}, Vector{0, 1}), 2, Strategy::sum);
  ASSERT_EQ(hits.size(), 2u);
  EXPECT_EQ(hits[0].id, "R2");
  EXPECT_NEAR(hits[0].similarity, 1.0, 1e-12);
  EXPECT_EQ(hits[1].id, "R1");
  EXPECT_NEAR(hits[1].similarity, std::sqrt(0.5), 1e-12);
}

TEST(Knn, MissingQueryEmbeddingIsContractViolation) {
  const auto s = KnowledgeStore::ingest({rec("a", Vector{1, 0}, Vector{0, 1})});
  const auto img_only = QueryEmbedding::make(Vector{1, 0}, std::nullopt);
  EXPECT_THROW(s.knn(img_only, 1, Strategy::text), ContractViolation);
  EXPECT_THROW(s.knn(img_only, 1, Strategy::sum), ContractViolation);
  EXPECT_THROW(s.knn(img_only, 1, Strategy::union_), ContractViolation);
  EXPECT_THROW(s.knn(img_only, 0, Strategy::image), ContractViolation);
  EXPECT_THROW(QueryEmbedding::make(std::nullopt, std::nullopt), ContractViolation);
  EXPECT_THROW(QueryEmbedding::make(Vector{0, 0}, std::nullopt), ContractViolation);
}

TEST(Knn, TiesBreakById) {
  const auto s = KnowledgeStore::ingest({rec("b", Vector{1, 0}, {}), rec("a", Vector{2, 0}, {}),
                                         rec("c", Vector{0, 1}, {})});
  const auto hits = s.knn(QueryEmbedding::make(Vector{1, 0}, std::nullopt), 3, Strategy::image);
  EXPECT_EQ(hits[0].id, "a");
  EXPECT_EQ(hits[1].id, "b");
  EXPECT_EQ(hits[2].id, "c");
}

TEST(Knn, MatchesLinearScanOracle) {
  Rng rng(77);
  const auto corpus = random_corpus(rng, 800, 12);
  const auto store = KnowledgeStore::ingest(corpus);
  for (int q = 0; q < 20; ++q) {
    const Vector qi = gauss(rng, 12), qt = gauss(rng, 12);
    const auto query = QueryEmbedding::make(qi, qt);
    for (const auto strategy : {Strategy::image, Strategy::text, Strategy::sum, Strategy::union_}) {
      const std::size_t k = 1 + rng.below(20);
      const auto got = store.knn(query, k, strategy);
      const auto want = ts::oracle_knn(corpus, qi, qt, k, strategy);
      ASSERT_EQ(got.size(), want.size());
      for (std::size_t i = 0; i < got.size(); ++i) {
        EXPECT_EQ(got[i].id, want[i].id);
        EXPECT_NEAR(got[i].similarity, want[i].similarity, 1e-12);
      }
    }
  }
}

TEST(Knn, UnionIsMaxOfSingleFeatures) {
  Rng rng(78);
  const auto store = KnowledgeStore::ingest(random_corpus(rng, 200, 6));
  const auto query = QueryEmbedding::make(gauss(rng, 6), gauss(rng, 6));
  const auto img = store.knn(query, 1000, Strategy::image);
  const auto txt = store.knn(query, 1000, Strategy::text);
  const auto uni = store.knn(query, 1000, Strategy::union_);
  std::map<std::string, double> best;
  for (const auto& h : img) best[h.id] = h.similarity;
  for (const auto& h : txt) best[h.id] = best.count(h.id) ? std::max(best[h.id], h.similarity) : h.similarity;
  ASSERT_EQ(uni.size(), best.size());
  for (const auto& h : uni) EXPECT_EQ(h.similarity, best.at(h.id));
}

TEST(Knn, IngestOrderDoesNotMatter) {
  Rng rng(79);
  auto corpus = random_corpus(rng, 300, 8);
  const auto a = KnowledgeStore::ingest(corpus);
  std::mt19937 shuffler(3);
  std::shuffle(corpus.begin(), corpus.end(), shuffler);
  const auto b = KnowledgeStore::ingest(corpus);
  const auto q = QueryEmbedding::make(gauss(rng, 8), gauss(rng, 8));
  for (const auto strategy : {Strategy::image, Strategy::text, Strategy::sum, Strategy::union_}) {
    EXPECT_EQ(a.knn(q, 15, strategy), b.knn(q, 15, strategy));
  }
}

TEST(ClipFilter, Threshold) {
  const std::vector<RetrievalResult> r{{"a", 0.9, MatchedFeature::image}, {"b", 0.55, MatchedFeature::image},
                                       {"c", 0.7, MatchedFeature::image}};
  const auto kept = clip_score_filter(r, 0.6);
  ASSERT_EQ(kept.size(), 2u);
  EXPECT_EQ(kept[0].id, "a");
  EXPECT_EQ(kept[1].id, "c");
  EXPECT_EQ(clip_score_filter(r, -1.0), r);
  EXPECT_THROW(clip_score_filter(r, 1.5), ContractViolation);
}

TEST(Store, SaveLoadRoundTrip) {
  Rng rng(80);
  const auto store = KnowledgeStore::ingest(random_corpus(rng, 120, 5));
  const auto dir = ts::fresh_dir("store");
  store.save(dir / "idx");
  const auto loaded = KnowledgeStore::load(dir / "idx");
  EXPECT_EQ(loaded.size(), store.size());
  const auto q = QueryEmbedding::make(gauss(rng, 5), gauss(rng, 5));
  for (const auto strategy : {Strategy::image, Strategy::text, Strategy::sum, Strategy::union_}) {
    EXPECT_EQ(loaded.knn(q, 10, strategy), store.knn(q, 10, strategy));
  }
  EXPECT_EQ(loaded.at("r7").caption, "caption 7");
}

TEST(Corpus, ReadsGzipAndReportsBadLines) {
  const auto dir = ts::fresh_dir("corpus");
  const std::string body =
      "{\"id\":\"a\",\"caption\":\"free air\",\"image_embedding\":[1,0]}\n"
      "\n"
      "{broken\n"
      "{\"id\":\"b\",\"text_embedding\":[0,1],\"keywords\":[\"lung\"],\"modality\":\"radiology\"}\n";
  std::ofstream(dir / "plain.jsonl") << body;
  gzFile gz = gzopen((dir / "c.jsonl.gz").string().c_str(), "wb");
  gzwrite(gz, body.data(), static_cast<unsigned>(body.size()));
  gzclose(gz);
  for (const auto* name : {"plain.jsonl", "c.jsonl.gz"}) {
    const auto r = read_corpus_jsonl(dir / name);
    ASSERT_EQ(r.records.size(), 2u);
    EXPECT_EQ(r.records[1].keywords, std::vector<std::string>{"lung"});
    EXPECT_EQ(r.records[1].modality, Modality::radiology);
    ASSERT_EQ(r.errors.size(), 1u);
    EXPECT_EQ(r.errors[0].rfind("line 3:", 0), 0u);
  }
  EXPECT_THROW(read_corpus_jsonl(dir / "missing.jsonl"), NotFound);
}

TEST(Record, JsonRoundTrip) {
  auto r = rec("x", Vector{1, 2}, std::nullopt, "cap");
  r.keywords = {"k"};
  const nlohmann::json j = r;
  EXPECT_FALSE(j.contains("text_embedding"));
  const auto back = j.get<KnowledgeRecord>();
  EXPECT_EQ(back.id, "x");
  EXPECT_EQ(*back.image_embedding, (Vector{1, 2}));
  EXPECT_FALSE(back.text_embedding.has_value());
  EXPECT_EQ(parse_strategy("union"), Strategy::union_);
  EXPECT_ANY_THROW(parse_strategy("avg"));
}
