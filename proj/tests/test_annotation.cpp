#include <fstream>
#include <sstream>
#include <thread>

#include <gtest/gtest.h>
#include <httplib.h>

#include "hlguide/annotation.hpp"
#include "hlguide/llm_client.hpp"
#include "hlguide/models.hpp"
#include "support.hpp"

namespace ts = hlguide::test_support;
using namespace hlguide;

namespace {

void write_canned(const std::filesystem::path& dir, LlmTask task, const std::string& input,
                  const nlohmann::json& response) {
  std::ofstream(dir / (llm_request_key(task, input) + ".json")) << nlohmann::json{{"response", response}}.dump();
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// Fails with a retriable error a fixed number of times, then answers.
class FlakyTransport final : public LlmTransport {
 public:
  FlakyTransport(int failures, std::string reply) : failures_(failures), reply_(std::move(reply)) {}
  std::string complete(LlmTask, const std::string&, const std::string& prompt) override {
    last_prompt = prompt;
    if (failures_-- > 0) throw RetriableError("temporarily down");
    return reply_;
  }
  std::string last_prompt;

 private:
  int failures_;
  std::string reply_;
};

LlmClientConfig fast_config() {
  LlmClientConfig c;
  c.retry_backoff = std::chrono::milliseconds(1);
  return c;
}

}  // namespace

TEST(Spans, JsonAndValidation) {
  const auto s = nlohmann::json{{"start", 2}, {"end", 5}, {"source", "llm"}}.get<HighlightSpan>();
  EXPECT_EQ(s, (HighlightSpan{2, 5, SpanSource::llm}));
  EXPECT_THROW((nlohmann::json{{"start", -1}, {"end", 5}}.get<HighlightSpan>()), ValidationError);
  ExpertAnnotation a{"free air", {{0, 4, SpanSource::expert}}, "dr x", "2026-01-01T00:00:00Z"};
  EXPECT_NO_THROW(a.validate());
  EXPECT_EQ(nlohmann::json(a).get<ExpertAnnotation>(), a);
  a.spans.push_back({3, 3, SpanSource::expert});
  EXPECT_THROW(a.validate(), ValidationError);
  a.spans.back() = {4, 9, SpanSource::expert};
  EXPECT_THROW(a.validate(), ValidationError);
}

TEST(Spans, MergeOverlapsOnly) {
  const auto m = merge_spans({{5, 9, SpanSource::expert}, {0, 3, SpanSource::auto_}, {2, 4, SpanSource::llm},
                              {9, 12, SpanSource::expert}});
  ASSERT_EQ(m.size(), 3u);
  EXPECT_EQ(m[0], (HighlightSpan{0, 4, SpanSource::auto_}));
  EXPECT_EQ(m[1], (HighlightSpan{5, 9, SpanSource::expert}));
  EXPECT_EQ(m[2], (HighlightSpan{9, 12, SpanSource::expert}));
}

TEST(Mask, FromSpansByHand) {
  const auto v = default_vocabulary();
  const std::string text = "free air under diaphragm";
  const auto seq = tokenize(v, text);
  EXPECT_EQ(mask_from_spans(text, {}, seq), HighlightMask::zeros(4));
  EXPECT_EQ(mask_from_spans(text, {{0, 8, SpanSource::expert}}, seq).bits,
            (std::vector<unsigned char>{1, 1, 0, 0}));
  EXPECT_EQ(mask_from_spans(text, {{0, text.size(), SpanSource::expert}}, seq).bits,
            (std::vector<unsigned char>{1, 1, 1, 1}));
  // A partial overlap of one byte still marks the token.
  EXPECT_EQ(mask_from_spans(text, {{7, 10, SpanSource::expert}}, seq).bits,
            (std::vector<unsigned char>{0, 1, 1, 0}));
  EXPECT_THROW(mask_from_spans(text, {{0, 99, SpanSource::expert}}, seq), ContractViolation);
  EXPECT_THROW(mask_from_spans(text, {{4, 5, SpanSource::expert}}, seq), ValidationError);
}

TEST(Mask, TextOffsetWithinLargerPrompt) {
  const auto v = default_vocabulary();
  const std::string q = "what is under the diaphragm ?";
  const std::string ref = "free air under the diaphragm";
  const auto seq = tokenize(v, q + "\n" + ref);
  const auto m = mask_from_spans(ref, {{0, 8, SpanSource::expert}}, seq, q.size() + 1);
  EXPECT_EQ(m.count(), 2u);
  EXPECT_EQ(m.bits[6], 1);
  EXPECT_EQ(m.bits[7], 1);
}

TEST(AutoHighlight, StringMatchOracle) {
  const std::string ref = "There is free air under the diaphragm.";
  const auto spans = auto_highlight({"free air"}, "what is under the diaphragm?", ref, std::string_view("free air"));
  ASSERT_EQ(spans.size(), 1u);
  EXPECT_EQ(ref.substr(spans[0].start, spans[0].end - spans[0].start), "free air");
  EXPECT_EQ(spans[0].source, SpanSource::auto_);
  EXPECT_TRUE(auto_highlight({"pleural effusion"}, "what is under the diaphragm?", ref).empty());
}

TEST(AutoHighlight, WholeWordOnly) {
  const std::string ref = "pathology shows pa view";
  const auto spans = spans_for_phrases({"pa"}, ref, SpanSource::llm);
  ASSERT_EQ(spans.size(), 1u);
  EXPECT_EQ(spans[0].start, 16u);
  EXPECT_EQ(spans[0].end, 18u);
  EXPECT_EQ(spans_for_phrases({"Free Air"}, "free air.", SpanSource::llm).size(), 1u);
}

TEST(Keywords, SelectByQuestionOverlap) {
  EXPECT_EQ(select_keywords({"left lung", "right kidney"}, "what is wrong with the lung?"),
            std::vector<std::string>{"left lung"});
  EXPECT_TRUE(select_keywords({}, "anything").empty());
  EXPECT_EQ(select_keywords({"cyst", "liver"}, "what is seen?", std::string_view("a cyst")),
            std::vector<std::string>{"cyst"});
}

TEST(Templates, MatchShippedPromptFiles) {
  const std::filesystem::path dir = std::filesystem::path(HLGUIDE_SOURCE_DIR) / "data" / "prompts";
  EXPECT_EQ(slurp(dir / "caption_conversion.txt"), std::string(kCaptionConversionTemplate));
  EXPECT_EQ(slurp(dir / "keyword_extraction.txt"), std::string(kKeywordExtractionTemplate));
  EXPECT_EQ(slurp(dir / "highlight_matching.txt"), std::string(kHighlightMatchingTemplate));
}

TEST(Templates, Render) {
  EXPECT_EQ(render_template("Q: {{question}} A: {{answer}} {{other}}", {{"question", "why"}, {"answer", "no"}}),
            "Q: why A: no {{other}}");
  EXPECT_EQ(render_template("no placeholders", {}), "no placeholders");
}

TEST(LlmClient, CannedKeywordsAndCache) {
  const auto dir = ts::fresh_dir("canned");
  const std::string caption = "Pneumoperitoneum: free air under the right hemidiaphragm.";
  write_canned(dir, LlmTask::keyword_extraction, caption, nlohmann::json::array({"pneumoperitoneum", "free air"}));
  LlmClientConfig cfg = fast_config();
  cfg.canned_dir = dir;
  auto client = LlmClient::from_config(cfg);
  EXPECT_EQ(client->extract_keywords(caption), (std::vector<std::string>{"pneumoperitoneum", "free air"}));
  EXPECT_EQ(client->call_count(), 1u);
  client->extract_keywords(caption);
  EXPECT_EQ(client->call_count(), 1u);
  EXPECT_THROW(client->extract_keywords("no canned reply here"), ConfigError);
}

TEST(LlmClient, DropsKeywordsNotInCaption) {
  const auto dir = ts::fresh_dir("canned_drop");
  const std::string caption = "small cyst in the liver";
  write_canned(dir, LlmTask::keyword_extraction, caption, "Terms: [\"cyst\", \"hepatoma\"]");
  LlmClientConfig cfg = fast_config();
  cfg.canned_dir = dir;
  auto client = LlmClient::from_config(cfg);
  EXPECT_EQ(client->extract_keywords(caption), std::vector<std::string>{"cyst"});
  ASSERT_EQ(client->warnings().size(), 1u);
  EXPECT_NE(client->warnings()[0].find("hepatoma"), std::string::npos);
}

TEST(LlmClient, HighlightMatchingCannedAndFallback) {
  const auto dir = ts::fresh_dir("canned_match");
  const std::vector<std::string> kws{"left lung", "right kidney"};
  const std::string q = "what is wrong with the lung?";
  LlmClientConfig cfg = fast_config();
  cfg.canned_dir = dir;
  auto fallback = LlmClient::from_config(cfg);
  EXPECT_EQ(fallback->match_highlights(kws, q), std::vector<std::string>{"left lung"});
  EXPECT_TRUE(fallback->match_highlights({}, q).empty());

  const std::string input = nlohmann::json{{"keywords", kws}, {"query", q}}.dump();
  write_canned(dir, LlmTask::highlight_matching, input, nlohmann::json::array({"right kidney", "spleen"}));
  auto canned = LlmClient::from_config(cfg);
  EXPECT_EQ(canned->match_highlights(kws, q), std::vector<std::string>{"right kidney"});
  EXPECT_EQ(canned->warnings().size(), 1u);
}

TEST(LlmClient, CaptionFallbackIsRuleBased) {
  LlmClient client(fast_config(), std::make_unique<FallbackOnlyTransport>());
  EXPECT_EQ(client.caption_from_qa("What is under the diaphragm?", "Free air"), "under the diaphragm free air");
  EXPECT_EQ(rule_based_caption("Is there a fracture?", "yes"), "there a fracture yes");
}

TEST(LlmClient, RetriesThenSucceeds) {
  auto t = std::make_unique<FlakyTransport>(2, "[\"cyst\"]");
  auto* raw = t.get();
  LlmClient client(fast_config(), std::move(t));
  EXPECT_EQ(client.extract_keywords("a cyst"), std::vector<std::string>{"cyst"});
  EXPECT_EQ(client.call_count(), 3u);
  EXPECT_NE(raw->last_prompt.find("a cyst"), std::string::npos);
  LlmClient gives_up(fast_config(), std::make_unique<FlakyTransport>(5, "[]"));
  EXPECT_THROW(gives_up.extract_keywords("a cyst"), RetriableError);
  EXPECT_EQ(gives_up.call_count(), 3u);
}

TEST(LlmClient, ParseFailureIsNotRetried) {
  LlmClient client(fast_config(), std::make_unique<FlakyTransport>(0, "no array here"));
  EXPECT_THROW(client.extract_keywords("a cyst"), ParseError);
  EXPECT_EQ(client.call_count(), 1u);
  EXPECT_THROW(parse_string_array("[1, 2]"), ParseError);
  EXPECT_THROW(parse_string_array("[\"a\""), ParseError);
}

TEST(LlmClient, ConfigValidation) {
  LlmClientConfig offline;
  EXPECT_THROW(offline.validate(), ConfigError);
  LlmClientConfig online;
  online.offline_mode = false;
  EXPECT_THROW(online.validate(), ConfigError);
  online.endpoint = "https://example.invalid/v1/chat/completions";
  EXPECT_THROW(HttpTransport{online}, ConfigError);
}

TEST(HttpTransport, DistinguishesRetriableFromParseErrors) {
  httplib::Server server;
  server.Post("/ok", [](const httplib::Request& req, httplib::Response& res) {
    const auto body = nlohmann::json::parse(req.body);
    const std::string prompt = body.at("messages").at(0).at("content");
    const nlohmann::json reply = {{"choices", {{{"message", {{"content", "echo:" + prompt}}}}}}};
    res.set_content(reply.dump(), "application/json");
  });
  server.Post("/busy", [](const httplib::Request&, httplib::Response& res) { res.status = 503; });
  server.Post("/limited", [](const httplib::Request&, httplib::Response& res) { res.status = 429; });
  server.Post("/denied", [](const httplib::Request&, httplib::Response& res) { res.status = 403; });
  server.Post("/garbled", [](const httplib::Request&, httplib::Response& res) {
    res.set_content("<html>oops</html>", "text/html");
  });
  const int port = server.bind_to_any_port("127.0.0.1");
  std::thread th([&] { server.listen_after_bind(); });
  server.wait_until_ready();

  auto transport_for = [&](const std::string& path) {
    LlmClientConfig c;
    c.offline_mode = false;
    c.endpoint = "http://127.0.0.1:" + std::to_string(port) + path;
    c.timeout = std::chrono::seconds(5);
    return HttpTransport(c);
  };
  EXPECT_EQ(transport_for("/ok").complete(LlmTask::keyword_extraction, "k", "hello"), "echo:hello");
  EXPECT_THROW(transport_for("/busy").complete(LlmTask::keyword_extraction, "k", "x"), RetriableError);
  EXPECT_THROW(transport_for("/limited").complete(LlmTask::keyword_extraction, "k", "x"), RetriableError);
  EXPECT_THROW(transport_for("/denied").complete(LlmTask::keyword_extraction, "k", "x"), ParseError);
  EXPECT_THROW(transport_for("/garbled").complete(LlmTask::keyword_extraction, "k", "x"), ParseError);
  server.stop();
  th.join();

  LlmClientConfig dead;
  dead.offline_mode = false;
  dead.endpoint = "http://127.0.0.1:" + std::to_string(port) + "/ok";
  dead.timeout = std::chrono::seconds(2);
  EXPECT_THROW(HttpTransport(dead).complete(LlmTask::keyword_extraction, "k", "x"), RetriableError);
}
