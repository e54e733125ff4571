#pragma once

// Client for an external chat-completion service used for caption
// conversion, keyword extraction and highlight matching. Calls are made in
// the annotation / ingestion phase only, cached, and fully replaceable by a
// directory of canned replies (offline mode).
//
// Canned reply files: <dir>/<hex64(fnv1a64(task + "\n" + input))>.json holding
// {"response": "..."} where `input` is:
//   caption_conversion  {"answer":..,"question":..} (compact JSON)
//   keyword_extraction  the caption
//   highlight_matching  {"keywords":[..],"query":..} (compact JSON)

#include <atomic>
#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <set>
#include <shared_mutex>
#include <string>
#include <thread>
#include <vector>

#include <httplib.h>
#include <nlohmann/json.hpp>

#include "hlguide/annotation.hpp"
#include "hlguide/errors.hpp"
#include "hlguide/text.hpp"

namespace hlguide {

inline constexpr std::string_view kCaptionConversionTemplate = R"tmpl(You are given a question and its answer about a medical image.
Rewrite them as one short descriptive caption of the image, stated as a fact.
Keep every medical term from the answer unchanged. Do not add findings that are not implied.

Question: {{question}}
Answer: {{answer}}

Reply with the caption only.
)tmpl";

inline constexpr std::string_view kKeywordExtractionTemplate = R"tmpl(Read the caption of a medical image below and list the medical terms it contains:
anatomy, modality, findings, diseases and devices.
Copy each term exactly as it is written in the caption. Do not invent terms.

Caption: {{caption}}

Reply with a JSON array of strings, for example ["term one", "term two"].
)tmpl";

inline constexpr std::string_view kHighlightMatchingTemplate = R"tmpl(A clinician asked the question below about a medical image.
From the candidate terms, pick the ones that help answer the question.
Only pick terms from the candidate list, spelled exactly as given.

Question: {{query}}
Candidate terms: {{keywords}}

Reply with a JSON array of strings. Reply with [] if none apply.
)tmpl";

/// Replaces every {{name}} with vars[name]. Unknown placeholders are left as-is.
inline std::string render_template(std::string_view tmpl, const std::map<std::string, std::string>& vars) {
  std::string out;
  std::size_t i = 0;
  while (i < tmpl.size()) {
    const std::size_t open = tmpl.find("{{", i);
    if (open == std::string_view::npos) break;
    const std::size_t close = tmpl.find("}}", open + 2);
    if (close == std::string_view::npos) break;
    out.append(tmpl.substr(i, open - i));
    const std::string name(tmpl.substr(open + 2, close - open - 2));
    const auto it = vars.find(name);
    if (it != vars.end()) out += it->second;
    else out.append(tmpl.substr(open, close + 2 - open));
    i = close + 2;
  }
  out.append(tmpl.substr(i));
  return out;
}

enum class LlmTask { caption_conversion, keyword_extraction, highlight_matching };

inline std::string_view to_string(LlmTask t) {
  switch (t) {
    case LlmTask::caption_conversion: return "caption_conversion";
    case LlmTask::keyword_extraction: return "keyword_extraction";
    case LlmTask::highlight_matching: return "highlight_matching";
  }
  return "?";
}

struct LlmClientConfig {
  std::string endpoint;  // e.g. http://localhost:8000/v1/chat/completions
  std::string api_key;
  std::string model = "gpt-4o";
  bool offline_mode = true;
  std::filesystem::path canned_dir;
  std::string caption_template{kCaptionConversionTemplate};
  std::string keyword_template{kKeywordExtractionTemplate};
  std::string highlight_template{kHighlightMatchingTemplate};
  int max_retries = 2;
  std::chrono::milliseconds retry_backoff{200};
  std::chrono::seconds timeout{30};

  /// Reads HLGUIDE_LLM_ENDPOINT, HLGUIDE_LLM_API_KEY and HLGUIDE_LLM_MODEL.
  /// An endpoint switches offline mode off.
  static LlmClientConfig from_env() {
    LlmClientConfig c;
    if (const char* e = std::getenv("HLGUIDE_LLM_ENDPOINT"); e && *e) {
      c.endpoint = e;
      c.offline_mode = false;
    }
    if (const char* k = std::getenv("HLGUIDE_LLM_API_KEY")) c.api_key = k;
    if (const char* m = std::getenv("HLGUIDE_LLM_MODEL"); m && *m) c.model = m;
    return c;
  }

  /// Offline mode needs an existing canned-reply directory.
  void validate() const {
    if (offline_mode) {
      if (canned_dir.empty() || !std::filesystem::is_directory(canned_dir)) {
        throw ConfigError("llm client: offline mode needs an existing canned-reply directory");
      }
    } else if (endpoint.empty()) {
      throw ConfigError("llm client: online mode needs an endpoint");
    }
  }
};

/// Sends one rendered prompt, returns the raw reply text. Connection and
/// server failures raise RetriableError.
class LlmTransport {
 public:
  virtual ~LlmTransport() = default;
  virtual std::string complete(LlmTask task, const std::string& request_key, const std::string& prompt) = 0;
};

/// Chat-completion style endpoint over plain HTTP.
class HttpTransport final : public LlmTransport {
 public:
  explicit HttpTransport(const LlmClientConfig& cfg) : cfg_(cfg) {
    const std::string& url = cfg_.endpoint;
    const auto scheme_end = url.find("://");
    if (scheme_end == std::string::npos) throw ConfigError("llm client: endpoint must be an absolute URL");
    if (url.compare(0, scheme_end, "http") != 0) {
      throw ConfigError("llm client: only http endpoints are supported (use a local TLS proxy for https)");
    }
    const auto path_start = url.find('/', scheme_end + 3);
    base_ = url.substr(0, path_start);
    path_ = path_start == std::string::npos ? "/" : url.substr(path_start);
  }

  std::string complete(LlmTask, const std::string&, const std::string& prompt) override {
    httplib::Client client(base_);
    client.set_connection_timeout(cfg_.timeout);
    client.set_read_timeout(cfg_.timeout);
    httplib::Headers headers;
    if (!cfg_.api_key.empty()) headers.emplace("Authorization", "Bearer " + cfg_.api_key);
    const nlohmann::json body = {{"model", cfg_.model},
                                 {"temperature", 0},
                                 {"messages", nlohmann::json::array({{{"role", "user"}, {"content", prompt}}})}};
    const auto res = client.Post(path_, headers, body.dump(), "application/json");
    if (!res) throw RetriableError("llm endpoint unreachable: " + httplib::to_string(res.error()));
    if (res->status == 429 || res->status >= 500) {
      throw RetriableError("llm endpoint returned HTTP " + std::to_string(res->status));
    }
    if (res->status != 200) throw ParseError("llm endpoint returned HTTP " + std::to_string(res->status));
    try {
      const auto j = nlohmann::json::parse(res->body);
      return j.at("choices").at(0).at("message").at("content").get<std::string>();
    } catch (const nlohmann::json::exception& e) {
      throw ParseError(std::string("llm reply is not a chat completion: ") + e.what());
    }
  }

 private:
  LlmClientConfig cfg_;
  std::string base_;
  std::string path_;
};

/// Looks replies up in the canned directory; a missing file raises NotFound.
class CannedTransport final : public LlmTransport {
 public:
  explicit CannedTransport(std::filesystem::path dir) : dir_(std::move(dir)) {}

  std::string complete(LlmTask task, const std::string& request_key, const std::string&) override {
    const auto path = dir_ / (request_key + ".json");
    std::ifstream in(path);
    if (!in) throw NotFound("no canned reply for " + std::string(to_string(task)) + " (" + path.string() + ")");
    try {
      const auto j = nlohmann::json::parse(in);
      const auto& r = j.at("response");
      return r.is_string() ? r.get<std::string>() : r.dump();
    } catch (const nlohmann::json::exception& e) {
      throw ParseError("canned reply " + path.string() + ": " + e.what());
    }
  }

 private:
  std::filesystem::path dir_;
};

/// Has no replies at all: every offline call takes its rule-based fallback.
class FallbackOnlyTransport final : public LlmTransport {
 public:
  std::string complete(LlmTask task, const std::string&, const std::string&) override {
    throw NotFound("no reply source for " + std::string(to_string(task)));
  }
};

/// Request key shared by the cache and the canned directory.
inline std::string llm_request_key(LlmTask task, const std::string& input) {
  return text::hex64(text::fnv1a64(std::string(to_string(task)) + "\n" + input));
}

/// Extracts the first JSON array of strings from a reply.
inline std::vector<std::string> parse_string_array(const std::string& reply) {
  const auto open = reply.find('[');
  const auto close = reply.rfind(']');
  if (open == std::string::npos || close == std::string::npos || close < open) {
    throw ParseError("llm reply contains no JSON array");
  }
  try {
    const auto j = nlohmann::json::parse(reply.substr(open, close - open + 1));
    std::vector<std::string> out;
    for (const auto& v : j) {
      if (!v.is_string()) throw ParseError("llm reply array holds a non-string element");
      out.push_back(v.get<std::string>());
    }
    return out;
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("llm reply array is not valid JSON: ") + e.what());
  }
}

/// Rule-based caption: the question without interrogative words, then the answer.
inline std::string rule_based_caption(std::string_view question, std::string_view answer) {
  static const std::set<std::string, std::less<>> kInterrogative = {
      "what", "which", "where", "when", "who", "whom", "whose", "why", "how", "is", "are", "does", "do", "did", "can"};
  std::string out;
  for (const auto& w : text::normalized_words(question)) {
    if (kInterrogative.count(w)) continue;
    if (!out.empty()) out.push_back(' ');
    out += w;
  }
  const std::string a = text::normalize(answer);
  if (!a.empty()) {
    if (!out.empty()) out.push_back(' ');
    out += a;
  }
  return out;
}

class LlmClient {
 public:
  LlmClient(LlmClientConfig cfg, std::unique_ptr<LlmTransport> transport)
      : cfg_(std::move(cfg)), transport_(std::move(transport)) {
    require(transport_ != nullptr, "llm client: transport required");
  }

  /// Builds the transport from the config: canned directory when offline,
  /// HTTP otherwise.
  static std::unique_ptr<LlmClient> from_config(const LlmClientConfig& cfg) {
    cfg.validate();
    if (cfg.offline_mode) return std::make_unique<LlmClient>(cfg, std::make_unique<CannedTransport>(cfg.canned_dir));
    return std::make_unique<LlmClient>(cfg, std::make_unique<HttpTransport>(cfg));
  }

  const LlmClientConfig& config() const { return cfg_; }

  /// Number of transport calls made (cache hits do not count).
  std::size_t call_count() const { return calls_.load(); }

  std::vector<std::string> warnings() const {
    std::lock_guard lock(warn_mu_);
    return warnings_;
  }

  std::vector<std::string> extract_keywords(const std::string& caption) {
    const std::string input = caption;
    const std::string prompt = render_template(cfg_.keyword_template, {{"caption", caption}});
    try {
      return cached(LlmTask::keyword_extraction, input, prompt, [&](const std::string& reply) {
        auto words = parse_string_array(reply);
        return drop_outside(words, caption, "caption");
      });
    } catch (const NotFound& e) {
      throw ConfigError(std::string("keyword extraction: ") + e.what());
    }
  }

  /// Subset of `keywords` relevant to `query`. Offline without a canned reply,
  /// falls back to the question-overlap rule.
  std::vector<std::string> match_highlights(const std::vector<std::string>& keywords, const std::string& query) {
    if (keywords.empty()) return {};
    const std::string input = nlohmann::json{{"keywords", keywords}, {"query", query}}.dump();
    nlohmann::json kw = keywords;
    const std::string prompt = render_template(cfg_.highlight_template, {{"query", query}, {"keywords", kw.dump()}});
    try {
      return cached(LlmTask::highlight_matching, input, prompt, [&](const std::string& reply) {
        const auto picked = parse_string_array(reply);
        const std::set<std::string> allowed(keywords.begin(), keywords.end());
        std::vector<std::string> out;
        for (const auto& p : picked) {
          if (allowed.count(p)) out.push_back(p);
          else warn("highlight matching: dropped '" + p + "' (not among the input keywords)");
        }
        return out;
      });
    } catch (const NotFound&) {
      if (!cfg_.offline_mode) throw;
      return select_keywords(keywords, query);
    }
  }

  /// Caption for a question/answer pair. Offline without a canned reply, uses
  /// the rule-based conversion.
  std::string caption_from_qa(const std::string& question, const std::string& answer) {
    const std::string input = nlohmann::json{{"answer", answer}, {"question", question}}.dump();
    const std::string prompt =
        render_template(cfg_.caption_template, {{"question", question}, {"answer", answer}});
    try {
      const auto v = cached(LlmTask::caption_conversion, input, prompt, [](const std::string& reply) {
        std::string s(reply);
        while (!s.empty() && text::is_space(static_cast<unsigned char>(s.back()))) s.pop_back();
        std::size_t b = 0;
        while (b < s.size() && text::is_space(static_cast<unsigned char>(s[b]))) ++b;
        if (b == s.size()) throw ParseError("caption conversion: empty reply");
        return std::vector<std::string>{s.substr(b)};
      });
      return v.front();
    } catch (const NotFound&) {
      if (!cfg_.offline_mode) throw;
      return rule_based_caption(question, answer);
    }
  }

 private:
  template <class Parse>
  std::vector<std::string> cached(LlmTask task, const std::string& input, const std::string& prompt, Parse parse) {
    const std::string key = llm_request_key(task, input);
    {
      std::shared_lock lock(cache_mu_);
      if (const auto it = cache_.find(key); it != cache_.end()) return it->second;
    }
    std::string reply;
    {
      // one request at a time per endpoint
      std::lock_guard lock(request_mu_);
      for (int attempt = 0;; ++attempt) {
        ++calls_;
        try {
          reply = transport_->complete(task, key, prompt);
          break;
        } catch (const RetriableError&) {
          if (attempt >= cfg_.max_retries) throw;
          std::this_thread::sleep_for(cfg_.retry_backoff * (attempt + 1));
        }
      }
    }
    auto value = parse(reply);
    std::unique_lock lock(cache_mu_);
    return cache_.emplace(key, std::move(value)).first->second;
  }

  std::vector<std::string> drop_outside(const std::vector<std::string>& words, const std::string& source,
                                        const char* what) {
    std::vector<std::string> out;
    for (const auto& w : words) {
      if (!text::find_whole_word(source, w).empty()) out.push_back(w);
      else warn(std::string("keyword extraction: dropped '") + w + "' (not found in the " + what + ")");
    }
    return out;
  }

  void warn(std::string msg) {
    std::lock_guard lock(warn_mu_);
    warnings_.push_back(std::move(msg));
  }

  LlmClientConfig cfg_;
  std::unique_ptr<LlmTransport> transport_;
  std::atomic<std::size_t> calls_{0};
  mutable std::shared_mutex cache_mu_;
  std::map<std::string, std::vector<std::string>> cache_;
  std::mutex request_mu_;
  mutable std::mutex warn_mu_;
  std::vector<std::string> warnings_;
};

}  // namespace hlguide
