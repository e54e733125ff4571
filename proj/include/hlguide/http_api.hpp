#pragma once

// HTTP/JSON front end of the review service.
//
//   POST /v1/answer                    {question, visual_ref?, model_id?} or {"batch": [...]}
//   GET  /v1/items?status=&page=&page_size=
//   GET  /v1/items/{id}
//   POST /v1/items/{id}/annotation     ExpertAnnotation
//   POST /v1/items/{id}/regenerate     GuidanceConfig (fields optional)
//   POST /v1/items/{id}/deliver
//   GET  /v1/export?from=&to=          JSONL archive
//   GET  /v1/config, GET /v1/health
//
// Errors are {"code", "message", "detail"}.

#include <filesystem>
#include <optional>
#include <string>

#include <httplib.h>
#include <nlohmann/json.hpp>

#include "hlguide/service.hpp"

namespace hlguide {

struct HttpApiConfig {
  std::string token;               // shared bearer token; empty disables the check
  std::filesystem::path static_dir;  // review UI bundle, served under /ui
};

inline nlohmann::json error_body(const std::string& code, const std::string& message,
                                 const nlohmann::json& detail = nlohmann::json::object()) {
  return {{"code", code}, {"message", message}, {"detail", detail}};
}

class HttpApi {
 public:
  HttpApi(ReviewService& service, HttpApiConfig cfg = {}) : service_(service), cfg_(std::move(cfg)) { routes(); }

  httplib::Server& server() { return server_; }

  int bind_to_any_port(const std::string& host = "127.0.0.1") { return server_.bind_to_any_port(host); }
  bool listen_after_bind() { return server_.listen_after_bind(); }
  bool listen(const std::string& host, int port) { return server_.listen(host, port); }
  void stop() { server_.stop(); }
  void wait_until_ready() { server_.wait_until_ready(); }

 private:
  static void send_json(httplib::Response& res, int status, const nlohmann::json& body) {
    res.status = status;
    res.set_content(body.dump(), "application/json");
  }

  nlohmann::json item_view(const ReviewItem& it) const {
    nlohmann::json j = it;
    if (!service_.config().expose_initial_answer) {
      j.erase("answer");
      j.erase("answer_tokens");
    }
    return j;
  }

  template <class F>
  httplib::Server::Handler guarded(F f) {
    return [this, f](const httplib::Request& req, httplib::Response& res) {
      if (!cfg_.token.empty() && req.get_header_value("Authorization") != "Bearer " + cfg_.token) {
        send_json(res, 401, error_body("unauthorized", "missing or invalid bearer token"));
        return;
      }
      try {
        f(req, res);
      } catch (const nlohmann::json::exception& e) {
        send_json(res, 400, error_body("bad_request", "malformed JSON body", {{"reason", e.what()}}));
      } catch (const ValidationError& e) {
        send_json(res, 400, error_body("validation_error", e.what()));
      } catch (const ContractViolation& e) {
        send_json(res, 400, error_body("invalid_argument", e.what()));
      } catch (const NotFound& e) {
        send_json(res, 404, error_body("not_found", e.what()));
      } catch (const Conflict& e) {
        send_json(res, 409, error_body("conflict", e.what()));
      } catch (const ConfigError& e) {
        send_json(res, 400, error_body("config_error", e.what()));
      } catch (const std::exception& e) {
        send_json(res, 500, error_body("internal", e.what()));
      }
    };
  }

  static nlohmann::json parse_body(const httplib::Request& req) {
    if (req.body.empty()) return nlohmann::json::object();
    return nlohmann::json::parse(req.body);
  }

  static std::size_t size_param(const httplib::Request& req, const char* name, std::size_t fallback) {
    if (!req.has_param(name)) return fallback;
    const std::string v = req.get_param_value(name);
    std::size_t pos = 0;
    unsigned long long n = 0;
    try {
      n = std::stoull(v, &pos);
    } catch (const std::exception&) {
      pos = 0;
    }
    if (pos != v.size() || v.empty()) throw ValidationError(std::string("query parameter '") + name + "' must be a non-negative integer");
    return static_cast<std::size_t>(n);
  }

  void routes() {
    server_.Get("/v1/health", guarded([](const httplib::Request&, httplib::Response& res) {
                  send_json(res, 200, {{"status", "ok"}});
                }));

    server_.Get("/v1/config", guarded([this](const httplib::Request&, httplib::Response& res) {
                  const auto& c = service_.config();
                  send_json(res, 200,
                            {{"guidance", c.guidance},
                             {"policy", c.policy},
                             {"k", c.k},
                             {"strategy", to_string(c.strategy)},
                             {"clip_threshold", c.clip_threshold},
                             {"expose_initial_answer", c.expose_initial_answer}});
                }));

    server_.Post("/v1/answer", guarded([this](const httplib::Request& req, httplib::Response& res) {
                   const auto body = parse_body(req);
                   if (body.contains("batch")) {
                     std::vector<AnswerRequest> reqs;
                     for (const auto& r : body.at("batch")) reqs.push_back(r.get<AnswerRequest>());
                     if (reqs.empty()) throw ValidationError("answer: empty batch");
                     nlohmann::json items = nlohmann::json::array();
                     for (const auto& it : service_.answer_batch(reqs)) items.push_back(item_view(it));
                     send_json(res, 200, {{"items", items}});
                   } else {
                     send_json(res, 200, item_view(service_.answer(body.get<AnswerRequest>())));
                   }
                 }));

    server_.Get("/v1/items", guarded([this](const httplib::Request& req, httplib::Response& res) {
                  std::optional<ItemStatus> status;
                  if (req.has_param("status") && !req.get_param_value("status").empty()) {
                    status = parse_item_status(req.get_param_value("status"));
                  }
                  const std::size_t page = size_param(req, "page", 0);
                  const std::size_t page_size = size_param(req, "page_size", 50);
                  if (page_size == 0) throw ValidationError("page_size must be >= 1");
                  nlohmann::json items = nlohmann::json::array();
                  for (const auto& it : service_.list_items(status, page, page_size)) items.push_back(item_summary(it));
                  send_json(res, 200, {{"items", items}, {"page", page}, {"page_size", page_size}});
                }));

    server_.Get(R"(/v1/items/([A-Za-z0-9_-]+))", guarded([this](const httplib::Request& req, httplib::Response& res) {
                  send_json(res, 200, item_view(service_.get(req.matches[1])));
                }));

    server_.Post(R"(/v1/items/([A-Za-z0-9_-]+)/annotation)",
                 guarded([this](const httplib::Request& req, httplib::Response& res) {
                   const auto body = parse_body(req);
                   if (!body.contains("reference_text")) throw ValidationError("annotation: 'reference_text' is required");
                   send_json(res, 200, item_view(service_.submit_annotation(req.matches[1], body.get<ExpertAnnotation>())));
                 }));

    server_.Post(R"(/v1/items/([A-Za-z0-9_-]+)/regenerate)",
                 guarded([this](const httplib::Request& req, httplib::Response& res) {
                   const auto body = parse_body(req);
                   GuidanceConfig cfg = service_.config().guidance;
                   if (!body.empty()) {
                     nlohmann::json merged = cfg;
                     // beta given without delta: delta follows beta
                     if (body.contains("beta") && !body.contains("delta")) merged.erase("delta");
                     merged.update(body);
                     cfg = merged.get<GuidanceConfig>();
                   }
                   send_json(res, 200, item_view(service_.regenerate(req.matches[1], cfg)));
                 }));

    server_.Post(R"(/v1/items/([A-Za-z0-9_-]+)/deliver)",
                 guarded([this](const httplib::Request& req, httplib::Response& res) {
                   send_json(res, 200, item_view(service_.deliver(req.matches[1])));
                 }));

    server_.Get("/v1/export", guarded([this](const httplib::Request& req, httplib::Response& res) {
                  const std::uint64_t from = size_param(req, "from", 1);
                  const std::uint64_t to = req.has_param("to") ? size_param(req, "to", 0) : UINT64_MAX;
                  res.status = 200;
                  res.set_content(service_.export_session(from, to), "application/x-ndjson");
                }));

    if (!cfg_.static_dir.empty() && std::filesystem::is_directory(cfg_.static_dir)) {
      server_.set_mount_point("/ui", cfg_.static_dir.string());
    }
  }

  ReviewService& service_;
  HttpApiConfig cfg_;
  httplib::Server server_;
};

}  // namespace hlguide
