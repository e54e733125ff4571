// Command-line front end: ingest, synth, eval, ablate, report, serve.
//
// Exit codes: 0 ok, 1 invalid input or configuration, 2 runtime failure.

#include <csignal>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <set>
#include <string>

#include <CLI11.hpp>

#include "hlguide/hlguide.hpp"

namespace fs = std::filesystem;
using namespace hlguide;

namespace {

constexpr int kExitValidation = 1;
constexpr int kExitRuntime = 2;

struct EvalFlags {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> policy;
  std::optional<std::size_t> k;
  std::optional<std::string> strategy;
  std::optional<std::string> grid;
  std::optional<std::string> out;
  std::optional<std::size_t> workers;
};

void add_eval_flags(CLI::App* cmd, EvalFlags& f) {
  cmd->add_option("--config", f.config, "Run manifest (JSON)")->required()->check(CLI::ExistingFile);
  cmd->add_option("--seed", f.seed, "Seed for every stochastic step");
  cmd->add_option("--policy", f.policy, "Gate policy, top:<percent> or threshold:<tau>");
  cmd->add_option("--k", f.k, "References retrieved per reviewed item");
  cmd->add_option("--strategy", f.strategy, "Retrieval strategy: image|text|sum|union");
  cmd->add_option("--grid", f.grid, "Guidance grid alpha-list:beta-list:gamma-list");
  cmd->add_option("--out", f.out, "Output directory");
  cmd->add_option("--workers", f.workers, "Worker threads");
}

RunManifest manifest_with_flags(const EvalFlags& f) {
  RunManifest m = load_manifest(f.config);
  if (f.seed) m.seed = *f.seed;
  if (f.policy) m.policy = GatePolicy::parse(*f.policy);
  if (f.k) m.k = *f.k;
  if (f.strategy) m.strategy = parse_strategy(*f.strategy);
  if (f.grid) m.grid = GuidanceGrid::parse(*f.grid);
  if (f.out) m.out = *f.out;
  if (f.workers) m.workers = *f.workers;
  m.validate();
  return m;
}

EvalRun eval_from_manifest(const RunManifest& m) {
  std::shared_ptr<const GuidableModel> model = load_model(m.model, m.vocab);
  auto corpus = load_corpus(m.corpus);
  Dataset ds = read_dataset(m.dataset);
  for (const auto& e : ds.errors) std::cerr << "dataset " << m.dataset.string() << ": " << e << "\n";
  return run_eval(m, std::move(model), std::move(corpus), std::move(ds));
}

void print_arms(const nlohmann::json& bundle) {
  std::cout << "rows: " << bundle.at("rows").get<std::size_t>() << ", reviewed: "
            << bundle.at("gate").at("reviewed").get<std::size_t>() << "\n";
  for (const auto& a : bundle.at("arms")) {
    std::cout << "  " << a.at("name").get<std::string>() << ": open " << fmt_num(a.at("open").get<double>())
              << " closed " << fmt_num(a.at("closed").get<double>()) << " overall "
              << fmt_num(a.at("overall").get<double>()) << "\n";
  }
}

int cmd_eval(const EvalFlags& f) {
  const RunManifest m = manifest_with_flags(f);
  const EvalRun run = eval_from_manifest(m);
  write_eval_outputs(run, m.out);
  print_arms(run.bundle);
  std::cout << "wrote " << m.out.string() << "\n";
  return 0;
}

int cmd_ablate(const EvalFlags& f) {
  const RunManifest m = manifest_with_flags(f);
  std::shared_ptr<const GuidableModel> model = load_model(m.model, m.vocab);
  auto corpus = load_corpus(m.corpus);
  Dataset ds = read_dataset(m.dataset);
  for (const auto& e : ds.errors) std::cerr << "dataset " << m.dataset.string() << ": " << e << "\n";
  const EvalRun run = run_eval(m, model, corpus, std::move(ds));
  const auto cells = run_ablation(m, run, *model);
  std::set<std::string> warned;
  for (const auto& c : cells) {
    for (const auto& w : c.cfg.warnings()) {
      if (warned.insert(w).second) std::cerr << "warning: " << w << "\n";
    }
  }
  write_text_file(m.out / "ablation.csv", ablation_csv(cells));
  write_text_file(m.out / "ablation.json", ablation_json(cells).dump(2) + "\n");
  std::cout << ablation_csv(cells);
  return 0;
}

int cmd_report(const std::string& bundle_path, const std::string& out) {
  std::ifstream in(bundle_path);
  if (!in) throw NotFound("bundle not found: " + bundle_path);
  nlohmann::json bundle;
  try {
    bundle = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError("bundle " + bundle_path + ": " + e.what());
  }
  emit_report(bundle, out);
  std::cout << "wrote " << out << "\n";
  return 0;
}

struct IngestFlags {
  std::string corpus;
  std::string out;
  bool qa_to_caption = false;
  std::string canned;
};

int cmd_ingest(const IngestFlags& f) {
  const std::string data = read_maybe_gzip(f.corpus);
  std::unique_ptr<LlmClient> client;
  if (f.qa_to_caption) {
    LlmClientConfig cfg = LlmClientConfig::from_env();
    if (!f.canned.empty()) {
      cfg.offline_mode = true;
      cfg.canned_dir = f.canned;
    }
    if (cfg.offline_mode && cfg.canned_dir.empty()) {
      client = std::make_unique<LlmClient>(cfg, std::make_unique<FallbackOnlyTransport>());
    } else {
      client = LlmClient::from_config(cfg);
    }
  }
  std::vector<KnowledgeRecord> records;
  std::size_t lineno = 0, start = 0, bad = 0;
  while (start < data.size()) {
    std::size_t end = data.find('\n', start);
    if (end == std::string::npos) end = data.size();
    ++lineno;
    const std::string line = data.substr(start, end - start);
    start = end + 1;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      KnowledgeRecord r = j.get<KnowledgeRecord>();
      if (r.caption.empty() && client && j.contains("question") && j.contains("answer")) {
        r.caption = client->caption_from_qa(j.at("question").get<std::string>(), j.at("answer").get<std::string>());
      }
      records.push_back(std::move(r));
    } catch (const std::exception& e) {
      std::cerr << f.corpus << ": line " << lineno << ": " << e.what() << "\n";
      ++bad;
    }
  }
  const KnowledgeStore store = KnowledgeStore::ingest(std::move(records));
  store.save(f.out);
  std::cout << "ingested " << store.size() << " records into " << f.out;
  if (bad) std::cout << " (" << bad << " malformed lines skipped)";
  std::cout << "\n";
  return bad ? kExitValidation : 0;
}

struct SynthFlags {
  std::string out;
  std::size_t items = 100;
  double hard_fraction = 0.2;
  std::size_t distractors = 0;
  std::uint64_t seed = 1;
};

int cmd_synth(const SynthFlags& f) {
  ScenarioParams p;
  p.items = f.items;
  p.hard_fraction = f.hard_fraction;
  p.distractor_records = f.distractors;
  p.seed = f.seed;
  const auto suite = make_scenario_suite(p);
  write_scenario_files(suite, f.out, f.seed);
  std::cout << "wrote " << suite.items.size() << " scenarios to " << f.out << "\n";
  return 0;
}

HttpApi* g_api = nullptr;

extern "C" void on_signal(int) {
  if (g_api) g_api->stop();
}

struct ServeFlags {
  std::string config;
  std::optional<std::string> model, vocab, corpus, policy, strategy, data_dir, token, static_dir, host;
  std::optional<std::size_t> k, workers;
  std::optional<int> port;
  std::optional<std::uint64_t> seed;
};

int cmd_serve(const ServeFlags& f) {
  nlohmann::json c = nlohmann::json::object();
  fs::path base;
  if (!f.config.empty()) {
    std::ifstream in(f.config);
    if (!in) throw NotFound("config not found: " + f.config);
    try {
      c = nlohmann::json::parse(in);
    } catch (const nlohmann::json::exception& e) {
      throw ValidationError("config " + f.config + ": " + e.what());
    }
    base = fs::path(f.config).parent_path();
  }
  auto set = [&](const char* key, const auto& flag) {
    if (flag) c[key] = *flag;
  };
  set("model", f.model);
  set("vocab", f.vocab);
  set("corpus", f.corpus);
  set("policy", f.policy);
  set("strategy", f.strategy);
  set("data_dir", f.data_dir);
  set("token", f.token);
  set("static_dir", f.static_dir);
  set("host", f.host);
  set("k", f.k);
  set("workers", f.workers);
  set("port", f.port);
  auto path = [&](const char* key) -> fs::path {
    if (!c.contains(key)) return {};
    fs::path p = c.at(key).get<std::string>();
    return p.is_relative() && !base.empty() ? base / p : p;
  };

  ServiceConfig sc;
  if (c.contains("policy")) sc.policy = c.at("policy").get<GatePolicy>();
  sc.k = c.value("k", sc.k);
  if (c.contains("strategy")) sc.strategy = parse_strategy(c.at("strategy").get<std::string>());
  sc.clip_threshold = c.value("clip_threshold", sc.clip_threshold);
  sc.max_len = c.value("max_len", sc.max_len);
  if (c.contains("guidance")) sc.guidance = c.at("guidance").get<GuidanceConfig>();
  sc.workers = c.value("workers", sc.workers);
  sc.expose_initial_answer = c.value("expose_initial_answer", sc.expose_initial_answer);
  sc.data_dir = path("data_dir");

  ReviewService service(sc);
  if (c.contains("model")) {
    service.add_model(c.value("model_id", std::string("default")), load_model(path("model"), path("vocab")));
  } else {
    service.add_model("default", std::make_shared<MicroTransformer>(default_vocabulary(), f.seed.value_or(42)));
  }
  if (c.contains("corpus")) service.set_corpus(load_corpus(path("corpus")));

  HttpApi api(service, HttpApiConfig{c.value("token", std::string{}), path("static_dir")});
  g_api = &api;
  std::signal(SIGINT, on_signal);
  std::signal(SIGTERM, on_signal);
  const std::string host = c.value("host", std::string("127.0.0.1"));
  const int port = c.value("port", 8080);
  std::cout << "listening on http://" << host << ":" << port << std::endl;
  if (!api.listen(host, port)) throw Error("cannot listen on " + host + ":" + std::to_string(port));
  service.write_snapshot();
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Highlight-guided decoding and expert review toolkit"};
  app.require_subcommand(1);

  EvalFlags eval_flags, ablate_flags;
  add_eval_flags(app.add_subcommand("eval", "Evaluate a dataset and write metrics and plot data"), eval_flags);
  add_eval_flags(app.add_subcommand("ablate", "Run the guidance hyperparameter grid"), ablate_flags);

  std::string bundle, report_out;
  auto* report = app.add_subcommand("report", "Write plot-data CSVs from a metrics bundle");
  report->add_option("--bundle", bundle, "metrics.json from eval")->required()->check(CLI::ExistingFile);
  report->add_option("--out", report_out, "Output directory")->required();

  IngestFlags ingest_flags;
  auto* ingest = app.add_subcommand("ingest", "Build a knowledge store from a JSONL corpus (gzip accepted)");
  ingest->add_option("--corpus", ingest_flags.corpus, "Corpus JSONL")->required()->check(CLI::ExistingFile);
  ingest->add_option("--out", ingest_flags.out, "Store directory")->required();
  ingest->add_flag("--qa-to-caption", ingest_flags.qa_to_caption, "Build missing captions from question/answer fields");
  ingest->add_option("--canned", ingest_flags.canned, "Canned LLM reply directory (offline mode)");

  SynthFlags synth_flags;
  auto* synth = app.add_subcommand("synth", "Write a synthetic steering suite (model, corpus, dataset, manifest)");
  synth->add_option("--out", synth_flags.out, "Output directory")->required();
  synth->add_option("--items", synth_flags.items, "Number of questions")->check(CLI::PositiveNumber);
  synth->add_option("--hard-fraction", synth_flags.hard_fraction, "Share of wrong-prior questions")->check(CLI::Range(0.0, 1.0));
  synth->add_option("--distractors", synth_flags.distractors, "Extra unrelated corpus records");
  synth->add_option("--seed", synth_flags.seed, "Generator seed");

  ServeFlags serve_flags;
  auto* serve = app.add_subcommand("serve", "Run the review service");
  serve->add_option("--config", serve_flags.config, "Service config (JSON)")->check(CLI::ExistingFile);
  serve->add_option("--model", serve_flags.model, "Weight file");
  serve->add_option("--vocab", serve_flags.vocab, "Vocabulary file");
  serve->add_option("--corpus", serve_flags.corpus, "Corpus JSONL or store directory");
  serve->add_option("--policy", serve_flags.policy, "Gate policy");
  serve->add_option("--k", serve_flags.k, "References per reviewed item");
  serve->add_option("--strategy", serve_flags.strategy, "Retrieval strategy");
  serve->add_option("--data-dir", serve_flags.data_dir, "Event log directory");
  serve->add_option("--token", serve_flags.token, "Shared bearer token");
  serve->add_option("--static", serve_flags.static_dir, "Review UI bundle directory");
  serve->add_option("--host", serve_flags.host, "Bind address");
  serve->add_option("--port", serve_flags.port, "Port");
  serve->add_option("--workers", serve_flags.workers, "Decode workers");
  serve->add_option("--seed", serve_flags.seed, "Seed of the built-in model when no weights are given");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : kExitValidation;
  }

  try {
    if (app.got_subcommand("eval")) return cmd_eval(eval_flags);
    if (app.got_subcommand("ablate")) return cmd_ablate(ablate_flags);
    if (app.got_subcommand("report")) return cmd_report(bundle, report_out);
    if (app.got_subcommand("ingest")) return cmd_ingest(ingest_flags);
    if (app.got_subcommand("synth")) return cmd_synth(synth_flags);
    if (app.got_subcommand("serve")) return cmd_serve(serve_flags);
  } catch (const ValidationError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitValidation;
  } catch (const ContractViolation& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitValidation;
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitValidation;
  } catch (const NotFound& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitValidation;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitRuntime;
  }
  return 0;
}
