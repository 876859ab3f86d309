// sessionrank: simgen | train | eval | serve | loadtest

#include <csignal>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <iterator>
#include <memory>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "sessionrank/domain.hpp"
#include "sessionrank/evaluator.hpp"
#include "sessionrank/loadtest.hpp"
#include "sessionrank/manifest.hpp"
#include "sessionrank/model_io.hpp"
#include "sessionrank/service.hpp"
#include "sessionrank/simulator.hpp"
#include "sessionrank/trainer.hpp"

namespace fs = std::filesystem;
using namespace sessionrank;

namespace {

std::string file_digest(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::IoError, "cannot open " + path.string());
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (std::istreambuf_iterator<char> it(in), end; it != end; ++it) {
    h ^= static_cast<unsigned char>(*it);
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

Json store_json(const StoreConfig& s) {
  return Json{{"inactivity_timeout_ms", s.inactivity_timeout_ms},
              {"past_sessions_k", s.past_sessions_k},
              {"max_events_per_member", s.max_events_per_member},
              {"retention_ms", s.retention_ms}};
}

Json model_json(const ModelConfig& c) {
  return Json{{"variant", std::string(to_string(c.variant))},
              {"input_mode", c.input_mode == InputMode::insession ? "insession" : "baseline"},
              {"embed_dim", c.embed_dim},
              {"hidden_dim", c.hidden_dim},
              {"heads", c.heads},
              {"layers", c.layers},
              {"max_len", c.max_len},
              {"n_titles", c.n_titles},
              {"n_genres", c.n_genres},
              {"alpha", c.alpha},
              {"feature_schema", c.feature_schema}};
}

Json train_json(const TrainConfig& t) {
  return Json{{"adam", {{"lr", t.adam.lr}, {"beta1", t.adam.beta1}, {"beta2", t.adam.beta2}, {"eps", t.adam.eps}}},
              {"batch_size", t.batch_size},
              {"epochs", t.epochs},
              {"negatives_per_positive", t.negatives_per_positive},
              {"seed", t.seed},
              {"lambda", t.lambda},
              {"grad_clip_norm", t.grad_clip_norm}};
}

fs::path manifest_path_for(const fs::path& output) { return fs::path(output.string() + ".manifest.json"); }

// ---------------------------------------------------------------- simgen

struct SimgenArgs {
  std::string config;
  std::string out;
  std::optional<std::uint64_t> seed;
  std::optional<std::uint32_t> members, titles;
  std::optional<double> rho;
};

int run_simgen(const SimgenArgs& a) {
  Stopwatch sw;
  SimConfig config;
  if (!a.config.empty()) config = sim_config_from_json(read_json_file(a.config));
  if (a.seed) config.seed = *a.seed;
  if (a.members) config.n_members = *a.members;
  if (a.titles) config.n_titles = *a.titles;
  if (a.rho) config.intent_shift_prob = *a.rho;
  config.validate();
  Dataset ds = generate(config);
  const fs::path out(a.out);
  write_dataset(ds, out);
  RunManifest m;
  m.command = "simgen";
  m.config = to_json(config);
  m.seed = config.seed;
  if (!a.config.empty()) m.inputs.emplace_back("config", a.config);
  for (const char* f : {"catalog.jsonl", "events.jsonl", "members.jsonl"}) m.outputs.emplace_back(f, (out / f).string());
  m.wall_time_s = sw.seconds();
  write_json_file(out / "sim-manifest.json", to_json(m));
  std::cerr << "simgen: " << ds.catalog.size() << " titles, " << ds.members.size() << " members, " << ds.events.size()
            << " events -> " << out.string() << "\n";
  return 0;
}

// ----------------------------------------------------------------- train

struct TrainArgs {
  std::string data;
  std::string out;
  std::string metrics;
  std::string variant = "mlp";
  std::string mode = "insession";
  std::uint64_t seed = 7;
  std::size_t epochs = 5;
  std::size_t batch_size = 64;
  double lr = 1e-3;
  std::size_t negatives = 4;
  std::int64_t timeout_ms = 1'800'000;
  bool quiet = false;
};

int run_train(const TrainArgs& a) {
  Stopwatch sw;
  Dataset ds = load_dataset(a.data);
  StoreConfig store;
  store.inactivity_timeout_ms = a.timeout_ms;
  store.validate();
  TrainConfig tc;
  tc.seed = a.seed;
  tc.epochs = a.epochs;
  tc.batch_size = a.batch_size;
  tc.adam.lr = a.lr;
  tc.negatives_per_positive = a.negatives;
  tc.validate();
  ModelConfig mc;
  mc.variant = *parse_variant(a.variant);
  mc.input_mode = a.mode == "baseline" ? InputMode::baseline : InputMode::insession;

  Dataset split = training_split(ds, store);
  ExampleOptions eo;
  eo.negatives_per_positive = tc.negatives_per_positive;
  eo.seed = tc.seed;
  auto examples = make_examples(split, store, eo);
  std::cerr << "train: " << examples.size() << " examples, variant " << a.variant << " (" << a.mode << ")\n";
  auto progress = [&](std::size_t epoch, double loss) {
    if (!a.quiet) std::cerr << "  epoch " << epoch + 1 << "/" << tc.epochs << " loss " << loss << "\n";
  };
  TrainResult result = train(tc, examples, ds.catalog, mc, progress);

  const fs::path out(a.out);
  if (out.has_parent_path()) fs::create_directories(out.parent_path());
  save_model(result.model, out);
  const fs::path metrics = a.metrics.empty() ? out.parent_path() / "metrics.json" : fs::path(a.metrics);
  Json config{{"model", model_json(result.model.config)}, {"train", train_json(tc)}, {"store", store_json(store)}};
  write_json_file(metrics, Json{{"loss_trace", result.loss_trace},
                                {"config", config},
                                {"examples", examples.size()},
                                {"steps", result.steps}});
  RunManifest m;
  m.command = "train";
  m.config = config;
  m.seed = tc.seed;
  m.inputs.emplace_back("data", a.data);
  m.outputs.emplace_back("model", out.string());
  m.outputs.emplace_back("metrics", metrics.string());
  m.wall_time_s = sw.seconds();
  write_json_file(manifest_path_for(out), to_json(m));
  return 0;
}

// ------------------------------------------------------------------ eval

struct EvalArgs {
  std::string data;
  std::string model;
  std::string baseline;
  std::string out;
  std::uint64_t seed = 7;
  std::size_t resamples = 1000;
  std::int64_t timeout_ms = 1'800'000;
};

int run_eval(const EvalArgs& a) {
  Stopwatch sw;
  Dataset ds = load_dataset(a.data);
  StoreConfig store;
  store.inactivity_timeout_ms = a.timeout_ms;
  store.validate();
  auto catalog = std::make_shared<const Catalog>(ds.catalog);
  auto points = make_eval_points(ds, store);
  std::cerr << "eval: " << points.size() << " eval points\n";

  auto scorer_for = [&](const std::string& path) {
    auto model = std::make_shared<const RankerModel<float>>(load_model(path));
    return model_scorer(std::make_shared<const Ranker>(model, catalog));
  };
  MetricsReport candidate = evaluate(scorer_for(a.model), points, ds.catalog, fs::path(a.model).filename().string());
  MetricsReport popularity = evaluate(popularity_scorer(catalog), points, ds.catalog, "popularity");
  Json report{{"model", to_json(candidate)}, {"references", {to_json(popularity)}}};
  if (!a.baseline.empty()) {
    MetricsReport base = evaluate(scorer_for(a.baseline), points, ds.catalog, fs::path(a.baseline).filename().string());
    report["baseline"] = to_json(base);
    Json lifts = Json::array();
    for (const auto& l : compare(candidate, base, a.seed, a.resamples)) lifts.push_back(to_json(l));
    for (const auto& [slice, idx] : candidate.slice_points) {
      for (const auto& l : compare(candidate, base, a.seed, a.resamples, slice)) lifts.push_back(to_json(l));
    }
    report["lift"] = lifts;
  }
  write_json_file(a.out, report);
  RunManifest m;
  m.command = "eval";
  m.config = Json{{"store", store_json(store)}, {"bootstrap_resamples", a.resamples}};
  m.seed = a.seed;
  m.inputs.emplace_back("data", a.data);
  m.inputs.emplace_back("model", a.model);
  if (!a.baseline.empty()) m.inputs.emplace_back("baseline", a.baseline);
  m.outputs.emplace_back("report", a.out);
  m.wall_time_s = sw.seconds();
  write_json_file(manifest_path_for(a.out), to_json(m));
  std::cerr << "eval: mrr " << candidate.overall.mrr << " -> " << a.out << "\n";
  return 0;
}

// ----------------------------------------------------------------- serve

struct ServeArgs {
  std::string model;
  std::string baseline;
  std::string catalog;
  std::string host = "0.0.0.0";
  int port = 8080;
  std::string replay;
  std::string static_dir;
  std::string members;
  bool demo = false;
};

HttpService* g_server = nullptr;

extern "C" void on_signal(int) {
  if (g_server) g_server->stop();
}

int run_serve(const ServeArgs& a) {
  Stopwatch sw;
  ServiceConfig config;
  config.demo_mode = a.demo;
  config.static_dir = a.static_dir;
  apply_env_overrides(config);
  auto catalog = std::make_shared<Catalog>(load_catalog(a.catalog));
  auto model = std::make_shared<const RankerModel<float>>(load_model(a.model));
  catalog->set_genre_count(std::max<std::size_t>(catalog->genre_count(), model->config.n_genres));
  std::shared_ptr<const RankerModel<float>> baseline;
  if (!a.baseline.empty()) baseline = std::make_shared<const RankerModel<float>>(load_model(a.baseline));
  config.model_version = std::string(to_string(model->config.variant)) + "-" + file_digest(a.model).substr(0, 12);
  ServiceCore core(config, catalog, model, baseline);
  if (!a.replay.empty()) {
    std::size_t n = replay_events(core, a.replay);
    std::cerr << "serve: replayed " << n << " events for " << core.store().member_count() << " members\n";
  }
  HttpService http(core);
  if (!a.members.empty()) {
    const fs::path members = a.members;
    http.server().Get("/demo/members.jsonl", [members](const httplib::Request&, httplib::Response& res) {
      std::ifstream in(members);
      std::string body((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
      res.set_header("Cache-Control", "no-store");
      res.set_content(body, "application/x-ndjson");
    });
  }
  const int port = http.bind(a.host, a.port);
  RunManifest m;
  m.command = "serve";
  m.config = Json{{"store", store_json(config.store)}, {"demo_mode", config.demo_mode}, {"port", port},
                  {"model_version", config.model_version}};
  m.inputs.emplace_back("model", a.model);
  m.inputs.emplace_back("catalog", a.catalog);
  if (!a.baseline.empty()) m.inputs.emplace_back("baseline", a.baseline);
  if (!a.replay.empty()) m.inputs.emplace_back("events_replay", a.replay);
  m.wall_time_s = sw.seconds();
  write_json_file(manifest_path_for(a.model).replace_filename(fs::path(a.model).filename().string() +
                                                              ".serve-manifest.json"),
                  to_json(m));
  g_server = &http;
  std::signal(SIGINT, on_signal);
  std::signal(SIGTERM, on_signal);
  std::cerr << "serve: listening on " << a.host << ":" << port << " (" << config.model_version << ")\n";
  std::cout << "port " << port << std::endl;
  http.listen_after_bind();
  g_server = nullptr;
  return 0;
}

// -------------------------------------------------------------- loadtest

int run_load(const LoadTestConfig& config, const std::string& out) {
  Stopwatch sw;
  LoadTestReport report = run_loadtest(config);
  Json j = to_json(report);
  std::cout << j.dump(2) << std::endl;
  if (!out.empty()) {
    write_json_file(out, j);
    RunManifest m;
    m.command = "loadtest";
    m.config = Json{{"host", config.host},       {"port", config.port},   {"rps", config.rps},
                    {"duration_s", config.duration_s}, {"get_fraction", config.get_fraction},
                    {"members", config.n_members}, {"titles", config.n_titles}, {"k", config.k},
                    {"model", config.model},     {"workers", config.workers}};
    m.seed = config.seed;
    m.outputs.emplace_back("report", out);
    m.wall_time_s = sw.seconds();
    write_json_file(manifest_path_for(out), to_json(m));
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"sessionrank: in-session adaptive pre-query ranking"};
  app.require_subcommand(1);
  const std::vector<std::string> variants = {"mlp", "rnn", "lstm", "bilstm", "transformer"};

  SimgenArgs sim;
  auto* simgen = app.add_subcommand("simgen", "Generate a synthetic catalog, members and event stream");
  simgen->add_option("--config", sim.config, "JSON file overriding simulator defaults")->check(CLI::ExistingFile);
  simgen->add_option("--out", sim.out, "Output directory")->required();
  simgen->add_option("--seed", sim.seed, "Random seed (overrides the config file)");
  simgen->add_option("--members", sim.members, "Number of members");
  simgen->add_option("--titles", sim.titles, "Number of titles");
  simgen->add_option("--rho", sim.rho, "Probability that a session has a shifted intent")->check(CLI::Range(0.0, 1.0));

  TrainArgs tr;
  auto* train_cmd = app.add_subcommand("train", "Train a ranker on a dataset (final sessions held out)");
  train_cmd->add_option("--data", tr.data, "Dataset directory")->required()->check(CLI::ExistingDirectory);
  train_cmd->add_option("--out", tr.out, "Model file to write")->required();
  train_cmd->add_option("--metrics", tr.metrics, "metrics.json path (default: next to the model)");
  train_cmd->add_option("--variant", tr.variant, "Encoder variant")->check(CLI::IsMember(variants))->capture_default_str();
  train_cmd->add_option("--mode", tr.mode, "insession, or baseline (session inputs masked)")
      ->check(CLI::IsMember({"insession", "baseline"}))
      ->capture_default_str();
  train_cmd->add_option("--seed", tr.seed, "Seed for init, negatives and shuffling")->capture_default_str();
  train_cmd->add_option("--epochs", tr.epochs)->check(CLI::PositiveNumber)->capture_default_str();
  train_cmd->add_option("--batch-size", tr.batch_size)->check(CLI::PositiveNumber)->capture_default_str();
  train_cmd->add_option("--lr", tr.lr, "Adam learning rate")->check(CLI::PositiveNumber)->capture_default_str();
  train_cmd->add_option("--negatives", tr.negatives, "Negatives per positive")->check(CLI::PositiveNumber)->capture_default_str();
  train_cmd->add_option("--timeout-ms", tr.timeout_ms, "Session inactivity timeout")->check(CLI::PositiveNumber)->capture_default_str();
  train_cmd->add_flag("--quiet", tr.quiet, "No per-epoch progress");

  EvalArgs ev;
  auto* eval_cmd = app.add_subcommand("eval", "Leave-last-positive-out evaluation, with optional paired lift");
  eval_cmd->add_option("--data", ev.data, "Dataset directory")->required()->check(CLI::ExistingDirectory);
  eval_cmd->add_option("--model", ev.model, "Model to evaluate")->required()->check(CLI::ExistingFile);
  eval_cmd->add_option("--baseline", ev.baseline, "Baseline model for the lift report")->check(CLI::ExistingFile);
  eval_cmd->add_option("--out", ev.out, "report.json path")->required();
  eval_cmd->add_option("--seed", ev.seed, "Bootstrap seed")->capture_default_str();
  eval_cmd->add_option("--resamples", ev.resamples, "Bootstrap resamples")->check(CLI::PositiveNumber)->capture_default_str();
  eval_cmd->add_option("--timeout-ms", ev.timeout_ms, "Session inactivity timeout")->check(CLI::PositiveNumber)->capture_default_str();

  ServeArgs sv;
  auto* serve = app.add_subcommand("serve", "Run the HTTP ranking service");
  serve->add_option("--model", sv.model, "Model file")->required()->check(CLI::ExistingFile);
  serve->add_option("--baseline-model", sv.baseline, "Separate baseline model (default: same weights, session inputs masked)")
      ->check(CLI::ExistingFile);
  serve->add_option("--catalog", sv.catalog, "catalog.jsonl")->required()->check(CLI::ExistingFile);
  serve->add_option("--host", sv.host)->capture_default_str();
  serve->add_option("--port", sv.port, "Port (0 picks a free one)")->check(CLI::Range(0, 65535))->capture_default_str();
  serve->add_option("--events-replay", sv.replay, "events.jsonl to ingest before serving")->check(CLI::ExistingFile);
  serve->add_flag("--demo", sv.demo, "Demo mode: honor the X-Demo-Now-Ms header");
  serve->add_option("--static", sv.static_dir, "Directory served under /demo")->check(CLI::ExistingDirectory);
  serve->add_option("--members", sv.members, "members.jsonl exposed at /demo/members.jsonl")->check(CLI::ExistingFile);

  LoadTestConfig lt;
  std::string lt_out;
  auto* load = app.add_subcommand("loadtest", "Open-loop load against a running service (70% GET / 30% POST)");
  load->add_option("--host", lt.host)->capture_default_str();
  load->add_option("--port", lt.port)->check(CLI::Range(1, 65535))->capture_default_str();
  load->add_option("--rps", lt.rps, "Requests per second")->check(CLI::NonNegativeNumber)->capture_default_str();
  load->add_option("--duration", lt.duration_s, "Seconds")->check(CLI::PositiveNumber)->capture_default_str();
  load->add_option("--members", lt.n_members, "Member ids drawn from 1..N")->check(CLI::PositiveNumber)->capture_default_str();
  load->add_option("--titles", lt.n_titles, "Title ids drawn from 1..N")->check(CLI::PositiveNumber)->capture_default_str();
  load->add_option("--k", lt.k)->check(CLI::Range(1, 100))->capture_default_str();
  load->add_option("--model", lt.model)->check(CLI::IsMember({"insession", "baseline"}))->capture_default_str();
  load->add_option("--workers", lt.workers, "Concurrent client connections")->check(CLI::PositiveNumber)->capture_default_str();
  load->add_option("--seed", lt.seed)->capture_default_str();
  load->add_option("--out", lt_out, "Write the report JSON here too");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    if (e.get_name() == "ExtrasError" || e.get_name() == "RequiredError") std::cerr << app.help();
    return 2;
  }

  try {
    if (*simgen) return run_simgen(sim);
    if (*train_cmd) return run_train(tr);
    if (*eval_cmd) return run_eval(ev);
    if (*serve) return run_serve(sv);
    if (*load) return run_load(lt, lt_out);
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 2;
}
