// nowcast-xai: drives the pipeline stages and the HTTP service.

#include <cstdio>
#include <iostream>

#include <CLI11.hpp>

#include "nowcast/grdf.hpp"
#include "nowcast/service.hpp"

namespace {

using namespace nowcast;
namespace fs = std::filesystem;

constexpr int kExitOk = 0;
constexpr int kExitFailure = 1;
constexpr int kExitValidation = 2;

struct Globals {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
  bool quiet = false;
};

ServiceConfig load_config(const Globals& g) {
  ServiceConfig cfg;
  if (!g.config.empty()) {
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(read_text_file(g.config));
    } catch (const nlohmann::json::exception& e) {
      throw InvalidSpec("config is not valid JSON: " + std::string(e.what()));
    } catch (const std::exception& e) {
      throw InvalidSpec("cannot read config " + g.config + ": " + e.what());
    }
    cfg = ServiceConfig::from_json(j);
  }
  if (g.seed) cfg.seed = *g.seed;
  cfg.validate();
  return cfg;
}

RunStore store_of(const Globals& g) { return RunStore(g.out.empty() ? RunStore::default_root() : fs::path(g.out)); }

int report_record(const RunRecord& rec, Stage stage) {
  if (rec.status == RunStatus::Failed) {
    std::cerr << "run " << rec.run_id << " failed at stage " << rec.failed_stage << ": " << rec.error << "\n";
    return rec.error_kind == "validation" ? kExitValidation : kExitFailure;
  }
  std::cout << "run " << rec.run_id << " " << status_name(rec.status) << " (stage " << stage_name(stage)
            << " complete)\n";
  return kExitOk;
}

int run_stage_cmd(const Globals& g, Stage stage) {
  const ServiceConfig cfg = load_config(g);
  const RunStore store = store_of(g);
  ProgressFn progress;
  if (!g.quiet) progress = [](const std::string& m) { std::cerr << "  " << m << "\n"; };
  const RunRecord rec = run_stage(store, cfg, stage, progress);
  const int code = report_record(rec, stage);
  if (code == kExitOk && stage == Stage::Train) {
    for (const char* k : {"weights.segmentation", "weights.classifier"}) {
      if (auto it = rec.artifacts.find(k); it != rec.artifacts.end()) {
        std::cout << k << " " << it->second.sha256 << "\n";
      }
    }
  }
  return code;
}

std::string resolve_run_id(const Globals& g, const std::string& run_id) {
  if (!run_id.empty()) return run_id;
  return load_config(g).run_id();
}

int report_cmd(const Globals& g, const std::string& run_id_opt, const std::string& format, const std::string& table) {
  const RunStore store = store_of(g);
  const std::string run_id = resolve_run_id(g, run_id_opt);
  const auto rec = store.load(run_id);
  if (!rec) {
    std::cerr << "unknown run " << run_id << " under " << store.root() << "\n";
    return kExitValidation;
  }
  if (rec->status != RunStatus::Done) {
    std::cerr << "run " << run_id << " is " << status_name(rec->status)
              << "; complete it with `nowcast-xai run` before exporting reports\n";
    return kExitFailure;
  }
  const fs::path dir = store.run_dir(run_id);
  fs::path file;
  if (table == "stratified") file = dir / "reports" / ("stratified." + format);
  else if (table == "ece") file = dir / "calibration" / ("ece." + format);
  else file = dir / "explain" / "deletion.json";
  if (table == "deletion" && format == "csv") {
    std::cerr << "the deletion table is only available as json\n";
    return kExitValidation;
  }
  const auto bytes = read_file_bytes(file);
  std::fwrite(bytes.data(), 1, bytes.size(), stdout);
  return kExitOk;
}

int serve_cmd(const Globals& g, const std::string& run_id_opt, const std::string& addr, const std::string& static_dir) {
  const RunStore store = store_of(g);
  const std::string run_id = resolve_run_id(g, run_id_opt);
  const auto rec = store.load(run_id);
  if (!rec) {
    std::cerr << "unknown run " << run_id << " under " << store.root() << "\n";
    return kExitValidation;
  }
  if (rec->status != RunStatus::Done) {
    std::cerr << "run " << run_id << " is " << status_name(rec->status)
              << "; the service only serves finished runs. Complete it first with\n"
              << "  nowcast-xai run" << (g.config.empty() ? "" : " --config " + g.config)
              << (g.out.empty() ? "" : " --out " + g.out) << "\n";
    return kExitFailure;
  }
  ServeOptions opts;
  const auto colon = addr.rfind(':');
  if (colon == std::string::npos) throw InvalidParameter("--addr must be host:port");
  opts.host = addr.substr(0, colon);
  try {
    opts.port = std::stoi(addr.substr(colon + 1));
  } catch (const std::exception&) {
    throw InvalidParameter("--addr must be host:port");
  }
  if (!static_dir.empty()) opts.static_dir = fs::path(static_dir);
  const ApiService api(store, run_id);
  std::cerr << "serving run " << run_id << " on http://" << opts.host << ":" << opts.port << "/v1\n";
  serve(api, opts);
  return kExitOk;
}

int runs_cmd(const Globals& g) {
  for (const auto& r : store_of(g).list()) {
    std::cout << r.run_id << " " << status_name(r.status);
    if (r.status == RunStatus::Failed) std::cout << " (" << r.failed_stage << ": " << r.error << ")";
    std::cout << "\n";
  }
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Synthetic radar nowcasting with explanation and calibration tooling"};
  app.require_subcommand(1);
  Globals g;
  app.add_option("--config", g.config, "Pipeline configuration JSON")->check(CLI::ExistingFile);
  app.add_option("--seed", g.seed, "Override the configuration seed");
  app.add_option("--out", g.out, "Run store root (default: $NOWCAST_XAI_HOME or ./nowcast-xai-home)");
  app.add_flag("-q,--quiet", g.quiet, "No progress output");

  std::optional<Stage> stage;
  auto stage_cmd = [&](const char* name, Stage s, const char* help) {
    app.add_subcommand(name, help)->callback([&stage, s] { stage = s; });
  };
  stage_cmd("gen-data", Stage::GenData, "Generate the synthetic dataset and split");
  stage_cmd("train", Stage::Train, "Train the segmentation network and the rain-type classifier");
  stage_cmd("calibrate", Stage::Calibrate, "Fit calibrators per lead time and write ECE reports");
  stage_cmd("explain", Stage::Explain, "Deletion benchmark and receptive-field estimate");
  auto* run = app.add_subcommand("run", "Run every remaining stage");

  std::string run_id, format = "csv", table = "stratified", addr = "127.0.0.1:8080", static_dir;
  auto* report = app.add_subcommand("report", "Write the stratified report (or print a finished run's tables)");
  report->add_option("--run-id", run_id, "Print tables of an existing run instead of running the stage");
  report->add_option("--format", format, "Output format")->check(CLI::IsMember({"csv", "json"}));
  report->add_option("--table", table, "Table to print")->check(CLI::IsMember({"stratified", "ece", "deletion"}));
  auto* serve_sc = app.add_subcommand("serve", "Serve the /v1 API for a finished run");
  serve_sc->add_option("--addr", addr, "host:port to listen on");
  serve_sc->add_option("--run-id", run_id, "Run to serve (default: the run of --config)");
  serve_sc->add_option("--static", static_dir, "Directory of static UI files mounted at /");
  auto* runs = app.add_subcommand("runs", "List runs in the store");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    std::cerr << app.help();
    return kExitValidation;
  }

  try {
    if (stage) return run_stage_cmd(g, *stage);
    if (run->parsed()) return run_stage_cmd(g, Stage::Report);
    if (report->parsed()) {
      if (!run_id.empty() || report->count("--format") || report->count("--table")) {
        return report_cmd(g, run_id, format, table);
      }
      return run_stage_cmd(g, Stage::Report);
    }
    if (serve_sc->parsed()) return serve_cmd(g, run_id, addr, static_dir);
    if (runs->parsed()) return runs_cmd(g);
  } catch (const InvalidSpec& e) {
    std::cerr << "invalid configuration: " << e.what() << "\n";
    return kExitValidation;
  } catch (const InvalidParameter& e) {
    std::cerr << "invalid parameter: " << e.what() << "\n";
    return kExitValidation;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitFailure;
  }
  return kExitOk;
}
