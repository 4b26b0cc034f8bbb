// roughflow <command> --config <path> [--out <dir>] [--seed <u64>]

#include "roughflow/experiments.hpp"

#include <CLI11.hpp>

#include <chrono>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>

namespace fs = std::filesystem;
using namespace roughflow;

namespace {

enum Exit { kOk = 0, kInvariant = 1, kConfig = 2, kScenario = 3, kResource = 4, kOther = 5 };

int exit_code(ErrorKind k) {
  switch (k) {
    case ErrorKind::ConfigParse: return kConfig;
    case ErrorKind::UnknownScenario: return kScenario;
    case ErrorKind::OutOfChart:
    case ErrorKind::Resolution: return kResource;
    default: return kOther;
  }
}

void write_file(const fs::path& p, const std::string& text) {
  std::ofstream os(p, std::ios::binary);
  os << text;
  if (!os) throw Error(ErrorKind::Io, "cannot write " + p.string());
}

std::string utc_now() {
  const std::time_t t = std::time(nullptr);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", std::gmtime(&t));
  return buf;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"roughflow: numerical experiments on stochastic flows with rough drift"};
  std::string config, out_dir;
  std::uint64_t seed = 0;
  app.require_subcommand(1, 1);
  const std::vector<std::string> commands{"simulate", "stability", "invert", "transport",
                                          "lipschitz", "identities", "calibrate"};
  for (const auto& c : commands) {
    auto* sub = app.add_subcommand(c);
    sub->add_option("--config", config, "scenario config (JSON)")->required();
    sub->add_option("--out", out_dir, "output directory");
    sub->add_option("--seed", seed, "override seed_base");
  }
  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kConfig;
  }
  const std::string command = app.get_subcommands().front()->get_name();
  const bool seed_given = app.get_subcommands().front()->count("--seed") > 0;

  const std::string started = utc_now();
  const auto t0 = std::chrono::steady_clock::now();
  try {
    ScenarioConfig cfg = read_config_file(config);
    if (seed_given) cfg.seed_base = seed;
    fs::path dir = out_dir;
    if (dir.empty()) {
      const char* env = std::getenv("ROUGHFLOW_OUT");
      dir = env && *env ? fs::path(env) : cfg.output_dir.empty() ? fs::path("roughflow-out") : fs::path(cfg.output_dir);
      dir /= command;
    }
    fs::create_directories(dir);

    Outcome outcome;
    if (command == "simulate") outcome = run_simulate(cfg);
    else if (command == "stability") outcome = run_stability(cfg);
    else if (command == "invert") outcome = run_invert(cfg);
    else if (command == "transport") outcome = run_transport(cfg);
    else if (command == "identities") outcome = run_identities(cfg);
    else if (command == "lipschitz") {
      const auto cal = cfg.calibration_file.empty() ? load_calibration() : load_calibration(cfg.calibration_file);
      outcome = run_lipschitz(cfg, cal);
    } else {
      auto run = run_calibrate(cfg);
      write_file(dir / "calibration.json", run.calibration.to_json().dump(2) + "\n");
      outcome = std::move(run.outcome);
    }

    for (const auto& t : outcome.tables) {
      std::ostringstream os;
      t.write(os);
      write_file(dir / t.name, os.str());
    }
    const nlohmann::json summary = summary_json(command, cfg, outcome);
    write_file(dir / "summary.json", summary.dump(2) + "\n");
    const double wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    write_file(dir / "timings.json",
               nlohmann::json{{"command", command}, {"started_utc", started}, {"wall_seconds", wall}}.dump(2) + "\n");

    for (const auto& [name, pass] : outcome.invariants)
      std::cout << (pass ? "ok     " : "FAILED ") << name << "\n";
    std::cout << "summary: " << (dir / "summary.json").string() << "\n";
    return outcome.ok() ? kOk : kInvariant;
  } catch (const Error& e) {
    std::cerr << "roughflow: " << e.what() << "\n";
    return exit_code(e.kind());
  } catch (const std::exception& e) {
    std::cerr << "roughflow: " << e.what() << "\n";
    return kOther;
  }
}
