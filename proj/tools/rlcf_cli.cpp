// rlcf command line: pretrain, genbench, run, sweep, report.
#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "rlcf/experiment.hpp"

namespace {

using rlcf::ConfigError;
using rlcf::KeyValues;

// Merges `--key value` / `--key=value` pairs over the config file.
KeyValues collect(const std::string& config_path, const std::vector<std::string>& extras) {
  KeyValues kv;
  if (!config_path.empty()) kv = rlcf::read_config_file(config_path);
  for (std::size_t i = 0; i < extras.size(); ++i) {
    std::string a = extras[i];
    if (a.rfind("--", 0) != 0) throw ConfigError("unexpected argument '" + a + "'");
    a = a.substr(2);
    std::string value;
    if (const auto eq = a.find('='); eq != std::string::npos) {
      value = a.substr(eq + 1);
      a.resize(eq);
    } else {
      if (i + 1 >= extras.size()) throw ConfigError("flag --" + a + " needs a value");
      value = extras[++i];
    }
    kv[a] = value;
  }
  return kv;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Test-time adaptation with reward feedback on a synthetic shift benchmark"};
  app.require_subcommand(1);
  std::string config;
  auto add = [&](const char* name, const char* help) {
    CLI::App* s = app.add_subcommand(name, help);
    s->add_option("-c,--config", config, "key = value config file");
    s->allow_extras();
    return s;
  };
  CLI::App* pretrain = add("pretrain", "build benchmark, student, teacher and captioner checkpoints");
  CLI::App* genbench = add("genbench", "write the benchmark files only");
  CLI::App* run = add("run", "run one experiment");
  CLI::App* sweep = add("sweep", "grid over sweep_K / sweep_steps / sweep_lr / sweep_objective");
  CLI::App* report = app.add_subcommand("report", "aggregate run directories");
  std::vector<std::string> run_dirs;
  std::string report_out = "report";
  bool no_charts = false;
  report->add_option("runs", run_dirs, "run output directories")->required();
  report->add_option("-o,--out", report_out, "report directory");
  report->add_flag("--no-charts", no_charts, "skip the SVG charts");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : 1;
  }

  try {
    if (report->parsed()) {
      std::vector<std::filesystem::path> dirs(run_dirs.begin(), run_dirs.end());
      rlcf::write_report(dirs, report_out, !no_charts);
      std::cout << "report written to " << report_out << '\n';
      return 0;
    }
    CLI::App* sub = app.get_subcommands().front();
    rlcf::ExperimentConfig cfg = rlcf::build_config(collect(config, sub->remaining()));
    if (sub == pretrain) {
      cfg.build_missing = true;
      rlcf::prepare_assets(cfg, &std::cerr, true);
    } else if (sub == genbench) {
      rlcf::write_benchmark(cfg, &std::cerr);
    } else if (sub == run) {
      const auto res = rlcf::run_experiment(cfg, &std::cerr);
      std::cout << rlcf::results_header() << '\n';
      for (const auto& r : res.rows) std::cout << rlcf::format_row(r) << '\n';
    } else if (sub == sweep) {
      const auto res = rlcf::run_sweep(cfg, &std::cerr);
      std::cout << "sweep table: " << res.results_path.string() << '\n';
    }
    return 0;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  }
}
