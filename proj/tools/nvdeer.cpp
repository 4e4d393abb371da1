#include "nvdeer/acceptance.hpp"
#include "nvdeer/errors.hpp"
#include "nvdeer/pipeline.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <iostream>
#include <map>
#include <string>
#include <vector>

namespace {

constexpr int kExitOk = 0;
constexpr int kExitSelftestFailed = 1;
constexpr int kExitConfig = 2;
constexpr int kExitData = 3;
constexpr int kExitNumeric = 4;

std::string flag_name(std::string key) {
  std::replace(key.begin(), key.end(), '_', '-');
  return "--" + key;
}

/// Per-key flag values; only flags given on the command line end up in the map.
struct Overrides {
  std::map<std::string, std::string> values;

  void attach(CLI::App* app) {
    for (const auto& k : nvdeer::RunConfig::schema()) {
      auto* opt = app->add_option_function<std::string>(
          flag_name(k.key), [this, key = k.key](const std::string& v) { values[key] = v; }, k.help);
      opt->group(k.section);
    }
  }
};

nvdeer::RunConfig build_config(const std::string& config_file, const Overrides& overrides,
                               const std::string& output_dir) {
  nvdeer::RunConfig config;
  if (!config_file.empty()) config.apply(nvdeer::RunConfig::parse_file(config_file));
  config.apply(overrides.values);
  if (!output_dir.empty()) config.output_dir = output_dir;
  config.validate();
  return config;
}

void print_result(const nvdeer::CommandResult& res) {
  std::cout << res.report.to_text();
  for (const auto& f : res.files) std::cerr << "wrote " << f.string() << "\n";
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Simulation and fitting of NV-DEER defect metrology experiments"};
  app.set_version_flag("--version", std::string(NVDEER_VERSION));
  app.require_subcommand(1);

  std::string config_file, output_dir;
  Overrides sim_overrides, fit_overrides;

  auto* sim = app.add_subcommand("simulate", "simulate an experiment and write data, summary and plot files");
  sim->add_option("-c,--config", config_file, "configuration file (key = value lines)")->check(CLI::ExistingFile);
  sim->add_option("-o,--output", output_dir, "output directory");
  sim_overrides.attach(sim);

  std::vector<std::string> data_files;
  auto* fit = app.add_subcommand("fit", "fit data files and write stage artifacts and a fit report");
  fit->add_option("-c,--config", config_file, "configuration file (key = value lines)")->check(CLI::ExistingFile);
  fit->add_option("-o,--output", output_dir, "output directory");
  fit->add_option("data", data_files, "data files written by 'simulate' or in the same format")->required();
  fit_overrides.attach(fit);

  std::vector<std::string> result_files;
  std::string report_dir = "nvdeer_report";
  auto* report = app.add_subcommand("report", "consolidate fit reports into dose tables");
  report->add_option("-o,--output", report_dir, "output directory");
  report->add_option("results", result_files, "fit_report.txt files")->required();

  std::vector<int> only;
  std::string work_dir;
  auto* selftest = app.add_subcommand("selftest", "run the acceptance suite and print a pass/fail table");
  selftest->add_option("--only", only, "criteria to run (1-9)")->check(CLI::Range(1, 9));
  selftest->add_option("--work-dir", work_dir, "scratch directory for the end-to-end criterion");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitConfig;
  }

  try {
    if (*sim) {
      print_result(nvdeer::cmd_simulate(build_config(config_file, sim_overrides, output_dir)));
    } else if (*fit) {
      std::vector<std::filesystem::path> paths(data_files.begin(), data_files.end());
      print_result(nvdeer::cmd_fit(build_config(config_file, fit_overrides, output_dir), paths));
    } else if (*report) {
      std::vector<std::filesystem::path> paths(result_files.begin(), result_files.end());
      print_result(nvdeer::cmd_report(paths, report_dir));
    } else if (*selftest) {
      nvdeer::AcceptanceOptions opts;
      opts.only = only;
      opts.work_dir = work_dir;
      const auto results = nvdeer::run_acceptance(opts);
      std::cout << nvdeer::format_acceptance(results);
      const bool ok = std::all_of(results.begin(), results.end(), [](const auto& r) { return r.passed; });
      std::cout << (ok ? "selftest passed" : "selftest FAILED") << "\n";
      return ok ? kExitOk : kExitSelftestFailed;
    }
  } catch (const nvdeer::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const nvdeer::InvalidArgument& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const nvdeer::InvalidData& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return kExitData;
  } catch (const nvdeer::NumericFailure& e) {
    std::cerr << "numeric failure: " << e.what() << "\n";
    return kExitNumeric;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitNumeric;
  }
  return kExitOk;
}
