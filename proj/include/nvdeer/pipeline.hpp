#pragma once

#include "nvdeer/dynamics.hpp"
#include "nvdeer/fitting.hpp"

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace nvdeer {

enum class Experiment {
  kDeerSpectrum,
  kDeerRabi,
  kDeerDecay,
  kHahn,
  kEseem,
  kSaturation,
  kPhotophysics,
  kDiffusion,
  kEpr,
};

std::string experiment_name(Experiment e);
/// Throws ConfigError for an unknown name.
Experiment parse_experiment(const std::string& name);

struct ConfigKey {
  std::string key;      // flat key, also the config-file key
  std::string section;  // group used in error paths, e.g. "field"
  std::string help;
};

/// Everything a run needs. Defaults follow the measurement conditions of the
/// nitrogen DEER data set.
struct RunConfig {
  Experiment experiment = Experiment::kDeerSpectrum;

  // field and drive
  double b0_mt = 37.2;
  double tilt_deg = 0.1;
  double rabi_mhz = 2.5;
  /// Drive frequency for rabi and decay runs; 0 picks the strongest P1 line.
  double f_b_mhz = 0.0;

  // DEER sequence
  double t_a_us = 20.0;   // 20 us for P1 DEER, 80 us for NV DEER
  double t_b_us = 0.2;    // DEER pulse length
  double t_b_delay_us = 20.0;  // T_B

  // sample
  double n_p1_ppb = 200.0;
  double n_x_ppb = 13.0;
  double n_nv_ppb = 0.0;
  double dose = 0.0;
  std::string growth_sector = "111";

  // simulation grids
  double f_min_mhz = 900.0;
  double f_max_mhz = 1200.0;
  double f_step_mhz = 0.5;
  double t_max_us = 2.0;      // rabi: longest pulse
  double t_step_us = 0.02;
  double t_b_delay_max_us = 200.0;  // decay: longest T_B
  int n_delay_points = 25;

  // noise
  double noise = 0.01;  // absolute, in units of the simulated signal
  std::uint64_t seed = 1;

  // fit options
  double window_mhz = 12.0;
  double off_resonant_mhz = 30.0;
  double p_b = 0.0;  // decay fit: 0 derives P_B from the line model

  // auxiliary experiments
  double beta = 0.03;
  int n_pulses = 15;
  double t2_us = 313.0;
  double stretch = 1.8;
  double eseem_f_mhz = 0.0;  // 0 derives f from the 13C Larmor frequency
  double f_sat = 100.0;
  double p_sat = 1.0;
  double single_f_sat = 0.0;  // 0 disables the NV count
  double r_vac_nm = 37.5;
  double anneal_s = 7200.0;
  double nv_count = 0.0;
  double volume_um3 = 0.0;  // overrides n_nv_ppb and nv_count when > 0
  double mass_mg = 11.0;
  double mass_ref_mg = 50.7;
  double n_ref_ppm = 68.0;
  double n_epr_ppb = 22.0;

  std::filesystem::path output_dir = "nvdeer_out";

  /// Throws ConfigError naming the offending field.
  void validate() const;
  /// Canonical key/value form (every field except output_dir).
  std::map<std::string, std::string> to_map() const;
  /// Applies keys from `values`; throws ConfigError on unknown keys or bad values.
  void apply(const std::map<std::string, std::string>& values);
  /// FNV-1a 64 of the canonical form, as 16 hex digits.
  std::string hash() const;

  /// Every settable key in canonical order.
  static const std::vector<ConfigKey>& schema();
  /// Reads "key = value" lines; '#' starts a comment and "[section]"
  /// headers are accepted and ignored. Throws ConfigError with line numbers.
  static std::map<std::string, std::string> parse_file(const std::filesystem::path& path);
};

/// A column of numbers with a unit.
struct Column {
  std::string name;
  std::string unit;
  std::vector<double> values;
};

/// Comma-separated text with a "# key: value" header. Equal column lengths.
struct DataSet {
  std::vector<Column> columns;
  std::map<std::string, std::string> metadata;

  std::size_t rows() const { return columns.empty() ? 0 : columns.front().values.size(); }
  const Column& column(const std::string& name) const;
  bool has_column(const std::string& name) const;
  /// Throws InvalidData on unequal lengths or missing units.
  void validate() const;
  /// Trace from two (three with sigma) named columns.
  SpectrumTrace trace(const std::string& x, const std::string& y, const std::string& sigma = "") const;

  std::string to_csv() const;
  void write(const std::filesystem::path& path) const;
  /// Throws InvalidData with the line number on malformed input.
  static DataSet parse(const std::string& text, const std::string& source = "<memory>");
  static DataSet read(const std::filesystem::path& path);
};

/// Ordered key/value report; rendered as "key = value" lines.
struct Report {
  std::vector<std::pair<std::string, std::string>> entries;

  void set(const std::string& key, const std::string& value);
  void set(const std::string& key, double value);
  std::optional<std::string> get(const std::string& key) const;
  std::string to_text() const;
  void write(const std::filesystem::path& path) const;
  static Report parse(const std::string& text, const std::string& source = "<memory>");
  static Report read(const std::filesystem::path& path);
};

/// Shortest round-trippable decimal form.
std::string format_number(double v);

struct CommandResult {
  Report report;
  std::vector<std::filesystem::path> files;
};

/// Runs the configured simulation and writes data, summary and plot sidecars
/// into config.output_dir.
CommandResult cmd_simulate(const RunConfig& config);

/// Fits the data files according to config.experiment. For deer-spectrum
/// the stages run in order peaks -> rabi -> concentration; the rabi stage
/// needs a deer-rabi data file among `data`.
CommandResult cmd_fit(const RunConfig& config, const std::vector<std::filesystem::path>& data);

/// Dose tables per species from fit reports, plus a diffusion summary.
CommandResult cmd_report(const std::vector<std::filesystem::path>& results,
                         const std::filesystem::path& output_dir);

/// Species lines of the P1 + X model at the configured field, used both by
/// the simulator and as fit seeds.
struct LineModel {
  std::vector<SpectralLine> p1;
  std::vector<SpectralLine> x;
  std::vector<SpectralLine> nv;
  /// P1 lines grouped into resolved resonances (outer four and the central group).
  std::vector<std::vector<SpectralLine>> p1_groups;
  int central_group = -1;
};

LineModel line_model(const RunConfig& config);

}  // namespace nvdeer
