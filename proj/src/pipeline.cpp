#include "nvdeer/pipeline.hpp"

#include "nvdeer/errors.hpp"
#include "nvdeer/photophysics.hpp"
#include "nvdeer/units.hpp"

#include <json.hpp>

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <functional>
#include <iomanip>
#include <random>
#include <sstream>

#ifndef NVDEER_VERSION
#define NVDEER_VERSION "0.0.0"
#endif

namespace nvdeer {

namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// Experiments

namespace {

const std::vector<std::pair<Experiment, std::string>>& experiment_names() {
  static const std::vector<std::pair<Experiment, std::string>> names{
      {Experiment::kDeerSpectrum, "deer-spectrum"}, {Experiment::kDeerRabi, "deer-rabi"},
      {Experiment::kDeerDecay, "deer-decay"},       {Experiment::kHahn, "hahn"},
      {Experiment::kEseem, "eseem"},                {Experiment::kSaturation, "saturation"},
      {Experiment::kPhotophysics, "photophysics"},  {Experiment::kDiffusion, "diffusion"},
      {Experiment::kEpr, "epr"},
  };
  return names;
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : s) {
    if (c == sep) {
      out.push_back(trim(cur));
      cur.clear();
    } else {
      cur.push_back(c);
    }
  }
  out.push_back(trim(cur));
  return out;
}

bool parse_double(const std::string& text, double& out) {
  const std::string t = trim(text);
  if (t.empty()) return false;
  const char* first = t.data();
  if (*first == '+') ++first;
  const auto [ptr, ec] = std::from_chars(first, t.data() + t.size(), out);
  return ec == std::errc() && ptr == t.data() + t.size();
}

std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InvalidData("cannot open " + path.string());
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw ConfigError("cannot write " + path.string());
  out << text;
  if (!out) throw ConfigError("write failed for " + path.string());
}

}  // namespace

std::string experiment_name(Experiment e) {
  for (const auto& [k, v] : experiment_names()) {
    if (k == e) return v;
  }
  return "unknown";
}

Experiment parse_experiment(const std::string& name) {
  for (const auto& [k, v] : experiment_names()) {
    if (v == name) return k;
  }
  std::string all;
  for (const auto& [k, v] : experiment_names()) all += (all.empty() ? "" : ", ") + v;
  throw ConfigError("experiment: unknown value '" + name + "' (expected one of " + all + ")");
}

std::string format_number(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  if (v == 0.0) return "0";
  char buf[64];
  const auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, ptr);
}

// ---------------------------------------------------------------------------
// RunConfig

namespace {

struct KeyBinding {
  ConfigKey meta;
  std::function<std::string(const RunConfig&)> get;
  std::function<void(RunConfig&, const std::string&)> set;
};

KeyBinding real(const char* key, const char* section, const char* help, double RunConfig::*member) {
  return {{key, section, help},
          [member](const RunConfig& c) { return format_number(c.*member); },
          [member, key, section](RunConfig& c, const std::string& v) {
            double d = 0.0;
            if (!parse_double(v, d)) {
              throw ConfigError(std::string(section) + "." + key + ": expected a number, got '" + v + "'");
            }
            c.*member = d;
          }};
}

KeyBinding integer(const char* key, const char* section, const char* help, int RunConfig::*member) {
  return {{key, section, help},
          [member](const RunConfig& c) { return std::to_string(c.*member); },
          [member, key, section](RunConfig& c, const std::string& v) {
            int i = 0;
            const std::string t = trim(v);
            const auto [ptr, ec] = std::from_chars(t.data(), t.data() + t.size(), i);
            if (ec != std::errc() || ptr != t.data() + t.size() || t.empty()) {
              throw ConfigError(std::string(section) + "." + key + ": expected an integer, got '" + v + "'");
            }
            c.*member = i;
          }};
}

const std::vector<KeyBinding>& bindings() {
  static const std::vector<KeyBinding> b = [] {
    std::vector<KeyBinding> v;
    v.push_back({{"experiment", "run", "deer-spectrum|deer-rabi|deer-decay|hahn|eseem|saturation|photophysics|diffusion|epr"},
                 [](const RunConfig& c) { return experiment_name(c.experiment); },
                 [](RunConfig& c, const std::string& s) { c.experiment = parse_experiment(trim(s)); }});
    v.push_back(real("b0_mt", "field", "static field B0 (mT)", &RunConfig::b0_mt));
    v.push_back(real("tilt_deg", "field", "B0 tilt from [111] in the xz plane (deg)", &RunConfig::tilt_deg));
    v.push_back(real("rabi_mhz", "field", "Rabi frequency Omega of the DEER drive (MHz)", &RunConfig::rabi_mhz));
    v.push_back(real("f_b_mhz", "field", "DEER drive frequency for rabi/decay runs, 0 = strongest P1 line (MHz)",
                     &RunConfig::f_b_mhz));
    v.push_back(real("t_a_us", "sequence", "sensor echo half delay T_A (us)", &RunConfig::t_a_us));
    v.push_back(real("t_b_us", "sequence", "DEER pulse length t_B (us)", &RunConfig::t_b_us));
    v.push_back(real("t_b_delay_us", "sequence", "DEER pulse delay T_B (us)", &RunConfig::t_b_delay_us));
    v.push_back(real("n_p1_ppb", "sample", "P1 concentration (ppb)", &RunConfig::n_p1_ppb));
    v.push_back(real("n_x_ppb", "sample", "X defect concentration (ppb)", &RunConfig::n_x_ppb));
    v.push_back(real("n_nv_ppb", "sample", "NV concentration (ppb)", &RunConfig::n_nv_ppb));
    v.push_back(real("dose", "sample", "implantation dose (ions/spot)", &RunConfig::dose));
    v.push_back({{"growth_sector", "sample", "growth sector label"},
                 [](const RunConfig& c) { return c.growth_sector; },
                 [](RunConfig& c, const std::string& s) { c.growth_sector = trim(s); }});
    v.push_back(real("f_min_mhz", "grid", "spectrum start (MHz)", &RunConfig::f_min_mhz));
    v.push_back(real("f_max_mhz", "grid", "spectrum end (MHz)", &RunConfig::f_max_mhz));
    v.push_back(real("f_step_mhz", "grid", "spectrum step (MHz)", &RunConfig::f_step_mhz));
    v.push_back(real("t_max_us", "grid", "longest DEER pulse in rabi runs (us)", &RunConfig::t_max_us));
    v.push_back(real("t_step_us", "grid", "pulse length step in rabi runs (us)", &RunConfig::t_step_us));
    v.push_back(real("t_b_delay_max_us", "grid", "longest T_B in decay runs (us)", &RunConfig::t_b_delay_max_us));
    v.push_back(integer("n_delay_points", "grid", "number of T_B points in decay runs", &RunConfig::n_delay_points));
    v.push_back(real("noise", "noise", "Gaussian noise added to simulated signals (absolute)", &RunConfig::noise));
    v.push_back({{"seed", "noise", "random seed"},
                 [](const RunConfig& c) { return std::to_string(c.seed); },
                 [](RunConfig& c, const std::string& s) {
                   const std::string t = trim(s);
                   std::uint64_t u = 0;
                   const auto [ptr, ec] = std::from_chars(t.data(), t.data() + t.size(), u);
                   if (ec != std::errc() || ptr != t.data() + t.size() || t.empty()) {
                     throw ConfigError("noise.seed: expected a non-negative integer, got '" + s + "'");
                   }
                   c.seed = u;
                 }});
    v.push_back(real("window_mhz", "fit", "half width of the per-line fit window (MHz)", &RunConfig::window_mhz));
    v.push_back(real("off_resonant_mhz", "fit", "off-resonant reference distance from the nearest line (MHz)",
                     &RunConfig::off_resonant_mhz));
    v.push_back(real("p_b", "fit", "population transfer for decay fits, 0 = from the line model", &RunConfig::p_b));
    v.push_back(real("beta", "photophysics", "optical pumping ratio beta", &RunConfig::beta));
    v.push_back(integer("n_pulses", "photophysics", "number of laser pulses", &RunConfig::n_pulses));
    v.push_back(real("t2_us", "hahn", "coherence time T2 (us)", &RunConfig::t2_us));
    v.push_back(real("stretch", "hahn", "stretch exponent n", &RunConfig::stretch));
    v.push_back(real("eseem_f_mhz", "eseem", "modulation frequency, 0 = from the 13C Larmor frequency (MHz)",
                     &RunConfig::eseem_f_mhz));
    v.push_back(real("f_sat", "saturation", "PL at saturation (kcps)", &RunConfig::f_sat));
    v.push_back(real("p_sat", "saturation", "saturation power (mW)", &RunConfig::p_sat));
    v.push_back(real("single_f_sat", "saturation", "single-NV F_sat for the NV count, 0 = off (kcps)",
                     &RunConfig::single_f_sat));
    v.push_back(real("r_vac_nm", "diffusion", "vacancy distribution radius (nm)", &RunConfig::r_vac_nm));
    v.push_back(real("anneal_s", "diffusion", "annealing time (s)", &RunConfig::anneal_s));
    v.push_back(real("nv_count", "diffusion", "number of NV centers in the spot", &RunConfig::nv_count));
    v.push_back(real("volume_um3", "diffusion", "NV ensemble volume, overrides n_nv_ppb/nv_count (um^3)",
                     &RunConfig::volume_um3));
    v.push_back(real("mass_mg", "epr", "sample mass (mg)", &RunConfig::mass_mg));
    v.push_back(real("mass_ref_mg", "epr", "reference mass (mg)", &RunConfig::mass_ref_mg));
    v.push_back(real("n_ref_ppm", "epr", "reference P1 concentration (ppm)", &RunConfig::n_ref_ppm));
    v.push_back(real("n_epr_ppb", "epr", "simulated sample P1 concentration (ppb)", &RunConfig::n_epr_ppb));
    return v;
  }();
  return b;
}

void require(bool ok, const char* path, const std::string& what, double value) {
  if (!ok) throw ConfigError(std::string(path) + ": " + what + " (got " + format_number(value) + ")");
}

}  // namespace

const std::vector<ConfigKey>& RunConfig::schema() {
  static const std::vector<ConfigKey> keys = [] {
    std::vector<ConfigKey> k;
    for (const auto& b : bindings()) k.push_back(b.meta);
    return k;
  }();
  return keys;
}

void RunConfig::validate() const {
  require(b0_mt > 0.0, "field.b0_mt", "must be > 0", b0_mt);
  require(tilt_deg >= 0.0 && tilt_deg < 90.0, "field.tilt_deg", "must lie in [0, 90)", tilt_deg);
  require(rabi_mhz > 0.0, "field.rabi_mhz", "must be > 0", rabi_mhz);
  require(f_b_mhz >= 0.0, "field.f_b_mhz", "must be >= 0", f_b_mhz);
  require(t_a_us > 0.0, "sequence.t_a_us", "must be > 0", t_a_us);
  require(t_b_us > 0.0, "sequence.t_b_us", "must be > 0", t_b_us);
  require(t_b_delay_us >= 0.0, "sequence.t_b_delay_us", "must be >= 0", t_b_delay_us);
  require(n_p1_ppb >= 0.0, "sample.n_p1_ppb", "must be >= 0", n_p1_ppb);
  require(n_x_ppb >= 0.0, "sample.n_x_ppb", "must be >= 0", n_x_ppb);
  require(n_nv_ppb >= 0.0, "sample.n_nv_ppb", "must be >= 0", n_nv_ppb);
  require(dose >= 0.0, "sample.dose", "must be >= 0", dose);
  require(f_step_mhz > 0.0, "grid.f_step_mhz", "must be > 0", f_step_mhz);
  require(f_max_mhz > f_min_mhz, "grid.f_max_mhz", "must exceed grid.f_min_mhz", f_max_mhz);
  require(t_max_us > 0.0, "grid.t_max_us", "must be > 0", t_max_us);
  require(t_step_us > 0.0 && t_step_us < t_max_us, "grid.t_step_us", "must lie in (0, t_max_us)", t_step_us);
  require(t_b_delay_max_us > 0.0, "grid.t_b_delay_max_us", "must be > 0", t_b_delay_max_us);
  require(n_delay_points >= 8, "grid.n_delay_points", "must be >= 8", n_delay_points);
  require(noise >= 0.0, "noise.noise", "must be >= 0", noise);
  require(window_mhz > 0.0, "fit.window_mhz", "must be > 0", window_mhz);
  require(off_resonant_mhz > 0.0, "fit.off_resonant_mhz", "must be > 0", off_resonant_mhz);
  require(p_b >= 0.0 && p_b <= 1.0, "fit.p_b", "must lie in [0, 1]", p_b);
  require(beta >= 0.0 && beta <= 1.0, "photophysics.beta", "must lie in [0, 1]", beta);
  require(n_pulses >= 1, "photophysics.n_pulses", "must be >= 1", n_pulses);
  require(t2_us > 0.0, "hahn.t2_us", "must be > 0", t2_us);
  require(stretch > 0.0, "hahn.stretch", "must be > 0", stretch);
  require(eseem_f_mhz >= 0.0, "eseem.eseem_f_mhz", "must be >= 0", eseem_f_mhz);
  require(f_sat > 0.0, "saturation.f_sat", "must be > 0", f_sat);
  require(p_sat > 0.0, "saturation.p_sat", "must be > 0", p_sat);
  require(single_f_sat >= 0.0, "saturation.single_f_sat", "must be >= 0", single_f_sat);
  require(r_vac_nm > 0.0, "diffusion.r_vac_nm", "must be > 0", r_vac_nm);
  require(anneal_s > 0.0, "diffusion.anneal_s", "must be > 0", anneal_s);
  require(nv_count >= 0.0, "diffusion.nv_count", "must be >= 0", nv_count);
  require(volume_um3 >= 0.0, "diffusion.volume_um3", "must be >= 0", volume_um3);
  require(mass_mg > 0.0, "epr.mass_mg", "must be > 0", mass_mg);
  require(mass_ref_mg > 0.0, "epr.mass_ref_mg", "must be > 0", mass_ref_mg);
  require(n_ref_ppm > 0.0, "epr.n_ref_ppm", "must be > 0", n_ref_ppm);
  require(n_epr_ppb >= 0.0, "epr.n_epr_ppb", "must be >= 0", n_epr_ppb);
  if (experiment == Experiment::kDiffusion && volume_um3 <= 0.0) {
    if (!(n_nv_ppb > 0.0 && nv_count > 0.0)) {
      throw ConfigError("diffusion: set diffusion.volume_um3, or both sample.n_nv_ppb and diffusion.nv_count");
    }
  }
  if (experiment == Experiment::kDeerSpectrum && n_p1_ppb + n_x_ppb + n_nv_ppb > 0.0 && t_b_delay_us <= 0.0) {
    // a zero delay is allowed; it gives a flat spectrum
  }
}

std::map<std::string, std::string> RunConfig::to_map() const {
  std::map<std::string, std::string> m;
  for (const auto& b : bindings()) m[b.meta.key] = b.get(*this);
  return m;
}

void RunConfig::apply(const std::map<std::string, std::string>& values) {
  for (const auto& [key, value] : values) {
    const auto it = std::find_if(bindings().begin(), bindings().end(), [&](const auto& b) { return b.meta.key == key; });
    if (it == bindings().end()) throw ConfigError("unknown configuration key '" + key + "'");
    it->set(*this, value);
  }
}

std::string RunConfig::hash() const {
  std::uint64_t h = 14695981039346656037ull;
  for (const auto& b : bindings()) {
    const std::string line = b.meta.key + "=" + b.get(*this) + "\n";
    for (unsigned char c : line) {
      h ^= c;
      h *= 1099511628211ull;
    }
  }
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << h;
  return os.str();
}

std::map<std::string, std::string> RunConfig::parse_file(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path.string());
  std::map<std::string, std::string> out;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    std::string body = trim(hash == std::string::npos ? line : line.substr(0, hash));
    if (body.empty()) continue;
    if (body.front() == '[') {
      if (body.back() != ']') throw ConfigError(path.string() + ":" + std::to_string(lineno) + ": malformed section header");
      continue;
    }
    const auto eq = body.find('=');
    if (eq == std::string::npos) {
      throw ConfigError(path.string() + ":" + std::to_string(lineno) + ": expected 'key = value'");
    }
    std::string key = trim(body.substr(0, eq));
    std::string value = trim(body.substr(eq + 1));
    std::replace(key.begin(), key.end(), '-', '_');
    if (value.size() >= 2 && value.front() == '"' && value.back() == '"') value = value.substr(1, value.size() - 2);
    if (key.empty()) throw ConfigError(path.string() + ":" + std::to_string(lineno) + ": empty key");
    const bool known = std::any_of(bindings().begin(), bindings().end(), [&](const auto& b) { return b.meta.key == key; });
    if (!known) throw ConfigError(path.string() + ":" + std::to_string(lineno) + ": unknown key '" + key + "'");
    out[key] = value;
  }
  return out;
}

// ---------------------------------------------------------------------------
// DataSet

const Column& DataSet::column(const std::string& name) const {
  for (const auto& c : columns) {
    if (c.name == name) return c;
  }
  throw InvalidData("data set has no column '" + name + "'");
}

bool DataSet::has_column(const std::string& name) const {
  return std::any_of(columns.begin(), columns.end(), [&](const auto& c) { return c.name == name; });
}

void DataSet::validate() const {
  if (columns.empty()) throw InvalidData("data set has no columns");
  for (const auto& c : columns) {
    if (c.values.size() != columns.front().values.size()) throw InvalidData("column '" + c.name + "' has a different length");
    if (c.unit.empty()) throw InvalidData("column '" + c.name + "' has no unit");
  }
}

SpectrumTrace DataSet::trace(const std::string& x, const std::string& y, const std::string& sigma) const {
  SpectrumTrace t;
  const auto& cx = column(x);
  const auto& cy = column(y);
  t.x = cx.values;
  t.y = cy.values;
  t.x_name = cx.name;
  t.x_unit = cx.unit;
  t.y_name = cy.name;
  if (!sigma.empty() && has_column(sigma)) {
    t.sigma = column(sigma).values;
    if (std::any_of(t.sigma.begin(), t.sigma.end(), [](double s) { return !(s > 0.0); })) t.sigma.clear();
  }
  t.validate();
  return t;
}

std::string DataSet::to_csv() const {
  validate();
  std::ostringstream os;
  os << "# nvdeer data\n";
  for (const auto& [k, v] : metadata) {
    if (k == "units") continue;
    os << "# " << k << ": " << v << "\n";
  }
  os << "# units: ";
  for (std::size_t i = 0; i < columns.size(); ++i) os << (i ? "," : "") << columns[i].unit;
  os << "\n";
  for (std::size_t i = 0; i < columns.size(); ++i) os << (i ? "," : "") << columns[i].name;
  os << "\n";
  for (std::size_t r = 0; r < rows(); ++r) {
    for (std::size_t i = 0; i < columns.size(); ++i) os << (i ? "," : "") << format_number(columns[i].values[r]);
    os << "\n";
  }
  return os.str();
}

void DataSet::write(const fs::path& path) const { write_text(path, to_csv()); }

DataSet DataSet::parse(const std::string& text, const std::string& source) {
  DataSet ds;
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  bool have_header = false;
  std::vector<std::string> units;
  int units_line = 0;
  auto fail = [&](const std::string& msg) { throw InvalidData(source + ":" + std::to_string(lineno) + ": " + msg); };
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (trim(line).empty()) continue;
    if (line.front() == '#') {
      const std::string body = line.substr(1);
      const auto colon = body.find(':');
      if (colon == std::string::npos) continue;
      const std::string key = trim(body.substr(0, colon));
      const std::string value = trim(body.substr(colon + 1));
      if (key == "units") {
        units = split(value, ',');
        units_line = lineno;
      } else if (!key.empty()) {
        ds.metadata[key] = value;
      }
      continue;
    }
    if (!have_header) {
      for (const auto& name : split(line, ',')) {
        if (name.empty()) fail("empty column name");
        ds.columns.push_back({name, "", {}});
      }
      if (units.size() != ds.columns.size()) {
        if (units_line == 0) fail("missing '# units:' header line before the column names");
        fail("units line " + std::to_string(units_line) + " lists " + std::to_string(units.size()) + " units for " +
             std::to_string(ds.columns.size()) + " columns");
      }
      for (std::size_t i = 0; i < units.size(); ++i) {
        if (units[i].empty()) fail("empty unit for column '" + ds.columns[i].name + "'");
        ds.columns[i].unit = units[i];
      }
      have_header = true;
      continue;
    }
    const auto fields = split(line, ',');
    if (fields.size() != ds.columns.size()) {
      fail("expected " + std::to_string(ds.columns.size()) + " fields, got " + std::to_string(fields.size()));
    }
    for (std::size_t i = 0; i < fields.size(); ++i) {
      double v = 0.0;
      if (!parse_double(fields[i], v)) fail("cannot parse '" + fields[i] + "' as a number in column '" + ds.columns[i].name + "'");
      ds.columns[i].values.push_back(v);
    }
  }
  if (!have_header) throw InvalidData(source + ": no column header found");
  if (ds.rows() == 0) throw InvalidData(source + ": no data rows");
  return ds;
}

DataSet DataSet::read(const fs::path& path) { return parse(read_text(path), path.string()); }

// ---------------------------------------------------------------------------
// Report

void Report::set(const std::string& key, const std::string& value) {
  for (auto& [k, v] : entries) {
    if (k == key) {
      v = value;
      return;
    }
  }
  entries.emplace_back(key, value);
}

void Report::set(const std::string& key, double value) { set(key, format_number(value)); }

std::optional<std::string> Report::get(const std::string& key) const {
  for (const auto& [k, v] : entries) {
    if (k == key) return v;
  }
  return std::nullopt;
}

std::string Report::to_text() const {
  std::ostringstream os;
  for (const auto& [k, v] : entries) os << k << " = " << v << "\n";
  return os.str();
}

void Report::write(const fs::path& path) const { write_text(path, to_text()); }

Report Report::parse(const std::string& text, const std::string& source) {
  Report r;
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const std::string t = trim(line);
    if (t.empty() || t.front() == '#') continue;
    const auto eq = t.find(" = ");
    if (eq == std::string::npos) {
      throw InvalidData(source + ":" + std::to_string(lineno) + ": expected 'key = value'");
    }
    r.entries.emplace_back(trim(t.substr(0, eq)), trim(t.substr(eq + 3)));
  }
  return r;
}

Report Report::read(const fs::path& path) { return parse(read_text(path), path.string()); }

// ---------------------------------------------------------------------------
// Shared helpers

namespace {

FieldConfiguration field_of(const RunConfig& c) {
  FieldConfiguration f;
  f.b0_mt = c.b0_mt;
  f.tilt_deg = c.tilt_deg;
  f.rabi_mhz = c.rabi_mhz;
  return f;
}

/// Metadata every output carries.
std::map<std::string, std::string> provenance(const RunConfig& c) {
  return {
      {"tool_version", NVDEER_VERSION},
      {"config_hash", c.hash()},
      {"seed", std::to_string(c.seed)},
      {"experiment", experiment_name(c.experiment)},
      {"b0_mt", format_number(c.b0_mt)},
      {"tilt_deg", format_number(c.tilt_deg)},
      {"rabi_mhz", format_number(c.rabi_mhz)},
      {"t_a_us", format_number(c.t_a_us)},
      {"t_b_us", format_number(c.t_b_us)},
      {"t_b_delay_us", format_number(c.t_b_delay_us)},
      {"dose", format_number(c.dose)},
      {"growth_sector", c.growth_sector},
  };
}

Report report_header(const RunConfig& c) {
  Report r;
  for (const auto& key : {"tool_version", "config_hash", "seed", "experiment", "dose", "growth_sector"}) {
    r.set(key, provenance(c).at(key));
  }
  return r;
}

double meta_number(const DataSet& ds, const std::string& key, double fallback) {
  const auto it = ds.metadata.find(key);
  if (it == ds.metadata.end()) return fallback;
  double v = 0.0;
  if (!parse_double(it->second, v)) throw InvalidData("metadata '" + key + "' is not a number: " + it->second);
  return v;
}

/// Gaussian noise added in place; sigma column returned.
std::vector<double> add_noise(std::vector<double>& y, double noise, std::mt19937_64& rng) {
  std::normal_distribution<double> nd(0.0, 1.0);
  std::vector<double> sigma(y.size(), noise);
  if (noise > 0.0) {
    for (auto& v : y) v += noise * nd(rng);
  }
  return sigma;
}

struct Series {
  std::string column;
  std::string label;
  std::string style;  // "points" or "line"
  std::string error_column;
};

fs::path write_plot(const fs::path& dir, const std::string& name, const std::string& title, const std::string& data_file,
                    const std::string& x_column, const std::string& x_label, const std::vector<Series>& series,
                    const RunConfig& c, std::optional<std::pair<double, double>> x_range = std::nullopt) {
  nlohmann::ordered_json j;
  j["title"] = title;
  j["data_file"] = data_file;
  j["x"] = {{"column", x_column}, {"label", x_label}};
  if (x_range) j["x"]["range"] = {x_range->first, x_range->second};
  j["series"] = nlohmann::ordered_json::array();
  for (const auto& s : series) {
    nlohmann::ordered_json e{{"column", s.column}, {"label", s.label}, {"style", s.style}};
    if (!s.error_column.empty()) e["error_column"] = s.error_column;
    j["series"].push_back(e);
  }
  j["tool_version"] = NVDEER_VERSION;
  j["config_hash"] = c.hash();
  j["seed"] = c.seed;
  const fs::path path = dir / (name + ".json");
  write_text(path, j.dump(2) + "\n");
  return path;
}

std::vector<double> linspace(double lo, double hi, int n) {
  std::vector<double> v(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) v[static_cast<std::size_t>(i)] = lo + (hi - lo) * i / (n - 1);
  return v;
}

double rate(double n_ppb, double sigma = 0.5) { return deer_rate_per_us(n_ppb, 2.0, 2.0, sigma); }

/// Transition level pair (numbered from 1) of the off-axis NV line used for NV DEER.
constexpr int kNvLower = 2;
constexpr int kNvUpper = 3;

struct NvLine {
  double freq_mhz = 0.0;
  double sigma = 0.0;
};

NvLine off_axis_nv_line(const RunConfig& c) {
  const auto member = SpinSystem::nv(Orientation::of(OrientationLabel::kBar111), 0.25);
  const auto rotated = apply_orientation(member, field_of(c));
  const CMatrix h = static_hamiltonian(member, rotated.b0_mt);
  return {transition_frequency(h, kNvLower, kNvUpper), compute_sigma(h, spin_operators(1.0), kNvLower, kNvUpper)};
}

double default_drive(const RunConfig& c, const LineModel& m) {
  if (c.f_b_mhz > 0.0) return c.f_b_mhz;
  const auto best = std::max_element(m.p1.begin(), m.p1.end(), [](const auto& a, const auto& b) { return a.amp < b.amp; });
  return best->freq_mhz;
}

}  // namespace

LineModel line_model(const RunConfig& c) {
  const auto field = field_of(c);
  LineModel m;
  m.p1 = spectral_lines(p1_ensemble(), field);
  m.x = spectral_lines({SpinSystem::x()}, field);
  m.nv = spectral_lines(nv_ensemble(), field);
  // lines closer than 10 MHz form one resolved resonance
  for (const auto& l : m.p1) {
    if (!m.p1_groups.empty() && l.freq_mhz - m.p1_groups.back().back().freq_mhz < 10.0) {
      m.p1_groups.back().push_back(l);
    } else {
      m.p1_groups.push_back({l});
    }
  }
  const double zeeman = units::kGammaE * c.b0_mt;
  double best = 1e300;
  for (std::size_t g = 0; g < m.p1_groups.size(); ++g) {
    double f = 0.0, a = 0.0;
    for (const auto& l : m.p1_groups[g]) {
      f += l.freq_mhz * l.amp;
      a += l.amp;
    }
    if (std::abs(f / a - zeeman) < best) {
      best = std::abs(f / a - zeeman);
      m.central_group = static_cast<int>(g);
    }
  }
  return m;
}

namespace {

double group_center(const std::vector<SpectralLine>& g) {
  double f = 0.0, a = 0.0;
  for (const auto& l : g) {
    f += l.freq_mhz * l.amp;
    a += l.amp;
  }
  return f / a;
}

double group_amp(const std::vector<SpectralLine>& g) {
  double a = 0.0;
  for (const auto& l : g) a += l.amp;
  return a;
}

// ---------------------------------------------------------------------------
// Simulations

CommandResult simulate_deer_spectrum_run(const RunConfig& c) {
  const auto field = field_of(c);
  const auto model = line_model(c);
  const auto grid = linear_grid(c.f_min_mhz, c.f_max_mhz, c.f_step_mhz);
  const auto p1 = simulate_deer_spectrum(p1_ensemble(), field, c.t_b_us, grid);
  const auto px = simulate_deer_spectrum({SpinSystem::x()}, field, c.t_b_us, grid);

  const double k_p1 = rate(c.n_p1_ppb) * c.t_b_delay_us;
  const double k_x = rate(c.n_x_ppb) * c.t_b_delay_us;
  std::vector<double> model_y(grid.size()), p1_only(grid.size());
  for (std::size_t i = 0; i < grid.size(); ++i) {
    p1_only[i] = std::exp(-k_p1 * p1.y[i]);
    model_y[i] = std::exp(-k_p1 * p1.y[i] - k_x * px.y[i]);
  }
  std::mt19937_64 rng(c.seed);
  std::vector<double> y = model_y;
  const auto sigma = add_noise(y, c.noise, rng);

  const fs::path dir = c.output_dir;
  CommandResult res;
  DataSet ds;
  ds.metadata = provenance(c);
  ds.metadata["n_p1_ppb"] = format_number(c.n_p1_ppb);
  ds.metadata["n_x_ppb"] = format_number(c.n_x_ppb);
  ds.columns = {{"f_b", "MHz", grid},        {"i_deer", "1", y},          {"sigma", "1", sigma},
                {"i_deer_model", "1", model_y}, {"i_deer_p1_only", "1", p1_only}, {"p_b_p1", "1", p1.y},
                {"p_b_x", "1", px.y}};
  ds.write(dir / "deer_spectrum.csv");
  res.files.push_back(dir / "deer_spectrum.csv");
  res.files.push_back(write_plot(dir, "plot_deer_spectrum", "P1 DEER spectrum", "deer_spectrum.csv", "f_b",
                                 "f_B (MHz)",
                                 {{"i_deer", "simulated data", "points", "sigma"},
                                  {"i_deer_model", "P1 + X model", "line", ""}},
                                 c));
  const double centre = group_center(model.p1_groups[static_cast<std::size_t>(model.central_group)]);
  res.files.push_back(write_plot(dir, "plot_central_line", "Central P1 line with and without X",
                                 "deer_spectrum.csv", "f_b", "f_B (MHz)",
                                 {{"i_deer", "simulated data", "points", "sigma"},
                                  {"i_deer_p1_only", "P1 only", "line", ""},
                                  {"i_deer_model", "P1 + X", "line", ""}},
                                 c, std::make_pair(centre - 20.0, centre + 20.0)));

  Report r = report_header(c);
  r.set("n_p1_ppb", c.n_p1_ppb);
  r.set("n_x_ppb", c.n_x_ppb);
  r.set("n_points", static_cast<double>(grid.size()));
  r.set("p1_groups", static_cast<double>(model.p1_groups.size()));
  for (std::size_t g = 0; g < model.p1_groups.size(); ++g) {
    const std::string k = "p1_group_" + std::to_string(g + 1);
    r.set(k + "_mhz", group_center(model.p1_groups[g]));
    r.set(k + "_amp", group_amp(model.p1_groups[g]));
  }
  r.set("p1_central_group", static_cast<double>(model.central_group + 1));
  for (std::size_t i = 0; i < model.p1.size(); ++i) {
    r.set("p1_line_" + std::to_string(i + 1) + "_mhz", model.p1[i].freq_mhz);
  }
  r.set("x_line_mhz", model.x.front().freq_mhz);
  const auto nv = off_axis_nv_line(c);
  r.set("nv_line_23_mhz", nv.freq_mhz);
  r.set("nv_sigma_23", nv.sigma);
  for (std::size_t i = 0; i < model.nv.size(); ++i) {
    r.set("nv_line_" + std::to_string(i + 1) + "_mhz", model.nv[i].freq_mhz);
  }
  const auto pops = nv_level_populations(Orientation::of(OrientationLabel::kBar111).rotation() * field.b0_vector(), c.beta);
  r.set("nv_off_axis_n1", pops[0]);
  r.set("nv_off_axis_n2", pops[1]);
  r.set("nv_off_axis_n3", pops[2]);
  r.set("i_deer_min", *std::min_element(model_y.begin(), model_y.end()));

  if (c.n_nv_ppb > 0.0) {
    const auto nv_grid = linear_grid(nv.freq_mhz - 15.0, nv.freq_mhz + 15.0, c.f_step_mhz);
    const auto pnv = simulate_deer_spectrum(nv_ensemble(), field, c.t_b_us, nv_grid);
    const double k_nv = rate(c.n_nv_ppb, nv.sigma) * c.t_b_delay_us;
    std::vector<double> nv_model(nv_grid.size());
    for (std::size_t i = 0; i < nv_grid.size(); ++i) nv_model[i] = std::exp(-k_nv * pnv.y[i]);
    std::vector<double> nv_y = nv_model;
    const auto nv_sigma = add_noise(nv_y, c.noise, rng);
    DataSet nds;
    nds.metadata = provenance(c);
    nds.metadata["n_nv_ppb"] = format_number(c.n_nv_ppb);
    nds.metadata["nv_sigma"] = format_number(nv.sigma);
    nds.columns = {{"f_b", "MHz", nv_grid}, {"i_deer", "1", nv_y}, {"sigma", "1", nv_sigma},
                   {"i_deer_model", "1", nv_model}, {"p_b_nv", "1", pnv.y}};
    nds.write(dir / "nv_spectrum.csv");
    res.files.push_back(dir / "nv_spectrum.csv");
    res.files.push_back(write_plot(dir, "plot_nv_spectrum", "Off-axis NV |2>-|3> DEER line", "nv_spectrum.csv",
                                   "f_b", "f_B (MHz)",
                                   {{"i_deer", "simulated data", "points", "sigma"},
                                    {"i_deer_model", "model", "line", ""}},
                                   c));
    r.set("n_nv_ppb", c.n_nv_ppb);
  }
  res.report = r;
  return res;
}

/// Summed P_B of an ensemble against pulse length at one drive frequency.
std::vector<double> ensemble_rabi(const std::vector<SpinSystem>& ensemble, FieldConfiguration field, double f_b,
                                  const std::vector<double>& t_grid) {
  field.drive_freq_mhz = f_b;
  std::vector<double> total(t_grid.size(), 0.0);
  for (const auto& m : ensemble) {
    const auto tr = simulate_rabi(m, field, t_grid);
    for (std::size_t i = 0; i < t_grid.size(); ++i) total[i] += tr.y[i];
  }
  return total;
}

CommandResult simulate_rabi_run(const RunConfig& c) {
  const auto model = line_model(c);
  const double f_b = default_drive(c, model);
  const auto grid = linear_grid(0.0, c.t_max_us, c.t_step_us);
  const auto p1 = ensemble_rabi(p1_ensemble(), field_of(c), f_b, grid);
  const auto px = ensemble_rabi({SpinSystem::x()}, field_of(c), f_b, grid);
  const double k_p1 = rate(c.n_p1_ppb) * c.t_b_delay_us;
  const double k_x = rate(c.n_x_ppb) * c.t_b_delay_us;
  std::vector<double> model_y(grid.size());
  for (std::size_t i = 0; i < grid.size(); ++i) model_y[i] = std::exp(-k_p1 * p1[i] - k_x * px[i]);
  std::mt19937_64 rng(c.seed);
  std::vector<double> y = model_y;
  const auto sigma = add_noise(y, c.noise, rng);

  const fs::path dir = c.output_dir;
  DataSet ds;
  ds.metadata = provenance(c);
  ds.metadata["f_b_mhz"] = format_number(f_b);
  ds.columns = {{"t_b", "us", grid}, {"i_deer", "1", y}, {"sigma", "1", sigma}, {"i_deer_model", "1", model_y},
                {"p_b_p1", "1", p1}};
  CommandResult res;
  ds.write(dir / "deer_rabi.csv");
  res.files.push_back(dir / "deer_rabi.csv");
  res.files.push_back(write_plot(dir, "plot_deer_rabi", "DEER Rabi oscillation", "deer_rabi.csv", "t_b", "t_B (us)",
                                 {{"i_deer", "simulated data", "points", "sigma"},
                                  {"i_deer_model", "model", "line", ""}},
                                 c));
  Report r = report_header(c);
  r.set("f_b_mhz", f_b);
  r.set("rabi_mhz", c.rabi_mhz);
  r.set("t_pi_us", 1.0 / (2.0 * c.rabi_mhz));
  res.report = r;
  return res;
}

CommandResult simulate_decay_run(const RunConfig& c) {
  const auto model = line_model(c);
  auto field = field_of(c);
  field.drive_freq_mhz = default_drive(c, model);
  double p_p1 = 0.0, p_x = 0.0;
  for (const auto& m : p1_ensemble()) p_p1 += member_transfer(m, field, c.t_b_us);
  p_x = member_transfer(SpinSystem::x(), field, c.t_b_us);
  const auto grid = linspace(0.0, c.t_b_delay_max_us, c.n_delay_points);
  std::vector<double> model_y(grid.size());
  for (std::size_t i = 0; i < grid.size(); ++i) {
    model_y[i] = std::exp(-(rate(c.n_p1_ppb) * p_p1 + rate(c.n_x_ppb) * p_x) * grid[i]);
  }
  std::mt19937_64 rng(c.seed);
  std::vector<double> y = model_y;
  const auto sigma = add_noise(y, c.noise, rng);
  const fs::path dir = c.output_dir;
  DataSet ds;
  ds.metadata = provenance(c);
  ds.metadata["f_b_mhz"] = format_number(field.drive_freq_mhz);
  ds.metadata["p_b"] = format_number(p_p1);
  ds.columns = {{"t_b_delay", "us", grid}, {"i_deer", "1", y}, {"sigma", "1", sigma}, {"i_deer_model", "1", model_y}};
  CommandResult res;
  ds.write(dir / "deer_decay.csv");
  res.files.push_back(dir / "deer_decay.csv");
  res.files.push_back(write_plot(dir, "plot_deer_decay", "DEER decay", "deer_decay.csv", "t_b_delay", "T_B (us)",
                                 {{"i_deer", "simulated data", "points", "sigma"},
                                  {"i_deer_model", "model", "line", ""}},
                                 c));
  Report r = report_header(c);
  r.set("f_b_mhz", field.drive_freq_mhz);
  r.set("p_b_p1", p_p1);
  r.set("p_b_x", p_x);
  r.set("n_p1_ppb", c.n_p1_ppb);
  res.report = r;
  return res;
}

CommandResult simulate_hahn_run(const RunConfig& c) {
  const auto grid = linspace(0.0, 3.0 * c.t2_us, 60);
  std::vector<double> model_y(grid.size());
  for (std::size_t i = 0; i < grid.size(); ++i) model_y[i] = std::exp(-std::pow(grid[i] / c.t2_us, c.stretch));
  std::mt19937_64 rng(c.seed);
  std::vector<double> y = model_y;
  const auto sigma = add_noise(y, c.noise, rng);
  const fs::path dir = c.output_dir;
  DataSet ds;
  ds.metadata = provenance(c);
  ds.columns = {{"two_t_a", "us", grid}, {"i_hahn", "1", y}, {"sigma", "1", sigma}, {"i_hahn_model", "1", model_y}};
  CommandResult res;
  ds.write(dir / "hahn.csv");
  res.files.push_back(dir / "hahn.csv");
  res.files.push_back(write_plot(dir, "plot_hahn", "Hahn echo decay", "hahn.csv", "two_t_a", "2 T_A (us)",
                                 {{"i_hahn", "simulated data", "points", "sigma"}, {"i_hahn_model", "model", "line", ""}},
                                 c));
  Report r = report_header(c);
  r.set("t2_us", c.t2_us);
  r.set("stretch", c.stretch);
  res.report = r;
  return res;
}

double eseem_frequency(const RunConfig& c) {
  return c.eseem_f_mhz > 0.0 ? c.eseem_f_mhz : 0.5 * units::kGammaC13 * c.b0_mt * 1e-3;
}

CommandResult simulate_eseem_run(const RunConfig& c) {
  const double f = eseem_frequency(c);
  const auto grid = linspace(0.0, 8.0 / f, 161);
  std::vector<double> model_y(grid.size());
  for (std::size_t i = 0; i < grid.size(); ++i) model_y[i] = 0.1 * std::cos(2.0 * units::kPi * f * grid[i]) + 0.8;
  std::mt19937_64 rng(c.seed);
  std::vector<double> y = model_y;
  const auto sigma = add_noise(y, c.noise, rng);
  const fs::path dir = c.output_dir;
  DataSet ds;
  ds.metadata = provenance(c);
  ds.metadata["eseem_f_mhz"] = format_number(f);
  ds.columns = {{"two_t_a", "us", grid}, {"i_hahn", "1", y}, {"sigma", "1", sigma}, {"i_hahn_model", "1", model_y}};
  CommandResult res;
  ds.write(dir / "eseem.csv");
  res.files.push_back(dir / "eseem.csv");
  res.files.push_back(write_plot(dir, "plot_eseem", "ESEEM", "eseem.csv", "two_t_a", "2 T_A (us)",
                                 {{"i_hahn", "simulated data", "points", "sigma"}, {"i_hahn_model", "model", "line", ""}},
                                 c));
  Report r = report_header(c);
  r.set("f_mhz", f);
  r.set("gamma_n_mhz_per_t", 2.0 * f / (c.b0_mt * 1e-3));
  res.report = r;
  return res;
}

CommandResult simulate_saturation_run(const RunConfig& c) {
  const auto grid = linspace(0.05 * c.p_sat, 6.0 * c.p_sat, 40);
  std::vector<double> model_y(grid.size()), background(grid.size());
  std::mt19937_64 rng(c.seed);
  for (std::size_t i = 0; i < grid.size(); ++i) {
    background[i] = 0.05 * c.f_sat * grid[i] / c.p_sat;
    model_y[i] = c.f_sat * grid[i] / (c.p_sat + grid[i]);
  }
  std::vector<double> y(grid.size());
  for (std::size_t i = 0; i < grid.size(); ++i) y[i] = model_y[i] + background[i];
  const auto sigma_rel = add_noise(y, c.noise * c.f_sat, rng);
  const fs::path dir = c.output_dir;
  DataSet ds;
  ds.metadata = provenance(c);
  ds.columns = {{"p_las", "mW", grid}, {"f_nv", "kcps", y}, {"background", "kcps", background},
                {"sigma", "kcps", sigma_rel}, {"f_nv_model", "kcps", model_y}};
  CommandResult res;
  ds.write(dir / "saturation.csv");
  res.files.push_back(dir / "saturation.csv");
  res.files.push_back(write_plot(dir, "plot_saturation", "PL saturation", "saturation.csv", "p_las", "P_las (mW)",
                                 {{"f_nv", "simulated data", "points", "sigma"},
                                  {"background", "background", "points", ""},
                                  {"f_nv_model", "model (background removed)", "line", ""}},
                                 c));
  Report r = report_header(c);
  r.set("f_sat", c.f_sat);
  r.set("p_sat", c.p_sat);
  if (c.single_f_sat > 0.0) r.set("nv_count", c.f_sat / c.single_f_sat);
  res.report = r;
  return res;
}

CommandResult simulate_photophysics_run(const RunConfig& c) {
  const auto field = field_of(c);
  auto params = RateModelParams::standard(c.beta);
  params.alpha2 = mixing_coefficients(Orientation::of(OrientationLabel::kBar111).rotation() * field.b0_vector());
  PulseTrain train;
  train.n_pulses = c.n_pulses;
  const auto history = evolve_populations(params, train, PopulationVector::uniform_ground());
  std::vector<Column> cols{{"pulse", "1", {}}};
  for (int s = 0; s < 7; ++s) cols.push_back({"n" + std::to_string(s + 1), "1", {}});
  for (int s = 0; s < 3; ++s) cols.push_back({"g" + std::to_string(s + 1), "1", {}});
  for (std::size_t p = 0; p < history.size(); ++p) {
    cols[0].values.push_back(static_cast<double>(p + 1));
    for (int s = 0; s < 7; ++s) cols[static_cast<std::size_t>(1 + s)].values.push_back(history[p].n(s));
    const auto g = history[p].ground_fractions();
    for (int s = 0; s < 3; ++s) cols[static_cast<std::size_t>(8 + s)].values.push_back(g[static_cast<std::size_t>(s)]);
  }
  const auto ss = steady_state(params, train, PopulationVector::uniform_ground());
  const auto g = ss.readout.ground_fractions();
  auto axial = RateModelParams::standard(c.beta);
  const auto gax = steady_state(axial, train, PopulationVector::uniform_ground()).readout.ground_fractions();

  const fs::path dir = c.output_dir;
  DataSet ds;
  ds.metadata = provenance(c);
  ds.metadata["beta"] = format_number(c.beta);
  ds.columns = cols;
  CommandResult res;
  ds.write(dir / "photophysics.csv");
  res.files.push_back(dir / "photophysics.csv");
  res.files.push_back(write_plot(dir, "plot_photophysics", "Ground-state populations per laser pulse",
                                 "photophysics.csv", "pulse", "pulse number",
                                 {{"g1", "n1", "line", ""}, {"g2", "n2", "line", ""}, {"g3", "n3", "line", ""}}, c));
  Report r = report_header(c);
  r.set("beta", c.beta);
  r.set("steady_n1", g[0]);
  r.set("steady_n2", g[1]);
  r.set("steady_n3", g[2]);
  r.set("pulses_to_converge", static_cast<double>(ss.pulses_to_converge));
  r.set("axial_steady_n1", gax[0]);
  res.report = r;
  return res;
}

DiffusionResult diffusion_of(const RunConfig& c) {
  if (c.volume_um3 > 0.0) return diffusion_from_volume(c.volume_um3, c.r_vac_nm, c.anneal_s);
  return diffusion_coefficient(c.n_nv_ppb, c.nv_count, c.r_vac_nm, c.anneal_s);
}

void set_diffusion(Report& r, const DiffusionResult& d) {
  r.set("volume_um3", d.volume_um3);
  r.set("r_nv_nm", d.r_nv_nm);
  r.set("d_rms_nm", d.d_rms_nm);
  r.set("d_nm2_per_s", d.d_nm2_per_s);
}

CommandResult simulate_diffusion_run(const RunConfig& c) {
  const auto d = diffusion_of(c);
  const fs::path dir = c.output_dir;
  DataSet ds;
  ds.metadata = provenance(c);
  ds.metadata["r_vac_nm"] = format_number(c.r_vac_nm);
  ds.metadata["anneal_s"] = format_number(c.anneal_s);
  ds.columns = {{"volume", "um^3", {d.volume_um3}}};
  CommandResult res;
  ds.write(dir / "diffusion.csv");
  res.files.push_back(dir / "diffusion.csv");
  Report r = report_header(c);
  set_diffusion(r, d);
  res.report = r;
  return res;
}

/// First derivative of a unit-area Lorentzian absorption line.
double lorentzian_derivative(double b, double b0, double w) {
  const double d = b - b0;
  return -2.0 * w * d / (units::kPi * (w * w + d * d) * (w * w + d * d));
}

CommandResult simulate_epr_run(const RunConfig& c) {
  const auto grid = linspace(335.0, 345.0, 801);
  const double centre = 340.0, width = 0.3;
  const double s_sample = c.n_epr_ppb * c.mass_mg;
  const double s_ref = c.n_ref_ppm * 1e3 * c.mass_ref_mg;
  std::vector<double> sample(grid.size()), ref(grid.size());
  for (std::size_t i = 0; i < grid.size(); ++i) {
    sample[i] = s_sample * lorentzian_derivative(grid[i], centre, width);
    ref[i] = s_ref * lorentzian_derivative(grid[i], centre, width);
  }
  std::mt19937_64 rng(c.seed);
  const double peak = *std::max_element(sample.begin(), sample.end());
  add_noise(sample, c.noise * peak, rng);
  const fs::path dir = c.output_dir;
  DataSet ds;
  ds.metadata = provenance(c);
  ds.metadata["mass_mg"] = format_number(c.mass_mg);
  ds.metadata["mass_ref_mg"] = format_number(c.mass_ref_mg);
  ds.metadata["n_ref_ppm"] = format_number(c.n_ref_ppm);
  ds.columns = {{"field", "mT", grid}, {"sample", "a.u.", sample}, {"reference", "a.u.", ref}};
  CommandResult res;
  ds.write(dir / "epr.csv");
  res.files.push_back(dir / "epr.csv");
  res.files.push_back(write_plot(dir, "plot_epr", "EPR derivative spectra", "epr.csv", "field", "B (mT)",
                                 {{"sample", "sample", "line", ""}, {"reference", "reference", "line", ""}}, c));
  Report r = report_header(c);
  r.set("n_epr_ppb", c.n_epr_ppb);
  res.report = r;
  return res;
}

}  // namespace

CommandResult cmd_simulate(const RunConfig& config) {
  config.validate();
  CommandResult res;
  switch (config.experiment) {
    case Experiment::kDeerSpectrum: res = simulate_deer_spectrum_run(config); break;
    case Experiment::kDeerRabi: res = simulate_rabi_run(config); break;
    case Experiment::kDeerDecay: res = simulate_decay_run(config); break;
    case Experiment::kHahn: res = simulate_hahn_run(config); break;
    case Experiment::kEseem: res = simulate_eseem_run(config); break;
    case Experiment::kSaturation: res = simulate_saturation_run(config); break;
    case Experiment::kPhotophysics: res = simulate_photophysics_run(config); break;
    case Experiment::kDiffusion: res = simulate_diffusion_run(config); break;
    case Experiment::kEpr: res = simulate_epr_run(config); break;
  }
  const fs::path summary = config.output_dir / "summary.txt";
  res.report.write(summary);
  res.files.push_back(summary);
  return res;
}

// ---------------------------------------------------------------------------
// Fits

namespace {

struct LoadedData {
  fs::path path;
  DataSet data;
  Experiment experiment;
};

std::vector<LoadedData> load_all(const std::vector<fs::path>& paths) {
  std::vector<LoadedData> out;
  for (const auto& p : paths) {
    auto ds = DataSet::read(p);
    const auto it = ds.metadata.find("experiment");
    if (it == ds.metadata.end()) throw InvalidData(p.string() + ": missing '# experiment:' metadata");
    Experiment e;
    try {
      e = parse_experiment(it->second);
    } catch (const ConfigError&) {
      throw InvalidData(p.string() + ": unknown experiment '" + it->second + "'");
    }
    out.push_back({p, std::move(ds), e});
  }
  return out;
}

const LoadedData& need(const std::vector<LoadedData>& all, Experiment e, const std::string& stage) {
  for (const auto& d : all) {
    if (d.experiment == e) return d;
  }
  throw ConfigError(stage + ": no " + experiment_name(e) + " data file supplied");
}

void add_fit(Report& r, const std::string& prefix, const FitResult& f) {
  for (std::size_t i = 0; i < f.names.size(); ++i) {
    r.set(prefix + f.names[i], f.values(static_cast<Eigen::Index>(i)));
    r.set(prefix + f.names[i] + "_err", f.std_errors(static_cast<Eigen::Index>(i)));
  }
  r.set(prefix + "converged", f.converged ? "true" : "false");
  r.set(prefix + "chi2_reduced", f.chi2_reduced);
  r.set(prefix + "n_points", static_cast<double>(f.n_points));
  for (std::size_t i = 0; i < f.warnings.size(); ++i) r.set(prefix + "warning_" + std::to_string(i + 1), f.warnings[i]);
}

std::string join(const std::vector<double>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + format_number(v[i]);
  return s;
}

Report fit_header(const RunConfig& c, const std::vector<LoadedData>& data) {
  Report r = report_header(c);
  std::string names;
  for (const auto& d : data) names += (names.empty() ? "" : ",") + d.path.filename().string();
  r.set("inputs", names);
  if (!data.empty()) {
    // acquisition metadata of the primary data set take precedence
    const auto& md = data.front().data.metadata;
    for (const auto& key : {"dose", "growth_sector"}) {
      if (auto it = md.find(key); it != md.end()) r.set(key, it->second);
    }
  }
  return r;
}

CommandResult fit_deer_spectrum_run(const RunConfig& c, const std::vector<LoadedData>& all) {
  const auto& spectrum = need(all, Experiment::kDeerSpectrum, "stage 1 (peaks)");
  const auto model = line_model(c);
  const fs::path dir = c.output_dir;
  CommandResult res;

  // stage 1: line positions
  const auto trace = spectrum.data.trace("f_b", "i_deer", "sigma");
  std::vector<LorentzianPeak> seeds;
  for (const auto& g : model.p1_groups) seeds.push_back({group_center(g), 0.0, 0.0});
  const auto peaks = fit_lorentzian_peaks(trace, static_cast<int>(seeds.size()), seeds);
  Report s1 = fit_header(c, all);
  s1.set("stage", "1 peaks");
  add_fit(s1, "", peaks.fit);
  s1.write(dir / "stage1_peaks.txt");
  res.files.push_back(dir / "stage1_peaks.txt");

  // stage 2: Rabi frequency
  const auto& rabi_data = need(all, Experiment::kDeerRabi, "stage 2 (rabi)");
  const auto rabi = fit_rabi_frequency(rabi_data.data.trace("t_b", "i_deer", "sigma"));
  Report s2 = fit_header(c, all);
  s2.set("stage", "2 rabi");
  s2.set("omega_mhz", rabi.omega_mhz);
  s2.set("omega_err", rabi.omega_err);
  s2.set("t_pi_us", rabi.t_pi_us);
  s2.set("t_pi_err", rabi.t_pi_err);
  add_fit(s2, "fit_", rabi.fit);
  s2.write(dir / "stage2_rabi.txt");
  res.files.push_back(dir / "stage2_rabi.txt");

  // stage 3: concentrations
  DeerFixed fx;
  fx.omega_mhz = rabi.omega_mhz;
  fx.t_b_us = meta_number(spectrum.data, "t_b_us", c.t_b_us);
  fx.t_b_delay_us = meta_number(spectrum.data, "t_b_delay_us", c.t_b_delay_us);
  std::vector<DeerLine> lines;
  for (std::size_t g = 0; g < model.p1_groups.size(); ++g) {
    const double f = peaks.fit.values(static_cast<Eigen::Index>(1 + 3 * g));
    lines.push_back({f, 0.05, group_amp(model.p1_groups[g])});
  }
  const auto p1 = fit_concentration_spectrum(trace, fx, lines, model.central_group, c.window_mhz);

  CentralLineModel central;
  for (const auto& l : model.p1_groups[static_cast<std::size_t>(model.central_group)]) {
    central.p1_lines.push_back({l.freq_mhz, 0.05, l.amp});
  }
  central.x_line = {model.x.front().freq_mhz, 0.05, model.x.front().amp};
  central.window_mhz = std::max(c.window_mhz, 15.0);
  central.seed = c.seed;
  const auto x = fit_central_line_two_species(trace, p1.value_ppb, fx, central);

  Report s3 = fit_header(c, all);
  s3.set("stage", "3 concentration");
  s3.set("omega_mhz", fx.omega_mhz);
  s3.set("t_b_us", fx.t_b_us);
  s3.set("t_b_delay_us", fx.t_b_delay_us);
  s3.set("n_p1_ppb", p1.value_ppb);
  s3.set("n_p1_std_ppb", p1.uncertainty_ppb);
  s3.set("n_p1_propagated_ppb", p1.propagated_error_ppb);
  s3.set("n_p1_per_peak_ppb", join(p1.per_peak_values));
  s3.set("n_p1_per_peak_err_ppb", join(p1.per_peak_errors));
  s3.set("n_p1_peak_centers_mhz", join(p1.per_peak_centers));
  s3.set("n_p1_central_excluded", p1.central_excluded ? "true" : "false");
  s3.set("n_x_ppb", x.value_ppb);
  s3.set("n_x_err_ppb", x.uncertainty_ppb);
  s3.set("n_x_upper_bound", x.is_upper_bound ? "true" : "false");
  if (x.is_upper_bound) s3.set("n_x_upper_bound_ppb", x.upper_bound_ppb);
  s3.set("x_line_mhz", x.per_peak_centers.front());
  std::size_t w = 0;
  for (const auto& msg : p1.warnings) s3.set("warning_" + std::to_string(++w), msg);
  for (const auto& msg : x.warnings) s3.set("warning_" + std::to_string(++w), "central: " + msg);
  s3.write(dir / "stage3_concentration.txt");
  res.files.push_back(dir / "stage3_concentration.txt");

  // fitted curve for plotting
  std::vector<double> fitted(trace.size());
  const double k_p1 = rate(p1.value_ppb) * fx.t_b_delay_us;
  const double k_x = rate(x.value_ppb) * fx.t_b_delay_us;
  for (std::size_t i = 0; i < trace.size(); ++i) {
    double e = 0.0;
    for (std::size_t g = 0; g < lines.size(); ++g) {
      if (static_cast<int>(g) == model.central_group) continue;
      e += k_p1 * lines[g].amp * peak_transfer({lines[g].f_r_mhz, 0.05, 1.0}, fx.omega_mhz, trace.x[i], fx.t_b_us);
    }
    for (const auto& l : central.p1_lines) {
      e += k_p1 * l.amp * peak_transfer({l.f_r_mhz, 0.05, 1.0}, fx.omega_mhz, trace.x[i], fx.t_b_us);
    }
    e += k_x * central.x_line.amp *
         peak_transfer({x.per_peak_centers.front(), 0.05, 1.0}, fx.omega_mhz, trace.x[i], fx.t_b_us);
    fitted[i] = std::exp(-e);
  }
  DataSet curve;
  curve.metadata = provenance(c);
  curve.columns = {{"f_b", "MHz", trace.x}, {"i_deer", "1", trace.y}, {"i_deer_fit", "1", fitted}};
  curve.write(dir / "fit_curve.csv");
  res.files.push_back(dir / "fit_curve.csv");
  res.files.push_back(write_plot(dir, "plot_fit", "DEER spectrum and fitted model", "fit_curve.csv", "f_b",
                                 "f_B (MHz)", {{"i_deer", "data", "points", ""}, {"i_deer_fit", "fit", "line", ""}},
                                 c));

  Report r = fit_header(c, all);
  for (const auto& key : {"omega_mhz", "n_p1_ppb", "n_p1_std_ppb", "n_p1_propagated_ppb", "n_p1_per_peak_ppb",
                          "n_p1_central_excluded", "n_x_ppb", "n_x_err_ppb", "n_x_upper_bound", "x_line_mhz"}) {
    if (auto v = s3.get(key)) r.set(key, *v);
  }
  if (auto v = s3.get("n_x_upper_bound_ppb")) r.set("n_x_upper_bound_ppb", *v);
  res.report = r;
  return res;
}

CommandResult fit_rabi_run(const RunConfig& c, const std::vector<LoadedData>& all) {
  const auto& d = need(all, Experiment::kDeerRabi, "rabi");
  const auto rabi = fit_rabi_frequency(d.data.trace("t_b", "i_deer", "sigma"));
  Report r = fit_header(c, all);
  r.set("omega_mhz", rabi.omega_mhz);
  r.set("omega_err", rabi.omega_err);
  r.set("t_pi_us", rabi.t_pi_us);
  r.set("t_pi_err", rabi.t_pi_err);
  add_fit(r, "fit_", rabi.fit);
  return {r, {}};
}

CommandResult fit_decay_run(const RunConfig& c, const std::vector<LoadedData>& all) {
  const auto& d = need(all, Experiment::kDeerDecay, "decay");
  double p_b = c.p_b > 0.0 ? c.p_b : meta_number(d.data, "p_b", 0.0);
  if (!(p_b > 0.0)) {
    const auto model = line_model(c);
    const double f_b = meta_number(d.data, "f_b_mhz", default_drive(c, model));
    const double t_b = meta_number(d.data, "t_b_us", c.t_b_us);
    for (const auto& l : model.p1) p_b += l.amp * rabi_probability(c.rabi_mhz, f_b - l.freq_mhz, t_b);
  }
  const auto est = fit_deer_decay(d.data.trace("t_b_delay", "i_deer", "sigma"), p_b);
  Report r = fit_header(c, all);
  r.set("p_b", p_b);
  r.set("n_p1_ppb", est.value_ppb);
  r.set("n_p1_err_ppb", est.uncertainty_ppb);
  r.set("method", method_name(est.method));
  for (std::size_t i = 0; i < est.warnings.size(); ++i) r.set("warning_" + std::to_string(i + 1), est.warnings[i]);
  return {r, {}};
}

CommandResult fit_hahn_run(const RunConfig& c, const std::vector<LoadedData>& all) {
  const auto& d = need(all, Experiment::kHahn, "hahn");
  const auto h = fit_hahn_decay(d.data.trace("two_t_a", "i_hahn", "sigma"));
  Report r = fit_header(c, all);
  r.set("t2_us", h.t2_us);
  r.set("t2_err_us", h.t2_err);
  r.set("stretch", h.stretch);
  r.set("stretch_err", h.stretch_err);
  add_fit(r, "fit_", h.fit);
  return {r, {}};
}

CommandResult fit_eseem_run(const RunConfig& c, const std::vector<LoadedData>& all) {
  const auto& d = need(all, Experiment::kEseem, "eseem");
  const double b0 = meta_number(d.data, "b0_mt", c.b0_mt);
  const auto e = fit_eseem(d.data.trace("two_t_a", "i_hahn", "sigma"), b0);
  Report r = fit_header(c, all);
  r.set("f_mhz", e.f_mhz);
  r.set("f_err_mhz", e.f_err);
  r.set("gamma_n_mhz_per_t", e.gamma_n_mhz_per_t);
  r.set("gamma_n_err", e.gamma_n_err);
  r.set("consistent_with_13c", e.consistent_with(units::kGammaC13) ? "true" : "false");
  add_fit(r, "fit_", e.fit);
  return {r, {}};
}

CommandResult fit_saturation_run(const RunConfig& c, const std::vector<LoadedData>& all) {
  const auto& d = need(all, Experiment::kSaturation, "saturation");
  const auto trace = d.data.trace("p_las", "f_nv", "sigma");
  std::optional<SpectrumTrace> bg;
  if (d.data.has_column("background")) bg = d.data.trace("p_las", "background");
  const auto s = fit_saturation(trace, bg);
  Report r = fit_header(c, all);
  r.set("f_sat", s.f_sat);
  r.set("f_sat_err", s.f_sat_err);
  r.set("p_sat", s.p_sat);
  r.set("p_sat_err", s.p_sat_err);
  if (c.single_f_sat > 0.0) {
    const auto n = nv_count(ValueWithError{s.f_sat, s.f_sat_err}, ValueWithError{c.single_f_sat, 0.0});
    r.set("nv_count", n.value);
    r.set("nv_count_err", n.error);
  }
  add_fit(r, "fit_", s.fit);
  return {r, {}};
}

CommandResult fit_photophysics_run(const RunConfig& c, const std::vector<LoadedData>& all) {
  const auto& d = need(all, Experiment::kPhotophysics, "photophysics");
  Report r = fit_header(c, all);
  const std::size_t last = d.data.rows() - 1;
  for (int s = 1; s <= 3; ++s) {
    r.set("final_n" + std::to_string(s), d.data.column("g" + std::to_string(s)).values[last]);
  }
  r.set("pulses", static_cast<double>(d.data.rows()));
  return {r, {}};
}

CommandResult fit_diffusion_run(const RunConfig& c, const std::vector<LoadedData>& all) {
  const auto& d = need(all, Experiment::kDiffusion, "diffusion");
  const double v = d.data.column("volume").values.front();
  const auto res = diffusion_from_volume(v, meta_number(d.data, "r_vac_nm", c.r_vac_nm),
                                         meta_number(d.data, "anneal_s", c.anneal_s));
  Report r = fit_header(c, all);
  set_diffusion(r, res);
  return {r, {}};
}

CommandResult fit_epr_run(const RunConfig& c, const std::vector<LoadedData>& all) {
  const auto& d = need(all, Experiment::kEpr, "epr");
  const auto& field = d.data.column("field").values;
  const auto di = double_integral(field, d.data.column("sample").values);
  const auto di_ref = double_integral(field, d.data.column("reference").values);
  const double n = epr_concentration(di.value, meta_number(d.data, "mass_mg", c.mass_mg), di_ref.value,
                                     meta_number(d.data, "mass_ref_mg", c.mass_ref_mg),
                                     meta_number(d.data, "n_ref_ppm", c.n_ref_ppm));
  Report r = fit_header(c, all);
  r.set("di_sample", di.value);
  r.set("di_reference", di_ref.value);
  r.set("n_p1_epr_ppb", n);
  std::size_t w = 0;
  for (const auto& m : di.warnings) r.set("warning_" + std::to_string(++w), "sample: " + m);
  for (const auto& m : di_ref.warnings) r.set("warning_" + std::to_string(++w), "reference: " + m);
  return {r, {}};
}

}  // namespace

CommandResult cmd_fit(const RunConfig& config, const std::vector<fs::path>& data) {
  config.validate();
  if (data.empty()) throw ConfigError("fit: no data files given");
  const auto all = load_all(data);
  CommandResult res;
  switch (config.experiment) {
    case Experiment::kDeerSpectrum: res = fit_deer_spectrum_run(config, all); break;
    case Experiment::kDeerRabi: res = fit_rabi_run(config, all); break;
    case Experiment::kDeerDecay: res = fit_decay_run(config, all); break;
    case Experiment::kHahn: res = fit_hahn_run(config, all); break;
    case Experiment::kEseem: res = fit_eseem_run(config, all); break;
    case Experiment::kSaturation: res = fit_saturation_run(config, all); break;
    case Experiment::kPhotophysics: res = fit_photophysics_run(config, all); break;
    case Experiment::kDiffusion: res = fit_diffusion_run(config, all); break;
    case Experiment::kEpr: res = fit_epr_run(config, all); break;
  }
  const fs::path out = config.output_dir / "fit_report.txt";
  res.report.write(out);
  res.files.push_back(out);
  return res;
}

// ---------------------------------------------------------------------------
// Report

namespace {

struct Row {
  double dose = 0.0;
  double value = 0.0;
  double error = 0.0;
  std::string note;
  std::string source;
};

double number_or(const Report& r, const std::string& key, double fallback) {
  if (auto v = r.get(key)) {
    double d = 0.0;
    if (parse_double(*v, d)) return d;
  }
  return fallback;
}

}  // namespace

CommandResult cmd_report(const std::vector<fs::path>& results, const fs::path& output_dir) {
  if (results.empty()) throw ConfigError("report: no result files given");
  struct Table {
    std::string key;
    std::string title;
    std::string error_key;
    std::string unit;
  };
  const std::vector<Table> tables{
      {"n_p1_ppb", "P1 concentration", "n_p1_std_ppb", "ppb"},
      {"n_x_ppb", "X concentration", "n_x_err_ppb", "ppb"},
      {"n_nv_ppb", "NV concentration", "n_nv_err_ppb", "ppb"},
      {"nv_count", "NV count from saturation", "nv_count_err", "NVs"},
  };
  std::map<std::string, std::vector<Row>> rows;
  std::vector<std::pair<std::string, Report>> diffusion;
  for (const auto& path : results) {
    const Report r = Report::read(path);
    const double dose = number_or(r, "dose", 0.0);
    for (const auto& t : tables) {
      if (!r.get(t.key)) continue;
      double err = number_or(r, t.error_key, std::nan(""));
      if (std::isnan(err)) err = number_or(r, t.key.substr(0, t.key.rfind("_ppb")) + "_err_ppb", 0.0);
      std::string note;
      if (r.get(t.key.substr(0, t.key.rfind("_ppb")) + "_upper_bound").value_or("false") == "true") note = "upper bound";
      rows[t.key].push_back({dose, number_or(r, t.key, 0.0), err, note, path.filename().string()});
    }
    if (r.get("d_nm2_per_s")) diffusion.emplace_back(path.filename().string(), r);
  }

  std::ostringstream os;
  CommandResult res;
  Report summary;
  summary.set("tool_version", NVDEER_VERSION);
  summary.set("results", static_cast<double>(results.size()));
  for (const auto& t : tables) {
    auto it = rows.find(t.key);
    if (it == rows.end()) continue;
    auto& v = it->second;
    std::stable_sort(v.begin(), v.end(), [](const Row& a, const Row& b) { return a.dose < b.dose; });
    os << "## " << t.title << " (" << t.unit << ")\n";
    os << "dose,value,error,note,source\n";
    std::vector<double> values;
    for (const auto& row : v) {
      os << format_number(row.dose) << "," << format_number(row.value) << "," << format_number(row.error) << ","
         << row.note << "," << row.source << "\n";
      values.push_back(row.value);
    }
    const auto agg = aggregate(values);
    os << "mean," << format_number(agg.mean) << "," << format_number(agg.std) << ",std over rows,\n\n";
    summary.set(t.key + "_mean", agg.mean);
    summary.set(t.key + "_std", agg.std);
    summary.set(t.key + "_rows", static_cast<double>(agg.count));

    DataSet ds;
    ds.metadata["tool_version"] = NVDEER_VERSION;
    ds.metadata["table"] = t.title;
    Column dose{"dose", "ions/spot", {}}, val{"value", t.unit, {}}, err{"error", t.unit, {}};
    for (const auto& row : v) {
      dose.values.push_back(row.dose);
      val.values.push_back(row.value);
      err.values.push_back(row.error);
    }
    ds.columns = {dose, val, err};
    const std::string file = t.key + "_vs_dose.csv";
    ds.write(output_dir / file);
    res.files.push_back(output_dir / file);
    nlohmann::ordered_json j;
    j["title"] = t.title + " against implantation dose";
    j["data_file"] = file;
    j["x"] = {{"column", "dose"}, {"label", "dose (ions/spot)"}, {"scale", "log"}};
    j["series"] = {{{"column", "value"}, {"label", t.title}, {"style", "points"}, {"error_column", "error"}}};
    j["tool_version"] = NVDEER_VERSION;
    write_text(output_dir / ("plot_" + t.key + "_vs_dose.json"), j.dump(2) + "\n");
    res.files.push_back(output_dir / ("plot_" + t.key + "_vs_dose.json"));
  }
  if (!diffusion.empty()) {
    os << "## Diffusion\n";
    os << "source,volume_um3,r_nv_nm,d_rms_nm,d_nm2_per_s\n";
    for (const auto& [name, r] : diffusion) {
      os << name << "," << r.get("volume_um3").value_or("") << "," << r.get("r_nv_nm").value_or("") << ","
         << r.get("d_rms_nm").value_or("") << "," << r.get("d_nm2_per_s").value_or("") << "\n";
    }
    os << "\n";
  }
  write_text(output_dir / "report_tables.txt", os.str());
  res.files.push_back(output_dir / "report_tables.txt");
  summary.write(output_dir / "report_summary.txt");
  res.files.push_back(output_dir / "report_summary.txt");
  res.report = summary;
  return res;
}

}  // namespace nvdeer
