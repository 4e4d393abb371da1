#ifdef NVDEER_CLI_PATH

#include <doctest.h>

#include <sys/wait.h>
#include <unistd.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

namespace fs = std::filesystem;

namespace {

struct Run {
  int code = -1;
  std::string out;
  std::string err;
};

std::string slurp(const fs::path& p) {
  std::ifstream in(p);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

fs::path workdir() {
  static const fs::path dir = [] {
    const fs::path p = fs::temp_directory_path() / ("nvdeer_cli_" + std::to_string(::getpid()));
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
  }();
  return dir;
}

Run cli(const std::string& args) {
  const fs::path out = workdir() / "stdout.txt", err = workdir() / "stderr.txt";
  const std::string cmd = std::string("cd '") + workdir().string() + "' && '" + NVDEER_CLI_PATH + "' " + args + " >'" +
                          out.string() + "' 2>'" + err.string() + "'";
  const int status = std::system(cmd.c_str());
  Run r;
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  r.out = slurp(out);
  r.err = slurp(err);
  return r;
}

void write_file(const fs::path& p, const std::string& text) {
  std::ofstream o(p);
  o << text;
}

}  // namespace

TEST_CASE("cli: version and usage errors") {
  const auto v = cli("--version");
  CHECK(v.code == 0);
  CHECK(v.out.find(NVDEER_VERSION) != std::string::npos);
  CHECK(cli("").code == 2);
  CHECK(cli("simulate --no-such-flag 1").code == 2);
  CHECK(cli("frobnicate").code == 2);
}

TEST_CASE("cli: configuration errors exit with 2") {
  const auto r = cli("simulate --experiment hahn --b0-mt -1 -o bad_field");
  CHECK(r.code == 2);
  CHECK(r.err.find("field.b0_mt") != std::string::npos);
  CHECK(cli("simulate --experiment nmr -o bad_exp").code == 2);
  write_file(workdir() / "broken.cfg", "experiment = hahn\nt2_us 300\n");
  const auto c = cli("simulate -c broken.cfg -o broken_cfg");
  CHECK(c.code == 2);
  CHECK(c.err.find("broken.cfg:2:") != std::string::npos);
}

TEST_CASE("cli: flags override the configuration file") {
  write_file(workdir() / "hahn.cfg", "experiment = hahn\nt2-us = 200\nstretch = 1.5\n");
  const auto r = cli("simulate -c hahn.cfg --t2-us 250 -o layered");
  REQUIRE(r.code == 0);
  const std::string summary = slurp(workdir() / "layered" / "summary.txt");
  CHECK(summary.find("t2_us = 250") != std::string::npos);
  CHECK(summary.find("stretch = 1.5") != std::string::npos);
}

TEST_CASE("cli: malformed data exits with 3 and names the line") {
  write_file(workdir() / "bad.csv",
             "# nvdeer data\n# experiment: hahn\n# units: us,1\ntwo_t_a,i_hahn\n0,1\n10,0.9\n20,oops\n");
  const auto r = cli("fit --experiment hahn -o bad_fit bad.csv");
  CHECK(r.code == 3);
  CHECK(r.err.find("bad.csv:7:") != std::string::npos);
}

TEST_CASE("cli: a failed fit exits with 4") {
  std::string text = "# nvdeer data\n# experiment: deer-rabi\n# units: us,1,1\nt_b,i_deer,sigma\n";
  for (int k = 0; k < 50; ++k) text += std::to_string(0.02 * k) + ",1,0.01\n";
  write_file(workdir() / "flat_rabi.csv", text);
  CHECK(cli("fit --experiment deer-rabi -o flat flat_rabi.csv").code == 4);
}

TEST_CASE("cli: missing stage input is reported by stage") {
  REQUIRE(cli("simulate -o spectrum").code == 0);
  const auto r = cli("fit -o spectrum_fit spectrum/deer_spectrum.csv");
  CHECK(r.code == 2);
  CHECK(r.err.find("stage 2") != std::string::npos);
}

TEST_CASE("cli: re-running with the same seed reproduces the report byte for byte") {
  REQUIRE(cli("simulate --experiment saturation --seed 7 -o sat").code == 0);
  REQUIRE(cli("fit --experiment saturation --seed 7 -o fit_a sat/saturation.csv").code == 0);
  REQUIRE(cli("fit --experiment saturation --seed 7 -o fit_b sat/saturation.csv").code == 0);
  const std::string a = slurp(workdir() / "fit_a" / "fit_report.txt");
  CHECK(!a.empty());
  CHECK(a == slurp(workdir() / "fit_b" / "fit_report.txt"));
  CHECK(a.find("seed = 7") != std::string::npos);
  CHECK(a.find("config_hash = ") != std::string::npos);
  CHECK(a.find("tool_version = ") != std::string::npos);

  REQUIRE(cli("report -o rep fit_a/fit_report.txt").code == 0);
  CHECK(fs::exists(workdir() / "rep" / "report_tables.txt"));
}

TEST_CASE("cli: selftest runs single criteria") {
  const auto r = cli("selftest --only 1 --only 3");
  CHECK(r.code == 0);
  CHECK(r.out.find("PASS  [1]") != std::string::npos);
  CHECK(r.out.find("PASS  [3]") != std::string::npos);
  CHECK(r.out.find("[2]") == std::string::npos);
  CHECK(cli("selftest --only 12").code == 2);
}

#endif
