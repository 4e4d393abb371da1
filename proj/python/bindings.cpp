#include "nvdeer/acceptance.hpp"
#include "nvdeer/analytic.hpp"
#include "nvdeer/dynamics.hpp"
#include "nvdeer/errors.hpp"
#include "nvdeer/fitting.hpp"
#include "nvdeer/hamiltonians.hpp"
#include "nvdeer/photophysics.hpp"
#include "nvdeer/pipeline.hpp"

#include <pybind11/eigen.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

namespace py = pybind11;
using namespace nvdeer;

namespace {

SpectrumTrace make_trace(std::vector<double> x, std::vector<double> y, std::vector<double> sigma) {
  SpectrumTrace t;
  t.x = std::move(x);
  t.y = std::move(y);
  t.sigma = std::move(sigma);
  t.validate();
  return t;
}

FieldConfiguration make_field(double b0_mt, double tilt_deg, double rabi_mhz, double drive_freq_mhz) {
  FieldConfiguration f;
  f.b0_mt = b0_mt;
  f.tilt_deg = tilt_deg;
  f.rabi_mhz = rabi_mhz;
  f.drive_freq_mhz = drive_freq_mhz;
  f.validate();
  return f;
}

std::vector<SpinSystem> ensemble(const std::string& species) {
  switch (parse_species(species)) {
    case Species::kP1: return p1_ensemble();
    case Species::kNV: return nv_ensemble();
    case Species::kX: return {SpinSystem::x()};
  }
  return {};
}

py::dict estimate_dict(const ConcentrationEstimate& e) {
  py::dict d;
  d["species"] = species_name(e.species);
  d["value_ppb"] = e.value_ppb;
  d["uncertainty_ppb"] = e.uncertainty_ppb;
  d["propagated_error_ppb"] = e.propagated_error_ppb;
  d["method"] = method_name(e.method);
  d["per_peak_values"] = e.per_peak_values;
  d["per_peak_errors"] = e.per_peak_errors;
  d["per_peak_centers"] = e.per_peak_centers;
  d["central_excluded"] = e.central_excluded;
  d["is_upper_bound"] = e.is_upper_bound;
  d["upper_bound_ppb"] = e.upper_bound_ppb;
  d["warnings"] = e.warnings;
  return d;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Simulation and fitting of NV-DEER defect metrology experiments";
  m.attr("__version__") = NVDEER_VERSION;

  auto error = py::register_exception<Error>(m, "Error", PyExc_RuntimeError);
  py::register_exception<InvalidArgument>(m, "InvalidArgument", error.ptr());
  py::register_exception<InvalidData>(m, "InvalidData", error.ptr());
  py::register_exception<ConfigError>(m, "ConfigError", error.ptr());
  auto numeric = py::register_exception<NumericFailure>(m, "NumericFailure", error.ptr());
  py::register_exception<IntegrationFailure>(m, "IntegrationFailure", numeric.ptr());
  py::register_exception<FitFailure>(m, "FitFailure", numeric.ptr());

  py::class_<SpectrumTrace>(m, "SpectrumTrace")
      .def(py::init(&make_trace), py::arg("x"), py::arg("y"), py::arg("sigma") = std::vector<double>{})
      .def_readonly("x", &SpectrumTrace::x)
      .def_readonly("y", &SpectrumTrace::y)
      .def_readonly("sigma", &SpectrumTrace::sigma)
      .def("__len__", &SpectrumTrace::size)
      .def("window", &SpectrumTrace::window, py::arg("lo"), py::arg("hi"));

  // analytic model
  py::class_<LorentzianPeak>(m, "LorentzianPeak")
      .def(py::init([](double f, double g, double a) { return LorentzianPeak{f, g, a}; }), py::arg("f_r_mhz"),
           py::arg("gamma_mhz") = 1.0, py::arg("amp") = 1.0)
      .def_readwrite("f_r_mhz", &LorentzianPeak::f_r_mhz)
      .def_readwrite("gamma_mhz", &LorentzianPeak::gamma_mhz)
      .def_readwrite("amp", &LorentzianPeak::amp)
      .def("__repr__", [](const LorentzianPeak& p) {
        return "LorentzianPeak(f_r_mhz=" + format_number(p.f_r_mhz) + ", gamma_mhz=" + format_number(p.gamma_mhz) +
               ", amp=" + format_number(p.amp) + ")";
      });
  py::class_<LorentzianPeakSet>(m, "LorentzianPeakSet")
      .def(py::init<std::vector<LorentzianPeak>>(), py::arg("peaks"))
      .def_static("normalized", &LorentzianPeakSet::normalized, py::arg("peaks"))
      .def_property_readonly("peaks", &LorentzianPeakSet::peaks)
      .def("__len__", &LorentzianPeakSet::size);

  m.def("lorentzian", py::overload_cast<const LorentzianPeakSet&, double>(&lorentzian), py::arg("peaks"),
        py::arg("xi_mhz"));
  m.def("rabi_probability", &rabi_probability, py::arg("omega_mhz"), py::arg("detuning_mhz"), py::arg("t_b_us"));
  m.def("population_transfer", &population_transfer, py::arg("peaks"), py::arg("omega_mhz"), py::arg("f_b_mhz"),
        py::arg("t_b_us"));
  m.def("deer_rate_per_density", &deer_rate_per_density, py::arg("g_a"), py::arg("g_b"), py::arg("sigma"));
  m.def("deer_rate_per_us", &deer_rate_per_us, py::arg("n_ppb"), py::arg("g_a"), py::arg("g_b"), py::arg("sigma"));
  m.def("deer_signal_from_transfer", &deer_signal_from_transfer, py::arg("p_b"), py::arg("n_ppb"),
        py::arg("t_b_delay_us"), py::arg("sigma") = 0.5, py::arg("g_a") = 2.0, py::arg("g_b") = 2.0);
  m.def("detection_limit", &detection_limit, py::arg("min_contrast"), py::arg("t_b_delay_us"), py::arg("sigma"),
        py::arg("line_amp"), py::arg("g_a") = 2.0, py::arg("g_b") = 2.0);

  // spin systems and dynamics
  m.def("spectral_lines",
        [](const std::string& species, double b0_mt, double tilt_deg) {
          const auto field = make_field(b0_mt, tilt_deg, 0.0, 0.0);
          std::vector<std::pair<double, double>> out;
          for (const auto& l : spectral_lines(ensemble(species), field)) out.emplace_back(l.freq_mhz, l.amp);
          return out;
        },
        py::arg("species"), py::arg("b0_mt") = 37.2, py::arg("tilt_deg") = 0.1,
        "(frequency in MHz, amplitude) of every resolved line of an orientation ensemble.");
  m.def("simulate_deer_spectrum",
        [](const std::string& species, const std::vector<double>& f_grid, double b0_mt, double tilt_deg,
           double rabi_mhz, double t_b_us) {
          return simulate_deer_spectrum(ensemble(species), make_field(b0_mt, tilt_deg, rabi_mhz, 0.0), t_b_us, f_grid);
        },
        py::arg("species"), py::arg("f_grid_mhz"), py::arg("b0_mt") = 37.2, py::arg("tilt_deg") = 0.1,
        py::arg("rabi_mhz") = 2.5, py::arg("t_b_us") = 0.2);
  m.def("compute_sigma",
        [](const std::string& species, double b0_mt, double tilt_deg, int orientation, int level_a, int level_b) {
          const auto members = ensemble(species);
          if (orientation < 0 || orientation >= static_cast<int>(members.size()))
            throw InvalidArgument("orientation index out of range");
          const auto& sys = members[static_cast<std::size_t>(orientation)];
          const auto rotated = apply_orientation(sys, make_field(b0_mt, tilt_deg, 0.0, 0.0));
          return compute_sigma(static_hamiltonian(sys, rotated.b0_mt), electron_operators(sys), level_a, level_b);
        },
        py::arg("species"), py::arg("b0_mt"), py::arg("tilt_deg"), py::arg("orientation"), py::arg("level_a"),
        py::arg("level_b"));

  // photophysics
  m.def("nv_level_populations",
        [](const Eigen::Vector3d& b0_mt, double beta) { return nv_level_populations(b0_mt, beta); },
        py::arg("b0_nv_frame_mt"), py::arg("beta") = 0.03);
  m.def("steady_state",
        [](double b0_mt_axial, double b0_mt_perp, double beta, int n_pulses) {
          auto params = RateModelParams::standard(beta);
          params.alpha2 = mixing_coefficients(Vec3(b0_mt_perp, 0.0, b0_mt_axial));
          PulseTrain train;
          train.n_pulses = n_pulses;
          const auto ss = steady_state(params, train, PopulationVector::uniform_ground());
          return py::make_tuple(ss.readout.ground_fractions(), ss.pulses_to_converge);
        },
        py::arg("b0_axial_mt"), py::arg("b0_perp_mt"), py::arg("beta") = 0.03, py::arg("n_pulses") = 15,
        "(ground fractions, pulses to converge) under the standard pulse train.");

  // fitting
  m.def("fit_hahn_decay",
        [](const SpectrumTrace& t) {
          const auto f = fit_hahn_decay(t);
          return py::dict(py::arg("t2_us") = f.t2_us, py::arg("t2_err") = f.t2_err, py::arg("stretch") = f.stretch,
                          py::arg("stretch_err") = f.stretch_err);
        },
        py::arg("trace"));
  m.def("fit_rabi_frequency",
        [](const SpectrumTrace& t) {
          const auto f = fit_rabi_frequency(t);
          return py::dict(py::arg("omega_mhz") = f.omega_mhz, py::arg("omega_err") = f.omega_err,
                          py::arg("t_pi_us") = f.t_pi_us, py::arg("t_pi_err") = f.t_pi_err);
        },
        py::arg("trace"));
  m.def("fit_lorentzian_peaks",
        [](const SpectrumTrace& t, int n_peaks) {
          const auto f = fit_lorentzian_peaks(t, n_peaks);
          return py::make_tuple(f.peaks.peaks(), f.depths, f.baseline);
        },
        py::arg("trace"), py::arg("n_peaks"));
  m.def("fit_deer_decay",
        [](const SpectrumTrace& t, double p_b, double sigma) {
          DeerFixed fixed;
          fixed.sigma = sigma;
          return estimate_dict(fit_deer_decay(t, p_b, fixed));
        },
        py::arg("trace"), py::arg("p_b"), py::arg("sigma") = 0.5);
  m.def("aggregate",
        [](const std::vector<double>& v) {
          const auto a = aggregate(v);
          return py::make_tuple(a.mean, a.std);
        },
        py::arg("values"));

  // pipeline
  m.def("config_keys", [] {
    std::vector<std::string> keys;
    for (const auto& k : RunConfig::schema()) keys.push_back(k.key);
    return keys;
  });
  auto to_config = [](const std::map<std::string, std::string>& values, const std::string& output_dir) {
    RunConfig c;
    c.apply(values);
    if (!output_dir.empty()) c.output_dir = output_dir;
    c.validate();
    return c;
  };
  m.def("default_config", [] { return RunConfig{}.to_map(); });
  m.def("config_hash", [to_config](const std::map<std::string, std::string>& v) { return to_config(v, "").hash(); },
        py::arg("values"));
  m.def("simulate",
        [to_config](const std::map<std::string, std::string>& values, const std::string& output_dir) {
          const auto r = cmd_simulate(to_config(values, output_dir));
          return py::make_tuple(r.report.entries, r.files);
        },
        py::arg("values"), py::arg("output_dir"), "Runs a simulation; returns (report entries, written files).");
  m.def("fit",
        [to_config](const std::map<std::string, std::string>& values, const std::vector<std::filesystem::path>& data,
                    const std::string& output_dir) {
          const auto r = cmd_fit(to_config(values, output_dir), data);
          return py::make_tuple(r.report.entries, r.files);
        },
        py::arg("values"), py::arg("data"), py::arg("output_dir"),
        "Fits data files; returns (report entries, written files).");
  m.def("run_acceptance",
        [](const std::vector<int>& only) {
          AcceptanceOptions opts;
          opts.only = only;
          std::vector<py::dict> out;
          for (const auto& r : run_acceptance(opts))
            out.push_back(py::dict(py::arg("id") = r.id, py::arg("name") = r.name, py::arg("passed") = r.passed,
                                   py::arg("detail") = r.detail, py::arg("seconds") = r.seconds));
          return out;
        },
        py::arg("only") = std::vector<int>{});
}
