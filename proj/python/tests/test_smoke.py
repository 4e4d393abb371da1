import math

import numpy as np
import pytest

import nvdeer


def test_version():
    assert nvdeer.__version__ == "1.0.0"


def test_p1_lines_sum_to_one_and_sit_near_first_order_positions():
    lines = nvdeer.spectral_lines("P1", b0_mt=37.2, tilt_deg=0.1)
    assert len(lines) == 6
    assert sum(a for _, a in lines) == pytest.approx(1.0, abs=1e-12)
    nu0 = 28.025 * 37.2
    for f, _ in lines:
        assert abs(f - nu0) < 120.0


def test_rabi_probability_matches_closed_form():
    omega, delta, t = 2.5, 2.5, 0.2
    w = math.hypot(omega, delta)
    expected = omega**2 / w**2 * math.sin(math.pi * w * t) ** 2
    assert nvdeer.rabi_probability(omega, delta, t) == pytest.approx(expected, abs=1e-12)


def test_lorentzian_integrates_to_one():
    peaks = nvdeer.LorentzianPeakSet([nvdeer.LorentzianPeak(1000.0, 0.5, 1.0)])
    xi = np.linspace(900.0, 1100.0, 200001)
    y = np.array([nvdeer.lorentzian(peaks, v) for v in xi])
    trapezoid = getattr(np, "trapezoid", None) or np.trapz
    area = trapezoid(y, xi)
    # tails beyond +/-100 MHz carry 2/pi * atan(0.5/100) of the area
    assert area == pytest.approx(1.0 - 2.0 / math.pi * math.atan(0.5 / 100.0), abs=1e-6)


def test_peak_set_rejects_bad_amplitudes():
    with pytest.raises(nvdeer.InvalidArgument):
        nvdeer.LorentzianPeakSet([nvdeer.LorentzianPeak(1000.0, 0.5, 0.7)])


def test_deer_signal_decays_with_concentration():
    values = [nvdeer.deer_signal_from_transfer(0.2, n, 20.0) for n in (0.0, 50.0, 200.0)]
    assert values[0] == pytest.approx(1.0)
    assert values[0] > values[1] > values[2] > 0.0


def test_sigma_of_off_axis_nv():
    assert nvdeer.compute_sigma("NV", 37.2, 0.1, 1, 2, 3) == pytest.approx(0.87, abs=0.01)


def test_hahn_fit_recovers_parameters():
    x = np.linspace(0.0, 900.0, 60)
    y = np.exp(-((x / 313.0) ** 1.8))
    fit = nvdeer.fit_hahn_decay(nvdeer.SpectrumTrace(x.tolist(), y.tolist()))
    assert fit["t2_us"] == pytest.approx(313.0, rel=1e-6)
    assert fit["stretch"] == pytest.approx(1.8, rel=1e-6)


def test_flat_rabi_trace_raises_fit_failure():
    x = np.linspace(0.0, 1.0, 50)
    with pytest.raises(nvdeer.FitFailure):
        nvdeer.fit_rabi_frequency(nvdeer.SpectrumTrace(x.tolist(), [1.0] * 50))


def test_unknown_config_key_raises_config_error():
    with pytest.raises(nvdeer.ConfigError):
        nvdeer.config_hash({"no_such_key": "1"})


def test_simulate_and_fit_round_trip(tmp_path):
    values = {"experiment": "hahn", "noise": "0", "seed": "3"}
    _, files = nvdeer.simulate(values, str(tmp_path / "sim"))
    data = [f for f in files if str(f).endswith(".csv")]
    assert data
    entries, _ = nvdeer.fit(values, data, str(tmp_path / "fit"))
    report = dict(entries)
    assert float(report["t2_us"]) == pytest.approx(313.0, rel=1e-6)
    assert report["config_hash"] == nvdeer.config_hash(values)


def test_acceptance_criterion_one():
    (result,) = nvdeer.run_acceptance([1])
    assert result["id"] == 1 and result["passed"], result["detail"]
