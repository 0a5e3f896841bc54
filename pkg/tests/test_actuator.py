import itertools
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from tactwin import actuator
from tactwin.actuator import (
    DEFAULT_BEARING,
    NO_LOAD,
    BearingParams,
    BimorphGeometry,
    FrequencyResponse,
    MaxwellLoad,
    table,
)

# slender physical bimorph used for textbook checks (not the shipped placeholder)
SLENDER = BimorphGeometry(0.03, 3e-3, ((3e-4, 6.6e10, 7800.0), (3e-4, 6.6e10, 7800.0)),
                          coupling=1e-3, loss_factor=0.01)


def test_homogeneous_lamination():
    assert SLENDER.EI == pytest.approx(3e-3 * 6.6e10 * (6e-4) ** 3 / 12, rel=1e-12)
    assert SLENDER.rho_A == pytest.approx(3e-3 * 6e-4 * 7800, rel=1e-12)


def test_zero_voltage_zero_amplitude():
    f = np.linspace(1, 1000, 50)
    assert not np.any(actuator.tip_response(SLENDER, DEFAULT_BEARING, NO_LOAD, f, 0.0))


@given(st.floats(1, 2000), st.floats(0.1, 200))
def test_amplitude_linear_in_voltage(f, v):
    a1 = actuator.tip_response(SLENDER, DEFAULT_BEARING, NO_LOAD, f, v)
    a2 = actuator.tip_response(SLENDER, DEFAULT_BEARING, NO_LOAD, f, 2 * v)
    assert a2 == pytest.approx(2 * a1, rel=1e-12)


def test_rigid_clamp_resonance_matches_textbook():
    geom = BimorphGeometry(SLENDER.length, SLENDER.width, SLENDER.layers, SLENDER.coupling)
    f1 = actuator.first_resonance(geom, BearingParams.rigid())
    assert f1 == pytest.approx(geom.rigid_clamp_resonance(), rel=1e-3)


def test_rigid_clamp_static_deflection():
    geom = BimorphGeometry(SLENDER.length, SLENDER.width, SLENDER.layers, SLENDER.coupling)
    a = actuator.tip_response(geom, BearingParams.rigid(), NO_LOAD, 0.01, 1.0)
    assert a == pytest.approx(actuator.static_tip(geom, 1.0), rel=1e-6)


def test_compliant_bearing_lowers_resonance():
    rigid = actuator.first_resonance(SLENDER, BearingParams.rigid())
    soft = actuator.first_resonance(SLENDER, DEFAULT_BEARING)
    assert soft < rigid


def test_maxwell_load():
    load = MaxwellLoad(((1000.0, 2.0),), 50.0)
    w = np.array([0.0, 1e9])
    K = load.stiffness(w)
    assert K[0] == pytest.approx(50.0)
    assert K[1].real == pytest.approx(1050.0, rel=1e-6)
    with pytest.raises(actuator.ActuatorError):
        MaxwellLoad(((-1.0, 1.0),))


def test_geometry_validation():
    with pytest.raises(actuator.ActuatorError):
        BimorphGeometry(0.0, 1e-3, ((1e-4, 1e10, 1e3),), 1.0)
    with pytest.raises(actuator.ActuatorError):
        BimorphGeometry(0.01, 1e-3, ((1e-4, 1e10, 1e3),), 1.0, tip_mass=-1)


def test_config_round_trip(tmp_path):
    cfg = actuator.load_config()
    assert "NON-PAPER" in cfg.note
    assert cfg.bearing == DEFAULT_BEARING
    actuator.save_config(cfg, tmp_path / "a.json")
    back = actuator.load_config(tmp_path / "a.json")
    assert back.geometry == cfg.geometry and back.loads == cfg.loads
    assert cfg.load("none") is NO_LOAD and cfg.load("unloaded") is NO_LOAD
    with pytest.raises(actuator.ActuatorError):
        cfg.load("nope")


def test_published_bearing_defaults():
    assert DEFAULT_BEARING.as_array().tolist() == [8870.0, 3.62, 0.54, 1.02e-5]


# --- fitting ------------------------------------------------------------------------

TRUE = BearingParams(8870 * 1.3, 3.62 * 0.8, 0.54 * 0.7, 1.02e-5 * 1.25)
F = np.arange(10, 401.0)


def test_noiseless_recovery():
    g = actuator.load_config().geometry
    fit = actuator.fit_bearing(g, actuator.synthesize(g, TRUE, F))
    assert np.allclose(fit.params.as_array(), TRUE.as_array(), rtol=1e-3)
    assert fit.residual < 1e-20


def test_fit_input_checks():
    g = actuator.load_config().geometry
    with pytest.raises(actuator.InsufficientData):
        actuator.fit_bearing(g, actuator.synthesize(g, TRUE, F[:5]))
    with pytest.raises(actuator.ActuatorError):
        FrequencyResponse([2.0, 1.0], [1.0, 1.0])


def test_frequency_response_csv(tmp_path):
    g = actuator.load_config().geometry
    fr = actuator.synthesize(g, TRUE, F[:20], voltage=20.0)
    fr.write_csv(tmp_path / "fr.csv")
    back = FrequencyResponse.read_csv(tmp_path / "fr.csv")
    assert np.allclose(back.f, fr.f)
    assert np.allclose(back.amplitude, fr.amplitude, rtol=1e-8)
    assert back.voltage == 20.0


def test_median_definition():
    mk = lambda k: BearingParams(k, 1.0, 1.0, 1.0)
    assert actuator.median_params([mk(5.0)]) == mk(5.0)
    assert actuator.median_params([mk(1.0), mk(2.0), mk(100.0)]).k_t == 2.0
    assert actuator.median_params([mk(1.0), mk(2.0), mk(3.0), mk(4.0)]).k_t == 2.0
    with pytest.raises(actuator.EmptyInput):
        actuator.median_params([])


@given(st.lists(st.tuples(*[st.floats(1e-6, 1e6)] * 4), min_size=1, max_size=7), st.randoms())
def test_median_permutation_invariant(rows, rnd):
    fits = [BearingParams(*r) for r in rows]
    shuffled = fits[:]
    rnd.shuffle(shuffled)
    assert actuator.median_params(fits) == actuator.median_params(shuffled)


# --- amplitude table ---------------------------------------------------------------

def test_table_reproduces_published_values():
    tab = actuator.config_table(actuator.load_config())
    for label, printed in table.PUBLISHED.items():
        for v, vals in printed.items():
            assert np.all(np.abs(tab.um(label, v) - np.array(vals)) <= 1.0), (label, v)
        assert np.allclose(tab.um(label, 200.0), tab.um(label, 60.0) * 10 / 3, rtol=1e-12)


def test_consistent_intervals():
    lo, hi = table.consistent_interval(table.PUBLISHED["unloaded"])
    assert np.all(lo < hi)
    targets = table.calibration_targets()
    assert np.allclose(targets["unloaded"] * 1e6, [41.10, 81.40, 30.525])
    assert np.allclose(targets["lowerImpedance"] * 1e6, [9.70, 8.60, 5.30])


def test_loaded_never_exceeds_unloaded():
    cfg = actuator.load_config()
    f = np.arange(1.0, 1001.0)
    free = actuator.tip_response(cfg.geometry, cfg.bearing, NO_LOAD, f, 20.0)
    for label in ("lowerImpedance", "upperImpedance"):
        loaded = actuator.tip_response(cfg.geometry, cfg.bearing, cfg.load(label), f, 20.0)
        assert np.all(loaded <= free * (1 + 1e-9)), label
    lower = actuator.tip_response(cfg.geometry, cfg.bearing, cfg.load("lowerImpedance"), f, 20.0)
    upper = actuator.tip_response(cfg.geometry, cfg.bearing, cfg.load("upperImpedance"), f, 20.0)
    assert np.all(upper <= lower * (1 + 1e-9))


def test_band_edges():
    f = np.array([1.0, 49.0, 50.0, 299.0, 300.0, 1000.0])
    assert table.band_mask(f, (1, 50), False).tolist() == [1, 1, 0, 0, 0, 0]
    assert table.band_mask(f, (300, 1000), True).tolist() == [0, 0, 0, 0, 1, 1]


@pytest.mark.slow
def test_calibration_rebuilds_shipped_config():
    rebuilt = table.calibrated_config()
    shipped = actuator.load_config()
    assert rebuilt.geometry.thickness == pytest.approx(shipped.geometry.thickness, rel=1e-3)
    assert rebuilt.geometry.coupling == pytest.approx(shipped.geometry.coupling, rel=1e-3)
    tab = actuator.config_table(rebuilt)
    for label, printed in table.PUBLISHED.items():
        for v, vals in printed.items():
            assert np.all(np.abs(tab.um(label, v) - np.array(vals)) <= 1.0)
