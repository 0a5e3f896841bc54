"""Banded peak-amplitude tables and the placeholder-geometry calibration.

The bench table lists, per frequency band, the largest tip amplitude of a
1 Hz sweep simulated at 20 V and scaled linearly to the drive voltages of
interest.  Because only rounded 60 V and 200 V figures are published, each
cell pins the 20 V value to the intersection of two rounding intervals; the
shipped geometry and loads are calibrated to the midpoints of those
intervals.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, replace

import numpy as np
from scipy.optimize import least_squares

from .model import (
    DEFAULT_BEARING,
    NO_LOAD,
    ActuatorConfig,
    ActuatorError,
    BearingParams,
    BimorphGeometry,
    MaxwellLoad,
    SingularBoundary,
    tip_response,
)

BANDS = ((1.0, 50.0), (50.0, 300.0), (300.0, 1000.0))
REFERENCE_VOLTAGE = 20.0

# published rounded amplitudes (um), band order as BANDS
PUBLISHED = {
    "unloaded": {60.0: (123, 244, 92), 200.0: (411, 814, 305)},
    "lowerImpedance": {60.0: (29, 26, 16), 200.0: (97, 86, 53)},
}


def band_mask(f: np.ndarray, band: tuple[float, float], last: bool) -> np.ndarray:
    lo, hi = band
    return (f >= lo) & ((f <= hi) if last else (f < hi))


def band_maxima(geom: BimorphGeometry, bearing: BearingParams, load: MaxwellLoad,
                voltage: float = REFERENCE_VOLTAGE, bands=BANDS, step: float = 1.0) -> np.ndarray:
    """Peak tip amplitude (m) per band over a sweep with ``step`` Hz spacing.

    Bands are half open except the last, which includes its upper edge.
    """
    f = np.arange(bands[0][0], bands[-1][1] + step / 2, step)
    amp = tip_response(geom, bearing, load, f, voltage)
    return np.array([amp[band_mask(f, b, i == len(bands) - 1)].max()
                     for i, b in enumerate(bands)])


@dataclass
class AmplitudeTable:
    """``rows[(load, voltage)]`` -> band maxima in metres."""

    bands: tuple
    rows: dict
    reference_voltage: float

    def um(self, load: str, voltage: float) -> np.ndarray:
        return self.rows[(load, voltage)] * 1e6

    def write_csv(self, fp) -> None:
        w = csv.writer(fp)
        w.writerow(["voltage_V", "load"] + [f"{lo:g}-{hi:g}Hz_um" for lo, hi in self.bands])
        for (load, v), vals in self.rows.items():
            w.writerow([f"{v:g}", load] + [f"{x * 1e6:.3f}" for x in vals])


def amplitude_table(geom: BimorphGeometry, bearing: BearingParams, loads: dict,
                    voltages=(60.0, 200.0), reference_voltage: float = REFERENCE_VOLTAGE,
                    bands=BANDS) -> AmplitudeTable:
    """Simulate once at ``reference_voltage`` and scale each entry linearly."""
    rows = {}
    for label, load in loads.items():
        base = band_maxima(geom, bearing, load, reference_voltage, bands)
        for v in voltages:
            rows[(label, float(v))] = base * (v / reference_voltage)
    return AmplitudeTable(tuple(bands), rows, reference_voltage)


def config_table(config: ActuatorConfig, voltages=(60.0, 200.0),
                 labels=("unloaded", "lowerImpedance")) -> AmplitudeTable:
    loads = {label: config.load(label) for label in labels}
    return amplitude_table(config.geometry, config.bearing, loads, voltages,
                           config.reference_voltage)


def consistent_interval(printed: dict, reference_voltage: float = REFERENCE_VOLTAGE):
    """Per band, the interval of reference-voltage amplitudes (um) that round
    to every printed value.  Returns ``(lo, hi)`` arrays; empty where lo >= hi.
    """
    lo = np.full(3, -math.inf)
    hi = np.full(3, math.inf)
    for v, vals in printed.items():
        k = v / reference_voltage
        lo = np.maximum(lo, (np.asarray(vals) - 0.5) / k)
        hi = np.minimum(hi, (np.asarray(vals) + 0.5) / k)
    return lo, hi


def calibration_targets(reference_voltage: float = REFERENCE_VOLTAGE) -> dict:
    """Midpoints of the consistent intervals, in metres."""
    out = {}
    for label, printed in PUBLISHED.items():
        lo, hi = consistent_interval(printed, reference_voltage)
        if np.any(lo >= hi):
            raise ActuatorError(f"published {label} values admit no common 20 V amplitude")
        out[label] = (lo + hi) / 2 * 1e-6
    return out


def _solve(residual, x0, lb, ub):
    r = least_squares(residual, x0, bounds=(lb, ub), xtol=1e-14, ftol=1e-14, gtol=1e-14)
    return r.x, float(np.max(np.abs(residual(r.x))))


def calibrate_geometry(template: BimorphGeometry, target: np.ndarray,
                       bearing: BearingParams = DEFAULT_BEARING,
                       voltage: float = REFERENCE_VOLTAGE):
    """Fit total thickness, coupling and tip mass so the unloaded band maxima
    hit ``target`` (m).  Layer proportions, length, width and loss factor stay.
    Returns ``(geometry, max log error)``.
    """
    t0 = template.thickness
    fractions = [l[0] / t0 for l in template.layers]

    def build(x):
        t, c, m = np.exp(x)
        layers = [(fr * t, E, rho) for fr, (_, E, rho) in zip(fractions, template.layers)]
        return replace(template, layers=tuple(layers), coupling=c, tip_mass=m)

    def residual(x):
        try:
            return np.log(band_maxima(build(x), bearing, NO_LOAD, voltage) / target)
        except SingularBoundary:
            return np.full(3, 1e3)

    x0 = np.log([t0, template.coupling, max(template.tip_mass, 1e-5)])
    lb, ub = np.log([1e-4, 1e-8, 1e-7]), np.log([5e-2, 1e2, 1e-1])
    x, err = _solve(residual, x0, lb, ub)
    return build(x), err


def calibrate_load(geom: BimorphGeometry, target: np.ndarray, start: MaxwellLoad,
                   bearing: BearingParams = DEFAULT_BEARING,
                   voltage: float = REFERENCE_VOLTAGE):
    """Fit the load's parallel stiffness and first branch to ``target`` (m)."""
    rest = start.branches[1:]

    def build(x):
        kp, k1, d1 = np.exp(x)
        return MaxwellLoad(((k1, d1),) + rest, kp, start.label)

    def residual(x):
        try:
            return np.log(band_maxima(geom, bearing, build(x), voltage) / target)
        except SingularBoundary:
            return np.full(3, 1e3)

    k1, d1 = start.branches[0]
    x0 = np.log([max(start.parallel, 1.0), k1, d1])
    lb, ub = np.log([1e-2, 1e-2, 1e-6]), np.log([1e6, 1e7, 1e4])
    x, err = _solve(residual, x0, lb, ub)
    return build(x), err


CALIBRATION_TEMPLATE = BimorphGeometry(
    length=0.010, width=3e-3,
    layers=((6.6e-3, 6.6e10, 7800.0), (6.6e-3, 6.6e10, 7800.0)),
    coupling=1.5, loss_factor=0.02, tip_mass=1e-4,
    label="NON-PAPER effective placeholder")
LOAD_TEMPLATE = MaxwellLoad(((5000.0, 5.0),), 1000.0, "lowerImpedance")
UPPER_LOAD_FACTOR = 2.0


def calibrated_config(bearing: BearingParams = DEFAULT_BEARING) -> ActuatorConfig:
    """Rebuild the shipped placeholder config from the published table."""
    targets = calibration_targets()
    geom, _ = calibrate_geometry(CALIBRATION_TEMPLATE, targets["unloaded"], bearing)
    lower, _ = calibrate_load(geom, targets["lowerImpedance"], LOAD_TEMPLATE, bearing)
    upper = MaxwellLoad(tuple((k * UPPER_LOAD_FACTOR, d * UPPER_LOAD_FACTOR)
                              for k, d in lower.branches),
                        lower.parallel * UPPER_LOAD_FACTOR, "upperImpedance")
    return ActuatorConfig(geom, bearing, {"lowerImpedance": lower, "upperImpedance": upper},
                          REFERENCE_VOLTAGE,
                          "NON-PAPER placeholder. Effective section properties and loads "
                          "calibrated so the 20 V band maxima reproduce the published "
                          "60 V / 200 V table under the published median bearing. "
                          "Not a physical description of any actuator.")
