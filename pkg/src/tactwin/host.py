"""Host-side control surface: board manager, generator handles, pose tracking.

The manager drives every unit on a ``VirtualBus`` through the run levels and
keeps a mirror of their states, refreshed from each acknowledged config
command.  The pose tracker integrates two optical-sensor displacement streams
into a planar pose.
"""

from __future__ import annotations

import csv
import logging
import math
import warnings
from dataclasses import dataclass, field, replace
from typing import Iterable, Iterator, Sequence

import numpy as np

from . import interconnect, wiretab
from .interconnect import Nack, Timeout, VirtualBus
from .siggen import (
    GeneratorConfig,
    GetState,
    Reset,
    RunLevel,
    SetPwmDepth,
    SetSamplingRate,
    SetSmoothing,
    Start,
    Stop,
)

log = logging.getLogger(__name__)

FRAME_BUDGET = 1e-3
SENSOR_RATE = 500.0


class HostError(RuntimeError):
    pass


class EmptyBus(UserWarning):
    pass


class UnitInError(HostError):
    pass


class NonPositiveCalibration(ValueError):
    pass


# --- board manager ---------------------------------------------------------------

@dataclass
class FrameReport:
    duration: float
    transfers: int
    delivered: list = field(default_factory=list)
    rejected: list = field(default_factory=list)
    budget: float = FRAME_BUDGET

    @property
    def slack(self) -> float:
        return self.budget - self.duration

    @property
    def over_budget(self) -> bool:
        return self.duration > self.budget


class SignalGenerator:
    """Handle on one enumerated unit."""

    def __init__(self, manager: "SignalManager", entry: interconnect.RegistryEntry):
        self.manager = manager
        self.entry = entry

    @property
    def dip(self) -> int:
        return self.entry.dip

    @property
    def config_address(self) -> int:
        return self.entry.config_addr

    @property
    def channels(self) -> int:
        return self.entry.channels

    @property
    def state(self) -> RunLevel:
        return self.manager.mirror[self.dip]

    @property
    def machine(self):
        return self.manager.bus.unit_at(self.config_address)

    def send(self, table: wiretab.FrequencyTable) -> FrameReport:
        return self.manager.send_to(self, table)

    def command(self, cmd) -> RunLevel:
        return self.manager.command(self.dip, cmd)

    def __repr__(self):
        return f"SignalGenerator(dip={self.dip}, state={self.state.name})"


class SignalManager:
    """Enumerates, configures and feeds all units on one bus."""

    def __init__(self, bus: VirtualBus, defaults: GeneratorConfig | None = None,
                 frame_budget: float = FRAME_BUDGET):
        self.bus = bus
        self.defaults = defaults or GeneratorConfig()
        self.frame_budget = frame_budget
        self.registry: list[interconnect.RegistryEntry] = []
        self.mirror: dict[int, RunLevel] = {}
        self.failures: dict[int, str] = {}
        self._handles: dict[int, SignalGenerator] = {}

    # -- setup ------------------------------------------------------------------

    def initialize_boards(self, overrides: dict[int, dict] | None = None) -> dict[int, RunLevel]:
        """Enumerate and bring every unit to Running.

        ``overrides`` maps a DIP address to config field overrides for that
        unit.  Units that fail stay in Error (or wherever they stopped) and
        are listed in ``failures``; this never raises for a single unit.
        """
        overrides = overrides or {}
        self.registry = self.bus.enumerate()
        self.mirror.clear()
        self.failures.clear()
        self._handles = {e.dip: SignalGenerator(self, e) for e in self.registry}
        if not self.registry:
            warnings.warn("no units on the bus", EmptyBus, stacklevel=2)
            return {}
        for entry in self.registry:
            self.mirror[entry.dip] = RunLevel.ENUMERATED
            cfg = replace(self.defaults, **overrides.get(entry.dip, {})) \
                if entry.dip in overrides else self.defaults
            try:
                self.command(entry.dip, SetSamplingRate(int(round(cfg.sampling_rate))))
                self.command(entry.dip, SetPwmDepth(cfg.pwm_bit_depth))
                self.command(entry.dip, SetSmoothing(cfg.smoothing_alpha))
                level = self.command(entry.dip, Start())
            except (Nack, Timeout) as exc:
                self.failures[entry.dip] = str(exc)
                log.warning("DIP %d: %s", entry.dip, exc)
                continue
            if level is RunLevel.ERROR:
                reason = self.machine(entry.dip).error_reason or "error"
                self.failures[entry.dip] = reason
                log.warning("DIP %d entered Error: %s", entry.dip, reason)
        return dict(self.mirror)

    def machine(self, dip: int):
        return self.bus.unit_at(self._handles[dip].config_address)

    def command(self, dip: int, cmd) -> RunLevel:
        """Send a config command to unit ``dip`` and update the mirror from its answer."""
        handle = self._handles[dip]
        try:
            response = self.bus.config_command(handle.config_address, cmd)
        except Nack:
            self.refresh(dip)
            raise
        level = RunLevel(response[1])
        self.mirror[dip] = level
        return level

    def refresh(self, dip: int) -> RunLevel:
        response = self.bus.config_command(self._handles[dip].config_address, GetState())
        self.mirror[dip] = RunLevel(response[1])
        return self.mirror[dip]

    def reset(self, dip: int) -> RunLevel:
        return self.command(dip, Reset())

    def stop(self, dip: int) -> RunLevel:
        return self.command(dip, Stop())

    # -- access -----------------------------------------------------------------

    def generators(self) -> list[SignalGenerator]:
        return [self._handles[e.dip] for e in self.registry]

    def __iter__(self) -> Iterator[SignalGenerator]:
        return iter(self.generators())

    def generator(self, dip: int) -> SignalGenerator:
        return self._handles[dip]

    @property
    def channel_count(self) -> int:
        return interconnect.total_channels(self.registry)

    def running(self) -> list[SignalGenerator]:
        return [g for g in self.generators() if self.mirror.get(g.dip) is RunLevel.RUNNING]

    # -- data -------------------------------------------------------------------

    def _encoded(self, table, cache, rate):
        if rate not in cache:
            cache[rate] = wiretab.encode(table, rate)
        return cache[rate]

    def _check_budget(self, report: FrameReport):
        if report.over_budget:
            warnings.warn(f"frame took {report.duration * 1e6:.1f} us, budget "
                          f"{report.budget * 1e6:.0f} us", RuntimeWarning, stacklevel=3)

    def send_to(self, target: SignalGenerator | int, table: wiretab.FrequencyTable) -> FrameReport:
        """Write ``table`` to one unit; Error units are rejected without bus traffic."""
        handle = target if isinstance(target, SignalGenerator) else self._handles[target]
        return self._send([handle], table)

    def send_all(self, table: wiretab.FrequencyTable, broadcast: bool = False) -> FrameReport:
        """Write the same table to every unit, addressed in turn or in one broadcast.

        Broadcast needs a common sampling rate among the Running units.
        """
        if not broadcast:
            return self._send(self.generators(), table)
        t0 = self.bus.now
        live = self.running()
        report = FrameReport(0.0, 0, budget=self.frame_budget)
        for g in self.generators():
            if g not in live:
                report.rejected.append(f"DIP {g.dip}: unit is {self.mirror[g.dip].name}")
        rates = {self.machine(g.dip).config.sampling_rate for g in live}
        if len(rates) > 1:
            raise HostError(f"broadcast needs one sampling rate, units use {sorted(rates)}")
        if live:
            pkg = wiretab.encode(table, rates.pop())
            self.bus.broadcast(True)
            try:
                tr = self.bus.bulk_write(pkg)
            finally:
                self.bus.broadcast(False)
            report.transfers = 1
            live_dips = {g.dip for g in live}
            report.delivered = [d for d in tr.delivered if d in live_dips]
            # drops from units already rejected above are not news
            report.rejected.extend(msg for msg in tr.dropped
                                   if any(msg.startswith(f"DIP {d}:") for d in live_dips))
        report.duration = self.bus.now - t0
        self._check_budget(report)
        return report

    def _send(self, handles: Sequence[SignalGenerator], table) -> FrameReport:
        t0 = self.bus.now
        cache: dict[float, bytes] = {}
        report = FrameReport(0.0, 0, budget=self.frame_budget)
        for g in handles:
            state = self.mirror.get(g.dip)
            if state not in (RunLevel.CONFIGURED, RunLevel.RUNNING):
                name = state.name if state is not None else "unknown"
                reason = self.failures.get(g.dip, "")
                report.rejected.append(f"DIP {g.dip}: unit is {name}"
                                       + (f" ({reason})" if reason else ""))
                continue
            pkg = self._encoded(table, cache, self.machine(g.dip).config.sampling_rate)
            self.bus.select(g.dip)
            tr = self.bus.bulk_write(pkg)
            report.transfers += 1
            report.delivered.extend(tr.delivered)
            report.rejected.extend(tr.dropped)
        report.duration = self.bus.now - t0
        self._check_budget(report)
        return report


# --- pose tracking ---------------------------------------------------------------

@dataclass(frozen=True)
class SensorFrame:
    """Displacements of both sensors in counts, in the body frame."""

    d1: tuple[float, float]
    d2: tuple[float, float]
    timestamp: float = math.nan


@dataclass(frozen=True)
class PoseState:
    x: float = 0.0
    y: float = 0.0
    theta: float = 0.0
    vx: float = 0.0
    vy: float = 0.0
    omega: float = 0.0
    slip: float = 0.0
    timestamp: float = math.nan

    @property
    def speed(self) -> float:
        return math.hypot(self.vx, self.vy)


@dataclass(frozen=True)
class Calibration:
    """Sensor baseline ``b`` (m), counts per metre per sensor, EMA coefficient."""

    baseline: float = 0.04
    counts_per_meter: tuple[float, float] = (8200 / 0.0254, 8200 / 0.0254)
    ema: float = 0.2

    def __post_init__(self):
        cpm = self.counts_per_meter
        if isinstance(cpm, (int, float)):
            object.__setattr__(self, "counts_per_meter", (float(cpm), float(cpm)))
        if not self.baseline > 0 or min(self.counts_per_meter) <= 0:
            raise NonPositiveCalibration("baseline and counts per metre must be positive")
        if not 0 < self.ema <= 1:
            raise NonPositiveCalibration("EMA coefficient must be in (0, 1]")

    @classmethod
    def read(cls, path) -> "Calibration":
        """``key = value`` lines: baseline, counts_per_meter (one or two values), ema."""
        values = {}
        with open(path) as fp:
            for line in fp:
                line = line.split("#", 1)[0].strip()
                if not line:
                    continue
                key, _, val = line.partition("=")
                values[key.strip()] = [float(v) for v in val.replace(",", " ").split()]
        cpm = values.get("counts_per_meter", list(cls.counts_per_meter))
        return cls(values.get("baseline", [cls.baseline])[0],
                   tuple(cpm * 2 if len(cpm) == 1 else cpm[:2]),
                   values.get("ema", [cls.ema])[0])


class PoseTracker:
    """Dead reckoning from two sensors mounted at body ``(-b/2, 0)`` and ``(+b/2, 0)``.

    Per frame, with displacements converted to metres::

        d_theta = (d2.dy - d1.dy) / b
        t       = (d1 + d2) / 2                 (body frame)
        (x, y) += R(theta + d_theta / 2) t
        theta  += d_theta

    Rotating by the mid-step heading keeps the error second order.  The
    disagreement ``|d2.dx - d1.dx|`` (which a rigid body cannot produce) is
    reported as slip.
    """

    def __init__(self, calibration: Calibration | None = None, rate: float = SENSOR_RATE):
        self.calibration = calibration or Calibration()
        self.rate = rate
        self.pose = PoseState()
        self.diagnostics: list[str] = []
        self._last_t = math.nan

    def reset(self) -> None:
        self.pose = PoseState()
        self._last_t = math.nan

    def set_calibration(self, baseline: float | None = None, counts_per_meter=None,
                        ema: float | None = None) -> None:
        c = self.calibration
        self.calibration = Calibration(
            c.baseline if baseline is None else baseline,
            c.counts_per_meter if counts_per_meter is None else counts_per_meter,
            c.ema if ema is None else ema)

    def update(self, frame: SensorFrame) -> PoseState:
        self.pose = integrate_pose(self.pose, frame, self.calibration, self.rate,
                                   self.diagnostics)
        return self.pose

    def velocity(self) -> tuple[float, float]:
        return self.pose.vx, self.pose.vy


def integrate_pose(prev: PoseState, frame: SensorFrame, cal: Calibration,
                   rate: float = SENSOR_RATE, diagnostics: list | None = None) -> PoseState:
    values = np.array([*frame.d1, *frame.d2], dtype=float)
    if not np.all(np.isfinite(values)):
        if diagnostics is not None:
            diagnostics.append(f"t={frame.timestamp}: non-finite frame ignored")
        return replace(prev, timestamp=frame.timestamp)
    c1, c2 = cal.counts_per_meter
    d1x, d1y = values[0] / c1, values[1] / c1
    d2x, d2y = values[2] / c2, values[3] / c2
    dtheta = (d2y - d1y) / cal.baseline
    tx, ty = (d1x + d2x) / 2, (d1y + d2y) / 2
    mid = prev.theta + dtheta / 2
    cm, sm = math.cos(mid), math.sin(mid)
    dx, dy = cm * tx - sm * ty, sm * tx + cm * ty

    dt = 1.0 / rate
    if math.isfinite(frame.timestamp) and math.isfinite(prev.timestamp):
        if frame.timestamp > prev.timestamp:
            dt = frame.timestamp - prev.timestamp
    a = cal.ema
    return PoseState(
        x=prev.x + dx, y=prev.y + dy, theta=prev.theta + dtheta,
        vx=(1 - a) * prev.vx + a * dx / dt,
        vy=(1 - a) * prev.vy + a * dy / dt,
        omega=(1 - a) * prev.omega + a * dtheta / dt,
        slip=abs(d2x - d1x), timestamp=frame.timestamp)


# --- pose sources ----------------------------------------------------------------

def frames_from_trajectory(poses: np.ndarray, cal: Calibration, t0: float = 0.0,
                           rate: float = SENSOR_RATE, quantize: bool = True) -> list[SensorFrame]:
    """Sensor frames for a rigid trajectory sampled at ``rate``.

    ``poses`` is ``(n, 3)`` of ``x, y, theta``.  Each sensor reports its
    world displacement rotated into the mid-step body frame.  With
    ``quantize`` the counts are integers and the rounding remainder carries
    over to the next frame, like a real sensor's accumulator.
    """
    poses = np.asarray(poses, dtype=float)
    b = cal.baseline
    mounts = np.array([[-b / 2, 0.0], [b / 2, 0.0]])
    cpm = np.array(cal.counts_per_meter)
    carry = np.zeros((2, 2))
    frames = []
    for k in range(1, len(poses)):
        (x0, y0, th0), (x1, y1, th1) = poses[k - 1], poses[k]
        mid = (th0 + th1) / 2
        d = np.empty((2, 2))
        for i, (mx, my) in enumerate(mounts):
            p0 = np.array([x0 + math.cos(th0) * mx - math.sin(th0) * my,
                           y0 + math.sin(th0) * mx + math.cos(th0) * my])
            p1 = np.array([x1 + math.cos(th1) * mx - math.sin(th1) * my,
                           y1 + math.sin(th1) * mx + math.cos(th1) * my])
            w = p1 - p0
            d[i] = [math.cos(mid) * w[0] + math.sin(mid) * w[1],
                    -math.sin(mid) * w[0] + math.cos(mid) * w[1]]
            d[i] *= cpm[i]
        if quantize:
            total = d + carry
            d = np.round(total)
            carry = total - d
        frames.append(SensorFrame(tuple(d[0]), tuple(d[1]), t0 + k / rate))
    return frames


def circle_trajectory(radius: float, revolutions: float = 1.0, period: float = 2.0,
                      rate: float = SENSOR_RATE, heading: str = "tangent",
                      center=(0.0, 0.0)) -> np.ndarray:
    """Poses along a circle starting at angle 0.

    ``heading="tangent"`` turns the body with the motion; ``"fixed"`` keeps it
    at zero (pure translation).
    """
    n = int(round(revolutions * period * rate))
    phi = 2 * np.pi * revolutions * np.arange(n + 1) / n
    x = center[0] + radius * np.cos(phi)
    y = center[1] + radius * np.sin(phi)
    if heading == "tangent":
        th = phi + np.pi / 2
    elif heading == "fixed":
        th = np.zeros_like(phi)
    else:
        raise ValueError(f"unknown heading mode {heading!r}")
    return np.column_stack([x, y, th - th[0]])


def read_frames(path) -> list[SensorFrame]:
    """CSV rows ``t, dx1, dy1, dx2, dy2`` (header optional)."""
    frames = []
    with open(path, newline="") as fp:
        for row in csv.reader(fp):
            if not row or row[0].lstrip().startswith("#"):
                continue
            try:
                t, a, b, c, d = (float(v) for v in row[:5])
            except ValueError:
                continue
            frames.append(SensorFrame((a, b), (c, d), t))
    return frames


def write_frames(frames: Iterable[SensorFrame], path) -> None:
    with open(path, "w", newline="") as fp:
        w = csv.writer(fp, lineterminator="\n")
        w.writerow(["t", "dx1", "dy1", "dx2", "dy2"])
        for fr in frames:
            w.writerow([f"{fr.timestamp:.6f}", *(f"{v:.10g}" for v in (*fr.d1, *fr.d2))])


def write_pose_log(poses: Iterable[PoseState], fp) -> None:
    w = csv.writer(fp, lineterminator="\n")
    w.writerow(["t", "x_m", "y_m", "theta_rad", "vx_mps", "vy_mps", "omega_radps", "slip_m"])
    for p in poses:
        w.writerow([f"{p.timestamp:.6f}"] + [f"{v:.9g}" for v in
                                               (p.x, p.y, p.theta, p.vx, p.vy, p.omega, p.slip)])


# --- display stub ----------------------------------------------------------------

class GraphicalDisplay:
    """Text-log stand-in for the mouse's small display and buttons.

    ``presses`` scripts button presses as ``{time_s: button}``; ``is_pressed``
    reports a press once the clock passed its time, then clears it.
    """

    def __init__(self, presses: dict | None = None):
        self.lines: list[str] = []
        self.attached = True
        self._presses = sorted((presses or {}).items())
        self.now = 0.0

    def show(self, icon: str, title: str, text="") -> None:
        self.lines.append(f"[{icon}] {title}: {text}")

    def detach(self) -> None:
        self.attached = False

    def is_pressed(self, button: str) -> bool:
        for i, (t, b) in enumerate(self._presses):
            if b == button and t <= self.now:
                del self._presses[i]
                return True
        return False

    isPressed = is_pressed

    def pressed(self) -> list[str]:
        """All scripted presses due by ``now``, consumed in time order."""
        due = [b for t, b in self._presses if t <= self.now]
        self._presses = [(t, b) for t, b in self._presses if t > self.now]
        return due
