"""Scene descriptions, tactile models and the headless study runner.

Scene files are line oriented::

    format = 1

    [scenario training]
    seed = 7
    width = 300          # workspace, mm
    height = 200

    [area coarse]
    model = grating
    rect = 20, 20, 80, 60      # x, y, w, h in mm
    params.period = 2.5
    image = coarse.png

    [area fine]
    model = grating
    random = 80 x 60           # size; position drawn with the scenario seed
    neutral = yes

``#`` starts a comment.  Areas belong to the scenario above them.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import random
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from . import wiretab
from .host import (
    Calibration,
    GraphicalDisplay,
    PoseState,
    PoseTracker,
    SensorFrame,
    SignalManager,
)
from .siggen import RunLevel

log = logging.getLogger(__name__)

FORMAT_VERSION = 1
TICK_RATE = 1000.0
NEUTRAL_IMAGE = "<neutral>"
AREA_KEYS = {"model", "rect", "random", "image", "neutral"}
SCENARIO_KEYS = {"seed", "width", "height"}
PLACEMENT_TRIES = 10_000


class SceneError(ValueError):
    pass


class ParseError(SceneError):
    def __init__(self, line: int, msg: str):
        super().__init__(f"line {line}: {msg}")
        self.line = line


class DuplicateId(SceneError):
    pass


class OverlapError(SceneError):
    pass


class ModelOutputInvalid(SceneError):
    pass


class MissingCaptures(FileNotFoundError):
    pass


# --- scene model -----------------------------------------------------------------

@dataclass
class Area:
    id: str
    model: str = "off"
    params: dict = field(default_factory=dict)
    rect: tuple[float, float, float, float] | None = None
    random_size: tuple[float, float] | None = None
    image: str | None = None
    neutral: bool = False
    line: int = 0

    @property
    def randomized(self) -> bool:
        return self.random_size is not None

    def contains(self, x_mm: float, y_mm: float) -> bool:
        x, y, w, h = self.rect
        return x <= x_mm < x + w and y <= y_mm < y + h

    @property
    def shown_image(self) -> str | None:
        return NEUTRAL_IMAGE if self.neutral else self.image


def _overlap(a, b) -> bool:
    ax, ay, aw, ah = a
    bx, by, bw, bh = b
    return ax < bx + bw and bx < ax + aw and ay < by + bh and by < ay + ah


@dataclass
class Scenario:
    name: str
    seed: int = 0
    width: float = 300.0
    height: float = 200.0
    areas: list[Area] = field(default_factory=list)
    choices: list[dict] = field(default_factory=list)

    def area(self, area_id: str) -> Area:
        for a in self.areas:
            if a.id == area_id:
                return a
        raise KeyError(area_id)

    def locate(self, x_mm: float, y_mm: float) -> Area | None:
        for a in self.areas:
            if a.contains(x_mm, y_mm):
                return a
        return None

    def resolve(self) -> None:
        """Check explicit areas and draw positions for randomized ones."""
        fixed = [a for a in self.areas if not a.randomized]
        for i, a in enumerate(fixed):
            for b in fixed[:i]:
                if _overlap(a.rect, b.rect):
                    raise OverlapError(f"scenario {self.name}: areas {b.id!r} and {a.id!r} overlap")
        rng = random.Random(self.seed)
        placed = [a.rect for a in fixed]
        self.choices = []
        for a in self.areas:
            if not a.randomized:
                continue
            w, h = a.random_size
            if w > self.width or h > self.height:
                raise OverlapError(f"area {a.id!r} larger than the workspace")
            for attempt in range(1, PLACEMENT_TRIES + 1):
                x = round(rng.uniform(0, self.width - w), 1)
                y = round(rng.uniform(0, self.height - h), 1)
                if not any(_overlap((x, y, w, h), r) for r in placed):
                    break
            else:
                raise OverlapError(f"no free slot for area {a.id!r} after {PLACEMENT_TRIES} tries")
            a.rect = (x, y, w, h)
            placed.append(a.rect)
            self.choices.append({"area": a.id, "x": x, "y": y, "attempts": attempt})


@dataclass
class Scene:
    scenarios: list[Scenario] = field(default_factory=list)
    version: int = FORMAT_VERSION
    warnings: list[str] = field(default_factory=list)

    def scenario(self, name: str | None = None) -> Scenario:
        if not self.scenarios:
            raise SceneError("scene has no scenarios")
        if name is None:
            return self.scenarios[0]
        for s in self.scenarios:
            if s.name == name:
                return s
        raise SceneError(f"no scenario {name!r}")


def _bool(text: str, line: int) -> bool:
    t = text.lower()
    if t in ("1", "yes", "true", "on"):
        return True
    if t in ("0", "no", "false", "off"):
        return False
    raise ParseError(line, f"not a boolean: {text!r}")


def _numbers(text: str, n: int, line: int, sep=",") -> tuple[float, ...]:
    parts = [p.strip() for p in text.split(sep)]
    try:
        vals = tuple(float(p) for p in parts)
    except ValueError:
        raise ParseError(line, f"expected {n} numbers, got {text!r}") from None
    if len(vals) != n or not all(math.isfinite(v) for v in vals):
        raise ParseError(line, f"expected {n} numbers, got {text!r}")
    return vals


def _param(text: str):
    for conv in (int, float):
        try:
            return conv(text)
        except ValueError:
            pass
    return text


def parse_scene(text: str) -> Scene:
    scene = Scene()
    scenario: Scenario | None = None
    area: Area | None = None
    seen_format = False

    def warn(line, msg):
        full = f"line {line}: {msg}"
        scene.warnings.append(full)
        warnings.warn(full, stacklevel=3)

    for no, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("["):
            if not line.endswith("]"):
                raise ParseError(no, f"unterminated section header {raw.strip()!r}")
            kind, _, name = line[1:-1].strip().partition(" ")
            name = name.strip()
            if not name:
                raise ParseError(no, f"section needs a name: {line!r}")
            if kind == "scenario":
                if any(s.name == name for s in scene.scenarios):
                    raise DuplicateId(f"line {no}: duplicate scenario {name!r}")
                scenario = Scenario(name)
                scene.scenarios.append(scenario)
                area = None
            elif kind == "area":
                if scenario is None:
                    raise ParseError(no, "area outside of any scenario")
                if any(a.id == name for a in scenario.areas):
                    raise DuplicateId(f"line {no}: duplicate area {name!r} in {scenario.name!r}")
                area = Area(name, line=no)
                scenario.areas.append(area)
            else:
                raise ParseError(no, f"unknown section kind {kind!r}")
            continue
        key, eq, value = line.partition("=")
        if not eq:
            raise ParseError(no, f"expected 'key = value', got {raw.strip()!r}")
        key, value = key.strip(), value.strip()
        if scenario is None:
            if key == "format":
                if value != str(FORMAT_VERSION):
                    raise ParseError(no, f"unsupported format {value!r}")
                seen_format = True
            else:
                warn(no, f"unknown top-level key {key!r}")
            continue
        if area is None:
            if key == "seed":
                try:
                    scenario.seed = int(value)
                except ValueError:
                    raise ParseError(no, f"seed must be an integer, got {value!r}") from None
            elif key in ("width", "height"):
                (v,) = _numbers(value, 1, no)
                if v <= 0:
                    raise ParseError(no, f"{key} must be positive")
                setattr(scenario, key, v)
            else:
                warn(no, f"unknown scenario key {key!r}")
            continue
        if key == "model":
            area.model = value
        elif key == "rect":
            x, y, w, h = _numbers(value, 4, no)
            if w <= 0 or h <= 0:
                raise ParseError(no, "rect width and height must be positive")
            area.rect = (x, y, w, h)
        elif key == "random":
            w, h = _numbers(value, 2, no, sep="x")
            if w <= 0 or h <= 0:
                raise ParseError(no, "random size must be positive")
            area.random_size = (w, h)
        elif key == "image":
            area.image = value
        elif key == "neutral":
            area.neutral = _bool(value, no)
        elif key.startswith("params."):
            area.params[key[len("params."):]] = _param(value)
        else:
            warn(no, f"unknown area key {key!r}")

    if scene.scenarios and not seen_format:
        warn(0, "missing 'format = 1' header")
    for s in scene.scenarios:
        for a in s.areas:
            if a.rect is not None and a.random_size is not None:
                raise ParseError(a.line, f"area {a.id!r} has both rect and random")
            if a.rect is None and a.random_size is None:
                raise ParseError(a.line, f"area {a.id!r} needs rect or random")
        s.resolve()
    return scene


def load_scene(path) -> Scene:
    return parse_scene(Path(path).read_text(encoding="utf-8"))


# --- tactile models --------------------------------------------------------------

TactileModel = Callable[[tuple, tuple, dict], wiretab.FrequencyTable]


def _speed_cm(velocity) -> float:
    return math.hypot(*velocity) * 100.0


def demo_model(position, velocity, params) -> wiretab.FrequencyTable:
    """Frequency follows hand speed: ``gain * |v|`` with ``|v|`` in cm/s."""
    f = float(params.get("gain", 25.0)) * _speed_cm(velocity)
    return wiretab.FrequencyTable.single_tone(f, float(params.get("amplitude", 0.9)))


def grating_model(position, velocity, params) -> wiretab.FrequencyTable:
    """Moving over ridges of spatial ``period`` (mm) at speed ``|v|``."""
    period = float(params.get("period", 2.0))
    if period <= 0:
        raise ModelOutputInvalid("grating period must be positive")
    f = _speed_cm(velocity) * 10.0 / period
    return wiretab.FrequencyTable.single_tone(f, float(params.get("amplitude", 0.8)))


def constant_model(position, velocity, params) -> wiretab.FrequencyTable:
    return wiretab.FrequencyTable.single_tone(float(params.get("frequency", 250.0)),
                                              float(params.get("amplitude", 0.5)))


def off_model(position, velocity, params) -> wiretab.FrequencyTable:
    return wiretab.FrequencyTable()


MODELS: dict[str, TactileModel] = {
    "demo": demo_model,
    "grating": grating_model,
    "constant": constant_model,
    "off": off_model,
}


# --- study log -------------------------------------------------------------------

EVENT_KINDS = ("enterArea", "leaveArea", "buttonPress", "randomChoice")


@dataclass(frozen=True)
class Event:
    timestamp: float
    kind: str
    area_id: str = ""
    mean_velocity: float = math.nan
    detail: str = ""


@dataclass
class StudyLog:
    events: list[Event] = field(default_factory=list)

    def add(self, timestamp, kind, area_id="", mean_velocity=math.nan, detail=""):
        if kind not in EVENT_KINDS:
            raise ValueError(f"unknown event kind {kind!r}")
        if self.events and timestamp < self.events[-1].timestamp:
            raise ValueError("event timestamps must be nondecreasing")
        self.events.append(Event(float(timestamp), kind, area_id, float(mean_velocity), detail))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["timestamp_s", "kind", "area", "mean_velocity_mps", "detail"])
        for e in self.events:
            mv = "" if math.isnan(e.mean_velocity) else f"{e.mean_velocity:.6f}"
            w.writerow([f"{e.timestamp:.6f}", e.kind, e.area_id, mv, e.detail])
        return buf.getvalue()

    def stays(self) -> dict[str, list[float]]:
        """Durations of each visit per area."""
        out: dict[str, list[float]] = {}
        open_at: dict[str, float] = {}
        for e in self.events:
            if e.kind == "enterArea":
                open_at[e.area_id] = e.timestamp
            elif e.kind == "leaveArea" and e.area_id in open_at:
                out.setdefault(e.area_id, []).append(e.timestamp - open_at.pop(e.area_id))
        return out

    def well_formed(self) -> bool:
        inside = None
        for e in self.events:
            if e.kind == "enterArea":
                if inside is not None:
                    return False
                inside = e.area_id
            elif e.kind == "leaveArea":
                if inside != e.area_id:
                    return False
                inside = None
        return inside is None


# --- runner ----------------------------------------------------------------------

@dataclass
class RunResult:
    log: StudyLog
    captures: dict            # (dip, channel) -> uint16 array
    poses: list[PoseState]
    drops: list[str]
    manifest: dict
    errored_units: list[int]

    @property
    def ok(self) -> bool:
        return not self.errored_units


def _pose_frames(source) -> list[SensorFrame]:
    frames = list(source)
    if any(not math.isfinite(f.timestamp) for f in frames):
        raise SceneError("pose frames need timestamps")
    return sorted(frames, key=lambda f: f.timestamp)


def run_scenario(scene: Scene, manager: SignalManager, pose_source: Iterable[SensorFrame],
                 duration: float, scenario: str | None = None,
                 models: dict[str, TactileModel] | None = None,
                 calibration: Calibration | None = None,
                 display: GraphicalDisplay | None = None,
                 origin_mm: tuple[float, float] = (0.0, 0.0),
                 capture: bool = True, tick_rate: float = TICK_RATE) -> RunResult:
    """Run the control loop at ``tick_rate`` for ``duration`` seconds.

    Each tick: integrate pending sensor frames, find the area under the
    cursor, ask its model for a table, stage it on every unit when it
    changed, render one tick of output on the running units.  Invalid model
    output drops the frame and the units keep their last valid table.
    """
    models = {**MODELS, **(models or {})}
    sc = scene.scenario(scenario)
    frames = _pose_frames(pose_source)
    tracker = PoseTracker(calibration)
    display = display or GraphicalDisplay()
    log_ = StudyLog()
    for choice in sc.choices:
        log_.add(0.0, "randomChoice", choice["area"],
                 detail=f"x={choice['x']:g} y={choice['y']:g} attempts={choice['attempts']}")

    units = manager.running()
    spt = {}
    for g in units:
        fs = manager.machine(g.dip).config.sampling_rate
        n = fs / tick_rate
        if abs(n - round(n)) > 1e-9:
            raise SceneError(f"DIP {g.dip}: {fs} Hz is not a whole number of samples per tick")
        spt[g.dip] = int(round(n))
    n_ticks = int(round(duration * tick_rate))
    chunks = {(g.dip, ch): [] for g in units for ch in range(g.channels)} if capture else {}

    poses: list[PoseState] = []
    drops: list[str] = []
    current: Area | None = None
    speeds: list[float] = []
    last_table: wiretab.FrequencyTable | None = None
    fi = 0
    for k in range(n_ticks):
        t = k / tick_rate
        display.now = t
        while fi < len(frames) and frames[fi].timestamp <= t:
            poses.append(tracker.update(frames[fi]))
            fi += 1
        pose = tracker.pose
        x_mm = origin_mm[0] + pose.x * 1e3
        y_mm = origin_mm[1] + pose.y * 1e3
        area = sc.locate(x_mm, y_mm)
        if area is not current:
            if current is not None:
                log_.add(t, "leaveArea", current.id, float(np.mean(speeds)) if speeds else 0.0)
            if area is not None:
                log_.add(t, "enterArea", area.id, pose.speed)
            current, speeds = area, []
        if current is not None:
            speeds.append(pose.speed)
        for button in display.pressed():
            log_.add(t, "buttonPress", current.id if current else "", pose.speed, button)

        model_name = current.model if current else "off"
        try:
            model = models[model_name]
        except KeyError:
            raise SceneError(f"area {current.id!r}: unknown model {model_name!r}") from None
        try:
            table = model((pose.x, pose.y), (pose.vx, pose.vy), current.params if current else {})
            for g in units:
                table.validate(manager.machine(g.dip).config.sampling_rate)
        except (ModelOutputInvalid, wiretab.WiretabError) as exc:
            drops.append(f"t={t:.3f}: {model_name}: {exc}")
            table = last_table
        if table is not None and table != last_table:
            manager.send_all(table)
            last_table = table

        for g in units:
            m = manager.machine(g.dip)
            if m.state is not RunLevel.RUNNING:
                continue
            out = m.render_samples(spt[g.dip])
            if capture:
                for ch in range(g.channels):
                    chunks[(g.dip, ch)].append(out[ch])

    t_end = n_ticks / tick_rate
    if current is not None:
        log_.add(t_end, "leaveArea", current.id, float(np.mean(speeds)) if speeds else 0.0,
                 "runEnd")

    captures = {key: (np.concatenate(v) if v else np.zeros(0, np.uint16))
                for key, v in chunks.items()}
    errored = sorted(d for d, lvl in manager.mirror.items() if lvl is RunLevel.ERROR)
    manifest = {
        "format": FORMAT_VERSION,
        "scenario": sc.name,
        "seed": sc.seed,
        "duration_s": duration,
        "tick_rate_hz": tick_rate,
        "areas": [{"id": a.id, "model": a.model, "params": a.params, "rect_mm": list(a.rect),
                   "image": a.shown_image, "randomized": a.randomized} for a in sc.areas],
        "units": [{"dip": e.dip, "kind": e.kind, "channels": e.channels,
                   "state": manager.mirror[e.dip].name,
                   "sampling_rate": manager.machine(e.dip).config.sampling_rate,
                   "pwm_bit_depth": manager.machine(e.dip).config.pwm_bit_depth}
                  for e in manager.registry],
        "errored_units": errored,
        "dropped_frames": drops,
    }
    return RunResult(log_, captures, poses, drops, manifest, errored)


def capture_name(dip: int, channel: int) -> str:
    return f"dip{dip:03d}_ch{channel}.u16"


def write_run(result: RunResult, run_dir, bus=None) -> Path:
    """Write log, pose log, captures and a sorted-key manifest to ``run_dir``."""
    from .host import write_pose_log

    run_dir = Path(run_dir)
    (run_dir / "captures").mkdir(parents=True, exist_ok=True)
    (run_dir / "study_log.csv").write_text(result.log.to_csv(), encoding="utf-8")
    buf = io.StringIO()
    write_pose_log(result.poses, buf)
    (run_dir / "pose_log.csv").write_text(buf.getvalue(), encoding="utf-8")
    entries = []
    for (dip, ch), data in sorted(result.captures.items()):
        name = capture_name(dip, ch)
        data.astype("<u2").tofile(run_dir / "captures" / name)
        entries.append({"file": f"captures/{name}", "dip": dip, "channel": ch,
                        "samples": int(data.size)})
    manifest = dict(result.manifest, captures=entries)
    if bus is not None:
        (run_dir / "bus_trace.csv").write_text(bus.trace_csv(), encoding="utf-8")
    write_manifest(manifest, run_dir)
    return run_dir


def write_manifest(manifest: dict, run_dir) -> None:
    Path(run_dir, "manifest.json").write_text(
        json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def read_manifest(run_dir) -> dict:
    path = Path(run_dir, "manifest.json")
    if not path.exists():
        raise MissingCaptures(f"{run_dir}: no manifest.json")
    return json.loads(path.read_text(encoding="utf-8"))


# --- tone runs and reports -------------------------------------------------------

def write_tone_run(targets: Sequence[float], run_dir, amplitude: float = 0.9,
                   duration: float = 1.0, config=None, warmup: float = 0.05,
                   filter_hz: float = 1300.0) -> Path:
    """Render one single-tone capture per target into ``run_dir``.

    The captures keep their warm-up samples; the manifest records how many,
    so ``report`` filters the same stream the bench pipeline would.
    """
    from .pipeline import running_machine

    run_dir = Path(run_dir)
    (run_dir / "captures").mkdir(parents=True, exist_ok=True)
    entries, units = [], []
    for i, f in enumerate(targets):
        m = running_machine(config, dip=i)
        fs = m.config.sampling_rate
        m.stage_table(wiretab.encode(wiretab.FrequencyTable.single_tone(f, amplitude, [0]), fs))
        n_warm = int(round(warmup * fs))
        duties = m.render_samples(n_warm + int(round(duration * fs)))[0]
        name = capture_name(i, 0)
        duties.astype("<u2").tofile(run_dir / "captures" / name)
        entries.append({"file": f"captures/{name}", "dip": i, "channel": 0,
                        "samples": int(duties.size), "warmup_samples": n_warm,
                        "target_hz": float(f), "amplitude": amplitude})
        units.append({"dip": i, "kind": "ASG", "channels": 4, "state": m.state.name,
                      "sampling_rate": fs, "pwm_bit_depth": m.config.pwm_bit_depth})
    write_manifest({"format": FORMAT_VERSION, "kind": "tones", "filter_hz": filter_hz,
                    "captures": entries, "units": units,
                    "errored_units": [u["dip"] for u in units if u["state"] == "ERROR"]},
                   run_dir)
    return run_dir


def read_capture(run_dir, entry: dict) -> np.ndarray:
    path = Path(run_dir, entry["file"])
    if not path.exists():
        raise MissingCaptures(f"{path} listed in manifest but missing")
    return np.fromfile(path, dtype="<u2")


def _write_rows(path: Path, rows: list[dict]) -> None:
    with open(path, "w", newline="") as fp:
        w = csv.DictWriter(fp, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        w.writerows(rows)


def report(run_dir, actuator_config=None, alignment: str = "center") -> dict[str, Path]:
    """Write frequency, latency and amplitude tables for a run directory.

    * ``frequency_table.csv``: per tone capture, target, grid frequency,
      fitted frequency and THD+N in the 1 kHz / 20 kHz / full bands after the
      reconstruction filter.
    * ``latency_table.csv``: modelled loop time per bus clock for 1, 2 and 8
      boards and for the run's own unit count.
    * ``amplitude_table.csv``: banded tip amplitudes of the actuator config.
    """
    from . import analog, metrology
    from .actuator import config_table, load_config

    run_dir = Path(run_dir)
    manifest = read_manifest(run_dir)
    entries = manifest.get("captures", [])
    if not entries:
        raise MissingCaptures(f"{run_dir}: manifest lists no captures")
    units = {u["dip"]: u for u in manifest.get("units", [])}
    tf = analog.sallen_key_tf(analog.sallen_key_design(manifest.get("filter_hz", 1300.0)))
    out: dict[str, Path] = {}

    rows = []
    for e in entries:
        if "target_hz" not in e:
            continue
        u = units.get(e["dip"], {})
        fs = u.get("sampling_rate", wiretab.DEFAULT_SAMPLING_RATE)
        depth = u.get("pwm_bit_depth", 12)
        ppp = 8
        duties = read_capture(run_dir, e)
        y = analog.pwm_response(tf, duties, depth, fs, ppp, alignment=alignment, settle=True)
        y = y[e.get("warmup_samples", 0) * ppp:]
        rep = metrology.analyze(metrology.SampledSignal(y, 1.0 / (fs * ppp)), e["target_hz"])
        rows.append({"dip": e["dip"], "channel": e["channel"],
                     "target_hz": f"{e['target_hz']:g}",
                     "grid_hz": f"{wiretab.quantized_frequency(e['target_hz'], fs):.4f}",
                     "measured_hz": f"{rep.measured_freq:.4f}",
                     "thdn_1k_pct": f"{rep.thdn_1k:.4f}",
                     "thdn_20k_pct": f"{rep.thdn_20k:.4f}",
                     "thdn_full_pct": f"{rep.thdn_full:.4f}",
                     "converged": rep.converged})
    if rows:
        out["frequency"] = run_dir / "frequency_table.csv"
        _write_rows(out["frequency"], rows)

    n_units = len(units)
    boards = tuple(sorted({1, 2, 8} | ({n_units} if n_units else set())))
    lat = metrology.latency_table(boards=boards)
    out["latency"] = run_dir / "latency_table.csv"
    _write_rows(out["latency"], [{k: (f"{v:g}" if k == "clock_hz" else f"{v * 1e6:.2f}")
                                  for k, v in r.items()} for r in lat])

    cfg = load_config(actuator_config)
    out["amplitude"] = run_dir / "amplitude_table.csv"
    with open(out["amplitude"], "w", newline="") as fp:
        config_table(cfg).write_csv(fp)
    return out
