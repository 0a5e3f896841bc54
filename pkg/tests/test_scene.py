import json
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from tactwin import host, scene, wiretab
from tactwin.host import Calibration, SensorFrame, SignalManager
from tactwin.interconnect import UnitSpec, VirtualBus
from tactwin.scene import parse_scene

BASIC = """format = 1
[scenario one]
seed = 11
width = 300
height = 200
[area left]
model = constant
rect = 20, 80, 40, 40
params.frequency = 125
[area right]
model = grating
rect = 80, 80, 40, 40
params.period = 2.0
image = right.png
[area hidden]
model = off
random = 30 x 20
image = secret.png
neutral = yes
"""


def manager(n=1, **kw):
    bus = VirtualBus.from_topology([UnitSpec(d, "ASG") for d in range(n)], **kw)
    m = SignalManager(bus)
    m.initialize_boards()
    return m


def line_frames(speed, duration, cal, rate=500.0, direction=(1.0, 0.0), quantize=False):
    n = int(round(duration * rate))
    t = np.arange(n + 1) / rate
    poses = np.column_stack([speed * t * direction[0], speed * t * direction[1], np.zeros_like(t)])
    return host.frames_from_trajectory(poses, cal, rate=rate, quantize=quantize)


# --- grammar --------------------------------------------------------------------

def test_empty_scene():
    assert parse_scene("").scenarios == []
    assert parse_scene("# only a comment\n\n").scenarios == []


def test_basic_parse():
    sc = parse_scene(BASIC).scenario()
    assert sc.name == "one" and sc.seed == 11
    assert [a.id for a in sc.areas] == ["left", "right", "hidden"]
    assert sc.area("left").params == {"frequency": 125}
    assert sc.area("right").rect == (80.0, 80.0, 40.0, 40.0)
    hidden = sc.area("hidden")
    assert hidden.randomized and hidden.rect is not None
    assert hidden.shown_image == scene.NEUTRAL_IMAGE
    assert sc.choices[0]["area"] == "hidden"


def test_placement_deterministic():
    a = parse_scene(BASIC).scenario().area("hidden").rect
    b = parse_scene(BASIC).scenario().area("hidden").rect
    assert a == b
    other = parse_scene(BASIC.replace("seed = 11", "seed = 12")).scenario().area("hidden").rect
    assert other != a


@pytest.mark.parametrize("text, line", [
    ("format = 1\n[scenario s]\n[area a]\nrect = 1, 2, 3\n", 4),
    ("format = 1\n[scenario s]\nseed = x\n", 3),
    ("format = 2\n", 1),
    ("[area a]\n", 1),
    ("format = 1\n[scenario s\n", 2),
    ("format = 1\n[scenario s]\njunk line\n", 3),
    ("format = 1\n[scenario s]\n[area a]\nneutral = maybe\n", 4),
    ("format = 1\n[scenario s]\n[area a]\nmodel = demo\n", 3),
    ("format = 1\n[widget w]\n", 2),
])
def test_parse_errors_carry_line(text, line):
    with pytest.raises(scene.ParseError) as exc:
        parse_scene(text)
    assert exc.value.line == line
    assert str(exc.value).startswith(f"line {line}:")


def test_duplicates_and_overlap():
    with pytest.raises(scene.DuplicateId):
        parse_scene("format = 1\n[scenario s]\n[scenario s]\n")
    with pytest.raises(scene.DuplicateId):
        parse_scene("format = 1\n[scenario s]\n[area a]\nrect=0,0,1,1\n[area a]\nrect=5,5,1,1\n")
    with pytest.raises(scene.OverlapError):
        parse_scene("format = 1\n[scenario s]\n[area a]\nrect=0,0,10,10\n[area b]\nrect=5,5,10,10\n")
    with pytest.raises(scene.OverlapError):
        parse_scene("format = 1\n[scenario s]\nwidth=10\nheight=10\n[area a]\nrandom = 20 x 5\n")
    with pytest.raises(scene.OverlapError):
        parse_scene("format = 1\n[scenario s]\nwidth=10\nheight=10\n[area a]\nrect=0,0,10,10\n"
                    "[area b]\nrandom = 2 x 2\n")


def test_unknown_keys_warn():
    with pytest.warns(UserWarning, match="unknown area key"):
        s = parse_scene("format = 1\n[scenario s]\n[area a]\nrect=0,0,1,1\ncolour = red\n")
    assert s.warnings


@given(st.integers(0, 2 ** 31), st.lists(st.tuples(st.integers(5, 60), st.integers(5, 60)),
                                          min_size=1, max_size=6))
def test_random_placement_never_overlaps(seed, sizes):
    text = f"format = 1\n[scenario s]\nseed = {seed}\nwidth = 300\nheight = 200\n"
    text += "[area fixed]\nrect = 100, 50, 60, 60\n"
    for i, (w, h) in enumerate(sizes):
        text += f"[area r{i}]\nrandom = {w} x {h}\n"
    sc = parse_scene(text).scenario()
    rects = [a.rect for a in sc.areas]
    for i, a in enumerate(rects):
        x, y, w, h = a
        assert 0 <= x and x + w <= 300 + 1e-9 and 0 <= y and y + h <= 200 + 1e-9
        for b in rects[:i]:
            assert not scene._overlap(a, b)


# --- models ---------------------------------------------------------------------

def test_demo_model():
    t = scene.demo_model((0, 0), (0.1, 0.0), {})
    assert t.frequency[0, 0] == pytest.approx(250.0) and t.amplitude[0, 0] == 0.9
    still = scene.demo_model((0, 0), (0.0, 0.0), {})
    assert still.frequency[0, 0] == 0.0


def test_grating_model():
    t = scene.grating_model((0, 0), (0.05, 0.0), {"period": 2.5})
    assert t.frequency[0, 0] == pytest.approx(20.0)       # 50 mm/s over 2.5 mm ridges
    with pytest.raises(scene.ModelOutputInvalid):
        scene.grating_model((0, 0), (0.05, 0.0), {"period": 0})


# --- runner ---------------------------------------------------------------------

def run(text, frames, duration, cal, n=1, origin=(0.0, 100.0), **kw):
    m = manager(n)
    return scene.run_scenario(parse_scene(text), m, frames, duration, calibration=cal,
                              origin_mm=origin, **kw), m


def test_stationary_demo_gives_dc():
    cal = Calibration(ema=0.2)
    frames = [SensorFrame((0.0, 0.0), (0.0, 0.0), k / 500) for k in range(1, 101)]
    res, m = run("format = 1\n[scenario s]\n[area a]\nmodel = demo\nrect = -50, 50, 100, 100\n",
                 frames, 0.2, cal)
    assert m.machine(0).bank.freq_target[0, 0] == 0
    tail = res.captures[(0, 0)][-1000:]
    assert np.all(tail == tail[0]) and tail[0] > 2048


def test_demo_speed_ten_gives_quantized_250():
    cal = Calibration(ema=0.2)
    frames = line_frames(0.1, 1.2, cal)
    res, m = run("format = 1\n[scenario s]\n[area a]\nmodel = demo\nrect = -50, 0, 400, 200\n",
                 frames, 1.2, cal)
    assert m.machine(0).bank.freq_target[0, 0] == 327
    assert m.machine(0).bank.amp_target[0, 0] == wiretab.amplitude_code(0.9)
    d = res.captures[(0, 0)][-2 ** 14:].astype(float)
    spec = np.abs(np.fft.rfft((d - d.mean()) * np.hanning(d.size), 8 * d.size))
    f = np.argmax(spec) * 25_000 / (8 * d.size)
    assert f == pytest.approx(249.48, abs=0.3)


def test_crossing_areas_logs_matching_pairs():
    cal = Calibration(ema=0.2)
    frames = line_frames(0.1, 1.5, cal)
    text = ("format = 1\n[scenario s]\n[area a]\nmodel = constant\nrect = 20, 80, 40, 40\n"
            "[area b]\nmodel = constant\nrect = 80, 80, 40, 40\n")
    res, _ = run(text, frames, 1.5, cal)
    ev = [(e.kind, e.area_id, e.timestamp) for e in res.log.events]
    kinds = [(k, a) for k, a, _ in ev]
    assert kinds == [("enterArea", "a"), ("leaveArea", "a"), ("enterArea", "b"), ("leaveArea", "b")]
    for (_, _, t), expect in zip(ev, (0.2, 0.6, 0.8, 1.2)):
        assert abs(t - expect) <= 0.004
    assert res.log.well_formed()
    stays = res.log.stays()
    assert stays["a"][0] == pytest.approx(0.4, abs=0.005)
    assert res.log.events[1].mean_velocity == pytest.approx(0.1, rel=0.01)


def test_run_end_sentinel():
    cal = Calibration()
    frames = [SensorFrame((0.0, 0.0), (0.0, 0.0), 0.002)]
    res, _ = run("format = 1\n[scenario s]\n[area a]\nrect = -5, 95, 10, 10\n", frames, 0.05, cal)
    last = res.log.events[-1]
    assert last.kind == "leaveArea" and last.detail == "runEnd" and last.timestamp == 0.05


def test_invalid_model_output_keeps_last_table():
    cal = Calibration(ema=1.0)
    frames = line_frames(0.1, 1.0, cal)
    text = ("format = 1\n[scenario s]\n[area a]\nmodel = constant\nparams.frequency = 300\n"
            "rect = -10, 80, 50, 40\n"
            "[area b]\nmodel = demo\nparams.gain = 10000\nrect = 40, 80, 100, 40\n")
    res, m = run(text, frames, 1.0, cal)
    assert res.drops and "demo" in res.drops[0]
    assert m.machine(0).bank.freq_target[0, 0] == wiretab.frequency_code(300.0)
    assert res.ok


def test_buttons_logged():
    cal = Calibration()
    res, _ = run("format = 1\n[scenario s]\n", [], 0.1, cal, display=host.GraphicalDisplay({0.05: "Back"}))
    (ev,) = res.log.events
    assert ev.kind == "buttonPress" and ev.detail == "Back" and ev.timestamp == 0.05


def test_unknown_model_is_an_error():
    cal = Calibration()
    with pytest.raises(scene.SceneError):
        run("format = 1\n[scenario s]\n[area a]\nmodel = nope\nrect = -5, 95, 10, 10\n", [], 0.01, cal)


def test_study_log_rules():
    log = scene.StudyLog()
    log.add(0.1, "enterArea", "a")
    with pytest.raises(ValueError):
        log.add(0.05, "leaveArea", "a")
    with pytest.raises(ValueError):
        log.add(0.2, "teleport")
    assert not log.well_formed()


@given(st.floats(-0.3, 0.3), st.floats(-0.3, 0.3), st.integers(0, 100))
def test_log_always_well_formed(vx, vy, seed):
    cal = Calibration(ema=0.5)
    speed = math.hypot(vx, vy)
    frames = line_frames(speed, 0.3, cal, direction=(vx / speed, vy / speed)) if speed > 0 else []
    text = (f"format = 1\n[scenario s]\nseed = {seed}\nwidth = 300\nheight = 200\n"
            "[area a]\nrandom = 40 x 40\n[area b]\nrandom = 40 x 40\n[area c]\nrandom = 30 x 30\n")
    m = manager(1)
    res = scene.run_scenario(parse_scene(text), m, frames, 0.3, calibration=cal,
                             origin_mm=(150.0, 100.0), capture=False)
    assert res.log.well_formed()
    ts = [e.timestamp for e in res.log.events]
    assert ts == sorted(ts)


def test_write_run_and_manifest(tmp_path):
    cal = Calibration()
    res, m = run(BASIC, line_frames(0.1, 0.5, cal, quantize=True), 0.5, cal, n=2)
    scene.write_run(res, tmp_path, m.bus)
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    hidden = [a for a in manifest["areas"] if a["id"] == "hidden"][0]
    assert hidden["image"] == scene.NEUTRAL_IMAGE and hidden["randomized"]
    assert [c["file"] for c in manifest["captures"]][:2] == ["captures/dip000_ch0.u16",
                                                             "captures/dip000_ch1.u16"]
    assert len(manifest["captures"]) == 8
    data = np.fromfile(tmp_path / "captures/dip001_ch3.u16", "<u2")
    assert data.size == 0.5 * 25_000
    assert (tmp_path / "study_log.csv").exists() and (tmp_path / "bus_trace.csv").exists()


# --- report ---------------------------------------------------------------------

def test_report_requires_captures(tmp_path):
    with pytest.raises(scene.MissingCaptures):
        scene.report(tmp_path)
    scene.write_manifest({"format": 1, "captures": []}, tmp_path)
    with pytest.raises(scene.MissingCaptures):
        scene.report(tmp_path)


def test_report_tables(tmp_path):
    scene.write_tone_run([250.0], tmp_path, duration=0.3)
    out = scene.report(tmp_path)
    rows = (tmp_path / "frequency_table.csv").read_text().splitlines()
    assert rows[1].split(",")[2:5] == ["250", "249.4812", "249.4812"]
    lat = (tmp_path / "latency_table.csv").read_text().splitlines()
    assert lat[0] == "clock_hz,boards_1,boards_2,boards_8" and len(lat) == 6
    assert set(out) == {"frequency", "latency", "amplitude"}
