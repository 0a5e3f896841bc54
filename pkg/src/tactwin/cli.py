"""Command line front end.

Every subcommand writes CSV or JSON, to ``--out`` when given and stdout
otherwise.  Commands that run emulated units exit with status 1 when any unit
ended in Error; other failures exit with status 2.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import math
import sys
from pathlib import Path

import numpy as np

from . import __version__, analog, interconnect, metrology, wiretab
from .siggen import GeneratorConfig

log = logging.getLogger("tactwin")

EXIT_OK, EXIT_UNIT_ERROR, EXIT_FAILURE = 0, 1, 2


def _floats(text: str) -> list[float]:
    return [metrology.parse_frequency(t) for t in text.replace(" ", "").split(",") if t]


def _emit(text: str, out: str | None) -> None:
    if out:
        Path(out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)


def _json(obj) -> str:
    def default(o):
        if isinstance(o, np.ndarray):
            return o.tolist()
        if isinstance(o, np.generic):
            return o.item()
        raise TypeError(f"not JSON serializable: {type(o).__name__}")
    return json.dumps(obj, indent=2, sort_keys=True, default=default) + "\n"


def _csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
    w.writeheader()
    w.writerows(rows)
    return buf.getvalue()


def _topology(args) -> list[interconnect.UnitSpec]:
    if getattr(args, "topology", None):
        return interconnect.load_topology(args.topology)
    n = getattr(args, "boards", None) or 1
    return [interconnect.UnitSpec(d, "ASG") for d in range(n)]


def _config(args) -> GeneratorConfig:
    return GeneratorConfig(sampling_rate=args.fs, pwm_bit_depth=args.depth,
                           smoothing_alpha=args.alpha)


def _add_unit_args(p):
    p.add_argument("--fs", type=metrology.parse_frequency, default=wiretab.DEFAULT_SAMPLING_RATE,
                   help="unit sampling rate (default 25k)")
    p.add_argument("--depth", type=int, default=12, help="PWM bit depth")
    p.add_argument("--alpha", type=float, default=0.05, help="smoothing coefficient")


# --- subcommands -----------------------------------------------------------------

def cmd_design_filter(args) -> int:
    designs = []
    if args.kind in ("sallen-key", "both"):
        designs.append(analog.design_sallen_key(args.fc or 1300.0, args.c1, args.c2))
    if args.kind in ("hbridge", "both"):
        designs.append(analog.design_hbridge(args.fc_hbridge or 1000.0, args.cp, args.q,
                                             args.rl, args.inductance))
    _emit(_json({d.kind: d.to_dict() for d in designs}), args.out)
    if args.bode:
        freqs = np.logspace(0, math.log10(args.bode_max), args.bode_points)
        rows = []
        for d in designs:
            tf = _design_tf(d)
            for f, mag, db, ph in analog.bode_table(tf, freqs):
                rows.append({"filter": d.kind, "f_hz": f"{f:.6g}", "gain": f"{mag:.9g}",
                             "gain_db": f"{db:.6f}", "phase_deg": f"{ph:.6f}"})
        Path(args.bode).write_text(_csv(rows), encoding="utf-8")
    return EXIT_OK


def _design_tf(d: analog.FilterDesign) -> analog.RationalTransferFunction:
    v = d.values
    if d.kind == "sallen-key":
        return analog.sallen_key_tf(analog.SallenKeySpec(v["R_part_ohm"], v["C1_f"], v["C2_f"]))
    return analog.hbridge_tf(analog.HBridgeFilterSpec(v["L_part_h"], v["C_p_f"], v["R_L_ohm"],
                                                      v["R_d_ohm"]))


def cmd_emulate(args) -> int:
    from .scene import read_manifest, write_tone_run

    cfg = _config(args)
    if not cfg.timing_feasible:
        log.warning("%g Hz exceeds the unit's compute budget; units will enter Error", cfg.sampling_rate)
    run = write_tone_run(args.targets, args.out, args.amplitude, args.duration, cfg,
                         args.warmup, args.filter)
    manifest = read_manifest(run)
    summary = {"run": str(run), "captures": len(manifest["captures"]),
               "grid_hz": [wiretab.quantized_frequency(f, cfg.sampling_rate) for f in args.targets],
               "errored_units": manifest["errored_units"]}
    sys.stdout.write(_json(summary))
    return EXIT_UNIT_ERROR if manifest["errored_units"] else EXIT_OK


def cmd_thdn(args) -> int:
    path = Path(args.input)
    if path.suffix == ".u16" and args.duty:
        duties = np.fromfile(path, dtype="<u2")
        tf = analog.sallen_key_tf(analog.sallen_key_design(args.filter))
        y = analog.pwm_response(tf, duties, args.depth, args.fs, args.points, settle=True)
        y = y[int(round(args.skip * args.fs)) * args.points:]
        sig = metrology.SampledSignal(y, 1.0 / (args.fs * args.points))
    elif path.suffix == ".u16":
        sig = metrology.SampledSignal.from_raw(path, args.dt or metrology.DEFAULT_DT)
    else:
        sig = metrology.SampledSignal.from_csv(path, args.dt)
    fit = metrology.fit_sine(sig, args.target)
    bands = [b.strip() for b in args.bands.split(",")]
    vals = metrology.thdn_bands(sig, fit, bands, strict=args.strict, rms=args.rms)
    out = {"target_hz": args.target, "measured_hz": fit.f, "amplitude": fit.A,
           "offset": fit.offset, "phase_rad": fit.phi, "converged": fit.converged,
           "iterations": fit.iterations, "normalization": "rms" if args.rms else "peak",
           "thdn_pct": vals}
    _emit(_json(out), args.out)
    return EXIT_OK


def cmd_latency(args) -> int:
    specs = _topology(args)
    clocks = args.clock or list(interconnect.BULK_CLOCK_PRESETS)
    model = interconnect.DEFAULT_LATENCY_MODEL
    rows = []
    for clock in clocks:
        st = metrology.measure_transfer_loop(specs, args.tables, clock, args.iterations,
                                             args.jitter, args.seed)
        rows.append({"boards": st.boards, "clock_hz": f"{clock:g}",
                     "mean_us": f"{st.mean * 1e6:.3f}", "min_us": f"{st.minimum * 1e6:.3f}",
                     "max_us": f"{st.maximum * 1e6:.3f}",
                     "model_us": f"{model.loop_time(clock, st.boards * args.tables) * 1e6:.3f}",
                     "slack_us": f"{st.slack * 1e6:.3f}", "fits_frame": st.fits_frame})
    _emit(_csv(rows), args.out)
    return EXIT_OK


def cmd_fit_bearing(args) -> int:
    from . import actuator

    cfg = actuator.load_config(args.config)
    load = cfg.load(args.load)
    fits = []
    for path in args.input:
        measured = actuator.FrequencyResponse.read_csv(path)
        fit = actuator.fit_bearing(cfg.geometry, measured, load, n_starts=args.starts)
        fits.append({"input": str(path), **fit.to_dict()})
    out = {"fits": fits}
    if len(fits) > 1:
        med = actuator.median_params([actuator.BearingParams(
            f["k_t"], f["d_t"], f["k_r"], f["d_r"]) for f in fits])
        out["median"] = med.to_dict()
    _emit(_json(out), args.out)
    return EXIT_OK


def cmd_amp_table(args) -> int:
    from . import actuator

    cfg = actuator.load_config(args.config)
    table = actuator.config_table(cfg, tuple(args.voltages), tuple(args.loads))
    buf = io.StringIO()
    table.write_csv(buf)
    _emit(buf.getvalue().replace("\r\n", "\n"), args.out)
    return EXIT_OK


def _presses(items) -> dict:
    out = {}
    for item in items or []:
        t, _, button = item.partition(":")
        out[float(t)] = button or "Back"
    return out


def cmd_run_scene(args) -> int:
    from . import host, scene

    sc = scene.load_scene(args.scene)
    bus = interconnect.VirtualBus.from_topology(_topology(args), bulk_clock=args.clock)
    manager = host.SignalManager(bus, _config(args))
    manager.initialize_boards()
    cal = host.Calibration.read(args.calibration) if args.calibration else host.Calibration()
    if args.frames:
        frames = host.read_frames(args.frames)
    else:
        radius, revs, period = args.circle
        poses = host.circle_trajectory(radius * 1e-3, revs, period)
        frames = host.frames_from_trajectory(poses, cal)
    duration = args.duration if args.duration is not None else \
        (frames[-1].timestamp if frames else 0.0)
    result = scene.run_scenario(sc, manager, frames, duration, args.scenario,
                                calibration=cal, display=host.GraphicalDisplay(_presses(args.press)),
                                origin_mm=tuple(args.origin), capture=not args.no_capture)
    scene.write_run(result, args.out, bus)
    summary = {"run": str(args.out), "events": len(result.log.events),
               "dropped_frames": len(result.drops), "errored_units": result.errored_units,
               "failures": {str(k): v for k, v in sorted(manager.failures.items())}}
    sys.stdout.write(_json(summary))
    return EXIT_UNIT_ERROR if result.errored_units else EXIT_OK


def cmd_report(args) -> int:
    from .scene import report

    out = report(args.run, args.config, args.alignment)
    sys.stdout.write(_json({k: str(v) for k, v in out.items()}))
    return EXIT_OK


# --- parser ----------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="tactwin", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("design-filter", help="reconstruction / H-bridge filter values (JSON)")
    s.add_argument("--kind", choices=("sallen-key", "hbridge", "both"), default="both")
    s.add_argument("--fc", type=metrology.parse_frequency, help="Sallen-Key cutoff (default 1300)")
    s.add_argument("--c1", type=float, default=15e-9)
    s.add_argument("--c2", type=float, default=10e-9)
    s.add_argument("--fc-hbridge", type=metrology.parse_frequency,
                   help="H-bridge cutoff (default 1000)")
    s.add_argument("--cp", type=float, default=120e-9, help="piezo capacitance, F")
    s.add_argument("--q", type=float, default=0.6)
    s.add_argument("--rl", type=float, default=90.0, help="inductor series resistance, ohm")
    s.add_argument("--inductance", type=float, help="use this inductor instead of a stock value")
    s.add_argument("--bode", help="also write Bode data CSV here")
    s.add_argument("--bode-max", type=float, default=100e3)
    s.add_argument("--bode-points", type=int, default=200)
    s.add_argument("--out")
    s.set_defaults(func=cmd_design_filter)

    s = sub.add_parser("emulate", help="render tone captures into a run directory")
    s.add_argument("--targets", type=_floats, default=_floats("10,50,100,250,500,1000,2000"))
    s.add_argument("--amplitude", type=float, default=0.9)
    s.add_argument("--duration", type=float, default=1.0)
    s.add_argument("--warmup", type=float, default=0.05)
    s.add_argument("--filter", type=metrology.parse_frequency, default=1300.0,
                   help="reconstruction filter cutoff recorded for report")
    _add_unit_args(s)
    s.add_argument("--out", required=True, help="run directory")
    s.set_defaults(func=cmd_emulate)

    s = sub.add_parser("thdn", help="sine fit and THD+N of a capture (JSON)")
    s.add_argument("--input", required=True, help="CSV samples or .u16 raw capture")
    s.add_argument("--target", type=metrology.parse_frequency, required=True)
    s.add_argument("--dt", type=float, help="sample spacing, s")
    s.add_argument("--bands", default="1k,20k,full")
    s.add_argument("--rms", action="store_true", help="normalize to the fundamental's RMS")
    s.add_argument("--strict", action="store_true", help="error on bands above Nyquist")
    s.add_argument("--duty", action="store_true",
                   help=".u16 input is a duty stream; filter it before measuring")
    s.add_argument("--filter", type=metrology.parse_frequency, default=1300.0)
    s.add_argument("--points", type=int, default=8, help="samples per PWM period")
    s.add_argument("--skip", type=float, default=0.0, help="seconds to drop after filtering")
    _add_unit_args(s)
    s.add_argument("--out")
    s.set_defaults(func=cmd_thdn)

    s = sub.add_parser("latency", help="staging loop timing per bus clock (CSV)")
    g = s.add_mutually_exclusive_group()
    g.add_argument("--topology", help="topology file, 'dip kind [channels]' per line")
    g.add_argument("--boards", type=int, help="N single-unit boards (default 1)")
    s.add_argument("--clock", type=metrology.parse_frequency, action="append",
                   help="bus clock; repeat for several (default: all presets)")
    s.add_argument("--tables", type=int, default=1, help="tables per board per loop")
    s.add_argument("--iterations", type=int, default=500)
    s.add_argument("--jitter", type=float, default=0.0)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out")
    s.set_defaults(func=cmd_latency)

    s = sub.add_parser("fit-bearing", help="bearing parameters from measured sweeps (JSON)")
    s.add_argument("--input", action="append", required=True,
                   help="CSV f_Hz, amplitude_um, voltage_V; repeat for several")
    s.add_argument("--config", help="actuator config JSON (default: shipped placeholder)")
    s.add_argument("--load", default="none")
    s.add_argument("--starts", type=int, default=5)
    s.add_argument("--out")
    s.set_defaults(func=cmd_fit_bearing)

    s = sub.add_parser("amp-table", help="banded tip amplitudes per load and voltage (CSV)")
    s.add_argument("--config")
    s.add_argument("--voltages", type=_floats, default=[60.0, 200.0])
    s.add_argument("--loads", type=lambda t: t.split(","), default=["unloaded", "lowerImpedance"])
    s.add_argument("--out")
    s.set_defaults(func=cmd_amp_table)

    s = sub.add_parser("run-scene", help="run a scenario headlessly into a run directory")
    s.add_argument("--scene", required=True)
    s.add_argument("--scenario", help="scenario name (default: first)")
    g = s.add_mutually_exclusive_group()
    g.add_argument("--topology")
    g.add_argument("--boards", type=int)
    src = s.add_mutually_exclusive_group()
    src.add_argument("--frames", help="sensor frame CSV")
    src.add_argument("--circle", type=float, nargs=3, metavar=("RADIUS_MM", "REVS", "PERIOD_S"),
                     default=(50.0, 1.0, 2.0), help="synthetic circular hand path")
    s.add_argument("--calibration", help="sensor calibration file")
    s.add_argument("--origin", type=float, nargs=2, default=(150.0, 100.0),
                   metavar=("X_MM", "Y_MM"), help="workspace position of the start pose")
    s.add_argument("--duration", type=float, help="seconds (default: until the last frame)")
    s.add_argument("--press", action="append", help="scripted button press 'time_s:button'")
    s.add_argument("--clock", type=metrology.parse_frequency, default=15.6e6)
    s.add_argument("--no-capture", action="store_true")
    _add_unit_args(s)
    s.add_argument("--out", required=True, help="run directory")
    s.set_defaults(func=cmd_run_scene)

    s = sub.add_parser("report", help="frequency, latency and amplitude tables for a run")
    s.add_argument("run", help="run directory")
    s.add_argument("--config", help="actuator config JSON")
    s.add_argument("--alignment", choices=("center", "leading"), default="center")
    s.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ValueError, OSError, RuntimeError) as exc:
        print(f"tactwin {args.command}: {exc}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
