"""Desk version of the bench measurement: emulator -> PWM -> analog stage -> scope."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import analog, metrology, wiretab
from .siggen import AssignAddress, GeneratorConfig, GeneratorMachine, SetSamplingRate, Start


@dataclass
class Capture:
    signal: metrology.SampledSignal
    duties: np.ndarray
    machine: GeneratorMachine


def running_machine(config: GeneratorConfig | None = None, dip: int = 0) -> GeneratorMachine:
    """A unit taken from Boot to Running with ``config``."""
    config = config or GeneratorConfig()
    m = GeneratorMachine(dip=dip, config=config)
    m.apply_command(AssignAddress(0))
    m.apply_command(SetSamplingRate(int(round(config.sampling_rate))))
    m.apply_command(Start())
    return m


def capture_tone(target: float, amplitude: float = 0.9, duration: float = 1.0,
                 config: GeneratorConfig | None = None, channel: int = 0,
                 tf: analog.RationalTransferFunction | None = None,
                 points_per_period: int = 8, alignment: str = "center",
                 warmup: float = 0.05) -> Capture:
    """Render a single tone, filter the PWM stream exactly and sample it.

    The default stage is the Sallen-Key reconstruction filter at 1.3 kHz; the
    default sampling gives ``dt = 1 / (8 fs)`` (5 us at 25 kHz).  ``warmup``
    seconds of output are rendered and discarded first so the smoothing IIR
    has settled.
    """
    m = running_machine(config)
    cfg = m.config
    fs = cfg.sampling_rate
    table = wiretab.FrequencyTable.single_tone(target, amplitude, channels=[channel])
    m.stage_table(wiretab.encode(table, fs))
    n_warm = int(round(warmup * fs))
    n = int(round(duration * fs))
    duties = m.render_samples(n_warm + n)[channel]
    if tf is None:
        tf = analog.sallen_key_tf(analog.sallen_key_design(1300.0))
    y = analog.pwm_response(tf, duties, cfg.pwm_bit_depth, fs, points_per_period,
                            alignment=alignment, settle=True)
    y = y[n_warm * points_per_period:]
    sig = metrology.SampledSignal(y, 1.0 / (fs * points_per_period))
    return Capture(sig, duties[n_warm:], m)


def measure_tone(target: float, **kwargs) -> metrology.ThdnReport:
    cap = capture_tone(target, **kwargs)
    return metrology.analyze(cap.signal, target)
