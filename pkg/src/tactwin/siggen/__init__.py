"""Coprocessor firmware emulation: run levels, DDS oscillator bank, PWM."""

from . import backend
from .machine import (
    LUT_SIZE,
    TOTAL_COMPONENTS,
    AssignAddress,
    BadCommand,
    BankState,
    GeneratorConfig,
    GeneratorError,
    GeneratorMachine,
    GetState,
    IllegalTransition,
    NotRunning,
    Opcode,
    Ping,
    Reset,
    RunLevel,
    SetPwmDepth,
    SetSamplingRate,
    SetSmoothing,
    Start,
    Stop,
    WrongState,
    cosine_lut,
    decode_command,
    duty_to_fraction,
    encode_command,
    mid_scale,
)
from .pwm import pulse_start, pwm_edge_stream

__all__ = [name for name in dir() if not name.startswith("_")]
