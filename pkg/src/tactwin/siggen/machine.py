"""Emulated signal-generator coprocessor.

The unit walks through run levels ``BOOT -> ENUMERATED -> CONFIGURED ->
RUNNING``; configuration commands are only accepted outside ``RUNNING``, and a
start request that cannot meet the sample-period budget lands in ``ERROR``,
which only ``Reset`` leaves.

While running, 4 channels x 10 components are synthesized with a 15-bit phase
accumulator per component and a 4096-entry Q15 cosine table indexed by the
top 12 phase bits.  Each component's frequency code and amplitude are chased
by a first-order IIR with a shared coefficient, and the per-channel sum is
mapped onto PWM duty values centred at ``2**(depth-1)``.
"""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass, replace
from functools import lru_cache

import numpy as np

from .. import wiretab
from . import backend

N_CHANNELS = wiretab.N_CHANNELS
N_COMPONENTS = wiretab.N_COMPONENTS
TOTAL_COMPONENTS = N_CHANNELS * N_COMPONENTS
LUT_BITS = 12
LUT_SIZE = 1 << LUT_BITS
MIN_PWM_DEPTH, MAX_PWM_DEPTH = 8, 16


class GeneratorError(RuntimeError):
    pass


class IllegalTransition(GeneratorError):
    pass


class WrongState(GeneratorError):
    pass


class NotRunning(GeneratorError):
    pass


class BadCommand(GeneratorError):
    pass


class RunLevel(enum.IntEnum):
    BOOT = 0
    ENUMERATED = 1
    CONFIGURED = 2
    RUNNING = 3
    ERROR = 4


@dataclass(frozen=True)
class GeneratorConfig:
    sampling_rate: float = wiretab.DEFAULT_SAMPLING_RATE
    pwm_bit_depth: int = 12
    smoothing_alpha: float = 0.05
    component_cost_budget: float = 1.0e-6   # seconds per component per sample

    def __post_init__(self):
        if not self.sampling_rate > 0:
            raise ValueError("sampling rate must be positive")
        if not MIN_PWM_DEPTH <= self.pwm_bit_depth <= MAX_PWM_DEPTH:
            raise ValueError(f"PWM depth must be in [{MIN_PWM_DEPTH}, {MAX_PWM_DEPTH}]")
        if not 0 < self.smoothing_alpha <= 1:
            raise ValueError("smoothing alpha must be in (0, 1]")
        if self.component_cost_budget < 0:
            raise ValueError("component cost budget must be non-negative")

    @property
    def alpha_q15(self) -> int:
        return max(1, round(self.smoothing_alpha * 32768))

    @property
    def effective_alpha(self) -> float:
        """Coefficient after Q15 quantization."""
        return self.alpha_q15 / 32768

    @property
    def compute_time(self) -> float:
        return TOTAL_COMPONENTS * self.component_cost_budget

    @property
    def timing_feasible(self) -> bool:
        return self.compute_time <= (1.0 / self.sampling_rate) * (1 + 1e-9)


# --- configuration commands ------------------------------------------------

@dataclass(frozen=True)
class Ping:
    pass


@dataclass(frozen=True)
class GetState:
    pass


@dataclass(frozen=True)
class AssignAddress:
    address: int


@dataclass(frozen=True)
class SetSamplingRate:
    hz: float


@dataclass(frozen=True)
class SetPwmDepth:
    bits: int


@dataclass(frozen=True)
class SetSmoothing:
    alpha: float


@dataclass(frozen=True)
class Start:
    pass


@dataclass(frozen=True)
class Stop:
    pass


@dataclass(frozen=True)
class Reset:
    pass


class Opcode(enum.IntEnum):
    PING = 0x01
    ASSIGN_ADDRESS = 0x02
    SET_SAMPLING_RATE = 0x03
    SET_PWM_DEPTH = 0x04
    SET_SMOOTHING = 0x05
    START = 0x06
    STOP = 0x07
    RESET = 0x08
    GET_STATE = 0x09


STATUS_OK = 0x00
STATUS_NACK = 0x15


def encode_command(cmd) -> bytes:
    """Config-bus octets for a command object."""
    match cmd:
        case Ping():
            return bytes([Opcode.PING])
        case GetState():
            return bytes([Opcode.GET_STATE])
        case AssignAddress(address=a):
            return bytes([Opcode.ASSIGN_ADDRESS, a])
        case SetSamplingRate(hz=hz):
            return bytes([Opcode.SET_SAMPLING_RATE]) + struct.pack("<I", round(hz))
        case SetPwmDepth(bits=b):
            return bytes([Opcode.SET_PWM_DEPTH, b])
        case SetSmoothing(alpha=alpha):
            return bytes([Opcode.SET_SMOOTHING]) + struct.pack("<H", max(1, round(alpha * 32768)))
        case Start():
            return bytes([Opcode.START])
        case Stop():
            return bytes([Opcode.STOP])
        case Reset():
            return bytes([Opcode.RESET])
    raise BadCommand(f"unknown command {cmd!r}")


def decode_command(octets: bytes):
    if not octets:
        raise BadCommand("empty command")
    try:
        op = Opcode(octets[0])
    except ValueError:
        raise BadCommand(f"unknown opcode 0x{octets[0]:02x}") from None
    body = bytes(octets[1:])
    try:
        match op:
            case Opcode.PING:
                return Ping()
            case Opcode.GET_STATE:
                return GetState()
            case Opcode.ASSIGN_ADDRESS:
                (a,) = struct.unpack("<B", body)
                return AssignAddress(a)
            case Opcode.SET_SAMPLING_RATE:
                (hz,) = struct.unpack("<I", body)
                return SetSamplingRate(float(hz))
            case Opcode.SET_PWM_DEPTH:
                (b,) = struct.unpack("<B", body)
                return SetPwmDepth(b)
            case Opcode.SET_SMOOTHING:
                (q,) = struct.unpack("<H", body)
                return SetSmoothing(q / 32768)
            case Opcode.START:
                return Start()
            case Opcode.STOP:
                return Stop()
            case Opcode.RESET:
                return Reset()
    except struct.error:
        raise BadCommand(f"malformed payload for {op.name}") from None
    raise BadCommand(op.name)  # pragma: no cover


# --- lookup table ------------------------------------------------------------

@lru_cache(maxsize=1)
def _lut() -> np.ndarray:
    i = np.arange(LUT_SIZE)
    lut = np.rint(32767 * np.cos(2 * np.pi * i / LUT_SIZE)).astype(np.int64)
    lut.flags.writeable = False
    return lut


def cosine_lut() -> np.ndarray:
    """4096-entry Q15 cosine table, ``round(32767 cos(2 pi i / 4096))``."""
    return _lut().copy()


# --- the machine -------------------------------------------------------------

@dataclass
class BankState:
    phase: np.ndarray
    freq_state: np.ndarray      # frequency code << 16
    amp_state: np.ndarray       # Q15 amplitude << 16
    freq_target: np.ndarray
    amp_target: np.ndarray

    @classmethod
    def zeros(cls) -> "BankState":
        z = lambda: np.zeros((N_CHANNELS, N_COMPONENTS), dtype=np.int64)  # noqa: E731
        return cls(z(), z(), z(), z(), z())

    def copy(self) -> "BankState":
        return BankState(*(a.copy() for a in (
            self.phase, self.freq_state, self.amp_state, self.freq_target, self.amp_target)))

    @property
    def smoothed_freq_code(self) -> np.ndarray:
        return (self.freq_state + (1 << 15)) >> 16

    @property
    def smoothed_amp_code(self) -> np.ndarray:
        return (self.amp_state + (1 << 15)) >> 16


class GeneratorMachine:
    """One coprocessor unit: run-level logic, staging buffer and oscillator bank."""

    def __init__(self, dip: int | None = None, config: GeneratorConfig | None = None,
                 kind: str = "HVA", channels: int = N_CHANNELS):
        self.dip = dip
        self.kind = kind
        self.channels = channels
        self._initial_config = config or GeneratorConfig()
        self.user_buffer: bytes | None = None
        self.kernel = backend.render_block
        self._boot()

    def _boot(self):
        self.config = self._initial_config
        self.state = RunLevel.BOOT
        self.error_reason: str | None = None
        self.config_address: int | None = None
        self.bank = BankState.zeros()
        self._staged: bytes | None = None
        self.samples_rendered = 0
        self.peak_accumulator = 0

    # -- commands -------------------------------------------------------------

    def apply_command(self, cmd) -> RunLevel:
        """Apply a configuration command and return the resulting run level."""
        st = self.state
        if isinstance(cmd, Reset):
            self._boot()
            return self.state
        if isinstance(cmd, (Ping, GetState)):
            return st
        if st is RunLevel.ERROR:
            raise IllegalTransition(f"unit in ERROR ({self.error_reason}); reset required")

        match cmd:
            case AssignAddress(address=a):
                if st is RunLevel.RUNNING:
                    raise IllegalTransition("cannot re-address a running unit")
                if not 0 <= a <= 111:
                    raise BadCommand(f"config address {a} out of range")
                self.config_address = a
                if st is RunLevel.BOOT:
                    self.state = RunLevel.ENUMERATED
            case SetSamplingRate() | SetPwmDepth() | SetSmoothing():
                if st not in (RunLevel.ENUMERATED, RunLevel.CONFIGURED):
                    raise IllegalTransition(f"{type(cmd).__name__} not allowed in {st.name}")
                self.config = self._apply_setting(cmd)
                self.state = RunLevel.CONFIGURED
            case Start():
                if st is not RunLevel.CONFIGURED:
                    raise IllegalTransition(f"start requires CONFIGURED, unit is {st.name}")
                if self.config.timing_feasible:
                    self.state = RunLevel.RUNNING
                else:
                    self._fail(
                        f"TimingViolation: {self.config.compute_time * 1e6:.3g} us compute "
                        f"> {1e6 / self.config.sampling_rate:.3g} us sample period")
            case Stop():
                if st is not RunLevel.RUNNING:
                    raise IllegalTransition(f"stop requires RUNNING, unit is {st.name}")
                self.state = RunLevel.CONFIGURED
            case _:
                raise BadCommand(f"unknown command {cmd!r}")
        return self.state

    def _apply_setting(self, cmd) -> GeneratorConfig:
        try:
            match cmd:
                case SetSamplingRate(hz=hz):
                    return replace(self.config, sampling_rate=float(hz))
                case SetPwmDepth(bits=b):
                    return replace(self.config, pwm_bit_depth=int(b))
                case SetSmoothing(alpha=alpha):
                    return replace(self.config, smoothing_alpha=float(alpha))
        except ValueError as exc:
            raise BadCommand(str(exc)) from None
        raise BadCommand(repr(cmd))  # pragma: no cover

    def _fail(self, reason: str):
        self.state = RunLevel.ERROR
        self.error_reason = reason

    def handle_config(self, octets: bytes) -> bytes:
        """Firmware side of the config bus: decode, apply, answer."""
        cmd = decode_command(octets)
        level = self.apply_command(cmd)
        if isinstance(cmd, Ping):
            return bytes([STATUS_OK, self.dip if self.dip is not None else 0xFF])
        return bytes([STATUS_OK, int(level)])

    # -- bulk data ------------------------------------------------------------

    def receive(self, pkg: bytes) -> None:
        """Bulk-channel delivery; non-table payloads go to the user buffer."""
        if len(pkg) == wiretab.PACKAGE_SIZE:
            self.stage_table(pkg)
        else:
            self.user_buffer = bytes(pkg)

    def stage_table(self, pkg: bytes) -> None:
        """Store a package; it becomes active at the next sample boundary."""
        if self.state not in (RunLevel.CONFIGURED, RunLevel.RUNNING):
            raise WrongState(f"cannot stage a table in {self.state.name}")
        wiretab.decode_codes(pkg)   # length check
        self._staged = bytes(pkg)

    def _activate_staged(self):
        if self._staged is None:
            return
        fc, ac = wiretab.decode_codes(self._staged)
        self._staged = None
        self.bank.freq_target[:] = fc & 0x7FFF
        self.bank.amp_target[:] = np.clip(ac, 0, wiretab.Q15_ONE)

    def render_samples(self, n: int, schedule=()) -> np.ndarray:
        """Render ``n`` samples of duty values, shape ``(4, n)`` ``uint16``.

        ``schedule`` holds ``(k, package)`` pairs staged right before sample
        ``k`` of this batch.
        """
        if self.state is not RunLevel.RUNNING:
            raise NotRunning(f"unit is {self.state.name}")
        out = np.empty((N_CHANNELS, n), dtype=np.uint16)
        cuts = sorted(schedule, key=lambda item: item[0])
        start = 0
        for k, pkg in cuts + [(n, None)]:
            if not 0 <= k <= n:
                raise ValueError(f"schedule index {k} outside batch of {n}")
            if k > start:
                self._render_into(out[:, start:k])
                start = k
            if pkg is not None:
                self.stage_table(pkg)
        return out

    def _render_into(self, view: np.ndarray):
        self._activate_staged()
        block = np.empty(view.shape, dtype=np.uint16)
        b = self.bank
        peak = self.kernel(_lut(), b.phase, b.freq_state, b.amp_state,
                           b.freq_target, b.amp_target,
                           self.config.alpha_q15, self.config.pwm_bit_depth, block)
        view[:] = block
        self.peak_accumulator = max(self.peak_accumulator, int(peak))
        self.samples_rendered += view.shape[1]

    @property
    def time(self) -> float:
        """Emulated time since boot in seconds."""
        return self.samples_rendered / self.config.sampling_rate

    def realized_frequencies(self) -> np.ndarray:
        """Frequencies currently synthesized, from the smoothed codes."""
        return self.bank.smoothed_freq_code * wiretab.quantization_step(self.config.sampling_rate)

    def __repr__(self):
        return (f"GeneratorMachine(dip={self.dip}, kind={self.kind!r}, "
                f"state={self.state.name}, config_address={self.config_address})")


def duty_to_fraction(duties: np.ndarray, depth: int) -> np.ndarray:
    return np.asarray(duties, dtype=float) / (1 << depth)


def mid_scale(depth: int) -> int:
    return 1 << (depth - 1)
