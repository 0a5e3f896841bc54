"""Frequency tables and their 160-byte wire package.

A generator unit drives four actuator channels; each channel is described by
ten ``(frequency, amplitude)`` tuples.  On the wire every tuple is two
little-endian ``u16`` words::

    [freq code | amp code] x 10 tuples x 4 channels  ->  160 octets

The frequency code is the phase increment of a 15-bit accumulator, so it is
``floor(f / fs * 2**15)``; the amplitude code is Q15, ``round(a * 32767)``.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

N_CHANNELS = 4
N_COMPONENTS = 10
PHASE_BITS = 15
PHASE_MODULUS = 1 << PHASE_BITS
Q15_ONE = 32767
PACKAGE_SIZE = N_CHANNELS * N_COMPONENTS * 4
DEFAULT_SAMPLING_RATE = 25_000.0

# sum-of-amplitudes slack for float round-off (e.g. ten times 0.1)
_AMP_SUM_EPS = 1e-9

_PACK = struct.Struct("<" + "HH" * N_CHANNELS * N_COMPONENTS)


class WiretabError(ValueError):
    """Base class for frequency-table errors."""


class AmplitudeOverflow(WiretabError):
    pass


class FrequencyOutOfRange(WiretabError):
    pass


class LengthMismatch(WiretabError):
    pass


@dataclass
class FrequencyTable:
    """Per-channel frequency/amplitude tuples of one generator unit.

    ``frequency`` and ``amplitude`` are ``(4, 10)`` float arrays; unused
    tuples are simply zero.
    """

    frequency: np.ndarray = field(
        default_factory=lambda: np.zeros((N_CHANNELS, N_COMPONENTS)))
    amplitude: np.ndarray = field(
        default_factory=lambda: np.zeros((N_CHANNELS, N_COMPONENTS)))

    def __post_init__(self):
        self.frequency = np.array(self.frequency, dtype=float)
        self.amplitude = np.array(self.amplitude, dtype=float)
        shape = (N_CHANNELS, N_COMPONENTS)
        if self.frequency.shape != shape or self.amplitude.shape != shape:
            raise WiretabError(
                f"table must be {shape}, got {self.frequency.shape} / {self.amplitude.shape}")

    @classmethod
    def from_tuples(cls, channels: Sequence[Iterable[tuple[float, float]]]) -> "FrequencyTable":
        """Build a table from up to four lists of ``(f, a)`` tuples."""
        if len(channels) > N_CHANNELS:
            raise WiretabError(f"at most {N_CHANNELS} channels, got {len(channels)}")
        table = cls()
        for ch, tuples in enumerate(channels):
            tuples = list(tuples)
            if len(tuples) > N_COMPONENTS:
                raise WiretabError(
                    f"channel {ch}: at most {N_COMPONENTS} tuples, got {len(tuples)}")
            for k, (f, a) in enumerate(tuples):
                table.frequency[ch, k] = f
                table.amplitude[ch, k] = a
        return table

    @classmethod
    def single_tone(cls, frequency: float, amplitude: float,
                    channels: Iterable[int] = range(N_CHANNELS)) -> "FrequencyTable":
        table = cls()
        for ch in channels:
            table.frequency[ch, 0] = frequency
            table.amplitude[ch, 0] = amplitude
        return table

    def channel(self, index: int) -> list[tuple[float, float]]:
        return [(float(f), float(a))
                for f, a in zip(self.frequency[index], self.amplitude[index])]

    def copy(self) -> "FrequencyTable":
        return FrequencyTable(self.frequency.copy(), self.amplitude.copy())

    def validate(self, sampling_rate: float = DEFAULT_SAMPLING_RATE) -> None:
        """Raise if the table cannot be encoded for ``sampling_rate``."""
        f, a = self.frequency, self.amplitude
        if not (np.all(np.isfinite(f)) and np.all(np.isfinite(a))):
            raise WiretabError("table contains non-finite values")
        nyquist = sampling_rate / 2
        bad = np.argwhere((f < 0) | (f > nyquist))
        if bad.size:
            ch, k = bad[0]
            raise FrequencyOutOfRange(
                f"channel {ch} tuple {k}: {f[ch, k]} Hz outside [0, {nyquist}]")
        bad = np.argwhere((a < 0) | (a > 1))
        if bad.size:
            ch, k = bad[0]
            raise AmplitudeOverflow(f"channel {ch} tuple {k}: amplitude {a[ch, k]} outside [0, 1]")
        sums = a.sum(axis=1)
        over = np.flatnonzero(sums > 1 + _AMP_SUM_EPS)
        if over.size:
            ch = over[0]
            raise AmplitudeOverflow(f"channel {ch}: amplitude sum {sums[ch]:.6g} > 1")

    def __eq__(self, other):
        if not isinstance(other, FrequencyTable):
            return NotImplemented
        return (np.array_equal(self.frequency, other.frequency)
                and np.array_equal(self.amplitude, other.amplitude))

    def to_dict(self) -> dict:
        return {"channels": [[[f, a] for f, a in self.channel(ch)]
                             for ch in range(N_CHANNELS)]}

    @classmethod
    def from_dict(cls, data: dict) -> "FrequencyTable":
        return cls.from_tuples([[tuple(t) for t in ch] for ch in data["channels"]])


def quantization_step(sampling_rate: float) -> float:
    return sampling_rate / PHASE_MODULUS


def frequency_code(f, sampling_rate: float = DEFAULT_SAMPLING_RATE):
    """Phase increment for ``f`` (truncating); works on scalars and arrays."""
    # the tiny guard keeps exact grid frequencies from truncating one code low
    codes = np.floor(np.asarray(f, dtype=float) * PHASE_MODULUS / sampling_rate + 1e-9)
    codes = codes.astype(np.int64)
    return int(codes) if codes.ndim == 0 else codes


def amplitude_code(a):
    codes = np.rint(np.asarray(a, dtype=float) * Q15_ONE).astype(np.int64)
    return int(codes) if codes.ndim == 0 else codes


def quantized_frequency(f: float, sampling_rate: float = DEFAULT_SAMPLING_RATE) -> float:
    """Frequency actually produced by the generator for a requested ``f``."""
    if not 0 <= f <= sampling_rate / 2:
        raise FrequencyOutOfRange(f"{f} Hz outside [0, {sampling_rate / 2}]")
    return frequency_code(f, sampling_rate) * quantization_step(sampling_rate)


def encode(table: FrequencyTable, sampling_rate: float = DEFAULT_SAMPLING_RATE) -> bytes:
    """Serialize ``table`` into the 160-octet bulk package."""
    if not sampling_rate > 0:
        raise ValueError("sampling rate must be positive")
    table.validate(sampling_rate)
    fc = frequency_code(table.frequency, sampling_rate)
    ac = amplitude_code(table.amplitude)
    words = np.stack([fc, ac], axis=-1).ravel()
    return _PACK.pack(*(int(w) for w in words))


def decode_codes(pkg: bytes) -> tuple[np.ndarray, np.ndarray]:
    """Raw ``(freq_codes, amp_codes)`` arrays of shape ``(4, 10)``."""
    if len(pkg) != PACKAGE_SIZE:
        raise LengthMismatch(f"package must be {PACKAGE_SIZE} octets, got {len(pkg)}")
    words = np.frombuffer(bytes(pkg), dtype="<u2").astype(np.int64)
    words = words.reshape(N_CHANNELS, N_COMPONENTS, 2)
    return words[..., 0].copy(), words[..., 1].copy()


def decode(pkg: bytes, sampling_rate: float = DEFAULT_SAMPLING_RATE) -> FrequencyTable:
    fc, ac = decode_codes(pkg)
    return FrequencyTable(fc * quantization_step(sampling_rate), ac / Q15_ONE)


def dump_json(table: FrequencyTable, fp) -> None:
    json.dump(table.to_dict(), fp, indent=2)


def load_json(fp) -> FrequencyTable:
    return FrequencyTable.from_dict(json.load(fp))


def grid_distance(f: float, sampling_rate: float = DEFAULT_SAMPLING_RATE) -> float:
    """Distance from ``f`` to the nearest realizable generator frequency."""
    q = quantization_step(sampling_rate)
    return abs(f - q * math.floor(f / q + 0.5))
