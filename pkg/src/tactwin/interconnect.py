"""Virtual backplane between the host and the generator units.

Two channels share the stack: a fast, write-only bulk channel whose chip
select comes from a 7-bit address bus (or the broadcast line), and a slow,
bidirectional config channel addressed by runtime addresses handed out during
enumeration.  Transfer time on the bulk channel is modelled, not simulated bit
by bit::

    duration = effective_bits / bulk_clock + fixed_overhead

with both constants fitted to bench measurements.
"""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from . import wiretab
from .siggen import (
    AssignAddress,
    BadCommand,
    GeneratorConfig,
    GeneratorError,
    GeneratorMachine,
    IllegalTransition,
    WrongState,
    encode_command,
)

log = logging.getLogger(__name__)

MAX_UNITS = 112
CHANNELS_PER_UNIT = wiretab.N_CHANNELS
BULK_CLOCK_PRESETS = (967e3, 1.953e6, 3.9e6, 7.8e6, 15.6e6)
DEFAULT_CONFIG_CLOCK = 400e3
CONFIG_OVERHEAD_BYTES = 1       # address byte
UNIT_KINDS = ("ASG", "HVA")

# averaged single-board package times on the bench, (clock Hz, seconds)
REFERENCE_SINGLE_BOARD = (
    (967e3, 1480e-6),
    (1.953e6, 742e-6),
    (3.9e6, 374e-6),
    (7.8e6, 190e-6),
    (15.6e6, 98e-6),
)


class BusError(RuntimeError):
    pass


class NoSuchAddress(BusError):
    pass


class DuplicateDip(BusError):
    def __init__(self, dip: int):
        super().__init__(f"two units answer to DIP address {dip}")
        self.dip = dip


class NoSelection(BusError):
    pass


class Nack(BusError):
    pass


class Timeout(BusError):
    pass


class DegenerateFit(ValueError):
    pass


class TopologyError(ValueError):
    pass


@dataclass(frozen=True)
class BoardAddress:
    dip: int
    config_addr: int | None = None

    def __post_init__(self):
        if not 0 <= self.dip < MAX_UNITS:
            raise ValueError(f"DIP address {self.dip} outside 0..{MAX_UNITS - 1}")
        if self.config_addr is not None and not 0 <= self.config_addr < MAX_UNITS:
            raise ValueError(f"config address {self.config_addr} outside 0..{MAX_UNITS - 1}")


@dataclass(frozen=True)
class LatencyModel:
    effective_bits: float
    fixed_overhead: float

    def __post_init__(self):
        if self.effective_bits < 8 * wiretab.PACKAGE_SIZE:
            raise ValueError("effective bits cannot be below the raw payload")
        if self.fixed_overhead < 0:
            raise ValueError("fixed overhead must be non-negative")

    def transfer_time(self, clock: float, nbytes: int = wiretab.PACKAGE_SIZE) -> float:
        """Seconds for one addressed transfer of ``nbytes``."""
        bits = self.effective_bits * nbytes / wiretab.PACKAGE_SIZE
        return bits / clock + self.fixed_overhead

    def loop_time(self, clock: float, n_transfers: int) -> float:
        return n_transfers * self.transfer_time(clock)


def calibrate_latency(samples: Iterable[tuple[float, float]],
                      weighting: str = "relative") -> LatencyModel:
    """Least-squares fit of ``t = B / clock + t0`` to measured averages.

    ``weighting="relative"`` minimizes relative residuals, which keeps the
    fast-clock rows (short times) from being swamped by the slow ones;
    ``"absolute"`` is plain least squares.
    """
    data = np.asarray(list(samples), dtype=float)
    if data.ndim != 2 or data.shape[0] < 2:
        raise DegenerateFit("need at least two (clock, time) samples")
    clocks, times = data[:, 0], data[:, 1]
    if len(np.unique(clocks)) < 2:
        raise DegenerateFit("need at least two distinct clocks")
    design = np.column_stack([1.0 / clocks, np.ones_like(clocks)])
    rhs = times.copy()
    if weighting == "relative":
        design /= times[:, None]
        rhs = np.ones_like(times)
    elif weighting != "absolute":
        raise ValueError("weighting must be 'relative' or 'absolute'")
    if np.linalg.matrix_rank(design) < 2:
        raise DegenerateFit("singular design matrix")
    (bits, overhead), *_ = np.linalg.lstsq(design, rhs, rcond=None)
    return LatencyModel(float(bits), float(overhead))


DEFAULT_LATENCY_MODEL = calibrate_latency(REFERENCE_SINGLE_BOARD)


# --- topology ----------------------------------------------------------------

@dataclass(frozen=True)
class UnitSpec:
    dip: int
    kind: str = "HVA"
    channels: int = CHANNELS_PER_UNIT

    def __post_init__(self):
        if not 0 <= self.dip < MAX_UNITS:
            raise TopologyError(f"DIP {self.dip} outside 0..{MAX_UNITS - 1}")
        if self.kind not in UNIT_KINDS:
            raise TopologyError(f"unit kind must be one of {UNIT_KINDS}, got {self.kind!r}")
        if not 1 <= self.channels <= CHANNELS_PER_UNIT:
            raise TopologyError(f"channels must be 1..{CHANNELS_PER_UNIT}")


def parse_topology(text: str) -> list[UnitSpec]:
    """Parse ``dip kind [channels]`` lines; ``#`` starts a comment.

    An ASG board carries two independent units and is written as two lines.
    """
    units = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.replace(",", " ").split()
        try:
            dip = int(parts[0])
            kind = parts[1].upper() if len(parts) > 1 else "HVA"
            channels = int(parts[2]) if len(parts) > 2 else CHANNELS_PER_UNIT
            units.append(UnitSpec(dip, kind, channels))
        except (ValueError, IndexError, TopologyError) as exc:
            raise TopologyError(f"line {lineno}: {exc}") from None
    if len(units) > MAX_UNITS:
        raise TopologyError(f"at most {MAX_UNITS} units, got {len(units)}")
    return units


def format_topology(units: Sequence[UnitSpec]) -> str:
    return "".join(f"{u.dip} {u.kind} {u.channels}\n" for u in units)


def load_topology(path) -> list[UnitSpec]:
    with open(path, encoding="utf-8") as fh:
        return parse_topology(fh.read())


# --- the bus -----------------------------------------------------------------

@dataclass(frozen=True)
class RegistryEntry:
    dip: int
    config_addr: int
    channels: int
    kind: str


@dataclass
class TransferReport:
    start: float
    duration: float
    nbytes: int
    broadcast: bool
    delivered: list[int] = field(default_factory=list)
    dropped: list[str] = field(default_factory=list)


@dataclass(frozen=True)
class TraceRecord:
    timestamp: float
    addr: str
    nbytes: int
    duration: float


class VirtualBus:
    """Address bus, broadcast line, bulk and config channels over a set of units.

    All transfers are serialized; ``now`` is the simulated bus time in seconds.
    """

    def __init__(self, units: Iterable[GeneratorMachine] = (),
                 bulk_clock: float = 15.6e6,
                 config_clock: float = DEFAULT_CONFIG_CLOCK,
                 latency: LatencyModel = DEFAULT_LATENCY_MODEL):
        self.units = list(units)
        if len(self.units) > MAX_UNITS:
            raise TopologyError(f"at most {MAX_UNITS} units on one bus")
        self.bulk_clock = bulk_clock
        self.config_clock = config_clock
        self.latency = latency
        self.now = 0.0
        self.trace: list[TraceRecord] = []
        self.diagnostics: list[str] = []
        self._selected: int | None = None
        self._broadcast = False
        self._by_config: dict[int, GeneratorMachine] = {}

    @classmethod
    def from_topology(cls, specs: Iterable[UnitSpec], config: GeneratorConfig | None = None,
                      **kwargs) -> "VirtualBus":
        units = [GeneratorMachine(dip=s.dip, config=config, kind=s.kind, channels=s.channels)
                 for s in specs]
        return cls(units, **kwargs)

    def _diag(self, msg: str):
        log.debug(msg)
        self.diagnostics.append(msg)

    def _units_at(self, dip: int) -> list[GeneratorMachine]:
        return [u for u in self.units if u.dip == dip]

    # -- address bus ------------------------------------------------------------

    def select(self, addr: int) -> GeneratorMachine | None:
        """Drive the address bus; returns the unit whose chip select fires."""
        if not 0 <= addr < MAX_UNITS:
            raise ValueError(f"address {addr} outside 0..{MAX_UNITS - 1}")
        self._selected = addr
        hits = self._units_at(addr)
        if len(hits) > 1:
            raise DuplicateDip(addr)
        if not hits:
            self._diag(f"NoSuchAddress: no unit at DIP {addr}")
            return None
        return hits[0]

    def broadcast(self, on: bool = True) -> None:
        self._broadcast = bool(on)

    @property
    def broadcasting(self) -> bool:
        return self._broadcast

    # -- bulk channel -----------------------------------------------------------

    def bulk_write(self, pkg: bytes) -> TransferReport:
        """Clock ``pkg`` out to the selected unit, or all units when broadcasting."""
        if not self._broadcast and self._selected is None:
            raise NoSelection("no address selected and broadcast is off")
        duration = self.latency.transfer_time(self.bulk_clock, len(pkg))
        report = TransferReport(self.now, duration, len(pkg), self._broadcast)
        if self._broadcast:
            targets = list(self.units)
            addr = "broadcast"
        else:
            targets = self._units_at(self._selected)
            addr = str(self._selected)
            if len(targets) > 1:
                raise DuplicateDip(self._selected)
            if not targets:
                msg = f"NoSuchAddress: write to DIP {self._selected} dropped"
                self._diag(msg)
                report.dropped.append(msg)
        for unit in targets:
            try:
                unit.receive(pkg)
                report.delivered.append(unit.dip)
            except (WrongState, wiretab.WiretabError) as exc:
                msg = f"DIP {unit.dip}: {exc}"
                self._diag(msg)
                report.dropped.append(msg)
        self.trace.append(TraceRecord(self.now, addr, len(pkg), duration))
        self.now += duration
        return report

    # -- config channel ---------------------------------------------------------

    def config_duration(self, n_out: int, n_in: int = 0) -> float:
        return (n_out + n_in + CONFIG_OVERHEAD_BYTES) * 8 / self.config_clock

    def config_command(self, config_addr: int, command: bytes | object) -> bytes:
        """Send a config command to an enumerated unit; returns its response."""
        octets = command if isinstance(command, (bytes, bytearray)) else encode_command(command)
        unit = self._by_config.get(config_addr)
        if unit is None or unit.config_address != config_addr:
            self.now += self.config_duration(len(octets))
            raise Timeout(f"no unit answers at config address {config_addr}")
        try:
            response = unit.handle_config(bytes(octets))
        except (IllegalTransition, BadCommand) as exc:
            self.now += self.config_duration(len(octets), 1)
            raise Nack(f"config address {config_addr}: {exc}") from exc
        self.now += self.config_duration(len(octets), len(response))
        return response

    def unit_at(self, config_addr: int) -> GeneratorMachine:
        try:
            return self._by_config[config_addr]
        except KeyError:
            raise Timeout(f"no unit at config address {config_addr}") from None

    def enumerate(self) -> list[RegistryEntry]:
        """Scan DIP addresses, assigning each responder a unique config address."""
        registry = []
        self._by_config.clear()
        next_addr = 0
        for dip in range(MAX_UNITS):
            hits = self._units_at(dip)
            if not hits:
                continue
            if len(hits) > 1:
                raise DuplicateDip(dip)
            unit = hits[0]
            cmd = encode_command(AssignAddress(next_addr))
            # chip select routes the general-call assignment to this unit only
            try:
                unit.handle_config(cmd)
            except GeneratorError as exc:
                self._diag(f"DIP {dip}: address assignment refused ({exc})")
                if unit.config_address is None or unit.config_address in self._by_config:
                    continue
            self.now += self.config_duration(len(cmd), 2)
            addr = unit.config_address
            self._by_config[addr] = unit
            registry.append(RegistryEntry(dip, addr, unit.channels, unit.kind))
            next_addr = max(next_addr, addr) + 1
        return registry

    # -- traces -----------------------------------------------------------------

    def trace_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["timestamp_s", "addr", "bytes", "duration_s"])
        for rec in self.trace:
            writer.writerow([f"{rec.timestamp:.9f}", rec.addr, rec.nbytes, f"{rec.duration:.9f}"])
        return buf.getvalue()

    def export_trace(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            fh.write(self.trace_csv())


def total_channels(registry: Sequence[RegistryEntry]) -> int:
    return sum(entry.channels for entry in registry)
