"""Battery data model, CSV ingestion and the synthetic degradation generator."""

from __future__ import annotations

import csv
import hashlib
import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .errors import InvalidInput, NotFound, ParseError, SchemaError

CYCLES_HEADER = ["battery_id", "cycle_index", "sample_index", "voltage_v"]
CAPACITY_HEADER = ["battery_id", "cycle_index", "capacity_ah"]

VOLTAGE_BOUNDS = (0.0, 10.0)
DEFAULT_NOMINAL_CAPACITY = 1.1


@dataclass(frozen=True, eq=False)
class DischargeCycle:
    cycle_index: int
    voltage: np.ndarray
    capacity: float

    def __post_init__(self):
        v = np.array(self.voltage, dtype=float)
        v.setflags(write=False)
        object.__setattr__(self, "voltage", v)
        object.__setattr__(self, "capacity", float(self.capacity))
        if self.cycle_index < 1:
            raise InvalidInput(f"cycle_index must be >= 1, got {self.cycle_index}")
        if v.ndim != 1 or v.size < 2:
            raise InvalidInput(f"cycle {self.cycle_index}: need at least 2 voltage samples")
        if not np.all(np.isfinite(v)):
            raise InvalidInput(f"cycle {self.cycle_index}: non-finite voltage sample")
        lo, hi = VOLTAGE_BOUNDS
        if v.min() < lo or v.max() > hi:
            raise InvalidInput(f"cycle {self.cycle_index}: voltage outside [{lo}, {hi}] V")
        if not (math.isfinite(self.capacity) and self.capacity > 0):
            raise InvalidInput(f"cycle {self.cycle_index}: capacity must be positive")

    def __eq__(self, other):
        if not isinstance(other, DischargeCycle):
            return NotImplemented
        return (
            self.cycle_index == other.cycle_index
            and self.capacity == other.capacity
            and np.array_equal(self.voltage, other.voltage)
        )


@dataclass(frozen=True, eq=False)
class BatteryRecord:
    id: str
    nominal_capacity: float
    charge_protocol: str
    cycles: tuple

    def __post_init__(self):
        object.__setattr__(self, "cycles", tuple(self.cycles))
        if not self.cycles:
            raise InvalidInput(f"battery {self.id!r} has no cycles")
        if not self.nominal_capacity > 0:
            raise InvalidInput("nominal_capacity must be positive")
        prev = 0
        for c in self.cycles:
            if c.cycle_index <= prev:
                raise InvalidInput(f"battery {self.id!r}: cycle_index not strictly increasing at {c.cycle_index}")
            prev = c.cycle_index
            if c.capacity > 2 * self.nominal_capacity:
                raise InvalidInput(
                    f"battery {self.id!r} cycle {c.cycle_index}: capacity {c.capacity} "
                    f"exceeds twice the nominal {self.nominal_capacity}"
                )

    def __eq__(self, other):
        if not isinstance(other, BatteryRecord):
            return NotImplemented
        return (
            self.id == other.id
            and self.nominal_capacity == other.nominal_capacity
            and self.charge_protocol == other.charge_protocol
            and self.cycles == other.cycles
        )

    def __len__(self):
        return len(self.cycles)

    @property
    def capacities(self) -> np.ndarray:
        return np.array([c.capacity for c in self.cycles])

    @property
    def cycle_indices(self) -> list[int]:
        return [c.cycle_index for c in self.cycles]

    @property
    def soh(self) -> np.ndarray:
        return self.capacities / self.nominal_capacity

    def head(self, n: int) -> "BatteryRecord":
        return BatteryRecord(self.id, self.nominal_capacity, self.charge_protocol, self.cycles[:n])


# -- CSV ingestion ---------------------------------------------------------


def _float_field(text, row, name):
    try:
        value = float(text)
    except (TypeError, ValueError):
        raise ParseError(f"cannot parse {name}={text!r}", row=row) from None
    if not math.isfinite(value):
        raise ParseError(f"non-finite {name}={text!r}", row=row)
    return value


def _int_field(text, row, name):
    try:
        return int(text)
    except (TypeError, ValueError):
        raise ParseError(f"cannot parse {name}={text!r}", row=row) from None


def _read_rows(path, header):
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            first = next(reader)
        except StopIteration:
            raise SchemaError(f"{path}: empty file") from None
        if [h.strip() for h in first] != header:
            raise SchemaError(f"{path}: expected header {','.join(header)}, got {','.join(first)}")
        # row numbers are 1-based file lines, header is line 1
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise ParseError(f"expected {len(header)} fields, got {len(row)}", row=lineno)
            yield lineno, row


def load_battery(
    cycles_path,
    capacity_path,
    id: str,
    nominal_capacity: float = DEFAULT_NOMINAL_CAPACITY,
    charge_protocol: str = "",
) -> BatteryRecord:
    """Read one battery out of a pair of long-format CSV files.

    The cycles file holds ``battery_id,cycle_index,sample_index,voltage_v``
    rows, the capacity file ``battery_id,cycle_index,capacity_ah`` rows.
    Several batteries may share the same pair of files.
    """
    samples: dict[int, list[tuple[int, float]]] = {}
    for lineno, row in _read_rows(cycles_path, CYCLES_HEADER):
        if row[0] != id:
            continue
        k = _int_field(row[1], lineno, "cycle_index")
        s = _int_field(row[2], lineno, "sample_index")
        v = _float_field(row[3], lineno, "voltage_v")
        samples.setdefault(k, []).append((s, v))
    if not samples:
        raise NotFound(f"battery {id!r} not found in {cycles_path}")

    capacity: dict[int, float] = {}
    for lineno, row in _read_rows(capacity_path, CAPACITY_HEADER):
        if row[0] != id:
            continue
        k = _int_field(row[1], lineno, "cycle_index")
        if k in capacity:
            raise SchemaError(f"{capacity_path}: duplicate capacity row for cycle {k} (line {lineno})")
        capacity[k] = _float_field(row[2], lineno, "capacity_ah")

    cycles = []
    for k in sorted(samples):
        if k not in capacity:
            raise SchemaError(f"battery {id!r}: cycle {k} has no capacity row")
        pts = sorted(samples[k])
        idx = [s for s, _ in pts]
        if len(set(idx)) != len(idx):
            raise SchemaError(f"battery {id!r}: duplicate sample_index in cycle {k}")
        cycles.append(DischargeCycle(k, np.array([v for _, v in pts]), capacity[k]))
    return BatteryRecord(id, nominal_capacity, charge_protocol, cycles)


def save_battery(battery: BatteryRecord, cycles_path, capacity_path) -> None:
    """Write a battery as the CSV pair read by :func:`load_battery`."""
    with open(cycles_path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CYCLES_HEADER)
        for c in battery.cycles:
            for s, v in enumerate(c.voltage):
                w.writerow([battery.id, c.cycle_index, s, repr(float(v))])
    with open(capacity_path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CAPACITY_HEADER)
        for c in battery.cycles:
            w.writerow([battery.id, c.cycle_index, repr(c.capacity)])


# -- JSON battery documents (CLI interchange) -------------------------------


def battery_to_dict(battery: BatteryRecord) -> dict:
    return {
        "id": battery.id,
        "nominal_capacity": battery.nominal_capacity,
        "charge_protocol": battery.charge_protocol,
        "cycles": [
            {"cycle_index": c.cycle_index, "capacity": c.capacity, "voltage": c.voltage.tolist()}
            for c in battery.cycles
        ],
    }


def battery_from_dict(doc: dict) -> BatteryRecord:
    try:
        cycles = [DischargeCycle(c["cycle_index"], c["voltage"], c["capacity"]) for c in doc["cycles"]]
        return BatteryRecord(doc["id"], doc["nominal_capacity"], doc.get("charge_protocol", ""), cycles)
    except (KeyError, TypeError) as exc:
        raise SchemaError(f"malformed battery document: {exc}") from None


def write_battery_json(battery: BatteryRecord, path) -> None:
    Path(path).write_text(json.dumps(battery_to_dict(battery)) + "\n")


def read_battery_json(path) -> BatteryRecord:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: {exc.msg}", row=exc.lineno) from None
    return battery_from_dict(doc)


def fingerprint(battery: BatteryRecord) -> str:
    """SHA-256 over the exact numeric content of a battery."""
    h = hashlib.sha256()
    h.update(json.dumps([battery.id, battery.nominal_capacity, battery.charge_protocol]).encode())
    for c in battery.cycles:
        h.update(np.int64(c.cycle_index).tobytes())
        h.update(np.float64(c.capacity).tobytes())
        h.update(np.ascontiguousarray(c.voltage, dtype="<f8").tobytes())
    return h.hexdigest()


# -- synthetic generator ---------------------------------------------------

V_START = 3.3
V_END = 2.0


@dataclass(frozen=True)
class SynthProfile:
    """Piecewise-linear capacity fade with a knee, constant-current discharge curves.

    ``fade_rate_pre`` and ``fade_rate_post`` are in Ah per cycle before and
    after ``knee_cycle``. ``base_cycle_length`` is the number of voltage
    samples of a cycle delivering ``initial_capacity``.
    """

    initial_capacity: float = 1.1
    knee_cycle: int = 60
    fade_rate_pre: float = 3e-4
    fade_rate_post: float = 3e-3
    noise_std: float = 0.0005
    base_cycle_length: int = 128
    seed: int = 0
    n_cycles: int = 120
    battery_id: str = "SYN"
    nominal_capacity: float = DEFAULT_NOMINAL_CAPACITY
    charge_protocol: str = "synthetic"

    def __post_init__(self):
        if self.knee_cycle < 1:
            raise InvalidInput("knee_cycle must be >= 1")
        if self.noise_std < 0:
            raise InvalidInput("noise_std must be >= 0")
        if self.base_cycle_length < 16:
            raise InvalidInput("base_cycle_length must be >= 16")
        if self.n_cycles < 1:
            raise InvalidInput("n_cycles must be >= 1")
        if self.fade_rate_pre < 0 or self.fade_rate_post < 0:
            raise InvalidInput("fade rates must be >= 0")
        if not 0 < self.initial_capacity <= 2 * self.nominal_capacity:
            raise InvalidInput("initial_capacity must be in (0, 2*nominal]")
        if mean_capacity(self, self.n_cycles) <= 0:
            raise InvalidInput("profile fades to non-positive capacity before the last cycle")

    @classmethod
    def from_dict(cls, doc: dict) -> "SynthProfile":
        unknown = set(doc) - set(cls.__dataclass_fields__)
        if unknown:
            raise SchemaError(f"unknown profile fields: {sorted(unknown)}")
        return cls(**doc)

    def to_dict(self) -> dict:
        return asdict(self)


def mean_capacity(profile: SynthProfile, k) -> np.ndarray | float:
    """Closed-form capacity of cycle ``k`` (1-based)."""
    k = np.asarray(k, dtype=float)
    pre = np.minimum(k, profile.knee_cycle) - 1
    post = np.maximum(k - profile.knee_cycle, 0)
    cap = profile.initial_capacity - profile.fade_rate_pre * pre - profile.fade_rate_post * post
    return cap if cap.ndim else float(cap)


def cycle_length(profile: SynthProfile, capacity: float) -> int:
    n = int(round(profile.base_cycle_length * capacity / profile.initial_capacity))
    return max(n, 2)


def synth_battery(profile: SynthProfile) -> BatteryRecord:
    rng = np.random.default_rng(profile.seed)
    lo, hi = VOLTAGE_BOUNDS
    cycles = []
    for k in range(1, profile.n_cycles + 1):
        cap = mean_capacity(profile, k)
        n = cycle_length(profile, cap)
        v = np.linspace(V_START, V_END, n)
        if profile.noise_std > 0:
            v = v + rng.normal(0.0, profile.noise_std, n)
        cycles.append(DischargeCycle(k, np.clip(v, lo, hi), cap))
    return BatteryRecord(profile.battery_id, profile.nominal_capacity, profile.charge_protocol, cycles)
