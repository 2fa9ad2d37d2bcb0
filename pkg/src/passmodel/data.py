"""Patient records, cohorts, feature schemas and the JSON-lines cohort format.

Times are chronological ages in years. Missing measurements are kept as absent
keys in ``Visit.values``; nothing is imputed here.
"""

from __future__ import annotations

import json
import math
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

BINARY_ROLES = ("treatment", "anchor", "infection", "other")
STATIC_KINDS = ("real", "indicator")


class CohortError(ValueError):
    """Raised for malformed cohort files or records violating the schema."""


@dataclass(frozen=True)
class Channel:
    name: str
    unit: str = ""


@dataclass(frozen=True)
class BinaryChannel:
    name: str
    role: str = "other"

    def __post_init__(self):
        if self.role not in BINARY_ROLES:
            raise CohortError(f"binary channel {self.name!r}: unknown role {self.role!r}")


@dataclass(frozen=True)
class StaticChannel:
    name: str
    kind: str = "real"

    def __post_init__(self):
        if self.kind not in STATIC_KINDS:
            raise CohortError(f"static channel {self.name!r}: unknown kind {self.kind!r}")


@dataclass(frozen=True)
class FeatureSchema:
    continuous: tuple[Channel, ...] = ()
    binary: tuple[BinaryChannel, ...] = ()
    static: tuple[StaticChannel, ...] = ()

    def __post_init__(self):
        names = self.continuous_names + self.binary_names + self.static_names
        seen = set()
        for n in names:
            if n in seen:
                raise CohortError(f"duplicate channel name {n!r}")
            seen.add(n)

    @property
    def continuous_names(self) -> tuple[str, ...]:
        return tuple(c.name for c in self.continuous)

    @property
    def binary_names(self) -> tuple[str, ...]:
        return tuple(c.name for c in self.binary)

    @property
    def static_names(self) -> tuple[str, ...]:
        return tuple(c.name for c in self.static)

    def channels_with_role(self, role: str) -> tuple[str, ...]:
        return tuple(c.name for c in self.binary if c.role == role)

    @property
    def input_dim(self) -> int:
        return len(self.static) + 2 * len(self.continuous) + 2 * len(self.binary) + 1

    def to_json(self) -> dict:
        return {
            "continuous": [{"name": c.name, "unit": c.unit} for c in self.continuous],
            "binary": [{"name": c.name, "role": c.role} for c in self.binary],
            "static": [{"name": c.name, "kind": c.kind} for c in self.static],
        }

    @classmethod
    def from_json(cls, obj: Mapping) -> "FeatureSchema":
        try:
            return cls(
                continuous=tuple(Channel(c["name"], c.get("unit", "")) for c in obj.get("continuous", [])),
                binary=tuple(BinaryChannel(c["name"], c.get("role", "other")) for c in obj.get("binary", [])),
                static=tuple(StaticChannel(c["name"], c.get("kind", "real")) for c in obj.get("static", [])),
            )
        except (KeyError, TypeError) as exc:
            raise CohortError(f"malformed schema: {exc}") from exc


@dataclass(frozen=True)
class Visit:
    time: float
    values: dict = field(default_factory=dict)


@dataclass(frozen=True)
class PatientRecord:
    id: str
    visits: tuple[Visit, ...]
    statics: dict = field(default_factory=dict)
    death_time: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "visits", tuple(self.visits))
        times = [v.time for v in self.visits]
        for t in times:
            if not (math.isfinite(t) and t >= 0):
                raise CohortError(f"patient {self.id}: invalid visit time {t!r}")
        for a, b in zip(times, times[1:]):
            if not b > a:
                raise CohortError(f"patient {self.id}: visit times not strictly increasing ({a} then {b})")
        if self.death_time is not None and times and self.death_time < times[-1]:
            raise CohortError(f"patient {self.id}: death_time {self.death_time} precedes last visit")

    @property
    def times(self) -> np.ndarray:
        return np.array([v.time for v in self.visits], dtype=float)

    def __len__(self) -> int:
        return len(self.visits)

    def with_value(self, m: int, channel: str, value) -> "PatientRecord":
        """Copy of the record with one visit value replaced."""
        visits = list(self.visits)
        values = dict(visits[m].values)
        values[channel] = value
        visits[m] = Visit(visits[m].time, values)
        return PatientRecord(self.id, tuple(visits), dict(self.statics), self.death_time)


@dataclass(frozen=True)
class Cohort:
    schema: FeatureSchema
    patients: tuple[PatientRecord, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "patients", tuple(self.patients))
        ids = set()
        for p in self.patients:
            if p.id in ids:
                raise CohortError(f"duplicate patient id {p.id!r}")
            ids.add(p.id)
            validate_record(self.schema, p)

    def __len__(self) -> int:
        return len(self.patients)

    def __iter__(self):
        return iter(self.patients)

    def subset(self, ids: Iterable[str]) -> "Cohort":
        keep = set(ids)
        return Cohort(self.schema, tuple(p for p in self.patients if p.id in keep))

    def get(self, pid: str) -> PatientRecord:
        for p in self.patients:
            if p.id == pid:
                return p
        raise KeyError(pid)


def validate_record(schema: FeatureSchema, record: PatientRecord) -> None:
    cont = set(schema.continuous_names)
    binary = set(schema.binary_names)
    statics = {c.name: c.kind for c in schema.static}
    for name, value in record.statics.items():
        if name not in statics:
            raise CohortError(f"patient {record.id}: unknown static channel {name!r}")
        if statics[name] == "indicator" and value not in (0, 1):
            raise CohortError(f"patient {record.id}: static {name!r} must be 0/1, got {value!r}")
        if not _finite(value):
            raise CohortError(f"patient {record.id}: static {name!r} is not finite")
    for v in record.visits:
        for name, value in v.values.items():
            if name in cont:
                if not _finite(value):
                    raise CohortError(f"patient {record.id}: channel {name!r} at t={v.time} is not finite")
            elif name in binary:
                if isinstance(value, bool) or value not in (0, 1):
                    raise CohortError(f"patient {record.id}: channel {name!r} at t={v.time} must be 0/1, got {value!r}")
            else:
                raise CohortError(f"patient {record.id}: unknown channel {name!r}")


def _finite(x) -> bool:
    return isinstance(x, (int, float)) and not isinstance(x, bool) and math.isfinite(x)


def augmented_input(schema: FeatureSchema, record: PatientRecord, j: int) -> np.ndarray:
    """Network input for visit ``j`` (0-based).

    Layout: statics, (value, presence) for every continuous channel, (value,
    presence) for every binary channel, then the visit age. Absent entries are
    encoded as value 0 with presence 0.
    """
    if not 0 <= j < len(record.visits):
        raise IndexError(f"visit index {j} out of range for patient {record.id} with {len(record)} visits")
    visit = record.visits[j]
    out = np.zeros(schema.input_dim)
    i = 0
    for c in schema.static:
        out[i] = record.statics.get(c.name, 0.0)
        i += 1
    for name in schema.continuous_names + schema.binary_names:
        if name in visit.values:
            out[i] = visit.values[name]
            out[i + 1] = 1.0
        i += 2
    out[i] = visit.time
    return out


def record_inputs(schema: FeatureSchema, record: PatientRecord) -> np.ndarray:
    """All augmented inputs for a record, shape (M, input_dim)."""
    return np.stack([augmented_input(schema, record, j) for j in range(len(record))]) if len(record) else (
        np.zeros((0, schema.input_dim)))


# -- serialization -----------------------------------------------------------

def _record_to_json(p: PatientRecord) -> dict:
    obj = {"id": p.id, "statics": dict(p.statics)}
    if p.death_time is not None:
        obj["death_time"] = p.death_time
    obj["visits"] = [{"t": v.time, "values": dict(v.values)} for v in p.visits]
    return obj


def _record_from_json(obj: Mapping, lineno: int) -> PatientRecord:
    try:
        visits = tuple(Visit(float(v["t"]), dict(v.get("values", {}))) for v in obj["visits"])
        death = obj.get("death_time")
        return PatientRecord(
            id=str(obj["id"]),
            visits=visits,
            statics=dict(obj.get("statics", {})),
            death_time=None if death is None else float(death),
        )
    except CohortError:
        raise
    except (KeyError, TypeError, ValueError) as exc:
        raise CohortError(f"line {lineno}: malformed patient record ({exc})") from exc


def dumps_cohort(cohort: Cohort) -> str:
    lines = [json.dumps({"schema": cohort.schema.to_json()}, allow_nan=False)]
    lines += [json.dumps(_record_to_json(p), allow_nan=False) for p in cohort.patients]
    return "\n".join(lines) + "\n"


def save_cohort(cohort: Cohort, path: str | os.PathLike) -> None:
    atomic_write_text(path, dumps_cohort(cohort))


def load_cohort(path: str | os.PathLike) -> Cohort:
    path = Path(path)
    schema = None
    patients = []
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise CohortError(f"line {lineno}: parse error: {exc.msg}") from exc
            if schema is None:
                if not isinstance(obj, dict) or "schema" not in obj:
                    raise CohortError(f"line {lineno}: expected schema header")
                schema = FeatureSchema.from_json(obj["schema"])
                continue
            try:
                record = _record_from_json(obj, lineno)
                validate_record(schema, record)
            except CohortError as exc:
                msg = str(exc)
                raise CohortError(msg if msg.startswith("line") else f"line {lineno}: {msg}") from exc
            patients.append(record)
    if schema is None:
        raise CohortError(f"{path}: empty cohort file (no schema header)")
    return Cohort(schema, tuple(patients))


def atomic_write_text(path: str | os.PathLike, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
