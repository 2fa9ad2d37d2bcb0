"""Synthetic cohorts with known stage paths and attention.

Three transition regimes:

``markov``
    Continuous-time pure-birth chain sampled from birth; visit states are read
    off the path.
``fixed_mixture``
    Attentive transitions with constant weights by lag. A draw below the
    current stage is lifted to the current stage so paths stay monotone.
``treatment_memory``
    The transition into visit m uses the one-step kernel from the current
    stage. If some earlier visit was treatment-active, 0.8 of the attention goes
    to the most recent such visit and that component's rates are multiplied by
    ``treatment_effect`` (0.2 stays on the previous visit at baseline rates; a
    treated previous visit gets all the weight). With a multiplier of 1 this is
    exactly the Markov chain.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import stats

from .ctmc import GeneratorMatrix, kernels, sample_path, state_at
from .data import BinaryChannel, Channel, Cohort, FeatureSchema, PatientRecord, StaticChannel, Visit

MODES = ("markov", "fixed_mixture", "treatment_memory")


@dataclass(frozen=True)
class ContinuousTruth:
    name: str
    means: tuple[float, ...]
    sds: tuple[float, ...]
    unit: str = ""


@dataclass(frozen=True)
class BinaryTruth:
    name: str
    probs: tuple[float, ...]
    role: str = "other"


@dataclass(frozen=True)
class ScenarioConfig:
    D: int = 3
    rates: tuple[float, ...] = (0.0578, 0.0691)
    continuous: tuple[ContinuousTruth, ...] = (
        ContinuousTruth("fev1", (87.0, 65.0, 36.0), (7.0, 7.0, 7.0), "% predicted"),
        ContinuousTruth("bmi", (21.0, 19.5, 18.0), (2.0, 2.0, 2.0), "kg/m2"),
    )
    binary: tuple[BinaryTruth, ...] = (
        BinaryTruth("ivacaftor", (0.2, 0.2, 0.2), "treatment"),
        BinaryTruth("diabetes", (0.05, 0.25, 0.6), "anchor"),
        BinaryTruth("abpa", (0.03, 0.1, 0.3), "anchor"),
        BinaryTruth("pseudomonas", (0.2, 0.45, 0.7), "infection"),
    )
    statics: tuple[tuple[str, str], ...] = (("sex", "indicator"), ("f508del_homozygous", "indicator"))
    n_patients: int = 500
    max_visits: int = 10
    mean_gap: float = 1.0
    gap_shape: float = 2.0
    start_age: tuple[float, float] = (1.0, 25.0)
    max_age: float = 80.0
    missingness: float = 0.0
    dynamics_mode: str = "markov"
    mixture_weights: tuple[float, ...] = (0.6, 0.25, 0.15)
    treatment_channel: str = "ivacaftor"
    treatment_effect: float = 3.0
    memory_weight: float = 0.8
    death_mean: float | None = 2.0
    seed: int = 0

    def __post_init__(self):
        if self.D < 2 or len(self.rates) != self.D - 1:
            raise ValueError("need D >= 2 and D - 1 rates")
        if any(r < 0 for r in self.rates):
            raise ValueError("rates must be nonnegative")
        for c in self.continuous:
            if len(c.means) != self.D or len(c.sds) != self.D or min(c.sds) <= 0:
                raise ValueError(f"channel {c.name}: need D means and positive sds")
        for b in self.binary:
            if len(b.probs) != self.D or not all(0 <= p <= 1 for p in b.probs):
                raise ValueError(f"channel {b.name}: need D probabilities in [0, 1]")
        if not self.mean_gap > 0 or not self.gap_shape > 0:
            raise ValueError("visit gaps must have positive mean and shape")
        if not 0 <= self.missingness < 1:
            raise ValueError("missingness must lie in [0, 1)")
        if self.dynamics_mode not in MODES:
            raise ValueError(f"dynamics_mode must be one of {MODES}")
        if not self.treatment_effect > 0:
            raise ValueError("treatment_effect must be positive")
        if self.dynamics_mode == "treatment_memory" and self.treatment_channel not in [b.name for b in self.binary]:
            raise ValueError(f"treatment channel {self.treatment_channel!r} is not a binary channel")
        if self.n_patients < 0 or self.max_visits < 1:
            raise ValueError("need n_patients >= 0 and max_visits >= 1")

    @property
    def schema(self) -> FeatureSchema:
        return FeatureSchema(
            continuous=tuple(Channel(c.name, c.unit) for c in self.continuous),
            binary=tuple(BinaryChannel(b.name, b.role) for b in self.binary),
            static=tuple(StaticChannel(n, k) for n, k in self.statics),
        )

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, obj: dict) -> "ScenarioConfig":
        obj = dict(obj)
        if "continuous" in obj:
            obj["continuous"] = tuple(ContinuousTruth(c["name"], tuple(c["means"]), tuple(c["sds"]), c.get("unit", ""))
                                      for c in obj["continuous"])
        if "binary" in obj:
            obj["binary"] = tuple(BinaryTruth(b["name"], tuple(b["probs"]), b.get("role", "other"))
                                  for b in obj["binary"])
        for key in ("rates", "start_age", "mixture_weights"):
            if key in obj:
                obj[key] = tuple(obj[key])
        if "statics" in obj:
            obj["statics"] = tuple(tuple(s) for s in obj["statics"])
        return cls(**obj)


@dataclass
class Simulation:
    cohort: Cohort
    paths: dict[str, np.ndarray]
    attention: dict[str, list[np.ndarray]]
    terminal_entry: dict[str, float | None]
    config: ScenarioConfig
    onsets: dict[str, list] = field(default_factory=dict)

    def truth_json(self) -> dict:
        return {
            "config": self.config.to_json(),
            "patients": [
                {
                    "id": p.id,
                    "states": [int(z) for z in self.paths[p.id]],
                    "attention": [[float(a) for a in w] for w in self.attention[p.id]],
                    "terminal_entry": self.terminal_entry[p.id],
                }
                for p in self.cohort.patients
            ],
        }

    def dumps_truth(self) -> str:
        return json.dumps(self.truth_json(), indent=1) + "\n"


def _visit_times(cfg: ScenarioConfig, rng: np.random.Generator) -> np.ndarray:
    t = rng.uniform(*cfg.start_age)
    times = [t]
    scale = cfg.mean_gap / cfg.gap_shape
    while len(times) < cfg.max_visits:
        t = t + rng.gamma(cfg.gap_shape, scale)
        if t > cfg.max_age:
            break
        times.append(t)
    return np.array(times)


def _sample(rng: np.random.Generator, p: np.ndarray) -> int:
    p = np.clip(p, 0.0, None)
    return int(rng.choice(p.size, p=p / p.sum()))


def _observations(cfg: ScenarioConfig, z: int, rng: np.random.Generator) -> dict:
    values = {}
    for c in cfg.continuous:
        x = float(rng.normal(c.means[z], c.sds[z]))
        if rng.random() >= cfg.missingness:
            values[c.name] = x
    for b in cfg.binary:
        x = int(rng.random() < b.probs[z])
        if b.name == cfg.treatment_channel or rng.random() >= cfg.missingness:
            values[b.name] = x
    return values


def _memory_weights(cfg: ScenarioConfig, treated: list[bool]) -> np.ndarray:
    n = len(treated)
    w = np.zeros(n)
    hits = [k for k in range(n) if treated[k]]
    if not hits or hits[-1] == n - 1:
        w[-1] = 1.0
    else:
        w[hits[-1]] = cfg.memory_weight
        w[-1] = 1.0 - cfg.memory_weight
    return w


def _simulate_patient(cfg: ScenarioConfig, pid: str, rng: np.random.Generator):
    gen = GeneratorMatrix(cfg.rates)
    D = cfg.D
    statics = {}
    for name, kind in cfg.statics:
        statics[name] = int(rng.random() < 0.5) if kind == "indicator" else float(rng.normal())
    times = _visit_times(cfg, rng)
    M = times.size
    states = np.zeros(M, dtype=int)
    attention: list[np.ndarray] = []
    onsets = []
    entry = None
    values: list[dict] = []
    rates = np.asarray(cfg.rates)
    if cfg.dynamics_mode == "markov":
        onsets = sample_path(gen, times[-1] + 1.0, rng)
        for m, t in enumerate(times):
            states[m] = state_at(onsets, t)
            values.append(_observations(cfg, states[m], rng))
            if m:
                attention.append(np.eye(m)[-1])
        if onsets[-1][1] == D - 1:
            entry = onsets[-1][0]
    else:
        states[0] = _sample(rng, kernels(rates, np.array([times[0]]))[0, 0])
        values.append(_observations(cfg, states[0], rng))
        for m in range(1, M):
            if cfg.dynamics_mode == "fixed_mixture":
                lw = np.array(cfg.mixture_weights[:m])
                w = np.zeros(m)
                w[m - lw.size:] = lw[::-1]
                w /= w.sum()
                K = kernels(rates, times[m] - times[:m])
                p = w @ K[np.arange(m), states[:m]]
                z = max(_sample(rng, p), states[m - 1])
            else:
                treated = [v.get(cfg.treatment_channel) == 1 for v in values]
                w = _memory_weights(cfg, treated)
                dt = times[m] - times[m - 1]
                base = kernels(rates, np.array([dt]))[0, states[m - 1]]
                fast = kernels(rates * cfg.treatment_effect, np.array([dt]))[0, states[m - 1]]
                hits = [k for k in range(m) if treated[k]]
                p = base if not hits else (w[-1] * fast if hits[-1] == m - 1 else w[hits[-1]] * fast + w[-1] * base)
                z = _sample(rng, p)
            states[m] = z
            attention.append(w)
            values.append(_observations(cfg, z, rng))
        first = np.flatnonzero(states == D - 1)
        if first.size:
            k = int(first[0])
            lo = times[k - 1] if k else max(0.0, times[0] - cfg.mean_gap)
            entry = float(rng.uniform(lo, times[k]))
    death = None
    if cfg.death_mean is not None and entry is not None:
        death = float(entry + rng.exponential(cfg.death_mean))
        keep = int(np.sum(times <= death))
        if keep == 0:
            return None
        times, states, values = times[:keep], states[:keep], values[:keep]
        attention = attention[:keep - 1]
    record = PatientRecord(pid, tuple(Visit(float(t), v) for t, v in zip(times, values)), statics, death)
    return record, states, attention, entry, onsets


def simulate_cohort(cfg: ScenarioConfig) -> Simulation:
    """Generate ``cfg.n_patients`` records with ground truth.

    Each patient draws from its own child seed. Patients who die before their
    first visit are redrawn from the next seed, so the cohort describes people
    alive at enrolment.
    """
    seeds = np.random.SeedSequence(cfg.seed)
    patients, paths, attention, entries, onsets = [], {}, {}, {}, {}
    width = max(4, len(str(cfg.n_patients)))
    while len(patients) < cfg.n_patients:
        pid = f"P{len(patients) + 1:0{width}d}"
        rng = np.random.default_rng(seeds.spawn(1)[0])
        out = _simulate_patient(cfg, pid, rng)
        if out is None:
            continue
        record, states, att, entry, path = out
        patients.append(record)
        paths[pid] = states
        attention[pid] = att
        entries[pid] = entry
        onsets[pid] = path
    return Simulation(Cohort(cfg.schema, tuple(patients)), paths, attention, entries, cfg, onsets)


def chi_square_markov_test(cohort: Cohort, paths: dict[str, np.ndarray], covariate: str | None = None,
                           min_count: int = 5) -> tuple[float, int, float]:
    """Test whether the next stage depends on history beyond the current stage.

    Transitions ``z_{m-1} -> z_m`` are stratified by ``z_{m-1}``; within a
    stratum the table of history key ``z_{m-2}`` (paired with "covariate seen
    active at any visit before m" when ``covariate`` is given) against ``z_m``
    is tested for independence. Returns the pooled chi-square statistic,
    degrees of freedom and p-value.
    """
    tables: dict = {}
    for p in cohort.patients:
        z = paths[p.id]
        seen = False
        for m in range(len(z)):
            if m >= 2:
                key = (int(z[m - 2]), seen) if covariate else int(z[m - 2])
                stratum = tables.setdefault(int(z[m - 1]), {})
                row = stratum.setdefault(key, {})
                row[int(z[m])] = row.get(int(z[m]), 0) + 1
            if covariate and p.visits[m].values.get(covariate) == 1:
                seen = True
    stat, dof = 0.0, 0
    for stratum in tables.values():
        rows = sorted(stratum)
        cols = sorted({c for r in stratum.values() for c in r})
        table = np.array([[stratum[r].get(c, 0) for c in cols] for r in rows], dtype=float)
        table = table[table.sum(axis=1) >= min_count]
        if table.size == 0:
            continue
        table = table[:, table.sum(axis=0) > 0]
        if table.shape[0] < 2 or table.shape[1] < 2:
            continue
        expected = table.sum(axis=1, keepdims=True) * table.sum(axis=0, keepdims=True) / table.sum()
        stat += float(((table - expected) ** 2 / expected).sum())
        dof += (table.shape[0] - 1) * (table.shape[1] - 1)
    if dof == 0:
        raise ValueError("insufficient transition counts for a Markov-order test")
    return stat, dof, float(stats.chi2.sf(stat, dof))


def hypoexponential_cdf(rates, t: float) -> float:
    """P(sum of independent exponentials with distinct ``rates`` <= t)."""
    rates = [float(r) for r in rates]
    total = 0.0
    for i, ri in enumerate(rates):
        coef = 1.0
        for j, rj in enumerate(rates):
            if j != i:
                coef *= rj / (rj - ri)
        total += coef * math.exp(-ri * t)
    return 1.0 - total
