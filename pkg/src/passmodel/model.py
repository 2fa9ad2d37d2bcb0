"""The attentive state-space model: emissions, attentive transitions, likelihood.

The transition into visit ``m`` mixes kernel rows from every earlier visit:

    P(z_m = z | history) = sum_k alpha[k] * exp((t_m - t_k) Lambda)[z_k, z]

where ``alpha`` comes from an attention provider. The phased network is the
full model; the fixed providers below give the classical special cases
(first-order HMM, lag-k Markov, fixed-weight autoregressive mixture).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence, Union

import numpy as np

from .attention import AttentionNetParams, attention_forward, build_batch
from .ctmc import GeneratorMatrix, kernels
from .data import FeatureSchema, PatientRecord, record_inputs

VAR_FLOOR = 1e-4
PROB_FLOOR = 1e-4
_LOG2PI = math.log(2.0 * math.pi)


# -- attention providers -----------------------------------------------------

@dataclass(frozen=True)
class LastVisitAttention:
    """All weight on the most recent visit: the continuous-time HMM."""

    def weights(self, n: int) -> np.ndarray:
        w = np.zeros(n)
        w[-1] = 1.0
        return w


@dataclass(frozen=True)
class LagAttention:
    """All weight on the visit ``lag`` steps back (the oldest one if the history is shorter)."""

    lag: int = 1

    def __post_init__(self):
        if self.lag < 1:
            raise ValueError("lag must be >= 1")

    def weights(self, n: int) -> np.ndarray:
        w = np.zeros(n)
        w[max(0, n - self.lag)] = 1.0
        return w


@dataclass(frozen=True)
class FixedAttention:
    """Constant weights by lag (``lag_weights[0]`` is the most recent visit).

    Lags beyond the available history are dropped and the rest renormalized.
    """

    lag_weights: tuple[float, ...] = (1.0,)

    def __post_init__(self):
        w = tuple(float(x) for x in self.lag_weights)
        if not w or any(x < 0 for x in w) or w[0] <= 0:
            raise ValueError("lag weights must be nonnegative with a positive lag-1 weight")
        object.__setattr__(self, "lag_weights", w)

    def weights(self, n: int) -> np.ndarray:
        lw = np.array(self.lag_weights[:n])
        w = np.zeros(n)
        w[n - lw.size:] = lw[::-1]
        return w / w.sum()


FixedProvider = Union[LastVisitAttention, LagAttention, FixedAttention]
AttentionProvider = Union[AttentionNetParams, FixedProvider]


# -- parameters --------------------------------------------------------------

@dataclass
class EmissionParams:
    """Per-state Gaussian (diagonal) and Bernoulli emission parameters.

    ``mean``/``var`` are (D, n_continuous); ``prob`` is (D, n_binary).
    """

    mean: np.ndarray
    var: np.ndarray
    prob: np.ndarray

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=float)
        self.var = np.maximum(np.asarray(self.var, dtype=float), VAR_FLOOR)
        self.prob = np.clip(np.asarray(self.prob, dtype=float), PROB_FLOOR, 1.0 - PROB_FLOOR)
        if self.mean.shape != self.var.shape or self.mean.shape[0] != self.prob.shape[0]:
            raise ValueError("inconsistent emission parameter shapes")

    @property
    def D(self) -> int:
        return self.mean.shape[0]

    def copy(self) -> "EmissionParams":
        return EmissionParams(self.mean.copy(), self.var.copy(), self.prob.copy())


@dataclass
class ModelParams:
    schema: FeatureSchema
    gen: GeneratorMatrix
    emis: EmissionParams
    attn: AttentionProvider = field(default_factory=LastVisitAttention)

    def __post_init__(self):
        if self.emis.D != self.gen.D:
            raise ValueError(f"emissions have {self.emis.D} states, generator has {self.gen.D}")
        if self.emis.mean.shape[1] != len(self.schema.continuous):
            raise ValueError("emission means do not match the continuous channels")
        if self.emis.prob.shape[1] != len(self.schema.binary):
            raise ValueError("emission probabilities do not match the binary channels")
        if isinstance(self.attn, AttentionNetParams) and self.attn.input_dim != self.schema.input_dim:
            raise ValueError("attention network input size does not match the schema")

    @property
    def D(self) -> int:
        return self.gen.D

    @property
    def rates(self) -> np.ndarray:
        return self.gen.rate_array

    def replace(self, **changes) -> "ModelParams":
        kw = dict(schema=self.schema, gen=self.gen, emis=self.emis, attn=self.attn)
        kw.update(changes)
        return ModelParams(**kw)


# -- per-record arrays -------------------------------------------------------

@dataclass
class PreparedRecord:
    record: PatientRecord
    times: np.ndarray
    inputs: np.ndarray          # (M, input_dim) augmented network inputs
    cont: np.ndarray            # (M, C), NaN where missing
    binv: np.ndarray            # (M, B), NaN where missing

    def __len__(self) -> int:
        return self.times.size


def prepare(schema: FeatureSchema, record: PatientRecord) -> PreparedRecord:
    M = len(record)
    cont = np.full((M, len(schema.continuous)), np.nan)
    binv = np.full((M, len(schema.binary)), np.nan)
    for m, v in enumerate(record.visits):
        for c, name in enumerate(schema.continuous_names):
            if name in v.values:
                cont[m, c] = v.values[name]
        for b, name in enumerate(schema.binary_names):
            if name in v.values:
                binv[m, b] = v.values[name]
    return PreparedRecord(record, record.times, record_inputs(schema, record), cont, binv)


def emission_matrix(model: ModelParams, prep: PreparedRecord) -> np.ndarray:
    """Log emission densities, shape (M, D). Missing channels contribute 0."""
    e = model.emis
    out = np.zeros((len(prep), e.D))
    if e.mean.shape[1]:
        x = prep.cont[:, None, :]
        obs = ~np.isnan(x)
        terms = -0.5 * (_LOG2PI + np.log(e.var)[None] + (x - e.mean[None]) ** 2 / e.var[None])
        out += np.where(obs, terms, 0.0).sum(axis=2)
    if e.prob.shape[1]:
        x = prep.binv[:, None, :]
        obs = ~np.isnan(x)
        terms = np.where(x == 1, np.log(e.prob)[None], np.log1p(-e.prob)[None])
        out += np.where(obs, terms, 0.0).sum(axis=2)
    return out


def emission_loglik(model: ModelParams, visit, z: int) -> float:
    """Log density of one visit's observed channels under state ``z``."""
    if not 0 <= z < model.D:
        raise IndexError(f"state {z} out of range")
    e = model.emis
    total = 0.0
    for c, name in enumerate(model.schema.continuous_names):
        if name in visit.values:
            x = visit.values[name]
            total += -0.5 * (_LOG2PI + math.log(e.var[z, c]) + (x - e.mean[z, c]) ** 2 / e.var[z, c])
    for b, name in enumerate(model.schema.binary_names):
        if name in visit.values:
            p = e.prob[z, b]
            total += math.log(p) if visit.values[name] == 1 else math.log1p(-p)
    return total


# -- attention over histories ------------------------------------------------

def history_weights(model: ModelParams, record: PatientRecord, n: int, t_target: float,
                    prep: PreparedRecord | None = None) -> np.ndarray:
    """Attention over visits ``0..n-1`` for a transition landing at ``t_target``."""
    if n < 1:
        raise ValueError("history must contain at least one visit")
    if not isinstance(model.attn, AttentionNetParams):
        return model.attn.weights(n)
    prep = prep or prepare(model.schema, record)
    batch = build_batch([(prep.inputs[:n], prep.times[:n], t_target)])
    return attention_forward(model.attn, batch).weights(0)


def batch_history_weights(model: ModelParams, items: Sequence[tuple[PreparedRecord, int, float]],
                          chunk: int = 8192) -> list[np.ndarray]:
    """``history_weights`` for many ``(prepared, n, t_target)`` queries in one network pass."""
    if not isinstance(model.attn, AttentionNetParams):
        return [model.attn.weights(n) for _, n, _ in items]
    out: list[np.ndarray] = []
    for start in range(0, len(items), chunk):
        part = items[start:start + chunk]
        batch = build_batch([(p.inputs[:n], p.times[:n], t) for p, n, t in part])
        res = attention_forward(model.attn, batch)
        out += [res.weights(i) for i in range(len(part))]
    return out


def transition_attention(model: ModelParams, preps: Sequence[PreparedRecord]) -> list[list[np.ndarray]]:
    """For each record, the weights of every transition ``m = 1..M-1``."""
    items = [(p, m, p.times[m]) for p in preps for m in range(1, len(p))]
    flat = batch_history_weights(model, items)
    out, i = [], 0
    for p in preps:
        out.append(flat[i:i + len(p) - 1])
        i += len(p) - 1
    return out


def query_attention(model: ModelParams, preps: Sequence[PreparedRecord], horizon: float) -> list[list[np.ndarray]]:
    """For each record and visit ``m``, weights over visits ``0..m`` for time ``t_m + horizon``."""
    items = [(p, m + 1, p.times[m] + horizon) for p in preps for m in range(len(p))]
    flat = batch_history_weights(model, items)
    out, i = [], 0
    for p in preps:
        out.append(flat[i:i + len(p)])
        i += len(p)
    return out


def truncate_weights(weights: np.ndarray, q: int | None) -> np.ndarray:
    """Keep the ``q`` most recent weights and renormalize."""
    weights = np.asarray(weights, dtype=float)
    if q is None or q >= weights.size:
        return weights
    kept = weights[-q:]
    total = kept.sum()
    if not total > 0:
        raise ValueError(f"attention puts no mass on the last {q} visits; increase the truncation lag")
    return kept / total


# -- probabilities -----------------------------------------------------------

def initial_distribution(model: ModelParams, t1: float) -> np.ndarray:
    """Law of the baseline chain started in state 0 at birth, observed at age ``t1``."""
    if not t1 >= 0:
        raise ValueError("first visit time must be >= 0")
    return kernels(model.rates, np.array([t1]))[0, 0]


def mixture_row(rates: np.ndarray, weights: np.ndarray, sources: Sequence[int], lags: np.ndarray) -> np.ndarray:
    K = kernels(rates, lags)
    rows = K[np.arange(len(sources)), np.asarray(sources, dtype=int)]
    return np.minimum(weights @ rows, 1.0)


def transition_prob(model: ModelParams, record: PatientRecord, m: int, prefix: Sequence[int],
                    q: int | None = None, weights: np.ndarray | None = None) -> np.ndarray:
    """Distribution of the state at visit ``m`` given states at visits ``0..m-1``.

    ``q`` truncates the mixture to the ``q`` most recent visits (weights
    renormalized); ``weights`` overrides the attention provider.
    """
    if not 1 <= m < len(record):
        raise IndexError(f"transition target {m} out of range [1, {len(record) - 1}]")
    prefix = [int(z) for z in prefix]
    if len(prefix) < m:
        raise ValueError(f"need states for the {m} visits before visit {m}")
    prefix = prefix[:m]
    if any(not 0 <= z < model.D for z in prefix):
        raise ValueError(f"invalid state indices {prefix}")
    times = record.times
    if weights is None:
        weights = history_weights(model, record, m, times[m])
    w = truncate_weights(weights, q)
    k0 = m - w.size
    return mixture_row(model.rates, w, prefix[k0:], times[m] - times[k0:m])


def complete_loglik(model: ModelParams, record: PatientRecord, path: Sequence[int], q: int | None = None,
                    attention: Sequence[np.ndarray] | None = None) -> float:
    """Joint log density of the observations and a state path.

    Sums the initial-state term, every emission and every attentive transition.
    """
    path = [int(z) for z in path]
    if len(path) != len(record):
        raise ValueError(f"path length {len(path)} != number of visits {len(record)}")
    prep = prepare(model.schema, record)
    E = emission_matrix(model, prep)
    total = _log(initial_distribution(model, prep.times[0])[path[0]]) + E[0, path[0]]
    if attention is None and len(record) > 1:
        attention = transition_attention(model, [prep])[0]
    for m in range(1, len(record)):
        p = transition_prob(model, record, m, path[:m], q=q, weights=attention[m - 1])[path[m]]
        total += _log(p) + E[m, path[m]]
    return total


def _log(p: float) -> float:
    return math.log(p) if p > 0 else -math.inf


def what_if_toggle(model: ModelParams, record: PatientRecord, m: int, channel: str, horizon: float = 1.0,
                   cfg=None) -> dict:
    """Terminal-state risk at ``t_m + horizon`` with a binary channel forced off and on at visit ``m``.

    Returns risks and the query attention profiles (over visits ``0..m``) of both scenarios.
    """
    from .inference import InferenceConfig, state_forecast

    if channel not in model.schema.binary_names:
        raise ValueError(f"{channel!r} is not a binary channel")
    if not 0 <= m < len(record):
        raise IndexError(f"visit {m} out of range")
    cfg = cfg or InferenceConfig()
    out = {}
    for label, value in (("off", 0), ("on", 1)):
        rec = record.with_value(m, channel, value)
        dist, weights = state_forecast(model, rec, m, horizon, cfg)
        out[f"risk_{label}"] = float(dist[-1])
        out[f"attention_{label}"] = weights
    return out
