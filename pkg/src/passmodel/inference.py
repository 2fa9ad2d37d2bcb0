"""State inference with attention truncated to the ``Q`` most recent visits.

Keeping only the last ``Q`` states in every transition turns the model into a
first-order chain over super-states ``(z_{m-Q+1}, ..., z_m)``; forward-backward
then runs over that time-varying chain. Super-states are flattened in C order
with the newest state last. For the first visits the tuples are shorter.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .attention import AttentionProfile
from .ctmc import kernels
from .data import PatientRecord
from .model import (ModelParams, PreparedRecord, emission_matrix, initial_distribution, prepare,
                    query_attention, transition_attention, transition_prob, truncate_weights)

MAX_SUPERSTATES = 4096


class InferenceError(RuntimeError):
    pass


@dataclass(frozen=True)
class InferenceConfig:
    Q: int = 3
    clamp_death: bool = False
    death_window: float = 3.0

    def __post_init__(self):
        if self.Q < 1:
            raise ValueError("Q must be >= 1")
        if self.death_window < 0:
            raise ValueError("death_window must be >= 0")

    def check_budget(self, D: int) -> None:
        if D ** self.Q > MAX_SUPERSTATES:
            raise InferenceError(f"D^Q = {D}^{self.Q} super-states exceeds the budget of {MAX_SUPERSTATES}")


@dataclass
class PosteriorSummary:
    smoothed: np.ndarray                 # (M, D)
    filtered: np.ndarray                 # (M, D)
    pairwise: np.ndarray                 # (M-1, D, D): P(z_{m-1}=a, z_m=b | data)
    map_path: np.ndarray                 # (M,)
    loglik: float
    attention: list[AttentionProfile] = field(default_factory=list)


def truncated_transition(model: ModelParams, record: PatientRecord, m: int, last_states: Sequence[int],
                         Q: int, weights: np.ndarray | None = None) -> np.ndarray:
    """Transition into visit ``m`` using only the ``Q`` most recent states.

    ``last_states`` lists the states of visits ``max(0, m-Q)..m-1``.
    """
    n = min(m, Q)
    last_states = list(last_states)
    if len(last_states) != n:
        raise ValueError(f"expected the {n} most recent states, got {len(last_states)}")
    padded = [0] * (m - n) + last_states
    return transition_prob(model, record, m, padded, q=Q, weights=weights)


def clamp_mask(record: PatientRecord, D: int, cfg: InferenceConfig) -> np.ndarray:
    """Log-space evidence forcing the absorbing state at visits close to death."""
    out = np.zeros((len(record), D))
    if cfg.clamp_death and record.death_time is not None:
        near = record.death_time - record.times <= cfg.death_window
        out[near, :D - 1] = -np.inf
    return out


def _grid(D: int, L: int) -> np.ndarray:
    return np.indices((D,) * L).reshape(L, -1).T


def _transition_blocks(model: ModelParams, prep: PreparedRecord, attention: Sequence[np.ndarray], Q: int):
    """Super-state transition tables ``P[m]`` of shape (D^L_{m-1}, D) for m = 1..M-1."""
    D = model.D
    times = prep.times
    windows = [truncate_weights(w, Q) for w in attention]
    lags = np.concatenate([times[m] - times[m - w.size:m] for m, w in enumerate(windows, start=1)]) \
        if windows else np.zeros(0)
    K = kernels(model.rates, lags)
    blocks, pos = [], 0
    for w in windows:
        Kw = K[pos:pos + w.size]
        pos += w.size
        grid = _grid(D, w.size)
        P = np.zeros((grid.shape[0], D))
        for j in range(w.size):
            P += w[j] * Kw[j][grid[:, j]]
        blocks.append(P)
    return blocks


def _expand(beta: np.ndarray, S_prev: int, D: int, full: bool) -> np.ndarray:
    """Backward message of the next super-state laid out over (previous super-state, new state)."""
    if not full:
        return beta.reshape(S_prev, D)
    rest = beta.reshape(1, S_prev // D, D)
    return np.broadcast_to(rest, (D, S_prev // D, D)).reshape(S_prev, D)


def forward_backward(model: ModelParams, record: PatientRecord, cfg: InferenceConfig | None = None,
                     attention: Sequence[np.ndarray] | None = None,
                     prep: PreparedRecord | None = None) -> PosteriorSummary:
    cfg = cfg or InferenceConfig()
    cfg.check_budget(model.D)
    if len(record) < 1:
        raise ValueError(f"patient {record.id} has no visits")
    prep = prep or prepare(model.schema, record)
    if attention is None:
        attention = transition_attention(model, [prep])[0]
    D, M, Q = model.D, len(prep), cfg.Q
    fwd, scale, E, blocks, loglik = _forward(model, prep, attention, cfg)

    beta = [None] * M
    beta[M - 1] = np.ones_like(fwd[M - 1])
    pairwise = np.zeros((max(M - 1, 0), D, D))
    for m in range(M - 1, 0, -1):
        P = blocks[m - 1]
        S_prev = P.shape[0]
        Bm = _expand(beta[m], S_prev, D, S_prev == D ** Q)
        msg = P * E[m][None, :] * Bm
        beta[m - 1] = msg.sum(axis=1) / scale[m]
        xi = fwd[m - 1][:, None] * msg / scale[m]
        pairwise[m - 1] = xi.reshape(-1, D, D).sum(axis=0)

    smoothed = np.zeros((M, D))
    filtered = np.zeros((M, D))
    for m in range(M):
        g = fwd[m] * beta[m]
        smoothed[m] = g.reshape(-1, D).sum(axis=0)
        filtered[m] = fwd[m].reshape(-1, D).sum(axis=0)
    smoothed /= smoothed.sum(axis=1, keepdims=True)
    profiles = [AttentionProfile(m, np.asarray(attention[m - 1])) for m in range(1, M)]
    return PosteriorSummary(smoothed, filtered, pairwise, marginal_map(smoothed), loglik, profiles)


def marginal_map(smoothed: np.ndarray) -> np.ndarray:
    """Per-visit argmax (ties go to the lower state), lifted to be non-decreasing."""
    return np.maximum.accumulate(np.argmax(smoothed, axis=1))


def viterbi(model: ModelParams, record: PatientRecord, cfg: InferenceConfig | None = None,
            attention: Sequence[np.ndarray] | None = None, prep: PreparedRecord | None = None) -> np.ndarray:
    """Jointly most probable path under the truncated dynamics."""
    cfg = cfg or InferenceConfig()
    cfg.check_budget(model.D)
    prep = prep or prepare(model.schema, record)
    if attention is None:
        attention = transition_attention(model, [prep])[0]
    D, M, Q = model.D, len(prep), cfg.Q
    logE = emission_matrix(model, prep) + clamp_mask(record, D, cfg)
    blocks = _transition_blocks(model, prep, attention, Q)
    with np.errstate(divide="ignore"):
        delta = np.log(initial_distribution(model, prep.times[0])) + logE[0]
        back = []
        for m in range(1, M):
            P = blocks[m - 1]
            cand = delta[:, None] + np.log(P) + logE[m][None, :]
            if P.shape[0] == D ** Q:
                cand = cand.reshape(D, -1, D)
                back.append(np.argmax(cand, axis=0).ravel())
                delta = cand.max(axis=0).ravel()
            else:
                back.append(None)
                delta = cand.ravel()
    if not np.isfinite(delta.max()):
        raise InferenceError(f"patient {record.id}: no path has positive probability")
    # Walk back through super-state indices, reading off the newest component.
    s = int(np.argmax(delta))
    path = np.zeros(M, dtype=int)
    for m in range(M - 1, 0, -1):
        path[m] = s % D
        prev_size = blocks[m - 1].shape[0]
        if back[m - 1] is None:
            s = s // D
        else:
            oldest = back[m - 1][s]
            s = oldest * (prev_size // D) + s // D
    path[0] = s % D
    return path


def map_decode(model: ModelParams, record: PatientRecord, cfg: InferenceConfig | None = None,
               joint: bool = False, **kw) -> np.ndarray:
    """State estimates per visit: monotone-repaired marginal argmax, or the Viterbi path."""
    if joint:
        return viterbi(model, record, cfg, **kw)
    return forward_backward(model, record, cfg, **kw).map_path


# -- forecasting -------------------------------------------------------------

def _forecast_from(model: ModelParams, prep: PreparedRecord, fwd_m: np.ndarray, m: int,
                   weights: np.ndarray, horizon: float, Q: int) -> np.ndarray:
    """State law at ``t_m + horizon`` given the filtered super-state at visit ``m``."""
    D = model.D
    w = truncate_weights(weights, Q)
    L = min(m + 1, Q)
    if w.size != L or fwd_m.size != D ** L:
        raise ValueError("query window does not match the filtered super-state")
    t_q = prep.times[m] + horizon
    K = kernels(model.rates, t_q - prep.times[m + 1 - L:m + 1])
    grid = _grid(D, L)
    P = np.zeros((grid.shape[0], D))
    for j in range(L):
        P += w[j] * K[j][grid[:, j]]
    return fwd_m @ P


def _forward(model: ModelParams, prep: PreparedRecord, attention: Sequence[np.ndarray], cfg: InferenceConfig,
             upto: int | None = None):
    """Scaled forward pass over super-states for visits ``0..upto``.

    Returns normalized messages, the per-visit normalizers, the rescaled
    emission likelihoods, the transition tables and the log-likelihood.
    """
    D, Q = model.D, cfg.Q
    M = len(prep) if upto is None else upto + 1
    logE = (emission_matrix(model, prep) + clamp_mask(prep.record, D, cfg))[:M]
    shift = logE.max(axis=1)
    if np.any(~np.isfinite(shift)):
        raise InferenceError(f"patient {prep.record.id}: a visit has zero likelihood under every state")
    E = np.exp(logE - shift[:, None])
    blocks = _transition_blocks(model, prep, attention[:M - 1], Q)
    f = initial_distribution(model, prep.times[0]) * E[0]
    fwd, scale = [], []
    for m in range(M):
        if m > 0:
            P = blocks[m - 1]
            joint = fwd[-1][:, None] * P * E[m][None, :]
            f = joint.reshape(D, -1, D).sum(axis=0).ravel() if P.shape[0] == D ** Q else joint.ravel()
        total = f.sum()
        if not total > 0:
            raise InferenceError(f"patient {prep.record.id}: observations have zero probability under the model")
        fwd.append(f / total)
        scale.append(total)
    scale = np.array(scale)
    return fwd, scale, E, blocks, float(np.log(scale).sum() + shift.sum())


def state_forecast(model: ModelParams, record: PatientRecord, m: int, horizon: float,
                   cfg: InferenceConfig | None = None) -> tuple[np.ndarray, AttentionProfile]:
    """Filter to visit ``m`` then take one attentive step to ``t_m + horizon``.

    Returns the state distribution and the query attention over visits ``0..m``.
    """
    cfg = cfg or InferenceConfig()
    if not 0 <= m < len(record):
        raise IndexError(f"visit {m} out of range")
    if horizon < 0:
        raise ValueError("horizon must be >= 0")
    prep = prepare(model.schema, record)
    attention = transition_attention(model, [prep])[0]
    fwd = _forward(model, prep, attention, cfg, upto=m)[0]
    weights = query_attention(model, [prep], horizon)[0][m]
    dist = _forecast_from(model, prep, fwd[m], m, weights, horizon, cfg.Q)
    return dist, AttentionProfile(m + 1, weights)


def predict_risk(model: ModelParams, record: PatientRecord, m: int, channel: str, horizon: float = 1.0,
                 cfg: InferenceConfig | None = None) -> float:
    """Probability that binary ``channel`` is active at ``t_m + horizon``."""
    if channel not in model.schema.binary_names:
        raise KeyError(f"unknown binary channel {channel!r}")
    b = model.schema.binary_names.index(channel)
    dist, _ = state_forecast(model, record, m, horizon, cfg)
    return float(dist @ model.emis.prob[:, b])


def predict_risks(model: ModelParams, records: Sequence[PatientRecord], channels: Sequence[str],
                  horizon: float = 1.0, cfg: InferenceConfig | None = None) -> list[np.ndarray]:
    """Risks for every visit of every record, one (M, len(channels)) array per record.

    Same numbers as ``predict_risk`` but with one filtering pass per record and
    batched attention.
    """
    cfg = cfg or InferenceConfig()
    cols = []
    for ch in channels:
        if ch not in model.schema.binary_names:
            raise KeyError(f"unknown binary channel {ch!r}")
        cols.append(model.schema.binary_names.index(ch))
    preps = [prepare(model.schema, r) for r in records]
    trans = transition_attention(model, preps)
    queries = query_attention(model, preps, horizon)
    out = []
    for prep, att, qw in zip(preps, trans, queries):
        fwd = _forward(model, prep, att, cfg)[0]
        dists = np.stack([_forecast_from(model, prep, fwd[m], m, qw[m], horizon, cfg.Q) for m in range(len(prep))])
        out.append(dists @ model.emis.prob[:, cols])
    return out


def infer_cohort(model: ModelParams, records: Sequence[PatientRecord],
                 cfg: InferenceConfig | None = None) -> list[PosteriorSummary]:
    cfg = cfg or InferenceConfig()
    preps = [prepare(model.schema, r) for r in records]
    trans = transition_attention(model, preps)
    return [forward_backward(model, p.record, cfg, attention=a, prep=p) for p, a in zip(preps, trans)]
