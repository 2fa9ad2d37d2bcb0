"""Phased-LSTM attention over a patient's visit history.

For a target time the history is fed most-recent-first, each visit stamped
with its lag behind the target (``t_target - t_k``). Every hidden unit has a
periodic time gate; while the gate is closed the cell and hidden state are
carried over almost unchanged. A shared linear head scores every step and a
softmax turns the scores into attention weights over past visits.

Parameters are a flat dict of named arrays so optimizers and checkpoints can
treat them uniformly. Per layer ``l``:

    W{l}      (4H, in_l + H)   gate weights, blocks ordered input/forget/output/candidate
    b{l}      (4H,)
    tau{l}    (H,)             oscillation period (years)
    shift{l}  (H,)             phase shift (years)
    ron{l}    (H,)             open ratio
    leak{l}   (H,)             closed-phase leak

plus the head ``w`` (H,), ``bh`` (1,) and the fixed input standardization
``x_shift`` / ``x_scale`` (input_dim,).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .data import FeatureSchema, PatientRecord, augmented_input


@dataclass(frozen=True)
class OscillationTriple:
    period: float
    shift: float
    open_ratio: float = 0.05
    leak: float = 0.001

    def __post_init__(self):
        if not self.period > 0:
            raise ValueError("period must be positive")
        if not 0 < self.open_ratio <= 1:
            raise ValueError("open_ratio must lie in (0, 1]")
        if not 0 <= self.leak <= 0.01:
            raise ValueError("leak must lie in [0, 0.01]")


def time_gate(osc: OscillationTriple, t):
    """Openness of a time gate at time ``t``: triangular pulse, small leak when closed."""
    return _gate(np.asarray(t, dtype=float), osc.period, osc.shift, osc.open_ratio, osc.leak)[0]


def _gate(t, tau, shift, ron, leak):
    """Gate values and partial derivatives w.r.t. (phase, ron)."""
    phi = np.mod(t - shift, tau) / tau
    rising = phi < 0.5 * ron
    falling = ~rising & (phi < ron)
    k = np.where(rising, 2.0 * phi / ron, np.where(falling, 2.0 - 2.0 * phi / ron, leak * phi))
    dk_dphi = np.where(rising, 2.0 / ron, np.where(falling, -2.0 / ron, leak))
    dk_dron = np.where(rising, -2.0 * phi / ron**2, np.where(falling, 2.0 * phi / ron**2, 0.0))
    return k, phi, dk_dphi, dk_dron


@dataclass
class AttentionNetParams:
    input_dim: int
    hidden_dim: int
    num_layers: int
    arrays: dict = field(default_factory=dict)
    train_oscillations: bool = False

    def layer_input_dim(self, layer: int) -> int:
        return self.input_dim if layer == 0 else self.hidden_dim

    def trainable(self) -> list[str]:
        names = []
        for l in range(self.num_layers):
            names += [f"W{l}", f"b{l}"]
            if self.train_oscillations:
                names += [f"tau{l}", f"shift{l}", f"ron{l}"]
        return names + ["w", "bh"]

    def copy(self) -> "AttentionNetParams":
        return AttentionNetParams(self.input_dim, self.hidden_dim, self.num_layers,
                                  {k: v.copy() for k, v in self.arrays.items()}, self.train_oscillations)

    def oscillation(self, layer: int, unit: int) -> OscillationTriple:
        a = self.arrays
        return OscillationTriple(float(a[f"tau{layer}"][unit]), float(a[f"shift{layer}"][unit]),
                                 float(a[f"ron{layer}"][unit]), float(a[f"leak{layer}"][unit]))


def init_attention(input_dim: int, hidden_dim: int = 32, num_layers: int = 2, seed=None, *,
                   open_ratio: float = 0.05, leak: float = 0.001, period_range=(0.5, 20.0),
                   x_shift=None, x_scale=None, train_oscillations: bool = False) -> AttentionNetParams:
    rng = np.random.default_rng(seed)
    H = hidden_dim
    arrays = {}
    for l in range(num_layers):
        fan_in = (input_dim if l == 0 else H) + H
        bound = 1.0 / np.sqrt(fan_in)
        arrays[f"W{l}"] = rng.uniform(-bound, bound, size=(4 * H, fan_in))
        b = rng.uniform(-bound, bound, size=4 * H)
        b[H:2 * H] = 1.0
        arrays[f"b{l}"] = b
        tau = np.exp(rng.uniform(np.log(period_range[0]), np.log(period_range[1]), size=H))
        arrays[f"tau{l}"] = tau
        arrays[f"shift{l}"] = rng.uniform(0.0, tau)
        arrays[f"ron{l}"] = np.full(H, float(open_ratio))
        arrays[f"leak{l}"] = np.full(H, float(leak))
    bound = 1.0 / np.sqrt(H)
    arrays["w"] = rng.uniform(-bound, bound, size=H)
    arrays["bh"] = np.zeros(1)
    arrays["x_shift"] = np.zeros(input_dim) if x_shift is None else np.asarray(x_shift, dtype=float).copy()
    arrays["x_scale"] = np.ones(input_dim) if x_scale is None else np.asarray(x_scale, dtype=float).copy()
    return AttentionNetParams(input_dim, hidden_dim, num_layers, arrays, train_oscillations)


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


# -- sequences ---------------------------------------------------------------

def reverse_and_shift(schema: FeatureSchema, record: PatientRecord, m: int, t_target: float | None = None):
    """History of target visit ``m`` (0-based), most recent first.

    Returns ``(inputs, stamps)`` with ``inputs[j]`` the augmented input of visit
    ``m - 1 - j`` and ``stamps[j] = t_target - t_{m-1-j}``. ``t_target``
    defaults to the time of visit ``m``; passing a later time (with ``m`` up to
    ``M``) builds the sequence for a forward-looking query.
    """
    if m < 1:
        raise ValueError("a target visit needs at least one earlier visit (m >= 1)")
    if t_target is None:
        if m >= len(record):
            raise IndexError(f"visit {m} out of range for patient {record.id}")
        t_target = record.visits[m].time
    elif m > len(record):
        raise IndexError(f"history length {m} exceeds the {len(record)} visits of patient {record.id}")
    idx = range(m - 1, -1, -1)
    inputs = np.stack([augmented_input(schema, record, k) for k in idx])
    stamps = np.array([t_target - record.visits[k].time for k in idx])
    return inputs, stamps


@dataclass
class SequenceBatch:
    """Reversed histories padded to a common length, sorted longest first."""

    x: np.ndarray          # (B, L, input_dim)
    t: np.ndarray          # (B, L)
    lengths: np.ndarray    # (B,)
    order: np.ndarray      # position in the sorted batch of the i-th original sequence

    @property
    def mask(self) -> np.ndarray:
        return np.arange(self.x.shape[1])[None, :] < self.lengths[:, None]

    @property
    def size(self) -> int:
        return self.x.shape[0]


def build_batch(histories: Sequence[tuple[np.ndarray, np.ndarray, float]]) -> SequenceBatch:
    """Batch from ``(inputs, times, t_target)`` triples in chronological order."""
    lengths = np.array([len(h[1]) for h in histories], dtype=int)
    if np.any(lengths < 1):
        raise ValueError("every history needs at least one visit")
    sort = np.argsort(-lengths, kind="stable")
    order = np.empty_like(sort)
    order[sort] = np.arange(sort.size)
    B = len(histories)
    L = int(lengths.max()) if B else 0
    dim = histories[0][0].shape[1] if B else 0
    x = np.zeros((B, L, dim))
    t = np.zeros((B, L))
    for pos, i in enumerate(sort):
        inputs, times, target = histories[i]
        n = lengths[i]
        x[pos, :n] = inputs[::-1]
        t[pos, :n] = target - np.asarray(times, dtype=float)[::-1]
    return SequenceBatch(x, t, lengths[sort], order)


# -- recurrent forward / backward --------------------------------------------

@dataclass
class ForwardCache:
    x: np.ndarray
    t: np.ndarray
    active: list          # rows processed at each step
    acts: list            # acts[l][j]: (n_j, 4H) post-nonlinearity gates
    ctil: list            # acts[l][j]: (n_j, H)
    c: list               # c[l][j]: (n_j, H) state after step j
    h: list
    inp: list             # inp[l][j]: input fed to layer l at step j
    top: np.ndarray       # (B, L, H) top-layer hidden states (0 on padding)
    gates: list = field(default_factory=list)   # gates[l][j]: (n_j, H) time-gate openness


def gate_table(params: AttentionNetParams, t: np.ndarray, active: Sequence[int]) -> list:
    """Time-gate values per layer and step; reusable while the oscillations are fixed."""
    a = params.arrays
    return [[_gate(t[:n, j, None], a[f"tau{l}"], a[f"shift{l}"], a[f"ron{l}"], a[f"leak{l}"])[0]
             for j, n in enumerate(active)] for l in range(params.num_layers)]


def _active(lengths, B: int, L: int) -> list[int]:
    if lengths is None:
        return [B] * L
    lengths = np.asarray(lengths)
    if np.any(np.diff(lengths) > 0):
        raise ValueError("rows must be sorted by decreasing length")
    return [int(np.sum(lengths > j)) for j in range(L)]


def forward(params: AttentionNetParams, x: np.ndarray, t: np.ndarray, lengths=None, gates=None) -> ForwardCache:
    """Run the stacked phased LSTM over padded sequences.

    ``x`` is (B, L, input_dim) and ``t`` (B, L) holds the shifted stamps. Rows
    must be sorted by decreasing length when ``lengths`` is given; step ``j``
    then only touches the rows still running. Initial states are zero.
    ``gates`` may carry a precomputed ``gate_table``.
    """
    x = np.asarray(x, dtype=float)
    t = np.asarray(t, dtype=float)
    if x.ndim != 3 or x.shape[2] != params.input_dim:
        raise ValueError(f"expected inputs of shape (B, L, {params.input_dim}), got {x.shape}")
    if t.shape != x.shape[:2]:
        raise ValueError(f"timestamps of shape {t.shape} do not match inputs {x.shape[:2]}")
    B, L, _ = x.shape
    H = params.hidden_dim
    a = params.arrays
    active = _active(lengths, B, L)
    if gates is None:
        gates = gate_table(params, t, active)
    xs = (x - a["x_shift"]) / a["x_scale"]
    nl = params.num_layers
    cache = ForwardCache(x, t, active, [[] for _ in range(nl)], [[] for _ in range(nl)],
                         [[] for _ in range(nl)], [[] for _ in range(nl)], [[] for _ in range(nl)],
                         np.zeros((B, L, H)), gates)
    c_prev = [np.zeros((B, H)) for _ in range(nl)]
    h_prev = [np.zeros((B, H)) for _ in range(nl)]
    for j in range(L):
        n = active[j]
        inp = xs[:n, j]
        for l in range(nl):
            cp, hp = c_prev[l][:n], h_prev[l][:n]
            z = np.concatenate([inp, hp], axis=1) @ a[f"W{l}"].T + a[f"b{l}"]
            acts = np.empty_like(z)
            acts[:, :3 * H] = _sigmoid(z[:, :3 * H])
            acts[:, 3 * H:] = np.tanh(z[:, 3 * H:])
            i, f, o, g = acts[:, :H], acts[:, H:2 * H], acts[:, 2 * H:3 * H], acts[:, 3 * H:]
            ct = f * cp + i * g
            ht = o * np.tanh(ct)
            k = gates[l][j]
            c = k * ct + (1.0 - k) * cp
            h = k * ht + (1.0 - k) * hp
            cache.inp[l].append(inp)
            cache.acts[l].append(acts)
            cache.ctil[l].append(ct)
            cache.c[l].append(c)
            cache.h[l].append(h)
            c_prev[l] = c
            h_prev[l] = h
            inp = h
        cache.top[:n, j] = inp
    return cache


def backward(params: AttentionNetParams, cache: ForwardCache, dtop: np.ndarray) -> dict:
    """Gradients of a loss w.r.t. the recurrent weights.

    ``dtop`` (B, L, H) is the loss gradient w.r.t. each top-layer hidden state.
    Oscillation parameters get gradients only when ``params.train_oscillations``.
    """
    dtop = np.asarray(dtop, dtype=float)
    if dtop.shape != cache.top.shape:
        raise ValueError(f"upstream gradient shape {dtop.shape} != hidden shape {cache.top.shape}")
    a = params.arrays
    H = params.hidden_dim
    nl = params.num_layers
    L = len(cache.active)
    B = cache.x.shape[0]
    grads = {}
    for l in range(nl):
        grads[f"W{l}"] = np.zeros_like(a[f"W{l}"])
        grads[f"b{l}"] = np.zeros_like(a[f"b{l}"])
        if params.train_oscillations:
            for name in ("tau", "shift", "ron"):
                grads[f"{name}{l}"] = np.zeros(H)
    dh_next = [np.zeros((B, H)) for _ in range(nl)]
    dc_next = [np.zeros((B, H)) for _ in range(nl)]
    for j in range(L - 1, -1, -1):
        n = cache.active[j]
        tj = cache.t[:n, j, None]
        dh_from_above = dtop[:n, j]
        for l in range(nl - 1, -1, -1):
            in_l = params.layer_input_dim(l)
            dh = dh_next[l][:n] + dh_from_above
            dc = dc_next[l][:n]
            if j > 0:
                cp, hp = cache.c[l][j - 1][:n], cache.h[l][j - 1][:n]
            else:
                cp, hp = np.zeros((n, H)), np.zeros((n, H))
            acts = cache.acts[l][j]
            i, f, o, g = acts[:, :H], acts[:, H:2 * H], acts[:, 2 * H:3 * H], acts[:, 3 * H:]
            ct = cache.ctil[l][j]
            tc = np.tanh(ct)
            k = cache.gates[l][j]
            if params.train_oscillations:
                _, _, dk_dphi, dk_dron = _gate(tj, a[f"tau{l}"], a[f"shift{l}"], a[f"ron{l}"], a[f"leak{l}"])
                dk = dh * (o * tc - hp) + dc * (ct - cp)
                tau = a[f"tau{l}"]
                dphi = dk * dk_dphi
                grads[f"shift{l}"] -= (dphi / tau).sum(axis=0)
                grads[f"tau{l}"] -= (dphi * (tj - a[f"shift{l}"]) / tau**2).sum(axis=0)
                grads[f"ron{l}"] += (dk * dk_dron).sum(axis=0)
            dht = k * dh
            dct = k * dc + dht * o * (1.0 - tc * tc)
            dz = np.empty((n, 4 * H))
            dz[:, :H] = dct * g * i * (1.0 - i)
            dz[:, H:2 * H] = dct * cp * f * (1.0 - f)
            dz[:, 2 * H:3 * H] = dht * tc * o * (1.0 - o)
            dz[:, 3 * H:] = dct * i * (1.0 - g * g)
            concat = np.concatenate([cache.inp[l][j], hp], axis=1)
            grads[f"W{l}"] += dz.T @ concat
            grads[f"b{l}"] += dz.sum(axis=0)
            dconcat = dz @ a[f"W{l}"]
            dh_next[l][:n] = (1.0 - k) * dh + dconcat[:, in_l:]
            dc_next[l][:n] = (1.0 - k) * dc + dct * f
            dh_from_above = dconcat[:, :in_l]
    return grads


# -- attention head ----------------------------------------------------------

@dataclass
class AttentionOutput:
    batch: SequenceBatch
    cache: ForwardCache
    alpha: np.ndarray      # (B, L) reversed order, sorted rows, 0 on padding

    def weights(self, i: int) -> np.ndarray:
        """Chronological weights of the i-th original sequence."""
        pos = self.batch.order[i]
        n = self.batch.lengths[pos]
        return self.alpha[pos, :n][::-1].copy()


def attention_forward(params: AttentionNetParams, batch: SequenceBatch, gates=None) -> AttentionOutput:
    cache = forward(params, batch.x, batch.t, batch.lengths, gates)
    a = params.arrays
    logits = cache.top @ a["w"] + a["bh"][0]
    mask = batch.mask
    logits = np.where(mask, logits, -np.inf)
    logits = logits - logits.max(axis=1, keepdims=True)
    e = np.where(mask, np.exp(logits), 0.0)
    alpha = e / e.sum(axis=1, keepdims=True)
    return AttentionOutput(batch, cache, alpha)


def attention_backward(params: AttentionNetParams, out: AttentionOutput, dalpha: np.ndarray) -> dict:
    """Parameter gradients from a gradient w.r.t. the (sorted, reversed) weights."""
    alpha = out.alpha
    dalpha = np.where(out.batch.mask, dalpha, 0.0)
    de = alpha * (dalpha - (alpha * dalpha).sum(axis=1, keepdims=True))
    a = params.arrays
    grads = backward(params, out.cache, de[:, :, None] * a["w"][None, None, :])
    grads["w"] = np.einsum("bj,bjh->h", de, out.cache.top)
    grads["bh"] = np.array([de.sum()])
    return grads


@dataclass(frozen=True)
class AttentionProfile:
    """Weights over visits ``0..m-1`` (chronological) for the transition into visit ``m``."""

    m: int
    weights: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "weights", np.asarray(self.weights, dtype=float))


def compute_attention(params: AttentionNetParams, schema: FeatureSchema, record: PatientRecord,
                      m: int) -> AttentionProfile:
    if not 1 <= m < len(record):
        raise IndexError(f"target visit {m} out of range [1, {len(record) - 1}]")
    inputs, stamps = reverse_and_shift(schema, record, m)
    batch = SequenceBatch(inputs[None], stamps[None], np.array([m]), np.array([0]))
    out = attention_forward(params, batch)
    return AttentionProfile(m, out.weights(0))
