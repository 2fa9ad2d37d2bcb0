"""Bidiagonal CTMC generators, matrix exponentials and sojourn statistics.

States are 0-based: state 0 is the asymptomatic stage, state ``D - 1`` is
absorbing. Kernels use the (source row, destination column) convention, so
``expm(gen, t)[a, b]`` is P(state b at time t | state a at time 0).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

# Pade(13, 13) coefficients and the 1-norm bound below which no scaling is needed
# (Higham 2005, "The scaling and squaring method for the matrix exponential revisited").
_PADE13 = np.array([
    64764752532480000.0, 32382376266240000.0, 7771770303897600.0,
    1187353796428800.0, 129060195264000.0, 10559470521600.0,
    670442572800.0, 33522128640.0, 1323241920.0, 40840800.0,
    960960.0, 16380.0, 182.0, 1.0,
])
_THETA13 = 5.371920351148152


@dataclass(frozen=True)
class GeneratorMatrix:
    """Pure-birth generator: state i moves to i+1 at ``rates[i]`` per year."""

    rates: tuple[float, ...]

    def __post_init__(self):
        rates = tuple(float(r) for r in np.asarray(self.rates, dtype=float).ravel())
        if len(rates) < 1:
            raise ValueError("a generator needs at least 2 states (1 rate)")
        for r in rates:
            if not (math.isfinite(r) and r >= 0):
                raise ValueError(f"rates must be finite and nonnegative, got {r!r}")
        object.__setattr__(self, "rates", rates)

    @property
    def D(self) -> int:
        return len(self.rates) + 1

    @property
    def rate_array(self) -> np.ndarray:
        return np.array(self.rates)

    @property
    def dense(self) -> np.ndarray:
        return dense_generator(self.rate_array)


def dense_generator(rates: np.ndarray) -> np.ndarray:
    rates = np.asarray(rates, dtype=float)
    D = rates.size + 1
    L = np.zeros((D, D))
    idx = np.arange(D - 1)
    L[idx, idx] = -rates
    L[idx, idx + 1] = rates
    return L


def expm_pade(A: np.ndarray) -> np.ndarray:
    """Matrix exponential of a stack of square matrices ``(..., n, n)``.

    Pade(13) with scaling and squaring; the squaring count is chosen per matrix
    from its 1-norm.
    """
    A = np.asarray(A, dtype=float)
    if A.ndim < 2 or A.shape[-1] != A.shape[-2]:
        raise ValueError(f"expected square matrices, got shape {A.shape}")
    batch_shape = A.shape[:-2]
    n = A.shape[-1]
    A = A.reshape(-1, n, n)
    norms = np.abs(A).sum(axis=-2).max(axis=-1)
    with np.errstate(divide="ignore"):
        s = np.where(norms > _THETA13, np.ceil(np.log2(norms / _THETA13)), 0.0).astype(int)
    A = A * (2.0 ** -s)[:, None, None]

    b = _PADE13
    ident = np.broadcast_to(np.eye(n), A.shape)
    A2 = A @ A
    A4 = A2 @ A2
    A6 = A4 @ A2
    U = A @ (A6 @ (b[13] * A6 + b[11] * A4 + b[9] * A2) + b[7] * A6 + b[5] * A4 + b[3] * A2 + b[1] * ident)
    V = A6 @ (b[12] * A6 + b[10] * A4 + b[8] * A2) + b[6] * A6 + b[4] * A4 + b[2] * A2 + b[0] * ident
    R = np.linalg.solve(V - U, V + U)

    for k in range(int(s.max(initial=0))):
        sel = s > k
        R[sel] = R[sel] @ R[sel]
    return R.reshape(batch_shape + (n, n))


def expm(gen: GeneratorMatrix, delta: float) -> np.ndarray:
    """Transition kernel ``exp(delta * Lambda)`` for one elapsed time."""
    if not (math.isfinite(delta) and delta >= 0):
        raise ValueError(f"elapsed time must be finite and >= 0, got {delta!r}")
    return kernels(gen.rate_array, np.array([delta]))[0]


def kernels(rates: np.ndarray, deltas: np.ndarray) -> np.ndarray:
    """Kernels for many elapsed times at once, shape ``deltas.shape + (D, D)``."""
    deltas = np.asarray(deltas, dtype=float)
    if np.any(~np.isfinite(deltas)) or np.any(deltas < 0):
        raise ValueError("elapsed times must be finite and >= 0")
    L = dense_generator(rates)
    P = np.clip(expm_pade(deltas[..., None, None] * L), 0.0, 1.0)
    P[deltas == 0] = np.eye(L.shape[0])
    # the absorbing row is exact; solve() would leave it a rounding error off
    P[..., -1, :] = 0.0
    P[..., -1, -1] = 1.0
    return P


def expm_series(A: np.ndarray, terms: int = 40) -> np.ndarray:
    """Truncated Taylor series; only meant as a check for moderate norms."""
    A = np.asarray(A, dtype=float)
    out = np.eye(A.shape[0])
    term = np.eye(A.shape[0])
    for k in range(1, terms + 1):
        term = term @ A / k
        out = out + term
    return out


def expm_closed_form(rates, delta: float, dps: int = 40) -> np.ndarray:
    """Spectral (hypoexponential) formula for a pure-birth kernel.

    Requires pairwise distinct rates, counting the absorbing state's rate 0.
    Evaluated in ``dps``-digit arithmetic so near-equal rates do not cancel.
    """
    import mpmath

    with mpmath.workdps(dps):
        lam = [mpmath.mpf(float(r)) for r in rates] + [mpmath.mpf(0)]
        D = len(lam)
        t = mpmath.mpf(float(delta))
        out = np.zeros((D, D))
        for i in range(D):
            for j in range(i, D):
                prod = mpmath.mpf(1)
                for k in range(i, j):
                    prod *= lam[k]
                total = mpmath.mpf(0)
                for k in range(i, j + 1):
                    denom = mpmath.mpf(1)
                    for l in range(i, j + 1):
                        if l != k:
                            denom *= lam[l] - lam[k]
                    total += mpmath.exp(-lam[k] * t) / denom
                out[i, j] = float(prod * total)
    return out


def rate_gradient(rates: np.ndarray, deltas: np.ndarray, upstream: np.ndarray) -> np.ndarray:
    """Gradient w.r.t. ``rates`` of ``sum_b <upstream[b], exp(deltas[b] * Lambda)>``.

    Uses the adjoint Frechet derivative, read off the upper-right block of
    ``exp([[d L^T, d G], [0, d L^T]])``.
    """
    rates = np.asarray(rates, dtype=float)
    deltas = np.asarray(deltas, dtype=float).ravel()
    G = np.asarray(upstream, dtype=float).reshape(deltas.size, rates.size + 1, rates.size + 1)
    D = rates.size + 1
    scale = np.abs(G).max(axis=(1, 2))
    keep = (scale > 0) & (deltas > 0)
    if not np.any(keep):
        return np.zeros_like(rates)
    d = deltas[keep]
    Gn = G[keep] / scale[keep, None, None]
    LT = dense_generator(rates).T
    block = np.zeros((d.size, 2 * D, 2 * D))
    block[:, :D, :D] = d[:, None, None] * LT
    block[:, D:, D:] = d[:, None, None] * LT
    block[:, :D, D:] = d[:, None, None] * Gn
    grad_L = (expm_pade(block)[:, :D, D:] * scale[keep, None, None]).sum(axis=0)
    idx = np.arange(D - 1)
    return grad_L[idx, idx + 1] - grad_L[idx, idx]


def mean_sojourn(gen: GeneratorMatrix, state: int) -> float:
    if not 0 <= state < gen.D:
        raise IndexError(f"state {state} out of range for D={gen.D}")
    if state == gen.D - 1:
        raise ValueError("the absorbing state has no sojourn rate")
    rate = gen.rates[state]
    if rate == 0:
        raise ValueError(f"state {state} has zero exit rate (infinite sojourn)")
    return 1.0 / rate


def sample_path(gen: GeneratorMatrix, t_end: float, seed=None) -> list[tuple[float, int]]:
    """Sample onsets ``[(T_n, state_n), ...]`` of a path started in state 0 at time 0."""
    if not t_end > 0:
        raise ValueError("t_end must be positive")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    path = [(0.0, 0)]
    t, state = 0.0, 0
    while state < gen.D - 1:
        rate = gen.rates[state]
        if rate <= 0:
            break
        t += rng.exponential(1.0 / rate)
        if t >= t_end:
            break
        state += 1
        path.append((t, state))
    return path


def state_at(path: list[tuple[float, int]], t: float) -> int:
    state = path[0][1]
    for onset, z in path:
        if onset <= t:
            state = z
        else:
            break
    return state
