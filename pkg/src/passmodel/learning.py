"""Parameter estimation: hard-assignment EM for the attentive model and a
Baum-Welch continuous-time HMM baseline.

One EM iteration:

1. decode a state path per patient (forward-backward under the current model);
2. compute attention for every transition;
3. evaluate the attentive transition probabilities at the decoded path;
4. train the attention network on the cross-entropy of those probabilities;
5. refit the generator rates to the decoded transitions;
6. refit emissions in closed form from the visits assigned to each state.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
from scipy.optimize import minimize

from .attention import (AttentionNetParams, _active, attention_backward, attention_forward, build_batch, gate_table,
                        init_attention)
from .ctmc import GeneratorMatrix, kernels, rate_gradient
from .data import Cohort, FeatureSchema, atomic_write_text, record_inputs
from .inference import InferenceConfig, forward_backward, viterbi
from .model import (PROB_FLOOR, VAR_FLOOR, EmissionParams, FixedAttention, LagAttention, LastVisitAttention,
                    ModelParams, PreparedRecord, prepare, transition_attention)

log = logging.getLogger(__name__)

MIN_LOG_RATE, MAX_LOG_RATE = math.log(1e-6), math.log(10.0)
_INFEASIBLE = 1e30


class LearningError(RuntimeError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    D: int = 3
    R: int = 10
    Q: int = 3
    attn_steps: int = 200
    learning_rate: float = 20.0
    batch: int | None = None           # patients per gradient step; None = full cohort
    seed: int = 0
    hidden_dim: int = 32
    num_layers: int = 2
    open_ratio: float = 0.5
    leak: float = 0.001
    train_oscillations: bool = False
    optimizer: str = "gd"              # "gd" (halving on increase) or "adam"
    clamp_death: bool = False
    death_window: float = 3.0
    joint_map: bool = False
    severity_direction: str = "auto"   # "increasing", "decreasing" or "auto" (sign of correlation with age)
    rate_maxiter: int = 100
    rate_gtol: float = 1e-8
    hmm_R: int | None = None

    def __post_init__(self):
        if self.D < 2:
            raise ValueError("D must be >= 2")
        if self.R < 1:
            raise ValueError("R must be >= 1")
        if self.Q < 1:
            raise ValueError("Q must be >= 1")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.attn_steps < 0:
            raise ValueError("attn_steps must be >= 0")
        if self.batch is not None and self.batch < 1:
            raise ValueError("batch must be positive")
        if self.optimizer not in ("gd", "adam"):
            raise ValueError("optimizer must be 'gd' or 'adam'")
        if self.severity_direction not in ("auto", "increasing", "decreasing"):
            raise ValueError("severity_direction must be auto, increasing or decreasing")

    @property
    def inference(self) -> InferenceConfig:
        return InferenceConfig(Q=self.Q, clamp_death=self.clamp_death, death_window=self.death_window)

    def to_json(self) -> dict:
        return asdict(self)


@dataclass
class TrainTrace:
    loglik: list[float] = field(default_factory=list)
    cross_entropy: list[float] = field(default_factory=list)
    attn_losses: list[list[float]] = field(default_factory=list)
    rates: list[list[float]] = field(default_factory=list)
    rate_change: list[float] = field(default_factory=list)
    emission_change: list[float] = field(default_factory=list)
    attention_change: list[float] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)
    initial_loglik: float | None = None

    def __len__(self) -> int:
        return len(self.loglik)

    def to_json(self) -> dict:
        return asdict(self)


# -- initialization ----------------------------------------------------------

def _input_standardization(schema: FeatureSchema, preps: Sequence[PreparedRecord]):
    X = np.concatenate([p.inputs for p in preps]) if preps else np.zeros((0, schema.input_dim))
    if X.shape[0] == 0:
        return np.zeros(schema.input_dim), np.ones(schema.input_dim)
    shift = X.mean(axis=0)
    scale = X.std(axis=0)
    scale[scale < 1e-8] = 1.0
    return shift, scale


def _moments(schema: FeatureSchema, preps, labels, D, old: EmissionParams | None, warnings: list):
    """Per-state emission MLE from hard labels; ``old`` fills states or channels with no data."""
    cont = np.concatenate([p.cont for p in preps])
    binv = np.concatenate([p.binv for p in preps])
    C, B = cont.shape[1], binv.shape[1]
    mean = np.zeros((D, C)) if old is None else old.mean.copy()
    var = np.ones((D, C)) if old is None else old.var.copy()
    prob = np.full((D, B), 0.5) if old is None else old.prob.copy()
    for z in range(D):
        sel = labels == z
        if not np.any(sel):
            msg = f"state {z} received no visits; keeping its previous emission parameters"
            warnings.append(msg)
            log.warning(msg)
            continue
        for c in range(C):
            x = cont[sel, c]
            x = x[~np.isnan(x)]
            if x.size:
                mean[z, c] = x.mean()
                var[z, c] = max(((x - x.mean()) ** 2).mean(), VAR_FLOOR)
        for b in range(B):
            x = binv[sel, b]
            x = x[~np.isnan(x)]
            if x.size:
                prob[z, b] = x.mean()
    return EmissionParams(mean, var, np.clip(prob, PROB_FLOOR, 1.0 - PROB_FLOOR))


def _lloyd_edges(x: np.ndarray, edges: np.ndarray, iters: int = 50) -> np.ndarray:
    """Refine 1-D slice boundaries by Lloyd iterations (boundaries at midpoints of slice means)."""
    for _ in range(iters):
        labels = np.searchsorted(edges, x, side="right")
        counts = np.bincount(labels, minlength=edges.size + 1)
        if np.any(counts == 0):
            break
        centers = np.bincount(labels, x, minlength=edges.size + 1) / counts
        new = 0.5 * (centers[1:] + centers[:-1])
        if np.array_equal(new, edges):
            break
        edges = new
    return edges


def init_params(cohort: Cohort, cfg: TrainConfig, seed=None) -> ModelParams:
    """Initial model: emissions from severity-proxy quantile slices, flat rates, a fresh network.

    The severity proxy is the first continuous channel. Its direction is taken
    from ``cfg.severity_direction``; "auto" orients it so that it worsens with age.
    Without continuous channels visits are assigned to states at random.
    """
    seed = cfg.seed if seed is None else seed
    if len(cohort) == 0:
        raise ValueError("cohort is empty")
    schema, D = cohort.schema, cfg.D
    preps = [prepare(schema, p) for p in cohort.patients]
    rng = np.random.default_rng(seed)
    n_visits = sum(len(p) for p in preps)
    if schema.continuous:
        x = np.concatenate([p.cont[:, 0] for p in preps])
        t = np.concatenate([p.times for p in preps])
        obs = ~np.isnan(x)
        sign = 1.0
        if cfg.severity_direction == "decreasing":
            sign = -1.0
        elif cfg.severity_direction == "auto" and obs.sum() > 2 and np.std(x[obs]) > 0 and np.std(t[obs]) > 0:
            sign = -1.0 if np.corrcoef(x[obs], t[obs])[0, 1] < 0 else 1.0
        s = sign * x
        edges = np.quantile(s[obs], np.linspace(0, 1, D + 1)[1:-1]) if obs.any() else np.zeros(D - 1)
        edges = _lloyd_edges(s[obs], edges)
        labels = np.where(obs, np.searchsorted(edges, s, side="right"), rng.integers(0, D, n_visits))
    else:
        labels = rng.integers(0, D, n_visits)
    emis = _moments(schema, preps, labels, D, None, [])
    span = max(float(p.times[-1]) for p in preps)
    rate = D / max(span, 1.0)
    shift, scale = _input_standardization(schema, preps)
    attn = init_attention(schema.input_dim, cfg.hidden_dim, cfg.num_layers, seed, open_ratio=cfg.open_ratio,
                          leak=cfg.leak, x_shift=shift, x_scale=scale, train_oscillations=cfg.train_oscillations)
    return ModelParams(schema, GeneratorMatrix((rate,) * (D - 1)), emis, attn)


# -- E-step ------------------------------------------------------------------

def _decode(model: ModelParams, preps, cfg: TrainConfig):
    icfg = cfg.inference
    attention = transition_attention(model, preps)
    paths = []
    for p, a in zip(preps, attention):
        if cfg.joint_map:
            paths.append(viterbi(model, p.record, icfg, attention=a, prep=p))
        else:
            paths.append(forward_backward(model, p.record, icfg, attention=a, prep=p).map_path)
    return paths


# -- attention M-step --------------------------------------------------------

@dataclass
class _Transitions:
    """All transitions m >= 1 of the decoded paths, in network batch layout."""

    preps: list
    owner: np.ndarray        # patient index per transition
    items: list              # (prep index, m)
    src: list                # per transition: decoded states of visits 0..m-1
    dst: np.ndarray
    lags: list               # per transition: t_m - t_k for k = 0..m-1


def _transitions(preps, paths) -> _Transitions:
    owner, items, src, dst, lags = [], [], [], [], []
    for i, (p, z) in enumerate(zip(preps, paths)):
        for m in range(1, len(p)):
            owner.append(i)
            items.append((i, m))
            src.append(np.asarray(z[:m]))
            dst.append(int(z[m]))
            lags.append(p.times[m] - p.times[:m])
    return _Transitions(list(preps), np.array(owner, dtype=int), items, src, np.array(dst, dtype=int), lags)


def _kernel_values(rates, tr: _Transitions, sel) -> list[np.ndarray]:
    """K(t_m - t_k)[z_k, z_m] for every history visit of the selected transitions."""
    if len(sel) == 0:
        return []
    lags = np.concatenate([tr.lags[i] for i in sel])
    src = np.concatenate([tr.src[i] for i in sel])
    dst = np.concatenate([np.full(tr.lags[i].size, tr.dst[i]) for i in sel])
    vals = kernels(rates, lags)[np.arange(lags.size), src, dst]
    out, pos = [], 0
    for i in sel:
        n = tr.lags[i].size
        out.append(vals[pos:pos + n])
        pos += n
    return out


class _CEProblem:
    """Cross-entropy of attentive transitions at fixed decoded states and rates."""

    def __init__(self, tr: _Transitions, rates, sel, params: AttentionNetParams | None = None):
        self.sel = list(sel)
        hist = []
        for i in self.sel:
            pi, m = tr.items[i]
            p = tr.preps[pi]
            hist.append((p.inputs[:m], p.times[:m], p.times[m]))
        self.batch = build_batch(hist)
        vals = _kernel_values(rates, tr, self.sel)
        B, L = self.batch.x.shape[:2]
        C = np.zeros((B, L))
        for i, v in enumerate(vals):
            pos = self.batch.order[i]
            C[pos, :v.size] = v[::-1]
        self.C = C
        self.gates = None
        if params is not None and not params.train_oscillations:
            self.gates = gate_table(params, self.batch.t, _active(self.batch.lengths, B, L))

    def __call__(self, params: AttentionNetParams, grad: bool = True):
        out = attention_forward(params, self.batch, self.gates)
        p = np.maximum((out.alpha * self.C).sum(axis=1), 1e-300)
        n = p.size
        loss = float(-np.log(p).sum() / n)
        if not grad:
            return loss, None, out
        dalpha = -self.C / p[:, None] / n
        return loss, attention_backward(params, out, dalpha), out


def _apply(params: AttentionNetParams, grads: dict, step) -> AttentionNetParams:
    new = params.copy()
    for k in params.trainable():
        new.arrays[k] = params.arrays[k] - step(k, grads[k])
    if params.train_oscillations:
        for l in range(params.num_layers):
            a = new.arrays
            a[f"tau{l}"] = np.maximum(a[f"tau{l}"], 1e-3)
            a[f"ron{l}"] = np.clip(a[f"ron{l}"], 1e-3, 1.0)
    return new


def train_attention(params: AttentionNetParams, tr: _Transitions, rates, cfg: TrainConfig,
                    rng: np.random.Generator) -> tuple[AttentionNetParams, list[float]]:
    """Step 4: minimize the mean cross-entropy ``-log p_m[z_m]`` over transitions.

    Full-batch gradient descent halves its step whenever a step would raise the
    loss (so the recorded losses never increase). Mini-batches and Adam take
    every step.
    """
    n = len(tr.items)
    if n == 0 or cfg.attn_steps == 0:
        return params, []
    full = cfg.batch is None or cfg.batch >= len(tr.preps)
    lr = cfg.learning_rate
    adam_m = {k: np.zeros_like(params.arrays[k]) for k in params.trainable()}
    adam_v = {k: np.zeros_like(params.arrays[k]) for k in params.trainable()}
    b1, b2, eps = 0.9, 0.999, 1e-8
    if full:
        problems = [_CEProblem(tr, rates, range(n), params)]
    else:
        by_patient = [[] for _ in tr.preps]
        for i, owner in enumerate(tr.owner):
            by_patient[owner].append(i)
    losses = []
    if full and cfg.optimizer == "gd":
        prob = problems[0]
        loss, grads, _ = prob(params)
        losses.append(loss)
        for _ in range(cfg.attn_steps):
            cand = _apply(params, grads, lambda k, g: lr * g)
            c_loss, c_grads, _ = prob(cand)
            if not math.isfinite(c_loss):
                raise LearningError(f"attention loss became non-finite (lr={lr:g})")
            if c_loss > loss:
                lr *= 0.5
                losses.append(loss)
                continue
            params, loss, grads = cand, c_loss, c_grads
            losses.append(loss)
        return params, losses
    t = 0
    while t < cfg.attn_steps:
        if full:
            batches = problems
        else:
            order = rng.permutation(len(tr.preps))
            batches = []
            for start in range(0, order.size, cfg.batch):
                sel = [i for pi in order[start:start + cfg.batch] for i in by_patient[pi]]
                if sel:
                    batches.append(_CEProblem(tr, rates, sel, params))
        for prob in batches:
            if t >= cfg.attn_steps:
                break
            loss, grads, _ = prob(params)
            if not math.isfinite(loss):
                raise LearningError("attention loss became non-finite")
            losses.append(loss)
            t += 1
            if cfg.optimizer == "adam":
                def step(k, g):
                    adam_m[k] = b1 * adam_m[k] + (1 - b1) * g
                    adam_v[k] = b2 * adam_v[k] + (1 - b2) * g * g
                    mh = adam_m[k] / (1 - b1 ** t)
                    vh = adam_v[k] / (1 - b2 ** t)
                    return lr * mh / (np.sqrt(vh) + eps)
            else:
                def step(k, g):
                    return lr * g
            params = _apply(params, grads, step)
    return params, losses


# -- rate M-step -------------------------------------------------------------

@dataclass
class RateObjective:
    """Hard-assignment transition log-likelihood as a function of the rates.

    ``sum_i log pi(t_0)[z_0] + sum_m log sum_k alpha_k K(t_m - t_k)[z_k, z_m]``.
    """

    init_lags: np.ndarray
    init_dst: np.ndarray
    lags: np.ndarray
    src: np.ndarray
    dst: np.ndarray
    weights: np.ndarray
    group: np.ndarray
    n_groups: int

    @classmethod
    def build(cls, preps, paths, attention) -> "RateObjective":
        init_lags = np.array([p.times[0] for p in preps])
        init_dst = np.array([int(z[0]) for z in paths], dtype=int)
        lags, src, dst, weights, group = [], [], [], [], []
        g = 0
        for p, z, att in zip(preps, paths, attention):
            for m in range(1, len(p)):
                w = np.asarray(att[m - 1])
                lags.append(p.times[m] - p.times[:m])
                src.append(np.asarray(z[:m], dtype=int))
                dst.append(np.full(m, int(z[m])))
                weights.append(w)
                group.append(np.full(m, g))
                g += 1
        cat = (lambda xs, dt: np.concatenate(xs).astype(dt) if xs else np.zeros(0, dtype=dt))
        return cls(init_lags, init_dst, cat(lags, float), cat(src, int), cat(dst, int), cat(weights, float),
                   cat(group, int), g)

    def value_and_grad(self, rates: np.ndarray) -> tuple[float, np.ndarray]:
        rates = np.asarray(rates, dtype=float)
        D = rates.size + 1
        K0 = kernels(rates, self.init_lags)
        p0 = K0[np.arange(self.init_lags.size), 0, self.init_dst]
        value = float(np.sum(np.log(p0)))
        up0 = np.zeros((self.init_lags.size, D, D))
        up0[np.arange(self.init_lags.size), 0, self.init_dst] = 1.0 / p0
        grad = rate_gradient(rates, self.init_lags, up0)
        if self.n_groups:
            K = kernels(rates, self.lags)
            kv = K[np.arange(self.lags.size), self.src, self.dst]
            p = np.bincount(self.group, self.weights * kv, minlength=self.n_groups)
            value += float(np.sum(np.log(p)))
            up = np.zeros((self.lags.size, D, D))
            up[np.arange(self.lags.size), self.src, self.dst] = self.weights / p[self.group]
            grad = grad + rate_gradient(rates, self.lags, up)
        return value, grad

    def value(self, rates) -> float:
        with np.errstate(divide="ignore"):
            return self.value_and_grad(rates)[0]


def _maximize_rates(objective, rates0: np.ndarray, cfg: TrainConfig, scale: float = 1.0) -> np.ndarray:
    """L-BFGS-B on log-rates (box-bounded), keeping the start if nothing improves.

    ``scale`` divides the objective (use the number of terms) so the first
    quasi-Newton step has a sensible length.
    """
    x0 = np.clip(np.log(np.maximum(rates0, 1e-12)), MIN_LOG_RATE, MAX_LOG_RATE)

    def f(x):
        r = np.exp(x)
        with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
            v, g = objective(r)
        if not (math.isfinite(v) and np.all(np.isfinite(g))):
            return _INFEASIBLE, np.zeros_like(x)
        return -v / scale, -g * r / scale

    start = f(x0)[0]
    res = minimize(f, x0, jac=True, method="L-BFGS-B", bounds=[(MIN_LOG_RATE, MAX_LOG_RATE)] * x0.size,
                   options={"maxiter": cfg.rate_maxiter, "gtol": cfg.rate_gtol})
    if not res.fun <= start:
        return np.exp(x0)
    return np.exp(res.x)


# -- EM driver ---------------------------------------------------------------

def _flat(params: AttentionNetParams | None) -> np.ndarray:
    if not isinstance(params, AttentionNetParams):
        return np.zeros(0)
    return np.concatenate([params.arrays[k].ravel() for k in params.trainable()])


def _emission_loglik_total(model: ModelParams, preps, paths) -> float:
    from .model import emission_matrix
    return float(sum(emission_matrix(model, p)[np.arange(len(p)), z].sum() for p, z in zip(preps, paths)))


def em_fit(cohort: Cohort, cfg: TrainConfig, init: ModelParams | None = None) -> tuple[ModelParams, TrainTrace]:
    """Hard-assignment EM. Returns the fitted model and a per-iteration trace."""
    if len(cohort) == 0:
        raise ValueError("cohort is empty")
    model = init if init is not None else init_params(cohort, cfg)
    if model.D != cfg.D:
        raise ValueError(f"initial model has D={model.D}, config says D={cfg.D}")
    cfg.inference.check_budget(cfg.D)
    preps = [prepare(cohort.schema, p) for p in cohort.patients]
    rng = np.random.default_rng(cfg.seed)
    trace = TrainTrace()
    for r in range(cfg.R):
        # Steps 1-3: decode, attention, transition probabilities at the decoded path.
        paths = _decode(model, preps, cfg)
        tr = _transitions(preps, paths)
        before = model
        # Step 4: attention network.
        losses = []
        if isinstance(model.attn, AttentionNetParams):
            attn, losses = train_attention(model.attn, tr, model.rates, cfg, rng)
            model = model.replace(attn=attn)
        ce = losses[-1] if losses else float("nan")
        # Step 5: rates under the updated attention.
        attention = transition_attention(model, preps)
        objective = RateObjective.build(preps, paths, attention)
        rates = _maximize_rates(objective.value_and_grad, model.rates, cfg, max(len(preps) + objective.n_groups, 1))
        model = model.replace(gen=GeneratorMatrix(tuple(rates)))
        # Step 6: emissions.
        emis = _moments(cohort.schema, preps, np.concatenate(paths), cfg.D, model.emis, trace.warnings)
        model = model.replace(emis=emis)

        ll = objective.value(rates) + _emission_loglik_total(model, preps, paths)
        if not math.isfinite(ll):
            raise LearningError(f"iteration {r + 1}: complete-data log-likelihood is {ll}; rates={rates.tolist()}")
        trace.loglik.append(ll)
        trace.cross_entropy.append(ce)
        trace.attn_losses.append(losses)
        trace.rates.append(rates.tolist())
        trace.rate_change.append(float(np.linalg.norm(rates - before.rates)))
        trace.emission_change.append(float(np.sqrt(np.sum((emis.mean - before.emis.mean) ** 2)
                                                   + np.sum((emis.prob - before.emis.prob) ** 2))))
        trace.attention_change.append(float(np.linalg.norm(_flat(model.attn) - _flat(before.attn))))
        log.info("em iteration %d/%d: loglik=%.4f ce=%.4f rates=%s", r + 1, cfg.R, ll, ce,
                 np.array2string(rates, precision=5))
    return model, trace


# -- Baum-Welch baseline -----------------------------------------------------

@dataclass
class _SoftRateObjective:
    """Expected transition log-likelihood for soft (pairwise) posteriors."""

    init_lags: np.ndarray
    init_w: np.ndarray       # (N, D) smoothed state law at the first visit
    lags: np.ndarray
    xi: np.ndarray           # (T, D, D) pairwise posteriors

    def __call__(self, rates):
        rates = np.asarray(rates, dtype=float)
        K0 = kernels(rates, self.init_lags)[:, 0, :]
        ok0 = self.init_w > 0
        value = float(np.sum(self.init_w[ok0] * np.log(K0[ok0])))
        up0 = np.zeros((self.init_lags.size, rates.size + 1, rates.size + 1))
        up0[:, 0, :] = np.where(ok0, self.init_w / np.where(ok0, K0, 1.0), 0.0)
        grad = rate_gradient(rates, self.init_lags, up0)
        if self.lags.size:
            K = kernels(rates, self.lags)
            ok = self.xi > 0
            value += float(np.sum(self.xi[ok] * np.log(K[ok])))
            up = np.where(ok, self.xi / np.where(ok, K, 1.0), 0.0)
            grad = grad + rate_gradient(rates, self.lags, up)
        return value, grad


def fit_hmm_baseline(cohort: Cohort, cfg: TrainConfig, init: ModelParams | None = None,
                     ) -> tuple[ModelParams, TrainTrace]:
    """Baum-Welch for the continuous-time HMM (attention fixed on the previous visit).

    ``trace.loglik[r]`` is the marginal log-likelihood after iteration ``r``;
    ``trace.initial_loglik`` is that of the starting model.
    """
    if len(cohort) == 0:
        raise ValueError("cohort is empty")
    R = cfg.hmm_R or cfg.R
    model = init if init is not None else init_params(cohort, cfg)
    model = model.replace(attn=LastVisitAttention())
    icfg = InferenceConfig(Q=1, clamp_death=cfg.clamp_death, death_window=cfg.death_window)
    preps = [prepare(cohort.schema, p) for p in cohort.patients]
    last = [[LastVisitAttention().weights(m) for m in range(1, len(p))] for p in preps]
    trace = TrainTrace()

    def e_step(m):
        posts = [forward_backward(m, p.record, icfg, attention=a, prep=p) for p, a in zip(preps, last)]
        return posts, float(sum(q.loglik for q in posts))

    posts, ll = e_step(model)
    trace.initial_loglik = ll
    for r in range(R):
        before = model
        gamma = np.concatenate([q.smoothed for q in posts])
        emis = _soft_moments(preps, gamma, cfg.D)
        init_lags = np.array([p.times[0] for p in preps])
        init_w = np.stack([q.smoothed[0] for q in posts])
        lags = np.concatenate([np.diff(p.times) for p in preps])
        xi = np.concatenate([q.pairwise for q in posts]) if lags.size else np.zeros((0, cfg.D, cfg.D))
        objective = _SoftRateObjective(init_lags, init_w, lags, xi)
        rates = _maximize_rates(objective, model.rates, cfg, max(init_lags.size + lags.size, 1))
        model = model.replace(gen=GeneratorMatrix(tuple(rates)), emis=emis)
        posts, ll = e_step(model)
        if not math.isfinite(ll):
            raise LearningError(f"baseline iteration {r + 1}: log-likelihood is {ll}")
        trace.loglik.append(ll)
        trace.rates.append(rates.tolist())
        trace.rate_change.append(float(np.linalg.norm(rates - before.rates)))
        trace.emission_change.append(float(np.sqrt(np.sum((emis.mean - before.emis.mean) ** 2)
                                                   + np.sum((emis.prob - before.emis.prob) ** 2))))
        trace.cross_entropy.append(float("nan"))
        trace.attn_losses.append([])
        trace.attention_change.append(0.0)
        log.info("baum-welch iteration %d/%d: loglik=%.6f rates=%s", r + 1, R, ll,
                 np.array2string(rates, precision=5))
    return model, trace


def _soft_moments(preps, gamma: np.ndarray, D: int) -> EmissionParams:
    cont = np.concatenate([p.cont for p in preps])
    binv = np.concatenate([p.binv for p in preps])

    def weighted(x):
        obs = ~np.isnan(x)
        xz = np.where(obs, x, 0.0)
        w = gamma.T @ obs.astype(float)                      # (D, channels)
        s = gamma.T @ xz
        safe = np.where(w > 0, w, 1.0)
        return obs, xz, w, s / safe

    _, xz, w, mean = weighted(cont)
    obs = ~np.isnan(cont)
    sq = gamma.T @ np.where(obs, xz ** 2, 0.0)
    var = np.maximum(sq / np.where(w > 0, w, 1.0) - mean ** 2, VAR_FLOOR)
    mean = np.where(w > 0, mean, 0.0)
    var = np.where(w > 0, var, 1.0)
    _, _, wb, prob = weighted(binv)
    prob = np.where(wb > 0, prob, 0.5)
    return EmissionParams(mean, var, np.clip(prob, PROB_FLOOR, 1.0 - PROB_FLOOR))


# -- checkpoints -------------------------------------------------------------

CHECKPOINT_FORMAT = "pass-checkpoint"
CHECKPOINT_VERSION = 1


def _array_json(a: np.ndarray) -> dict:
    a = np.asarray(a, dtype=float)
    return {"shape": list(a.shape), "data": [float(x) for x in a.ravel()]}


def _array_from(obj: dict) -> np.ndarray:
    return np.array(obj["data"], dtype=float).reshape(obj["shape"])


def _attention_json(attn) -> dict:
    if isinstance(attn, AttentionNetParams):
        return {"kind": "network", "input_dim": attn.input_dim, "hidden_dim": attn.hidden_dim,
                "num_layers": attn.num_layers, "train_oscillations": attn.train_oscillations,
                "arrays": {k: _array_json(v) for k, v in sorted(attn.arrays.items())}}
    if isinstance(attn, LastVisitAttention):
        return {"kind": "last_visit"}
    if isinstance(attn, LagAttention):
        return {"kind": "lag", "lag": attn.lag}
    if isinstance(attn, FixedAttention):
        return {"kind": "fixed", "lag_weights": list(attn.lag_weights)}
    raise TypeError(f"cannot serialize attention of type {type(attn).__name__}")


def _attention_from(obj: dict):
    kind = obj["kind"]
    if kind == "network":
        return AttentionNetParams(int(obj["input_dim"]), int(obj["hidden_dim"]), int(obj["num_layers"]),
                                  {k: _array_from(v) for k, v in obj["arrays"].items()},
                                  bool(obj["train_oscillations"]))
    if kind == "last_visit":
        return LastVisitAttention()
    if kind == "lag":
        return LagAttention(int(obj["lag"]))
    if kind == "fixed":
        return FixedAttention(tuple(obj["lag_weights"]))
    raise CheckpointError(f"unknown attention kind {kind!r}")


def model_to_json(model: ModelParams) -> dict:
    return {
        "D": model.D,
        "schema": model.schema.to_json(),
        "rates": list(model.gen.rates),
        "emission": {"mean": _array_json(model.emis.mean), "var": _array_json(model.emis.var),
                     "prob": _array_json(model.emis.prob)},
        "attention": _attention_json(model.attn),
    }


def model_from_json(obj: dict) -> ModelParams:
    e = obj["emission"]
    model = ModelParams(FeatureSchema.from_json(obj["schema"]), GeneratorMatrix(tuple(obj["rates"])),
                        EmissionParams(_array_from(e["mean"]), _array_from(e["var"]), _array_from(e["prob"])),
                        _attention_from(obj["attention"]))
    if model.D != obj["D"]:
        raise CheckpointError(f"dimension header says D={obj['D']} but the rates give D={model.D}")
    return model


def _digest(payload: dict) -> str:
    canon = json.dumps(payload, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode()).hexdigest()


def dumps_checkpoint(model: ModelParams, extra: dict | None = None) -> str:
    payload = model_to_json(model)
    if extra:
        payload["extra"] = extra
    doc = {"format": CHECKPOINT_FORMAT, "version": CHECKPOINT_VERSION, "sha256": _digest(payload),
           "payload": payload}
    return json.dumps(doc, sort_keys=True) + "\n"


def save_checkpoint(model: ModelParams, path, extra: dict | None = None) -> None:
    atomic_write_text(path, dumps_checkpoint(model, extra))


def loads_checkpoint(text: str) -> ModelParams:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"checkpoint is corrupt or truncated: {exc}") from None
    if not isinstance(doc, dict) or doc.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError("not a model checkpoint")
    if doc.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {doc.get('version')!r} "
                              f"(expected {CHECKPOINT_VERSION})")
    payload = doc.get("payload")
    if not isinstance(payload, dict) or _digest(payload) != doc.get("sha256"):
        raise CheckpointError("checkpoint integrity hash mismatch")
    try:
        return model_from_json(payload)
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, CheckpointError):
            raise
        raise CheckpointError(f"malformed checkpoint payload: {exc}") from None


def load_checkpoint(path) -> ModelParams:
    with open(path, encoding="utf-8") as fh:
        return loads_checkpoint(fh.read())
