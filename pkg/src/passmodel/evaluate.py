"""Sequential risk scoring: AUC-ROC, cross-validation, calibration and attention summaries."""

from __future__ import annotations

import hashlib
import io
import csv
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
from scipy.stats import rankdata

from .data import Cohort, PatientRecord
from .inference import InferenceConfig, infer_cohort, predict_risks
from .learning import TrainConfig, em_fit, fit_hmm_baseline
from .model import ModelParams

log = logging.getLogger(__name__)

MAX_LAG = 6


def _split(scores, labels):
    if labels is None:
        pairs = np.asarray(scores, dtype=float).reshape(-1, 2)
        return pairs[:, 0], pairs[:, 1]
    return np.asarray(scores, dtype=float).ravel(), np.asarray(labels, dtype=float).ravel()


def auc_roc(scores, labels=None) -> float:
    """Mann-Whitney AUC; ties count one half.

    Accepts ``(risk, label)`` pairs or two parallel arrays.
    """
    s, y = _split(scores, labels)
    if s.size != y.size:
        raise ValueError("scores and labels differ in length")
    if not np.all((y == 0) | (y == 1)):
        raise ValueError("labels must be 0 or 1")
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC needs both classes")
    ranks = rankdata(s)
    return float((ranks[y == 1].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


def roc_points(scores, labels=None) -> np.ndarray:
    """ROC curve vertices ``(fpr, tpr)`` from (0, 0) to (1, 1), one per distinct threshold."""
    s, y = _split(scores, labels)
    order = np.argsort(-s, kind="stable")
    s, y = s[order], y[order]
    last = np.r_[np.flatnonzero(np.diff(s)), s.size - 1]
    tp = np.cumsum(y)[last]
    fp = (last + 1) - tp
    P, N = max(y.sum(), 1), max(y.size - y.sum(), 1)
    return np.vstack([[0.0, 0.0], np.column_stack([fp / N, tp / P])])


def calibration_bins(scores, labels=None, n_bins: int = 10) -> list[dict]:
    """Equal-width bins on [0, 1]: count, mean predicted risk and observed rate."""
    s, y = _split(scores, labels)
    idx = np.minimum((s * n_bins).astype(int), n_bins - 1)
    out = []
    for b in range(n_bins):
        sel = idx == b
        n = int(sel.sum())
        out.append({"lo": b / n_bins, "hi": (b + 1) / n_bins, "n": n,
                    "mean_risk": float(s[sel].mean()) if n else None,
                    "observed": float(y[sel].mean()) if n else None})
    return out


def assign_folds(ids: Sequence[str], k: int, seed: int = 0) -> list[list[str]]:
    """Patient-level folds: order ids by a seeded hash, then deal round-robin."""
    if k < 2:
        raise ValueError("need at least 2 folds")
    if len(ids) < k:
        raise ValueError(f"{len(ids)} patients cannot fill {k} folds")
    key = lambda pid: hashlib.sha256(f"{seed}:{pid}".encode()).hexdigest()
    ordered = sorted(ids, key=key)
    return [ordered[i::k] for i in range(k)]


def visit_label(record: PatientRecord, m: int, channel: str, horizon: float) -> int | None:
    """Label for a prediction made at visit ``m``, or None when the visit is not scored.

    The label is 1 if the channel is active at any visit in ``(t_m, t_m + horizon]``.
    Visits where the channel is already active, or with no follow-up observation
    of the channel inside the window, are not scored.
    """
    if record.visits[m].values.get(channel) == 1:
        return None
    t_m = record.visits[m].time
    seen = [v.values[channel] for v in record.visits[m + 1:]
            if v.time <= t_m + horizon and channel in v.values]
    if not seen:
        return None
    return int(any(x == 1 for x in seen))


def score_visits(model: ModelParams, records: Sequence[PatientRecord], tasks: Sequence[str], horizon: float,
                 cfg: InferenceConfig) -> dict[str, tuple[np.ndarray, np.ndarray]]:
    """Risks and labels of every eligible visit, per task."""
    risks = predict_risks(model, records, tasks, horizon, cfg)
    out = {}
    for j, task in enumerate(tasks):
        s, y = [], []
        for rec, r in zip(records, risks):
            for m in range(len(rec)):
                lab = visit_label(rec, m, task, horizon)
                if lab is not None:
                    s.append(r[m, j])
                    y.append(lab)
        out[task] = (np.array(s), np.array(y, dtype=float))
    return out


def attention_by_stage(cohort: Cohort, model: ModelParams, cfg: InferenceConfig | None = None,
                       max_lag: int = MAX_LAG) -> tuple[np.ndarray, np.ndarray]:
    """Mean attention on lags ``1..max_lag`` for transitions into visits in each MAP stage.

    Returns the (D, max_lag) table and the number of visits per stage. Lags past
    the start of a history count as 0, so rows sum to at most 1.
    """
    cfg = cfg or InferenceConfig()
    D = model.D
    total = np.zeros((D, max_lag))
    count = np.zeros(D, dtype=int)
    for post in infer_cohort(model, cohort.patients, cfg):
        for prof in post.attention:
            z = int(post.map_path[prof.m])
            w = prof.weights[::-1][:max_lag]
            total[z, :w.size] += w
            count[z] += 1
    table = np.divide(total, count[:, None], out=np.zeros_like(total), where=count[:, None] > 0)
    return table, count


@dataclass
class TaskResult:
    fold_auc: list
    fold_pos: list
    fold_neg: list
    auc_mean: float
    auc_std: float
    calibration: list
    roc: list

    def to_json(self) -> dict:
        return asdict(self)


@dataclass
class EvalReport:
    model: str
    horizon: float
    folds: list[list[str]]
    tasks: dict[str, TaskResult]
    attention_by_stage: list[list[float]] | None = None
    stage_counts: list[int] | None = None
    warnings: list[str] = field(default_factory=list)

    def to_json(self) -> dict:
        return {
            "model": self.model,
            "horizon": self.horizon,
            "fold_sizes": [len(f) for f in self.folds],
            "folds": self.folds,
            "tasks": {k: v.to_json() for k, v in self.tasks.items()},
            "attention_by_stage": self.attention_by_stage,
            "stage_counts": self.stage_counts,
            "warnings": self.warnings,
        }


def _fit(kind: str, cohort: Cohort, cfg: TrainConfig) -> ModelParams:
    if kind == "pass":
        return em_fit(cohort, cfg)[0]
    if kind == "hmm":
        return fit_hmm_baseline(cohort, cfg)[0]
    raise ValueError(f"unknown model kind {kind!r}")


def cross_validated_eval(cohort: Cohort, cfg: TrainConfig, tasks: Sequence[str], horizon: float = 1.0,
                         folds: int = 5, model: str = "pass", seed: int | None = None,
                         n_bins: int = 10) -> EvalReport:
    """Fit on k-1 folds, score every eligible visit of the held-out fold, per task."""
    for task in tasks:
        if task not in cohort.schema.binary_names:
            raise KeyError(f"task channel {task!r} is not a binary channel of the cohort")
    seed = cfg.seed if seed is None else seed
    split = assign_folds([p.id for p in cohort.patients], folds, seed)
    icfg = cfg.inference if model == "pass" else InferenceConfig(Q=1, clamp_death=cfg.clamp_death,
                                                                  death_window=cfg.death_window)
    per_task = {t: {"auc": [], "pos": [], "neg": [], "s": [], "y": []} for t in tasks}
    att_total, att_count = None, None
    warnings = []
    for i, test_ids in enumerate(split):
        test_set = set(test_ids)
        train_ids = [p.id for p in cohort.patients if p.id not in test_set]
        assert test_set.isdisjoint(train_ids), "fold leak"
        train, test = cohort.subset(train_ids), cohort.subset(test_ids)
        log.info("fold %d/%d (%s): train %d, test %d", i + 1, folds, model, len(train), len(test))
        fitted = _fit(model, train, cfg)
        scored = score_visits(fitted, test.patients, tasks, horizon, icfg)
        for task, (s, y) in scored.items():
            rec = per_task[task]
            rec["pos"].append(int(y.sum()))
            rec["neg"].append(int(y.size - y.sum()))
            rec["s"].append(s)
            rec["y"].append(y)
            if y.size == 0 or y.min() == y.max():
                msg = f"fold {i + 1}, task {task}: single class among scored visits; fold skipped"
                warnings.append(msg)
                log.warning(msg)
                rec["auc"].append(None)
            else:
                rec["auc"].append(auc_roc(s, y))
        table, count = attention_by_stage(test, fitted, icfg)
        if att_total is None:
            att_total, att_count = np.zeros_like(table), np.zeros_like(count)
        att_total += table * count[:, None]
        att_count += count
    results = {}
    for task, rec in per_task.items():
        aucs = [a for a in rec["auc"] if a is not None]
        s, y = np.concatenate(rec["s"]), np.concatenate(rec["y"])
        both = y.size and 0 < y.sum() < y.size
        results[task] = TaskResult(
            rec["auc"], rec["pos"], rec["neg"],
            float(np.mean(aucs)) if aucs else math.nan,
            float(np.std(aucs)) if aucs else math.nan,
            calibration_bins(s, y, n_bins) if y.size else [],
            roc_points(s, y).tolist() if both else [],
        )
    table = np.divide(att_total, att_count[:, None], out=np.zeros_like(att_total), where=att_count[:, None] > 0)
    return EvalReport(model, horizon, split, results, table.tolist(), att_count.tolist(), warnings)


def compare_models(cohort: Cohort, cfg: TrainConfig, tasks: Sequence[str], horizon: float = 1.0,
                   folds: int = 5, seed: int | None = None) -> dict:
    """PASS against the HMM baseline on identical folds, with paired AUC differences."""
    reports = {kind: cross_validated_eval(cohort, cfg, tasks, horizon, folds, kind, seed)
               for kind in ("pass", "hmm")}
    paired = {}
    for task in tasks:
        a, b = reports["pass"].tasks[task].fold_auc, reports["hmm"].tasks[task].fold_auc
        diffs = [x - y for x, y in zip(a, b) if x is not None and y is not None]
        paired[task] = {"fold_diff": diffs,
                        "mean_diff": float(np.mean(diffs)) if diffs else math.nan,
                        "std_diff": float(np.std(diffs)) if diffs else math.nan}
    return {"pass": reports["pass"], "hmm": reports["hmm"], "paired": paired}


# -- CSV renderers -----------------------------------------------------------

def _csv(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def roc_csv(report: EvalReport) -> str:
    rows = [(task, repr(f), repr(t)) for task, res in report.tasks.items() for f, t in res.roc]
    return _csv(["task", "fpr", "tpr"], rows)


def calibration_csv(report: EvalReport) -> str:
    rows = [(task, b["lo"], b["hi"], b["n"], "" if b["mean_risk"] is None else repr(b["mean_risk"]),
             "" if b["observed"] is None else repr(b["observed"]))
            for task, res in report.tasks.items() for b in res.calibration]
    return _csv(["task", "lo", "hi", "n", "mean_risk", "observed"], rows)


def attention_csv(table, counts) -> str:
    table = np.asarray(table)
    rows = [[z + 1, int(counts[z])] + [repr(float(x)) for x in table[z]] for z in range(table.shape[0])]
    return _csv(["stage", "n_visits"] + [f"lag{j + 1}" for j in range(table.shape[1])], rows)
