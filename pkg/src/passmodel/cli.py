"""Command-line interface: ``passmodel <command> [flags]``.

Exit codes: 0 success, 1 invalid input or usage, 2 runtime failure. Logs go to
stderr as JSON lines; data goes to files only, written atomically.
Precedence for every setting: flag, then ``--config`` JSON, then (seed only)
the ``PASS_SEED`` environment variable, then the built-in default.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .data import CohortError, atomic_write_text, load_cohort, save_cohort
from .evaluate import _csv, attention_csv, calibration_csv, compare_models, cross_validated_eval, roc_csv
from .inference import InferenceConfig, InferenceError, infer_cohort, predict_risks, viterbi
from .learning import (CheckpointError, LearningError, TrainConfig, em_fit, fit_hmm_baseline, load_checkpoint,
                       save_checkpoint)
from .model import what_if_toggle
from .simulate import MODES, ScenarioConfig, simulate_cohort

log = logging.getLogger("passmodel")

DEFAULTS = {
    "seed": 0,
    "jobs": None,
    "log_level": "INFO",
    # simulate
    "scenario": "markov", "n": 500, "max_visits": 10, "missingness": 0.0, "treatment_effect": 3.0,
    "no_death": False, "truth": None,
    # training
    "states": 3, "iters": 10, "q": 3, "lr": 20.0, "attn_steps": 200, "batch": None, "hidden": 32,
    "layers": 2, "open_ratio": 0.5, "optimizer": "gd", "clamp_death": False, "death_window": 3.0,
    "joint": False, "trace": None,
    # prediction / evaluation
    "horizon": 1.0, "channel": None, "task": None, "folds": 5, "model_kind": "both", "states_list": "2,3,4",
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


class _JsonFormatter(logging.Formatter):
    def format(self, record):
        return json.dumps({"level": record.levelname.lower(), "logger": record.name, "msg": record.getMessage()})


def _common(p):
    p.add_argument("--config", help="JSON file of settings (flag names with underscores)")
    p.add_argument("--seed", type=int)
    p.add_argument("--jobs", type=int, help="parallelism bound (accepted; work runs in one process)")
    p.add_argument("--log-level", dest="log_level", choices=["DEBUG", "INFO", "WARNING", "ERROR"])


def _train_flags(p, attention=True):
    p.add_argument("--cohort", required=True)
    p.add_argument("--states", type=int)
    p.add_argument("--iters", type=int)
    p.add_argument("--clamp-death", dest="clamp_death", action="store_true", default=None)
    p.add_argument("--death-window", dest="death_window", type=float)
    if attention:
        p.add_argument("--q", type=int)
        p.add_argument("--lr", type=float)
        p.add_argument("--attn-steps", dest="attn_steps", type=int)
        p.add_argument("--batch", type=int)
        p.add_argument("--hidden", type=int)
        p.add_argument("--layers", type=int)
        p.add_argument("--open-ratio", dest="open_ratio", type=float)
        p.add_argument("--optimizer", choices=["gd", "adam"])
        p.add_argument("--joint", action="store_true", default=None, help="Viterbi decoding in the E-step")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="passmodel", description="Phased attentive state-space models of disease progression")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("simulate", help="generate a synthetic cohort and its ground truth")
    _common(p)
    p.add_argument("--scenario", choices=MODES)
    p.add_argument("--n", type=int)
    p.add_argument("--max-visits", dest="max_visits", type=int)
    p.add_argument("--missingness", type=float)
    p.add_argument("--treatment-effect", dest="treatment_effect", type=float)
    p.add_argument("--no-death", dest="no_death", action="store_true", default=None)
    p.add_argument("--truth", help="ground-truth sidecar path (default: <out>.truth.json)")
    p.add_argument("--out", required=True)

    p = sub.add_parser("fit", help="hard-EM fit of the attentive model")
    _common(p)
    _train_flags(p)
    p.add_argument("--trace", help="training trace JSON (default: <out>.trace.json)")
    p.add_argument("--out", required=True)

    p = sub.add_parser("fit-hmm", help="Baum-Welch fit of the continuous-time HMM baseline")
    _common(p)
    _train_flags(p, attention=False)
    p.add_argument("--trace")
    p.add_argument("--out", required=True)

    p = sub.add_parser("infer", help="per-visit stage posteriors")
    _common(p)
    p.add_argument("--model", required=True)
    p.add_argument("--cohort", required=True)
    p.add_argument("--q", type=int)
    p.add_argument("--clamp-death", dest="clamp_death", action="store_true", default=None)
    p.add_argument("--death-window", dest="death_window", type=float)
    p.add_argument("--joint", action="store_true", default=None, help="report the Viterbi path as MAP stage")
    p.add_argument("--out", required=True)

    p = sub.add_parser("predict", help="per-visit risk of binary channels at t + horizon")
    _common(p)
    p.add_argument("--model", required=True)
    p.add_argument("--cohort", required=True)
    p.add_argument("--channel", action="append")
    p.add_argument("--horizon", type=float)
    p.add_argument("--q", type=int)
    p.add_argument("--out", required=True)

    p = sub.add_parser("explain", help="what-if toggle of a binary channel at one visit")
    _common(p)
    p.add_argument("--model", required=True)
    p.add_argument("--cohort", required=True)
    p.add_argument("--patient", required=True)
    p.add_argument("--visit", type=int, required=True, help="1-based visit number")
    p.add_argument("--channel", required=True)
    p.add_argument("--horizon", type=float)
    p.add_argument("--q", type=int)
    p.add_argument("--out", required=True)

    p = sub.add_parser("eval", help="cross-validated risk AUC, calibration and attention tables")
    _common(p)
    _train_flags(p)
    p.add_argument("--task", action="append")
    p.add_argument("--horizon", type=float)
    p.add_argument("--folds", type=int)
    p.add_argument("--model-kind", dest="model_kind", choices=["pass", "hmm", "both"])
    p.add_argument("--out", required=True)

    p = sub.add_parser("sweep-states", help="held-out risk AUC for several state counts")
    _common(p)
    _train_flags(p)
    p.add_argument("--states-list", dest="states_list")
    p.add_argument("--task", action="append")
    p.add_argument("--horizon", type=float)
    p.add_argument("--folds", type=int)
    p.add_argument("--out", required=True)
    return parser


def resolve(args: argparse.Namespace) -> dict:
    """Merge flags over the config file over PASS_SEED over defaults."""
    cfg = dict(DEFAULTS)
    file_cfg = {}
    if args.config:
        with open(args.config, encoding="utf-8") as fh:
            file_cfg = json.load(fh)
        if not isinstance(file_cfg, dict):
            raise ValueError("config file must hold a JSON object")
    env_seed = os.environ.get("PASS_SEED")
    if env_seed is not None:
        try:
            cfg["seed"] = int(env_seed)
        except ValueError:
            raise ValueError(f"PASS_SEED must be an integer, got {env_seed!r}") from None
    cfg.update(file_cfg)
    for key, value in vars(args).items():
        if value is not None and key != "config":
            cfg[key] = value
    if cfg["jobs"] is None:
        cfg["jobs"] = os.cpu_count() or 1
    return cfg


def _train_config(cfg: dict) -> TrainConfig:
    return TrainConfig(D=int(cfg["states"]), R=int(cfg["iters"]), Q=int(cfg["q"]), attn_steps=int(cfg["attn_steps"]),
                       learning_rate=float(cfg["lr"]), batch=cfg["batch"], seed=int(cfg["seed"]),
                       hidden_dim=int(cfg["hidden"]), num_layers=int(cfg["layers"]),
                       open_ratio=float(cfg["open_ratio"]), optimizer=cfg["optimizer"],
                       clamp_death=bool(cfg["clamp_death"]), death_window=float(cfg["death_window"]),
                       joint_map=bool(cfg["joint"]))


def _inference_config(cfg: dict, q: int | None = None) -> InferenceConfig:
    return InferenceConfig(Q=int(q if q is not None else cfg["q"]), clamp_death=bool(cfg["clamp_death"]),
                           death_window=float(cfg["death_window"]))


def _dump(obj) -> str:
    return json.dumps(obj, indent=1, sort_keys=True, default=_jsonable) + "\n"


def _jsonable(x):
    if isinstance(x, np.ndarray):
        return x.tolist()
    if isinstance(x, (np.floating, np.integer)):
        return x.item()
    raise TypeError(f"cannot serialize {type(x).__name__}")


def _sidecar(out: str, suffix: str) -> str:
    return str(Path(out).with_suffix("")) + suffix


# -- commands ----------------------------------------------------------------

def cmd_simulate(cfg: dict) -> None:
    base = cfg.get("scenario_config", {})
    sc = ScenarioConfig.from_json({**base, "dynamics_mode": cfg["scenario"], "n_patients": int(cfg["n"]),
                                   "seed": int(cfg["seed"]), "max_visits": int(cfg["max_visits"]),
                                   "missingness": float(cfg["missingness"]),
                                   "treatment_effect": float(cfg["treatment_effect"]),
                                   **({"death_mean": None} if cfg["no_death"] else {})})
    sim = simulate_cohort(sc)
    save_cohort(sim.cohort, cfg["out"])
    atomic_write_text(cfg["truth"] or _sidecar(cfg["out"], ".truth.json"), sim.dumps_truth())
    log.info("wrote %d patients to %s", len(sim.cohort), cfg["out"])


def cmd_fit(cfg: dict, hmm: bool = False) -> None:
    cohort = load_cohort(cfg["cohort"])
    tcfg = _train_config(cfg)
    model, trace = (fit_hmm_baseline if hmm else em_fit)(cohort, tcfg)
    save_checkpoint(model, cfg["out"], extra={"train_config": tcfg.to_json(), "kind": "hmm" if hmm else "pass"})
    atomic_write_text(cfg["trace"] or _sidecar(cfg["out"], ".trace.json"), _dump(trace.to_json()))
    log.info("fitted rates %s; checkpoint %s", list(model.gen.rates), cfg["out"])


def cmd_infer(cfg: dict) -> None:
    model = load_checkpoint(cfg["model"])
    cohort = load_cohort(cfg["cohort"])
    icfg = _inference_config(cfg)
    D = model.D
    rows = []
    posts = infer_cohort(model, cohort.patients, icfg)
    for rec, post in zip(cohort.patients, posts):
        path = post.map_path
        if cfg["joint"]:
            path = viterbi(model, rec, icfg)
        for m, visit in enumerate(rec.visits):
            att = post.attention[m - 1].weights.tolist() if m else []
            rows.append([rec.id, m + 1, repr(visit.time)] + [repr(float(x)) for x in post.smoothed[m]]
                        + [int(path[m]) + 1, json.dumps(att)])
    header = ["id", "visit", "t"] + [f"p_stage{z + 1}" for z in range(D)] + ["map_stage", "attention"]
    atomic_write_text(cfg["out"], _csv(header, rows))
    log.info("wrote posteriors for %d patients to %s", len(cohort), cfg["out"])


def cmd_predict(cfg: dict) -> None:
    model = load_checkpoint(cfg["model"])
    cohort = load_cohort(cfg["cohort"])
    channels = cfg["channel"] or list(model.schema.binary_names)
    risks = predict_risks(model, cohort.patients, channels, float(cfg["horizon"]), _inference_config(cfg))
    rows = [[rec.id, m + 1, repr(v.time)] + [repr(float(x)) for x in r[m]]
            for rec, r in zip(cohort.patients, risks) for m, v in enumerate(rec.visits)]
    atomic_write_text(cfg["out"], _csv(["id", "visit", "t"] + [f"risk_{c}" for c in channels], rows))


def cmd_explain(cfg: dict) -> None:
    model = load_checkpoint(cfg["model"])
    cohort = load_cohort(cfg["cohort"])
    rec = cohort.get(cfg["patient"])
    m = int(cfg["visit"]) - 1
    if not 0 <= m < len(rec):
        raise ValueError(f"visit {cfg['visit']} out of range 1..{len(rec)} for patient {rec.id}")
    out = what_if_toggle(model, rec, m, cfg["channel"], float(cfg["horizon"]), _inference_config(cfg))
    doc = {
        "patient": rec.id, "visit": m + 1, "channel": cfg["channel"], "horizon": float(cfg["horizon"]),
        "query_time": rec.visits[m].time + float(cfg["horizon"]),
        "risk_off": out["risk_off"], "risk_on": out["risk_on"],
        "attention_off": out["attention_off"].weights.tolist(), "attention_on": out["attention_on"].weights.tolist(),
        "attended_visits": list(range(1, m + 2)),
    }
    atomic_write_text(cfg["out"], _dump(doc))


def _write_eval(report, out: str, tag: str = "") -> None:
    stem = str(Path(out).with_suffix(""))
    atomic_write_text(f"{stem}{tag}.roc.csv", roc_csv(report))
    atomic_write_text(f"{stem}{tag}.calibration.csv", calibration_csv(report))
    atomic_write_text(f"{stem}{tag}.attention.csv", attention_csv(report.attention_by_stage, report.stage_counts))


def cmd_eval(cfg: dict) -> None:
    cohort = load_cohort(cfg["cohort"])
    tasks = cfg["task"] or [c.name for c in cohort.schema.binary if c.role != "treatment"]
    tcfg = _train_config(cfg)
    kind = cfg["model_kind"]
    if kind == "both":
        res = compare_models(cohort, tcfg, tasks, float(cfg["horizon"]), int(cfg["folds"]))
        doc = {"pass": res["pass"].to_json(), "hmm": res["hmm"].to_json(), "paired": res["paired"]}
        _write_eval(res["pass"], cfg["out"], ".pass")
        _write_eval(res["hmm"], cfg["out"], ".hmm")
    else:
        report = cross_validated_eval(cohort, tcfg, tasks, float(cfg["horizon"]), int(cfg["folds"]), kind)
        doc = report.to_json()
        _write_eval(report, cfg["out"])
    atomic_write_text(cfg["out"], _dump(doc))


def cmd_sweep(cfg: dict) -> None:
    cohort = load_cohort(cfg["cohort"])
    tasks = cfg["task"] or [c.name for c in cohort.schema.binary if c.role != "treatment"]
    results = []
    for D in [int(x) for x in str(cfg["states_list"]).split(",") if x.strip()]:
        tcfg = _train_config({**cfg, "states": D})
        report = cross_validated_eval(cohort, tcfg, tasks, float(cfg["horizon"]), int(cfg["folds"]), "pass")
        results.append({"states": D, "auc": {t: report.tasks[t].auc_mean for t in tasks},
                        "auc_std": {t: report.tasks[t].auc_std for t in tasks}})
        log.info("D=%d: %s", D, results[-1]["auc"])
    atomic_write_text(cfg["out"], _dump({"tasks": tasks, "results": results}))


COMMANDS = {
    "simulate": cmd_simulate,
    "fit": cmd_fit,
    "fit-hmm": lambda cfg: cmd_fit(cfg, hmm=True),
    "infer": cmd_infer,
    "predict": cmd_predict,
    "explain": cmd_explain,
    "eval": cmd_eval,
    "sweep-states": cmd_sweep,
}


def _setup_logging(level: str) -> None:
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(_JsonFormatter())
    root = logging.getLogger()
    for h in list(root.handlers):
        root.removeHandler(h)
    root.addHandler(handler)
    root.setLevel(level)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except SystemExit as exc:          # --help
        return int(exc.code or 0)
    try:
        cfg = resolve(args)
        _setup_logging(cfg["log_level"])
        log.info("resolved config %s", json.dumps(cfg, sort_keys=True, default=str))
        COMMANDS[args.command](cfg)
    except (CohortError, CheckpointError, ValueError, KeyError, FileNotFoundError) as exc:
        log.error("%s: %s", type(exc).__name__, exc)
        return 1
    except (InferenceError, LearningError, OSError, RuntimeError, ArithmeticError) as exc:
        log.error("%s: %s", type(exc).__name__, exc)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
