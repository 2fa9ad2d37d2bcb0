"""Cross-validated PASS vs continuous-time HMM risk AUC on simulated cohorts."""

import argparse
import json
import time

from passmodel.evaluate import compare_models
from passmodel.learning import TrainConfig
from passmodel.simulate import BinaryTruth, ScenarioConfig, simulate_cohort


def run(mode, treat_prob, n, iters, attn_steps, folds, seed):
    binary = (BinaryTruth("ivacaftor", (treat_prob,) * 3, "treatment"),
              BinaryTruth("diabetes", (0.01, 0.02, 0.98), "anchor"),
              BinaryTruth("pseudomonas", (0.2, 0.45, 0.7), "infection"))
    sc = ScenarioConfig(rates=(0.1, 0.15), binary=binary, dynamics_mode=mode, treatment_effect=3.0,
                        n_patients=n, seed=seed, death_mean=None, start_age=(1.0, 15.0))
    t0 = time.perf_counter()
    res = compare_models(simulate_cohort(sc).cohort, TrainConfig(R=iters, attn_steps=attn_steps), ["diabetes"], 1.0,
                         folds)
    return {"mode": mode, "seconds": round(time.perf_counter() - t0, 1),
            "pass_auc": res["pass"].tasks["diabetes"].fold_auc, "hmm_auc": res["hmm"].tasks["diabetes"].fold_auc,
            **res["paired"]["diabetes"]}


if __name__ == "__main__":
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--modes", default="treatment_memory,markov")
    ap.add_argument("--treat-prob", type=float, default=0.1)
    ap.add_argument("--n", type=int, default=500)
    ap.add_argument("--iters", type=int, default=6)
    ap.add_argument("--attn-steps", type=int, default=30)
    ap.add_argument("--folds", type=int, default=5)
    ap.add_argument("--seed", type=int, default=5)
    args = ap.parse_args()
    for mode in args.modes.split(","):
        print(json.dumps(run(mode, args.treat_prob, args.n, args.iters, args.attn_steps, args.folds, args.seed)),
              flush=True)
