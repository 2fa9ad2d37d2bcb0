"""Fit both models to a Markov simulation and compare against the generating parameters."""

import argparse
import json
import time

import numpy as np

from passmodel.learning import TrainConfig, em_fit, fit_hmm_baseline
from passmodel.simulate import ScenarioConfig, simulate_cohort


def recovery(n=500, seed=0, iters=10, attn_steps=50, hmm_iters=30):
    scenario = ScenarioConfig(n_patients=n, seed=seed, death_mean=None)
    sim = simulate_cohort(scenario)
    truth_rates = np.array(scenario.rates)
    truth_mean = np.array([c.means for c in scenario.continuous]).T
    truth_sd = np.array([c.sds for c in scenario.continuous]).T
    out = {}
    for name, fit, cfg in [("pass", em_fit, TrainConfig(R=iters, attn_steps=attn_steps, seed=seed)),
                           ("hmm", fit_hmm_baseline, TrainConfig(R=hmm_iters, seed=seed))]:
        t0 = time.perf_counter()
        model, _ = fit(sim.cohort, cfg)
        out[name] = {
            "seconds": round(time.perf_counter() - t0, 1),
            "rates": model.rates.tolist(),
            "rate_rel_err": (np.abs(model.rates - truth_rates) / truth_rates).tolist(),
            "mean_err_in_sd": (np.abs(model.emis.mean - truth_mean) / truth_sd).tolist(),
        }
    return out


if __name__ == "__main__":
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--n", type=int, default=500)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--iters", type=int, default=10)
    ap.add_argument("--attn-steps", type=int, default=50)
    args = ap.parse_args()
    print(json.dumps(recovery(args.n, args.seed, args.iters, args.attn_steps), indent=1))
