import math

import numpy as np
import pytest
from scipy.linalg import expm as scipy_expm
from scipy.special import logsumexp
from scipy.stats import norm

from passmodel.attention import init_attention
from passmodel.ctmc import GeneratorMatrix
from passmodel.data import BinaryChannel, Channel, FeatureSchema, PatientRecord, StaticChannel, Visit
from passmodel.model import EmissionParams, ModelParams

SCHEMA = FeatureSchema(
    continuous=(Channel("fev1", "%"), Channel("bmi", "kg/m2")),
    binary=(BinaryChannel("ivacaftor", "treatment"), BinaryChannel("diabetes", "anchor")),
    static=(StaticChannel("sex", "indicator"),),
)


def random_record(rng, M, pid="P1", schema=SCHEMA, missing=0.2, start=(1.0, 20.0)):
    t = rng.uniform(*start)
    visits = []
    for _ in range(M):
        values = {}
        for c in schema.continuous_names:
            if rng.random() >= missing:
                values[c] = float(rng.normal(60, 20))
        for b in schema.binary_names:
            if rng.random() >= missing:
                values[b] = int(rng.random() < 0.4)
        visits.append(Visit(float(t), values))
        t += rng.uniform(0.2, 3.0)
    return PatientRecord(pid, tuple(visits), {c.name: int(rng.random() < 0.5) for c in schema.static})


def random_model(rng, D=3, schema=SCHEMA, attn=None, hidden=4, open_ratio=0.5):
    rates = rng.uniform(0.05, 0.6, size=D - 1)
    C, B = len(schema.continuous), len(schema.binary)
    mean = np.sort(rng.normal(60, 20, size=(D, C)), axis=0)
    var = rng.uniform(50, 400, size=(D, C))
    prob = rng.uniform(0.05, 0.95, size=(D, B))
    if attn is None:
        attn = init_attention(schema.input_dim, hidden, 2, int(rng.integers(1 << 30)), open_ratio=open_ratio,
                              x_shift=np.full(schema.input_dim, 10.0), x_scale=np.full(schema.input_dim, 20.0))
        attn.arrays["w"] = attn.arrays["w"] * 8
    return ModelParams(schema, GeneratorMatrix(tuple(rates)), EmissionParams(mean, var, prob), attn)


# -- an independent continuous-time HMM, written directly from the definitions --

def ref_log_emission(model, record):
    s = model.schema
    out = np.zeros((len(record), model.D))
    for m, v in enumerate(record.visits):
        for z in range(model.D):
            tot = 0.0
            for c, name in enumerate(s.continuous_names):
                if name in v.values:
                    tot += norm.logpdf(v.values[name], model.emis.mean[z, c], math.sqrt(model.emis.var[z, c]))
            for b, name in enumerate(s.binary_names):
                if name in v.values:
                    p = model.emis.prob[z, b]
                    tot += math.log(p if v.values[name] == 1 else 1 - p)
            out[m, z] = tot
    return out


def ref_hmm(model, record):
    """Log-space forward-backward of the first-order chain; returns (loglik, smoothed, filtered)."""
    L = model.gen.dense
    logE = ref_log_emission(model, record)
    t = record.times
    M, D = logE.shape
    with np.errstate(divide="ignore"):
        logP = [np.log(np.maximum(scipy_expm(L * (t[m] - t[m - 1])), 0)) for m in range(1, M)]
        la = np.zeros((M, D))
        la[0] = np.log(np.maximum(scipy_expm(L * t[0])[0], 0)) + logE[0]
        for m in range(1, M):
            la[m] = logsumexp(la[m - 1][:, None] + logP[m - 1], axis=0) + logE[m]
        lb = np.zeros((M, D))
        for m in range(M - 2, -1, -1):
            lb[m] = logsumexp(logP[m] + (logE[m + 1] + lb[m + 1])[None, :], axis=1)
    ll = logsumexp(la[-1])
    smoothed = np.exp(la + lb - ll)
    filtered = np.exp(la - logsumexp(la, axis=1, keepdims=True))
    return ll, smoothed, filtered


def ref_hmm_risk(model, record, m, channel, horizon):
    prefix = PatientRecord(record.id, record.visits[:m + 1], record.statics, None)
    _, _, filtered = ref_hmm(model, prefix)
    K = scipy_expm(model.gen.dense * horizon)
    b = model.schema.binary_names.index(channel)
    return float(filtered[-1] @ K @ model.emis.prob[:, b])


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)
