"""Phased attentive state-space models of disease progression."""

from .attention import AttentionNetParams, OscillationTriple, compute_attention, init_attention, time_gate
from .ctmc import GeneratorMatrix, expm, mean_sojourn
from .data import BinaryChannel, Channel, Cohort, FeatureSchema, PatientRecord, StaticChannel, Visit
from .data import load_cohort, save_cohort
from .evaluate import attention_by_stage, auc_roc, compare_models, cross_validated_eval
from .inference import InferenceConfig, forward_backward, map_decode, predict_risk
from .learning import TrainConfig, em_fit, fit_hmm_baseline, init_params, load_checkpoint, save_checkpoint
from .model import (EmissionParams, FixedAttention, LagAttention, LastVisitAttention, ModelParams,
                    complete_loglik, transition_prob, what_if_toggle)
from .simulate import ScenarioConfig, chi_square_markov_test, simulate_cohort

__version__ = "0.1.0"
