"""Shared builders for test models."""

import copy
import json

from ssm.model import parse_model

SIR = {
    "ssm_model": 1,
    "name": "sir",
    "compartments": [
        {"name": "S", "initial": "N - I0"},
        {"name": "I", "initial": "I0"},
        {"name": "R", "initial": 0},
    ],
    "population_size": "N",
    "parameters": [
        {"name": "N", "prior": {"dirac": 1000}, "role": "fixed"},
        {"name": "I0", "prior": {"dirac": 10}, "role": "fixed"},
        {"name": "beta", "prior": {"uniform": [0.05, 5]}, "transform": "log"},
        {"name": "gamma", "prior": {"uniform": [0.05, 5]}, "transform": "log"},
    ],
    "reactions": [
        {"from": "S", "to": "I", "rate": "beta*I/N", "accumulators": ["cases"]},
        {"from": "I", "to": "R", "rate": "gamma"},
    ],
    "observations": [
        {"name": "cases_obs", "distribution": "poisson", "mean": "cases"}
    ],
}

# local-level model: a drifting random walk observed through gaussian noise,
# linear in every coordinate so exact filters exist for cross-checks
LOCAL_LEVEL = {
    "ssm_model": 1,
    "name": "local_level",
    "compartments": [],
    "parameters": [
        {"name": "x0", "prior": {"normal": [0.0, 10.0]}, "role": "initial_condition"},
        {"name": "c_drift", "prior": {"normal": [0.0, 1.0]}},
        {"name": "q_sd", "prior": {"dirac": 0.5}, "role": "fixed"},
        {"name": "tau2", "prior": {"dirac": 1.0}, "role": "fixed"},
    ],
    "reactions": [],
    "diffusions": [
        {
            "name": "x",
            "transform": "identity",
            "drift": "c_drift",
            "volatility": "q_sd",
            "initial": "x0",
        }
    ],
    "observations": [
        {
            "name": "y",
            "distribution": "discretized_normal",
            "mean": "x",
            "variance": "tau2",
        }
    ],
}


def build(base, **overrides):
    doc = copy.deepcopy(base)
    doc.update(overrides)
    return parse_model(json.dumps(doc))


def sir_model(**overrides):
    return build(SIR, **overrides)


def local_level_model(**overrides):
    return build(LOCAL_LEVEL, **overrides)
