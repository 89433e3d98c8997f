"""Shared fixtures and independent oracles used across the suite."""

from __future__ import annotations

import numpy as np
import pytest

from tridrive.model import (
    ActionSpec,
    FeatureSpec,
    FeatureType,
    Observation,
    Step,
    Trajectory,
    TrajectoryDataset,
)
from tridrive.rewards import RewardSpec, SurvivalConfig, SurvivalForm
from tridrive.synth import CohortConfig, generate


def make_step(t, values, staleness=None, action=None, sofa=5.0):
    staleness = staleness or {}
    return Step(
        t=t,
        sofa=sofa,
        observations={
            fid: Observation(value=v, staleness=staleness.get(fid, 0))
            for fid, v in values.items()
        },
        action=action or {},
    )


def make_dataset(trajectories, feature_types=None, action_max=None):
    """Build a dataset whose schema is inferred from the first trajectory."""
    feature_types = feature_types or {}
    fids = sorted(trajectories[0].steps[0].observations)
    schema = {}
    for fid in fids:
        ftype = feature_types.get(fid, FeatureType.NORMAL_RANGE)
        interval = (0.4, 0.6) if ftype is FeatureType.NORMAL_RANGE else None
        schema[fid] = FeatureSpec(0.0, 1.0, ftype, interval)
    actions = {}
    for traj in trajectories:
        for step in traj.steps:
            for aid in step.action:
                actions.setdefault(aid, 4.0)
    if action_max:
        actions.update(action_max)
    return TrajectoryDataset(
        trajectories=trajectories,
        feature_schema=schema,
        action_schema={aid: ActionSpec(max_value=mx) for aid, mx in actions.items()},
    )


def simple_spec(fids=("f1",), gamma=0.99, lam=0.0, half_life=48.0, tau_conf=6.0,
                action_max=None, mu=0.5, sigma=0.1):
    return RewardSpec(
        survival={
            fid: SurvivalConfig(form=SurvivalForm.BELL, mu=mu, sigma=sigma) for fid in fids
        },
        confidence_tau={fid: tau_conf for fid in fids},
        action_max=action_max or {"drug_a": 4.0, "drug_b": 4.0},
        decay_half_life=half_life,
        gamma=gamma,
        lam=lam,
    )


@pytest.fixture
def two_patient_dataset():
    trajs = [
        Trajectory(
            patient_id="p1",
            steps=[
                make_step(0, {"f1": 0.5, "f2": 0.2}, sofa=6.0, action={"drug_a": 1}),
                make_step(1, {"f1": 0.55, "f2": 0.3}, {"f2": 2}, sofa=5.0, action={"drug_a": 2}),
                make_step(2, {"f1": 0.6, "f2": 0.25}, sofa=4.0, action={"drug_a": 0}),
            ],
            survived=True,
            sofa_baseline=6.0,
        ),
        Trajectory(
            patient_id="p2",
            steps=[
                make_step(0, {"f1": 0.3, "f2": 0.8}, sofa=10.0, action={"drug_a": 3}),
                make_step(2, {"f1": 0.2, "f2": 0.9}, {"f1": 1}, sofa=12.0, action={"drug_a": 4}),
            ],
            survived=False,
            sofa_baseline=10.0,
        ),
    ]
    return make_dataset(
        trajs,
        feature_types={"f2": FeatureType.DIRECTIONAL_LOW},
    )


# Session-scoped synthetic cohorts: these back both the unit tests on the
# generator couplings and the acceptance experiments.


@pytest.fixture(scope="session")
def cohort500():
    return generate(CohortConfig(n_patients=500, seed=42))


@pytest.fixture(scope="session")
def cohort_overtreated():
    return generate(CohortConfig(n_patients=500, seed=42, overtreatment_prob=0.5))


@pytest.fixture(scope="session")
def cohort_stale():
    return generate(CohortConfig(n_patients=500, seed=42, staleness_gradient=9.0))


# ---------------------------------------------------------------------------
# Independent oracle: tabular value iteration for policy-invariance checks.
# ---------------------------------------------------------------------------


def value_iteration(transition, reward, gamma=0.99, tol=1e-10, max_iter=200_000):
    """Greedy policy of a tabular MDP.

    transition: (S, A, S) array of probabilities; reward: (S, A) expected
    rewards. Returns (greedy policy array, optimal values).
    """
    n_states = transition.shape[0]
    values = np.zeros(n_states)
    for _ in range(max_iter):
        q = reward + gamma * np.einsum("sat,t->sa", transition, values)
        new_values = q.max(axis=1)
        if np.max(np.abs(new_values - values)) < tol:
            values = new_values
            break
        values = new_values
    q = reward + gamma * np.einsum("sat,t->sa", transition, values)
    return q.argmax(axis=1), values


def random_mdp(rng, n_states=5, n_actions=2):
    """Random dense MDP with uniform-ish transition kernels."""
    transition = rng.random((n_states, n_actions, n_states))
    transition /= transition.sum(axis=2, keepdims=True)
    reward = rng.normal(size=(n_states, n_actions))
    return transition, reward


def shaped_reward(transition, reward, potential, gamma):
    """Expected reward under base + potential-difference shaping."""
    return reward + gamma * np.einsum("sat,t->sa", transition, potential) - potential[:, None]
