"""Offline fitness metrics for candidate reward functions.

A candidate is scored on three axes, each a Pearson correlation between
per-trajectory cumulative reward and an independent trajectory statistic:

* survival fitness: correlation with a ground-truth score combining the
  terminal outcome and severity stability around its admission baseline;
* confidence fitness: negative correlation with the trajectory's mean
  measurement staleness (rewards earned on stale data are penalized);
* competence fitness: correlation with treatment efficiency, the
  homeostasis gain per step minus a dose penalty.

Degenerate correlations (either side constant) raise instead of returning
a value, so constant-reward candidates are rejected explicitly. All
reductions run in trajectory file order for bit-reproducible results.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from . import defaults
from .errors import ConfigError, DegenerateStatisticError, SchemaError, ValidationError
from .model import FeatureSpec, FeatureType, Step, Trajectory, TrajectoryDataset
from .rewards import RewardSpec, RewardTrace, trace


@dataclass(frozen=True)
class FitnessVector:
    """(survival, confidence, competence) fitness of one candidate."""

    j_surv: float
    j_conf: float
    j_comp: float

    def __post_init__(self):
        for name in ("j_surv", "j_conf", "j_comp"):
            v = getattr(self, name)
            if not math.isfinite(v) or not (-1.0 <= v <= 1.0):
                raise ValidationError(f"{name} must be a finite value in [-1,1], got {v}")

    def as_tuple(self) -> tuple[float, float, float]:
        return (self.j_surv, self.j_conf, self.j_comp)


@dataclass
class CompMetricConfig:
    """Tunables of the fitness metrics.

    iqr and action_max are per-dataset caches; leave them empty and call
    prepare() (or let fitness() do it) to fill them from a dataset.
    """

    epsilon: float = defaults.STABILITY_EPSILON
    k: float = defaults.HOMEOSTASIS_K
    alpha: float = defaults.DOSE_ALPHA
    aggregation: str = "mean"
    iqr: dict[str, float] = field(default_factory=dict)
    action_max: dict[str, float] = field(default_factory=dict)

    def __post_init__(self):
        if self.epsilon <= 0:
            raise ConfigError("epsilon must be positive")
        if self.k <= 0:
            raise ConfigError("k must be positive")
        if self.alpha < 0:
            raise ConfigError("alpha must be nonnegative")
        if self.aggregation not in ("mean", "sum"):
            raise ConfigError("aggregation must be 'mean' or 'sum'")

    def prepare(self, dataset: TrajectoryDataset) -> "CompMetricConfig":
        """Return a copy with iqr/action_max filled in from the dataset."""
        iqr = dict(self.iqr)
        for fid in dataset.feature_schema:
            if fid not in iqr:
                iqr[fid] = _feature_iqr(dataset, fid)
        action_max = dict(self.action_max)
        for aid, spec in dataset.action_schema.items():
            action_max.setdefault(aid, spec.max_value)
        return replace(self, iqr=iqr, action_max=action_max)


def _feature_iqr(dataset: TrajectoryDataset, fid: str) -> float:
    """Interquartile range of the fresh (staleness 0) values of one feature.

    Falls back to all values if nothing is fresh, and to 1.0 (the full
    normalized scale) if the spread is degenerate.
    """
    fresh, everything = [], []
    for traj in dataset.trajectories:
        for step in traj.steps:
            obs = step.observations.get(fid)
            if obs is None:
                continue
            everything.append(obs.value)
            if obs.staleness == 0:
                fresh.append(obs.value)
    values = fresh if fresh else everything
    if not values:
        return 1.0
    q25, q75 = np.quantile(values, [0.25, 0.75])
    spread = float(q75 - q25)
    return spread if spread > 0.0 else 1.0


def pearson(xs: Sequence[float], ys: Sequence[float]) -> float:
    """Pearson correlation; raises on degenerate (zero-variance) input."""
    return _pearson_named(xs, ys, "x", "y")


def _pearson_named(xs, ys, xname: str, yname: str) -> float:
    x = np.asarray(xs, dtype=float)
    y = np.asarray(ys, dtype=float)
    if x.shape != y.shape or x.size < 2:
        raise ValidationError("pearson needs two equal-length sequences of size >= 2")
    dx = x - x.mean()
    dy = y - y.mean()
    sx = math.sqrt(float(np.dot(dx, dx)))
    sy = math.sqrt(float(np.dot(dy, dy)))
    if sx == 0.0:
        raise DegenerateStatisticError(f"{xname} is constant; correlation undefined")
    if sy == 0.0:
        raise DegenerateStatisticError(f"{yname} is constant; correlation undefined")
    r = float(np.dot(dx, dy)) / (sx * sy)
    return min(1.0, max(-1.0, r))


# ---------------------------------------------------------------------------
# Survival fitness
# ---------------------------------------------------------------------------


def ground_truth_score(trajectory: Trajectory, epsilon: float = defaults.STABILITY_EPSILON) -> float:
    """Outcome plus stability: 1(survived) + fraction of steps whose severity
    score stayed within epsilon of the admission baseline. Range [0, 2]."""
    steps = trajectory.steps
    stable = sum(1 for s in steps if abs(s.sofa - trajectory.sofa_baseline) < epsilon)
    return float(trajectory.survived) + stable / len(steps)


def j_surv(
    dataset: TrajectoryDataset,
    traces: Sequence[RewardTrace],
    epsilon: float = defaults.STABILITY_EPSILON,
) -> float:
    returns = [t.cumulative for t in traces]
    truth = [ground_truth_score(traj, epsilon) for traj in dataset.trajectories]
    return _pearson_named(returns, truth, "cumulative reward", "ground-truth score")


# ---------------------------------------------------------------------------
# Confidence fitness
# ---------------------------------------------------------------------------


def uncertainty_score(trajectory: Trajectory, feature_ids: Sequence[str]) -> float:
    """Mean staleness over all steps and the given features."""
    if not feature_ids:
        raise ValidationError("uncertainty_score needs a nonempty feature set")
    total = 0.0
    count = 0
    for step in trajectory.steps:
        for fid in feature_ids:
            obs = step.observations.get(fid)
            if obs is None:
                raise SchemaError(
                    f"patient {trajectory.patient_id!r}: feature {fid!r} absent at t={step.t}"
                )
            total += obs.staleness
            count += 1
    return total / count


def j_conf(
    dataset: TrajectoryDataset,
    traces: Sequence[RewardTrace],
    feature_ids: Sequence[str],
) -> float:
    returns = [t.cumulative for t in traces]
    staleness = [uncertainty_score(traj, feature_ids) for traj in dataset.trajectories]
    return -_pearson_named(returns, staleness, "cumulative reward", "uncertainty score")


# ---------------------------------------------------------------------------
# Competence fitness
# ---------------------------------------------------------------------------


def _logistic(z: float) -> float:
    if z >= 0:
        return 1.0 / (1.0 + math.exp(-z))
    e = math.exp(z)
    return e / (1.0 + e)


def homeostasis_feature(
    value: float,
    ftype: FeatureType,
    interval: tuple[float, float] | None,
    iqr: float,
    k: float = defaults.HOMEOSTASIS_K,
) -> float:
    """Unified homeostasis score in [0,1] for one normalized value.

    NormalRange features score 1 inside the healthy interval and a logistic
    of the IQR-normalized distance outside it; directional features score a
    logistic of the value itself (lower-better decreasing, higher-better
    increasing).
    """
    if ftype is FeatureType.NORMAL_RANGE:
        if interval is None:
            raise ConfigError("NormalRange homeostasis needs a healthy interval")
        lo, hi = interval
        if lo <= value <= hi:
            return 1.0
        d = (lo - value) if value < lo else (value - hi)
        return _logistic(k * (0.5 - d / iqr))
    if ftype is FeatureType.DIRECTIONAL_LOW:
        return _logistic(k * (0.5 - value))
    return _logistic(-k * (0.5 - value))


def homeostasis_state(
    step: Step,
    feature_ids: Sequence[str],
    cfg: CompMetricConfig,
    feature_schema: dict[str, FeatureSpec],
) -> float:
    """Unweighted mean homeostasis over the given features at one step."""
    if not feature_ids:
        raise ValidationError("homeostasis_state needs a nonempty feature set")
    total = 0.0
    for fid in feature_ids:
        obs = step.observations.get(fid)
        if obs is None:
            raise SchemaError(f"feature {fid!r} absent at t={step.t}")
        spec = feature_schema[fid]
        total += homeostasis_feature(
            obs.value, spec.feature_type, spec.healthy_interval, cfg.iqr.get(fid, 1.0), cfg.k
        )
    return total / len(feature_ids)


def _mean_dose(action: dict[str, float], action_max: dict[str, float]) -> float:
    """Mean normalized magnitude over all declared action dimensions."""
    if not action_max:
        return 0.0
    return sum(action.get(aid, 0.0) / mx for aid, mx in action_max.items()) / len(action_max)


def efficiency(
    prev: Step,
    nxt: Step,
    feature_ids: Sequence[str],
    cfg: CompMetricConfig,
    feature_schema: dict[str, FeatureSpec],
) -> float:
    """Homeostasis gain of one transition minus the dose penalty."""
    gain = homeostasis_state(nxt, feature_ids, cfg, feature_schema) - homeostasis_state(
        prev, feature_ids, cfg, feature_schema
    )
    return gain - cfg.alpha * _mean_dose(prev.action, cfg.action_max)


def _trajectory_efficiency(
    traj: Trajectory,
    feature_ids: Sequence[str],
    cfg: CompMetricConfig,
    feature_schema: dict[str, FeatureSpec],
) -> float:
    scores = [
        homeostasis_state(s, feature_ids, cfg, feature_schema) for s in traj.steps
    ]
    per_step = [
        scores[i + 1] - scores[i] - cfg.alpha * _mean_dose(traj.steps[i].action, cfg.action_max)
        for i in range(len(traj.steps) - 1)
    ]
    if cfg.aggregation == "sum":
        return sum(per_step)
    return sum(per_step) / len(per_step)


def j_comp(
    dataset: TrajectoryDataset,
    traces: Sequence[RewardTrace],
    feature_ids: Sequence[str],
    cfg: CompMetricConfig,
) -> float:
    cfg = cfg.prepare(dataset)
    returns = [t.cumulative for t in traces]
    eff = [
        _trajectory_efficiency(traj, feature_ids, cfg, dataset.feature_schema)
        for traj in dataset.trajectories
    ]
    return _pearson_named(returns, eff, "cumulative reward", "efficiency score")


# ---------------------------------------------------------------------------
# Combined scoring
# ---------------------------------------------------------------------------


def fitness(
    dataset: TrajectoryDataset,
    spec: RewardSpec,
    cfg: CompMetricConfig | None = None,
    feature_ids: Sequence[str] | None = None,
) -> FitnessVector:
    """Score one reward spec on the dataset; all three axes share one set of
    traces. Defaults the feature set to the spec's own survival features."""
    if len(dataset.trajectories) < 2:
        raise ValidationError("fitness needs at least 2 trajectories")
    cfg = (cfg or CompMetricConfig()).prepare(dataset)
    fids = list(feature_ids) if feature_ids is not None else sorted(spec.survival)
    traces = [trace(traj, spec) for traj in dataset.trajectories]
    return fitness_of_traces(dataset, traces, cfg=cfg, feature_ids=fids)


def fitness_of_traces(
    dataset: TrajectoryDataset,
    traces: Sequence[RewardTrace],
    cfg: CompMetricConfig | None = None,
    feature_ids: Sequence[str] | None = None,
) -> FitnessVector:
    """Score precomputed traces (used for the reference reward models)."""
    cfg = (cfg or CompMetricConfig()).prepare(dataset)
    fids = list(feature_ids) if feature_ids is not None else dataset.feature_ids()
    return FitnessVector(
        j_surv=j_surv(dataset, traces, cfg.epsilon),
        j_conf=j_conf(dataset, traces, fids),
        j_comp=j_comp(dataset, traces, fids, cfg),
    )
