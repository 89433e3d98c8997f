"""Weighted importance sampling over logged trajectories.

Policies enter as probability tables over the logged transitions (one
evaluation-policy and one behavior-policy probability per logged action),
the minimal interface off-policy evaluation needs; no policy models are
fitted here. Weights are whole-trajectory likelihood-ratio products, the
estimate is self-normalized (biased for finite samples but consistent),
and confidence intervals come from trajectory-level percentile bootstrap.
Every bootstrap resample draws from its own counter-derived generator, so
results do not depend on evaluation order.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import defaults
from .errors import DegenerateStatisticError, FormatError, SchemaError, ValidationError
from .model import Trajectory, TrajectoryDataset
from .rewards import RewardTrace


@dataclass
class PolicyProbTable:
    """Per logged transition, the probability of the logged action under the
    evaluation and behavior policies. Keyed on (patient_id, t) where t is
    the absolute time index of the step whose action was taken."""

    probs: dict[tuple[str, int], tuple[float, float]]

    def validate(self) -> None:
        for (pid, t), (p_eval, p_behavior) in self.probs.items():
            if not (0.0 <= p_eval <= 1.0):
                raise ValidationError(f"({pid!r}, t={t}): p_eval {p_eval} out of [0,1]")
            if not (0.0 < p_behavior <= 1.0):
                raise ValidationError(
                    f"({pid!r}, t={t}): p_behavior {p_behavior} must lie in (0,1] "
                    "(logged actions need behavior-policy support)"
                )

    def lookup(self, patient_id: str, t: int) -> tuple[float, float]:
        try:
            return self.probs[(patient_id, t)]
        except KeyError:
            raise SchemaError(
                f"no policy probabilities for patient {patient_id!r} at t={t}"
            ) from None


@dataclass
class WisEstimate:
    value: float
    ci_low: float
    ci_high: float
    n_effective: float
    skipped_resamples: int = 0


def identity_prob_table(dataset: TrajectoryDataset) -> PolicyProbTable:
    """Table with p_eval == p_behavior == 1 everywhere: evaluates the logged
    (clinician) policy itself, reducing the estimator to the mean return."""
    probs = {}
    for traj in dataset.trajectories:
        for step in traj.steps[:-1]:
            probs[(traj.patient_id, step.t)] = (1.0, 1.0)
    return PolicyProbTable(probs)


def trajectory_weight(
    trajectory: Trajectory, probs: PolicyProbTable, max_ratio: float | None = None
) -> float:
    """Product of per-transition likelihood ratios p_eval / p_behavior.

    max_ratio optionally caps each per-step ratio; disabled (None) gives the
    textbook estimator.
    """
    weight = 1.0
    for step in trajectory.steps[:-1]:
        p_eval, p_behavior = probs.lookup(trajectory.patient_id, step.t)
        if p_behavior <= 0.0:
            raise ValidationError(
                f"patient {trajectory.patient_id!r} t={step.t}: behavior probability is 0 "
                "(support violation)"
            )
        ratio = p_eval / p_behavior
        if max_ratio is not None:
            ratio = min(ratio, max_ratio)
        weight *= ratio
    return weight


def _weights_and_returns(
    dataset: TrajectoryDataset,
    traces: Sequence[RewardTrace],
    probs: PolicyProbTable,
    max_ratio: float | None,
) -> tuple[np.ndarray, np.ndarray]:
    if len(traces) != len(dataset.trajectories):
        raise ValidationError("one trace per trajectory is required")
    weights = np.array(
        [trajectory_weight(traj, probs, max_ratio) for traj in dataset.trajectories]
    )
    returns = np.array([t.cumulative for t in traces])
    return weights, returns


def wis(
    dataset: TrajectoryDataset,
    traces: Sequence[RewardTrace],
    probs: PolicyProbTable,
    max_ratio: float | None = None,
) -> float:
    """Self-normalized importance-sampling estimate of the evaluation
    policy's expected return: sum(w_i * R_i) / sum(w_i)."""
    weights, returns = _weights_and_returns(dataset, traces, probs, max_ratio)
    total = weights.sum()
    if total <= 0.0:
        raise DegenerateStatisticError(
            "all trajectory weights are zero; the estimate is undefined"
        )
    return float(np.dot(weights, returns) / total)


def bootstrap_ci(
    dataset: TrajectoryDataset,
    traces: Sequence[RewardTrace],
    probs: PolicyProbTable,
    level: float = defaults.BOOTSTRAP_LEVEL,
    resamples: int = defaults.BOOTSTRAP_RESAMPLES,
    seed: int = 0,
    max_ratio: float | None = None,
) -> WisEstimate:
    """Percentile bootstrap over trajectory-level resamples.

    Deterministic for a fixed seed: resample b draws from a generator keyed
    on (seed, b). Resamples whose weights all vanish are skipped and counted.
    """
    if not (0.0 < level < 1.0):
        raise ValidationError("level must lie in (0,1)")
    if resamples < 1:
        raise ValidationError("resamples must be positive")
    if len(dataset.trajectories) < 2:
        raise ValidationError("bootstrap_ci needs at least 2 trajectories")
    weights, returns = _weights_and_returns(dataset, traces, probs, max_ratio)
    total = weights.sum()
    if total <= 0.0:
        raise DegenerateStatisticError("all trajectory weights are zero")
    value = float(np.dot(weights, returns) / total)
    n = len(weights)

    estimates = []
    skipped = 0
    for b in range(resamples):
        rng = np.random.default_rng(np.random.SeedSequence([seed, b]))
        idx = rng.integers(0, n, size=n)
        w = weights[idx]
        sw = w.sum()
        if sw <= 0.0:
            skipped += 1
            continue
        estimates.append(float(np.dot(w, returns[idx]) / sw))
    if not estimates:
        raise DegenerateStatisticError("every bootstrap resample was degenerate")
    alpha = (1.0 - level) / 2.0
    ci_low, ci_high = np.quantile(estimates, [alpha, 1.0 - alpha])
    return WisEstimate(
        value=value,
        ci_low=float(ci_low),
        ci_high=float(ci_high),
        n_effective=float(total**2 / np.dot(weights, weights)),
        skipped_resamples=skipped,
    )


@dataclass(frozen=True)
class MortalityBin:
    bin_index: int
    reward_low: float
    reward_high: float
    mortality: float
    count: int


def mortality_curve(
    dataset: TrajectoryDataset,
    traces: Sequence[RewardTrace],
    n_bins: int = defaults.MORTALITY_BINS,
) -> list[MortalityBin]:
    """Bucket trajectories into cumulative-reward quantile bins and report
    the observed death fraction per bin (plot-ready rows, low reward first)."""
    if n_bins < 1:
        raise ValidationError("n_bins must be positive")
    if len(dataset.trajectories) < n_bins:
        raise ValidationError("need at least one trajectory per bin")
    if len(traces) != len(dataset.trajectories):
        raise ValidationError("one trace per trajectory is required")
    returns = np.array([t.cumulative for t in traces])
    order = np.argsort(returns, kind="stable")
    rows = []
    for b, chunk in enumerate(np.array_split(order, n_bins)):
        sub_returns = returns[chunk]
        deaths = sum(1 for i in chunk if not dataset.trajectories[int(i)].survived)
        rows.append(
            MortalityBin(
                bin_index=b,
                reward_low=float(sub_returns.min()),
                reward_high=float(sub_returns.max()),
                mortality=deaths / len(chunk),
                count=len(chunk),
            )
        )
    return rows


# ---------------------------------------------------------------------------
# Probability-table file format: JSON map patient_id -> [{t, p_eval, p_behavior}]
# ---------------------------------------------------------------------------


def prob_table_from_json(doc: dict) -> PolicyProbTable:
    if not isinstance(doc, dict):
        raise FormatError("probability table must be a JSON object")
    probs = {}
    for pid, rows in doc.items():
        if not isinstance(rows, list):
            raise FormatError(f"patient {pid!r}: expected a list of transition entries")
        for row in rows:
            try:
                key = (pid, int(row["t"]))
                probs[key] = (float(row["p_eval"]), float(row["p_behavior"]))
            except (KeyError, TypeError, ValueError) as exc:
                raise FormatError(
                    f"patient {pid!r}: each entry needs t, p_eval, p_behavior"
                ) from exc
    table = PolicyProbTable(probs)
    table.validate()
    return table


def prob_table_to_json(table: PolicyProbTable) -> dict:
    doc: dict[str, list] = {}
    for (pid, t), (p_eval, p_behavior) in sorted(table.probs.items()):
        doc.setdefault(pid, []).append({"t": t, "p_eval": p_eval, "p_behavior": p_behavior})
    return doc


def load_prob_table(path: str | Path) -> PolicyProbTable:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as exc:
        raise FormatError(f"cannot read probability table {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: invalid JSON at line {exc.lineno}: {exc.msg}") from exc
    return prob_table_from_json(doc)


def save_prob_table(table: PolicyProbTable, path: str | Path) -> None:
    Path(path).write_text(
        json.dumps(prob_table_to_json(table), indent=2) + "\n", encoding="utf-8"
    )
