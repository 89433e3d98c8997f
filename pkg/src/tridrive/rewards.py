"""Declarative potential-based reward specifications and their evaluation.

A RewardSpec describes one candidate reward function: per-feature survival
curves, per-feature confidence decay for stale measurements, a strategic
time decay, and an action cost. The step reward is the discounted potential
difference minus the weighted action cost,

    r = gamma * phi(next) - phi(prev) - lambda * cost(prev.action)

so that the shaping part telescopes over a trajectory while the cost part
stays path-dependent. Four reference reward models (outcome-only, process,
combined, and normalized per-step credit assignment) are provided for
comparison. All operations are pure functions of immutable inputs.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from enum import Enum
from pathlib import Path

from . import defaults
from .errors import FormatError, SchemaError, ValidationError
from .model import Step, Trajectory


class SurvivalForm(str, Enum):
    BELL = "bell"
    DECAY_LOW = "decay_low"
    DECAY_HIGH = "decay_high"
    ASYMMETRIC_ABOVE = "asymmetric_above"


# Parameters each survival form requires (weight is always required).
_FORM_PARAMS = {
    SurvivalForm.BELL: ("mu", "sigma"),
    SurvivalForm.DECAY_LOW: ("tau",),
    SurvivalForm.DECAY_HIGH: ("tau",),
    SurvivalForm.ASYMMETRIC_ABOVE: ("mu", "sigma"),
}


@dataclass(frozen=True)
class SurvivalConfig:
    """Survival curve for one feature.

    Exactly the parameters the chosen form needs may be set: bell and
    asymmetric_above use (mu, sigma); decay_low and decay_high use tau.
    """

    form: SurvivalForm
    mu: float | None = None
    sigma: float | None = None
    tau: float | None = None
    weight: float = 1.0

    def __post_init__(self):
        needed = _FORM_PARAMS[self.form]
        for name in ("mu", "sigma", "tau"):
            have = getattr(self, name) is not None
            if have and name not in needed:
                raise ValidationError(f"survival form {self.form.value}: unexpected parameter {name!r}")
            if not have and name in needed:
                raise ValidationError(f"survival form {self.form.value}: missing parameter {name!r}")
        if self.sigma is not None and self.sigma <= 0:
            raise ValidationError("sigma must be positive")
        if self.tau is not None and self.tau <= 0:
            raise ValidationError("tau must be positive")
        if self.mu is not None and not (0.0 <= self.mu <= 1.0):
            raise ValidationError("mu must lie in [0,1]")
        if self.weight <= 0:
            raise ValidationError("weight must be positive")


@dataclass
class RewardSpec:
    """One candidate reward function in declarative form."""

    survival: dict[str, SurvivalConfig]
    confidence_tau: dict[str, float]
    action_max: dict[str, float]
    decay_half_life: float = defaults.DECAY_HALF_LIFE
    gamma: float = defaults.GAMMA
    lam: float = defaults.LAMBDA
    action_cost_scale: float = defaults.ACTION_COST_SCALE
    normalize_potential: bool = True

    def validate(self) -> None:
        if set(self.survival) != set(self.confidence_tau):
            raise ValidationError("survival and confidence_tau must cover the same features")
        for fid, tau in self.confidence_tau.items():
            if tau <= 0:
                raise ValidationError(f"confidence_tau[{fid!r}] must be positive")
        if self.decay_half_life <= 0:
            raise ValidationError("decay_half_life must be positive")
        if not (0.0 < self.gamma <= 1.0):
            raise ValidationError("gamma must lie in (0,1]")
        if self.lam < 0:
            raise ValidationError("lambda must be nonnegative")
        if self.action_cost_scale < 0:
            raise ValidationError("action_cost_scale must be nonnegative")
        for aid, mx in self.action_max.items():
            if mx <= 0:
                raise ValidationError(f"action_max[{aid!r}] must be positive")


@dataclass
class RewardTrace:
    """Per-step rewards and potentials of one trajectory.

    rewards[i] belongs to the transition steps[i] -> steps[i+1];
    potentials[i] belongs to steps[i]. cumulative is the discounted sum of
    rewards where the discount exponent is the transition position (not
    the absolute hour).
    """

    rewards: list[float]
    potentials: list[float]
    cumulative: float


def _discounted_sum(rewards: list[float], gamma: float) -> float:
    return sum(r * gamma**i for i, r in enumerate(rewards))


def survival_score(value: float, cfg: SurvivalConfig) -> float:
    """Score one normalized feature value in [0,1] against its survival curve."""
    if cfg.form is SurvivalForm.BELL:
        z = (value - cfg.mu) / cfg.sigma
        score = math.exp(-0.5 * z * z)
    elif cfg.form is SurvivalForm.DECAY_LOW:
        score = math.exp(-value / cfg.tau)
    elif cfg.form is SurvivalForm.DECAY_HIGH:
        score = math.exp(-(1.0 - value) / cfg.tau)
    else:  # ASYMMETRIC_ABOVE: flat at 1 up to mu, half-life sigma above it
        if value <= cfg.mu:
            score = 1.0
        else:
            score = math.exp(-(math.log(2.0) / cfg.sigma) * (value - cfg.mu))
    # guard against floating-point overshoot
    return min(1.0, max(0.0, score))


def confidence_weight(staleness: float, tau: float) -> float:
    """Trust in a measurement that is `staleness` hours old: exp(-dt/tau)."""
    return math.exp(-staleness / tau)


def time_decay(t: float, half_life: float) -> float:
    """Strategic decay 0.5 ** (t / half_life); halves every half_life steps."""
    return 0.5 ** (t / half_life)


def competence_cost(action: dict[str, float], spec: RewardSpec) -> float:
    """Dose penalty: action_cost_scale times the sum of normalized levels."""
    total = 0.0
    for aid, level in action.items():
        if aid not in spec.action_max:
            raise SchemaError(f"action {aid!r} not declared in the reward spec's action_max")
        total += level / spec.action_max[aid]
    return spec.action_cost_scale * total


def potential(step: Step, spec: RewardSpec) -> float:
    """Health potential of one step.

    Weighted sum over the spec's features of survival score times
    confidence weight, normalized by the total weight (unless the spec
    disables normalization), then multiplied by the strategic decay.
    A feature missing from the step contributes nothing and is excluded
    from the normalizer; if every feature is missing the base potential
    is the neutral 0.5.
    """
    num = 0.0
    den = 0.0
    for fid, cfg in spec.survival.items():
        obs = step.observations.get(fid)
        if obs is None:
            continue
        score = survival_score(obs.value, cfg)
        trust = confidence_weight(obs.staleness, spec.confidence_tau[fid])
        num += cfg.weight * score * trust
        den += cfg.weight
    if den == 0.0:
        base = 0.5
    elif spec.normalize_potential:
        base = min(1.0, max(0.0, num / den))
    else:
        base = num
    return time_decay(step.t, spec.decay_half_life) * base


def reward(prev: Step, nxt: Step, spec: RewardSpec) -> float:
    """Step reward: gamma * phi(next) - phi(prev) - lambda * cost(prev.action)."""
    shaped = spec.gamma * potential(nxt, spec) - potential(prev, spec)
    if spec.lam == 0.0:
        return shaped
    return shaped - spec.lam * competence_cost(prev.action, spec)


def trace(trajectory: Trajectory, spec: RewardSpec) -> RewardTrace:
    """Evaluate the spec over every consecutive step pair of one trajectory."""
    potentials = [potential(s, spec) for s in trajectory.steps]
    rewards = []
    for i in range(len(trajectory.steps) - 1):
        shaped = spec.gamma * potentials[i + 1] - potentials[i]
        if spec.lam != 0.0:
            shaped -= spec.lam * competence_cost(trajectory.steps[i].action, spec)
        rewards.append(shaped)
    return RewardTrace(
        rewards=rewards,
        potentials=potentials,
        cumulative=_discounted_sum(rewards, spec.gamma),
    )


# ---------------------------------------------------------------------------
# Reference reward models. These carry no potential model, so their traces
# hold all-zero potentials.
# ---------------------------------------------------------------------------

TERMINAL_REWARD = 100.0
CREDIT_BUDGET = 15.0


def baseline_orm(trajectory: Trajectory, gamma: float = defaults.GAMMA) -> RewardTrace:
    """Outcome-only: zero everywhere except +/-100 on the final transition."""
    n = len(trajectory.steps) - 1
    rewards = [0.0] * n
    rewards[-1] = TERMINAL_REWARD if trajectory.survived else -TERMINAL_REWARD
    return RewardTrace(
        rewards=rewards,
        potentials=[0.0] * len(trajectory.steps),
        cumulative=_discounted_sum(rewards, gamma),
    )


def baseline_prm(
    trajectory: Trajectory, gamma: float = defaults.GAMMA, scale: float = 1.0
) -> RewardTrace:
    """Process reward: a drop in the severity score is rewarded stepwise."""
    steps = trajectory.steps
    rewards = [
        -scale * (steps[i + 1].sofa - steps[i].sofa) for i in range(len(steps) - 1)
    ]
    return RewardTrace(
        rewards=rewards,
        potentials=[0.0] * len(steps),
        cumulative=_discounted_sum(rewards, gamma),
    )


def baseline_oprm(
    trajectory: Trajectory, gamma: float = defaults.GAMMA, scale: float = 1.0
) -> RewardTrace:
    """Outcome + process: elementwise sum of the two reference traces."""
    orm = baseline_orm(trajectory, gamma)
    prm = baseline_prm(trajectory, gamma, scale)
    rewards = [a + b for a, b in zip(orm.rewards, prm.rewards)]
    return RewardTrace(
        rewards=rewards,
        potentials=[0.0] * len(trajectory.steps),
        cumulative=_discounted_sum(rewards, gamma),
    )


def baseline_llmr_normalize(raw_credits: list[float], survived: bool) -> list[float]:
    """Rescale per-step credits so they sum to +15 (survivor) or -15.

    Zero entries are preserved. When the raw sum is nonzero the credits are
    scaled; when it is zero but some entries are not, the nonzero entries
    are shifted by a common offset instead.
    """
    if all(c == 0.0 for c in raw_credits):
        raise ValidationError("cannot rescale all-zero credits")
    target = CREDIT_BUDGET if survived else -CREDIT_BUDGET
    total = sum(raw_credits)
    if total != 0.0:
        factor = target / total
        return [c * factor for c in raw_credits]
    n_nonzero = sum(1 for c in raw_credits if c != 0.0)
    offset = target / n_nonzero
    return [c + offset if c != 0.0 else 0.0 for c in raw_credits]


# ---------------------------------------------------------------------------
# Spec (de)serialization: UTF-8 JSON mirroring the fields exactly. Unknown
# keys are rejected so machine-produced specs fail loudly.
# ---------------------------------------------------------------------------

_TOP_KEYS = {
    "survival",
    "confidence_tau",
    "action_max",
    "decay_half_life",
    "gamma",
    "lambda",
    "action_cost_scale",
    "normalize_potential",
}
_REQUIRED_TOP_KEYS = {"survival", "confidence_tau", "action_max"}
_SURVIVAL_KEYS = {"form", "mu", "sigma", "tau", "weight"}


def _survival_from_json(fid: str, doc: dict) -> SurvivalConfig:
    unknown = set(doc) - _SURVIVAL_KEYS
    if unknown:
        raise FormatError(f"survival[{fid!r}]: unknown keys {sorted(unknown)}")
    if "form" not in doc:
        raise FormatError(f"survival[{fid!r}]: missing 'form'")
    try:
        form = SurvivalForm(doc["form"])
    except ValueError as exc:
        raise FormatError(f"survival[{fid!r}]: unknown form {doc['form']!r}") from exc
    kwargs = {k: float(doc[k]) for k in ("mu", "sigma", "tau") if k in doc}
    return SurvivalConfig(form=form, weight=float(doc.get("weight", 1.0)), **kwargs)


def reward_spec_from_json(doc: dict) -> RewardSpec:
    if not isinstance(doc, dict):
        raise FormatError("reward spec must be a JSON object")
    unknown = set(doc) - _TOP_KEYS
    if unknown:
        raise FormatError(f"reward spec: unknown keys {sorted(unknown)}")
    missing = _REQUIRED_TOP_KEYS - set(doc)
    if missing:
        raise FormatError(f"reward spec: missing keys {sorted(missing)}")
    spec = RewardSpec(
        survival={fid: _survival_from_json(fid, c) for fid, c in doc["survival"].items()},
        confidence_tau={fid: float(v) for fid, v in doc["confidence_tau"].items()},
        action_max={aid: float(v) for aid, v in doc["action_max"].items()},
        decay_half_life=float(doc.get("decay_half_life", defaults.DECAY_HALF_LIFE)),
        gamma=float(doc.get("gamma", defaults.GAMMA)),
        lam=float(doc.get("lambda", defaults.LAMBDA)),
        action_cost_scale=float(doc.get("action_cost_scale", defaults.ACTION_COST_SCALE)),
        normalize_potential=bool(doc.get("normalize_potential", True)),
    )
    spec.validate()
    return spec


def reward_spec_to_json(spec: RewardSpec) -> dict:
    survival = {}
    for fid, cfg in sorted(spec.survival.items()):
        entry = {"form": cfg.form.value}
        for name in _FORM_PARAMS[cfg.form]:
            entry[name] = getattr(cfg, name)
        entry["weight"] = cfg.weight
        survival[fid] = entry
    return {
        "survival": survival,
        "confidence_tau": dict(sorted(spec.confidence_tau.items())),
        "action_max": dict(sorted(spec.action_max.items())),
        "decay_half_life": spec.decay_half_life,
        "gamma": spec.gamma,
        "lambda": spec.lam,
        "action_cost_scale": spec.action_cost_scale,
        "normalize_potential": spec.normalize_potential,
    }


def load_reward_spec(path: str | Path) -> RewardSpec:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as exc:
        raise FormatError(f"cannot read reward spec {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: invalid JSON at line {exc.lineno}: {exc.msg}") from exc
    return reward_spec_from_json(doc)


def save_reward_spec(spec: RewardSpec, path: str | Path) -> None:
    spec.validate()
    Path(path).write_text(
        json.dumps(reward_spec_to_json(spec), indent=2) + "\n", encoding="utf-8"
    )
