"""Non-dominated sorting, crowding distance, and utopia-point champion selection.

Candidates are ranked on their three fitness objectives (all maximized).
Ranking uses the standard fast non-dominated sort; the champion is the
front-0 candidate closest (Euclidean) to the utopia point, the
componentwise maximum of front-0 fitness vectors. Only ranking and
selection are implemented; there are no genetic operators because the
candidate pool arrives fully formed.

All tie-breaks are deterministic: within-front order preserves input
order, crowding sorts break value ties by spec_id, and champion ties fall
back to larger crowding distance and then spec_id order.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

from .errors import ValidationError
from .fitness import FitnessVector


@dataclass(frozen=True)
class Candidate:
    spec_id: str
    fitness: FitnessVector


@dataclass
class ParetoResult:
    fronts: list[list[str]]
    crowding: dict[str, float]
    champion: str
    utopia: tuple[float, float, float]


def dominates(a: FitnessVector, b: FitnessVector) -> bool:
    """a dominates b when it is >= everywhere and > somewhere."""
    at, bt = a.as_tuple(), b.as_tuple()
    return all(x >= y for x, y in zip(at, bt)) and any(x > y for x, y in zip(at, bt))


def non_dominated_sort(candidates: list[Candidate]) -> list[list[Candidate]]:
    """Fast non-dominated sort; front i is dominated only by earlier fronts."""
    _check_candidates(candidates)
    n = len(candidates)
    dominated_by = [[] for _ in range(n)]
    counts = [0] * n
    fronts: list[list[int]] = [[]]
    for p in range(n):
        for q in range(n):
            if p == q:
                continue
            if dominates(candidates[p].fitness, candidates[q].fitness):
                dominated_by[p].append(q)
            elif dominates(candidates[q].fitness, candidates[p].fitness):
                counts[p] += 1
        if counts[p] == 0:
            fronts[0].append(p)
    i = 0
    while fronts[i]:
        nxt = []
        for p in fronts[i]:
            for q in dominated_by[p]:
                counts[q] -= 1
                if counts[q] == 0:
                    nxt.append(q)
        i += 1
        fronts.append(sorted(nxt))  # preserve input order within the front
    fronts.pop()
    return [[candidates[i] for i in front] for front in fronts]


def crowding_distance(front: list[Candidate]) -> dict[str, float]:
    """Per-candidate crowding: normalized neighbor gaps summed over objectives.

    Objective extremes get +inf; a zero-range objective contributes nothing.
    Fronts of one or two candidates are all +inf by the boundary rule.
    """
    if not front:
        raise ValidationError("crowding_distance needs a nonempty front")
    dist = {c.spec_id: 0.0 for c in front}
    if len(front) <= 2:
        return {sid: math.inf for sid in dist}
    for m in range(3):
        ordered = sorted(front, key=lambda c: (c.fitness.as_tuple()[m], c.spec_id))
        lo = ordered[0].fitness.as_tuple()[m]
        hi = ordered[-1].fitness.as_tuple()[m]
        span = hi - lo
        if span == 0.0:
            continue
        dist[ordered[0].spec_id] = math.inf
        dist[ordered[-1].spec_id] = math.inf
        for i in range(1, len(ordered) - 1):
            if math.isinf(dist[ordered[i].spec_id]):
                continue
            gap = ordered[i + 1].fitness.as_tuple()[m] - ordered[i - 1].fitness.as_tuple()[m]
            dist[ordered[i].spec_id] += gap / span
    return dist


def select_champion(candidates: list[Candidate]) -> ParetoResult:
    """Rank all candidates and pick the front-0 member nearest the utopia point."""
    fronts = non_dominated_sort(candidates)
    crowding: dict[str, float] = {}
    for front in fronts:
        crowding.update(crowding_distance(front))
    first = fronts[0]
    utopia = tuple(
        max(c.fitness.as_tuple()[m] for c in first) for m in range(3)
    )

    def distance(c: Candidate) -> float:
        return math.dist(c.fitness.as_tuple(), utopia)

    champion = min(first, key=lambda c: (distance(c), -crowding[c.spec_id], c.spec_id))
    return ParetoResult(
        fronts=[[c.spec_id for c in front] for front in fronts],
        crowding=crowding,
        champion=champion.spec_id,
        utopia=utopia,  # type: ignore[arg-type]
    )


def pareto_result_to_json(result: ParetoResult) -> dict:
    return {
        "fronts": result.fronts,
        "crowding": {
            sid: ("inf" if math.isinf(d) else d) for sid, d in sorted(result.crowding.items())
        },
        "champion": result.champion,
        "utopia": list(result.utopia),
    }


def _check_candidates(candidates: list[Candidate]) -> None:
    if not candidates:
        raise ValidationError("candidate list is empty")
    seen = set()
    for c in candidates:
        if c.spec_id in seen:
            raise ValidationError(f"duplicate spec_id {c.spec_id!r}")
        seen.add(c.spec_id)
