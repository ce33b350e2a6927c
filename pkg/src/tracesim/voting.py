"""Answer aggregation over completed traces: majority and weighted voting."""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass
from typing import TYPE_CHECKING

from .corpus import normalize_answer

if TYPE_CHECKING:
    from .engine import SimulationResult


class VotingError(ValueError):
    pass


@dataclass(frozen=True)
class Ballot:
    """One completed trace's vote: a normalized answer and a nonnegative weight."""

    trace_id: str
    answer: str
    weight: float


def majority_vote(ballots: list[Ballot]) -> str:
    """Answer with the most ballots; ties go to the highest total weight, then
    to the lexicographically smallest answer."""
    if not ballots:
        raise VotingError("majority_vote requires at least one ballot")
    counts: dict[str, int] = defaultdict(int)
    weights: dict[str, float] = defaultdict(float)
    for b in ballots:
        counts[b.answer] += 1
        weights[b.answer] += b.weight
    return min(counts, key=lambda a: (-counts[a], -weights[a], a))


def weighted_vote(ballots: list[Ballot]) -> str:
    """Answer maximizing total ballot weight; ties break lexicographically."""
    if not ballots:
        raise VotingError("weighted_vote requires at least one ballot")
    weights: dict[str, float] = defaultdict(float)
    for b in ballots:
        weights[b.answer] += b.weight
    return min(weights, key=lambda a: (-weights[a], a))


def accuracy(results: list["SimulationResult"], gold: dict[str, str]) -> float:
    """Fraction of results whose chosen answer matches the gold answer after
    normalization."""
    if not results:
        raise VotingError("accuracy requires at least one result")
    hits = 0
    for res in results:
        if res.question_id not in gold:
            raise VotingError(f"no gold answer for question {res.question_id!r}")
        target = normalize_answer(gold[res.question_id])
        if res.chosen_answer is not None and normalize_answer(res.chosen_answer) == target:
            hits += 1
    return hits / len(results)
