"""Pruning and termination policies plugged into the simulator's hooks.

Four policies share the engine loop:

  sc        - plain self-consistency: never prunes; on memory pressure it
              preempts the most recently admitted trace (LIFO); majority vote.
  step      - step-scored pruning: scores every completed step (MLP on the
              step feature, or the step's precomputed score) and keeps the
              running mean per trace; on memory pressure it prunes the
              lowest-scored RUNNING trace instead of preempting, so no trace
              ever waits; score-weighted vote.
  deepconf  - confidence thresholding in two consecutive stages: a warmup
              cohort runs to completion under sc semantics, a threshold is
              calibrated so the top keep_percentile of warmup traces lie at or
              above it, and the remaining cohort terminates any trace whose
              lowest per-step mean confidence falls below the threshold;
              confidence-weighted vote over both cohorts.
  slimsc    - redundancy pruning: every check_interval_steps completed steps,
              prunes one member (chosen by the run's seeded rng) of each
              RUNNING pair whose prefix-mean similarity keys exceed a cosine
              threshold; on memory pressure it preempts like sc; majority vote.

The per-step confidence statistic used by deepconf is the minimum per-step
mean token confidence, a deliberate simplification of sliding-window token
confidence: the corpus supplies per-step aggregates, not token streams.
slimsc's similarity is cosine over the mean of the step keys seen so far,
a simplification of full thought-level clustering; both are comparative
baselines, not faithful re-implementations.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum
from itertools import combinations
from typing import TYPE_CHECKING, Callable, Union

import numpy as np

from .corpus import Step, Trace
from .scorer import ScorerWeights, score_step, update_trace_score
from .voting import Ballot, majority_vote, weighted_vote

if TYPE_CHECKING:
    from .engine import EngineConfig, SimTrace, SimulationResult


class PolicyError(ValueError):
    pass


@dataclass(frozen=True)
class ScPolicy:
    tag = "sc"


@dataclass(frozen=True)
class StepPolicy:
    scorer_source: str = "mlp"  # "mlp" scores features; "precomputed" reads stored scores
    tag = "step"

    def __post_init__(self) -> None:
        if self.scorer_source not in ("mlp", "precomputed"):
            raise PolicyError(f"scorer_source must be 'mlp' or 'precomputed', got {self.scorer_source!r}")


@dataclass(frozen=True)
class DeepconfPolicy:
    warmup_count: int = 16
    keep_percentile: float = 0.10
    tag = "deepconf"

    def __post_init__(self) -> None:
        if self.warmup_count < 1:
            raise PolicyError("warmup_count must be >= 1")
        if not 0.0 < self.keep_percentile <= 1.0:
            raise PolicyError("keep_percentile must lie in (0, 1]")


@dataclass(frozen=True)
class SlimscPolicy:
    similarity_threshold: float = 0.95
    check_interval_steps: int = 1
    tag = "slimsc"

    def __post_init__(self) -> None:
        if self.check_interval_steps < 1:
            raise PolicyError("check_interval_steps must be >= 1")


PolicyConfig = Union[ScPolicy, StepPolicy, DeepconfPolicy, SlimscPolicy]

POLICY_TAGS = {"sc": ScPolicy, "step": StepPolicy, "deepconf": DeepconfPolicy,
               "slimsc": SlimscPolicy}

REASON_MEMORY = "memory_pressure"
REASON_CONFIDENCE = "confidence_below_threshold"
REASON_SIMILARITY = "similarity_redundant"


@dataclass(frozen=True)
class PruneDecision:
    victim: str
    reason: str
    score_at_prune: float


def step_on_memory_full(running: list["SimTrace"]) -> PruneDecision:
    """Prune the RUNNING trace with the lowest current trace score; ties go to
    the trace holding more KV (frees more memory), then to the smaller id."""
    if not running:
        raise PolicyError("no running traces to prune")
    victim = min(running, key=lambda st: (st.current_score, -st.kv_tokens_resident, st.trace_id))
    return PruneDecision(victim=victim.trace_id, reason=REASON_MEMORY,
                         score_at_prune=victim.current_score)


def deepconf_threshold(warmup_scores: list[float], keep_percentile: float) -> float:
    """Nearest-rank quantile: the k-th largest warmup score with
    k = ceil(keep_percentile * n), so the top keep_percentile fraction of
    warmup traces lie at or above the returned value."""
    if not warmup_scores:
        raise PolicyError("warmup produced no confidence scores")
    if not 0.0 < keep_percentile <= 1.0:
        raise PolicyError("keep_percentile must lie in (0, 1]")
    n = len(warmup_scores)
    k = min(max(math.ceil(keep_percentile * n), 1), n)
    return sorted(warmup_scores, reverse=True)[k - 1]


class StepAction(Enum):
    CONTINUE = "continue"
    TERMINATE = "terminate"


def trace_confidence_floor(trace: Trace, steps_completed: int) -> float:
    """Lowest per-step mean token confidence over the completed prefix."""
    if steps_completed < 1:
        raise PolicyError("confidence floor undefined before the first step")
    confs = []
    for step in trace.steps[:steps_completed]:
        if step.mean_token_confidence is None:
            raise PolicyError(f"trace {trace.trace_id!r} step missing mean_token_confidence")
        confs.append(step.mean_token_confidence)
    return min(confs)


def deepconf_step_hook(trace: "SimTrace", step: Step, threshold: float) -> StepAction:
    """Terminate when the trace's running confidence floor drops below the
    calibrated threshold."""
    if step.mean_token_confidence is None:
        raise PolicyError(f"trace {trace.trace_id!r} step missing mean_token_confidence")
    floor = trace_confidence_floor(trace.trace, trace.steps_completed)
    return StepAction.TERMINATE if floor < threshold else StepAction.CONTINUE


def prefix_mean_key(sim: "SimTrace") -> np.ndarray | None:
    """Mean similarity key over the steps completed so far; None before the
    first completed step."""
    if sim.steps_completed < 1:
        return None
    keys = []
    for step in sim.trace.steps[:sim.steps_completed]:
        if step.similarity_key is None:
            raise PolicyError(f"trace {sim.trace_id!r} step missing similarity_key")
        keys.append(step.similarity_key)
    return np.mean(np.asarray(keys, dtype=float), axis=0)


def cosine_similarity(u: np.ndarray, v: np.ndarray) -> float:
    nu, nv = float(np.linalg.norm(u)), float(np.linalg.norm(v))
    if nu == 0.0 or nv == 0.0:
        return 0.0
    return float(np.dot(u, v) / (nu * nv))


def slimsc_check(active: list["SimTrace"],
                 similarity: Callable[["SimTrace", "SimTrace"], float],
                 threshold: float,
                 rng: np.random.Generator) -> list[PruneDecision]:
    """One redundancy sweep: for each RUNNING pair (in sorted trace_id order)
    whose similarity exceeds the threshold, prune one member uniformly at
    random; traces pruned earlier in the sweep are skipped in later pairs."""
    from .engine import TraceStatus

    decisions: list[PruneDecision] = []
    gone: set[str] = set()
    candidates = sorted((st for st in active if st.status is TraceStatus.RUNNING),
                        key=lambda st: st.trace_id)
    for a, b in combinations(candidates, 2):
        if a.trace_id in gone or b.trace_id in gone:
            continue
        if similarity(a, b) > threshold:
            victim = a if int(rng.integers(2)) == 0 else b
            gone.add(victim.trace_id)
            decisions.append(PruneDecision(victim=victim.trace_id,
                                           reason=REASON_SIMILARITY,
                                           score_at_prune=victim.current_score))
    return decisions


class _BaseRuntime:
    """Per-run policy state machine driven by the engine's hooks."""

    def validate_traces(self, traces: list[Trace]) -> None:
        pass

    def memory_pressure(self, running: list["SimTrace"]) -> tuple[str, bool, float]:
        """Returns (victim trace_id, prune?, score at decision)."""
        raise NotImplementedError

    def on_step_complete(self, sim: "SimTrace", step: Step) -> bool:
        """Returns True to terminate (prune) the trace."""
        return False

    def periodic_prunes(self, running: list["SimTrace"]) -> list[tuple[str, float]]:
        return []

    def ballot_weight(self, sim: "SimTrace") -> float:
        return 1.0

    def vote(self, ballots: list[Ballot]) -> str:
        return majority_vote(ballots)


class ScRuntime(_BaseRuntime):
    def memory_pressure(self, running):
        from .engine import select_preemption_victim

        victim_id = select_preemption_victim(running)
        return victim_id, False, 0.0


class StepRuntime(_BaseRuntime):
    def __init__(self, policy: StepPolicy, scorer: ScorerWeights | None):
        if policy.scorer_source == "mlp" and scorer is None:
            raise PolicyError("step policy with scorer_source='mlp' requires scorer weights")
        self.policy = policy
        self.scorer = scorer if policy.scorer_source == "mlp" else None

    def validate_traces(self, traces):
        for t in traces:
            for s in t.steps:
                if self.scorer is not None:
                    if s.feature is None and s.precomputed_score is None:
                        raise PolicyError(f"trace {t.trace_id!r} has an unscoreable step "
                                          "(no feature, no precomputed_score)")
                elif s.precomputed_score is None:
                    raise PolicyError(f"trace {t.trace_id!r} step lacks precomputed_score "
                                      "required by scorer_source='precomputed'")

    def memory_pressure(self, running):
        decision = step_on_memory_full(running)
        return decision.victim, True, decision.score_at_prune

    def on_step_complete(self, sim, step):
        sim.score_state = update_trace_score(sim.score_state, score_step(self.scorer, step))
        return False

    def ballot_weight(self, sim):
        return sim.current_score

    def vote(self, ballots):
        return weighted_vote(ballots)


class DeepconfRuntime(_BaseRuntime):
    """sc scheduling semantics plus confidence tracking; when a threshold is
    set (the post-warmup cohort), traces falling below it terminate."""

    def __init__(self, threshold: float | None):
        self.threshold = threshold
        self.floor: dict[str, float] = {}

    def validate_traces(self, traces):
        for t in traces:
            for s in t.steps:
                if s.mean_token_confidence is None:
                    raise PolicyError(f"trace {t.trace_id!r} step missing mean_token_confidence")

    def memory_pressure(self, running):
        from .engine import select_preemption_victim

        victim_id = select_preemption_victim(running)
        return victim_id, False, 0.0

    def on_step_complete(self, sim, step):
        if step.mean_token_confidence is None:
            raise PolicyError(f"trace {sim.trace_id!r} step missing mean_token_confidence")
        prev = self.floor.get(sim.trace_id, math.inf)
        self.floor[sim.trace_id] = min(prev, step.mean_token_confidence)
        if self.threshold is None:
            return False
        return deepconf_step_hook(sim, step, self.threshold) is StepAction.TERMINATE

    def ballot_weight(self, sim):
        return self.floor.get(sim.trace_id, 0.0)

    def vote(self, ballots):
        return weighted_vote(ballots)


class SlimscRuntime(_BaseRuntime):
    def __init__(self, policy: SlimscPolicy, rng: np.random.Generator):
        self.policy = policy
        self.rng = rng
        self.completed_steps = 0
        self.next_check = policy.check_interval_steps

    def validate_traces(self, traces):
        for t in traces:
            for s in t.steps:
                if s.similarity_key is None:
                    raise PolicyError(f"trace {t.trace_id!r} step missing similarity_key")

    def memory_pressure(self, running):
        from .engine import select_preemption_victim

        victim_id = select_preemption_victim(running)
        return victim_id, False, 0.0

    def on_step_complete(self, sim, step):
        self.completed_steps += 1
        return False

    def _similarity(self, a: "SimTrace", b: "SimTrace") -> float:
        ka, kb = prefix_mean_key(a), prefix_mean_key(b)
        if ka is None or kb is None:
            return 0.0
        return cosine_similarity(ka, kb)

    def periodic_prunes(self, running):
        if self.completed_steps < self.next_check:
            return []
        while self.next_check <= self.completed_steps:
            self.next_check += self.policy.check_interval_steps
        decisions = slimsc_check(running, self._similarity,
                                 self.policy.similarity_threshold, self.rng)
        return [(d.victim, d.score_at_prune) for d in decisions]


def build_runtime(policy: PolicyConfig, scorer: ScorerWeights | None,
                  rng: np.random.Generator) -> _BaseRuntime:
    if isinstance(policy, ScPolicy):
        return ScRuntime()
    if isinstance(policy, StepPolicy):
        return StepRuntime(policy, scorer)
    if isinstance(policy, SlimscPolicy):
        return SlimscRuntime(policy, rng)
    if isinstance(policy, DeepconfPolicy):
        raise PolicyError("the two-stage confidence policy runs via run_deepconf")
    raise PolicyError(f"unknown policy config: {policy!r}")


def run_deepconf(traces: list[Trace], engine: "EngineConfig", config: DeepconfPolicy,
                 *, seed: int = 0, gold_answer: str | None = None,
                 record_events: bool = False) -> "SimulationResult":
    """Two consecutive stages: the first warmup_count traces complete under sc
    semantics and calibrate the confidence threshold; the remaining traces run
    with early termination below it. Times, tokens, and iterations are summed;
    the per-stage breakdown is retained. Warmup traces vote alongside stage-2
    survivors, weighted by their confidence floors."""
    from .engine import (SimEvent, SimulationResult, StageTotals, _assemble_result,
                         _run_loop)

    if config.warmup_count > len(traces):
        raise PolicyError(f"warmup_count {config.warmup_count} exceeds trace count {len(traces)}")
    warmup_traces = traces[:config.warmup_count]
    rest = traces[config.warmup_count:]
    dspi = engine.decode_seconds_per_iteration

    warmup_rt = DeepconfRuntime(threshold=None)
    sims1, iters1, reconstruct1, prune1, events1 = _run_loop(
        warmup_traces, warmup_rt, engine, record_events=record_events)
    warmup_scores = [warmup_rt.floor[st.trace_id] for st in sims1]
    threshold = deepconf_threshold(warmup_scores, config.keep_percentile)

    if rest:
        stage2_rt = DeepconfRuntime(threshold=threshold)
        sims2, iters2, reconstruct2, prune2, events2 = _run_loop(
            rest, stage2_rt, engine, record_events=record_events)
    else:
        stage2_rt = DeepconfRuntime(threshold=threshold)
        sims2, iters2, reconstruct2, prune2, events2 = [], 0, 0.0, [], []

    # Merge: stage-2 iterations and events are offset so the combined log reads
    # as one serialized timeline.
    merged_rt = DeepconfRuntime(threshold=threshold)
    merged_rt.floor = {**warmup_rt.floor, **stage2_rt.floor}
    sims = sims1 + sims2
    prune_log = prune1 + [(it + iters1, tid, sc) for it, tid, sc in prune2]
    events: list[SimEvent] | None = None
    if record_events:
        events = events1 + [SimEvent(iteration=e.iteration + iters1, kind=e.kind,
                                     trace_id=e.trace_id, resident=e.resident)
                            for e in events2]
    result = _assemble_result(
        sims, merged_rt,
        question_id=traces[0].question_id,
        iterations=iters1 + iters2,
        total_reconstruct=reconstruct1 + reconstruct2,
        dspi=dspi,
        prune_log=prune_log,
        events=events,
        gold_answer=gold_answer,
    )

    def stage_totals(name: str, sims_stage, iters: int, reconstruct: float) -> StageTotals:
        return StageTotals(
            name=name,
            decode_seconds=sum(st.decode_seconds for st in sims_stage),
            wait_seconds=sum(st.wait_seconds for st in sims_stage),
            reconstruct_seconds=reconstruct,
            end_to_end_seconds=iters * dspi + reconstruct,
            total_tokens_generated=sum(st.tokens_emitted for st in sims_stage),
            iterations=iters,
        )

    return SimulationResult(
        question_id=result.question_id,
        traces=result.traces,
        chosen_answer=result.chosen_answer,
        correct=result.correct,
        decode_seconds=result.decode_seconds,
        wait_seconds=result.wait_seconds,
        reconstruct_seconds=result.reconstruct_seconds,
        end_to_end_seconds=result.end_to_end_seconds,
        total_tokens_generated=result.total_tokens_generated,
        iterations=result.iterations,
        prune_log=result.prune_log,
        event_log=result.event_log,
        stage_breakdown=[
            stage_totals("warmup", sims1, iters1, reconstruct1),
            stage_totals("prune", sims2, iters2, reconstruct2),
        ],
    )
