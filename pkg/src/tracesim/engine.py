"""Discrete-event simulator of parallel trace decoding under a KV-cache budget.

One engine iteration models a decoding step in which every RUNNING trace emits
one token; each resident token occupies one unit of the KV-cache ledger. Each
iteration runs five phases:

  1. admission    - WAITING traces re-enter in FIFO order when their full KV
                    footprint plus one new token fits; resuming pays a KV
                    reconstruction cost of tokens_emitted / prefill rate.
  2. demand check - every RUNNING trace needs one token of new KV; while the
                    aggregate demand exceeds free capacity the policy's
                    memory-pressure hook picks one victim at a time (prune or
                    preempt) until demand fits.
  3. decode       - RUNNING traces emit one token each and accrue decode time;
                    WAITING traces accrue wait time.
  4. step hook    - traces that just finished a step invoke the policy's
                    step-boundary hook (scoring, confidence checks, similarity
                    sweeps), which may terminate traces.
  5. completion   - traces reaching their final token FINISH and release KV.

The loop ends when no trace is RUNNING or WAITING. A run is single-threaded
and deterministic for a fixed (traces, policy, config, seed); independent runs
share no mutable state.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .corpus import Trace, normalize_answer
from .scorer import ScorerWeights, TraceScoreState
from .voting import Ballot


class LedgerError(RuntimeError):
    """KV accounting fault: releasing more than is resident."""


class SimulationError(RuntimeError):
    """Configuration or livelock fault detected during a run."""


class TraceStatus(Enum):
    RUNNING = "running"
    WAITING = "waiting"
    PRUNED = "pruned"
    FINISHED = "finished"


@dataclass(frozen=True)
class EngineConfig:
    """Capacity and timing model of the simulated engine.

    memory_budget_tokens is the total KV-cache capacity in tokens. Each
    iteration costs decode_seconds_per_iteration of wall time regardless of
    batch width; resuming a preempted trace costs tokens_emitted /
    prefill_tokens_per_second, serialized into end-to-end time at the
    admission iteration. max_iterations guards against livelock.
    """

    memory_budget_tokens: int
    decode_seconds_per_iteration: float = 0.05
    prefill_tokens_per_second: float = 2000.0
    max_iterations: int = 1_000_000

    def validate(self) -> None:
        if self.memory_budget_tokens < 1:
            raise SimulationError("memory_budget_tokens must be positive")
        if self.decode_seconds_per_iteration <= 0 or self.prefill_tokens_per_second <= 0:
            raise SimulationError("decode and prefill rates must be positive")
        if self.max_iterations < 1:
            raise SimulationError("max_iterations must be positive")

    def scaled(self, multiplier: float) -> "EngineConfig":
        return EngineConfig(
            memory_budget_tokens=max(1, int(round(self.memory_budget_tokens * multiplier))),
            decode_seconds_per_iteration=self.decode_seconds_per_iteration,
            prefill_tokens_per_second=self.prefill_tokens_per_second,
            max_iterations=self.max_iterations,
        )


@dataclass
class MemoryLedger:
    """Token-granular KV-cache accounting. 0 <= resident <= capacity always."""

    capacity: int
    resident: int = 0

    @property
    def free(self) -> int:
        return self.capacity - self.resident


def ledger_reserve(ledger: MemoryLedger, tokens: int) -> bool:
    """Reserve KV space; returns False (ledger unchanged) when it cannot fit."""
    if tokens < 0:
        raise LedgerError(f"cannot reserve {tokens} tokens")
    if ledger.resident + tokens > ledger.capacity:
        return False
    ledger.resident += tokens
    return True


def ledger_release(ledger: MemoryLedger, tokens: int) -> None:
    """Release KV space; over-releasing is a logic fault, not recoverable."""
    if tokens < 0:
        raise LedgerError(f"cannot release {tokens} tokens")
    if tokens > ledger.resident:
        raise LedgerError(f"release of {tokens} exceeds resident {ledger.resident}")
    ledger.resident -= tokens


@dataclass
class SimTrace:
    """Runtime wrapper around a corpus trace during one simulation."""

    trace: Trace
    status: TraceStatus = TraceStatus.RUNNING
    tokens_emitted: int = 0
    kv_tokens_resident: int = 0
    steps_completed: int = 0
    score_state: TraceScoreState = field(default_factory=TraceScoreState)
    wait_seconds: float = 0.0
    decode_seconds: float = 0.0
    reconstruct_seconds: float = 0.0
    preemption_count: int = 0
    admitted_iteration: int = 0

    def __post_init__(self) -> None:
        self._boundaries = self.trace.step_boundaries()

    @property
    def trace_id(self) -> str:
        return self.trace.trace_id

    @property
    def total_tokens(self) -> int:
        return self._boundaries[-1]

    @property
    def current_score(self) -> float:
        """Prefix-mean trace score; 0.5 (the scorer's uninformative prior)
        before any step completes."""
        return self.score_state.score_or_default(0.5)


@dataclass(frozen=True)
class SimEvent:
    """One state transition, for audit and replay. All traces start RUNNING at
    iteration 0; only later transitions are logged."""

    iteration: int
    kind: str  # admit | preempt | prune | finish
    trace_id: str
    resident: int


@dataclass(frozen=True)
class TraceRecord:
    trace_id: str
    status: TraceStatus
    tokens_emitted: int
    steps_completed: int
    wait_seconds: float
    decode_seconds: float
    reconstruct_seconds: float
    preemption_count: int
    final_score: float
    vote_weight: float
    answer: str | None


@dataclass(frozen=True)
class StageTotals:
    name: str
    decode_seconds: float
    wait_seconds: float
    reconstruct_seconds: float
    end_to_end_seconds: float
    total_tokens_generated: int
    iterations: int


@dataclass(frozen=True)
class SimulationResult:
    question_id: str
    traces: list[TraceRecord]
    chosen_answer: str | None
    correct: bool
    decode_seconds: float
    wait_seconds: float
    reconstruct_seconds: float
    end_to_end_seconds: float
    total_tokens_generated: int
    iterations: int
    prune_log: list[tuple[int, str, float]]
    event_log: list[SimEvent] | None = None
    stage_breakdown: list[StageTotals] | None = None


def select_preemption_victim(running: list[SimTrace]) -> str:
    """LIFO victim rule: the most recently admitted RUNNING trace loses; ties
    go to the lexicographically smallest trace_id."""
    if not running:
        raise SimulationError("no running traces to preempt")
    victim = min(running, key=lambda st: (-st.admitted_iteration, st.trace_id))
    return victim.trace_id


def _check_invariants(sims: list[SimTrace], ledger: MemoryLedger) -> bool:
    assert 0 <= ledger.resident <= ledger.capacity, \
        f"ledger out of range: {ledger.resident}/{ledger.capacity}"
    resident = 0
    for st in sims:
        if st.status is TraceStatus.RUNNING:
            assert st.kv_tokens_resident == st.tokens_emitted, st.trace_id
            resident += st.kv_tokens_resident
        else:
            assert st.kv_tokens_resident == 0, st.trace_id
        assert st.tokens_emitted <= st.total_tokens, st.trace_id
    assert resident == ledger.resident, "ledger disagrees with per-trace KV"
    return True


def _run_loop(traces: list[Trace], runtime, engine: EngineConfig, *,
              record_events: bool = False):
    """Execute the event loop; returns (sims, iterations, total_reconstruct,
    prune_log, events)."""
    engine.validate()
    if not traces:
        raise SimulationError("simulate requires at least one trace")
    runtime.validate_traces(traces)

    sims = [SimTrace(trace=t) for t in traces]
    by_id = {st.trace_id: st for st in sims}
    if len(by_id) != len(sims):
        raise SimulationError("trace_ids must be unique within a simulation")
    ledger = MemoryLedger(capacity=engine.memory_budget_tokens)
    running: list[SimTrace] = list(sims)  # admission order
    waiting: list[SimTrace] = []          # FIFO by preemption time
    events: list[SimEvent] = []
    prune_log: list[tuple[int, str, float]] = []
    total_reconstruct = 0.0
    dspi = engine.decode_seconds_per_iteration
    iteration = 0

    def emit(kind: str, st: SimTrace) -> None:
        if record_events:
            events.append(SimEvent(iteration=iteration, kind=kind,
                                   trace_id=st.trace_id, resident=ledger.resident))

    def prune(st: SimTrace, score: float) -> None:
        ledger_release(ledger, st.kv_tokens_resident)
        st.kv_tokens_resident = 0
        st.status = TraceStatus.PRUNED
        running.remove(st)
        prune_log.append((iteration, st.trace_id, score))
        emit("prune", st)

    def preempt(st: SimTrace) -> None:
        ledger_release(ledger, st.kv_tokens_resident)
        st.kv_tokens_resident = 0
        st.status = TraceStatus.WAITING
        st.preemption_count += 1
        running.remove(st)
        waiting.append(st)
        emit("preempt", st)

    while running or waiting:
        if iteration >= engine.max_iterations:
            raise SimulationError(f"max_iterations={engine.max_iterations} exceeded (livelock guard)")

        # (1) admission: strict FIFO; stop at the first trace that cannot fit.
        while waiting:
            cand = waiting[0]
            if cand.tokens_emitted + 1 > ledger.free:
                break
            waiting.pop(0)
            ok = ledger_reserve(ledger, cand.tokens_emitted)
            assert ok
            cand.kv_tokens_resident = cand.tokens_emitted
            cost = cand.tokens_emitted / engine.prefill_tokens_per_second
            cand.reconstruct_seconds += cost
            total_reconstruct += cost
            cand.status = TraceStatus.RUNNING
            cand.admitted_iteration = iteration
            running.append(cand)
            emit("admit", cand)

        if not running:
            front = waiting[0]
            raise SimulationError(
                f"trace {front.trace_id!r} needs {front.tokens_emitted + 1} tokens of KV "
                f"but capacity is {ledger.capacity}"
            )

        # (2) demand check: one new token per RUNNING trace.
        while len(running) > ledger.free:
            if len(running) == 1:
                st = running[0]
                raise SimulationError(
                    f"trace {st.trace_id!r} cannot decode: next-token demand exceeds "
                    f"capacity {ledger.capacity}"
                )
            victim_id, do_prune, score = runtime.memory_pressure(running)
            victim = by_id[victim_id]
            if victim.status is not TraceStatus.RUNNING:
                raise SimulationError(f"policy picked non-running victim {victim_id!r}")
            if do_prune:
                prune(victim, score)
            else:
                preempt(victim)

        # (3) decode: each RUNNING trace emits one token; WAITING traces wait.
        for st in running:
            ok = ledger_reserve(ledger, 1)
            assert ok, "demand check left insufficient free capacity"
            st.tokens_emitted += 1
            st.kv_tokens_resident += 1
            st.decode_seconds += dspi
        for st in waiting:
            st.wait_seconds += dspi

        # (4) step-boundary hook; terminations are applied after the sweep.
        to_terminate: list[tuple[SimTrace, float]] = []
        for st in running:
            if (st.steps_completed < len(st.trace.steps)
                    and st.tokens_emitted == st._boundaries[st.steps_completed]):
                idx = st.steps_completed
                st.steps_completed += 1
                terminate = runtime.on_step_complete(st, st.trace.steps[idx])
                if terminate:
                    to_terminate.append((st, st.current_score))
        for st, score in to_terminate:
            if st.status is TraceStatus.RUNNING:
                prune(st, score)
        for victim_id, score in runtime.periodic_prunes(running):
            victim = by_id[victim_id]
            if victim.status is TraceStatus.RUNNING:
                prune(victim, score)

        # (5) completion.
        for st in list(running):
            if st.tokens_emitted == st.total_tokens:
                ledger_release(ledger, st.kv_tokens_resident)
                st.kv_tokens_resident = 0
                st.status = TraceStatus.FINISHED
                running.remove(st)
                emit("finish", st)

        iteration += 1
        assert _check_invariants(sims, ledger)

    return sims, iteration, total_reconstruct, prune_log, events


def _assemble_result(sims: list[SimTrace], runtime, *, question_id: str,
                     iterations: int, total_reconstruct: float, dspi: float,
                     prune_log: list[tuple[int, str, float]],
                     events: list[SimEvent] | None,
                     gold_answer: str | None) -> SimulationResult:
    records = []
    ballots = []
    for st in sims:
        finished = st.status is TraceStatus.FINISHED
        weight = runtime.ballot_weight(st)
        records.append(TraceRecord(
            trace_id=st.trace_id,
            status=st.status,
            tokens_emitted=st.tokens_emitted,
            steps_completed=st.steps_completed,
            wait_seconds=st.wait_seconds,
            decode_seconds=st.decode_seconds,
            reconstruct_seconds=st.reconstruct_seconds,
            preemption_count=st.preemption_count,
            final_score=st.current_score,
            vote_weight=weight,
            answer=st.trace.final_answer if finished else None,
        ))
        if finished:
            ballots.append(Ballot(trace_id=st.trace_id,
                                  answer=normalize_answer(st.trace.final_answer),
                                  weight=weight))
    chosen = runtime.vote(ballots) if ballots else None
    correct = (gold_answer is not None and chosen is not None
               and chosen == normalize_answer(gold_answer))
    return SimulationResult(
        question_id=question_id,
        traces=records,
        chosen_answer=chosen,
        correct=correct,
        decode_seconds=sum(r.decode_seconds for r in records),
        wait_seconds=sum(r.wait_seconds for r in records),
        reconstruct_seconds=sum(r.reconstruct_seconds for r in records),
        end_to_end_seconds=iterations * dspi + total_reconstruct,
        total_tokens_generated=sum(r.tokens_emitted for r in records),
        iterations=iterations,
        prune_log=prune_log,
        event_log=events,
    )


def simulate(traces: list[Trace], policy, engine: EngineConfig,
             scorer: ScorerWeights | None = None, seed: int = 0, *,
             gold_answer: str | None = None,
             record_events: bool = False) -> SimulationResult:
    """Run one question's traces under a policy and vote on the outcome.

    The two-stage confidence policy is dispatched to its own driver; all other
    policies run a single event loop. Deterministic for fixed inputs.
    """
    from . import policies as _policies

    if isinstance(policy, _policies.DeepconfPolicy):
        return _policies.run_deepconf(traces, engine, policy, seed=seed,
                                      gold_answer=gold_answer,
                                      record_events=record_events)
    runtime = _policies.build_runtime(policy, scorer, np.random.default_rng(seed))
    sims, iterations, total_reconstruct, prune_log, events = _run_loop(
        traces, runtime, engine, record_events=record_events)
    return _assemble_result(
        sims, runtime,
        question_id=traces[0].question_id,
        iterations=iterations,
        total_reconstruct=total_reconstruct,
        dspi=engine.decode_seconds_per_iteration,
        prune_log=prune_log,
        events=events if record_events else None,
        gold_answer=gold_answer,
    )


@dataclass(frozen=True)
class TimingBreakdown:
    decode_seconds: float
    wait_seconds: float
    reconstruct_seconds: float
    end_to_end_seconds: float
    fractions: dict[str, float]


def timing_report(result: SimulationResult) -> TimingBreakdown:
    """Decompose a run into decode/wait/reconstruct shares of the per-trace
    time aggregate. The three fractions sum to 1."""
    total = result.decode_seconds + result.wait_seconds + result.reconstruct_seconds
    if total <= 0:
        raise SimulationError("result has no accumulated time to decompose")
    return TimingBreakdown(
        decode_seconds=result.decode_seconds,
        wait_seconds=result.wait_seconds,
        reconstruct_seconds=result.reconstruct_seconds,
        end_to_end_seconds=result.end_to_end_seconds,
        fractions={
            "decode": result.decode_seconds / total,
            "wait": result.wait_seconds / total,
            "reconstruct": result.reconstruct_seconds / total,
        },
    )
