"""Trace corpus data model, file I/O, and synthetic corpus generation.

A corpus is a collection of recorded (or synthesized) reasoning traces grouped
by question. Each trace is an ordered list of steps; each step carries a token
count plus optional per-step signals: a feature vector standing in for the
step-end hidden state, a precomputed quality score, a mean token confidence,
and a similarity embedding. Traces are immutable after load and safe to share
across concurrent simulation runs.

File format (UTF-8, line-delimited JSON):
  line 1:  {"feature_dim": d}
  line 2+: {"question_id", "gold_answer", "trace_id", "correct",
            "final_answer", "steps": [{"num_tokens", "feature"?,
            "precomputed_score"?, "mean_token_confidence"?,
            "similarity_key"?}, ...]}
Field order is irrelevant; unknown fields are ignored.
"""

from __future__ import annotations

import json
import math
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np


class CorpusError(ValueError):
    """Raised for malformed corpus files or invalid generator configs."""


@dataclass(frozen=True)
class Step:
    """One reasoning step: a token count plus optional per-step signals."""

    num_tokens: int
    feature: tuple[float, ...] | None = None
    precomputed_score: float | None = None
    mean_token_confidence: float | None = None
    similarity_key: tuple[float, ...] | None = None

    def __post_init__(self) -> None:
        if self.num_tokens < 1:
            raise CorpusError(f"step num_tokens must be >= 1, got {self.num_tokens}")
        if self.precomputed_score is not None and not 0.0 <= self.precomputed_score <= 1.0:
            raise CorpusError(f"precomputed_score must be in [0,1], got {self.precomputed_score}")
        if self.mean_token_confidence is not None and self.mean_token_confidence < 0.0:
            raise CorpusError(f"mean_token_confidence must be >= 0, got {self.mean_token_confidence}")


@dataclass(frozen=True)
class Trace:
    """One complete trajectory for a question: ordered steps plus its outcome."""

    question_id: str
    trace_id: str
    steps: tuple[Step, ...]
    correct: bool
    final_answer: str

    def __post_init__(self) -> None:
        if len(self.steps) < 1:
            raise CorpusError(f"trace {self.trace_id!r} has no steps")

    @property
    def num_steps(self) -> int:
        return len(self.steps)

    @property
    def total_tokens(self) -> int:
        return sum(s.num_tokens for s in self.steps)

    def step_boundaries(self) -> tuple[int, ...]:
        """Cumulative token counts at which each step completes."""
        out, acc = [], 0
        for s in self.steps:
            acc += s.num_tokens
            out.append(acc)
        return tuple(out)


@dataclass(frozen=True)
class Question:
    gold_answer: str | None
    traces: tuple[Trace, ...]


@dataclass(frozen=True)
class Corpus:
    """All traces for a set of questions, plus the shared feature dimension."""

    feature_dim: int
    questions: dict[str, Question]

    @property
    def num_traces(self) -> int:
        return sum(len(q.traces) for q in self.questions.values())

    def all_traces(self) -> Iterable[Trace]:
        for qid in sorted(self.questions):
            yield from self.questions[qid].traces


_BOXED = re.compile(r"^\\boxed\{(.*)\}$", re.DOTALL)
_NUMERIC = re.compile(r"^[+-]?\d+(\.\d+)?$")
_WS = re.compile(r"\s+")


def normalize_answer(raw: str) -> str:
    """Canonical form of an answer string for exact-match comparison.

    Trims and lowercases, strips any enclosing \\boxed{...} wrappers,
    collapses internal whitespace, and drops trailing zeros after the
    decimal point of purely numeric answers ("3.50" -> "3.5", "3.00" -> "3").
    Total and idempotent.
    """
    s = raw.strip().lower()
    while True:
        m = _BOXED.match(s)
        if m is None:
            break
        s = m.group(1).strip()
    s = _WS.sub(" ", s)
    if _NUMERIC.match(s) and "." in s:
        s = s.rstrip("0").rstrip(".")
    return s


def _parse_vector(value: object, *, what: str, line_no: int) -> tuple[float, ...]:
    if not isinstance(value, list) or not all(isinstance(x, (int, float)) for x in value):
        raise CorpusError(f"line {line_no}: {what} must be a list of numbers")
    return tuple(float(x) for x in value)


def _parse_step(obj: dict, *, feature_dim: int, trace_id: str, line_no: int) -> Step:
    feature = None
    if obj.get("feature") is not None:
        feature = _parse_vector(obj["feature"], what="feature", line_no=line_no)
        if len(feature) != feature_dim:
            raise CorpusError(
                f"line {line_no}: trace {trace_id!r} feature length {len(feature)} "
                f"!= declared feature_dim {feature_dim}"
            )
    similarity_key = None
    if obj.get("similarity_key") is not None:
        similarity_key = _parse_vector(obj["similarity_key"], what="similarity_key", line_no=line_no)
    try:
        return Step(
            num_tokens=int(obj["num_tokens"]),
            feature=feature,
            precomputed_score=(None if obj.get("precomputed_score") is None
                               else float(obj["precomputed_score"])),
            mean_token_confidence=(None if obj.get("mean_token_confidence") is None
                                   else float(obj["mean_token_confidence"])),
            similarity_key=similarity_key,
        )
    except KeyError as exc:
        raise CorpusError(f"line {line_no}: step missing field {exc}") from exc


def load_corpus(path: str | Path) -> Corpus:
    """Load and validate a line-delimited corpus file.

    Rejects dimension mismatches, duplicate trace ids within a question, and
    traces whose correct flag contradicts the gold answer. Error messages
    carry the offending line number.
    """
    path = Path(path)
    lines = path.read_text(encoding="utf-8").splitlines()
    if not lines or not any(line.strip() for line in lines):
        raise CorpusError(f"{path}: no records")

    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise CorpusError(f"line 1: bad header record: {exc}") from exc
    if not isinstance(header, dict) or "feature_dim" not in header:
        raise CorpusError("line 1: header record must contain feature_dim")
    feature_dim = int(header["feature_dim"])
    if feature_dim < 0:
        raise CorpusError("line 1: feature_dim must be >= 0")

    golds: dict[str, str | None] = {}
    traces_by_q: dict[str, list[Trace]] = {}
    seen_ids: set[tuple[str, str]] = set()
    n_records = 0
    for line_no, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise CorpusError(f"line {line_no}: parse error: {exc}") from exc
        try:
            qid = str(obj["question_id"])
            trace_id = str(obj["trace_id"])
            correct = bool(obj["correct"])
            final_answer = str(obj["final_answer"])
            raw_steps = obj["steps"]
        except KeyError as exc:
            raise CorpusError(f"line {line_no}: record missing field {exc}") from exc
        if (qid, trace_id) in seen_ids:
            raise CorpusError(f"line {line_no}: duplicate trace_id {trace_id!r} in question {qid!r}")
        seen_ids.add((qid, trace_id))

        gold = obj.get("gold_answer")
        gold = None if gold is None else str(gold)
        if qid in golds:
            if golds[qid] != gold:
                raise CorpusError(f"line {line_no}: conflicting gold_answer for question {qid!r}")
        else:
            golds[qid] = gold

        if not isinstance(raw_steps, list) or not raw_steps:
            raise CorpusError(f"line {line_no}: trace {trace_id!r} must have a nonempty steps list")
        steps = tuple(
            _parse_step(s, feature_dim=feature_dim, trace_id=trace_id, line_no=line_no)
            for s in raw_steps
        )
        if gold is not None:
            expected = normalize_answer(final_answer) == normalize_answer(gold)
            if correct != expected:
                raise CorpusError(
                    f"line {line_no}: trace {trace_id!r} correct={correct} contradicts "
                    f"gold answer {gold!r} vs final answer {final_answer!r}"
                )
        try:
            traces_by_q.setdefault(qid, []).append(
                Trace(question_id=qid, trace_id=trace_id, steps=steps,
                      correct=correct, final_answer=final_answer)
            )
        except CorpusError as exc:
            raise CorpusError(f"line {line_no}: {exc}") from exc
        n_records += 1

    if n_records == 0:
        raise CorpusError(f"{path}: no records")
    questions = {
        qid: Question(gold_answer=golds[qid], traces=tuple(traces))
        for qid, traces in traces_by_q.items()
    }
    return Corpus(feature_dim=feature_dim, questions=questions)


def _step_to_json(step: Step) -> dict:
    obj: dict = {"num_tokens": step.num_tokens}
    if step.feature is not None:
        obj["feature"] = list(step.feature)
    if step.precomputed_score is not None:
        obj["precomputed_score"] = step.precomputed_score
    if step.mean_token_confidence is not None:
        obj["mean_token_confidence"] = step.mean_token_confidence
    if step.similarity_key is not None:
        obj["similarity_key"] = list(step.similarity_key)
    return obj


def write_corpus(corpus: Corpus, path: str | Path) -> None:
    """Write a corpus in the line-delimited format read by load_corpus.

    Output is deterministic: questions sorted by id, trace order preserved,
    keys sorted. load_corpus(write_corpus(c)) == c for any valid corpus.
    """
    path = Path(path)
    with path.open("w", encoding="utf-8") as fh:
        fh.write(json.dumps({"feature_dim": corpus.feature_dim}, sort_keys=True) + "\n")
        for qid in sorted(corpus.questions):
            q = corpus.questions[qid]
            for trace in q.traces:
                record = {
                    "question_id": trace.question_id,
                    "gold_answer": q.gold_answer,
                    "trace_id": trace.trace_id,
                    "correct": trace.correct,
                    "final_answer": trace.final_answer,
                    "steps": [_step_to_json(s) for s in trace.steps],
                }
                fh.write(json.dumps(record, sort_keys=True) + "\n")


@dataclass(frozen=True)
class SyntheticConfig:
    """Knobs for the synthetic corpus generator.

    Correct and incorrect traces draw step features from two class-conditional
    Gaussians whose means sit class_separation apart along a fixed direction,
    with isotropic noise of scale noise_scale; class_separation therefore
    directly controls how learnable the quality signal is. The default regime
    makes incorrect traces longer than correct ones.
    """

    num_questions: int = 10
    traces_per_question: int = 16
    p_correct: float = 0.5
    mean_steps_correct: float = 4.0
    mean_steps_incorrect: float = 6.0
    mean_tokens_per_step: float = 12.0
    feature_dim: int = 8
    class_separation: float = 2.0
    noise_scale: float = 1.0
    answer_cardinality: int = 4
    seed: int = 0

    def validate(self) -> None:
        if self.num_questions < 1 or self.traces_per_question < 1:
            raise CorpusError("num_questions and traces_per_question must be >= 1")
        if not 0.0 < self.p_correct < 1.0:
            raise CorpusError("p_correct must lie in (0, 1)")
        if min(self.mean_steps_correct, self.mean_steps_incorrect) <= 0:
            raise CorpusError("mean step counts must be positive")
        if self.mean_tokens_per_step <= 0:
            raise CorpusError("mean_tokens_per_step must be positive")
        if self.feature_dim < 0:
            raise CorpusError("feature_dim must be >= 0")
        if self.class_separation < 0:
            raise CorpusError("class_separation must be >= 0")
        if self.noise_scale <= 0:
            raise CorpusError("noise_scale must be positive")
        if self.answer_cardinality < 2:
            raise CorpusError("answer_cardinality must be >= 2")


# Per-step confidence distributions for the two classes and the similarity-key
# geometry are fixed generator properties, not config: confidence separates the
# classes weakly (enough for a confidence baseline to act on), and traces that
# converge to the same final answer share a similarity direction.
_CONF_CORRECT = (0.82, 0.05)
_CONF_INCORRECT = (0.62, 0.09)
_SIMILARITY_DIM = 8
_SIMILARITY_NOISE = 0.25


def _draw_count(rng: np.random.Generator, mean: float) -> int:
    # Positive integer with the requested mean: 1 + Poisson(mean - 1).
    return 1 + int(rng.poisson(max(mean - 1.0, 0.0)))


def generate_synthetic(config: SyntheticConfig) -> Corpus:
    """Generate a corpus with class-separated features and labeled answers.

    Deterministic for a fixed seed. Correct traces answer with the question's
    gold answer; incorrect traces draw uniformly from the question's pool of
    answer_cardinality - 1 wrong answers. Every step also carries a
    mean_token_confidence and a similarity_key so confidence- and
    similarity-driven policies can run on generated corpora.
    """
    config.validate()
    rng = np.random.default_rng(config.seed)
    d = config.feature_dim
    direction = np.ones(d) / math.sqrt(d) if d > 0 else None

    questions: dict[str, Question] = {}
    for qi in range(config.num_questions):
        qid = f"q{qi:04d}"
        answer_pool = [str(qi * 1000 + j) for j in range(config.answer_cardinality)]
        gold = answer_pool[0]
        wrong_pool = answer_pool[1:]
        base_keys = rng.normal(size=(config.answer_cardinality, _SIMILARITY_DIM))
        base_keys /= np.linalg.norm(base_keys, axis=1, keepdims=True)

        traces = []
        for ti in range(config.traces_per_question):
            is_correct = bool(rng.random() < config.p_correct)
            mean_steps = config.mean_steps_correct if is_correct else config.mean_steps_incorrect
            n_steps = _draw_count(rng, mean_steps)
            if is_correct:
                answer_idx = 0
            else:
                answer_idx = 1 + int(rng.integers(len(wrong_pool)))
            answer = answer_pool[answer_idx]
            offset = (config.class_separation / 2.0) * (1.0 if is_correct else -1.0)
            conf_mu, conf_sigma = _CONF_CORRECT if is_correct else _CONF_INCORRECT

            steps = []
            for _ in range(n_steps):
                feature = None
                if d > 0:
                    vec = offset * direction + rng.normal(scale=config.noise_scale, size=d)
                    feature = tuple(float(x) for x in vec)
                confidence = max(0.0, float(rng.normal(conf_mu, conf_sigma)))
                key = base_keys[answer_idx] + rng.normal(scale=_SIMILARITY_NOISE, size=_SIMILARITY_DIM)
                steps.append(Step(
                    num_tokens=_draw_count(rng, config.mean_tokens_per_step),
                    feature=feature,
                    mean_token_confidence=confidence,
                    similarity_key=tuple(float(x) for x in key),
                ))
            traces.append(Trace(
                question_id=qid,
                trace_id=f"t{ti:03d}",
                steps=tuple(steps),
                correct=is_correct,
                final_answer=answer,
            ))
        questions[qid] = Question(gold_answer=gold, traces=tuple(traces))
    return Corpus(feature_dim=d, questions=questions)
