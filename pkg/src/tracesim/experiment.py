"""Experiment runner: policy x budget x memory grids over a corpus, with
deterministic delimited reports and per-run detail files.

A run walks the grid (policy, trace budget, memory multiplier, seed, question)
in a fixed order, subsamples each question's traces to the budget by a seeded
draw, simulates, votes, and aggregates one report row per (policy, budget,
multiplier) cell. Questions with fewer traces than the budget are skipped,
warned about, and recorded in a skip ledger; they are excluded from all means.
Identical configs produce byte-identical report files.
"""

from __future__ import annotations

import json
import logging
import zlib
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .corpus import Corpus, CorpusError, SyntheticConfig, generate_synthetic, load_corpus
from .engine import EngineConfig, SimulationResult, simulate
from .policies import (DeepconfPolicy, PolicyConfig, PolicyError, ScPolicy,
                       SlimscPolicy, StepPolicy, run_deepconf)
from .scorer import (EpochStats, ScorerError, ScorerWeights, StepSample, TrainConfig,
                     load_weights, rank_acc_prefix_curve, save_weights, train_scorer)

logger = logging.getLogger(__name__)

REPORT_FILE = "report.tsv"
DETAILS_FILE = "details.jsonl"
SUMMARY_FILE = "summary.json"
SKIPS_FILE = "skips.tsv"


class ExperimentError(ValueError):
    pass


@dataclass(frozen=True)
class ExperimentConfig:
    corpus_path: str | None = None
    synthetic: SyntheticConfig | None = None
    policies: tuple[PolicyConfig, ...] = (ScPolicy(),)
    trace_budgets: tuple[int, ...] = (16,)
    engine: EngineConfig = field(default_factory=lambda: EngineConfig(memory_budget_tokens=512))
    memory_sweep: tuple[float, ...] = (1.0,)
    scorer_weights_path: str | None = None
    seeds: tuple[int, ...] = (0,)
    output_dir: str = "out"

    def validate(self) -> None:
        if (self.corpus_path is None) == (self.synthetic is None):
            raise ExperimentError("exactly one of corpus_path or synthetic must be set")
        if not self.policies:
            raise ExperimentError("at least one policy is required")
        if not self.trace_budgets or any(b < 1 for b in self.trace_budgets):
            raise ExperimentError("trace_budgets must be positive integers")
        if not self.memory_sweep or any(m <= 0 for m in self.memory_sweep):
            raise ExperimentError("memory_sweep multipliers must be positive")
        if not self.seeds:
            raise ExperimentError("at least one seed is required")
        self.engine.validate()


@dataclass(frozen=True)
class ReportRow:
    policy: str
    trace_budget: int
    memory_budget: int
    accuracy: float
    mean_tokens_per_question: float
    mean_end_to_end_seconds: float
    mean_wait_seconds: float
    mean_decode_seconds: float
    mean_reconstruct_seconds: float
    prune_count: int


@dataclass(frozen=True)
class RunDetail:
    policy: str
    trace_budget: int
    memory_budget: int
    seed: int
    question_id: str
    chosen_answer: str | None
    correct: bool
    total_tokens: int
    end_to_end_seconds: float
    wait_seconds: float
    decode_seconds: float
    reconstruct_seconds: float
    prune_count: int
    preemption_count: int


@dataclass(frozen=True)
class ExperimentReport:
    rows: list[ReportRow]
    details: list[RunDetail]
    skipped: list[tuple[str, int]]  # (question_id, trace_budget)


def _question_seed(seed: int, question_id: str, salt: int) -> int:
    return (seed * 1_000_003 + zlib.crc32(question_id.encode("utf-8")) + salt) % (2**63)


def load_experiment_corpus(config: ExperimentConfig) -> Corpus:
    if config.corpus_path is not None:
        return load_corpus(config.corpus_path)
    assert config.synthetic is not None
    return generate_synthetic(config.synthetic)


def _load_scorer(config: ExperimentConfig) -> ScorerWeights | None:
    if config.scorer_weights_path is None:
        return None
    return load_weights(config.scorer_weights_path)


def _needs_scorer(policy: PolicyConfig) -> bool:
    return isinstance(policy, StepPolicy) and policy.scorer_source == "mlp"


def run_experiment(config: ExperimentConfig, *, write: bool = True) -> ExperimentReport:
    """Execute the full grid; optionally write report/detail/summary files."""
    config.validate()
    corpus = load_experiment_corpus(config)
    scorer = _load_scorer(config)
    for policy in config.policies:
        if _needs_scorer(policy) and scorer is None:
            raise ExperimentError(
                "a step policy with scorer_source='mlp' is configured but no "
                "scorer_weights_path is set")

    qids = sorted(corpus.questions)
    rows: list[ReportRow] = []
    details: list[RunDetail] = []
    skipped: list[tuple[str, int]] = []
    skipped_seen: set[tuple[str, int]] = set()

    for policy in config.policies:
        for budget in config.trace_budgets:
            for multiplier in config.memory_sweep:
                engine = config.engine.scaled(multiplier)
                cell_results: list[tuple[RunDetail, SimulationResult]] = []
                for seed in config.seeds:
                    for qid in qids:
                        question = corpus.questions[qid]
                        if len(question.traces) < budget:
                            key = (qid, budget)
                            if key not in skipped_seen:
                                skipped_seen.add(key)
                                skipped.append(key)
                                logger.warning(
                                    "question %s has %d traces; budget %d; skipping",
                                    qid, len(question.traces), budget)
                            continue
                        if question.gold_answer is None:
                            raise ExperimentError(f"question {qid!r} has no gold answer")
                        rng = np.random.default_rng(_question_seed(seed, qid, 0))
                        idx = rng.choice(len(question.traces), size=budget, replace=False)
                        traces = [question.traces[i] for i in idx]
                        sim_seed = _question_seed(seed, qid, 1)
                        if isinstance(policy, DeepconfPolicy):
                            result = run_deepconf(traces, engine, policy, seed=sim_seed,
                                                  gold_answer=question.gold_answer)
                        else:
                            result = simulate(traces, policy, engine, scorer, sim_seed,
                                              gold_answer=question.gold_answer)
                        detail = RunDetail(
                            policy=policy.tag,
                            trace_budget=budget,
                            memory_budget=engine.memory_budget_tokens,
                            seed=seed,
                            question_id=qid,
                            chosen_answer=result.chosen_answer,
                            correct=result.correct,
                            total_tokens=result.total_tokens_generated,
                            end_to_end_seconds=result.end_to_end_seconds,
                            wait_seconds=result.wait_seconds,
                            decode_seconds=result.decode_seconds,
                            reconstruct_seconds=result.reconstruct_seconds,
                            prune_count=len(result.prune_log),
                            preemption_count=sum(r.preemption_count for r in result.traces),
                        )
                        cell_results.append((detail, result))
                        details.append(detail)
                if not cell_results:
                    continue
                cell = [d for d, _ in cell_results]
                rows.append(ReportRow(
                    policy=policy.tag,
                    trace_budget=budget,
                    memory_budget=engine.memory_budget_tokens,
                    accuracy=float(np.mean([d.correct for d in cell])),
                    mean_tokens_per_question=float(np.mean([d.total_tokens for d in cell])),
                    mean_end_to_end_seconds=float(np.mean([d.end_to_end_seconds for d in cell])),
                    mean_wait_seconds=float(np.mean([d.wait_seconds for d in cell])),
                    mean_decode_seconds=float(np.mean([d.decode_seconds for d in cell])),
                    mean_reconstruct_seconds=float(np.mean([d.reconstruct_seconds for d in cell])),
                    prune_count=sum(d.prune_count for d in cell),
                ))

    report = ExperimentReport(rows=rows, details=details, skipped=skipped)
    if write:
        write_report(report, config, Path(config.output_dir))
    return report


def _fmt(value: float) -> str:
    return f"{value:.10g}"


REPORT_COLUMNS = ["policy", "trace_budget", "memory_budget", "accuracy",
                  "mean_tokens_per_question", "mean_end_to_end_seconds",
                  "mean_wait_seconds", "mean_decode_seconds",
                  "mean_reconstruct_seconds", "prune_count"]


def report_rows_to_tsv(rows: list[ReportRow]) -> str:
    lines = ["\t".join(REPORT_COLUMNS)]
    for r in rows:
        lines.append("\t".join([
            r.policy, str(r.trace_budget), str(r.memory_budget),
            _fmt(r.accuracy), _fmt(r.mean_tokens_per_question),
            _fmt(r.mean_end_to_end_seconds), _fmt(r.mean_wait_seconds),
            _fmt(r.mean_decode_seconds), _fmt(r.mean_reconstruct_seconds),
            str(r.prune_count),
        ]))
    return "\n".join(lines) + "\n"


def parse_report_tsv(text: str) -> list[ReportRow]:
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines or lines[0].split("\t") != REPORT_COLUMNS:
        raise ExperimentError("not a report table (unexpected header)")
    rows = []
    for ln in lines[1:]:
        parts = ln.split("\t")
        rows.append(ReportRow(
            policy=parts[0], trace_budget=int(parts[1]), memory_budget=int(parts[2]),
            accuracy=float(parts[3]), mean_tokens_per_question=float(parts[4]),
            mean_end_to_end_seconds=float(parts[5]), mean_wait_seconds=float(parts[6]),
            mean_decode_seconds=float(parts[7]), mean_reconstruct_seconds=float(parts[8]),
            prune_count=int(parts[9]),
        ))
    return rows


def _policy_to_json(policy: PolicyConfig) -> dict:
    obj: dict = {"kind": policy.tag}
    if isinstance(policy, StepPolicy):
        obj["scorer_source"] = policy.scorer_source
    elif isinstance(policy, DeepconfPolicy):
        obj["warmup_count"] = policy.warmup_count
        obj["keep_percentile"] = policy.keep_percentile
    elif isinstance(policy, SlimscPolicy):
        obj["similarity_threshold"] = policy.similarity_threshold
        obj["check_interval_steps"] = policy.check_interval_steps
    return obj


def policy_from_json(obj: dict) -> PolicyConfig:
    kind = obj.get("kind")
    if kind == "sc":
        return ScPolicy()
    if kind == "step":
        return StepPolicy(scorer_source=obj.get("scorer_source", "mlp"))
    if kind == "deepconf":
        return DeepconfPolicy(warmup_count=int(obj.get("warmup_count", 16)),
                              keep_percentile=float(obj.get("keep_percentile", 0.10)))
    if kind == "slimsc":
        return SlimscPolicy(similarity_threshold=float(obj.get("similarity_threshold", 0.95)),
                            check_interval_steps=int(obj.get("check_interval_steps", 1)))
    raise ExperimentError(f"unknown policy kind {kind!r} (expected sc, step, deepconf, slimsc)")


def config_to_json(config: ExperimentConfig) -> dict:
    obj: dict = {
        "policies": [_policy_to_json(p) for p in config.policies],
        "trace_budgets": list(config.trace_budgets),
        "engine": {
            "memory_budget_tokens": config.engine.memory_budget_tokens,
            "decode_seconds_per_iteration": config.engine.decode_seconds_per_iteration,
            "prefill_tokens_per_second": config.engine.prefill_tokens_per_second,
            "max_iterations": config.engine.max_iterations,
        },
        "memory_sweep": list(config.memory_sweep),
        "seeds": list(config.seeds),
        "output_dir": config.output_dir,
    }
    if config.corpus_path is not None:
        obj["corpus"] = config.corpus_path
    if config.synthetic is not None:
        obj["synthetic"] = {
            "num_questions": config.synthetic.num_questions,
            "traces_per_question": config.synthetic.traces_per_question,
            "p_correct": config.synthetic.p_correct,
            "mean_steps_correct": config.synthetic.mean_steps_correct,
            "mean_steps_incorrect": config.synthetic.mean_steps_incorrect,
            "mean_tokens_per_step": config.synthetic.mean_tokens_per_step,
            "feature_dim": config.synthetic.feature_dim,
            "class_separation": config.synthetic.class_separation,
            "noise_scale": config.synthetic.noise_scale,
            "answer_cardinality": config.synthetic.answer_cardinality,
            "seed": config.synthetic.seed,
        }
    if config.scorer_weights_path is not None:
        obj["scorer_weights"] = config.scorer_weights_path
    return obj


def config_from_json(obj: dict) -> ExperimentConfig:
    engine_obj = obj.get("engine", {})
    engine = EngineConfig(
        memory_budget_tokens=int(engine_obj.get("memory_budget_tokens", 512)),
        decode_seconds_per_iteration=float(engine_obj.get("decode_seconds_per_iteration", 0.05)),
        prefill_tokens_per_second=float(engine_obj.get("prefill_tokens_per_second", 2000.0)),
        max_iterations=int(engine_obj.get("max_iterations", 1_000_000)),
    )
    synthetic = None
    if "synthetic" in obj:
        s = obj["synthetic"]
        synthetic = SyntheticConfig(
            num_questions=int(s.get("num_questions", 10)),
            traces_per_question=int(s.get("traces_per_question", 16)),
            p_correct=float(s.get("p_correct", 0.5)),
            mean_steps_correct=float(s.get("mean_steps_correct", 4.0)),
            mean_steps_incorrect=float(s.get("mean_steps_incorrect", 6.0)),
            mean_tokens_per_step=float(s.get("mean_tokens_per_step", 12.0)),
            feature_dim=int(s.get("feature_dim", 8)),
            class_separation=float(s.get("class_separation", 2.0)),
            noise_scale=float(s.get("noise_scale", 1.0)),
            answer_cardinality=int(s.get("answer_cardinality", 4)),
            seed=int(s.get("seed", 0)),
        )
    return ExperimentConfig(
        corpus_path=obj.get("corpus"),
        synthetic=synthetic,
        policies=tuple(policy_from_json(p) for p in obj.get("policies", [{"kind": "sc"}])),
        trace_budgets=tuple(int(b) for b in obj.get("trace_budgets", [16])),
        engine=engine,
        memory_sweep=tuple(float(m) for m in obj.get("memory_sweep", [1.0])),
        scorer_weights_path=obj.get("scorer_weights"),
        seeds=tuple(int(s) for s in obj.get("seeds", [0])),
        output_dir=str(obj.get("output_dir", "out")),
    )


def load_config_file(path: str | Path) -> ExperimentConfig:
    try:
        obj = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ExperimentError(f"{path}: invalid JSON config: {exc}") from exc
    return config_from_json(obj)


def write_report(report: ExperimentReport, config: ExperimentConfig, out_dir: Path) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / REPORT_FILE).write_text(report_rows_to_tsv(report.rows), encoding="utf-8")

    with (out_dir / DETAILS_FILE).open("w", encoding="utf-8") as fh:
        for d in report.details:
            fh.write(json.dumps({
                "policy": d.policy, "trace_budget": d.trace_budget,
                "memory_budget": d.memory_budget, "seed": d.seed,
                "question_id": d.question_id, "chosen_answer": d.chosen_answer,
                "correct": d.correct, "total_tokens": d.total_tokens,
                "end_to_end_seconds": d.end_to_end_seconds,
                "wait_seconds": d.wait_seconds, "decode_seconds": d.decode_seconds,
                "reconstruct_seconds": d.reconstruct_seconds,
                "prune_count": d.prune_count, "preemption_count": d.preemption_count,
            }, sort_keys=True) + "\n")

    skip_lines = ["question_id\ttrace_budget"]
    skip_lines += [f"{qid}\t{budget}" for qid, budget in report.skipped]
    (out_dir / SKIPS_FILE).write_text("\n".join(skip_lines) + "\n", encoding="utf-8")

    summary = {
        "config": config_to_json(config),
        "rows": [{
            "policy": r.policy, "trace_budget": r.trace_budget,
            "memory_budget": r.memory_budget, "accuracy": r.accuracy,
            "mean_tokens_per_question": r.mean_tokens_per_question,
            "mean_end_to_end_seconds": r.mean_end_to_end_seconds,
            "mean_wait_seconds": r.mean_wait_seconds,
            "mean_decode_seconds": r.mean_decode_seconds,
            "mean_reconstruct_seconds": r.mean_reconstruct_seconds,
            "prune_count": r.prune_count,
        } for r in report.rows],
        "skipped_questions": [{"question_id": q, "trace_budget": b} for q, b in report.skipped],
    }
    (out_dir / SUMMARY_FILE).write_text(
        json.dumps(summary, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def build_step_samples(corpus: Corpus) -> list[StepSample]:
    """Pseudo-label propagation: every step inherits its trace's label."""
    if corpus.feature_dim == 0:
        raise ScorerError("corpus has no features; the step scorer needs feature vectors")
    samples = []
    for trace in corpus.all_traces():
        label = 1 if trace.correct else 0
        for step in trace.steps:
            if step.feature is None:
                raise ScorerError(f"trace {trace.trace_id!r} has a step without a feature")
            samples.append(StepSample(feature=step.feature, label=label))
    return samples


def balance_traces(corpus: Corpus, seed: int) -> list:
    """Equal counts of correct and incorrect traces, downsampling the majority
    class with a seeded draw. Returns the selected traces."""
    correct = [t for t in corpus.all_traces() if t.correct]
    incorrect = [t for t in corpus.all_traces() if not t.correct]
    if not correct or not incorrect:
        raise ScorerError("corpus must contain both correct and incorrect traces")
    n = min(len(correct), len(incorrect))
    rng = np.random.default_rng(seed)
    if len(correct) > n:
        correct = [correct[i] for i in sorted(rng.choice(len(correct), size=n, replace=False))]
    if len(incorrect) > n:
        incorrect = [incorrect[i] for i in sorted(rng.choice(len(incorrect), size=n, replace=False))]
    return correct + incorrect


def train_command(corpus_path: str | Path, train_config: TrainConfig,
                  out_path: str | Path) -> tuple[ScorerWeights, list[EpochStats]]:
    """Build a trace-balanced step-sample set from a corpus, train the scorer,
    and write the weights plus a per-epoch history file next to them."""
    corpus = load_corpus(corpus_path)
    if corpus.feature_dim == 0:
        raise ScorerError("corpus has no features; the step scorer needs feature vectors")
    selected = balance_traces(corpus, train_config.seed)
    samples = []
    for trace in selected:
        label = 1 if trace.correct else 0
        for step in trace.steps:
            if step.feature is None:
                raise ScorerError(f"trace {trace.trace_id!r} has a step without a feature")
            samples.append(StepSample(feature=step.feature, label=label))
    weights, history = train_scorer(samples, train_config)
    out_path = Path(out_path)
    save_weights(weights, out_path)
    history_path = out_path.with_suffix(out_path.suffix + ".history.json")
    history_path.write_text(json.dumps(
        [{"epoch": h.epoch, "train_loss": h.train_loss, "val_loss": h.val_loss}
         for h in history], indent=2) + "\n", encoding="utf-8")
    return weights, history


def rankacc_command(corpus_path: str | Path, weights_path: str | Path | None,
                    fractions: list[float]) -> list[tuple[float, float]]:
    """Prefix-fraction ranking-accuracy curve for a corpus and scorer."""
    corpus = load_corpus(corpus_path)
    weights = load_weights(weights_path) if weights_path is not None else None
    return rank_acc_prefix_curve(corpus, weights, fractions)


def rankacc_table_to_tsv(curve: list[tuple[float, float]]) -> str:
    lines = ["fraction\trank_acc"]
    lines += [f"{_fmt(fr)}\t{_fmt(val)}" for fr, val in curve]
    return "\n".join(lines) + "\n"
