"""Simulator of parallel reasoning-trace decoding under a KV-cache budget,
with step-level quality scoring, pruning policies, and answer voting."""

from .corpus import (
    Corpus,
    CorpusError,
    Question,
    Step,
    SyntheticConfig,
    Trace,
    generate_synthetic,
    load_corpus,
    normalize_answer,
    write_corpus,
)
from .engine import (
    EngineConfig,
    LedgerError,
    MemoryLedger,
    SimEvent,
    SimTrace,
    SimulationError,
    SimulationResult,
    TimingBreakdown,
    TraceRecord,
    TraceStatus,
    ledger_release,
    ledger_reserve,
    select_preemption_victim,
    simulate,
    timing_report,
)
from .policies import (
    DeepconfPolicy,
    PolicyConfig,
    PolicyError,
    PruneDecision,
    ScPolicy,
    SlimscPolicy,
    StepPolicy,
    deepconf_step_hook,
    deepconf_threshold,
    run_deepconf,
    slimsc_check,
    step_on_memory_full,
)
from .scorer import (
    ScorerError,
    ScorerWeights,
    StepSample,
    TraceScoreState,
    TrainConfig,
    class_weight_alpha,
    load_weights,
    loss_gradient,
    mlp_forward,
    overhead_ratio,
    rank_acc,
    rank_acc_prefix_curve,
    save_weights,
    score_step,
    train_scorer,
    update_trace_score,
    weighted_bce_loss,
)
from .voting import Ballot, VotingError, accuracy, majority_vote, weighted_vote

__version__ = "0.1.0"
