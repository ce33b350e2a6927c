"""Step-level quality scorer: a two-layer MLP trained on step features.

The scorer maps a step-end feature vector h to a correctness probability
sigmoid(W2 relu(W1 h + b1) + b2). Training uses a class-weighted binary
cross-entropy where the positive term is scaled by alpha = K-/K+ (negative
over positive step counts), mini-batch Adam with L2 weight decay, and early
stopping on a held-out validation split; the weights from the best-validation
epoch are returned. Trace-level quality is the running mean of step scores.

Everything here is plain numpy and deterministic for a fixed seed; forward
passes are pure and safe to call concurrently once trained.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .corpus import Corpus, Step

PROB_EPS = 1e-7  # probabilities clamped to [PROB_EPS, 1 - PROB_EPS] inside the loss
ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


class ScorerError(ValueError):
    """Raised for dimension mismatches, unscoreable steps, and bad configs."""


@dataclass
class ScorerWeights:
    """MLP parameters: w1 (m, d), b1 (m,), w2 (1, m), b2 scalar."""

    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: float

    @property
    def d(self) -> int:
        return self.w1.shape[1]

    @property
    def m(self) -> int:
        return self.w1.shape[0]

    def validate(self) -> None:
        if self.w1.ndim != 2 or self.b1.shape != (self.m,) or self.w2.shape != (1, self.m):
            raise ScorerError(
                f"inconsistent shapes: w1 {self.w1.shape}, b1 {self.b1.shape}, w2 {self.w2.shape}"
            )
        for block in (self.w1, self.b1, self.w2):
            if not np.all(np.isfinite(block)):
                raise ScorerError("non-finite parameter entries")
        if not math.isfinite(self.b2):
            raise ScorerError("non-finite parameter entries")

    def copy(self) -> "ScorerWeights":
        return ScorerWeights(self.w1.copy(), self.b1.copy(), self.w2.copy(), self.b2)


@dataclass(frozen=True)
class StepSample:
    """One training example: a step feature with its trace's propagated label."""

    feature: tuple[float, ...]
    label: int


@dataclass(frozen=True)
class TrainConfig:
    hidden_dim: int = 512
    batch_size: int = 128
    max_epochs: int = 20
    early_stop_patience: int = 5
    learning_rate: float = 1e-4
    weight_decay: float = 1e-5
    validation_fraction: float = 0.1
    seed: int = 0

    def validate(self) -> None:
        if min(self.hidden_dim, self.batch_size, self.max_epochs, self.early_stop_patience) < 1:
            raise ScorerError("hidden_dim, batch_size, max_epochs, patience must be >= 1")
        if self.learning_rate <= 0 or self.weight_decay < 0:
            raise ScorerError("learning_rate must be positive and weight_decay nonnegative")
        if not 0.0 < self.validation_fraction < 1.0:
            raise ScorerError("validation_fraction must lie in (0, 1)")


@dataclass(frozen=True)
class TraceScoreState:
    """Running mean of the step scores seen so far in one trace."""

    steps_seen: int = 0
    running_sum: float = 0.0

    @property
    def current_score(self) -> float:
        if self.steps_seen < 1:
            raise ScorerError("current_score undefined before the first step")
        return self.running_sum / self.steps_seen

    def score_or_default(self, default: float = 0.5) -> float:
        return self.running_sum / self.steps_seen if self.steps_seen >= 1 else default


def update_trace_score(state: TraceScoreState, step_score: float) -> TraceScoreState:
    if not 0.0 <= step_score <= 1.0:
        raise ScorerError(f"step score must lie in [0,1], got {step_score}")
    return TraceScoreState(steps_seen=state.steps_seen + 1,
                           running_sum=state.running_sum + step_score)


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z, dtype=float)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _forward_batch(w: ScorerWeights, features: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Probabilities and hidden activations for a (n, d) feature matrix."""
    z1 = features @ w.w1.T + w.b1
    hidden = np.maximum(z1, 0.0)
    logits = hidden @ w.w2.T.ravel() + w.b2
    return _sigmoid(logits), hidden


def mlp_forward(w: ScorerWeights, h) -> float:
    """sigmoid(w2 relu(w1 h + b1) + b2) for a single feature vector."""
    vec = np.asarray(h, dtype=float)
    if vec.shape != (w.d,):
        raise ScorerError(f"feature has shape {vec.shape}, scorer expects ({w.d},)")
    if not np.all(np.isfinite(vec)):
        raise ScorerError("feature must be finite")
    probs, _ = _forward_batch(w, vec[None, :])
    return float(probs[0])


def class_weight_alpha(samples: list[StepSample]) -> float:
    """Ratio of negative to positive step samples."""
    pos = sum(1 for s in samples if s.label == 1)
    neg = len(samples) - pos
    if pos == 0 or neg == 0:
        raise ScorerError(f"need both classes: {pos} positive, {neg} negative samples")
    return neg / pos


def _stack(batch: list[StepSample]) -> tuple[np.ndarray, np.ndarray]:
    features = np.asarray([s.feature for s in batch], dtype=float)
    labels = np.asarray([s.label for s in batch], dtype=float)
    return features, labels


def _loss_arrays(w: ScorerWeights, features: np.ndarray, labels: np.ndarray, alpha: float) -> float:
    probs, _ = _forward_batch(w, features)
    p = np.clip(probs, PROB_EPS, 1.0 - PROB_EPS)
    terms = alpha * labels * np.log(p) + (1.0 - labels) * np.log(1.0 - p)
    return float(-np.mean(terms))


def weighted_bce_loss(w: ScorerWeights, batch: list[StepSample], alpha: float) -> float:
    """Mean of -[alpha y log p + (1-y) log(1-p)] with p clamped away from 0/1."""
    if not batch:
        raise ScorerError("batch must be nonempty")
    if alpha <= 0:
        raise ScorerError("alpha must be positive")
    features, labels = _stack(batch)
    return _loss_arrays(w, features, labels, alpha)


def _gradient_arrays(w: ScorerWeights, features: np.ndarray, labels: np.ndarray,
                     alpha: float) -> ScorerWeights:
    n = features.shape[0]
    z1 = features @ w.w1.T + w.b1
    hidden = np.maximum(z1, 0.0)
    logits = hidden @ w.w2.T.ravel() + w.b2
    probs = _sigmoid(logits)
    # Clamped probabilities contribute constant loss terms, so their gradient
    # vanishes; the interior simplifies to (-alpha y (1-p) + (1-y) p) / n.
    interior = (probs > PROB_EPS) & (probs < 1.0 - PROB_EPS)
    g_logit = np.where(interior, (-alpha * labels * (1.0 - probs)
                                  + (1.0 - labels) * probs) / n, 0.0)
    grad_b2 = float(np.sum(g_logit))
    grad_w2 = (g_logit @ hidden)[None, :]
    g_hidden = np.outer(g_logit, w.w2.ravel()) * (z1 > 0.0)
    grad_b1 = g_hidden.sum(axis=0)
    grad_w1 = g_hidden.T @ features
    return ScorerWeights(w1=grad_w1, b1=grad_b1, w2=grad_w2, b2=grad_b2)


def loss_gradient(w: ScorerWeights, batch: list[StepSample], alpha: float) -> ScorerWeights:
    """Analytic gradient of weighted_bce_loss; same container shape as the weights."""
    if not batch:
        raise ScorerError("batch must be nonempty")
    if alpha <= 0:
        raise ScorerError("alpha must be positive")
    features, labels = _stack(batch)
    return _gradient_arrays(w, features, labels, alpha)


def init_weights(d: int, m: int, rng: np.random.Generator) -> ScorerWeights:
    """Uniform fan-in initialization, U(-1/sqrt(fan_in), 1/sqrt(fan_in))."""
    bound1 = 1.0 / math.sqrt(max(d, 1))
    bound2 = 1.0 / math.sqrt(m)
    return ScorerWeights(
        w1=rng.uniform(-bound1, bound1, size=(m, d)),
        b1=rng.uniform(-bound1, bound1, size=m),
        w2=rng.uniform(-bound2, bound2, size=(1, m)),
        b2=float(rng.uniform(-bound2, bound2)),
    )


@dataclass(frozen=True)
class EpochStats:
    epoch: int
    train_loss: float
    val_loss: float


def train_scorer(train: list[StepSample], config: TrainConfig) -> tuple[ScorerWeights, list[EpochStats]]:
    """Mini-batch Adam with weight decay and early stopping on a seeded split.

    Splits off validation_fraction of the samples, computes alpha on the
    remaining training portion, and stops after early_stop_patience epochs
    without validation improvement (or at max_epochs). Returns the weights
    from the best-validation epoch. Deterministic for a fixed seed.
    """
    config.validate()
    if not train:
        raise ScorerError("training set must be nonempty")
    labels_present = {s.label for s in train}
    if labels_present != {0, 1}:
        raise ScorerError("training set must contain both classes")

    rng = np.random.default_rng(config.seed)
    features, labels = _stack(train)
    d = features.shape[1]

    order = rng.permutation(len(train))
    n_val = min(max(1, int(round(config.validation_fraction * len(train)))), len(train) - 1)
    val_idx, train_idx = order[:n_val], order[n_val:]
    features_tr, labels_tr = features[train_idx], labels[train_idx]
    features_val, labels_val = features[val_idx], labels[val_idx]
    pos = int(labels_tr.sum())
    neg = len(labels_tr) - pos
    if pos == 0 or neg == 0:
        raise ScorerError("training portion lost a class in the validation split; reseed or resize")
    alpha = neg / pos

    weights = init_weights(d, config.hidden_dim, rng)
    moments1 = [np.zeros_like(weights.w1), np.zeros_like(weights.b1),
                np.zeros_like(weights.w2), 0.0]
    moments2 = [np.zeros_like(weights.w1), np.zeros_like(weights.b1),
                np.zeros_like(weights.w2), 0.0]
    step = 0

    def adam_update(grad: ScorerWeights) -> None:
        nonlocal step
        step += 1
        params = [weights.w1, weights.b1, weights.w2, weights.b2]
        grads = [grad.w1 + config.weight_decay * weights.w1,
                 grad.b1 + config.weight_decay * weights.b1,
                 grad.w2 + config.weight_decay * weights.w2,
                 grad.b2 + config.weight_decay * weights.b2]
        c1 = 1.0 - ADAM_BETA1 ** step
        c2 = 1.0 - ADAM_BETA2 ** step
        new_params = []
        for i, (p, g) in enumerate(zip(params, grads)):
            moments1[i] = ADAM_BETA1 * moments1[i] + (1.0 - ADAM_BETA1) * g
            moments2[i] = ADAM_BETA2 * moments2[i] + (1.0 - ADAM_BETA2) * (g * g if isinstance(g, np.ndarray) else g**2)
            m_hat = moments1[i] / c1
            v_hat = moments2[i] / c2
            if isinstance(p, np.ndarray):
                new_params.append(p - config.learning_rate * m_hat / (np.sqrt(v_hat) + ADAM_EPS))
            else:
                new_params.append(p - config.learning_rate * m_hat / (math.sqrt(v_hat) + ADAM_EPS))
        weights.w1, weights.b1, weights.w2, weights.b2 = new_params

    history: list[EpochStats] = []
    best_val = math.inf
    best_weights = weights.copy()
    epochs_since_improvement = 0
    for epoch in range(config.max_epochs):
        epoch_order = rng.permutation(len(train_idx))
        for start in range(0, len(epoch_order), config.batch_size):
            idx = epoch_order[start:start + config.batch_size]
            grad = _gradient_arrays(weights, features_tr[idx], labels_tr[idx], alpha)
            adam_update(grad)
        train_loss = _loss_arrays(weights, features_tr, labels_tr, alpha)
        val_loss = _loss_arrays(weights, features_val, labels_val, alpha)
        history.append(EpochStats(epoch=epoch, train_loss=train_loss, val_loss=val_loss))
        if val_loss < best_val:
            best_val = val_loss
            best_weights = weights.copy()
            epochs_since_improvement = 0
        else:
            epochs_since_improvement += 1
            if epochs_since_improvement >= config.early_stop_patience:
                break
    return best_weights, history


def score_step(w: ScorerWeights | None, step: Step) -> float:
    """Score one step: the feature path (through the MLP) wins when weights
    are supplied and a feature is present; otherwise fall back to the step's
    precomputed score."""
    if w is not None and step.feature is not None:
        return mlp_forward(w, step.feature)
    if step.precomputed_score is not None:
        return float(step.precomputed_score)
    if step.feature is not None:
        raise ScorerError("step has only a feature; scorer weights are required")
    raise ScorerError("step has neither feature nor precomputed_score")


def rank_acc(per_question: dict[str, list[tuple[float, bool]]]) -> float:
    """Pairwise ranking accuracy, averaged per question then over questions.

    For each question with at least one correct and one incorrect trace, the
    fraction of (correct, incorrect) pairs where the correct trace scores
    strictly higher (ties count as 0). Questions lacking either class are
    skipped.
    """
    per_q_acc = []
    for qid in sorted(per_question):
        scores = per_question[qid]
        pos = np.asarray([s for s, ok in scores if ok], dtype=float)
        neg = np.asarray([s for s, ok in scores if not ok], dtype=float)
        if len(pos) == 0 or len(neg) == 0:
            continue
        per_q_acc.append(float(np.mean(pos[:, None] > neg[None, :])))
    if not per_q_acc:
        raise ScorerError("no question has both correct and incorrect traces")
    return float(np.mean(per_q_acc))


def eligible_questions(per_question: dict[str, list[tuple[float, bool]]]) -> tuple[list[str], list[str]]:
    """Split question ids into (eligible, skipped) for rank_acc reporting."""
    eligible, skipped = [], []
    for qid in sorted(per_question):
        flags = {ok for _, ok in per_question[qid]}
        (eligible if flags == {True, False} else skipped).append(qid)
    return eligible, skipped


def trace_prefix_score(w: ScorerWeights | None, steps: list[Step] | tuple[Step, ...],
                       fraction: float) -> float:
    """Mean step score over the first ceil(fraction * N) steps."""
    if not 0.0 < fraction <= 1.0:
        raise ScorerError(f"fraction must lie in (0, 1], got {fraction}")
    k = math.ceil(fraction * len(steps))
    return float(np.mean([score_step(w, s) for s in steps[:k]]))


def rank_acc_prefix_curve(corpus: Corpus, w: ScorerWeights | None,
                          fractions: list[float]) -> list[tuple[float, float]]:
    """RankAcc as a function of the fraction of each trace that is scored."""
    curve = []
    for fraction in fractions:
        per_question: dict[str, list[tuple[float, bool]]] = {}
        for qid, question in corpus.questions.items():
            per_question[qid] = [
                (trace_prefix_score(w, t.steps, fraction), t.correct) for t in question.traces
            ]
        curve.append((fraction, rank_acc(per_question)))
    return curve


def overhead_ratio(m: int, d: int, n_params: float, tokens_per_step: float) -> float:
    """Per-step scorer FLOPs, 2m(d+1), relative to generator FLOPs, 2 * n_params
    * tokens_per_step."""
    if m <= 0 or d <= 0 or n_params <= 0 or tokens_per_step <= 0:
        raise ScorerError("all overhead_ratio arguments must be positive")
    return (2.0 * m * (d + 1)) / (2.0 * n_params * tokens_per_step)


_WEIGHTS_MAGIC = b"TSW\x01"
WEIGHTS_FORMAT_VERSION = 1


def save_weights(w: ScorerWeights, path: str | Path) -> None:
    """Binary container: magic, version, d, m, then w1/b1/w2/b2 as row-major
    float64. Byte-stable for identical weights; round-trips bit-exactly."""
    w.validate()
    path = Path(path)
    with path.open("wb") as fh:
        fh.write(_WEIGHTS_MAGIC)
        fh.write(struct.pack("<III", WEIGHTS_FORMAT_VERSION, w.d, w.m))
        for block in (w.w1, w.b1, w.w2):
            fh.write(np.ascontiguousarray(block, dtype="<f8").tobytes())
        fh.write(struct.pack("<d", w.b2))


def load_weights(path: str | Path) -> ScorerWeights:
    path = Path(path)
    raw = path.read_bytes()
    if raw[:4] != _WEIGHTS_MAGIC:
        raise ScorerError(f"{path}: not a scorer weights file")
    version, d, m = struct.unpack_from("<III", raw, 4)
    if version != WEIGHTS_FORMAT_VERSION:
        raise ScorerError(f"{path}: unsupported weights format version {version}")
    offset = 4 + 12
    expected = (m * d + m + m) * 8 + 8
    if len(raw) - offset != expected:
        raise ScorerError(f"{path}: truncated weights file")

    def take(count: int) -> np.ndarray:
        nonlocal offset
        block = np.frombuffer(raw, dtype="<f8", count=count, offset=offset).copy()
        offset += count * 8
        return block

    w1 = take(m * d).reshape(m, d)
    b1 = take(m)
    w2 = take(m).reshape(1, m)
    (b2,) = struct.unpack_from("<d", raw, offset)
    weights = ScorerWeights(w1=w1, b1=b1, w2=w2, b2=float(b2))
    weights.validate()
    return weights
