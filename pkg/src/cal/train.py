"""SGD training for the baseline, CAL and regularizer objectives."""

from __future__ import annotations

import dataclasses
import logging
import time
import warnings
from collections.abc import Sequence

import numpy as np

from . import counterfactual as cf
from .metrics import evaluate_attention, evaluate_classification, evaluate_retrieval
from .model import (
    AttentionModel,
    attention_pool,
    calibrate,
    classify,
    compute_attention,
    extract_features,
    global_representation,
)
from .synthdata import SyntheticSample
from .tensor import (
    Tensor,
    add,
    backward,
    gather,
    l2_normalize,
    mean,
    pairwise_distance,
    relu,
    scale,
    softmax_cross_entropy,
)

logger = logging.getLogger(__name__)

OBJECTIVES = ("baseline", "cal", "dropout", "entropy", "l2norm")


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int, loss: float):
        super().__init__(f"loss became {loss} at step {step}")
        self.step = step
        self.loss = loss


@dataclasses.dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 32
    learning_rate: float = 0.1
    lr_decay: float = 0.9
    lr_decay_every: int = 2
    momentum: float = 0.9
    weight_decay: float = 1e-5
    objective: str = "baseline"
    strategy: str = "random"
    lambda_effect: float = 1.0
    dropout_p: float = 0.2
    entropy_weight: float = 0.1
    triplet_margin: float = 0.3
    grad_clip: float = 0.0
    calibration_size: int = 256
    mode: str = "classification"
    seed: int = 0

    def validate(self) -> None:
        if self.epochs < 1 or self.batch_size < 1 or not self.learning_rate > 0:
            raise ValueError("epochs, batch_size and learning_rate must be positive")
        if not 0 < self.lr_decay <= 1:
            raise ValueError(f"lr_decay must be in (0, 1], got {self.lr_decay}")
        if self.lr_decay_every < 1:
            raise ValueError("lr_decay_every must be positive")
        if self.objective not in OBJECTIVES:
            raise ValueError(f"unknown objective {self.objective!r}; expected one of {', '.join(OBJECTIVES)}")
        if self.mode not in ("classification", "retrieval"):
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.lambda_effect < 0:
            raise ValueError("lambda_effect must be >= 0")
        if self.objective == "cal" and self.strategy == "shuffle" and self.batch_size < 2:
            raise ValueError("shuffle strategy needs batch size N >= 2")
        self.counterfactual_strategy()
        if self.calibration_size < 0 or self.calibration_size == 1:
            raise ValueError("calibration_size must be 0 (off) or at least 2")
        if not 0 <= self.dropout_p < 1:
            raise ValueError("dropout_p must be in [0, 1)")

    def counterfactual_strategy(self) -> cf.CounterfactualStrategy:
        return cf.CounterfactualStrategy(kind=self.strategy, seed=self.seed)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclasses.dataclass
class MetricsReport:
    top1_accuracy: float | None = None
    attention_miou: float | None = None
    cmc: list[float] = dataclasses.field(default_factory=list)
    map_score: float | None = None
    epoch_losses: list[float] = dataclasses.field(default_factory=list)
    epoch_train_accuracy: list[float] = dataclasses.field(default_factory=list)
    epoch_lr: list[float] = dataclasses.field(default_factory=list)
    step_losses: list[float] = dataclasses.field(default_factory=list)
    wall_clock_seconds: float = 0.0

    def summary(self) -> dict:
        out = {
            "top1_accuracy": self.top1_accuracy,
            "attention_miou": self.attention_miou,
            "map": self.map_score,
            "final_loss": self.epoch_losses[-1] if self.epoch_losses else None,
        }
        for k in (1, 5, 10):
            if len(self.cmc) >= k:
                out[f"cmc@{k}"] = self.cmc[k - 1]
        return out


class SGD:
    """Momentum SGD with L2 weight decay folded into the gradient."""

    def __init__(self, model: AttentionModel, lr: float, momentum: float, weight_decay: float):
        self.model = model
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = {name: np.zeros_like(p.data) for name, p in model.params.items()}

    def clip(self, max_norm: float) -> float:
        """Rescale gradients to a global norm of at most ``max_norm``; returns the norm before clipping."""
        grads = [p.grad for p in self.model.params.values() if p.grad is not None]
        total = float(np.sqrt(sum(float((g * g).sum()) for g in grads)))
        if max_norm > 0 and total > max_norm:
            for p in self.model.params.values():
                if p.grad is not None:
                    p.grad = p.grad * (max_norm / total)
        return total

    def step(self) -> None:
        for name, p in list(self.model.params.items()):
            g = np.zeros_like(p.data) if p.grad is None else p.grad
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            v = self.velocity[name]
            v *= self.momentum
            v += g
            # fresh tensor instead of mutating the old one in place
            self.model.params[name] = Tensor._wrap(p.data - self.lr * v)
            self.model.params[name].requires_grad = True


def triplet_loss(embeddings: Tensor, identity_labels, margin: float) -> Tensor:
    """Batch-hard triplet loss on l2-normalized embeddings.

    For each anchor with at least one positive and one negative in the batch:
    max(0, d(hardest positive) - d(hardest negative) + margin), averaged.
    """
    ids = np.asarray(identity_labels)
    n = len(ids)
    same = ids[:, None] == ids[None, :]
    pos_mask = same & ~np.eye(n, dtype=bool)
    neg_mask = ~same
    valid = pos_mask.any(axis=1) & neg_mask.any(axis=1)
    if not valid.any():
        warnings.warn("triplet batch has no anchor with both a positive and a negative; loss is 0", stacklevel=2)
        return Tensor(0.0)
    d = pairwise_distance(l2_normalize(embeddings))
    anchors = np.flatnonzero(valid)
    dd = d.data
    hard_pos = np.where(pos_mask, dd, -np.inf)[anchors].argmax(axis=1)
    hard_neg = np.where(neg_mask, dd, np.inf)[anchors].argmin(axis=1)
    d_pos = gather(d, anchors, hard_pos)
    d_neg = gather(d, anchors, hard_neg)
    return mean(relu(add(scale(d_neg, -1.0), add(d_pos, Tensor(margin)))))


def _batches(n: int, batch_size: int, rng: np.random.Generator, min_size: int) -> list[np.ndarray]:
    perm = rng.permutation(n)
    out = [perm[i : i + batch_size] for i in range(0, n, batch_size)]
    if len(out) > 1 and len(out[-1]) < min_size:
        last = out.pop()
        out[-1] = np.concatenate([out[-1], last])
    return out


def _pk_batches(ids: np.ndarray, batch_size: int, rng: np.random.Generator) -> list[np.ndarray]:
    """Batches holding every view of a few identities, for triplet mining."""
    uniq = np.unique(ids)
    views = max(1, int(np.bincount(np.searchsorted(uniq, ids)).max()))
    per_batch = max(2, batch_size // views)
    order = rng.permutation(uniq)
    groups = [order[i : i + per_batch] for i in range(0, len(order), per_batch)]
    if len(groups) > 1 and len(groups[-1]) < 2:
        last = groups.pop()
        groups[-1] = np.concatenate([groups[-1], last])
    return [np.flatnonzero(np.isin(ids, g)) for g in groups]


def step_loss(
    model: AttentionModel,
    images: Tensor,
    labels: np.ndarray,
    config: TrainConfig,
    step: int,
    identity_labels: np.ndarray | None = None,
) -> tuple[Tensor, Tensor, Tensor]:
    """Training loss for one batch; returns (loss, factual logits, representation)."""
    x = extract_features(model, images)
    a = compute_attention(model, x)
    a_used = a
    if config.objective == "dropout":
        a_used = cf.attention_dropout(a, config.dropout_p, cf.step_rng(config.seed, step, stream=2))
    h = global_representation(attention_pool(x, a_used))
    logits = classify(model, h)
    if config.objective == "cal":
        a_bar = cf.generate_counterfactual(a, config.counterfactual_strategy(), step)
        effect = cf.compute_effect(logits, cf.counterfactual_predict(model, x, a_bar))
        loss = cf.cal_loss(effect, logits, labels, config.lambda_effect)
    else:
        loss = softmax_cross_entropy(logits, labels)
        if config.objective == "entropy":
            loss = add(loss, scale(cf.entropy_regularizer(a), config.entropy_weight))
    if config.mode == "retrieval":
        loss = add(loss, triplet_loss(h, identity_labels if identity_labels is not None else labels, config.triplet_margin))
    return loss, logits, h


def train(
    model: AttentionModel,
    data: Sequence[SyntheticSample],
    config: TrainConfig,
    eval_data: Sequence[SyntheticSample] | None = None,
    query: Sequence[SyntheticSample] | None = None,
    gallery: Sequence[SyntheticSample] | None = None,
    threshold_fraction: float = 0.5,
) -> tuple[AttentionModel, MetricsReport]:
    """Train in place and return (model, report).

    Classification labels come from ``class_label``. In retrieval mode the
    identities of ``data`` are remapped to 0..P-1 for the softmax head and a
    batch-hard triplet term is added. When evaluation data is given the
    report carries test accuracy and mIoU (classification) or CMC and mAP
    (retrieval).
    """
    config.validate()
    if len(data) == 0:
        raise ValueError("training set is empty")
    if config.mode == "retrieval":
        if any(s.identity_label is None for s in data):
            raise ValueError("retrieval training needs identity labels")
        raw = np.array([s.identity_label for s in data])
        labels_all = np.searchsorted(np.unique(raw), raw)
    else:
        labels_all = np.array([s.class_label for s in data])
    if labels_all.min() < 0 or labels_all.max() >= model.num_classes:
        raise ValueError(f"labels span [{labels_all.min()}, {labels_all.max()}] but the model has {model.num_classes} classes")
    if config.objective == "l2norm" and not model.attention_norm:
        model.attention_norm = True

    images_all = np.stack([s.image for s in data])
    if config.calibration_size and len(data) >= 2:
        calibrate(model, images_all[: config.calibration_size])
    opt = SGD(model, config.learning_rate, config.momentum, config.weight_decay)
    report = MetricsReport()
    min_batch = 2 if config.objective == "cal" and config.strategy == "shuffle" else 1
    start = time.perf_counter()
    step = 0
    warned_dead = False
    for epoch in range(config.epochs):
        lr = config.learning_rate * config.lr_decay ** (epoch // config.lr_decay_every)
        opt.lr = lr
        rng = np.random.default_rng([int(config.seed), epoch, 1])
        if config.mode == "retrieval":
            batches = _pk_batches(labels_all, config.batch_size, rng)
        else:
            batches = _batches(len(data), config.batch_size, rng, min_batch)
        total, correct, seen = 0.0, 0, 0
        for idx in batches:
            if min_batch > len(idx):
                raise ValueError("shuffle strategy needs batch size N >= 2")
            labels = labels_all[idx]
            model.zero_grad()
            loss, logits, h = step_loss(model, Tensor._wrap(images_all[idx]), labels, config, step)
            if not warned_dead and not (h.data != 0).any(axis=1).all():
                # dead ReLUs upstream; no gradient reaches those samples
                logger.warning("step %d: some samples have an all-zero representation", step)
                warned_dead = True
            value = loss.item()
            if not np.isfinite(value):
                raise TrainingDiverged(step, value)
            backward(loss)
            if config.grad_clip > 0:
                opt.clip(config.grad_clip)
            opt.step()
            report.step_losses.append(value)
            total += value * len(idx)
            correct += int((logits.data.argmax(axis=1) == labels).sum())
            seen += len(idx)
            step += 1
        report.epoch_losses.append(total / seen)
        report.epoch_train_accuracy.append(correct / seen)
        report.epoch_lr.append(lr)
        logger.info("epoch %d lr %.5f loss %.4f train acc %.3f", epoch + 1, lr, total / seen, correct / seen)
    report.wall_clock_seconds = time.perf_counter() - start
    if eval_data:
        report.top1_accuracy = evaluate_classification(model, eval_data)
        report.attention_miou = evaluate_attention(model, eval_data, threshold_fraction)
    if query and gallery:
        report.cmc, report.map_score = evaluate_retrieval(model, query, gallery)
    return model, report
