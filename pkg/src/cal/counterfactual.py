"""Counterfactual attention: interventions, effects, and the CAL objective.

The counterfactual maps are always detached. Intervening on A cuts the
link from the features to the attention, so no gradient reaches the
attention head through the counterfactual branch; the classifier and the
backbone (through X) still receive gradients from it.

Also hosts the attention regularizers used as comparison baselines.
"""

from __future__ import annotations

import dataclasses

import numpy as np

from .model import (
    AttentionModel,
    attention_l2_normalize,
    attention_pool,
    classify,
    global_representation,
)
from .tensor import (
    Tensor,
    add,
    elementwise_mul,
    neg_entropy,
    reshape,
    scale,
    softmax_cross_entropy,
    sub,
)

STRATEGIES = ("random", "uniform", "reversed", "shuffle")

__all__ = [
    "STRATEGIES",
    "CounterfactualStrategy",
    "attention_dropout",
    "attention_l2_normalize",
    "cal_loss",
    "compute_effect",
    "counterfactual_predict",
    "entropy_regularizer",
    "generate_counterfactual",
    "step_rng",
]


@dataclasses.dataclass(frozen=True)
class CounterfactualStrategy:
    kind: str = "random"
    lo: float = 0.0
    hi: float = 2.0
    seed: int = 0

    def __post_init__(self):
        if self.kind not in STRATEGIES:
            raise ValueError(f"unknown counterfactual strategy {self.kind!r}; expected one of {', '.join(STRATEGIES)}")
        if not self.lo < self.hi:
            raise ValueError(f"random bounds need lo < hi, got [{self.lo}, {self.hi})")
        if self.lo < 0:
            raise ValueError("random bounds must be nonnegative")


def step_rng(seed: int, step: int, stream: int = 0) -> np.random.Generator:
    """Independent generator for one (seed, step) pair."""
    return np.random.default_rng([int(seed), int(step), int(stream)])


def generate_counterfactual(a: Tensor, strategy: CounterfactualStrategy, step: int = 0) -> Tensor:
    """Draw a detached counterfactual attention with the same shape as ``a``."""
    data = a.data
    if data.ndim != 4:
        raise ValueError(f"attention maps must be (N,M,H,W), got {a.shape}")
    if (data < 0).any():
        raise ValueError("attention maps must be nonnegative")
    n = data.shape[0]
    kind = strategy.kind
    if kind == "random":
        rng = step_rng(strategy.seed, step)
        out = rng.uniform(strategy.lo, strategy.hi, size=data.shape)
    elif kind == "uniform":
        out = np.broadcast_to(data.mean(axis=(1, 2, 3), keepdims=True), data.shape).copy()
    elif kind == "reversed":
        out = data.max(axis=(1, 2, 3), keepdims=True) - data
    else:
        if n < 2:
            raise ValueError("shuffle strategy needs a batch of at least N >= 2 samples")
        rng = step_rng(strategy.seed, step)
        out = data[rng.permutation(n)]
    return Tensor._wrap(np.ascontiguousarray(out))


def counterfactual_predict(model: AttentionModel, x: Tensor, a_bar: Tensor) -> Tensor:
    """Classifier output when A is forced to ``a_bar`` and X is kept as is."""
    if a_bar.ndim != 4 or a_bar.shape[0] != x.shape[0] or a_bar.shape[2:] != x.shape[2:]:
        raise ValueError(f"counterfactual maps {a_bar.shape} do not match feature maps {x.shape}")
    if a_bar.shape[1] != model.num_heads:
        raise ValueError(f"counterfactual maps have {a_bar.shape[1]} heads, model has {model.num_heads}")
    return classify(model, global_representation(attention_pool(x, a_bar.detach())))


def compute_effect(y_factual: Tensor, y_counterfactual: Tensor) -> Tensor:
    if y_factual.shape != y_counterfactual.shape:
        raise ValueError(f"logit shapes differ: {y_factual.shape} vs {y_counterfactual.shape}")
    return sub(y_factual, y_counterfactual)


def cal_loss(effect: Tensor, y_factual: Tensor, labels, lambda_effect: float = 1.0) -> Tensor:
    """lambda * CE(effect) + CE(factual). lambda = 0 gives the plain baseline loss."""
    if lambda_effect < 0:
        raise ValueError(f"lambda_effect must be >= 0, got {lambda_effect}")
    return add(scale(softmax_cross_entropy(effect, labels), float(lambda_effect)), softmax_cross_entropy(y_factual, labels))


def attention_dropout(a: Tensor, p: float, seed=0, training: bool = True) -> Tensor:
    """Inverted dropout on attention values; identity when not training."""
    if not 0 <= p < 1:
        raise ValueError(f"dropout probability must be in [0, 1), got {p}")
    if not training or p == 0:
        return a
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    keep = rng.random(a.shape) >= p
    return elementwise_mul(a, Tensor._wrap(keep / (1.0 - p)))


def entropy_regularizer(a: Tensor) -> Tensor:
    """Negative entropy of each (sample, head) map, averaged.

    Minimizing this maximizes attention entropy.
    """
    n, m, h, w = a.shape
    return neg_entropy(reshape(a, (n * m, h * w)))
