"""Central finite-difference gradient checking."""

from __future__ import annotations

from collections.abc import Callable, Sequence

import numpy as np

from .core import Tensor, backward, no_grad

TensorArgs = Tensor | Sequence[Tensor]


def _as_list(x: TensorArgs) -> list[Tensor]:
    return [x] if isinstance(x, Tensor) else list(x)


def _value(f, arrays: list[np.ndarray]) -> float:
    with no_grad():
        out = f(*[Tensor(a) for a in arrays])
    if out.data.size != 1:
        raise ValueError(f"f must return a scalar, got shape {out.shape}")
    return float(out.data.reshape(()))


def analytic_gradients(f: Callable[..., Tensor], x: TensorArgs) -> list[np.ndarray]:
    leaves = [Tensor(t.data, requires_grad=True) for t in _as_list(x)]
    out = f(*leaves)
    if out.data.size != 1:
        raise ValueError(f"f must return a scalar, got shape {out.shape}")
    backward(out)
    return [np.zeros_like(l.data) if l.grad is None else l.grad for l in leaves]


def numerical_gradients(f: Callable[..., Tensor], x: TensorArgs, eps: float = 1e-5) -> list[np.ndarray]:
    base = [t.data.copy() for t in _as_list(x)]
    grads = []
    for k, arr in enumerate(base):
        g = np.zeros_like(arr)
        flat = arr.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            plus = _value(f, base)
            flat[i] = orig - eps
            minus = _value(f, base)
            flat[i] = orig
            g.reshape(-1)[i] = (plus - minus) / (2 * eps)
        grads.append(g)
    return grads


def relative_errors(analytic: np.ndarray, numeric: np.ndarray) -> np.ndarray:
    return np.abs(analytic - numeric) / np.maximum(1e-8, np.abs(analytic) + np.abs(numeric))


def check_gradients(f: Callable[..., Tensor], x: TensorArgs, eps: float = 1e-5) -> float:
    """Max relative error between backprop and central differences.

    ``f`` maps the tensor(s) in ``x`` (passed positionally) to a scalar
    tensor. The error per coordinate is
    ``|a - n| / max(1e-8, |a| + |n|)``.
    """
    if not eps > 0:
        raise ValueError(f"eps must be positive, got {eps}")
    base = [t.data.copy() for t in _as_list(x)]
    if _value(f, base) != _value(f, base):
        raise ValueError("f is not deterministic: two evaluations at the same point differ")
    analytic = analytic_gradients(f, x)
    numeric = numerical_gradients(f, x, eps)
    worst = 0.0
    for a, n in zip(analytic, numeric):
        if a.size:
            worst = max(worst, float(relative_errors(a, n).max()))
    return worst
