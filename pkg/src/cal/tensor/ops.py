"""Differentiable primitives.

Every function takes and returns :class:`Tensor`. Layouts are row-major
NCHW for images and feature maps, (rows, features) for matrices.
"""

from __future__ import annotations

from collections.abc import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .core import Tensor, make_result


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, d in enumerate(shape) if d == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _broadcast_shape(a: tuple[int, ...], b: tuple[int, ...], op: str) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a, b)
    except ValueError:
        raise ValueError(f"{op}: shapes {a} and {b} are not broadcastable") from None


def add(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape(a.shape, b.shape, "add")
    sa, sb = a.shape, b.shape
    return make_result(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)),
        "add",
    )


def sub(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape(a.shape, b.shape, "sub")
    sa, sb = a.shape, b.shape
    return make_result(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)),
        "sub",
    )


def elementwise_mul(a: Tensor, b: Tensor) -> Tensor:
    """Hadamard product with numpy broadcasting; both sides get gradients.

    A single-channel map of shape (N, 1, H, W) broadcasts over the channels
    of an (N, C, H, W) operand.
    """
    _broadcast_shape(a.shape, b.shape, "elementwise_mul")
    ad, bd = a.data, b.data

    def backward(g):
        ga = _unbroadcast(g * bd, ad.shape) if a.requires_grad else None
        gb = _unbroadcast(g * ad, bd.shape) if b.requires_grad else None
        return ga, gb

    return make_result(ad * bd, (a, b), backward, "mul")


def scale(a: Tensor, c: float) -> Tensor:
    return make_result(a.data * c, (a,), lambda g: (g * c,), "scale")


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    old = a.shape
    out = a.data.reshape(tuple(shape))
    return make_result(out, (a,), lambda g: (g.reshape(old),), "reshape")


def sum(a: Tensor) -> Tensor:
    shape = a.shape
    return make_result(
        np.asarray(a.data.sum()), (a,), lambda g: (np.broadcast_to(g, shape),), "sum"
    )


def mean(a: Tensor) -> Tensor:
    shape, n = a.shape, a.data.size
    return make_result(
        np.asarray(a.data.mean()),
        (a,),
        lambda g: (np.broadcast_to(g / n, shape),),
        "mean",
    )


def relu(x: Tensor) -> Tensor:
    """max(0, x); the subgradient at exactly 0 is 0."""
    mask = x.data > 0
    return make_result(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,), "relu")


def conv2d(
    x: Tensor,
    weight: Tensor,
    bias: Tensor,
    stride: int = 1,
    padding: int = 0,
) -> Tensor:
    """2-D cross-correlation of an (N,C,H,W) batch with (K,C,kh,kw) kernels."""
    if x.ndim != 4 or weight.ndim != 4:
        raise ValueError(
            f"conv2d expects input (N,C,H,W) and weight (K,C,kh,kw), got {x.shape} and {weight.shape}"
        )
    n, c, h, w = x.shape
    k, cw, kh, kw = weight.shape
    if cw != c:
        raise ValueError(f"conv2d: input has C={c} channels but weight expects C={cw}")
    if bias.shape != (k,):
        raise ValueError(f"conv2d: bias shape {bias.shape} does not match K={k}")
    if stride < 1 or padding < 0:
        raise ValueError(f"conv2d: need stride >= 1 and padding >= 0, got {stride}, {padding}")
    hp, wp = h + 2 * padding, w + 2 * padding
    if hp < kh or wp < kw:
        raise ValueError(
            f"conv2d: kernel {kh}x{kw} larger than padded input {hp}x{wp} (H={h}, W={w}, padding={padding})"
        )
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    # (N*Ho*Wo, C*kh*kw) patch matrix
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)
    wmat = weight.data.reshape(k, c * kh * kw)
    out = (cols @ wmat.T).reshape(n, ho, wo, k).transpose(0, 3, 1, 2) + bias.data[None, :, None, None]
    out = np.ascontiguousarray(out)

    def backward(g):
        gmat = g.transpose(0, 2, 3, 1).reshape(n * ho * wo, k)
        gw = (gmat.T @ cols).reshape(weight.shape) if weight.requires_grad else None
        gb = g.sum(axis=(0, 2, 3)) if bias.requires_grad else None
        gx = None
        if x.requires_grad:
            dcols = (gmat @ wmat).reshape(n, ho, wo, c, kh, kw)
            dxp = np.zeros((n, c, hp, wp))
            for i in range(kh):
                for j in range(kw):
                    dxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += dcols[
                        :, :, :, :, i, j
                    ].transpose(0, 3, 1, 2)
            gx = dxp[:, :, padding : padding + h, padding : padding + w] if padding else dxp
        return gx, gw, gb

    return make_result(out, (x, weight, bias), backward, "conv2d")


def global_avg_pool(x: Tensor) -> Tensor:
    """Per-channel spatial mean: (N,C,H,W) -> (N,C)."""
    if x.ndim != 4:
        raise ValueError(f"global_avg_pool expects (N,C,H,W), got {x.shape}")
    hw = x.shape[2] * x.shape[3]
    return make_result(
        x.data.mean(axis=(2, 3)),
        (x,),
        lambda g: (np.broadcast_to(g[:, :, None, None] / hw, x.shape),),
        "global_avg_pool",
    )


def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """x @ weight + bias with weight stored as (D, K)."""
    if x.ndim != 2 or weight.ndim != 2:
        raise ValueError(f"linear expects x (N,D) and weight (D,K), got {x.shape} and {weight.shape}")
    if x.shape[1] != weight.shape[0]:
        raise ValueError(f"linear: input width D={x.shape[1]} but weight has D={weight.shape[0]}")
    if bias.shape != (weight.shape[1],):
        raise ValueError(f"linear: bias shape {bias.shape} does not match K={weight.shape[1]}")
    xd, wd = x.data, weight.data

    def backward(g):
        return (
            g @ wd.T if x.requires_grad else None,
            xd.T @ g if weight.requires_grad else None,
            g.sum(axis=0) if bias.requires_grad else None,
        )

    return make_result(xd @ wd + bias.data, (x, weight, bias), backward, "linear")


def _check_labels(labels, n: int, k: int) -> np.ndarray:
    lab = np.asarray(labels)
    if lab.shape != (n,):
        raise ValueError(f"expected {n} labels, got shape {lab.shape}")
    if not np.issubdtype(lab.dtype, np.integer):
        raise ValueError("labels must be integers")
    bad = (lab < 0) | (lab >= k)
    if bad.any():
        i = int(np.flatnonzero(bad)[0])
        raise ValueError(f"label {int(lab[i])} at position {i} is outside [0, {k})")
    return lab


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean over the batch of -log softmax(logits)[label]."""
    if logits.ndim != 2:
        raise ValueError(f"softmax_cross_entropy expects (N,K) logits, got {logits.shape}")
    n, k = logits.shape
    if k < 2:
        raise ValueError("softmax_cross_entropy needs at least 2 classes")
    lab = _check_labels(labels, n, k)
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(n)
    loss = np.mean(lse - z[rows, lab])

    def backward(g):
        p = np.exp(z - lse[:, None])
        p[rows, lab] -= 1.0
        return (p * (g / n),)

    return make_result(np.asarray(loss), (logits,), backward, "softmax_cross_entropy")


def l2_normalize(x: Tensor) -> Tensor:
    """Scale each row of a 2-D tensor to unit Euclidean norm.

    All-zero rows stay zero and pass no gradient.
    """
    if x.ndim != 2:
        raise ValueError(f"l2_normalize expects a 2-D tensor, got {x.shape}")
    norm = np.sqrt((x.data * x.data).sum(axis=1, keepdims=True))
    nonzero = norm > 0
    safe = np.where(nonzero, norm, 1.0)
    y = x.data / safe

    def backward(g):
        dot = (g * y).sum(axis=1, keepdims=True)
        return (np.where(nonzero, (g - y * dot) / safe, 0.0),)

    return make_result(y, (x,), backward, "l2_normalize")


def pairwise_distance(x: Tensor, eps: float = 1e-12) -> Tensor:
    """(N,D) -> (N,N) Euclidean distances sqrt(|xi - xj|^2 + eps)."""
    if x.ndim != 2:
        raise ValueError(f"pairwise_distance expects (N,D), got {x.shape}")
    diff = x.data[:, None, :] - x.data[None, :, :]
    d = np.sqrt((diff * diff).sum(axis=2) + eps)

    def backward(g):
        coef = (g + g.T) / d
        return ((coef[:, :, None] * diff).sum(axis=1),)

    return make_result(d, (x,), backward, "pairwise_distance")


def gather(x: Tensor, rows, cols) -> Tensor:
    """Pick x[rows[i], cols[i]] into a 1-D tensor."""
    r = np.asarray(rows, dtype=np.intp)
    c = np.asarray(cols, dtype=np.intp)
    shape = x.shape

    def backward(g):
        out = np.zeros(shape)
        np.add.at(out, (r, c), g)
        return (out,)

    return make_result(x.data[r, c], (x,), backward, "gather")


def neg_entropy(x: Tensor) -> Tensor:
    """Mean over rows of sum p*log(p) where p is the row rescaled to sum to 1.

    Rows must be nonnegative. A row summing to zero contributes 0. Cells at
    exactly 0 receive zero gradient (the one-sided derivative is -inf).
    """
    if x.ndim != 2:
        raise ValueError(f"neg_entropy expects a 2-D tensor, got {x.shape}")
    if (x.data < 0).any():
        raise ValueError("neg_entropy needs nonnegative inputs")
    rows = x.shape[0]
    s = x.data.sum(axis=1, keepdims=True)
    live = s > 0
    safe_s = np.where(live, s, 1.0)
    p = x.data / safe_s
    pos = p > 0
    logp = np.log(np.where(pos, p, 1.0))
    plogp = np.where(pos, p * logp, 0.0)
    row_val = plogp.sum(axis=1, keepdims=True)
    value = row_val.sum() / rows

    def backward(g):
        gx = (logp - row_val) / safe_s
        gx = np.where(pos & live, gx, 0.0)
        return (gx * (g / rows),)

    return make_result(np.asarray(value), (x,), backward, "neg_entropy")
