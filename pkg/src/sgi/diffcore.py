"""Minimal reverse-mode autodiff over numpy arrays.

Only the operations the networks in this package need are provided. Elementwise
ops require identical shapes; the single exception is the bias add inside
:func:`affine` and :func:`conv2d`. Reductions follow numpy's fixed order, so a
forward pass is bit-reproducible for identical inputs.
"""
from __future__ import annotations

import threading
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

LAYER_NORM_EPS = 1e-5

_state = threading.local()


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextmanager
def no_grad():
    """Skip graph construction inside the block (per thread)."""
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class DimensionError(ValueError):
    pass


class ContractError(RuntimeError):
    pass


class Tensor:
    """An n-d array that can accumulate a gradient."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{label}, requires_grad={self.requires_grad})"

    def backward(self, grad: np.ndarray | None = None) -> None:
        if not self.requires_grad:
            raise ContractError("backward() on a tensor that does not require grad")
        if grad is None:
            if self.data.size != 1:
                raise ContractError("backward() without a seed gradient needs a scalar output")
            grad = np.ones_like(self.data)
        order = _topological_order(self)
        pending: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=self.data.dtype)}
        for node in order:
            g = pending.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                # leaf
                if node.grad is None:
                    node.grad = g.copy()
                else:
                    node.grad += g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                prev = pending.get(id(parent))
                pending[id(parent)] = pg if prev is None else prev + pg

    # arithmetic sugar; all same-shape
    def __add__(self, other: Tensor) -> Tensor:
        return add(self, other)

    def __sub__(self, other: Tensor) -> Tensor:
        return sub(self, other)

    def __mul__(self, other) -> Tensor:
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __neg__(self) -> Tensor:
        return scale(self, -1.0)

    def sum(self) -> Tensor:
        return total(self)

    def mean(self) -> Tensor:
        return mean(self)

    def reshape(self, *shape) -> Tensor:
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    order.reverse()
    return order


def _result(data: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise FloatingPointError("non-finite value produced by a forward op")
    out = Tensor(data)
    if grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} differ")


# elementwise / structural ops


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "add")
    return _result(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "sub")
    return _result(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "mul")
    return _result(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))


def scale(a: Tensor, c: float) -> Tensor:
    return _result(a.data * a.data.dtype.type(c), (a,), lambda g: (g * g.dtype.type(c),))


def square(a: Tensor) -> Tensor:
    return _result(a.data * a.data, (a,), lambda g: (2.0 * g * a.data,))


def exp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        out = np.exp(a.data)  # overflow is reported by the finite-value check in _result
    return _result(out, (a,), lambda g: (g * out,))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _result(np.maximum(a.data, a.dtype.type(0)), (a,), lambda g: (g * mask,))


def total(a: Tensor) -> Tensor:
    return _result(np.asarray(a.data.sum()), (a,), lambda g: (np.full_like(a.data, g),))


def mean(a: Tensor) -> Tensor:
    n = a.data.size
    return _result(np.asarray(a.data.mean()), (a,), lambda g: (np.full_like(a.data, g / n),))


def weighted_sum(a: Tensor, w: np.ndarray) -> Tensor:
    """sum(a * w) for a constant weight array of the same shape."""
    w = np.asarray(w, dtype=a.dtype)
    if w.shape != a.shape:
        raise DimensionError(f"weighted_sum: shapes {a.shape} and {w.shape} differ")
    return _result(np.asarray((a.data * w).sum()), (a,), lambda g: (g * w,))


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(int(s) for s in shape)
    return _result(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    arrays = [t.data for t in tensors]
    sizes = np.cumsum([arr.shape[axis] for arr in arrays])[:-1]

    def backward(g):
        return tuple(np.split(g, sizes, axis=axis))

    return _result(np.concatenate(arrays, axis=axis), tuple(tensors), backward)


def columns(a: Tensor, start: int, stop: int) -> Tensor:
    """Slice a[:, start:stop] of a 2-d tensor."""
    if a.data.ndim != 2:
        raise DimensionError("columns() expects a 2-d tensor")

    def backward(g):
        full = np.zeros_like(a.data)
        full[:, start:stop] = g
        return (full,)

    return _result(a.data[:, start:stop].copy(), (a,), backward)


def select(a: Tensor, index: int, axis: int = 1) -> Tensor:
    """Take one slice along an axis, dropping that axis."""

    def backward(g):
        full = np.zeros_like(a.data)
        sl = [slice(None)] * a.data.ndim
        sl[axis] = index
        full[tuple(sl)] = g
        return (full,)

    return _result(np.take(a.data, index, axis=axis), (a,), backward)


def gather_rows(a: Tensor, index: np.ndarray) -> Tensor:
    """out[b] = a[b, index[b]] for a 2-d tensor."""
    index = np.asarray(index, dtype=np.int64)
    if a.data.ndim != 2 or index.shape != (a.shape[0],):
        raise DimensionError("gather_rows expects a [B, A] tensor and B indices")
    if index.size and (index.min() < 0 or index.max() >= a.shape[1]):
        raise IndexError("gather_rows index out of range")
    rows = np.arange(a.shape[0])

    def backward(g):
        full = np.zeros_like(a.data)
        full[rows, index] = g
        return (full,)

    return _result(a.data[rows, index], (a,), backward)


def pad2d(x: Tensor, pad: int) -> Tensor:
    """Zero-pad the two trailing spatial axes of a [B, C, H, W] tensor."""
    if pad == 0:
        return x
    p = int(pad)
    widths = ((0, 0), (0, 0), (p, p), (p, p))

    def backward(g):
        return (g[:, :, p:-p, p:-p],)

    return _result(np.pad(x.data, widths), (x,), backward)


# network primitives


def affine(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """out[b, o] = sum_i x[b, i] * w[i, o] + bias[o]."""
    if x.data.ndim != 2 or w.data.ndim != 2 or x.shape[1] != w.shape[0]:
        raise DimensionError(f"affine: cannot combine x{x.shape} with W{w.shape}")
    if b is not None and b.shape != (w.shape[1],):
        raise DimensionError(f"affine: bias shape {b.shape} != ({w.shape[1]},)")
    out = x.data @ w.data
    if b is not None:
        out += b.data

    def backward(g):
        gx = g @ w.data.T if x.requires_grad else None
        gw = x.data.T @ g if w.requires_grad else None
        if b is None:
            return gx, gw
        return gx, gw, g.sum(axis=0)

    parents = (x, w) if b is None else (x, w, b)
    return _result(out, parents, backward)


def conv_output_size(size: int, kernel: int, stride: int) -> int:
    if size < kernel:
        raise DimensionError(f"kernel {kernel} larger than input extent {size}")
    return (size - kernel) // stride + 1


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1) -> Tensor:
    """Valid cross-correlation. x: [B, C, H, W], w: [O, C, k, k], bias: [O]."""
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise DimensionError("conv2d expects x[B,C,H,W] and w[O,C,k,k]")
    B, C, H, W = x.shape
    O, Cw, kh, kw = w.shape
    if Cw != C:
        raise DimensionError(f"conv2d: input has {C} channels, kernel expects {Cw}")
    oh = conv_output_size(H, kh, stride)
    ow = conv_output_size(W, kw, stride)
    # gather patches channels-last so each copied run is a contiguous channel vector
    xl = np.ascontiguousarray(x.data.transpose(0, 2, 3, 1))
    win = sliding_window_view(xl, (kh, kw), axis=(1, 2))[:, ::stride, ::stride][:, :oh, :ow]
    cols = np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3)).reshape(B * oh * ow, kh * kw * C)
    wmat = w.data.transpose(0, 2, 3, 1).reshape(O, kh * kw * C)
    out = cols @ wmat.T
    if b is not None:
        out += b.data
    out = np.ascontiguousarray(out.reshape(B, oh, ow, O).transpose(0, 3, 1, 2))

    def backward(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(B * oh * ow, O)
        gw = None
        if w.requires_grad:
            gw = np.ascontiguousarray((g2.T @ cols).reshape(O, kh, kw, C).transpose(0, 3, 1, 2))
        gx = None
        if x.requires_grad:
            gcols = (g2 @ wmat).reshape(B, oh, ow, kh, kw, C)
            gxl = np.zeros((B, H, W, C), dtype=x.data.dtype)
            he = stride * (oh - 1) + 1
            we = stride * (ow - 1) + 1
            for i in range(kh):
                for j in range(kw):
                    gxl[:, i:i + he:stride, j:j + we:stride] += gcols[:, :, :, i, j]
            gx = np.ascontiguousarray(gxl.transpose(0, 3, 1, 2))
        if b is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    parents = (x, w) if b is None else (x, w, b)
    return _result(out, parents, backward)


def _cosine_backward(g, a, b, na, nb, cos):
    """Gradient of the row-wise cosine w.r.t. both inputs."""
    g = g[:, None]
    ga = g * (b / (na * nb)[:, None] - cos[:, None] * a / (na * na)[:, None])
    gb = g * (a / (na * nb)[:, None] - cos[:, None] * b / (nb * nb)[:, None])
    return ga, gb


def cosine_similarity(a: Tensor, b: Tensor, on_zero: str = "error") -> Tensor:
    """Row-wise cosine similarity; [D]x[D] -> scalar, [B,D]x[B,D] -> [B].

    ``on_zero`` is "error" (raise on a zero-norm row) or "zero" (cosine 0 with
    zero gradient for that row).
    """
    _same_shape(a, b, "cosine_similarity")
    if on_zero not in ("error", "zero"):
        raise ValueError(f"unknown zero-norm policy {on_zero!r}")
    vector = a.data.ndim == 1
    A = a.data[None] if vector else a.data
    Bm = b.data[None] if vector else b.data
    if A.ndim != 2:
        raise DimensionError("cosine_similarity expects [D] or [B, D] inputs")
    na = np.sqrt((A * A).sum(axis=1))
    nb = np.sqrt((Bm * Bm).sum(axis=1))
    zero = (na == 0) | (nb == 0)
    if zero.any():
        if on_zero == "error":
            raise ZeroDivisionError("cosine_similarity of a zero-norm vector")
        na = np.where(zero, 1, na)
        nb = np.where(zero, 1, nb)
    cos = (A * Bm).sum(axis=1) / (na * nb)
    cos = np.where(zero, 0, cos).astype(A.dtype)

    def backward(g):
        gv = np.asarray(g).reshape(-1)
        ga, gb = _cosine_backward(gv, A, Bm, na, nb, cos)
        if zero.any():
            ga[zero] = 0
            gb[zero] = 0
        if vector:
            return ga[0], gb[0]
        return ga, gb

    out = cos[0] if vector else cos
    return _result(np.asarray(out), (a, b), backward)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def softmax_cross_entropy(logits: Tensor, labels: np.ndarray, weights: np.ndarray | None = None) -> Tensor:
    """Mean over the batch of -log softmax(logits)[label].

    ``weights`` optionally masks rows; the mean is then over the weight sum.
    """
    labels = np.asarray(labels, dtype=np.int64)
    if logits.data.ndim != 2 or labels.shape != (logits.shape[0],):
        raise DimensionError("softmax_cross_entropy expects logits[B, A] and labels[B]")
    nb, na = logits.shape
    if labels.size and (labels.min() < 0 or labels.max() >= na):
        raise IndexError("label out of range")
    w = np.ones(nb, dtype=logits.dtype) if weights is None else np.asarray(weights, dtype=logits.dtype)
    denom = w.sum()
    if denom <= 0:
        raise ContractError("softmax_cross_entropy needs a positive weight sum")
    logp = log_softmax(logits.data)
    rows = np.arange(nb)
    loss = -(w * logp[rows, labels]).sum() / denom

    def backward(g):
        grad = np.exp(logp)
        grad[rows, labels] -= 1
        return (grad * (g * w / denom)[:, None],)

    return _result(np.asarray(loss, dtype=logits.dtype), (logits,), backward)


def _standardize(x: np.ndarray):
    mu = x.mean(axis=1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + LAYER_NORM_EPS)
    return xc * inv, inv


def _standardize_backward(gxhat: np.ndarray, xhat: np.ndarray, inv: np.ndarray) -> np.ndarray:
    d = xhat.shape[1]
    return inv / d * (d * gxhat - gxhat.sum(axis=1, keepdims=True) - xhat * (gxhat * xhat).sum(axis=1, keepdims=True))


def layer_norm(x: Tensor, scale: Tensor, shift: Tensor) -> Tensor:
    """Per-row standardization followed by a learned per-feature affine map."""
    if x.data.ndim != 2 or scale.shape != (x.shape[1],) or shift.shape != (x.shape[1],):
        raise DimensionError("layer_norm expects x[B, D], scale[D], shift[D]")
    xhat, inv = _standardize(x.data)
    out = xhat * scale.data + shift.data

    def backward(g):
        gx = _standardize_backward(g * scale.data, xhat, inv) if x.requires_grad else None
        return gx, (g * xhat).sum(axis=0), g.sum(axis=0)

    return _result(out, (x, scale, shift), backward)


def modulated_norm(x: Tensor, gamma: Tensor, beta: Tensor) -> Tensor:
    """Layer-norm core with per-sample scale and shift: gamma * xhat + beta."""
    _same_shape(x, gamma, "modulated_norm")
    _same_shape(x, beta, "modulated_norm")
    if x.data.ndim != 2:
        raise DimensionError("modulated_norm expects [B, D] tensors")
    xhat, inv = _standardize(x.data)
    out = xhat * gamma.data + beta.data

    def backward(g):
        gx = _standardize_backward(g * gamma.data, xhat, inv) if x.requires_grad else None
        return gx, g * xhat, g

    return _result(out, (x, gamma, beta), backward)


# optimisation


@dataclass
class ParamGroup:
    name: str
    tensors: list[Tensor]
    learning_rate_scale: float = 1.0

    def __post_init__(self):
        # 0 is allowed: it freezes a group while keeping it on the optimizer path
        if not self.learning_rate_scale >= 0:
            raise ValueError(f"group {self.name!r}: learning_rate_scale must be >= 0")


@dataclass
class AdamState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1.5e-4
    step: int = 0
    moments: dict[str, tuple[np.ndarray, np.ndarray]] = field(default_factory=dict)


def adam_step(groups: Sequence[ParamGroup], state: AdamState) -> None:
    """One Adam update in place; clears every gradient afterwards."""
    names = [g.name for g in groups]
    if len(set(names)) != len(names):
        raise ContractError("parameter group names must be unique")
    for group in groups:
        for i, t in enumerate(group.tensors):
            if t.grad is None:
                raise ContractError(f"missing gradient for {group.name}[{i}] ({t.name})")
            if t.grad.shape != t.shape:
                raise ContractError(f"gradient shape mismatch for {group.name}[{i}]")
    state.step += 1
    c1 = 1.0 - state.beta1 ** state.step
    c2 = 1.0 - state.beta2 ** state.step
    for group in groups:
        lr = state.lr * group.learning_rate_scale
        for i, t in enumerate(group.tensors):
            key = f"{group.name}/{i}"
            g = t.grad
            if key not in state.moments:
                state.moments[key] = (np.zeros_like(t.data), np.zeros_like(t.data))
            m, v = state.moments[key]
            m *= state.beta1
            m += (1 - state.beta1) * g
            v *= state.beta2
            v += (1 - state.beta2) * g * g
            if lr != 0:
                t.data -= (lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(t.dtype)
            t.grad = None


def zero_grads(tensors: Iterable[Tensor]) -> None:
    for t in tensors:
        t.grad = None


# verification oracle


def grad_check(
    f: Callable[[], Tensor],
    x: Tensor,
    h: float = 1e-5,
    indices: Sequence[tuple[int, ...]] | None = None,
) -> float:
    """Max relative error between reverse-mode and central-difference gradients.

    ``f`` rebuilds the scalar output from scratch each call and must read ``x``.
    ``indices`` restricts the comparison to a subset of coordinates.
    """
    saved = x.grad
    x.grad = None
    out = f()
    if not np.isfinite(out.data).all():
        raise FloatingPointError("grad_check: non-finite function value")
    if out.data.size != 1:
        raise ContractError("grad_check needs a scalar function")
    out.backward()
    analytic = x.grad if x.grad is not None else np.zeros_like(x.data)
    analytic = analytic.copy()
    if indices is None:
        indices = list(np.ndindex(*x.shape))
    worst = 0.0
    for idx in indices:
        orig = x.data[idx].copy()
        x.data[idx] = orig + h
        fp = f().item()
        x.data[idx] = orig - h
        fm = f().item()
        x.data[idx] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise FloatingPointError("grad_check: non-finite function value")
        numeric = (fp - fm) / (2 * h)
        a = float(analytic[idx])
        err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
        worst = max(worst, err)
    x.grad = saved
    return worst
