"""Reverse-mode automatic differentiation over dense float64 arrays.

Values are numpy arrays of rank <= 3. Every operation records its parents
and a backward closure on the produced node; ``backward`` on a scalar node
replays the recorded tape once, in reverse topological order, accumulating
adjoints on fan-out. There is no silent broadcasting: elementwise ops need
equal shapes, with scalars as the only exception. Shape mismatches raise at
construction time with both shapes in the message.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "ShapeError",
    "TapeError",
    "constant",
    "parameter",
    "add",
    "sub",
    "mul",
    "matmul",
    "relu",
    "exp",
    "sqrt",
    "softmax",
    "reduce_sum",
    "reduce_mean",
    "concat",
    "reshape",
    "transpose",
    "take_rows",
    "bias_add",
    "cumsum",
    "smooth_l1",
    "hinge",
    "group_norm",
    "conv1d",
    "backward",
    "AdamState",
    "adam_step",
    "save_params",
    "load_params",
]

MAX_RANK = 3


class ShapeError(ValueError):
    pass


class TapeError(RuntimeError):
    pass


class Tensor:
    """One node of the differentiation graph: a value plus adjoint storage."""

    __slots__ = ("value", "grad", "parents", "_backward_fn", "_tape")

    def __init__(self, value, parents: tuple = (), backward_fn: Callable | None = None):
        v = np.asarray(value, dtype=np.float64)
        if v.ndim > MAX_RANK:
            raise ShapeError(f"arrays of rank > {MAX_RANK} unsupported, got shape {v.shape}")
        self.value = v
        self.grad: np.ndarray | None = None
        self.parents = parents
        self._backward_fn = backward_fn
        self._tape: Tape | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64)
        else:
            self.grad += g

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> "Tape":
        if self._tape is not None:
            raise TapeError("backward already ran for this node; build a fresh graph")
        self._tape = Tape(self)
        self._tape.run()
        return self._tape

    # operator sugar; scalars are lifted to constants
    def __add__(self, other):
        return add(self, _lift(other))

    def __sub__(self, other):
        return sub(self, _lift(other))

    def __mul__(self, other):
        return mul(self, _lift(other))

    def __rmul__(self, other):
        return mul(_lift(other), self)

    def __matmul__(self, other):
        return matmul(self, _lift(other))

    def __getitem__(self, idx):
        out_val = self.value[idx]

        def bw(out):
            g = np.zeros_like(self.value)
            g[idx] += out.grad
            self.accumulate(g)

        return Tensor(out_val, (self,), bw)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.value.shape})"


class Tape:
    """Topologically ordered record of one forward evaluation.

    Built by tracing parents from a scalar root; running it visits consumers
    before producers. A tape runs exactly once: a second run would silently
    double-accumulate adjoints, so it raises instead.
    """

    def __init__(self, root: Tensor):
        if root.value.shape != ():
            raise ShapeError(f"backward requires a scalar root, got shape {root.value.shape}")
        self.root = root
        self.nodes: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                self.nodes.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node.parents:
                if id(parent) not in seen:
                    stack.append((parent, False))
        self._used = False

    def run(self) -> None:
        if self._used:
            raise TapeError("tape already consumed; backward runs once per forward pass")
        self._used = True
        self.root.accumulate(np.ones_like(self.root.value))
        for node in reversed(self.nodes):
            if node._backward_fn is not None:
                node._backward_fn(node)


def backward(loss: Tensor) -> Tape:
    """Run reverse accumulation from a scalar loss node."""
    return loss.backward()


def constant(value) -> Tensor:
    return Tensor(value)


def parameter(value) -> Tensor:
    return Tensor(np.array(value, dtype=np.float64))


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_elementwise(a: Tensor, b: Tensor, op: str) -> None:
    if a.value.shape != b.value.shape and a.value.ndim != 0 and b.value.ndim != 0:
        raise ShapeError(f"{op}: shape {a.value.shape} does not match shape {b.value.shape}")


def _reduce_to(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    # collapse the gradient of a lifted scalar operand
    return g if shape != () else np.asarray(g.sum())


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _lift(a), _lift(b)
    _check_elementwise(a, b, "add")

    def bw(out):
        a.accumulate(_reduce_to(out.grad, a.value.shape))
        b.accumulate(_reduce_to(out.grad, b.value.shape))

    return Tensor(a.value + b.value, (a, b), bw)


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = _lift(a), _lift(b)
    _check_elementwise(a, b, "sub")

    def bw(out):
        a.accumulate(_reduce_to(out.grad, a.value.shape))
        b.accumulate(_reduce_to(-out.grad, b.value.shape))

    return Tensor(a.value - b.value, (a, b), bw)


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _lift(a), _lift(b)
    _check_elementwise(a, b, "mul")

    def bw(out):
        a.accumulate(_reduce_to(out.grad * b.value, a.value.shape))
        b.accumulate(_reduce_to(out.grad * a.value, b.value.shape))

    return Tensor(a.value * b.value, (a, b), bw)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of two rank-2 tensors or two batch-matched rank-3 tensors."""
    a, b = _lift(a), _lift(b)
    va, vb = a.value, b.value
    ok = (va.ndim == 2 and vb.ndim == 2 and va.shape[1] == vb.shape[0]) or (
        va.ndim == 3 and vb.ndim == 3 and va.shape[0] == vb.shape[0] and va.shape[2] == vb.shape[1]
    )
    if not ok:
        raise ShapeError(f"matmul: shape {va.shape} incompatible with shape {vb.shape}")

    def bw(out):
        g = out.grad
        a.accumulate(g @ np.swapaxes(vb, -1, -2))
        b.accumulate(np.swapaxes(va, -1, -2) @ g)

    return Tensor(va @ vb, (a, b), bw)


def relu(x: Tensor) -> Tensor:
    x = _lift(x)
    mask = x.value > 0

    def bw(out):
        x.accumulate(out.grad * mask)

    return Tensor(np.where(mask, x.value, 0.0), (x,), bw)


def exp(x: Tensor) -> Tensor:
    x = _lift(x)
    val = np.exp(x.value)

    def bw(out):
        x.accumulate(out.grad * val)

    return Tensor(val, (x,), bw)


def sqrt(x: Tensor) -> Tensor:
    x = _lift(x)
    val = np.sqrt(x.value)

    def bw(out):
        x.accumulate(out.grad * 0.5 / val)

    return Tensor(val, (x,), bw)


def softmax(x: Tensor) -> Tensor:
    """Softmax along the last axis."""
    x = _lift(x)
    shifted = x.value - x.value.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    val = e / e.sum(axis=-1, keepdims=True)

    def bw(out):
        g = out.grad
        inner = (g * val).sum(axis=-1, keepdims=True)
        x.accumulate(val * (g - inner))

    return Tensor(val, (x,), bw)


def reduce_sum(x: Tensor, axis: int | None = None) -> Tensor:
    x = _lift(x)
    val = x.value.sum() if axis is None else x.value.sum(axis=axis)

    def bw(out):
        if axis is None:
            x.accumulate(np.full_like(x.value, out.grad))
        else:
            x.accumulate(np.broadcast_to(np.expand_dims(out.grad, axis), x.value.shape).copy())

    return Tensor(val, (x,), bw)


def reduce_mean(x: Tensor, axis: int | None = None) -> Tensor:
    x = _lift(x)
    count = x.value.size if axis is None else x.value.shape[axis]
    return mul(reduce_sum(x, axis), 1.0 / count)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_lift(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat needs at least one tensor")
    sizes = [t.value.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bw(out):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            idx = [slice(None)] * out.grad.ndim
            idx[axis] = slice(lo, hi)
            t.accumulate(out.grad[tuple(idx)])

    return Tensor(np.concatenate([t.value for t in tensors], axis=axis), tuple(tensors), bw)


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    x = _lift(x)

    def bw(out):
        x.accumulate(out.grad.reshape(x.value.shape))

    return Tensor(x.value.reshape(shape), (x,), bw)


def transpose(x: Tensor, axes: tuple[int, ...]) -> Tensor:
    x = _lift(x)
    inverse = tuple(int(i) for i in np.argsort(axes))

    def bw(out):
        x.accumulate(out.grad.transpose(inverse))

    return Tensor(x.value.transpose(axes), (x,), bw)


def take_rows(x: Tensor, indices) -> Tensor:
    """Gather rows along the first axis; duplicate indices sum their adjoints."""
    x = _lift(x)
    idx = np.asarray(indices, dtype=int)

    def bw(out):
        g = np.zeros_like(x.value)
        np.add.at(g, idx, out.grad)
        x.accumulate(g)

    return Tensor(x.value[idx], (x,), bw)


def bias_add(x: Tensor, b: Tensor) -> Tensor:
    """Add a vector ``b`` of shape (C,) to every row of ``x`` of shape (..., C)."""
    x, b = _lift(x), _lift(b)
    if b.value.ndim != 1 or x.value.shape[-1] != b.value.shape[0]:
        raise ShapeError(f"bias_add: shape {x.value.shape} incompatible with bias {b.value.shape}")

    def bw(out):
        x.accumulate(out.grad)
        b.accumulate(out.grad.reshape(-1, b.value.shape[0]).sum(axis=0))

    return Tensor(x.value + b.value, (x, b), bw)


def cumsum(x: Tensor, axis: int) -> Tensor:
    x = _lift(x)

    def bw(out):
        g = np.flip(np.cumsum(np.flip(out.grad, axis=axis), axis=axis), axis=axis)
        x.accumulate(g)

    return Tensor(np.cumsum(x.value, axis=axis), (x,), bw)


def smooth_l1(a: Tensor, b: Tensor, beta: float = 1.0) -> Tensor:
    """Elementwise smooth L1: quadratic below ``beta``, linear above."""
    a, b = _lift(a), _lift(b)
    _check_elementwise(a, b, "smooth_l1")
    d = a.value - b.value
    ad = np.abs(d)
    val = np.where(ad < beta, 0.5 * d * d / beta, ad - 0.5 * beta)

    def bw(out):
        slope = np.where(ad < beta, d / beta, np.sign(d))
        a.accumulate(_reduce_to(out.grad * slope, a.value.shape))
        b.accumulate(_reduce_to(-out.grad * slope, b.value.shape))

    return Tensor(val, (a, b), bw)


def hinge(scores: Tensor, winner: int, margin: float) -> Tensor:
    """Sum over losers of max(0, p_m + margin - p_winner); scalar output."""
    scores = _lift(scores)
    p = scores.value
    if p.ndim != 1:
        raise ShapeError(f"hinge expects rank-1 scores, got shape {p.shape}")
    if not 0 <= winner < p.shape[0]:
        raise IndexError(f"winner {winner} out of range for {p.shape[0]} scores")
    gaps = p + margin - p[winner]
    gaps[winner] = 0.0
    active = gaps > 0

    def bw(out):
        g = np.where(active, 1.0, 0.0)
        g[winner] = -float(active.sum())
        scores.accumulate(out.grad * g)

    return Tensor(np.where(active, gaps, 0.0).sum(), (scores,), bw)


def group_norm(x: Tensor, gamma: Tensor, beta: Tensor, groups: int, eps: float = 1e-5) -> Tensor:
    """Group normalization over the channel axis of an (N, C) tensor."""
    x, gamma, beta = _lift(x), _lift(gamma), _lift(beta)
    n, c = x.value.shape
    if c % groups != 0:
        raise ShapeError(f"group_norm: {c} channels not divisible into {groups} groups")
    if gamma.value.shape != (c,) or beta.value.shape != (c,):
        raise ShapeError(
            f"group_norm: affine shapes {gamma.value.shape}/{beta.value.shape} must be ({c},)"
        )
    xg = x.value.reshape(n, groups, c // groups)
    mean = xg.mean(axis=2, keepdims=True)
    var = xg.var(axis=2, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xg - mean) * inv
    val = xhat.reshape(n, c) * gamma.value + beta.value

    def bw(out):
        g = out.grad
        gamma.accumulate((g * xhat.reshape(n, c)).sum(axis=0))
        beta.accumulate(g.sum(axis=0))
        dxhat = (g * gamma.value).reshape(n, groups, c // groups)
        m1 = dxhat.mean(axis=2, keepdims=True)
        m2 = (dxhat * xhat).mean(axis=2, keepdims=True)
        dx = (dxhat - m1 - xhat * m2) * inv
        x.accumulate(dx.reshape(n, c))

    return Tensor(val, (x, gamma, beta), bw)


def conv1d(x: Tensor, w: Tensor, b: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """1-D convolution of (N, C_in, T) with kernels (C_out, C_in, K) and bias (C_out,).

    Lowered to one matrix product over gathered patches so the work runs in
    BLAS. ``cols`` holds (N, T_out, C_in * K) patches; both directions reuse it.
    """
    x, w, b = _lift(x), _lift(w), _lift(b)
    if x.value.ndim != 3 or w.value.ndim != 3 or x.value.shape[1] != w.value.shape[1]:
        raise ShapeError(f"conv1d: input {x.value.shape} incompatible with kernel {w.value.shape}")
    n, c_in, t = x.value.shape
    c_out, _, k = w.value.shape
    if b.value.shape != (c_out,):
        raise ShapeError(f"conv1d: bias {b.value.shape} must be ({c_out},)")
    t_out = (t + 2 * padding - k) // stride + 1
    if t_out < 1:
        raise ShapeError(f"conv1d: kernel {k} with padding {padding} does not fit length {t}")
    xp = np.pad(x.value, ((0, 0), (0, 0), (padding, padding)))
    t_idx = np.arange(t_out) * stride
    # (N, C_in, T_out, K) strided view, flattened (one copy) for the matmul
    patches = np.lib.stride_tricks.sliding_window_view(xp, k, axis=2)[:, :, ::stride]
    cols = patches.transpose(0, 2, 1, 3).reshape(n * t_out, c_in * k)
    w2 = w.value.reshape(c_out, c_in * k)
    out2 = cols @ w2.T + b.value
    val = out2.reshape(n, t_out, c_out).transpose(0, 2, 1)

    def bw(out):
        g2 = out.grad.transpose(0, 2, 1).reshape(n * t_out, c_out)
        w.accumulate((g2.T @ cols).reshape(c_out, c_in, k))
        b.accumulate(g2.sum(axis=0))
        dcols = (g2 @ w2).reshape(n, t_out, c_in, k).transpose(0, 2, 1, 3)
        dxp = np.zeros_like(xp)
        for j in range(k):
            dxp[:, :, t_idx + j] += dcols[:, :, :, j]
        x.accumulate(dxp[:, :, padding : padding + t] if padding else dxp)

    return Tensor(val, (x, w, b), bw)


@dataclass
class AdamState:
    """First/second moment accumulators plus the bias-correction step count."""

    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    state: AdamState | None,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> AdamState:
    """One Adam update with bias correction; parameter arrays update in place."""
    if state is None:
        state = AdamState()
    if not state.m:
        state.m = {k: np.zeros_like(p) for k, p in params.items()}
        state.v = {k: np.zeros_like(p) for k, p in params.items()}
    state.step += 1
    t = state.step
    for key, p in params.items():
        g = grads[key]
        state.m[key] = beta1 * state.m[key] + (1.0 - beta1) * g
        state.v[key] = beta2 * state.v[key] + (1.0 - beta2) * g * g
        m_hat = state.m[key] / (1.0 - beta1**t)
        v_hat = state.v[key] / (1.0 - beta2**t)
        p -= lr * m_hat / (np.sqrt(v_hat) + eps)
    return state


def params_to_jsonable(params: dict[str, np.ndarray]) -> list[dict]:
    """Named arrays as a JSON-ready list, ordered by name."""
    return [
        {"name": k, "shape": list(params[k].shape), "data": params[k].ravel().tolist()}
        for k in sorted(params)
    ]


def params_from_jsonable(entries: list[dict]) -> dict[str, np.ndarray]:
    out: dict[str, np.ndarray] = {}
    for e in entries:
        arr = np.array(e["data"], dtype=np.float64).reshape(e["shape"])
        out[e["name"]] = arr
    return out


def save_params(path: str | Path, params: dict[str, np.ndarray]) -> None:
    Path(path).write_text(json.dumps({"params": params_to_jsonable(params)}), encoding="utf-8")


def load_params(path: str | Path) -> dict[str, np.ndarray]:
    return params_from_jsonable(json.loads(Path(path).read_text(encoding="utf-8"))["params"])
