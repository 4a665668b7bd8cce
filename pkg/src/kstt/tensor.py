"""Dense float64 tensors with taped reverse-mode automatic differentiation.

Every learnable quantity in the package is a `Tensor`. Operations record
their inputs and a backward rule; the recorded nodes, ordered by creation,
form the computation tape. `backward(loss)` replays that tape in reverse,
accumulating exact chain-rule gradients into the leaves that require them.

Everything is float64: the sizes involved are small and the tight
finite-difference tolerances used throughout the test suite need the
precision. Tensors are single-owner during a forward/backward pass; there
is no internal locking.
"""

from __future__ import annotations

import itertools
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ShapeMismatch

_seq_counter = itertools.count()
_grad_enabled = True

NORMALIZE_EPS = 1e-12
LAYER_NORM_EPS = 1e-5


@contextmanager
def no_grad():
    """Disable tape recording inside the block (evaluation / inference)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled() -> bool:
    return _grad_enabled


class TapeEntry:
    """One recorded operation: its inputs and the rule mapping the output
    gradient to per-input gradients (None for non-differentiable slots)."""

    __slots__ = ("op", "inputs", "rule")

    def __init__(self, op: str, inputs: tuple["Tensor", ...], rule: Callable):
        self.op = op
        self.inputs = inputs
        self.rule = rule


class Tensor:
    """Dense float64 array with an optional gradient accumulator."""

    __slots__ = ("data", "grad", "requires_grad", "name", "_entry", "_seq")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self._entry: TapeEntry | None = None
        self._seq = next(_seq_counter)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeMismatch(f"item() on non-scalar tensor of shape {self.shape}")
        return float(self.data)

    def zero_grad(self) -> None:
        """Allocate (or reset) the gradient buffer to zeros."""
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        else:
            self.grad.fill(0.0)

    def is_leaf(self) -> bool:
        return self._entry is None

    def __repr__(self) -> str:
        tag = f" '{self.name}'" if self.name else ""
        return f"Tensor{tag}(shape={self.shape}, requires_grad={self.requires_grad})"

    # Operator sugar; the functional forms below do the work.
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def param(data, name: str | None = None) -> Tensor:
    """A leaf tensor that participates in optimization."""
    return Tensor(data, requires_grad=True, name=name)


def constant(data, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=False, name=name)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def _record(out: Tensor, op: str, inputs: tuple[Tensor, ...], rule: Callable) -> Tensor:
    if _grad_enabled and any(t.requires_grad for t in inputs):
        out._entry = TapeEntry(op, inputs, rule)
        out.requires_grad = True
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum `g` down to `shape`, undoing numpy broadcasting."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# arithmetic


def add(a: Tensor, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = Tensor(a.data + b.data)

    def rule(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _record(out, "add", (a, b), rule)


def sub(a: Tensor, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = Tensor(a.data - b.data)

    def rule(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _record(out, "sub", (a, b), rule)


def mul(a: Tensor, b) -> Tensor:
    """Elementwise product; broadcasts scalars and row vectors."""
    a, b = _as_tensor(a), _as_tensor(b)
    out = Tensor(a.data * b.data)

    def rule(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _record(out, "mul", (a, b), rule)


def neg(a: Tensor) -> Tensor:
    out = Tensor(-a.data)
    return _record(out, "neg", (a,), lambda g: (-g,))


def scale(a: Tensor, c: float) -> Tensor:
    """Multiply by a plain float constant."""
    c = float(c)
    out = Tensor(a.data * c)
    return _record(out, "scale", (a,), lambda g: (g * c,))


def add_n(terms: Sequence[Tensor]) -> Tensor:
    """Sum of same-shaped tensors as a single tape node."""
    if not terms:
        raise ValueError("add_n: empty term list")
    acc = terms[0].data.copy()
    for t in terms[1:]:
        if t.shape != terms[0].shape:
            raise ShapeMismatch(f"add_n: shapes {terms[0].shape} vs {t.shape}")
        acc += t.data
    out = Tensor(acc)
    n = len(terms)
    return _record(out, "add_n", tuple(terms), lambda g: (g,) * n)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeMismatch(f"matmul needs rank-2 operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeMismatch(f"matmul: inner dimensions disagree for {a.shape} x {b.shape}")
    out = Tensor(a.data @ b.data)

    def rule(g):
        return g @ b.data.T, a.data.T @ g

    return _record(out, "matmul", (a, b), rule)


def transpose(a: Tensor) -> Tensor:
    if a.ndim != 2:
        raise ShapeMismatch(f"transpose needs a rank-2 tensor, got {a.shape}")
    out = Tensor(a.data.T.copy())
    return _record(out, "transpose", (a,), lambda g: (g.T,))


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    out = Tensor(a.data.reshape(shape))
    return _record(out, "reshape", (a,), lambda g: (g.reshape(a.shape),))


# ---------------------------------------------------------------------------
# reductions and indexing


def total(a: Tensor) -> Tensor:
    """Sum of all elements, as a scalar tensor."""
    out = Tensor(a.data.sum())
    return _record(out, "total", (a,), lambda g: (np.full_like(a.data, float(g)),))


def sum_sq(a: Tensor) -> Tensor:
    """Sum of squared elements, as a scalar tensor."""
    out = Tensor(np.sum(a.data * a.data))
    return _record(out, "sum_sq", (a,), lambda g: (2.0 * float(g) * a.data,))


def gather_rows(a: Tensor, indices) -> Tensor:
    if a.ndim != 2:
        raise ShapeMismatch(f"gather_rows needs a rank-2 tensor, got {a.shape}")
    idx = np.asarray(indices, dtype=np.intp)
    out = Tensor(a.data[idx])

    def rule(g):
        gz = np.zeros_like(a.data)
        np.add.at(gz, idx, g)
        return (gz,)

    return _record(out, "gather_rows", (a,), rule)


def pick(a: Tensor, index: int) -> Tensor:
    """Single element of a rank-1 tensor, as a scalar."""
    if a.ndim != 1:
        raise ShapeMismatch(f"pick needs a rank-1 tensor, got {a.shape}")
    i = int(index)
    if not 0 <= i < a.shape[0]:
        raise ValueError(f"pick: index {i} out of range for length {a.shape[0]}")
    out = Tensor(a.data[i])

    def rule(g):
        gz = np.zeros_like(a.data)
        gz[i] = float(g)
        return (gz,)

    return _record(out, "pick", (a,), rule)


def slice_rows(a: Tensor, start: int, stop: int) -> Tensor:
    if a.ndim != 2:
        raise ShapeMismatch(f"slice_rows needs a rank-2 tensor, got {a.shape}")
    out = Tensor(a.data[start:stop].copy())

    def rule(g):
        gz = np.zeros_like(a.data)
        gz[start:stop] = g
        return (gz,)

    return _record(out, "slice_rows", (a,), rule)


def slice_cols(a: Tensor, start: int, stop: int) -> Tensor:
    if a.ndim != 2:
        raise ShapeMismatch(f"slice_cols needs a rank-2 tensor, got {a.shape}")
    out = Tensor(a.data[:, start:stop].copy())

    def rule(g):
        gz = np.zeros_like(a.data)
        gz[:, start:stop] = g
        return (gz,)

    return _record(out, "slice_cols", (a,), rule)


def stack_rows(rows: Sequence[Tensor]) -> Tensor:
    """Stack rank-1 tensors of equal length into a matrix."""
    if not rows:
        raise ShapeMismatch("stack_rows: empty row list")
    for r in rows:
        if r.ndim != 1 or r.shape != rows[0].shape:
            raise ShapeMismatch("stack_rows: rows must be rank-1 and equally sized")
    out = Tensor(np.stack([r.data for r in rows]))
    n = len(rows)
    return _record(out, "stack_rows", tuple(rows), lambda g: tuple(g[i] for i in range(n)))


def concat_vec(parts: Sequence[Tensor]) -> Tensor:
    """Concatenate rank-1 tensors."""
    if not parts:
        raise ShapeMismatch("concat_vec: empty part list")
    sizes = []
    for p in parts:
        if p.ndim != 1:
            raise ShapeMismatch(f"concat_vec needs rank-1 parts, got {p.shape}")
        sizes.append(p.shape[0])
    out = Tensor(np.concatenate([p.data for p in parts]))
    bounds = np.cumsum([0] + sizes)

    def rule(g):
        return tuple(g[bounds[i]:bounds[i + 1]] for i in range(len(sizes)))

    return _record(out, "concat_vec", tuple(parts), rule)


def concat_cols(parts: Sequence[Tensor]) -> Tensor:
    """Concatenate rank-2 tensors along columns."""
    if not parts:
        raise ShapeMismatch("concat_cols: empty part list")
    widths = []
    for p in parts:
        if p.ndim != 2 or p.shape[0] != parts[0].shape[0]:
            raise ShapeMismatch("concat_cols: parts must be rank-2 with equal row counts")
        widths.append(p.shape[1])
    out = Tensor(np.concatenate([p.data for p in parts], axis=1))
    bounds = np.cumsum([0] + widths)

    def rule(g):
        return tuple(g[:, bounds[i]:bounds[i + 1]] for i in range(len(widths)))

    return _record(out, "concat_cols", tuple(parts), rule)


# ---------------------------------------------------------------------------
# nonlinearities


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a: Tensor) -> Tensor:
    y = _sigmoid(a.data)
    out = Tensor(y)
    return _record(out, "sigmoid", (a,), lambda g: (g * y * (1.0 - y),))


def softplus(a: Tensor) -> Tensor:
    """ln(1 + e^x), computed without overflow."""
    out = Tensor(np.logaddexp(0.0, a.data))
    return _record(out, "softplus", (a,), lambda g: (g * _sigmoid(a.data),))


def log(a: Tensor) -> Tensor:
    out = Tensor(np.log(a.data))
    return _record(out, "log", (a,), lambda g: (g / a.data,))


def exp(a: Tensor) -> Tensor:
    y = np.exp(a.data)
    out = Tensor(y)
    return _record(out, "exp", (a,), lambda g: (g * y,))


def sin(a: Tensor) -> Tensor:
    out = Tensor(np.sin(a.data))
    return _record(out, "sin", (a,), lambda g: (g * np.cos(a.data),))


def cos(a: Tensor) -> Tensor:
    out = Tensor(np.cos(a.data))
    return _record(out, "cos", (a,), lambda g: (-g * np.sin(a.data),))


def sqrt(a: Tensor) -> Tensor:
    y = np.sqrt(a.data)
    out = Tensor(y)
    return _record(out, "sqrt", (a,), lambda g: (g * 0.5 / y,))


def reciprocal(a: Tensor) -> Tensor:
    out = Tensor(1.0 / a.data)
    return _record(out, "reciprocal", (a,), lambda g: (-g / (a.data * a.data),))


def relu(a: Tensor) -> Tensor:
    out = Tensor(np.maximum(a.data, 0.0))
    return _record(out, "relu", (a,), lambda g: (g * (a.data > 0.0),))


def leaky_relu(a: Tensor, slope: float) -> Tensor:
    """x where x >= 0, slope*x elsewhere; slope must lie in (0, 1)."""
    if not 0.0 < slope < 1.0:
        raise ValueError(f"leaky_relu: slope must be in (0, 1), got {slope}")
    factor = np.where(a.data >= 0.0, 1.0, slope)
    out = Tensor(a.data * factor)
    return _record(out, "leaky_relu", (a,), lambda g: (g * factor,))


def clamp_min(a: Tensor, floor: float) -> Tensor:
    out = Tensor(np.maximum(a.data, floor))
    return _record(out, "clamp_min", (a,), lambda g: (g * (a.data > floor),))


def dropout(a: Tensor, p: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout: zero each entry with probability p, scale the rest."""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout: p must be in [0, 1), got {p}")
    if p == 0.0:
        return a
    mask = (rng.random(a.shape) >= p) / (1.0 - p)
    out = Tensor(a.data * mask)
    return _record(out, "dropout", (a,), lambda g: (g * mask,))


def softmax(a: Tensor) -> Tensor:
    """Softmax over the last axis, stabilized by max subtraction."""
    if a.data.size == 0:
        raise ShapeMismatch("softmax: empty input")
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)
    out = Tensor(y)

    def rule(g):
        inner = (g * y).sum(axis=-1, keepdims=True)
        return (y * (g - inner),)

    return _record(out, "softmax", (a,), rule)


def row_l2_normalize(a: Tensor) -> Tensor:
    """Divide each row by max(||row||_2, eps); zero rows stay zero."""
    if a.ndim != 2:
        raise ShapeMismatch(f"row_l2_normalize needs a rank-2 tensor, got {a.shape}")
    norms = np.linalg.norm(a.data, axis=1, keepdims=True)
    denom = np.maximum(norms, NORMALIZE_EPS)
    y = a.data / denom
    out = Tensor(y)

    def rule(g):
        base = g / denom
        inner = (g * a.data).sum(axis=1, keepdims=True)
        correction = a.data * inner / denom**3
        return (base - np.where(norms > NORMALIZE_EPS, correction, 0.0),)

    return _record(out, "row_l2_normalize", (a,), rule)


def layer_norm(a: Tensor, gain: Tensor, bias: Tensor) -> Tensor:
    """Row-wise layer normalization with learned gain and bias."""
    if a.ndim != 2 or gain.ndim != 1 or bias.ndim != 1:
        raise ShapeMismatch(
            f"layer_norm: expected (n,d), (d,), (d,); got {a.shape}, {gain.shape}, {bias.shape}"
        )
    mu = a.data.mean(axis=1, keepdims=True)
    var = a.data.var(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + LAYER_NORM_EPS)
    xhat = (a.data - mu) * inv
    out = Tensor(xhat * gain.data + bias.data)

    def rule(g):
        gg = g * gain.data
        dxhat_mean = gg.mean(axis=1, keepdims=True)
        proj = (gg * xhat).mean(axis=1, keepdims=True)
        dx = (gg - dxhat_mean - xhat * proj) * inv
        return dx, (g * xhat).sum(axis=0), g.sum(axis=0)

    return _record(out, "layer_norm", (a, gain, bias), rule)


# ---------------------------------------------------------------------------
# backward pass


def collect_tape(loss: Tensor) -> list[Tensor]:
    """All recorded nodes the loss depends on, in recording order."""
    nodes: list[Tensor] = []
    seen = {id(loss)}
    stack = [loss]
    while stack:
        t = stack.pop()
        entry = t._entry
        if entry is None:
            continue
        nodes.append(t)
        for p in entry.inputs:
            if id(p) not in seen:
                seen.add(id(p))
                stack.append(p)
    nodes.sort(key=lambda t: t._seq)
    return nodes


def backward(loss: Tensor) -> None:
    """Populate `grad` on every requires_grad leaf reachable from `loss`.

    Calling twice without resetting gradients accumulates.
    """
    if loss.ndim != 0:
        raise ValueError(f"backward requires a scalar loss, got shape {loss.shape}")
    tape = collect_tape(loss)
    flowing: dict[int, np.ndarray] = {id(loss): np.ones((), dtype=np.float64)}
    leaves: dict[int, Tensor] = {}
    if loss._entry is None and loss.requires_grad:
        leaves[id(loss)] = loss
    for node in reversed(tape):
        g = flowing.pop(id(node), None)
        if g is None:
            continue
        entry = node._entry
        for inp, gi in zip(entry.inputs, entry.rule(g)):
            if gi is None or not inp.requires_grad:
                continue
            key = id(inp)
            if key in flowing:
                flowing[key] = flowing[key] + gi
            else:
                flowing[key] = gi
            if inp._entry is None:
                leaves[key] = inp
    for key, leaf in leaves.items():
        g = flowing.get(key)
        if g is None:
            continue
        if leaf.grad is None:
            leaf.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            leaf.grad += g


def parameters_of(tensors: Iterable[Tensor]) -> list[Tensor]:
    return [t for t in tensors if t.requires_grad and t.is_leaf()]
