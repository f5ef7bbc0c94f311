"""Dense float64 tensors with taped reverse-mode differentiation.

Forward arithmetic is plain numpy. While a :class:`Tape` is active (it is a
context manager on a thread-local stack), every operation whose inputs carry
``requires_grad`` appends one backward closure to the tape; ``Tape.backward``
replays the closures in reverse and accumulates ``dLoss/dTensor`` into each
tensor's ``grad`` slot. Outside a tape the same functions run with no
recording overhead, which is how evaluation code stays cheap.

Rank is capped at 3 and broadcasting is limited to scalar-with-tensor; the
few batched shapes this project needs are expressed with explicit stack /
concat operations instead.
"""

from __future__ import annotations

import math
import threading
from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

_MAX_RANK = 3
_tls = threading.local()


class TapeError(RuntimeError):
    """Misuse of the backward machinery (reused tape, non-scalar loss)."""


class NonFiniteError(ValueError):
    """An operation produced NaN/Inf values."""


class Tensor:
    """A float64 array plus an optional same-shape gradient accumulator.

    Values are fixed at construction; only ``grad`` mutates, and only during
    one backward pass. All values must be finite.
    """

    __slots__ = ("values", "grad", "requires_grad")

    def __init__(self, values, requires_grad: bool = False):
        arr = np.asarray(values, dtype=np.float64)
        if arr.ndim > _MAX_RANK:
            raise ValueError(f"rank {arr.ndim} exceeds the supported maximum of {_MAX_RANK}")
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError("tensor values must be finite (no NaN/Inf)")
        self.values = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad

    @property
    def shape(self) -> tuple:
        return self.values.shape

    def item(self) -> float:
        return float(self.values)

    def __repr__(self) -> str:  # pragma: no cover - debugging aid
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


class Tape:
    """Ordered record of executed operations for one reverse pass.

    Operands always precede results (operations append as they execute), so
    replaying the record in reverse is a valid topological backward order.
    A tape can be consumed exactly once.
    """

    __slots__ = ("_nodes", "_consumed")

    def __init__(self):
        self._nodes: list[Callable[[], None]] = []
        self._consumed = False

    def __enter__(self) -> "Tape":
        stack = getattr(_tls, "stack", None)
        if stack is None:
            stack = _tls.stack = []
        stack.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        _tls.stack.pop()
        return False

    def record(self, backward_fn: Callable[[], None]) -> None:
        self._nodes.append(backward_fn)

    def __len__(self) -> int:
        return len(self._nodes)

    def backward(self, loss: Tensor) -> None:
        """Seed ``loss.grad`` with 1 and accumulate gradients into all leaves."""
        if self._consumed:
            raise TapeError("tape already consumed; build a fresh forward pass")
        if loss.values.shape != ():
            raise TapeError(f"backward expects a scalar loss, got shape {loss.values.shape}")
        self._consumed = True
        loss.grad = np.ones((), dtype=np.float64)
        for fn in reversed(self._nodes):
            fn()


def _nodes():
    stack = getattr(_tls, "stack", None)
    if stack:
        return stack[-1]._nodes
    return None


def _acc_new(t: Tensor, g: np.ndarray) -> None:
    # g is freshly allocated by the caller and may be adopted outright.
    if t.grad is None:
        t.grad = g
    else:
        t.grad += g


def _acc_ref(t: Tensor, g: np.ndarray) -> None:
    # g aliases state owned elsewhere (an upstream grad, a view); copy on adopt.
    if t.grad is None:
        t.grad = np.array(g, dtype=np.float64)
    else:
        t.grad += g


def clear_grads(tensors: Iterable[Tensor]) -> None:
    for t in tensors:
        t.grad = None


# ---------------------------------------------------------------------------
# elementwise operations
# ---------------------------------------------------------------------------


def _check_pair(a: Tensor, b: Tensor, op: str) -> None:
    if b.values.shape != a.values.shape and b.values.shape != ():
        raise ValueError(
            f"{op}: shape mismatch {a.values.shape} vs {b.values.shape} "
            "(second operand must match or be scalar)"
        )


def _pair_backward(a: Tensor, b: Tensor, da: Callable, db: Callable) -> None:
    """Shared recording logic for binary elementwise ops.

    ``da``/``db`` map the upstream gradient to fresh per-operand gradients;
    a scalar second operand receives the summed gradient.
    """
    nodes = _nodes()
    if nodes is None:
        return

    scalar_b = b.values.shape == () and a.values.shape != ()

    def _node(out):
        def fn():
            g = out.grad
            if g is None:
                return
            if a.requires_grad:
                _acc_new(a, da(g))
            if b.requires_grad:
                gb = db(g)
                if scalar_b:
                    gb = np.asarray(gb.sum())
                _acc_new(b, gb)

        return fn

    return _node


def add(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        out = Tensor(a.values + float(b), a.requires_grad)
        nodes = _nodes()
        if nodes is not None and a.requires_grad:
            def fn():
                if out.grad is not None:
                    _acc_ref(a, out.grad)
            nodes.append(fn)
        return out
    _check_pair(a, b, "add")
    out = Tensor(a.values + b.values, a.requires_grad or b.requires_grad)
    maker = _pair_backward(a, b, lambda g: g.copy(), lambda g: g.copy())
    if maker is not None and out.requires_grad:
        _nodes().append(maker(out))
    return out


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_pair(a, b, "sub")
    out = Tensor(a.values - b.values, a.requires_grad or b.requires_grad)
    maker = _pair_backward(a, b, lambda g: g.copy(), lambda g: -g)
    if maker is not None and out.requires_grad:
        _nodes().append(maker(out))
    return out


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_pair(a, b, "mul")
    out = Tensor(a.values * b.values, a.requires_grad or b.requires_grad)
    av, bv = a.values, b.values
    maker = _pair_backward(a, b, lambda g: g * bv, lambda g: g * av)
    if maker is not None and out.requires_grad:
        _nodes().append(maker(out))
    return out


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)
    out = Tensor(a.values * s, a.requires_grad)
    nodes = _nodes()
    if nodes is not None and a.requires_grad:
        def fn():
            if out.grad is not None:
                _acc_new(a, out.grad * s)
        nodes.append(fn)
    return out


def relu(a: Tensor) -> Tensor:
    out = Tensor(np.maximum(a.values, 0.0), a.requires_grad)
    nodes = _nodes()
    if nodes is not None and a.requires_grad:
        mask = a.values > 0.0  # subgradient at 0 is 0
        def fn():
            if out.grad is not None:
                _acc_new(a, out.grad * mask)
        nodes.append(fn)
    return out


def sigmoid(a: Tensor) -> Tensor:
    # clamp the exponent so exp never overflows; exact for |x| <= 500
    z = np.clip(a.values, -500.0, 500.0)
    y = 1.0 / (1.0 + np.exp(-z))
    out = Tensor(y, a.requires_grad)
    nodes = _nodes()
    if nodes is not None and a.requires_grad:
        def fn():
            if out.grad is not None:
                _acc_new(a, out.grad * y * (1.0 - y))
        nodes.append(fn)
    return out


def log(a: Tensor) -> Tensor:
    if np.any(a.values <= 0.0):
        raise ValueError("log requires strictly positive inputs")
    out = Tensor(np.log(a.values), a.requires_grad)
    nodes = _nodes()
    if nodes is not None and a.requires_grad:
        av = a.values
        def fn():
            if out.grad is not None:
                _acc_new(a, out.grad / av)
        nodes.append(fn)
    return out


def abs_(a: Tensor) -> Tensor:
    out = Tensor(np.abs(a.values), a.requires_grad)
    nodes = _nodes()
    if nodes is not None and a.requires_grad:
        sign = np.sign(a.values)  # sign(0) = 0: subgradient convention
        def fn():
            if out.grad is not None:
                _acc_new(a, out.grad * sign)
        nodes.append(fn)
    return out


_ELEMENTWISE = {
    "add": (add, 2),
    "sub": (sub, 2),
    "mul": (mul, 2),
    "scale": (scale, 2),
    "relu": (relu, 1),
    "sigmoid": (sigmoid, 1),
    "log": (log, 1),
    "abs": (abs_, 1),
}


def elementwise(kind: str, a: Tensor, b=None) -> Tensor:
    """Dispatch an elementwise operation by name."""
    if kind not in _ELEMENTWISE:
        raise ValueError(f"unknown elementwise kind '{kind}'")
    fn, arity = _ELEMENTWISE[kind]
    if arity == 2:
        if b is None:
            raise ValueError(f"elementwise '{kind}' needs a second operand")
        return fn(a, b)
    if b is not None:
        raise ValueError(f"elementwise '{kind}' is unary")
    return fn(a)


# ---------------------------------------------------------------------------
# matrix / reduction operations
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.values.ndim != 2 or b.values.ndim != 2:
        raise ValueError("matmul expects rank-2 operands")
    if a.values.shape[1] != b.values.shape[0]:
        raise ValueError(f"matmul dimension mismatch: {a.values.shape} x {b.values.shape}")
    out = Tensor(a.values @ b.values, a.requires_grad or b.requires_grad)
    nodes = _nodes()
    if nodes is not None and out.requires_grad:
        av, bv = a.values, b.values
        def fn():
            g = out.grad
            if g is None:
                return
            if a.requires_grad:
                _acc_new(a, g @ bv.T)
            if b.requires_grad:
                _acc_new(b, av.T @ g)
        nodes.append(fn)
    return out


def transpose(a: Tensor) -> Tensor:
    if a.values.ndim != 2:
        raise ValueError("transpose expects a rank-2 operand")
    out = Tensor(a.values.T, a.requires_grad)
    nodes = _nodes()
    if nodes is not None and a.requires_grad:
        def fn():
            if out.grad is not None:
                _acc_ref(a, out.grad.T)
        nodes.append(fn)
    return out


def softmax_rows(a: Tensor, temperature: float = 1.0) -> Tensor:
    """Row-wise softmax of ``a.values / temperature``, stabilized by row-max shift."""
    if temperature <= 0.0:
        raise ValueError("temperature must be positive")
    if a.values.ndim != 2:
        raise ValueError("softmax_rows expects a rank-2 operand")
    z = (a.values - a.values.max(axis=1, keepdims=True)) / temperature
    e = np.exp(z)
    y = e / e.sum(axis=1, keepdims=True)
    out = Tensor(y, a.requires_grad)
    nodes = _nodes()
    if nodes is not None and a.requires_grad:
        def fn():
            g = out.grad
            if g is None:
                return
            _acc_new(a, (g - (g * y).sum(axis=1, keepdims=True)) * y / temperature)
        nodes.append(fn)
    return out


def layer_norm_rows(a: Tensor, gain: Tensor, bias: Tensor, epsilon: float = 1e-5) -> Tensor:
    """Per-row standardization (population variance) followed by an affine map."""
    if epsilon <= 0.0:
        raise ValueError("epsilon must be positive")
    if a.values.ndim != 2:
        raise ValueError("layer_norm_rows expects a rank-2 operand")
    d = a.values.shape[1]
    if gain.values.shape != (d,) or bias.values.shape != (d,):
        raise ValueError(f"gain/bias must have shape ({d},)")
    mu = a.values.mean(axis=1, keepdims=True)
    var = a.values.var(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + epsilon)
    xhat = (a.values - mu) * inv
    out = Tensor(xhat * gain.values + bias.values,
                 a.requires_grad or gain.requires_grad or bias.requires_grad)
    nodes = _nodes()
    if nodes is not None and out.requires_grad:
        gv = gain.values
        def fn():
            g = out.grad
            if g is None:
                return
            if gain.requires_grad:
                _acc_new(gain, (g * xhat).sum(axis=0))
            if bias.requires_grad:
                _acc_new(bias, g.sum(axis=0))
            if a.requires_grad:
                gg = g * gv
                _acc_new(a, (gg
                             - gg.mean(axis=1, keepdims=True)
                             - xhat * (gg * xhat).mean(axis=1, keepdims=True)) * inv)
        nodes.append(fn)
    return out


def mean_pool_rows(a: Tensor) -> Tensor:
    if a.values.ndim != 2:
        raise ValueError("mean_pool_rows expects a rank-2 operand")
    n = a.values.shape[0]
    if n < 1:
        raise ValueError("mean_pool_rows needs at least one row")
    out = Tensor(a.values.mean(axis=0), a.requires_grad)
    nodes = _nodes()
    if nodes is not None and a.requires_grad:
        shape = a.values.shape
        def fn():
            g = out.grad
            if g is None:
                return
            full = np.empty(shape)
            full[:] = g / n
            _acc_new(a, full)
        nodes.append(fn)
    return out


_NORM_FLOOR = 1e-12


def cosine_matrix(x: Tensor, y: Tensor) -> Tensor:
    """Pairwise cosine similarities; row norms are floored at 1e-12."""
    if x.values.ndim != 2 or y.values.ndim != 2:
        raise ValueError("cosine_matrix expects rank-2 operands")
    if x.values.shape[1] != y.values.shape[1]:
        raise ValueError(
            f"cosine_matrix width mismatch: {x.values.shape[1]} vs {y.values.shape[1]}")
    nx = np.maximum(np.linalg.norm(x.values, axis=1), _NORM_FLOOR)
    ny = np.maximum(np.linalg.norm(y.values, axis=1), _NORM_FLOOR)
    xh = x.values / nx[:, None]
    yh = y.values / ny[:, None]
    c = xh @ yh.T
    out = Tensor(c, x.requires_grad or y.requires_grad)
    nodes = _nodes()
    if nodes is not None and out.requires_grad:
        def fn():
            g = out.grad
            if g is None:
                return
            if x.requires_grad:
                _acc_new(x, (g @ yh - xh * (g * c).sum(axis=1, keepdims=True)) / nx[:, None])
            if y.requires_grad:
                _acc_new(y, (g.T @ xh - yh * (g * c).sum(axis=0)[:, None]) / ny[:, None])
        nodes.append(fn)
    return out


def sum_all(a: Tensor) -> Tensor:
    out = Tensor(a.values.sum(), a.requires_grad)
    nodes = _nodes()
    if nodes is not None and a.requires_grad:
        shape = a.values.shape
        def fn():
            g = out.grad
            if g is None:
                return
            _acc_new(a, np.full(shape, float(g)))
        nodes.append(fn)
    return out


# ---------------------------------------------------------------------------
# structural / fused operations
# ---------------------------------------------------------------------------


def affine(x: Tensor, w: Tensor, b: Tensor, activation: Optional[str] = None) -> Tensor:
    """Row-wise ``x @ w + b`` with an optionally fused relu."""
    if activation not in (None, "relu"):
        raise ValueError(f"unsupported activation '{activation}'")
    if x.values.ndim != 2 or w.values.ndim != 2:
        raise ValueError("affine expects rank-2 x and w")
    if x.values.shape[1] != w.values.shape[0] or b.values.shape != (w.values.shape[1],):
        raise ValueError(
            f"affine shape mismatch: x{x.values.shape} w{w.values.shape} b{b.values.shape}")
    z = x.values @ w.values + b.values
    vals = np.maximum(z, 0.0) if activation == "relu" else z
    out = Tensor(vals, x.requires_grad or w.requires_grad or b.requires_grad)
    nodes = _nodes()
    if nodes is not None and out.requires_grad:
        xv, wv = x.values, w.values
        relu_mask = (z > 0.0) if activation == "relu" else None
        def fn():
            g = out.grad
            if g is None:
                return
            geff = g * relu_mask if relu_mask is not None else g
            if x.requires_grad:
                _acc_new(x, geff @ wv.T)
            if w.requires_grad:
                _acc_new(w, xv.T @ geff)
            if b.requires_grad:
                _acc_new(b, geff.sum(axis=0))
        nodes.append(fn)
    return out


def affine_vec(v: Tensor, w: Tensor, b: Tensor, activation: Optional[str] = None) -> Tensor:
    """``v @ w + b`` for a rank-1 input vector."""
    if activation not in (None, "relu"):
        raise ValueError(f"unsupported activation '{activation}'")
    if v.values.ndim != 1 or w.values.ndim != 2:
        raise ValueError("affine_vec expects rank-1 v and rank-2 w")
    if v.values.shape[0] != w.values.shape[0] or b.values.shape != (w.values.shape[1],):
        raise ValueError(
            f"affine_vec shape mismatch: v{v.values.shape} w{w.values.shape} b{b.values.shape}")
    z = v.values @ w.values + b.values
    vals = np.maximum(z, 0.0) if activation == "relu" else z
    out = Tensor(vals, v.requires_grad or w.requires_grad or b.requires_grad)
    nodes = _nodes()
    if nodes is not None and out.requires_grad:
        vv, wv = v.values, w.values
        relu_mask = (z > 0.0) if activation == "relu" else None
        def fn():
            g = out.grad
            if g is None:
                return
            geff = g * relu_mask if relu_mask is not None else g
            if v.requires_grad:
                _acc_new(v, geff @ wv.T)
            if w.requires_grad:
                _acc_new(w, np.outer(vv, geff))
            if b.requires_grad:
                _acc_ref(b, geff)
        nodes.append(fn)
    return out


def embed_rows(table: Tensor, ids: Sequence[int]) -> Tensor:
    """Gather rows of ``table``; the backward pass scatter-adds into the table."""
    if table.values.ndim != 2:
        raise ValueError("embed_rows expects a rank-2 table")
    idx = np.asarray(ids, dtype=np.intp)
    if idx.ndim != 1 or idx.size < 1:
        raise ValueError("embed_rows expects a nonempty 1-d id list")
    n = table.values.shape[0]
    if idx.min() < 0 or idx.max() >= n:
        raise ValueError(f"id out of range [0, {n}): {int(idx.min())}..{int(idx.max())}")
    out = Tensor(table.values[idx], table.requires_grad)
    nodes = _nodes()
    if nodes is not None and table.requires_grad:
        def fn():
            g = out.grad
            if g is None:
                return
            if table.grad is None:
                table.grad = np.zeros_like(table.values)
            np.add.at(table.grad, idx, g)
        nodes.append(fn)
    return out


def pick(a: Tensor, rows: Sequence[int], cols: Sequence[int]) -> Tensor:
    """Gather entries ``a[rows[i], cols[i]]`` into a rank-1 tensor."""
    if a.values.ndim != 2:
        raise ValueError("pick expects a rank-2 operand")
    r = np.asarray(rows, dtype=np.intp)
    c = np.asarray(cols, dtype=np.intp)
    if r.shape != c.shape or r.ndim != 1:
        raise ValueError("pick expects matching 1-d row/col index lists")
    out = Tensor(a.values[r, c], a.requires_grad)
    nodes = _nodes()
    if nodes is not None and a.requires_grad:
        def fn():
            g = out.grad
            if g is None:
                return
            if a.grad is None:
                a.grad = np.zeros_like(a.values)
            np.add.at(a.grad, (r, c), g)
        nodes.append(fn)
    return out


def stack_rows(parts: Sequence[Tensor]) -> Tensor:
    """Stack rank-1 tensors of equal length into a matrix."""
    if not parts:
        raise ValueError("stack_rows needs at least one tensor")
    for p in parts:
        if p.values.ndim != 1:
            raise ValueError("stack_rows expects rank-1 parts")
    out = Tensor(np.stack([p.values for p in parts]),
                 any(p.requires_grad for p in parts))
    nodes = _nodes()
    if nodes is not None and out.requires_grad:
        parts = list(parts)
        def fn():
            g = out.grad
            if g is None:
                return
            for i, p in enumerate(parts):
                if p.requires_grad:
                    _acc_ref(p, g[i])
        nodes.append(fn)
    return out


def concat_cols(parts: Sequence[Tensor]) -> Tensor:
    """Concatenate rank-2 tensors with equal row counts along columns."""
    if not parts:
        raise ValueError("concat_cols needs at least one tensor")
    rows = parts[0].values.shape[0]
    for p in parts:
        if p.values.ndim != 2 or p.values.shape[0] != rows:
            raise ValueError("concat_cols expects rank-2 parts with equal row counts")
    out = Tensor(np.concatenate([p.values for p in parts], axis=1),
                 any(p.requires_grad for p in parts))
    nodes = _nodes()
    if nodes is not None and out.requires_grad:
        widths = [p.values.shape[1] for p in parts]
        parts = list(parts)
        def fn():
            g = out.grad
            if g is None:
                return
            o = 0
            for p, w in zip(parts, widths):
                if p.requires_grad:
                    _acc_ref(p, g[:, o:o + w])
                o += w
        nodes.append(fn)
    return out


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    out = Tensor(a.values.reshape(shape), a.requires_grad)
    nodes = _nodes()
    if nodes is not None and a.requires_grad:
        orig = a.values.shape
        def fn():
            if out.grad is not None:
                _acc_ref(a, out.grad.reshape(orig))
        nodes.append(fn)
    return out


def clip(a: Tensor, lo: Optional[float] = None, hi: Optional[float] = None) -> Tensor:
    """Clamp values into [lo, hi]; clamped entries get zero gradient."""
    if lo is None and hi is None:
        raise ValueError("clip needs at least one bound")
    out = Tensor(np.clip(a.values, lo, hi), a.requires_grad)
    nodes = _nodes()
    if nodes is not None and a.requires_grad:
        mask = np.ones_like(a.values, dtype=bool)
        if lo is not None:
            mask &= a.values >= lo
        if hi is not None:
            mask &= a.values <= hi
        def fn():
            if out.grad is not None:
                _acc_new(a, out.grad * mask)
        nodes.append(fn)
    return out


def unit_vec(v: Tensor) -> Tensor:
    """Scale a rank-1 tensor to unit L2 norm (norm floored at 1e-12)."""
    if v.values.ndim != 1:
        raise ValueError("unit_vec expects a rank-1 operand")
    n = max(float(np.linalg.norm(v.values)), _NORM_FLOOR)
    u = v.values / n
    out = Tensor(u, v.requires_grad)
    nodes = _nodes()
    if nodes is not None and v.requires_grad:
        def fn():
            g = out.grad
            if g is None:
                return
            _acc_new(v, (g - u * float(u @ g)) / n)
        nodes.append(fn)
    return out


def grad_reverse(a: Tensor, gain: float = 1.0) -> Tensor:
    """Identity forward; backward multiplies the incoming gradient by -gain."""
    out = Tensor(a.values, a.requires_grad)
    nodes = _nodes()
    if nodes is not None and a.requires_grad:
        def fn():
            if out.grad is not None:
                _acc_new(a, out.grad * (-gain))
        nodes.append(fn)
    return out


def detach(a: Tensor) -> Tensor:
    """Cut the graph: same values, no gradient path."""
    return Tensor(a.values, requires_grad=False)


# ---------------------------------------------------------------------------
# finite-difference gradient checking
# ---------------------------------------------------------------------------


@dataclass
class GradCheckEntry:
    label: str
    max_rel_error: float
    worst_coord: int
    analytic: float
    numeric: float


@dataclass
class GradCheckReport:
    tolerance: float
    entries: list[GradCheckEntry] = field(default_factory=list)

    @property
    def max_rel_error(self) -> float:
        return max((e.max_rel_error for e in self.entries), default=0.0)

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tolerance

    def summary(self) -> str:
        lines = [
            f"{e.label}: max_rel={e.max_rel_error:.3e} at coord {e.worst_coord} "
            f"(analytic={e.analytic:.6e}, numeric={e.numeric:.6e})"
            for e in self.entries
        ]
        lines.append(f"overall max_rel={self.max_rel_error:.3e} tolerance={self.tolerance:.1e} "
                     f"{'OK' if self.passed else 'FAIL'}")
        return "\n".join(lines)


def check_gradients(
    function: Callable[[list[Tensor]], Tensor],
    inputs: Sequence[Tensor],
    step: float = 1e-5,
    tolerance: float = 1e-4,
    labels: Optional[Sequence[str]] = None,
    max_coords: Optional[int] = None,
    seed: int = 0,
) -> GradCheckReport:
    """Compare taped gradients of ``function(inputs)`` against central differences.

    Every input is perturbed coordinate-by-coordinate (or a seeded subsample of
    ``max_coords`` coordinates for large tensors); the relative error uses a
    ``max(1, |analytic|, |numeric|)`` denominator. Inputs are restored exactly.

    Programs with subgradient kinks (relu, hinges, hardest-negative switches)
    can put a kink inside the central-difference bracket; coordinates over
    tolerance are re-measured with shrinking steps, which resolves bracket
    artifacts but leaves genuine gradient errors in place (those are
    step-size independent).
    """
    inputs = list(inputs)
    names = list(labels) if labels is not None else [f"input[{i}]" for i in range(len(inputs))]
    if len(names) != len(inputs):
        raise ValueError("labels must match inputs")
    for t in inputs:
        t.requires_grad = True
        t.grad = None

    with Tape() as tape:
        loss = function(inputs)
        tape.backward(loss)
    analytic = [np.zeros_like(t.values) if t.grad is None else t.grad.copy() for t in inputs]
    for t in inputs:
        t.grad = None

    rng = np.random.default_rng(seed)
    report = GradCheckReport(tolerance=tolerance)
    for t, name, ana in zip(inputs, names, analytic):
        flat = t.values.reshape(-1)
        size = flat.size
        if max_coords is not None and size > max_coords:
            coords = np.sort(rng.choice(size, size=max_coords, replace=False))
        else:
            coords = range(size)
        worst = GradCheckEntry(name, 0.0, -1, 0.0, 0.0)

        def numeric_at(c, h):
            orig = flat[c]
            flat[c] = orig + h
            f_plus = float(function(inputs).values)
            flat[c] = orig - h
            f_minus = float(function(inputs).values)
            flat[c] = orig
            return (f_plus - f_minus) / (2.0 * h)

        for c in coords:
            a = float(ana.reshape(-1)[c])
            numeric = numeric_at(c, step)
            rel = abs(numeric - a) / max(1.0, abs(a), abs(numeric))
            h = step
            while rel > tolerance and h > step / 1000.0:
                h /= 8.0
                numeric2 = numeric_at(c, h)
                rel2 = abs(numeric2 - a) / max(1.0, abs(a), abs(numeric2))
                if rel2 < rel:
                    rel, numeric = rel2, numeric2
            if rel > worst.max_rel_error:
                worst = GradCheckEntry(name, rel, int(c), a, numeric)
        report.entries.append(worst)
    return report
