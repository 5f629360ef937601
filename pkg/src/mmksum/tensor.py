"""Dense f64 tensors with a reverse-mode autodiff tape.

Ops execute eagerly on numpy arrays. When a Graph is active (``with Graph()``)
and an input requires grad, the op appends a record to the tape; records are
appended in execution order, which is a valid topological order, so backward
is a single reverse sweep. Without an active graph, ops are pure numpy with
no bookkeeping (inference mode).

Broadcasting is deliberately restricted: the only shape mismatch any op
accepts is a 1-D bias added over the last axis. Everything else must match
exactly, which keeps every gradient rule below auditable by eye.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .errors import (
    ConfigError,
    ContractError,
    DimensionError,
    NumericError,
    ReproducibilityError,
    StepUnderflowError,
)

_FINITE_CHECKS = True


def set_finite_checks(enabled: bool) -> bool:
    """Toggle post-op NaN/Inf scanning (debug profile on, release off).

    Returns the previous setting so callers can restore it.
    """
    global _FINITE_CHECKS
    previous = _FINITE_CHECKS
    _FINITE_CHECKS = bool(enabled)
    return previous


def finite_checks_enabled() -> bool:
    return _FINITE_CHECKS


class Tensor:
    """A shaped view over a row-major float64 numpy array."""

    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data, dtype=np.float64)
        if _FINITE_CHECKS and arr.size and not np.all(np.isfinite(arr)):
            raise NumericError(f"tensor {name or '<anon>'} initialized with non-finite values")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() on tensor of shape {self.data.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self):
        head = self.name or "tensor"
        return f"Tensor({head}, shape={tuple(self.data.shape)}, requires_grad={self.requires_grad})"

    # operator sugar; all routing through the module-level ops
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return scale(self, -1.0)


class _Node:
    __slots__ = ("op", "out", "bwd")

    def __init__(self, op: str, out: Tensor, bwd: Callable[[np.ndarray], None]):
        self.op = op
        self.out = out
        self.bwd = bwd


class _GraphStack(threading.local):
    def __init__(self):
        self.stack: list["Graph"] = []


_GRAPHS = _GraphStack()


class Graph:
    """Tape of op records; usable as a context manager.

    One graph may run backward exactly once: a second call raises, which
    guards against silent gradient double-accumulation.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self._leaves: list[Tensor] = []
        self._leaf_ids: set[int] = set()
        self._produced: set[int] = set()
        self._consumed = False

    def __enter__(self) -> "Graph":
        _GRAPHS.stack.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _GRAPHS.stack.pop()
        assert popped is self
        return False

    def watch(self, t: Tensor) -> None:
        """Register a leaf so backward guarantees it a (possibly zero) grad."""
        if not t.requires_grad:
            raise ContractError("watch() on a tensor without requires_grad")
        if id(t) not in self._leaf_ids:
            self._leaf_ids.add(id(t))
            self._leaves.append(t)

    def watch_all(self, tensors: Iterable[Tensor]) -> None:
        for t in tensors:
            self.watch(t)

    def _record(self, op: str, out: Tensor, inputs: Sequence[Tensor],
                bwd: Callable[[np.ndarray], None]) -> None:
        for t in inputs:
            if t.requires_grad and id(t) not in self._produced:
                self.watch(t)
        self._produced.add(id(out))
        self.nodes.append(_Node(op, out, bwd))

    def backward(self, loss: Tensor) -> dict[int, np.ndarray]:
        """Reverse sweep from a scalar loss.

        Accumulates .grad on every watched leaf (zeros when disconnected from
        the loss) and returns a map id(leaf) -> grad array.
        """
        if self._consumed:
            raise ContractError("backward already ran on this graph; build a new graph per step")
        if loss.data.size != 1:
            raise ContractError(f"backward requires a scalar loss, got shape {loss.data.shape}")
        self._consumed = True
        loss.grad = np.ones_like(loss.data)
        for node in reversed(self.nodes):
            g = node.out.grad
            if g is None:
                continue
            node.bwd(g)
            if id(node.out) not in self._leaf_ids:
                node.out.grad = None  # free intermediate buffers as we pass them
        out = {}
        for leaf in self._leaves:
            if leaf.grad is None:
                leaf.grad = np.zeros_like(leaf.data)
            out[id(leaf)] = leaf.grad
        return out


def backward(graph: Graph, loss: Tensor) -> dict[int, np.ndarray]:
    return graph.backward(loss)


def _active() -> Graph | None:
    stack = _GRAPHS.stack
    return stack[-1] if stack else None


def _accum(t: Tensor, g: np.ndarray) -> None:
    if t.grad is None:
        t.grad = np.array(g, dtype=np.float64, copy=True)
    else:
        t.grad += g


def _make(op: str, data: np.ndarray, inputs: Sequence[Tensor],
          bwd_builder: Callable[[Tensor], Callable[[np.ndarray], None]]) -> Tensor:
    if _FINITE_CHECKS and data.size and not np.all(np.isfinite(data)):
        raise NumericError(f"non-finite values produced by op {op!r}")
    graph = _active()
    needs_grad = graph is not None and any(t.requires_grad for t in inputs)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.requires_grad = needs_grad
    out.grad = None
    out.name = None
    if needs_grad:
        graph._record(op, out, inputs, bwd_builder(out))
    return out


def _require_tensor(x, op: str) -> Tensor:
    if not isinstance(x, Tensor):
        raise ContractError(f"op {op!r} expects Tensor operands, got {type(x).__name__}")
    return x


# ---------------------------------------------------------------------------
# elementwise / shape ops
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    """a + b. Shapes must match exactly, or b may be a 1-D bias over a's last axis."""
    a = _require_tensor(a, "add")
    b = _require_tensor(b, "add")
    bias_add = b.data.ndim == 1 and a.data.ndim > 1 and a.data.shape[-1] == b.data.shape[0]
    if not bias_add and a.data.shape != b.data.shape:
        raise DimensionError(f"add: shapes {a.data.shape} and {b.data.shape} do not match")

    def bwd_builder(out):
        def bwd(g):
            if a.requires_grad:
                _accum(a, g)
            if b.requires_grad:
                if bias_add:
                    _accum(b, g.reshape(-1, b.data.shape[0]).sum(axis=0))
                else:
                    _accum(b, g)
        return bwd

    return _make("add", a.data + b.data, (a, b), bwd_builder)


def sub(a: Tensor, b: Tensor) -> Tensor:
    a = _require_tensor(a, "sub")
    b = _require_tensor(b, "sub")
    if a.data.shape != b.data.shape:
        raise DimensionError(f"sub: shapes {a.data.shape} and {b.data.shape} do not match")

    def bwd_builder(out):
        def bwd(g):
            if a.requires_grad:
                _accum(a, g)
            if b.requires_grad:
                _accum(b, -g)
        return bwd

    return _make("sub", a.data - b.data, (a, b), bwd_builder)


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product; exact shape match only."""
    a = _require_tensor(a, "mul")
    b = _require_tensor(b, "mul")
    if a.data.shape != b.data.shape:
        raise DimensionError(f"mul: shapes {a.data.shape} and {b.data.shape} do not match")

    def bwd_builder(out):
        def bwd(g):
            if a.requires_grad:
                _accum(a, g * b.data)
            if b.requires_grad:
                _accum(b, g * a.data)
        return bwd

    return _make("mul", a.data * b.data, (a, b), bwd_builder)


def scale(a: Tensor, k: float) -> Tensor:
    a = _require_tensor(a, "scale")
    k = float(k)

    def bwd_builder(out):
        def bwd(g):
            if a.requires_grad:
                _accum(a, g * k)
        return bwd

    return _make("scale", a.data * k, (a,), bwd_builder)


def affine(a: Tensor, k: float, c: float) -> Tensor:
    """k*a + c with scalar constants (used e.g. for 1 - gate)."""
    a = _require_tensor(a, "affine")
    k = float(k)

    def bwd_builder(out):
        def bwd(g):
            if a.requires_grad:
                _accum(a, g * k)
        return bwd

    return _make("affine", a.data * k + float(c), (a,), bwd_builder)


def relu(a: Tensor) -> Tensor:
    a = _require_tensor(a, "relu")
    out_data = np.maximum(a.data, 0.0)

    def bwd_builder(out):
        mask = a.data > 0.0

        def bwd(g):
            if a.requires_grad:
                _accum(a, g * mask)
        return bwd

    return _make("relu", out_data, (a,), bwd_builder)


def sigmoid(a: Tensor) -> Tensor:
    a = _require_tensor(a, "sigmoid")
    # stable two-branch form, exact at both tails
    s = np.where(a.data >= 0,
                 1.0 / (1.0 + np.exp(-np.clip(a.data, 0, None))),
                 np.exp(np.clip(a.data, None, 0)) / (1.0 + np.exp(np.clip(a.data, None, 0))))

    def bwd_builder(out):
        def bwd(g):
            if a.requires_grad:
                _accum(a, g * out.data * (1.0 - out.data))
        return bwd

    return _make("sigmoid", s, (a,), bwd_builder)


# ---------------------------------------------------------------------------
# matrix ops
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """2-D matrix product a[m,k] @ b[k,n]."""
    a = _require_tensor(a, "matmul")
    b = _require_tensor(b, "matmul")
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise DimensionError(f"matmul: rank-2 tensors required, got {a.data.shape} and {b.data.shape}")
    if a.data.shape[1] != b.data.shape[0]:
        raise DimensionError(f"matmul: inner dimensions differ for {a.data.shape} and {b.data.shape}")

    def bwd_builder(out):
        def bwd(g):
            if a.requires_grad:
                _accum(a, g @ b.data.T)
            if b.requires_grad:
                _accum(b, a.data.T @ g)
        return bwd

    return _make("matmul", a.data @ b.data, (a, b), bwd_builder)


def vec_matmul(v: Tensor, w: Tensor) -> Tensor:
    """1-D row vector times matrix: v[k] @ w[k,n] -> [n]."""
    v = _require_tensor(v, "vec_matmul")
    w = _require_tensor(w, "vec_matmul")
    if v.data.ndim != 1 or w.data.ndim != 2 or v.data.shape[0] != w.data.shape[0]:
        raise DimensionError(f"vec_matmul: shapes {v.data.shape} and {w.data.shape} incompatible")

    def bwd_builder(out):
        def bwd(g):
            if v.requires_grad:
                _accum(v, w.data @ g)
            if w.requires_grad:
                _accum(w, np.outer(v.data, g))
        return bwd

    return _make("vec_matmul", v.data @ w.data, (v, w), bwd_builder)


def matmul_nt(a: Tensor, b: Tensor) -> Tensor:
    """a[m,k] @ b[n,k].T without materializing a transpose node."""
    a = _require_tensor(a, "matmul_nt")
    b = _require_tensor(b, "matmul_nt")
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise DimensionError(f"matmul_nt: rank-2 tensors required, got {a.data.shape} and {b.data.shape}")
    if a.data.shape[1] != b.data.shape[1]:
        raise DimensionError(f"matmul_nt: trailing dimensions differ for {a.data.shape} and {b.data.shape}")

    def bwd_builder(out):
        def bwd(g):
            if a.requires_grad:
                _accum(a, g @ b.data)
            if b.requires_grad:
                _accum(b, g.T @ a.data)
        return bwd

    return _make("matmul_nt", a.data @ b.data.T, (a, b), bwd_builder)


# ---------------------------------------------------------------------------
# normalization / probability ops
# ---------------------------------------------------------------------------

def softmax(a: Tensor, axis: int = -1) -> Tensor:
    """Max-subtracted softmax along one axis."""
    a = _require_tensor(a, "softmax")
    if a.data.ndim == 0 or a.data.shape[axis] == 0:
        raise DimensionError(f"softmax: empty axis {axis} for shape {a.data.shape}")
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=axis, keepdims=True)

    def bwd_builder(out):
        def bwd(g):
            if a.requires_grad:
                sm = out.data
                inner = (g * sm).sum(axis=axis, keepdims=True)
                _accum(a, sm * (g - inner))
        return bwd

    return _make("softmax", s, (a,), bwd_builder)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to mean 0 / variance 1, then scale and shift."""
    x = _require_tensor(x, "layer_norm")
    gain = _require_tensor(gain, "layer_norm")
    bias = _require_tensor(bias, "layer_norm")
    d = x.data.shape[-1] if x.data.ndim else 0
    if d < 2 and eps == 0.0:
        raise NumericError(f"layer_norm: degenerate variance (last axis {d} with eps=0)")
    if gain.data.shape != (d,) or bias.data.shape != (d,):
        raise DimensionError(
            f"layer_norm: gain/bias must have shape ({d},), got {gain.data.shape} and {bias.data.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out_data = xhat * gain.data + bias.data

    def bwd_builder(out):
        def bwd(g):
            if gain.requires_grad:
                _accum(gain, (g * xhat).reshape(-1, d).sum(axis=0))
            if bias.requires_grad:
                _accum(bias, g.reshape(-1, d).sum(axis=0))
            if x.requires_grad:
                dxhat = g * gain.data
                term = dxhat - dxhat.mean(axis=-1, keepdims=True) \
                    - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
                _accum(x, term * inv)
        return bwd

    return _make("layer_norm", out_data, (x, gain, bias), bwd_builder)


# ---------------------------------------------------------------------------
# lookup / layout ops
# ---------------------------------------------------------------------------

def embedding(table: Tensor, ids) -> Tensor:
    """Gather rows table[ids]; backward scatter-adds into the table."""
    table = _require_tensor(table, "embedding")
    idx = np.asarray(ids, dtype=np.intp)
    if table.data.ndim != 2:
        raise DimensionError(f"embedding: table must be rank-2, got {table.data.shape}")
    if idx.ndim != 1:
        raise DimensionError(f"embedding: ids must be rank-1, got shape {idx.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= table.data.shape[0]):
        raise DimensionError(
            f"embedding: id out of range [0,{table.data.shape[0]}) in lookup")

    def bwd_builder(out):
        def bwd(g):
            if table.requires_grad:
                if table.grad is None:
                    table.grad = np.zeros_like(table.data)
                np.add.at(table.grad, idx, g)
        return bwd

    return _make("embedding", table.data[idx], (table,), bwd_builder)


def concat_last(parts: Sequence[Tensor]) -> Tensor:
    """Concatenate along the last axis."""
    parts = [_require_tensor(p, "concat_last") for p in parts]
    if not parts:
        raise DimensionError("concat_last: no parts")
    lead = parts[0].data.shape[:-1]
    for p in parts:
        if p.data.shape[:-1] != lead:
            raise DimensionError(
                f"concat_last: leading shapes differ ({parts[0].data.shape} vs {p.data.shape})")
    widths = [p.data.shape[-1] for p in parts]
    offsets = np.cumsum([0] + widths)

    def bwd_builder(out):
        def bwd(g):
            for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
                if p.requires_grad:
                    _accum(p, g[..., lo:hi])
        return bwd

    return _make("concat_last", np.concatenate([p.data for p in parts], axis=-1),
                 tuple(parts), bwd_builder)


def slice_last(a: Tensor, start: int, stop: int) -> Tensor:
    """a[..., start:stop] as a copy; backward scatters into the source range."""
    a = _require_tensor(a, "slice_last")
    d = a.data.shape[-1]
    if not (0 <= start < stop <= d):
        raise DimensionError(f"slice_last: range [{start},{stop}) invalid for last axis {d}")

    def bwd_builder(out):
        def bwd(g):
            if a.requires_grad:
                if a.grad is None:
                    a.grad = np.zeros_like(a.data)
                a.grad[..., start:stop] += g
        return bwd

    return _make("slice_last", a.data[..., start:stop].copy(), (a,), bwd_builder)


def rows_broadcast(v: Tensor, n: int) -> Tensor:
    """Tile a 1-D vector into n identical rows; backward sums over rows."""
    v = _require_tensor(v, "rows_broadcast")
    if v.data.ndim != 1:
        raise DimensionError(f"rows_broadcast: rank-1 tensor required, got {v.data.shape}")
    if n < 1:
        raise DimensionError(f"rows_broadcast: n must be >= 1, got {n}")

    def bwd_builder(out):
        def bwd(g):
            if v.requires_grad:
                _accum(v, g.sum(axis=0))
        return bwd

    return _make("rows_broadcast", np.tile(v.data, (n, 1)), (v,), bwd_builder)


def masked_fill(a: Tensor, mask: np.ndarray, value: float) -> Tensor:
    """Replace entries where mask is True by a constant; grad is zero there."""
    a = _require_tensor(a, "masked_fill")
    m = np.asarray(mask, dtype=bool)
    if m.shape != a.data.shape:
        raise DimensionError(f"masked_fill: mask shape {m.shape} != tensor shape {a.data.shape}")

    def bwd_builder(out):
        def bwd(g):
            if a.requires_grad:
                _accum(a, np.where(m, 0.0, g))
        return bwd

    return _make("masked_fill", np.where(m, float(value), a.data), (a,), bwd_builder)


# ---------------------------------------------------------------------------
# reductions / losses
# ---------------------------------------------------------------------------

def sum_all(a: Tensor) -> Tensor:
    a = _require_tensor(a, "sum_all")

    def bwd_builder(out):
        def bwd(g):
            if a.requires_grad:
                _accum(a, np.full_like(a.data, float(g)))
        return bwd

    return _make("sum_all", np.asarray(a.data.sum()), (a,), bwd_builder)


def mean_all(a: Tensor) -> Tensor:
    a = _require_tensor(a, "mean_all")
    n = a.data.size
    if n == 0:
        raise DimensionError("mean_all: empty tensor")

    def bwd_builder(out):
        def bwd(g):
            if a.requires_grad:
                _accum(a, np.full_like(a.data, float(g) / n))
        return bwd

    return _make("mean_all", np.asarray(a.data.mean()), (a,), bwd_builder)


def mean_rows(a: Tensor) -> Tensor:
    """Mean over axis 0 of a 2-D tensor -> 1-D vector."""
    a = _require_tensor(a, "mean_rows")
    if a.data.ndim != 2 or a.data.shape[0] == 0:
        raise DimensionError(f"mean_rows: non-empty rank-2 tensor required, got {a.data.shape}")
    n = a.data.shape[0]

    def bwd_builder(out):
        def bwd(g):
            if a.requires_grad:
                _accum(a, np.tile(g / n, (n, 1)))
        return bwd

    return _make("mean_rows", a.data.mean(axis=0), (a,), bwd_builder)


def cross_entropy(logits: Tensor, targets, ignore_id: int | None = None) -> Tensor:
    """Mean token-level cross entropy with an optional ignored label id.

    logits [n, v], targets int [n]. Rows whose target equals ignore_id carry
    no loss and no gradient.
    """
    logits = _require_tensor(logits, "cross_entropy")
    tgt = np.asarray(targets, dtype=np.intp)
    if logits.data.ndim != 2:
        raise DimensionError(f"cross_entropy: logits must be rank-2, got {logits.data.shape}")
    if tgt.ndim != 1 or tgt.shape[0] != logits.data.shape[0]:
        raise DimensionError(
            f"cross_entropy: targets shape {tgt.shape} incompatible with logits {logits.data.shape}")
    keep = np.ones_like(tgt, dtype=bool) if ignore_id is None else tgt != ignore_id
    n_kept = int(keep.sum())
    if n_kept == 0:
        raise ContractError("cross_entropy: every target position is ignored")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logsumexp = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logprobs = z - logsumexp
    picked = logprobs[np.arange(tgt.shape[0]), np.where(keep, tgt, 0)]
    loss = -(picked * keep).sum() / n_kept

    def bwd_builder(out):
        def bwd(g):
            if logits.requires_grad:
                grad = np.exp(logprobs)
                grad[np.arange(tgt.shape[0]), np.where(keep, tgt, 0)] -= 1.0
                grad *= (keep[:, None] * (float(g) / n_kept))
                _accum(logits, grad)
        return bwd

    return _make("cross_entropy", np.asarray(loss), (logits,), bwd_builder)


def dropout(a: Tensor, rate: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout; call sites skip it entirely when not training."""
    a = _require_tensor(a, "dropout")
    if not 0.0 <= rate < 1.0:
        raise ConfigError(f"dropout rate must be in [0,1), got {rate}")
    if rate == 0.0:
        return a
    keep = (rng.random(a.data.shape) >= rate)
    factor = keep / (1.0 - rate)

    def bwd_builder(out):
        def bwd(g):
            if a.requires_grad:
                _accum(a, g * factor)
        return bwd

    return _make("dropout", a.data * factor, (a,), bwd_builder)


# ---------------------------------------------------------------------------
# finite-difference verification harness
# ---------------------------------------------------------------------------

@dataclass
class BlockCheck:
    name: str
    size: int
    coords_checked: int
    max_rel_err: float


@dataclass
class CheckReport:
    """Per-block central-difference comparison against analytic gradients.

    Block relative error is max|fd - analytic| normalized by the larger of
    the block's max |fd|, max |analytic|, and the central-difference noise
    floor ~ 4|f| eps_machine / (eps * tol). Blocks whose true gradients sit
    below that floor (the loss barely depends on them) are therefore judged
    against the floor, so rounding noise cannot fail them, while any error
    above the noise level still registers.
    """

    eps: float
    tol: float
    noise_floor: float = 0.0
    blocks: list[BlockCheck] = field(default_factory=list)

    @property
    def max_rel_err(self) -> float:
        return max((b.max_rel_err for b in self.blocks), default=0.0)

    @property
    def passed(self) -> bool:
        return self.max_rel_err < self.tol

    def summary(self) -> str:
        lines = [f"finite-difference check: eps={self.eps:g} tol={self.tol:g}"]
        for b in sorted(self.blocks, key=lambda b: -b.max_rel_err):
            lines.append(
                f"  {'PASS' if b.max_rel_err < self.tol else 'FAIL'}  "
                f"{b.name:<28s} rel_err={b.max_rel_err:.3e}  "
                f"({b.coords_checked}/{b.size} coords)")
        lines.append(f"overall: {'PASS' if self.passed else 'FAIL'} "
                     f"(max rel err {self.max_rel_err:.3e})")
        return "\n".join(lines)


def finite_diff_check(f: Callable[[Mapping[str, Tensor]], Tensor],
                      params: Mapping[str, Tensor],
                      eps: float = 1e-5,
                      tol: float = 1e-4,
                      max_coords_per_block: int = 16,
                      sample_seed: int = 0) -> CheckReport:
    """Compare backward() gradients with central differences per block.

    f must be a deterministic map from params to a scalar loss Tensor. Blocks
    larger than max_coords_per_block are spot-checked on a seeded coordinate
    sample; smaller blocks are checked exhaustively. The sampled counts are
    recorded in the returned report.
    """
    if eps < 1e-7:
        raise StepUnderflowError(f"finite-difference step {eps:g} underflows f64 perturbation")
    if eps > 1e-3:
        raise ConfigError(f"finite-difference step {eps:g} too coarse (max 1e-3)")

    def eval_scalar() -> float:
        out = f(params)
        if out.data.size != 1:
            raise ContractError(f"finite_diff_check: f must return a scalar, got {out.data.shape}")
        return float(out.data.reshape(()))

    base_a = eval_scalar()
    base_b = eval_scalar()
    if base_a != base_b:
        raise ReproducibilityError(
            f"f is not deterministic: two evaluations gave {base_a!r} and {base_b!r}")

    for p in params.values():
        p.grad = None
    with Graph() as g:
        g.watch_all(p for p in params.values() if p.requires_grad)
        loss = f(params)
    g.backward(loss)

    rng = np.random.default_rng(sample_seed)
    noise_floor = 4.0 * abs(base_a) * np.finfo(np.float64).eps / (eps * tol)
    report = CheckReport(eps=eps, tol=tol, noise_floor=noise_floor)
    for name, p in params.items():
        if not p.requires_grad:
            continue
        analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
        n = p.data.size
        if n <= max_coords_per_block:
            coords = np.arange(n)
        else:
            coords = np.sort(rng.choice(n, size=max_coords_per_block, replace=False))
        an_flat = analytic.reshape(-1)
        flat = p.data.flat  # write-through view regardless of layout
        max_abs_diff = 0.0
        max_mag = 0.0
        for i in coords:
            orig = flat[i]
            flat[i] = orig + eps
            f_plus = eval_scalar()
            flat[i] = orig - eps
            f_minus = eval_scalar()
            flat[i] = orig
            fd = (f_plus - f_minus) / (2.0 * eps)
            max_abs_diff = max(max_abs_diff, abs(fd - an_flat[i]))
            max_mag = max(max_mag, abs(fd), abs(an_flat[i]))
        rel = max_abs_diff / max(max_mag, noise_floor, 1e-12)
        report.blocks.append(BlockCheck(name=name, size=n,
                                        coords_checked=len(coords), max_rel_err=rel))
    return report
