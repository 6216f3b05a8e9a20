"""Dense float64 tensors with a reverse-mode autodiff tape.

Every numeric operation in the model goes through the primitives below.
Forward values are computed eagerly with numpy; while a :class:`GradTape`
is active each primitive appends a vector-Jacobian closure, and
:func:`backward` replays the tape in reverse execution order (a reverse
topological order, since execution order is topological).
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import ContractError, FormatError, NumericError, ShapeError, UsageError

# tanh-approximation GeLU constants: sqrt(2/pi) and the cubic coefficient
GELU_C0 = 0.7978845608
GELU_C1 = 0.044715


class Tensor:
    """N-dimensional float64 value over a flat row-major buffer.

    Values are fixed after construction (the optimizer's in-place parameter
    update between steps is the one sanctioned exception); only ``grad`` is
    mutable. Reshapes return new descriptors sharing the same buffer.
    """

    __slots__ = ("shape", "values", "requires_grad", "grad", "_tracked")

    def __init__(self, values, shape: Sequence[int] | None = None, *, requires_grad: bool = False):
        arr = np.asarray(values, dtype=np.float64)
        if shape is None:
            shape = arr.shape if arr.ndim > 0 else (1,)
        shape = tuple(int(d) for d in shape)
        if any(d < 1 for d in shape):
            raise ShapeError(f"dimensions must be positive, got {shape}")
        flat = np.ascontiguousarray(arr).reshape(-1).copy()
        if int(np.prod(shape)) != flat.size:
            raise ShapeError(f"shape {shape} does not hold {flat.size} values")
        self.shape = shape
        self.values = flat
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._tracked = bool(requires_grad)

    @staticmethod
    def _wrap(flat: np.ndarray, shape: tuple[int, ...]) -> "Tensor":
        """Internal fast path: wrap a fresh flat float64 buffer, no copy."""
        t = Tensor.__new__(Tensor)
        t.shape = shape
        t.values = flat
        t.requires_grad = False
        t.grad = None
        t._tracked = False
        return t

    @property
    def size(self) -> int:
        return self.values.size

    @property
    def ndim(self) -> int:
        return len(self.shape)

    def view(self) -> np.ndarray:
        """Read-only numpy view shaped like ``shape`` (do not mutate)."""
        return self.values.reshape(self.shape)

    def item(self) -> float:
        if self.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.values[0])

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


def zeros(shape: Sequence[int], *, requires_grad: bool = False) -> Tensor:
    shape = tuple(int(d) for d in shape)
    return Tensor(np.zeros(int(np.prod(shape))), shape, requires_grad=requires_grad)


def constant(values, shape: Sequence[int] | None = None) -> Tensor:
    return Tensor(values, shape)


@dataclass
class TapeRecord:
    out: Tensor
    inputs: tuple[Tensor, ...]
    vjp: Callable[[np.ndarray], tuple]


class GradTape:
    """Ordered record of executed primitives for one backward pass.

    Usable as a context manager; primitives executed inside record
    themselves when any input is connected to a ``requires_grad`` leaf.
    A tape can be consumed by :func:`backward` exactly once.
    """

    def __init__(self, rng_seed: int = 0):
        self.rng_seed = int(rng_seed)
        self.records: list[TapeRecord] = []
        self.consumed = False
        self._watched: dict[int, Tensor] = {}

    def watch(self, t: Tensor) -> None:
        """Register a leaf so backward fills its grad even if unused."""
        if not t.requires_grad:
            raise ContractError("watch() requires a requires_grad leaf")
        self._watched.setdefault(id(t), t)

    def __enter__(self) -> "GradTape":
        _TAPES.append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        popped = _TAPES.pop()
        assert popped is self


_TAPES: list[GradTape] = []


def _record(out: Tensor, inputs: tuple[Tensor, ...], vjp) -> Tensor:
    if not _TAPES:
        return out
    if not any(t._tracked for t in inputs):
        return out
    tape = _TAPES[-1]
    out._tracked = True
    for t in inputs:
        if t.requires_grad:
            tape._watched.setdefault(id(t), t)
    tape.records.append(TapeRecord(out, inputs, vjp))
    return out


def backward(loss: Tensor, tape: GradTape) -> None:
    """Populate ``grad`` on every watched leaf from a scalar loss.

    Leaves not reached by the loss get exact zeros. The tape is consumed.
    """
    if tape.consumed:
        raise UsageError("tape already consumed by a previous backward()")
    if loss.size != 1:
        raise ContractError(f"loss must be scalar, got shape {loss.shape}")
    tape.consumed = True
    grads: dict[int, np.ndarray] = {id(loss): np.ones(1)}
    for rec in reversed(tape.records):
        g = grads.pop(id(rec.out), None)
        if g is None:
            continue
        gin = rec.vjp(g.reshape(rec.out.shape))
        for t, gi in zip(rec.inputs, gin):
            if gi is None or not t._tracked:
                continue
            flat = np.asarray(gi, dtype=np.float64).reshape(-1)
            acc = grads.get(id(t))
            grads[id(t)] = flat if acc is None else acc + flat
    for tid, leaf in tape._watched.items():
        g = grads.get(tid)
        leaf.grad = np.zeros(leaf.size) if g is None else g.copy()


# ---------------------------------------------------------------------------
# primitives


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shapes incompatible: {a.shape} x {b.shape}")
    av, bv = a.view(), b.view()
    out = Tensor._wrap(np.ascontiguousarray(av @ bv).reshape(-1), (a.shape[0], b.shape[1]))

    def vjp(g):
        return g @ bv.T, av.T @ g

    return _record(out, (a, b), vjp)


def _check_trailing(a: Tensor, b: Tensor, opname: str) -> None:
    if b.ndim > a.ndim or b.shape != a.shape[a.ndim - b.ndim:]:
        raise ShapeError(f"{opname}: {b.shape} is not a trailing broadcast of {a.shape}")


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; ``b`` may be a trailing-dimension broadcast of ``a``."""
    _check_trailing(a, b, "add")
    lead = tuple(range(a.ndim - b.ndim))
    out = Tensor._wrap((a.view() + b.view()).reshape(-1), a.shape)

    def vjp(g):
        return g, g.sum(axis=lead) if lead else g

    return _record(out, (a, b), vjp)


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product; ``b`` may be a trailing-dimension broadcast of ``a``."""
    _check_trailing(a, b, "mul")
    lead = tuple(range(a.ndim - b.ndim))
    av, bv = a.view(), b.view()
    out = Tensor._wrap((av * bv).reshape(-1), a.shape)

    def vjp(g):
        gb = g * av
        return g * bv, gb.sum(axis=lead) if lead else gb

    return _record(out, (a, b), vjp)


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    out = Tensor._wrap(x.values * c, x.shape)
    return _record(out, (x,), lambda g: (g * c,))


def sub(a: Tensor, b: Tensor) -> Tensor:
    return add(a, scale(b, -1.0))


def relu(x: Tensor) -> Tensor:
    v = x.values
    out = Tensor._wrap(np.maximum(v, 0.0), x.shape)
    return _record(out, (x,), lambda g: (g * (v > 0.0).reshape(x.shape),))


def tanh(x: Tensor) -> Tensor:
    t = np.tanh(x.values)
    out = Tensor._wrap(t, x.shape)
    return _record(out, (x,), lambda g: (g * (1.0 - t * t).reshape(x.shape),))


def exp(x: Tensor) -> Tensor:
    e = np.exp(x.values)
    out = Tensor._wrap(e, x.shape)
    return _record(out, (x,), lambda g: (g * e.reshape(x.shape),))


def log(x: Tensor) -> Tensor:
    """Natural log; inputs must be strictly positive."""
    v = x.values
    out = Tensor._wrap(np.log(v), x.shape)
    return _record(out, (x,), lambda g: (g / v.reshape(x.shape),))


def gelu(x: Tensor) -> Tensor:
    """GeLU, tanh approximation: 0.5*x*(1 + tanh(c0*(x + c1*x^3)))."""
    v = x.values
    u = GELU_C0 * (v + GELU_C1 * v ** 3)
    t = np.tanh(u)
    out = Tensor._wrap(0.5 * v * (1.0 + t), x.shape)

    def vjp(g):
        d = 0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * GELU_C0 * (1.0 + 3.0 * GELU_C1 * v * v)
        return (g * d.reshape(x.shape),)

    return _record(out, (x,), vjp)


def _norm_axis(ndim: int, axis: int) -> int:
    if not -ndim <= axis < ndim:
        raise ShapeError(f"axis {axis} out of range for {ndim}-d tensor")
    return axis % ndim


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Max-subtracted exponent normalization along ``axis``."""
    ax = _norm_axis(x.ndim, axis)
    v = x.view()
    shifted = v - v.max(axis=ax, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=ax, keepdims=True)
    out = Tensor._wrap(s.reshape(-1).copy(), x.shape)

    def vjp(g):
        return (s * (g - (g * s).sum(axis=ax, keepdims=True)),)

    return _record(out, (x,), vjp)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    ax = _norm_axis(x.ndim, axis)
    v = x.view()
    shifted = v - v.max(axis=ax, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=ax, keepdims=True))
    y = shifted - lse
    out = Tensor._wrap(y.reshape(-1).copy(), x.shape)
    s = np.exp(y)

    def vjp(g):
        return (g - s * g.sum(axis=ax, keepdims=True),)

    return _record(out, (x,), vjp)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, axis: int = -1, eps: float = 1e-5) -> Tensor:
    """Zero mean / unit variance along one axis, then affine (gamma, beta)."""
    if eps <= 0.0:
        raise ContractError(f"layer_norm eps must be positive, got {eps}")
    ax = _norm_axis(x.ndim, axis)
    n = x.shape[ax]
    if gamma.shape != (n,) or beta.shape != (n,):
        raise ShapeError(f"layer_norm affine shapes {gamma.shape}/{beta.shape} do not match axis size {n}")
    v = x.view()
    mu = v.mean(axis=ax, keepdims=True)
    var = ((v - mu) ** 2).mean(axis=ax, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (v - mu) * inv
    bshape = [1] * x.ndim
    bshape[ax] = n
    gv = gamma.values.reshape(bshape)
    bv = beta.values.reshape(bshape)
    out = Tensor._wrap((xhat * gv + bv).reshape(-1), x.shape)
    other = tuple(i for i in range(x.ndim) if i != ax)

    def vjp(g):
        dgamma = (g * xhat).sum(axis=other) if other else (g * xhat)
        dbeta = g.sum(axis=other) if other else g
        dxhat = g * gv
        dx = (dxhat - dxhat.mean(axis=ax, keepdims=True)
              - xhat * (dxhat * xhat).mean(axis=ax, keepdims=True)) * inv
        return dx, dgamma.reshape(-1), dbeta.reshape(-1)

    return _record(out, (x, gamma, beta), vjp)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(int(d) for d in shape)
    if any(d < 1 for d in shape):
        raise ShapeError(f"dimensions must be positive, got {shape}")
    if int(np.prod(shape)) != x.size:
        raise ShapeError(f"cannot reshape {x.shape} to {shape}")
    out = Tensor._wrap(x.values, shape)  # shared buffer, new descriptor
    return _record(out, (x,), lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor) -> Tensor:
    if x.ndim != 2:
        raise ShapeError(f"transpose expects a 2-d tensor, got {x.shape}")
    out = Tensor._wrap(np.ascontiguousarray(x.view().T).reshape(-1), (x.shape[1], x.shape[0]))
    return _record(out, (x,), lambda g: (g.T,))


def concat(parts: Sequence[Tensor], axis: int = -1) -> Tensor:
    if not parts:
        raise ContractError("concat of zero tensors")
    ax = _norm_axis(parts[0].ndim, axis)
    base = list(parts[0].shape)
    sizes = []
    for p in parts:
        if p.ndim != len(base) or any(p.shape[i] != base[i] for i in range(len(base)) if i != ax):
            raise ShapeError(f"concat shapes incompatible: {[q.shape for q in parts]}")
        sizes.append(p.shape[ax])
    base[ax] = sum(sizes)
    out_v = np.concatenate([p.view() for p in parts], axis=ax)
    out = Tensor._wrap(np.ascontiguousarray(out_v).reshape(-1), tuple(base))
    offsets = np.cumsum([0] + sizes)

    def vjp(g):
        return tuple(np.take(g, np.arange(offsets[i], offsets[i + 1]), axis=ax) for i in range(len(parts)))

    return _record(out, tuple(parts), vjp)


def slice_axis(x: Tensor, axis: int, start: int, stop: int) -> Tensor:
    ax = _norm_axis(x.ndim, axis)
    if not 0 <= start < stop <= x.shape[ax]:
        raise ShapeError(f"slice [{start}:{stop}] out of range for axis {ax} of {x.shape}")
    sl = [slice(None)] * x.ndim
    sl[ax] = slice(start, stop)
    piece = x.view()[tuple(sl)]
    shape = tuple(piece.shape)
    out = Tensor._wrap(np.ascontiguousarray(piece).reshape(-1), shape)

    def vjp(g):
        gx = np.zeros(x.shape)
        gx[tuple(sl)] = g
        return (gx,)

    return _record(out, (x,), vjp)


def gather_flat(x: Tensor, idx: np.ndarray, shape: Sequence[int]) -> Tensor:
    """Gather flat elements of ``x`` by index into a new shape.

    Covers embedding lookup and the patch-extraction permutations; the
    gradient scatter-adds back into the source buffer.
    """
    idx = np.asarray(idx, dtype=np.int64).reshape(-1)
    shape = tuple(int(d) for d in shape)
    if int(np.prod(shape)) != idx.size:
        raise ShapeError(f"index count {idx.size} does not fill shape {shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= x.size):
        raise ShapeError(f"gather index out of range for {x.size} elements")
    out = Tensor._wrap(x.values[idx], shape)

    def vjp(g):
        gx = np.zeros(x.size)
        np.add.at(gx, idx, g.reshape(-1))
        return (gx.reshape(x.shape),)

    return _record(out, (x,), vjp)


def sum_all(x: Tensor) -> Tensor:
    out = Tensor._wrap(np.array([x.values.sum()]), (1,))
    return _record(out, (x,), lambda g: (np.full(x.shape, g.reshape(-1)[0]),))


def mean_all(x: Tensor) -> Tensor:
    return scale(sum_all(x), 1.0 / x.size)


def elementwise(x: Tensor, kind: str, other: Tensor | None = None) -> Tensor:
    """Dispatch by name over the pointwise primitive set."""
    unary = {"relu": relu, "gelu": gelu, "tanh": tanh}
    if kind in unary:
        return unary[kind](x)
    if kind in ("mul", "add"):
        if other is None:
            raise ContractError(f"elementwise '{kind}' needs a second operand")
        return (mul if kind == "mul" else add)(x, other)
    raise ContractError(f"unknown elementwise kind '{kind}'")


# ---------------------------------------------------------------------------
# gradient verification


@dataclass
class CheckReport:
    max_rel_err: float
    n_coords: int
    tol: float

    @property
    def passed(self) -> bool:
        return self.max_rel_err < self.tol


def finite_diff_check(f, x: Tensor, step: float = 1e-5, tol: float = 1e-5,
                      *, max_coords: int | None = None, seed: int = 0) -> CheckReport:
    """Compare autodiff gradients of scalar ``f(x)`` to central differences.

    Relative error per coordinate is |a-n| / max(|a|, |n|, 1e-8); the report
    carries the maximum. ``max_coords`` limits checking to a deterministic
    random subset of coordinates for large tensors.
    """
    if not 1e-7 <= step <= 1e-3:
        raise ContractError(f"step {step} outside [1e-7, 1e-3]")

    probe = Tensor(x.values, x.shape, requires_grad=True)
    with GradTape() as tape:
        tape.watch(probe)
        y = f(probe)
    if y.size != 1:
        raise ContractError(f"finite_diff_check target must be scalar, got {y.shape}")
    if not np.isfinite(y.values[0]):
        raise NumericError("non-finite function output during gradient check")
    backward(y, tape)
    analytic = probe.grad

    coords = np.arange(x.size)
    if max_coords is not None and max_coords < x.size:
        rng = np.random.Generator(np.random.PCG64(seed))
        coords = np.sort(rng.permutation(x.size)[:max_coords])

    def eval_at(vals: np.ndarray) -> float:
        out = f(Tensor(vals, x.shape))
        r = out.values[0]
        if not np.isfinite(r):
            raise NumericError("non-finite function output during gradient check")
        return float(r)

    max_err = 0.0
    for i in coords:
        bump = x.values.copy()
        bump[i] += step
        fp = eval_at(bump)
        bump[i] -= 2.0 * step
        fm = eval_at(bump)
        num = (fp - fm) / (2.0 * step)
        ana = float(analytic[i])
        err = abs(ana - num) / max(abs(ana), abs(num), 1e-8)
        max_err = max(max_err, err)
    return CheckReport(max_rel_err=max_err, n_coords=len(coords), tol=tol)


# ---------------------------------------------------------------------------
# serialization: "SBTN" little-endian container


def tensor_to_bytes(t: Tensor) -> bytes:
    head = b"SBTN" + struct.pack("<I", t.ndim) + struct.pack(f"<{t.ndim}I", *t.shape)
    return head + t.values.astype("<f8").tobytes()


def tensor_from_bytes(buf: bytes, offset: int = 0) -> tuple[Tensor, int]:
    """Parse one SBTN record, returning the tensor and the next offset."""
    if len(buf) < offset + 8:
        raise FormatError(f"truncated tensor header at offset {offset}")
    if buf[offset:offset + 4] != b"SBTN":
        raise FormatError(f"bad tensor magic at offset {offset}")
    (rank,) = struct.unpack_from("<I", buf, offset + 4)
    pos = offset + 8
    if len(buf) < pos + 4 * rank:
        raise FormatError(f"truncated dimension list at offset {pos}")
    dims = struct.unpack_from(f"<{rank}I", buf, pos)
    pos += 4 * rank
    count = int(np.prod(dims)) if rank else 1
    end = pos + 8 * count
    if len(buf) < end:
        raise FormatError(f"truncated tensor values at offset {pos}")
    vals = np.frombuffer(buf, dtype="<f8", count=count, offset=pos)
    return Tensor(vals, dims), end
