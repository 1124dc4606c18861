"""Dense float64 tensors recorded on a reverse-mode tape.

The engine is deliberately small: a fixed registry of primitives, a tape
that stores one node per primitive application in creation order, and a
reverse sweep that accumulates gradients in that same fixed order so runs
are bit-reproducible.  Values are immutable by convention: no primitive
mutates an input array after recording it.
"""

from __future__ import annotations

import math
from typing import Callable, Mapping, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "ShapeError",
    "NonFiniteError",
    "apply_primitive",
    "backward",
    "grad_check",
    "primitive_names",
    "matmul",
    "add",
    "mul",
    "scale",
    "tanh",
    "sigmoid",
    "log",
    "softmax_rows",
    "sum_all",
    "concat",
    "transpose",
    "clip",
    "tile_rows",
]


class ShapeError(ValueError):
    """Operand shapes do not conform to a primitive's signature."""


class NonFiniteError(FloatingPointError):
    """A primitive produced, or a check encountered, non-finite values."""


# Sigmoid outputs are clipped to the open interval (0, 1); without this,
# float64 rounds sigmoid(x) to exactly 1.0 for x >= ~37.
_SIG_LO = np.nextafter(0.0, 1.0)
_SIG_HI = np.nextafter(1.0, 0.0)


class Tensor:
    """Immutable dense float64 array, optionally tracked on a tape."""

    __slots__ = ("data", "tape", "node_id")

    def __init__(self, data, tape: "Tape | None" = None, node_id: int | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.tape = tape
        self.node_id = node_id

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() on non-scalar tensor of shape {self.data.shape}")
        return float(self.data.reshape(()))

    def __repr__(self) -> str:
        where = "off-tape" if self.tape is None else f"node {self.node_id}"
        return f"Tensor(shape={self.data.shape}, {where})"


class Tape:
    """Creation-ordered record of primitive applications.

    Node ``i`` stores the primitive id, the node ids of its inputs (``None``
    for untracked constants) and the activations its backward rule needs.
    Creation order is a topological order by construction, and the reverse
    sweep accumulates gradients in exactly that order.
    """

    def __init__(self) -> None:
        self.ops: list[str] = []
        self.input_ids: list[tuple[int | None, ...]] = []
        self.ctxs: list[tuple] = []
        self.shapes: list[tuple[int, ...]] = []
        self.params: dict[str, int] = {}

    def __len__(self) -> int:
        return len(self.ops)

    def record(self, op: str, input_ids: tuple[int | None, ...], ctx: tuple,
               shape: tuple[int, ...]) -> int:
        self.ops.append(op)
        self.input_ids.append(input_ids)
        self.ctxs.append(ctx)
        self.shapes.append(shape)
        return len(self.ops) - 1

    def watch(self, name: str, value) -> Tensor:
        """Register a named parameter leaf; ``backward`` reports its gradient."""
        if name in self.params:
            raise ValueError(f"parameter {name!r} is already watched on this tape")
        arr = np.asarray(value, dtype=np.float64)
        nid = self.record("leaf", (), (), arr.shape)
        self.params[name] = nid
        return Tensor(arr, self, nid)


# ---------------------------------------------------------------------------
# Primitive registry.
#
# Each primitive is a (forward, backward) pair.  forward receives the input
# arrays plus static attributes and returns (output, ctx) where ctx holds
# exactly what the backward rule needs.  The saved-activation choice is
# noted per primitive.
# ---------------------------------------------------------------------------


def _fwd_matmul(arrs, attrs):
    a, b = arrs
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    return a @ b, (a, b)


def _bwd_matmul(g, ctx):
    # saves both inputs: dA = g Bᵀ, dB = Aᵀ g
    a, b = ctx
    return g @ b.T, a.T @ g


def _fwd_add(arrs, attrs):
    a, b = arrs
    if a.shape != b.shape:
        raise ShapeError(f"add: mismatched shapes {a.shape} and {b.shape}")
    return a + b, ()


def _bwd_add(g, ctx):
    # saves nothing: gradient passes through unchanged
    return g, g


def _fwd_mul(arrs, attrs):
    a, b = arrs
    if a.shape != b.shape:
        raise ShapeError(f"mul: mismatched shapes {a.shape} and {b.shape}")
    return a * b, (a, b)


def _bwd_mul(g, ctx):
    # saves both inputs
    a, b = ctx
    return g * b, g * a


def _fwd_scale(arrs, attrs):
    (a,) = arrs
    f = float(attrs["factor"])
    return a * f, (f,)


def _bwd_scale(g, ctx):
    # saves the scalar factor
    return (g * ctx[0],)


def _fwd_tanh(arrs, attrs):
    (x,) = arrs
    y = np.tanh(x)
    return y, (y,)


def _bwd_tanh(g, ctx):
    # saves the output: d/dx tanh = 1 - y²
    (y,) = ctx
    return (g * (1.0 - y * y),)


def _fwd_sigmoid(arrs, attrs):
    (x,) = arrs
    e = np.exp(-np.abs(x))
    y = np.where(x >= 0.0, 1.0 / (1.0 + e), e / (1.0 + e))
    y = np.clip(y, _SIG_LO, _SIG_HI)
    return y, (y,)


def _bwd_sigmoid(g, ctx):
    # saves the output: d/dx sigmoid = y (1 - y)
    (y,) = ctx
    return (g * y * (1.0 - y),)


def _fwd_log(arrs, attrs):
    (x,) = arrs
    if x.size and float(x.min()) <= 0.0:
        raise ValueError(
            f"log: non-positive input (min {float(x.min())!r}); clamp before taking logs"
        )
    return np.log(x), (x,)


def _bwd_log(g, ctx):
    # saves the input: d/dx log = 1/x
    (x,) = ctx
    return (g / x,)


def _fwd_softmax_rows(arrs, attrs):
    (x,) = arrs
    if x.ndim != 2:
        raise ShapeError(f"softmax_rows: expected a matrix, got shape {x.shape}")
    m = x.max(axis=1, keepdims=True)
    e = np.exp(x - m)
    y = e / e.sum(axis=1, keepdims=True)
    return y, (y,)


def _bwd_softmax_rows(g, ctx):
    # saves the output: dx = y ⊙ (g - rowsum(g ⊙ y))
    (y,) = ctx
    dot = (g * y).sum(axis=1, keepdims=True)
    return ((g - dot) * y,)


def _fwd_sum(arrs, attrs):
    (x,) = arrs
    return np.asarray(x.sum()), (x.shape,)


def _bwd_sum(g, ctx):
    # saves the input shape only
    return (np.full(ctx[0], float(g)),)


def _fwd_concat(arrs, attrs):
    axis = int(attrs["axis"])
    if not arrs:
        raise ShapeError("concat: needs at least one input")
    nd = arrs[0].ndim
    if axis < 0 or axis >= nd:
        raise ShapeError(f"concat: axis {axis} out of range for {nd}-d inputs")
    base = list(arrs[0].shape)
    for a in arrs[1:]:
        if a.ndim != nd:
            raise ShapeError(f"concat: rank mismatch {arrs[0].shape} vs {a.shape}")
        other = list(a.shape)
        other[axis] = base[axis]
        if other != base:
            raise ShapeError(f"concat: mismatched shapes {arrs[0].shape} vs {a.shape}")
    out = np.concatenate(arrs, axis=axis)
    return out, (axis, tuple(a.shape[axis] for a in arrs))


def _bwd_concat(g, ctx):
    # saves axis and per-input extents along it
    axis, sizes = ctx
    cuts = np.cumsum(sizes[:-1])
    return tuple(np.split(g, cuts, axis=axis))


def _fwd_transpose(arrs, attrs):
    (x,) = arrs
    if x.ndim != 2:
        raise ShapeError(f"transpose: expected a matrix, got shape {x.shape}")
    return x.T.copy(), ()


def _bwd_transpose(g, ctx):
    return (g.T,)


def _fwd_clip(arrs, attrs):
    (x,) = arrs
    lo = float(attrs["lo"])
    hi = float(attrs["hi"])
    if not lo < hi:
        raise ValueError(f"clip: empty interval [{lo}, {hi}]")
    y = np.clip(x, lo, hi)
    mask = (x >= lo) & (x <= hi)
    return y, (mask.astype(np.float64),)


def _bwd_clip(g, ctx):
    # saves the pass-through mask; zero subgradient outside the interval
    return (g * ctx[0],)


def _fwd_tile_rows(arrs, attrs):
    (x,) = arrs
    if x.ndim != 2 or x.shape[0] != 1:
        raise ShapeError(f"tile_rows: expected a single row, got shape {x.shape}")
    n = int(attrs["n"])
    if n < 1:
        raise ShapeError(f"tile_rows: row count must be >= 1, got {n}")
    return np.repeat(x, n, axis=0), ()


def _bwd_tile_rows(g, ctx):
    return (g.sum(axis=0, keepdims=True),)


_PRIMS: dict[str, tuple[Callable, Callable]] = {
    "matmul": (_fwd_matmul, _bwd_matmul),
    "add": (_fwd_add, _bwd_add),
    "mul": (_fwd_mul, _bwd_mul),
    "scale": (_fwd_scale, _bwd_scale),
    "tanh": (_fwd_tanh, _bwd_tanh),
    "sigmoid": (_fwd_sigmoid, _bwd_sigmoid),
    "log": (_fwd_log, _bwd_log),
    "softmax_rows": (_fwd_softmax_rows, _bwd_softmax_rows),
    "sum": (_fwd_sum, _bwd_sum),
    "concat": (_fwd_concat, _bwd_concat),
    "transpose": (_fwd_transpose, _bwd_transpose),
    "clip": (_fwd_clip, _bwd_clip),
    "tile_rows": (_fwd_tile_rows, _bwd_tile_rows),
}


def primitive_names() -> tuple[str, ...]:
    return tuple(_PRIMS)


def apply_primitive(op: str, inputs: Sequence[Tensor], **attrs) -> Tensor:
    """Apply a registered primitive and record it on the active tape.

    The active tape is the one the on-tape inputs share; constants (tensors
    with no tape) participate without receiving gradients.  Raises
    ``ShapeError`` when operands do not conform and ``NonFiniteError`` when
    the output contains NaN or infinities.
    """
    try:
        fwd = _PRIMS[op][0]
    except KeyError:
        raise KeyError(f"unknown primitive {op!r}") from None
    arrays = tuple(t.data for t in inputs)
    out, ctx = fwd(arrays, attrs)
    out = np.asarray(out, dtype=np.float64)
    # single-reduction finiteness probe: NaN and inf both poison the sum
    if out.size and not math.isfinite(float(out.sum())):
        raise NonFiniteError(f"{op} produced non-finite values")
    tape = None
    for t in inputs:
        if t.tape is not None:
            if tape is not None and tape is not t.tape:
                raise ValueError(f"{op}: inputs recorded on different tapes")
            tape = t.tape
    if tape is None:
        return Tensor(out)
    nid = tape.record(op, tuple(t.node_id for t in inputs), ctx, out.shape)
    return Tensor(out, tape, nid)


def backward(tape: Tape, output: Tensor) -> dict[str, np.ndarray]:
    """Reverse sweep from a scalar output to every watched parameter.

    Gradient contributions are accumulated in reverse creation order, so
    repeated runs produce bit-identical gradients.  Parameters the output
    does not depend on receive zero gradients of the right shape.
    """
    if output.tape is not tape or output.node_id is None:
        raise ValueError("output was not produced on this tape")
    if output.data.size != 1:
        raise ValueError(f"backward requires a scalar output, got shape {output.data.shape}")
    grads: list[np.ndarray | None] = [None] * len(tape)
    grads[output.node_id] = np.ones_like(output.data)
    for nid in range(output.node_id, -1, -1):
        g = grads[nid]
        if g is None:
            continue
        op = tape.ops[nid]
        if op == "leaf":
            continue
        in_grads = _PRIMS[op][1](g, tape.ctxs[nid])
        for iid, ig in zip(tape.input_ids[nid], in_grads):
            if iid is None:
                continue
            grads[iid] = ig if grads[iid] is None else grads[iid] + ig
    return {
        name: (grads[nid] if grads[nid] is not None else np.zeros(tape.shapes[nid]))
        for name, nid in tape.params.items()
    }


def grad_check(loss_fn: Callable[[Mapping[str, Tensor]], Tensor],
               params: Mapping[str, np.ndarray],
               step: float = 1e-5) -> float:
    """Compare tape gradients of ``loss_fn`` against central differences.

    ``loss_fn`` receives a name -> Tensor mapping (watched on a fresh tape
    for the analytic pass, plain constants for the numeric one) and must
    return a scalar Tensor deterministically.  Returns the max over all
    parameter entries of ``|analytic - numeric| / max(1e-8, |a| + |n|)``.
    """
    if step <= 0.0:
        raise ValueError("step must be positive")
    base = {k: np.asarray(v, dtype=np.float64) for k, v in params.items()}

    tape = Tape()
    out = loss_fn({k: tape.watch(k, v) for k, v in base.items()})
    analytic = backward(tape, out)

    work = {k: v.copy() for k, v in base.items()}

    def eval_loss() -> float:
        res = loss_fn({k: Tensor(v) for k, v in work.items()})
        return float(res.data.reshape(()))

    worst = 0.0
    for name, arr in work.items():
        flat = arr.reshape(-1)
        ana = analytic[name].reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            hi = eval_loss()
            flat[i] = orig - step
            lo = eval_loss()
            flat[i] = orig
            if not (math.isfinite(hi) and math.isfinite(lo)):
                raise NonFiniteError(
                    f"non-finite loss while perturbing parameter {name!r} entry {i}"
                )
            numeric = (hi - lo) / (2.0 * step)
            a = float(ana[i])
            err = abs(a - numeric) / max(1e-8, abs(a) + abs(numeric))
            if err > worst:
                worst = err
    return worst


# ---------------------------------------------------------------------------
# Thin call-style wrappers.
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    return apply_primitive("matmul", (a, b))


def add(a: Tensor, b: Tensor) -> Tensor:
    return apply_primitive("add", (a, b))


def mul(a: Tensor, b: Tensor) -> Tensor:
    return apply_primitive("mul", (a, b))


def scale(a: Tensor, factor: float) -> Tensor:
    return apply_primitive("scale", (a,), factor=factor)


def tanh(a: Tensor) -> Tensor:
    return apply_primitive("tanh", (a,))


def sigmoid(a: Tensor) -> Tensor:
    return apply_primitive("sigmoid", (a,))


def log(a: Tensor) -> Tensor:
    return apply_primitive("log", (a,))


def softmax_rows(a: Tensor) -> Tensor:
    return apply_primitive("softmax_rows", (a,))


def sum_all(a: Tensor) -> Tensor:
    return apply_primitive("sum", (a,))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    return apply_primitive("concat", tuple(tensors), axis=axis)


def transpose(a: Tensor) -> Tensor:
    return apply_primitive("transpose", (a,))


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    return apply_primitive("clip", (a,), lo=lo, hi=hi)


def tile_rows(a: Tensor, n: int) -> Tensor:
    return apply_primitive("tile_rows", (a,), n=n)
