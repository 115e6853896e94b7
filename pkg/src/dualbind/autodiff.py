"""Reverse-mode automatic differentiation over dense float64 arrays.

Every backward rule is written in terms of the same differentiable ops, so a
gradient computed with ``create_graph=True`` is itself part of the graph and
can be differentiated again. The denoising score matching loss relies on this:
it penalises a coordinate gradient of the energy and is trained with respect
to the parameters.

Nodes carry a monotonically increasing id assigned at creation time, so the
insertion order of the graph is a topological order and backward traversal
simply walks reachable nodes by decreasing id.
"""

from __future__ import annotations

import itertools
import math
import weakref
from collections.abc import Callable, Sequence
from typing import Any

import numpy as np
import scipy.sparse as sp

__all__ = [
    "Tensor",
    "Function",
    "IndexMap",
    "GradientError",
    "no_grad",
    "enable_grad",
    "is_grad_enabled",
    "tensor",
    "record",
    "gradient",
    "finite_difference_check",
    "OPS",
]

_uid = itertools.count()
_grad_enabled = True


class GradientError(RuntimeError):
    """Raised for invalid gradient requests."""


class _GradMode:
    def __init__(self, enabled: bool):
        self.enabled = enabled

    def __enter__(self):
        global _grad_enabled
        self.prev = _grad_enabled
        _grad_enabled = self.enabled

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self.prev
        return False


def no_grad() -> _GradMode:
    """Context manager that disables graph recording."""
    return _GradMode(False)


def enable_grad() -> _GradMode:
    return _GradMode(True)


def is_grad_enabled() -> bool:
    return _grad_enabled


class Node:
    __slots__ = ("fn", "inputs", "ctx", "uid")

    def __init__(self, fn, inputs, ctx, uid):
        self.fn = fn
        self.inputs = inputs
        self.ctx = ctx
        self.uid = uid

    def __repr__(self):
        return f"Node({self.fn.name}, id={self.uid})"


class Context:
    """Per-call storage shared between forward and backward."""

    __slots__ = ("inputs", "saved", "kwargs", "_out")

    def __init__(self):
        self.inputs: tuple[Tensor, ...] = ()
        self.saved: dict[str, Any] = {}
        self.kwargs: dict[str, Any] = {}
        self._out = None

    @property
    def output(self) -> "Tensor":
        out = self._out() if self._out is not None else None
        if out is None:
            raise GradientError("output tensor of a recorded op was released")
        return out


class Tensor:
    """A float64 array that may be linked into the computation graph."""

    __slots__ = ("data", "requires_grad", "node", "uid", "from_detached_grad", "__weakref__")
    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.node: Node | None = None
        self.uid = next(_uid)
        self.from_detached_grad = False

    # -- introspection ---------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({np.array2string(self.data, precision=6)}{flag})"

    def __len__(self):
        return self.data.shape[0]

    # -- operators ---------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, index):
        return take(self, index)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class Function:
    """Base class for a differentiable op.

    Subclasses implement ``forward`` on raw arrays and ``backward`` on Tensors.
    Because ``backward`` is expressed with Tensor ops it is recorded whenever
    gradient mode is on, which is what makes higher-order gradients work.
    Set ``second_order = False`` for an op whose backward is not expressed
    that way; requesting ``create_graph=True`` through it is then an error.
    """

    name = "function"
    second_order = True
    needs_output = False

    @staticmethod
    def forward(ctx: Context, *arrays, **kwargs) -> np.ndarray:
        raise NotImplementedError

    @staticmethod
    def backward(ctx: Context, grad: Tensor) -> tuple[Tensor | None, ...]:
        raise NotImplementedError

    @classmethod
    def apply(cls, *inputs, **kwargs) -> Tensor:
        tensors = tuple(_as_tensor(x) for x in inputs)
        ctx = Context()
        ctx.kwargs = kwargs
        out = Tensor(cls.forward(ctx, *(t.data for t in tensors), **kwargs))
        if any(t.from_detached_grad for t in tensors):
            out.from_detached_grad = True
        if _grad_enabled and any(t.requires_grad for t in tensors):
            ctx.inputs = tensors
            if cls.needs_output:
                ctx._out = weakref.ref(out)
            out.requires_grad = True
            out.node = Node(cls, tensors, ctx, out.uid)
        return out


def _shape_error(op: str, a: np.ndarray, b: np.ndarray) -> ValueError:
    return ValueError(f"{op}: incompatible shapes {a.shape} and {b.shape}")


def _broadcast_check(op: str, a: np.ndarray, b: np.ndarray) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise _shape_error(op, a, b) from None


# ---------------------------------------------------------------------------
# elementwise binary ops


class Add(Function):
    name = "add"

    @staticmethod
    def forward(ctx, a, b):
        _broadcast_check("add", a, b)
        return a + b

    @staticmethod
    def backward(ctx, g):
        a, b = ctx.inputs
        return sum_to(g, a.shape), sum_to(g, b.shape)


class Sub(Function):
    name = "sub"

    @staticmethod
    def forward(ctx, a, b):
        _broadcast_check("sub", a, b)
        return a - b

    @staticmethod
    def backward(ctx, g):
        a, b = ctx.inputs
        return sum_to(g, a.shape), sum_to(neg(g), b.shape)


class Mul(Function):
    name = "mul"

    @staticmethod
    def forward(ctx, a, b):
        _broadcast_check("mul", a, b)
        return a * b

    @staticmethod
    def backward(ctx, g):
        a, b = ctx.inputs
        ga = sum_to(g * b, a.shape) if a.requires_grad else None
        gb = sum_to(g * a, b.shape) if b.requires_grad else None
        return ga, gb


class Div(Function):
    name = "div"

    @staticmethod
    def forward(ctx, a, b):
        _broadcast_check("div", a, b)
        return a / b

    @staticmethod
    def backward(ctx, g):
        a, b = ctx.inputs
        ga = sum_to(g / b, a.shape) if a.requires_grad else None
        gb = sum_to(neg(g * a) / square(b), b.shape) if b.requires_grad else None
        return ga, gb


# ---------------------------------------------------------------------------
# elementwise unary ops


class Neg(Function):
    name = "neg"

    @staticmethod
    def forward(ctx, a):
        return -a

    @staticmethod
    def backward(ctx, g):
        return (neg(g),)


class Square(Function):
    name = "square"

    @staticmethod
    def forward(ctx, a):
        return a * a

    @staticmethod
    def backward(ctx, g):
        (a,) = ctx.inputs
        return (g * a * 2.0,)


class Sqrt(Function):
    name = "sqrt"
    needs_output = True

    @staticmethod
    def forward(ctx, a):
        return np.sqrt(a)

    @staticmethod
    def backward(ctx, g):
        return (g * 0.5 / ctx.output,)


class Exp(Function):
    name = "exp"
    needs_output = True

    @staticmethod
    def forward(ctx, a):
        return np.exp(a)

    @staticmethod
    def backward(ctx, g):
        return (g * ctx.output,)


class Tanh(Function):
    name = "tanh"
    needs_output = True

    @staticmethod
    def forward(ctx, a):
        return np.tanh(a)

    @staticmethod
    def backward(ctx, g):
        out = ctx.output
        return (g * (1.0 - square(out)),)


class Cos(Function):
    name = "cos"

    @staticmethod
    def forward(ctx, a):
        return np.cos(a)

    @staticmethod
    def backward(ctx, g):
        (a,) = ctx.inputs
        return (neg(g * sin(a)),)


class Sin(Function):
    name = "sin"

    @staticmethod
    def forward(ctx, a):
        return np.sin(a)

    @staticmethod
    def backward(ctx, g):
        (a,) = ctx.inputs
        return (g * cos(a),)


class Clip(Function):
    """Clamp to ``[lo, hi]``; the derivative is a constant 0/1 mask."""

    name = "clip"

    @staticmethod
    def forward(ctx, a, lo, hi):
        ctx.saved["mask"] = ((a > lo) & (a < hi)).astype(np.float64)
        return np.clip(a, lo, hi)

    @staticmethod
    def backward(ctx, g):
        return (g * ctx.saved["mask"],)


# ---------------------------------------------------------------------------
# linear algebra and reductions


def _swap_last(x: Tensor) -> Tensor:
    axes = list(range(x.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(x, tuple(axes))


class MatMul(Function):
    name = "matmul"

    @staticmethod
    def forward(ctx, a, b):
        if a.ndim < 2 or b.ndim < 2:
            raise ValueError(f"matmul: operands must be at least 2-D, got {a.shape} and {b.shape}")
        if a.shape[-1] != b.shape[-2]:
            raise _shape_error("matmul", a, b)
        try:
            return np.matmul(a, b)
        except ValueError:
            raise _shape_error("matmul", a, b) from None

    @staticmethod
    def backward(ctx, g):
        a, b = ctx.inputs
        ga = sum_to(matmul(g, _swap_last(b)), a.shape) if a.requires_grad else None
        gb = sum_to(matmul(_swap_last(a), g), b.shape) if b.requires_grad else None
        return ga, gb


def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def _keepdims_shape(shape, axes):
    return tuple(1 if i in axes else s for i, s in enumerate(shape))


class Sum(Function):
    name = "sum"

    @staticmethod
    def forward(ctx, a, axis=None, keepdims=False):
        return np.sum(a, axis=axis, keepdims=keepdims)

    @staticmethod
    def backward(ctx, g):
        (a,) = ctx.inputs
        axes = _norm_axis(ctx.kwargs["axis"], a.ndim)
        g = reshape(g, _keepdims_shape(a.shape, axes))
        return (broadcast_to(g, a.shape),)


class Mean(Function):
    name = "mean"

    @staticmethod
    def forward(ctx, a, axis=None, keepdims=False):
        return np.mean(a, axis=axis, keepdims=keepdims)

    @staticmethod
    def backward(ctx, g):
        (a,) = ctx.inputs
        axes = _norm_axis(ctx.kwargs["axis"], a.ndim)
        count = math.prod(a.shape[i] for i in axes)
        g = reshape(g, _keepdims_shape(a.shape, axes))
        return (broadcast_to(g, a.shape) * (1.0 / count),)


class SumTo(Function):
    """Reduce a broadcast result back to ``shape``."""

    name = "sum_to"

    @staticmethod
    def forward(ctx, a, shape):
        return _sum_to_array(a, shape)

    @staticmethod
    def backward(ctx, g):
        (a,) = ctx.inputs
        return (broadcast_to(g, a.shape),)


def _sum_to_array(a: np.ndarray, shape) -> np.ndarray:
    shape = tuple(shape)
    if a.shape == shape:
        return a
    lead = a.ndim - len(shape)
    if lead:
        a = a.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and a.shape[i] != 1)
    if axes:
        a = a.sum(axis=axes, keepdims=True)
    return a


class BroadcastTo(Function):
    name = "broadcast_to"

    @staticmethod
    def forward(ctx, a, shape):
        return np.broadcast_to(a, shape)

    @staticmethod
    def backward(ctx, g):
        (a,) = ctx.inputs
        return (sum_to(g, a.shape),)


class Reshape(Function):
    name = "reshape"

    @staticmethod
    def forward(ctx, a, shape):
        return np.reshape(a, shape)

    @staticmethod
    def backward(ctx, g):
        (a,) = ctx.inputs
        return (reshape(g, a.shape),)


class Transpose(Function):
    name = "transpose"

    @staticmethod
    def forward(ctx, a, axes=None):
        return np.transpose(a, axes)

    @staticmethod
    def backward(ctx, g):
        axes = ctx.kwargs["axes"]
        if axes is None:
            return (transpose(g, None),)
        return (transpose(g, tuple(np.argsort(axes))),)


class Concat(Function):
    name = "concat"

    @staticmethod
    def forward(ctx, *arrays, axis=0):
        try:
            return np.concatenate(arrays, axis=axis)
        except ValueError:
            shapes = ", ".join(str(a.shape) for a in arrays)
            raise ValueError(f"concat: incompatible shapes {shapes} along axis {axis}") from None

    @staticmethod
    def backward(ctx, g):
        axis = ctx.kwargs["axis"] % g.ndim
        grads = []
        start = 0
        for t in ctx.inputs:
            stop = start + t.shape[axis]
            if t.requires_grad:
                index = (slice(None),) * axis + (slice(start, stop),)
                grads.append(take(g, index))
            else:
                grads.append(None)
            start = stop
        return tuple(grads)


# ---------------------------------------------------------------------------
# indexing


def _has_array(index) -> bool:
    parts = index if isinstance(index, tuple) else (index,)
    return any(isinstance(p, (list, np.ndarray)) for p in parts)


class Take(Function):
    """Generic numpy indexing ``a[index]``."""

    name = "take"

    @staticmethod
    def forward(ctx, a, index):
        return a[index]

    @staticmethod
    def backward(ctx, g):
        (a,) = ctx.inputs
        return (untake(g, ctx.kwargs["index"], a.shape),)


class Untake(Function):
    """Adjoint of ``Take``: scatter-add ``g`` into zeros of ``shape`` at ``index``."""

    name = "untake"

    @staticmethod
    def forward(ctx, g, index, shape):
        out = np.zeros(shape)
        if _has_array(index):
            np.add.at(out, index, g)
        else:
            out[index] = g
        return out

    @staticmethod
    def backward(ctx, g):
        return (take(g, ctx.kwargs["index"]),)


class IndexMap:
    """Row index list ``idx`` into a table of ``size`` rows.

    Caches the sparse scatter matrix so the gather/scatter pair used by
    message passing costs one sparse product per call.
    """

    __slots__ = ("idx", "size", "_scatter")

    def __init__(self, idx, size: int):
        self.idx = np.asarray(idx, dtype=np.int64)
        self.size = int(size)
        if self.idx.size and (self.idx.min() < 0 or self.idx.max() >= self.size):
            raise IndexError(f"index out of range for table of {self.size} rows")
        self._scatter = None

    def __len__(self):
        return self.idx.size

    @property
    def scatter_matrix(self) -> sp.csr_matrix:
        if self._scatter is None:
            n = self.idx.size
            self._scatter = sp.csr_matrix(
                (np.ones(n), (self.idx, np.arange(n))), shape=(self.size, n)
            )
        return self._scatter

    def gather_array(self, a: np.ndarray) -> np.ndarray:
        return np.take(a, self.idx, axis=0)

    def scatter_array(self, a: np.ndarray) -> np.ndarray:
        flat = a.reshape(a.shape[0], -1)
        out = np.asarray(self.scatter_matrix @ flat)
        return out.reshape((self.size,) + a.shape[1:])


class Gather(Function):
    """Rows ``a[index.idx]``."""

    name = "gather"

    @staticmethod
    def forward(ctx, a, index: IndexMap):
        if a.shape[0] != index.size:
            raise ValueError(f"gather: table has {a.shape[0]} rows, index expects {index.size}")
        return index.gather_array(a)

    @staticmethod
    def backward(ctx, g):
        return (scatter_add(g, ctx.kwargs["index"]),)


class ScatterAdd(Function):
    """Sum rows of ``a`` into ``index.size`` buckets given by ``index.idx``."""

    name = "scatter_add"

    @staticmethod
    def forward(ctx, a, index: IndexMap):
        if a.shape[0] != len(index):
            raise ValueError(f"scatter_add: {a.shape[0]} rows but {len(index)} indices")
        return index.scatter_array(a)

    @staticmethod
    def backward(ctx, g):
        return (gather(g, ctx.kwargs["index"]),)


# ---------------------------------------------------------------------------
# symmetric 3x3 eigenvectors

DEGENERACY_GAP = 1e-8


def _canonical_eigvecs(c: np.ndarray) -> np.ndarray:
    """Eigenvectors of one symmetric matrix as columns, eigenvalues descending.

    Near-degenerate eigenspaces get a deterministic basis: candidates spanned
    by projecting the standard axes into the subspace, ordered by their
    lexicographically largest absolute components. Each column is sign-fixed
    so its largest-magnitude entry is positive, then the last column is
    flipped if needed to make the frame right-handed.
    """
    w, v = np.linalg.eigh(c)
    order = np.argsort(-w, kind="stable")
    w, v = w[order], v[:, order]
    k = len(w)
    i = 0
    while i < k:
        j = i + 1
        while j < k and w[j - 1] - w[j] < DEGENERACY_GAP:
            j += 1
        if j - i > 1:
            sub = v[:, i:j]
            proj = sub @ sub.T
            cands = []
            for axis in np.eye(k):
                u = proj @ axis
                for q in cands:
                    u = u - (q @ u) * q
                norm = np.linalg.norm(u)
                if norm > 1e-6:
                    cands.append(u / norm)
                if len(cands) == j - i:
                    break
            cands.sort(key=lambda u: tuple(-np.abs(u)))
            v[:, i:j] = np.stack(cands, axis=1)
        i = j
    for col in range(k):
        vec = v[:, col]
        if vec[np.argmax(np.abs(vec))] < 0:
            v[:, col] = -vec
    if np.linalg.det(v) < 0:
        v[:, -1] = -v[:, -1]
    return v


class SymEigVecs(Function):
    """Eigenvectors (columns, eigenvalues descending) of batched symmetric matrices.

    The backward pass rebuilds eigenvalues from the output as ``v^T C v`` so
    that the classic perturbation formula stays inside the graph. Pairs with
    an eigenvalue gap below ``DEGENERACY_GAP`` contribute no gradient.
    """

    name = "sym_eigvecs"
    needs_output = True

    @staticmethod
    def forward(ctx, c):
        if c.ndim < 2 or c.shape[-1] != c.shape[-2]:
            raise ValueError(f"sym_eigvecs: expected (..., k, k), got {c.shape}")
        flat = c.reshape((-1,) + c.shape[-2:])
        out = np.stack([_canonical_eigvecs(m) for m in flat])
        return out.reshape(c.shape)

    @staticmethod
    def backward(ctx, g):
        (c,) = ctx.inputs
        v = ctx.output
        vt = _swap_last(v)
        lam = sum_(v * matmul(c, v), axis=-2)  # (..., k)
        k = c.shape[-1]
        lam_row = reshape(lam, lam.shape[:-1] + (1, k))
        lam_col = reshape(lam, lam.shape[:-1] + (k, 1))
        gap = lam_row - lam_col  # gap[i, j] = lam_j - lam_i
        mask = (np.abs(gap.data) >= DEGENERACY_GAP).astype(np.float64)
        f = mask / (gap + (1.0 - mask))
        inner = f * matmul(vt, g)
        gc = matmul(matmul(v, inner), vt)
        return ((gc + _swap_last(gc)) * 0.5,)


# ---------------------------------------------------------------------------
# functional front-ends

add = Add.apply
sub = Sub.apply
mul = Mul.apply
div = Div.apply
neg = Neg.apply
square = Square.apply
sqrt = Sqrt.apply
exp = Exp.apply
tanh = Tanh.apply
cos = Cos.apply
sin = Sin.apply
matmul = MatMul.apply
sym_eigvecs = SymEigVecs.apply


def clip(a, lo: float, hi: float) -> Tensor:
    return Clip.apply(a, lo=lo, hi=hi)


def sum_(a, axis=None, keepdims=False) -> Tensor:
    return Sum.apply(a, axis=axis, keepdims=keepdims)


def mean(a, axis=None, keepdims=False) -> Tensor:
    return Mean.apply(a, axis=axis, keepdims=keepdims)


def sum_to(a: Tensor, shape) -> Tensor:
    if tuple(a.shape) == tuple(shape):
        return a
    return SumTo.apply(a, shape=tuple(shape))


def broadcast_to(a: Tensor, shape) -> Tensor:
    if tuple(a.shape) == tuple(shape):
        return a
    return BroadcastTo.apply(a, shape=tuple(shape))


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    if tuple(a.shape) == tuple(shape):
        return a
    return Reshape.apply(a, shape=tuple(shape))


def transpose(a, axes=None) -> Tensor:
    return Transpose.apply(a, axes=None if axes is None else tuple(axes))


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    return Concat.apply(*tensors, axis=axis)


def take(a, index) -> Tensor:
    return Take.apply(a, index=index)


def untake(a, index, shape) -> Tensor:
    return Untake.apply(a, index=index, shape=tuple(shape))


def gather(a, index: IndexMap) -> Tensor:
    return Gather.apply(a, index=index)


def scatter_add(a, index: IndexMap) -> Tensor:
    return ScatterAdd.apply(a, index=index)


OPS: dict[str, type[Function]] = {
    fn.name: fn
    for fn in (
        Add, Sub, Mul, Div, Neg, Square, Sqrt, Exp, Tanh, Cos, Sin, Clip,
        MatMul, Sum, Mean, SumTo, BroadcastTo, Reshape, Transpose, Concat,
        Take, Untake, Gather, ScatterAdd, SymEigVecs,
    )
}


def record(op: str, *inputs, **kwargs) -> Tensor:
    """Apply the op registered under ``op`` to ``inputs``."""
    try:
        fn = OPS[op]
    except KeyError:
        raise ValueError(f"unknown op {op!r}; known ops: {sorted(OPS)}") from None
    return fn.apply(*inputs, **kwargs)


# ---------------------------------------------------------------------------
# backward pass


def _collect(output: Tensor) -> list[Tensor]:
    seen = {output.uid}
    stack = [output]
    found = []
    while stack:
        t = stack.pop()
        found.append(t)
        if t.node is None:
            continue
        for inp in t.node.inputs:
            if inp.requires_grad and inp.uid not in seen:
                seen.add(inp.uid)
                stack.append(inp)
    found.sort(key=lambda t: t.uid, reverse=True)
    return found


def gradient(
    output: Tensor, wrt: Sequence[Tensor], create_graph: bool = False
) -> list[Tensor]:
    """Return ``d output / d t`` for each ``t`` in ``wrt``.

    ``output`` must hold exactly one element. Tensors in ``wrt`` that the
    output does not depend on get zero gradients. With ``create_graph`` the
    returned gradients are graph-linked and may be differentiated again;
    without it they are constants, and differentiating anything computed
    from them raises instead of silently returning zeros.
    """
    if not isinstance(output, Tensor):
        raise TypeError("gradient() output must be a Tensor")
    if output.size != 1:
        raise GradientError(f"gradient() needs a scalar output, got shape {output.shape}")
    if output.from_detached_grad:
        raise GradientError(
            "output depends on a gradient computed with create_graph=False; "
            "recompute that gradient with create_graph=True"
        )
    wrt = list(wrt)
    wanted = {t.uid for t in wrt}
    grads: dict[int, Tensor] = {}

    if output.requires_grad:
        order = _collect(output)
        if create_graph:
            lacking = sorted(
                {t.node.fn.name for t in order if t.node is not None and not t.node.fn.second_order}
            )
            if lacking:
                raise GradientError(
                    f"create_graph=True through ops without a second-order rule: {lacking}"
                )
        with _GradMode(create_graph):
            grads[output.uid] = Tensor(np.ones_like(output.data))
            for t in order:
                g = grads.get(t.uid)
                if g is None:
                    continue
                if t.uid not in wanted:
                    del grads[t.uid]
                node = t.node
                if node is None:
                    continue
                in_grads = node.fn.backward(node.ctx, g)
                for inp, ig in zip(node.inputs, in_grads):
                    if ig is None or not inp.requires_grad:
                        continue
                    if ig.shape != inp.shape:
                        ig = reshape(ig, inp.shape)
                    prev = grads.get(inp.uid)
                    grads[inp.uid] = ig if prev is None else add(prev, ig)

    result = []
    for t in wrt:
        g = grads.get(t.uid)
        if g is None:
            g = Tensor(np.zeros_like(t.data))
        elif not create_graph:
            g = Tensor(g.data)
        if not create_graph:
            g.from_detached_grad = True
        result.append(g)
    return result


def finite_difference_check(
    f: Callable[[Tensor], Tensor], point, h: float = 1e-5
) -> float:
    """Max over coordinates of ``|analytic - central difference| / max(1, |analytic|)``."""
    if h <= 0:
        raise ValueError("step h must be positive")
    base = np.array(point.data if isinstance(point, Tensor) else point, dtype=np.float64)
    x = Tensor(base.copy(), requires_grad=True)
    out = f(x)
    if not np.all(np.isfinite(out.data)):
        raise ValueError("f is not finite at the evaluation point")
    (analytic,) = gradient(out, [x])
    analytic = analytic.data.reshape(-1)
    flat = base.reshape(-1)
    worst = 0.0
    # gradient mode stays on: f may itself take an inner gradient
    for i in range(flat.size):
        plus = flat.copy()
        plus[i] += h
        minus = flat.copy()
        minus[i] -= h
        fp = f(Tensor(plus.reshape(base.shape))).item()
        fm = f(Tensor(minus.reshape(base.shape))).item()
        if not (math.isfinite(fp) and math.isfinite(fm)):
            raise ValueError(f"f is not finite near coordinate {i}")
        numeric = (fp - fm) / (2.0 * h)
        err = abs(analytic[i] - numeric) / max(1.0, abs(analytic[i]))
        worst = max(worst, err)
    return worst
