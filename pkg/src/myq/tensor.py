"""Minimal dense tensor engine with a reverse-mode tape.

Values are immutable ``Tensor`` objects: a shape, a flat row-major float
buffer (f32 for model inference, f64 for reference computations), and a
dtype tag.  The op set is exactly what the toy encoders need -- matmul,
batched matmul, conv1d, gelu, softmax, layernorm, adds, scalar scale,
transpose, reshape -- each with a hand-written vector-Jacobian product so
a scalar loss can be differentiated with respect to every recorded layer
output.
"""

from __future__ import annotations

import math

import numpy as np
from numpy.typing import NDArray
from scipy.special import erf as _erf

from .errors import DimensionError, UsageError

_DTYPES = {"f32": np.float32, "f64": np.float64}
_SQRT1_2 = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


class Tensor:
    """Immutable dense array: shape + flat row-major data + dtype tag."""

    __slots__ = ("shape", "data", "dtype")

    def __init__(self, data, shape=None, dtype=None):
        arr = np.asarray(data)
        if shape is None:
            shape = arr.shape if arr.ndim > 0 else (1,)
        shape = tuple(int(d) for d in shape)
        if any(d < 1 for d in shape):
            raise DimensionError(f"all dimension sizes must be >= 1, got {shape}")
        if dtype is None:
            dtype = "f32" if arr.dtype == np.float32 else "f64"
        if dtype not in _DTYPES:
            raise DimensionError(f"unknown dtype tag {dtype!r}")
        flat = np.ascontiguousarray(arr, dtype=_DTYPES[dtype]).reshape(-1)
        n = 1
        for d in shape:
            n *= d
        if flat.size != n:
            raise DimensionError(
                f"shape {shape} implies {n} elements, data has {flat.size}"
            )
        flat.setflags(write=False)
        object.__setattr__(self, "shape", shape)
        object.__setattr__(self, "data", flat)
        object.__setattr__(self, "dtype", dtype)

    def __setattr__(self, name, value):
        raise AttributeError("Tensor is immutable")

    @property
    def nd(self) -> NDArray:
        """Read-only n-dimensional view of the flat buffer."""
        return self.data.reshape(self.shape)

    @property
    def size(self) -> int:
        return self.data.size

    def astype(self, dtype: str) -> "Tensor":
        if dtype == self.dtype:
            return self
        return Tensor(self.nd, dtype=dtype)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype})"


def tensor(data, dtype="f64") -> Tensor:
    return Tensor(np.asarray(data, dtype=_DTYPES[dtype]), dtype=dtype)


def _np(x) -> NDArray:
    if isinstance(x, Tensor):
        return x.nd
    return np.asarray(x)


# ---------------------------------------------------------------------------
# Tape
# ---------------------------------------------------------------------------


class Node:
    """One recorded value: array, parents, and how to push gradients back."""

    __slots__ = ("value", "parents", "vjp", "grad")

    def __init__(self, value, parents=(), vjp=None):
        self.value = value
        self.parents = tuple(parents)
        self.vjp = vjp
        self.grad = None


class Tape:
    """Topologically ordered op recording for one forward pass.

    ``layer_outputs`` maps each recorded layer index to its output node;
    ``result`` is the node gradients are seeded at.  A tape may be
    consumed by ``backward`` exactly once.
    """

    def __init__(self):
        self.nodes: list[Node] = []
        self.layer_outputs: dict[int, Node] = {}
        self.result: Node | None = None
        self._consumed = False

    def leaf(self, x) -> Node:
        node = Node(_np(x))
        self.nodes.append(node)
        return node

    def _record(self, value, parents, vjp) -> Node:
        node = Node(value, parents, vjp)
        self.nodes.append(node)
        return node

    def mark_layer(self, index: int, node: Node) -> None:
        if index in self.layer_outputs:
            raise UsageError(f"layer {index} already has a recorded output")
        self.layer_outputs[index] = node

    def mark_result(self, node: Node) -> None:
        self.result = node


def backward(tape: Tape, loss_grad) -> dict[int, Tensor]:
    """Gradients of a scalar loss with respect to every recorded layer output.

    ``loss_grad`` is dL/d(result) and must match the result shape.  Returns
    {layer index: gradient Tensor}.  Raises UsageError if the tape was
    already consumed.
    """
    if tape._consumed:
        raise UsageError("tape already consumed by a previous backward call")
    if tape.result is None:
        raise UsageError("tape has no marked result node")
    seed = _np(loss_grad)
    if seed.shape != tape.result.value.shape:
        raise DimensionError(
            f"loss_grad shape {seed.shape} does not match result shape "
            f"{tape.result.value.shape}"
        )
    tape._consumed = True
    tape.result.grad = seed.astype(tape.result.value.dtype, copy=True)
    for node in reversed(tape.nodes):
        if node.grad is None or node.vjp is None:
            continue
        for parent, pgrad in zip(node.parents, node.vjp(node.grad)):
            if parent is None or pgrad is None:
                continue
            if parent.grad is None:
                parent.grad = pgrad
            else:
                parent.grad = parent.grad + pgrad
    out = {}
    for index, node in tape.layer_outputs.items():
        g = node.grad
        if g is None:
            g = np.zeros_like(node.value)
        out[index] = Tensor(g)
    return out


# ---------------------------------------------------------------------------
# Ops. Each has a plain numpy forward plus an optional tape recording.
# `a`/`b` arguments accept Tensor, ndarray, or Node (traced value).
# ---------------------------------------------------------------------------


def _val(x):
    return x.value if isinstance(x, Node) else _np(x)


def _nodeof(x):
    return x if isinstance(x, Node) else None


def _emit(tape, value, inputs, vjp):
    if tape is None:
        return value
    parents = [_nodeof(x) for x in inputs]
    if all(p is None for p in parents):
        return value
    return tape._record(value, parents, vjp)


def _ret(x):
    """Public return convention: Tensor out when untraced, Node when traced."""
    if isinstance(x, Node):
        return x
    return Tensor(x)


def matmul(a, b, tape: Tape | None = None):
    """Matrix product of a[m x k] and b[k x n]."""
    av, bv = _val(a), _val(b)
    if av.ndim != 2 or bv.ndim != 2 or av.shape[1] != bv.shape[0]:
        raise DimensionError(f"matmul shapes incompatible: {av.shape} x {bv.shape}")
    out = av @ bv

    def vjp(g):
        return [g @ bv.T, av.T @ g]

    return _ret(_emit(tape, out, [a, b], vjp))


def bmm(a, b, tape: Tape | None = None):
    """Batched matmul over a shared leading axis: [h,m,k] @ [h,k,n]."""
    av, bv = _val(a), _val(b)
    if (
        av.ndim != 3
        or bv.ndim != 3
        or av.shape[0] != bv.shape[0]
        or av.shape[2] != bv.shape[1]
    ):
        raise DimensionError(f"bmm shapes incompatible: {av.shape} x {bv.shape}")
    out = av @ bv

    def vjp(g):
        return [g @ bv.transpose(0, 2, 1), av.transpose(0, 2, 1) @ g]

    return _ret(_emit(tape, out, [a, b], vjp))


def conv1d(x, w, stride: int = 1, tape: Tape | None = None):
    """Valid cross-correlation of x[c_in, t] with kernels w[c_out, c_in, k]."""
    xv, wv = _val(x), _val(w)
    if xv.ndim != 2 or wv.ndim != 3:
        raise DimensionError(f"conv1d expects x[c,t], w[o,c,k]; got {xv.shape}, {wv.shape}")
    c_in, t = xv.shape
    c_out, c_w, k = wv.shape
    if c_w != c_in:
        raise DimensionError(f"conv1d channel mismatch: x has {c_in}, w has {c_w}")
    if k > t:
        raise DimensionError(f"kernel length {k} exceeds input length {t}")
    if stride < 1:
        raise DimensionError(f"stride must be positive, got {stride}")
    t_out = (t - k) // stride + 1
    cols = _im2col(xv, k, stride, t_out)  # (c_in*k, t_out)
    out = wv.reshape(c_out, c_in * k) @ cols

    def vjp(g):
        gw = (g @ cols.T).reshape(c_out, c_in, k)
        gcols = wv.reshape(c_out, c_in * k).T @ g
        gx = _col2im(gcols, xv.shape, k, stride, t_out)
        return [gx, gw]

    return _ret(_emit(tape, out, [x, w], vjp))


def _im2col(x, k, stride, t_out):
    c_in = x.shape[0]
    cols = np.empty((c_in * k, t_out), dtype=x.dtype)
    for j in range(t_out):
        cols[:, j] = x[:, j * stride : j * stride + k].reshape(-1)
    return cols


def _col2im(gcols, x_shape, k, stride, t_out):
    gx = np.zeros(x_shape, dtype=gcols.dtype)
    c_in = x_shape[0]
    for j in range(t_out):
        gx[:, j * stride : j * stride + k] += gcols[:, j].reshape(c_in, k)
    return gx


def gelu(x, tape: Tape | None = None):
    """Exact Gaussian-error-linear unit x * Phi(x) (erf form, not tanh)."""
    xv = _val(x)
    phi = 0.5 * (1.0 + _erf(xv * _SQRT1_2))
    out = (xv * phi).astype(xv.dtype)

    def vjp(g):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * xv.astype(np.float64) ** 2)
        return [(g * (phi + xv * pdf)).astype(xv.dtype)]

    return _ret(_emit(tape, out, [x], vjp))


def softmax(x, axis: int = -1, tape: Tape | None = None):
    """Max-subtracted stable softmax along ``axis``."""
    xv = _val(x)
    shifted = xv - np.max(xv, axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / np.sum(e, axis=axis, keepdims=True)

    def vjp(g):
        inner = np.sum(g * out, axis=axis, keepdims=True)
        return [(g - inner) * out]

    return _ret(_emit(tape, out, [x], vjp))


def layernorm(x, gamma, beta, eps: float = 1e-5, tape: Tape | None = None):
    """Normalize the last axis to zero mean / unit variance, then affine."""
    xv, gv, bv = _val(x), _val(gamma), _val(beta)
    if gv.shape != (xv.shape[-1],) or bv.shape != (xv.shape[-1],):
        raise DimensionError(
            f"layernorm affine params must have shape ({xv.shape[-1]},); "
            f"got gamma {gv.shape}, beta {bv.shape}"
        )
    mu = np.mean(xv, axis=-1, keepdims=True)
    var = np.var(xv, axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xv - mu) * inv
    out = (xhat * gv + bv).astype(xv.dtype)

    def vjp(g):
        n = xv.shape[-1]
        gg = g * gv
        gx = inv * (
            gg
            - np.mean(gg, axis=-1, keepdims=True)
            - xhat * np.mean(gg * xhat, axis=-1, keepdims=True)
        )
        ggamma = np.sum(g * xhat, axis=tuple(range(xv.ndim - 1)))
        gbeta = np.sum(g, axis=tuple(range(xv.ndim - 1)))
        return [gx.astype(xv.dtype), ggamma, gbeta]

    return _ret(_emit(tape, out, [x, gamma, beta], vjp))


def add(a, b, tape: Tape | None = None):
    """Elementwise sum of two same-shaped values."""
    av, bv = _val(a), _val(b)
    if av.shape != bv.shape:
        raise DimensionError(f"add shape mismatch: {av.shape} vs {bv.shape}")
    out = av + bv

    def vjp(g):
        return [g, g]

    return _ret(_emit(tape, out, [a, b], vjp))


def add_bias(x, bias, tape: Tape | None = None):
    """x[..., n] + bias[n]; the only broadcast the engine permits."""
    xv, bv = _val(x), _val(bias)
    if bv.ndim != 1 or xv.shape[-1] != bv.shape[0]:
        raise DimensionError(
            f"bias of shape {bv.shape} does not broadcast over {xv.shape}"
        )
    out = xv + bv

    def vjp(g):
        return [g, np.sum(g, axis=tuple(range(xv.ndim - 1)))]

    return _ret(_emit(tape, out, [x, bias], vjp))


def add_channel_bias(x, bias, tape: Tape | None = None):
    """x[c, ...] + bias[c]; channel-axis variant used by conv layers."""
    xv, bv = _val(x), _val(bias)
    if bv.ndim != 1 or xv.shape[0] != bv.shape[0]:
        raise DimensionError(
            f"channel bias of shape {bv.shape} does not broadcast over {xv.shape}"
        )
    out = xv + bv.reshape((-1,) + (1,) * (xv.ndim - 1))

    def vjp(g):
        return [g, np.sum(g, axis=tuple(range(1, xv.ndim)))]

    return _ret(_emit(tape, out, [x, bias], vjp))


def mul(a, b, tape: Tape | None = None):
    """Elementwise product; either operand may be a python scalar."""
    av, bv = _val(a), _val(b)
    if not np.isscalar(av) and not np.isscalar(bv) and av.shape != bv.shape:
        if av.shape != () and bv.shape != ():
            raise DimensionError(f"mul shape mismatch: {av.shape} vs {bv.shape}")
    out = av * bv

    def vjp(g):
        ga = g * bv
        gb = g * av
        if hasattr(av, "shape") and av.shape == () or np.isscalar(av):
            ga = np.sum(ga)
        if hasattr(bv, "shape") and bv.shape == () or np.isscalar(bv):
            gb = np.sum(gb)
        return [ga, gb]

    return _ret(_emit(tape, out, [a, b], vjp))


def scale(x, c: float, tape: Tape | None = None):
    """x * c for a python float constant c."""
    xv = _val(x)
    out = xv * c

    def vjp(g):
        return [g * c]

    return _ret(_emit(tape, out, [x], vjp))


def transpose(x, axes=None, tape: Tape | None = None):
    xv = _val(x)
    if axes is None:
        axes = tuple(reversed(range(xv.ndim)))
    axes = tuple(axes)
    out = np.transpose(xv, axes)
    inverse = tuple(np.argsort(axes))

    def vjp(g):
        return [np.transpose(g, inverse)]

    return _ret(_emit(tape, out, [x], vjp))


def reshape(x, shape, tape: Tape | None = None):
    xv = _val(x)
    out = xv.reshape(shape)
    orig = xv.shape

    def vjp(g):
        return [g.reshape(orig)]

    return _ret(_emit(tape, out, [x], vjp))
