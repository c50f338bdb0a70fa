"""Dense n-d tensors with reverse-mode automatic differentiation.

The graph is recorded eagerly: every operation whose inputs require
gradients attaches a backward closure to its output. ``backward(loss)``
topologically sorts the recorded nodes and accumulates gradients into
``.grad``. Only the operations needed by the episodic training losses are
provided (elementwise arithmetic, reductions, matmul, convolution,
pooling, quarter-turn rotation, gather/concat, a symmetric
positive-definite linear solve, and a stop-gradient barrier).

Double precision is the default; pass float32 arrays to opt into single
precision (dtype follows the data).
"""

from __future__ import annotations

import struct

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.linalg import LinAlgError, cho_factor, cho_solve


class SolverError(RuntimeError):
    """Raised when a linear solve is malformed or the factorization fails."""


class Tensor:
    """A numpy array plus the bookkeeping needed for reverse-mode autodiff."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False):
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None

    # -- inspection ------------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self):
        return self.data.item()

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # -- autodiff --------------------------------------------------------

    def backward(self):
        """Populate ``.grad`` on every reachable tensor that requires one.

        The receiver must be a scalar (the loss). Each recorded node is
        visited exactly once, in reverse topological order.
        """
        if self.data.size != 1:
            raise ValueError(
                f"backward requires a scalar loss, got shape {self.shape}"
            )
        topo = []
        visited = set()
        stack = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in visited:
                    stack.append((parent, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None:
                node._backward()

    # -- operators -------------------------------------------------------

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
        return mul(self, -1.0)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return tensor_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tensor_mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def sqrt(self):
        return sqrt(self)


def as_tensor(x, dtype=None):
    """Wrap ``x`` in a constant Tensor unless it already is one."""
    if isinstance(x, Tensor):
        return x
    t = Tensor(x)
    if dtype is not None and t.data.dtype != dtype:
        t.data = t.data.astype(dtype)
    return t


def backward(loss):
    """Module-level alias for ``loss.backward()``."""
    loss.backward()


def _accumulate(t, g):
    if not t.requires_grad:
        return
    if g.shape != t.data.shape:
        raise AssertionError(
            f"gradient shape {g.shape} does not match value shape {t.data.shape}"
        )
    if g.dtype != t.data.dtype:
        raise AssertionError(
            f"gradient dtype {g.dtype} does not match value dtype {t.data.dtype}"
        )
    t.grad = g if t.grad is None else t.grad + g


def _from_op(data, parents, make_backward):
    """Build an op output; the backward closure is attached only if needed."""
    out = Tensor(data)
    live = tuple(p for p in parents if p.requires_grad)
    if live:
        out.requires_grad = True
        out._parents = live
        out._backward = make_backward(out)
    return out


def _unbroadcast(g, shape):
    """Sum ``g`` down to ``shape`` (reverse of numpy broadcasting)."""
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    squeezed = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if squeezed:
        g = g.sum(axis=squeezed, keepdims=True)
    return g


def _coerce_pair(a, b):
    if isinstance(a, Tensor) and isinstance(b, Tensor):
        if a.data.dtype != b.data.dtype:
            raise TypeError(f"mixed tensor dtypes: {a.data.dtype} vs {b.data.dtype}")
        return a, b
    if isinstance(a, Tensor):
        return a, as_tensor(b, dtype=a.data.dtype)
    if isinstance(b, Tensor):
        return as_tensor(a, dtype=b.data.dtype), b
    return as_tensor(a), as_tensor(b)


# -- elementwise arithmetic ----------------------------------------------


def add(a, b):
    a, b = _coerce_pair(a, b)
    out_data = a.data + b.data

    def make(out):
        def _bw():
            _accumulate(a, _unbroadcast(out.grad, a.shape))
            _accumulate(b, _unbroadcast(out.grad, b.shape))
        return _bw

    return _from_op(out_data, (a, b), make)


def sub(a, b):
    a, b = _coerce_pair(a, b)
    out_data = a.data - b.data

    def make(out):
        def _bw():
            _accumulate(a, _unbroadcast(out.grad, a.shape))
            _accumulate(b, _unbroadcast(-out.grad, b.shape))
        return _bw

    return _from_op(out_data, (a, b), make)


def mul(a, b):
    a, b = _coerce_pair(a, b)
    out_data = a.data * b.data

    def make(out):
        def _bw():
            _accumulate(a, _unbroadcast(out.grad * b.data, a.shape))
            _accumulate(b, _unbroadcast(out.grad * a.data, b.shape))
        return _bw

    return _from_op(out_data, (a, b), make)


def div(a, b):
    a, b = _coerce_pair(a, b)
    out_data = a.data / b.data

    def make(out):
        def _bw():
            _accumulate(a, _unbroadcast(out.grad / b.data, a.shape))
            _accumulate(
                b, _unbroadcast(-out.grad * a.data / (b.data * b.data), b.shape)
            )
        return _bw

    return _from_op(out_data, (a, b), make)


def power(a, exponent):
    a = as_tensor(a)
    if not isinstance(exponent, (int, float)):
        raise TypeError("power supports scalar exponents only")
    p = float(exponent)
    out_data = a.data ** p

    def make(out):
        def _bw():
            _accumulate(a, out.grad * p * a.data ** (p - 1.0))
        return _bw

    return _from_op(out_data, (a,), make)


def exp(a):
    a = as_tensor(a)
    out_data = np.exp(a.data)

    def make(out):
        def _bw():
            _accumulate(a, out.grad * out.data)
        return _bw

    return _from_op(out_data, (a,), make)


def log(a):
    a = as_tensor(a)
    out_data = np.log(a.data)

    def make(out):
        def _bw():
            _accumulate(a, out.grad / a.data)
        return _bw

    return _from_op(out_data, (a,), make)


def sqrt(a):
    a = as_tensor(a)
    out_data = np.sqrt(a.data)

    def make(out):
        def _bw():
            _accumulate(a, out.grad / (2.0 * out.data))
        return _bw

    return _from_op(out_data, (a,), make)


def leaky_relu(a, slope=0.1):
    a = as_tensor(a)
    out_data = np.where(a.data > 0, a.data, slope * a.data)

    def make(out):
        def _bw():
            one = a.data.dtype.type(1.0)
            down = a.data.dtype.type(slope)
            _accumulate(a, out.grad * np.where(a.data > 0, one, down))
        return _bw

    return _from_op(out_data, (a,), make)


def stop_grad(a):
    """Identity in the forward pass; blocks all gradient flow backward."""
    a = as_tensor(a)
    return Tensor(a.data)


# -- reductions and shape ops --------------------------------------------


def tensor_sum(a, axis=None, keepdims=False):
    a = as_tensor(a)
    out_data = a.data.sum(axis=axis, keepdims=keepdims)

    def make(out):
        def _bw():
            g = out.grad
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            _accumulate(a, np.broadcast_to(g, a.shape).copy())
        return _bw

    return _from_op(out_data, (a,), make)


def tensor_mean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    out_data = a.data.mean(axis=axis, keepdims=keepdims)
    if axis is None:
        count = a.data.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        count = 1
        for ax in axes:
            count *= a.shape[ax]

    def make(out):
        def _bw():
            g = out.grad
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            _accumulate(a, np.broadcast_to(g, a.shape) / count)
        return _bw

    return _from_op(out_data, (a,), make)


def reshape(a, shape):
    a = as_tensor(a)
    out_data = a.data.reshape(shape)

    def make(out):
        def _bw():
            _accumulate(a, out.grad.reshape(a.shape))
        return _bw

    return _from_op(out_data, (a,), make)


def transpose(a, axes):
    a = as_tensor(a)
    axes = tuple(axes)
    out_data = np.ascontiguousarray(a.data.transpose(axes))
    inverse = tuple(np.argsort(axes))

    def make(out):
        def _bw():
            _accumulate(a, np.ascontiguousarray(out.grad.transpose(inverse)))
        return _bw

    return _from_op(out_data, (a,), make)


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def make(out):
        def _bw():
            for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
                index = [slice(None)] * out.grad.ndim
                index[axis] = slice(lo, hi)
                _accumulate(t, out.grad[tuple(index)])
        return _bw

    return _from_op(out_data, tuple(tensors), make)


def stack(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    out_data = np.stack([t.data for t in tensors], axis=axis)

    def make(out):
        def _bw():
            for i, t in enumerate(tensors):
                _accumulate(t, np.ascontiguousarray(np.take(out.grad, i, axis=axis)))
        return _bw

    return _from_op(out_data, tuple(tensors), make)


def take(a, indices, axis=0):
    """Gather rows along the leading axis; backward scatter-adds."""
    if axis != 0:
        raise ValueError("take supports axis=0 only")
    a = as_tensor(a)
    idx = np.asarray(indices, dtype=np.intp)
    out_data = np.take(a.data, idx, axis=0)

    def make(out):
        def _bw():
            g = np.zeros_like(a.data)
            np.add.at(g, idx, out.grad)
            _accumulate(a, g)
        return _bw

    return _from_op(out_data, (a,), make)


def rot90(a, turns, axes):
    """Quarter-turn rotation (counterclockwise) in the given axis plane."""
    a = as_tensor(a)
    k = turns % 4
    if k in (1, 3) and a.shape[axes[0]] != a.shape[axes[1]]:
        raise ValueError(
            f"quarter-turn rotation requires square axes, got "
            f"{a.shape[axes[0]]}x{a.shape[axes[1]]}"
        )
    out_data = np.ascontiguousarray(np.rot90(a.data, k, axes=axes))

    def make(out):
        def _bw():
            _accumulate(a, np.ascontiguousarray(np.rot90(out.grad, -k, axes=axes)))
        return _bw

    return _from_op(out_data, (a,), make)


# -- linear algebra ------------------------------------------------------


def matmul(a, b):
    a, b = _coerce_pair(a, b)
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError(f"matmul expects 2-d operands, got {a.shape} @ {b.shape}")
    out_data = a.data @ b.data

    def make(out):
        def _bw():
            _accumulate(a, out.grad @ b.data.T)
            _accumulate(b, a.data.T @ out.grad)
        return _bw

    return _from_op(out_data, (a, b), make)


def solve_spd(a, b):
    """Solve ``A X = B`` for symmetric positive-definite ``A``.

    A is factorized once (Cholesky) and the factorization is reused by the
    backward pass: with G the output gradient, ``dB = A^-1 G`` and
    ``dA = -dB X^T``. Raises :class:`SolverError` on a non-square A, a row
    mismatch, or a factorization failure (non-positive-definite input).
    """
    a, b = _coerce_pair(a, b)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise SolverError(f"solve_spd: A must be a square matrix, got shape {a.shape}")
    n = a.shape[0]
    if b.ndim not in (1, 2) or b.shape[0] != n:
        raise SolverError(
            f"solve_spd: B must have {n} rows to match A, got shape {b.shape}"
        )
    try:
        factor = cho_factor(a.data, lower=True)
    except LinAlgError as err:
        raise SolverError(f"solve_spd: factorization of {n}x{n} A failed: {err}") from err
    x = cho_solve(factor, b.data)

    def make(out):
        def _bw():
            gb = cho_solve(factor, out.grad)
            _accumulate(b, gb)
            if a.requires_grad:
                if x.ndim == 1:
                    _accumulate(a, -np.outer(gb, x))
                else:
                    _accumulate(a, -(gb @ x.T))
        return _bw

    return _from_op(x, (a, b), make)


# -- convolution and pooling ---------------------------------------------


def conv2d(x, w):
    """Same-padding stride-1 convolution.

    ``x`` is (batch, in_channels, h, w); ``w`` is (filters, in_channels,
    k, k) with odd k. Implemented as an im2col matmul; the patch matrix is
    kept for the backward pass.
    """
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 4 or w.ndim != 4:
        raise ValueError(f"conv2d expects 4-d input and weight, got {x.shape}, {w.shape}")
    bsz, cin, h, wd = x.shape
    nf, cw, kh, kw = w.shape
    if cin != cw:
        raise ValueError(f"conv2d channel mismatch: input {cin}, weight {cw}")
    if kh != kw or kh % 2 == 0:
        raise ValueError(f"conv2d requires odd square kernels, got {kh}x{kw}")
    pad = kh // 2
    if pad:
        padded = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    else:
        padded = x.data
    windows = sliding_window_view(padded, (kh, kw), axis=(2, 3))
    cols = np.ascontiguousarray(windows.transpose(0, 2, 3, 1, 4, 5))
    cols = cols.reshape(bsz * h * wd, cin * kh * kw)
    wmat = w.data.reshape(nf, cin * kh * kw)
    out_data = (cols @ wmat.T).reshape(bsz, h, wd, nf).transpose(0, 3, 1, 2)
    out_data = np.ascontiguousarray(out_data)

    def make(out):
        def _bw():
            g = out.grad.transpose(0, 2, 3, 1).reshape(bsz * h * wd, nf)
            if w.requires_grad:
                _accumulate(w, (g.T @ cols).reshape(nf, cin, kh, kw))
            if x.requires_grad:
                dcols = (g @ wmat).reshape(bsz, h, wd, cin, kh, kw)
                dpad = np.zeros_like(padded)
                for i in range(kh):
                    for j in range(kw):
                        dpad[:, :, i:i + h, j:j + wd] += dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
                if pad:
                    dpad = dpad[:, :, pad:pad + h, pad:pad + wd]
                _accumulate(x, dpad)
        return _bw

    return _from_op(out_data, (x, w), make)


def maxpool2d(x):
    """2x2 max pooling with stride 2.

    Odd trailing rows/columns are dropped (floor semantics, as in the usual
    deep-learning libraries); ties route the gradient to the first max.
    """
    x = as_tensor(x)
    if x.ndim != 4:
        raise ValueError(f"maxpool2d expects a 4-d input, got {x.shape}")
    bsz, c, h, w = x.shape
    if h < 2 or w < 2:
        raise ValueError(f"maxpool2d needs at least 2x2 spatial dims, got {h}x{w}")
    oh, ow = h // 2, w // 2
    cropped = x.data[:, :, : 2 * oh, : 2 * ow]
    grouped = cropped.reshape(bsz, c, oh, 2, ow, 2)
    grouped = np.ascontiguousarray(grouped.transpose(0, 1, 2, 4, 3, 5))
    grouped = grouped.reshape(bsz, c, oh, ow, 4)
    idx = grouped.argmax(axis=-1)
    out_data = np.take_along_axis(grouped, idx[..., None], axis=-1)[..., 0]

    def make(out):
        def _bw():
            dg = np.zeros_like(grouped)
            np.put_along_axis(dg, idx[..., None], out.grad[..., None], axis=-1)
            dc = dg.reshape(bsz, c, oh, ow, 2, 2)
            dc = dc.transpose(0, 1, 2, 4, 3, 5).reshape(bsz, c, 2 * oh, 2 * ow)
            if (h, w) == (2 * oh, 2 * ow):
                dx = dc
            else:
                dx = np.zeros_like(x.data)
                dx[:, :, : 2 * oh, : 2 * ow] = dc
            _accumulate(x, dx)
        return _bw

    return _from_op(out_data, (x,), make)


# -- tensor blob file format ---------------------------------------------

_BLOB_MAGIC = b"ESPT"
_BLOB_VERSION = 1


def write_tensor_blob(path, array):
    """Write an array as a tensor blob.

    Layout: magic "ESPT", format version u16, rank u8, dims u32
    little-endian, then the values as little-endian float64.
    """
    arr = np.ascontiguousarray(array, dtype="<f8")
    with open(path, "wb") as fh:
        fh.write(_BLOB_MAGIC)
        fh.write(struct.pack("<HB", _BLOB_VERSION, arr.ndim))
        fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        fh.write(arr.tobytes())


def read_tensor_blob(path):
    """Read a tensor blob written by :func:`write_tensor_blob`."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != _BLOB_MAGIC:
        raise ValueError(f"{path}: not a tensor blob (bad magic)")
    version, rank = struct.unpack_from("<HB", raw, 4)
    if version != _BLOB_VERSION:
        raise ValueError(f"{path}: unsupported blob version {version}")
    dims = struct.unpack_from(f"<{rank}I", raw, 7)
    offset = 7 + 4 * rank
    count = int(np.prod(dims)) if rank else 1
    expected = offset + 8 * count
    if len(raw) != expected:
        raise ValueError(
            f"{path}: blob size {len(raw)} does not match header ({expected} expected)"
        )
    values = np.frombuffer(raw, dtype="<f8", count=count, offset=offset)
    return values.reshape(dims).copy()
