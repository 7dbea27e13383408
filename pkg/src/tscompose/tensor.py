"""Minimal reverse-mode automatic differentiation on numpy arrays.

Every value is a float64 ndarray wrapped in a Tensor.  Ops build a DAG of
closures; Tensor.backward() walks it in reverse topological order and
accumulates vector-Jacobian products into .grad.  numpy supplies the dense
kernels (BLAS matmul, FFT, ufuncs); all differentiation logic lives here.
"""

from __future__ import annotations

import contextlib
import threading
from typing import Iterable, Sequence

import numpy as np


class ShapeError(ValueError):
    """Operand shapes incompatible for the requested op."""


class DomainError(ArithmeticError):
    """Numeric domain violation (division by zero, log of nonpositive, overflow)."""


class GraphError(RuntimeError):
    """Backward pass encountered a malformed compute graph."""


# Grad mode is per-thread so concurrent workers cannot switch each other off.
_GRAD_MODE = threading.local()


def _grad_enabled() -> bool:
    return getattr(_GRAD_MODE, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable graph construction inside the block (inference fast path)."""
    prev = _grad_enabled()
    _GRAD_MODE.enabled = False
    try:
        yield
    finally:
        _GRAD_MODE.enabled = prev


def _as_array(value) -> np.ndarray:
    arr = np.asarray(value)
    if arr.dtype == object or np.iscomplexobj(arr):
        raise TypeError(f"unsupported dtype {arr.dtype!r}; tensors are real float64")
    return arr.astype(np.float64, copy=False)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum `grad` down to `shape` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_backward", "_parents", "_op")

    def __init__(self, data, requires_grad: bool = False, _parents: tuple = (), _op: str = ""):
        self.data = _as_array(data)
        self.grad = None
        self.requires_grad = bool(requires_grad) and _grad_enabled()
        self._backward = None
        self._parents = _parents if self.requires_grad else ()
        self._op = _op

    # -- basic introspection ------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self._op or 'leaf'}, requires_grad={self.requires_grad})"

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    # -- graph plumbing -----------------------------------------------------
    @staticmethod
    def _result(data, parents: Sequence["Tensor"], op: str) -> "Tensor":
        req = _grad_enabled() and any(p.requires_grad for p in parents)
        out = Tensor(data, requires_grad=req, _parents=tuple(parents) if req else (), _op=op)
        return out

    def _accumulate(self, grad: np.ndarray):
        if grad.shape != self.shape:
            raise ShapeError(f"gradient shape {grad.shape} != tensor shape {self.shape}")
        if self.grad is None:
            self.grad = grad
        else:
            self.grad = self.grad + grad

    def backward(self, gradient=None):
        """Accumulate d(self)/d(leaf) into every reachable requires_grad leaf."""
        if not self.requires_grad:
            raise GraphError("backward() on a tensor that does not require grad")
        if gradient is None:
            if self.size != 1:
                raise ShapeError("backward() without gradient requires a scalar output")
            gradient = np.ones_like(self.data)
        else:
            gradient = _as_array(gradient)
            if gradient.shape != self.shape:
                raise ShapeError("seed gradient shape mismatch")

        order = self._toposort()
        self.grad = gradient if self.grad is None else self.grad + gradient
        for node in order:
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    def _toposort(self) -> list:
        WHITE, GRAY, BLACK = 0, 1, 2
        state: dict[int, int] = {}
        order: list[Tensor] = []
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, processed = stack.pop()
            nid = id(node)
            if processed:
                state[nid] = BLACK
                order.append(node)
                continue
            st = state.get(nid, WHITE)
            if st == BLACK:
                continue
            if st == GRAY:
                raise GraphError("cycle detected in compute graph")
            state[nid] = GRAY
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and state.get(id(p), WHITE) == WHITE:
                    stack.append((p, False))
                elif state.get(id(p)) == GRAY:
                    raise GraphError("cycle detected in compute graph")
        order.reverse()
        return order

    # -- elementwise arithmetic ----------------------------------------------
    def __add__(self, other):
        other = other if isinstance(other, Tensor) else Tensor(other)
        out = self._result(self.data + other.data, (self, other), "add")
        if out.requires_grad:
            def _bw(g, a=self, b=other):
                if a.requires_grad:
                    a._accumulate(_unbroadcast(g, a.shape))
                if b.requires_grad:
                    b._accumulate(_unbroadcast(g, b.shape))
            out._backward = _bw
        return out

    __radd__ = __add__

    def __neg__(self):
        out = self._result(-self.data, (self,), "neg")
        if out.requires_grad:
            out._backward = lambda g, a=self: a._accumulate(-g)
        return out

    def __sub__(self, other):
        other = other if isinstance(other, Tensor) else Tensor(other)
        out = self._result(self.data - other.data, (self, other), "sub")
        if out.requires_grad:
            def _bw(g, a=self, b=other):
                if a.requires_grad:
                    a._accumulate(_unbroadcast(g, a.shape))
                if b.requires_grad:
                    b._accumulate(_unbroadcast(-g, b.shape))
            out._backward = _bw
        return out

    def __rsub__(self, other):
        return Tensor(other) - self

    def __mul__(self, other):
        other = other if isinstance(other, Tensor) else Tensor(other)
        out = self._result(self.data * other.data, (self, other), "mul")
        if out.requires_grad:
            def _bw(g, a=self, b=other):
                if a.requires_grad:
                    a._accumulate(_unbroadcast(g * b.data, a.shape))
                if b.requires_grad:
                    b._accumulate(_unbroadcast(g * a.data, b.shape))
            out._backward = _bw
        return out

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = other if isinstance(other, Tensor) else Tensor(other)
        if np.any(other.data == 0.0):
            raise DomainError("division by zero operand")
        out = self._result(self.data / other.data, (self, other), "div")
        if out.requires_grad:
            def _bw(g, a=self, b=other):
                if a.requires_grad:
                    a._accumulate(_unbroadcast(g / b.data, a.shape))
                if b.requires_grad:
                    b._accumulate(_unbroadcast(-g * a.data / (b.data * b.data), b.shape))
            out._backward = _bw
        return out

    def __rtruediv__(self, other):
        return Tensor(other) / self

    def __pow__(self, exponent):
        if not isinstance(exponent, (int, float)):
            raise TypeError("only scalar exponents are supported")
        if exponent != int(exponent) and np.any(self.data < 0):
            raise DomainError("fractional power of negative base")
        out = self._result(self.data ** exponent, (self,), "pow")
        if out.requires_grad:
            def _bw(g, a=self, p=float(exponent)):
                a._accumulate(g * p * a.data ** (p - 1.0))
            out._backward = _bw
        return out

    # -- elementwise functions -------------------------------------------------
    def exp(self):
        with np.errstate(over="ignore"):
            data = np.exp(self.data)
        if not np.all(np.isfinite(data)):
            raise DomainError("exp overflow")
        out = self._result(data, (self,), "exp")
        if out.requires_grad:
            out._backward = lambda g, a=self, d=data: a._accumulate(g * d)
        return out

    def log(self):
        if np.any(self.data <= 0.0):
            raise DomainError("log of nonpositive value")
        out = self._result(np.log(self.data), (self,), "log")
        if out.requires_grad:
            out._backward = lambda g, a=self: a._accumulate(g / a.data)
        return out

    def sqrt(self):
        if np.any(self.data < 0.0):
            raise DomainError("sqrt of negative value")
        data = np.sqrt(self.data)
        out = self._result(data, (self,), "sqrt")
        if out.requires_grad:
            out._backward = lambda g, a=self, d=data: a._accumulate(g * 0.5 / d)
        return out

    def abs(self):
        out = self._result(np.abs(self.data), (self,), "abs")
        if out.requires_grad:
            out._backward = lambda g, a=self: a._accumulate(g * np.sign(a.data))
        return out

    def tanh(self):
        data = np.tanh(self.data)
        out = self._result(data, (self,), "tanh")
        if out.requires_grad:
            out._backward = lambda g, a=self, d=data: a._accumulate(g * (1.0 - d * d))
        return out

    def sigmoid(self):
        data = 1.0 / (1.0 + np.exp(-np.clip(self.data, -500.0, 500.0)))
        out = self._result(data, (self,), "sigmoid")
        if out.requires_grad:
            out._backward = lambda g, a=self, d=data: a._accumulate(g * d * (1.0 - d))
        return out

    def relu(self):
        out = self._result(np.maximum(self.data, 0.0), (self,), "relu")
        if out.requires_grad:
            out._backward = lambda g, a=self: a._accumulate(g * (a.data > 0.0))
        return out

    def gelu(self):
        # tanh approximation; kept as one primitive with an analytic derivative
        c = np.sqrt(2.0 / np.pi)
        x = self.data
        inner = c * (x + 0.044715 * x * x * x)
        t = np.tanh(inner)
        data = 0.5 * x * (1.0 + t)
        out = self._result(data, (self,), "gelu")
        if out.requires_grad:
            def _bw(g, a=self, t=t, x=x, c=c):
                d_inner = c * (1.0 + 3 * 0.044715 * x * x)
                a._accumulate(g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * d_inner))
            out._backward = _bw
        return out

    # -- reductions --------------------------------------------------------------
    def sum(self, axis=None, keepdims: bool = False):
        data = self.data.sum(axis=axis, keepdims=keepdims)
        out = self._result(data, (self,), "sum")
        if out.requires_grad:
            def _bw(g, a=self, axis=axis, keepdims=keepdims):
                if axis is None:
                    a._accumulate(np.broadcast_to(g, a.shape).copy())
                    return
                if not keepdims:
                    g = np.expand_dims(g, axis)
                a._accumulate(np.broadcast_to(g, a.shape).copy())
            out._backward = _bw
        return out

    def mean(self, axis=None, keepdims: bool = False):
        if axis is None:
            count = self.size
        elif isinstance(axis, tuple):
            count = int(np.prod([self.shape[a] for a in axis]))
        else:
            count = self.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / count)

    # -- linear algebra ------------------------------------------------------------
    def __matmul__(self, other):
        other = other if isinstance(other, Tensor) else Tensor(other)
        if self.ndim < 2 or other.ndim < 2:
            raise ShapeError("matmul requires operands with ndim >= 2")
        if self.shape[-1] != other.shape[-2]:
            raise ShapeError(f"matmul inner dims differ: {self.shape} @ {other.shape}")
        out = self._result(self.data @ other.data, (self, other), "matmul")
        if out.requires_grad:
            def _bw(g, a=self, b=other):
                if a.requires_grad:
                    a._accumulate(_unbroadcast(g @ b.data.swapaxes(-1, -2), a.shape))
                if b.requires_grad:
                    b._accumulate(_unbroadcast(a.data.swapaxes(-1, -2) @ g, b.shape))
            out._backward = _bw
        return out

    def softmax(self, axis: int = -1):
        z = self.data - self.data.max(axis=axis, keepdims=True)
        e = np.exp(z)
        data = e / e.sum(axis=axis, keepdims=True)
        out = self._result(data, (self,), "softmax")
        if out.requires_grad:
            def _bw(g, a=self, s=data, axis=axis):
                a._accumulate((g - (g * s).sum(axis=axis, keepdims=True)) * s)
            out._backward = _bw
        return out

    # -- shape manipulation -----------------------------------------------------------
    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        data = self.data.reshape(shape)
        out = self._result(data, (self,), "reshape")
        if out.requires_grad:
            out._backward = lambda g, a=self: a._accumulate(g.reshape(a.shape))
        return out

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        if not axes:
            axes = tuple(reversed(range(self.ndim)))
        data = self.data.transpose(axes)
        out = self._result(data, (self,), "transpose")
        if out.requires_grad:
            inv = tuple(np.argsort(axes))
            out._backward = lambda g, a=self, inv=inv: a._accumulate(g.transpose(inv))
        return out

    def swapaxes(self, a: int, b: int):
        axes = list(range(self.ndim))
        axes[a], axes[b] = axes[b], axes[a]
        return self.transpose(*axes)

    def narrow(self, axis: int, start: int, length: int):
        """Slice `length` entries starting at `start` along `axis`."""
        if start < 0 or start + length > self.shape[axis]:
            raise ShapeError(f"narrow out of range on axis {axis}: {start}+{length} > {self.shape[axis]}")
        index = [slice(None)] * self.ndim
        index[axis] = slice(start, start + length)
        index = tuple(index)
        out = self._result(self.data[index], (self,), "narrow")
        if out.requires_grad:
            def _bw(g, a=self, index=index):
                full = np.zeros(a.shape)
                full[index] = g
                a._accumulate(full)
            out._backward = _bw
        return out

    def pad_axis(self, axis: int, before: int, after: int):
        """Zero-pad along one axis."""
        widths = [(0, 0)] * self.ndim
        widths[axis] = (before, after)
        out = self._result(np.pad(self.data, widths), (self,), "pad")
        if out.requires_grad:
            index = [slice(None)] * self.ndim
            index[axis] = slice(before, before + self.shape[axis])
            index = tuple(index)
            out._backward = lambda g, a=self, index=index: a._accumulate(g[index])
        return out


# -- multi-input / indexed ops (module-level functions) ---------------------------

def concat(tensors: Iterable[Tensor], axis: int = 0) -> Tensor:
    tensors = [t if isinstance(t, Tensor) else Tensor(t) for t in tensors]
    data = np.concatenate([t.data for t in tensors], axis=axis)
    out = Tensor._result(data, tensors, "concat")
    if out.requires_grad:
        sizes = [t.shape[axis] for t in tensors]
        def _bw(g, parts=tensors, sizes=sizes, axis=axis):
            offset = 0
            for t, n in zip(parts, sizes):
                if t.requires_grad:
                    index = [slice(None)] * g.ndim
                    index[axis] = slice(offset, offset + n)
                    t._accumulate(g[tuple(index)])
                offset += n
        out._backward = _bw
    return out


def stack(tensors: Iterable[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    expanded = []
    for t in tensors:
        shape = list(t.shape)
        shape.insert(axis if axis >= 0 else t.ndim + 1 + axis, 1)
        expanded.append(t.reshape(*shape))
    return concat(expanded, axis=axis)


def take_rows(table: Tensor, indices: np.ndarray) -> Tensor:
    """Gather rows of a 2-D table by integer index (embedding lookup)."""
    indices = np.asarray(indices)
    if table.ndim != 2:
        raise ShapeError("take_rows expects a 2-D table")
    out = Tensor._result(table.data[indices], (table,), "take_rows")
    if out.requires_grad:
        def _bw(g, a=table, idx=indices):
            full = np.zeros(a.shape)
            np.add.at(full, idx.reshape(-1), g.reshape(-1, a.shape[1]))
            a._accumulate(full)
        out._backward = _bw
    return out


def take_along_axis(x: Tensor, indices: np.ndarray, axis: int) -> Tensor:
    """Differentiable np.take_along_axis; `indices` must match x.ndim."""
    indices = np.asarray(indices)
    if indices.ndim != x.ndim:
        raise ShapeError("indices must have the same ndim as the source tensor")
    out = Tensor._result(np.take_along_axis(x.data, indices, axis=axis), (x,), "take_along_axis")
    if out.requires_grad:
        def _bw(g, a=x, idx=indices, axis=axis):
            full = np.zeros(a.shape)
            grids = list(np.indices(idx.shape, sparse=False))
            grids[axis] = idx
            np.add.at(full, tuple(grids), g)
            a._accumulate(full)
        out._backward = _bw
    return out


# -- real FFT pair ----------------------------------------------------------------

def _adjoint_halfspectrum(g_complex: np.ndarray, n: int, axis: int) -> np.ndarray:
    """x-gradient of rfft: Re( sum_k G_k e^{+2*pi*i*k*t/n} ), no hermitian doubling."""
    widths = [(0, 0)] * g_complex.ndim
    widths[axis] = (0, n - g_complex.shape[axis])
    padded = np.pad(g_complex, widths)
    return np.fft.ifft(padded, axis=axis).real * n


def rfft(x: Tensor, axis: int = -1) -> tuple[Tensor, Tensor]:
    """Unnormalized forward DFT of a real signal -> (real part, imaginary part)."""
    spec = np.fft.rfft(x.data, axis=axis)
    re = Tensor._result(np.ascontiguousarray(spec.real), (x,), "rfft_re")
    im = Tensor._result(np.ascontiguousarray(spec.imag), (x,), "rfft_im")
    n = x.shape[axis]
    if re.requires_grad:
        re._backward = lambda g, a=x, n=n, axis=axis: a._accumulate(
            _adjoint_halfspectrum(g.astype(complex), n, axis))
    if im.requires_grad:
        im._backward = lambda g, a=x, n=n, axis=axis: a._accumulate(
            _adjoint_halfspectrum(1j * g, n, axis))
    return re, im


def irfft(re: Tensor, im: Tensor, n: int, axis: int = -1) -> Tensor:
    """Inverse of rfft with the 1/n normalization, returning a length-n real signal."""
    re = re if isinstance(re, Tensor) else Tensor(re)
    im = im if isinstance(im, Tensor) else Tensor(im)
    if re.shape != im.shape:
        raise ShapeError("rfft pair parts must share a shape")
    k = re.shape[axis]
    if k != n // 2 + 1:
        raise ShapeError(f"half-spectrum length {k} does not match n={n}")
    data = np.fft.irfft(re.data + 1j * im.data, n=n, axis=axis)
    out = Tensor._result(data, (re, im), "irfft")
    if out.requires_grad:
        # weights: DC once, interior bins mirrored twice, Nyquist (even n) once
        w_shape = [1] * re.ndim
        w_shape[axis] = k
        w = np.full(k, 2.0)
        w[0] = 1.0
        if n % 2 == 0:
            w[-1] = 1.0
        w = w.reshape(w_shape)

        def _bw(g, a=re, b=im, w=w, n=n, axis=axis):
            spec = np.fft.rfft(g, axis=axis)
            if a.requires_grad:
                a._accumulate(w / n * spec.real)
            if b.requires_grad:
                gim = w / n * spec.imag
                # imaginary parts of DC (and Nyquist for even n) never affect the output
                index = [slice(None)] * gim.ndim
                index[axis] = 0
                gim[tuple(index)] = 0.0
                if n % 2 == 0:
                    index[axis] = gim.shape[axis] - 1
                    gim[tuple(index)] = 0.0
                b._accumulate(gim)
        out._backward = _bw
    return out


# -- parameter helpers --------------------------------------------------------------

def parameter(data) -> Tensor:
    return Tensor(data, requires_grad=True)


def global_grad_norm(params: Iterable[Tensor]) -> float:
    total = 0.0
    for p in params:
        if p.grad is not None:
            total += float(np.sum(p.grad * p.grad))
    return float(np.sqrt(total))


def clip_grad_norm(params: Iterable[Tensor], max_norm: float) -> float:
    """Scale gradients in place so their global L2 norm is at most max_norm."""
    params = list(params)
    norm = global_grad_norm(params)
    if norm > max_norm and norm > 0.0:
        scale = max_norm / norm
        for p in params:
            if p.grad is not None:
                p.grad = p.grad * scale
    return norm


def elementwise(op: str, a: Tensor, b: Tensor | None = None) -> Tensor:
    """Dispatch elementwise ops by tag (thin convenience over the methods)."""
    unary = {
        "neg": lambda x: -x, "exp": Tensor.exp, "log": Tensor.log, "sqrt": Tensor.sqrt,
        "abs": Tensor.abs, "tanh": Tensor.tanh, "sigmoid": Tensor.sigmoid,
        "relu": Tensor.relu, "gelu": Tensor.gelu,
    }
    binary = {
        "add": Tensor.__add__, "sub": Tensor.__sub__,
        "mul": Tensor.__mul__, "div": Tensor.__truediv__,
    }
    if op in unary:
        if b is not None:
            raise TypeError(f"{op} is unary")
        return unary[op](a)
    if op in binary:
        if b is None:
            raise TypeError(f"{op} is binary")
        return binary[op](a, b)
    raise KeyError(f"unknown elementwise op {op!r}")
