"""Dense tensors with tape-based reverse-mode differentiation.

Only the operators needed by the pruning networks are provided: convolution
(through an explicit unfold + matmul), batch normalization, ReLU, max/average
pooling, channel gather, linear layers and softmax cross-entropy.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

DTYPE = np.float32


class ShapeError(ValueError):
    """Raised when operand shapes disagree; names the offending axes."""


class TapeError(RuntimeError):
    """Raised when backward is run on a consumed or missing tape."""


_grad_enabled = True


class no_grad:
    """Context manager that disables tape recording."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev


@dataclass(eq=False)
class OpRecord:
    """One recorded operation on the tape."""

    kind: str
    inputs: tuple["Tensor", ...]
    backward: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]
    saved: dict = field(default_factory=dict)
    consumed: bool = False


class Tensor:
    """An n-d float32 array with an optional gradient buffer.

    ``data`` is a contiguous row-major numpy array; ``grad`` has the same
    shape once a backward pass has reached this tensor.
    """

    def __init__(self, data, requires_grad: bool = False, dtype=DTYPE):
        # np.array(copy=True) is C-contiguous and, unlike ascontiguousarray, keeps 0-d scalars 0-d
        self.data: np.ndarray = np.array(data, dtype=dtype, copy=True, order="C")
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self._ctx: Optional[OpRecord] = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def __len__(self):
        return self.data.shape[0]

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _not_scalar(self)

    def is_finite(self) -> bool:
        return bool(np.isfinite(self.data).all())

    def zero_grad(self):
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    # arithmetic sugar used by losses and tests
    def __add__(self, other):
        return add(self, _wrap(other, self))

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, _wrap(other, self))

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, _wrap(-1.0, self))

    def __sub__(self, other):
        return add(self, -_wrap(other, self))

    def sum(self) -> "Tensor":
        return tsum(self)

    def abs(self) -> "Tensor":
        return tabs(self)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def backward(self):
        """Populate ``grad`` on every tensor reachable from this scalar."""
        if self.data.size != 1:
            raise TapeError(f"backward needs a scalar, got shape {self.shape}")
        if self._ctx is None:
            raise TapeError("no recorded operations reach this tensor")
        if self._ctx.consumed:
            raise TapeError("tape already consumed; run the forward pass again")

        order: list[Tensor] = []
        seen: set[int] = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            if node._ctx is not None:
                for parent in node._ctx.inputs:
                    if id(parent) not in seen:
                        stack.append((parent, False))

        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            ctx = node._ctx
            if ctx is None:
                if node.requires_grad:
                    node.grad = g if node.grad is None else node.grad + g
                continue
            if node.requires_grad:
                node.grad = g if node.grad is None else node.grad + g
            in_grads = ctx.backward(g)
            ctx.consumed = True
            for parent, pg in zip(ctx.inputs, in_grads):
                if pg is None or not _needs_grad(parent):
                    continue
                pg = pg.astype(parent.data.dtype, copy=False)
                prev = grads.get(id(parent))
                grads[id(parent)] = pg if prev is None else prev + pg


def _not_scalar(t: Tensor):
    raise ShapeError(f"item() needs a single element, got shape {t.shape}")


def _wrap(x, like: Tensor) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x, dtype=like.data.dtype)


def _needs_grad(t: Tensor) -> bool:
    return t.requires_grad or t._ctx is not None


def _result(data: np.ndarray, kind: str, inputs: tuple[Tensor, ...], backward, **saved) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = np.require(data, requirements="C")
    out.grad = None
    out.requires_grad = False
    out._ctx = None
    if _grad_enabled and any(_needs_grad(t) for t in inputs):
        out._ctx = OpRecord(kind, inputs, backward, saved)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------- elementwise

def add(a: Tensor, b: Tensor) -> Tensor:
    out = a.data + b.data
    return _result(out, "add", (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = a.data * b.data
    return _result(out, "mul", (a, b),
                   lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def tsum(a: Tensor) -> Tensor:
    out = np.asarray(a.data.sum(), dtype=a.data.dtype)
    return _result(out, "sum", (a,), lambda g: (np.broadcast_to(g, a.shape).copy(),))


def tabs(a: Tensor) -> Tensor:
    # subgradient sign(0) = 0
    return _result(np.abs(a.data), "abs", (a,), lambda g: (g * np.sign(a.data),))


def reshape(a: Tensor, shape) -> Tensor:
    out = a.data.reshape(shape)
    return _result(out, "reshape", (a,), lambda g: (g.reshape(a.shape),))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    # maximum (not where) so NaN propagates and divergence stays detectable
    return _result(np.maximum(x.data, 0).astype(x.data.dtype), "relu", (x,),
                   lambda g: (g * mask,))


def channel_select(x: Tensor, index: np.ndarray) -> Tensor:
    """Gather channels ``index`` along axis 1."""
    index = np.asarray(index, dtype=np.int64)
    out = x.data[:, index]

    def backward(g):
        gx = np.zeros_like(x.data)
        gx[:, index] = g
        return (gx,)

    return _result(out, "channel_select", (x,), backward)


# ---------------------------------------------------------------- convolution

def conv_output_size(size: int, k: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - k) // stride + 1


def im2col(x: np.ndarray, k: int, stride: int, padding: int) -> np.ndarray:
    """Unfold ``(N, C, H, W)`` into ``(N, C*k*k, Ho*Wo)``.

    Row ``c*k*k + i*k + j`` holds input channel ``c`` at kernel offset
    ``(i, j)``, so each channel owns a contiguous block of ``k*k`` rows.
    """
    n, c, h, w = x.shape
    ho = conv_output_size(h, k, stride, padding)
    wo = conv_output_size(w, k, stride, padding)
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    cols = np.empty((n, c, k, k, ho, wo), dtype=x.dtype)
    for i in range(k):
        for j in range(k):
            cols[:, :, i, j] = x[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride]
    return cols.reshape(n, c * k * k, ho * wo)


def col2im(cols: np.ndarray, shape: tuple[int, ...], k: int, stride: int, padding: int) -> np.ndarray:
    """Adjoint of :func:`im2col` (overlapping entries are summed)."""
    n, c, h, w = shape
    ho = conv_output_size(h, k, stride, padding)
    wo = conv_output_size(w, k, stride, padding)
    cols = cols.reshape(n, c, k, k, ho, wo)
    out = np.zeros((n, c, h + 2 * padding, w + 2 * padding), dtype=cols.dtype)
    for i in range(k):
        for j in range(k):
            out[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += cols[:, :, i, j]
    if padding:
        out = out[:, :, padding:padding + h, padding:padding + w]
    return out


def unfold_weight(weight: np.ndarray) -> np.ndarray:
    """Reshape a ``(C_out, C_in, k, k)`` kernel to ``(C_out, C_in*k*k)``."""
    if weight.ndim != 4:
        raise ShapeError(f"unfold expects a 4-d kernel, got {weight.ndim}-d shape {weight.shape}")
    return weight.reshape(weight.shape[0], -1)


def fold_weight(matrix: np.ndarray, c_in: int, k: int) -> np.ndarray:
    """Inverse of :func:`unfold_weight`."""
    if matrix.ndim != 2 or matrix.shape[1] != c_in * k * k:
        raise ShapeError(f"cannot fold {matrix.shape} into C_in={c_in}, k={k}")
    return matrix.reshape(matrix.shape[0], c_in, k, k)


def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """2-d cross-correlation over ``(N, C, H, W)`` or ``(C, H, W)`` input."""
    squeeze = x.ndim == 3
    if squeeze:
        x = reshape(x, (1,) + x.shape)
    if x.ndim != 4:
        raise ShapeError(f"conv2d input must be 3-d or 4-d, got shape {x.shape}")
    if weight.ndim != 4:
        raise ShapeError(f"conv2d weight must be 4-d, got shape {weight.shape}")
    c_out, c_in, k, k2 = weight.shape
    if k != k2:
        raise ShapeError(f"kernel must be square, got axes 2,3 = {k}, {k2}")
    if x.shape[1] != c_in:
        raise ShapeError(f"input channel axis 1 has {x.shape[1]} but weight axis 1 expects {c_in}")
    if bias is not None and bias.shape != (c_out,):
        raise ShapeError(f"bias axis 0 has {bias.shape} but weight axis 0 is {c_out}")
    if k < 1 or stride < 1 or padding < 0:
        raise ShapeError(f"invalid kernel={k}, stride={stride}, padding={padding}")
    n, _, h, w = x.shape
    ho = conv_output_size(h, k, stride, padding)
    wo = conv_output_size(w, k, stride, padding)
    if ho < 1 or wo < 1:
        raise ShapeError(f"spatial axes {h}x{w} too small for kernel {k} with padding {padding}")

    cols = im2col(x.data, k, stride, padding)
    wmat = unfold_weight(weight.data)
    out = np.matmul(wmat, cols)
    if bias is not None:
        out = out + bias.data[None, :, None]
    out = out.reshape(n, c_out, ho, wo)
    in_shape = x.shape

    def backward(g):
        g2 = g.reshape(n, c_out, ho * wo)
        gw = np.einsum("nol,nkl->ok", g2, cols).reshape(weight.shape)
        gcols = np.matmul(wmat.T, g2)
        gx = col2im(gcols, in_shape, k, stride, padding)
        gb = g2.sum(axis=(0, 2)) if bias is not None else None
        return (gx, gw, gb) if bias is not None else (gx, gw)

    inputs = (x, weight, bias) if bias is not None else (x, weight)
    out_t = _result(out, "conv2d", inputs, backward, in_shape=in_shape)
    if squeeze:
        out_t = reshape(out_t, out_t.shape[1:])
    return out_t


def conv2d_reference(x: np.ndarray, weight: np.ndarray, bias=None, stride: int = 1, padding: int = 0) -> np.ndarray:
    """Direct nested-loop convolution, kept as an oracle."""
    n, c_in, h, w = x.shape
    c_out, _, k, _ = weight.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding))).astype(np.float64)
    ho = conv_output_size(h, k, stride, padding)
    wo = conv_output_size(w, k, stride, padding)
    out = np.zeros((n, c_out, ho, wo))
    for b in range(n):
        for o in range(c_out):
            for y in range(ho):
                for z in range(wo):
                    acc = 0.0
                    for c in range(c_in):
                        for i in range(k):
                            for j in range(k):
                                acc += xp[b, c, y * stride + i, z * stride + j] * weight[o, c, i, j]
                    out[b, o, y, z] = acc + (bias[o] if bias is not None else 0.0)
    return out


# ---------------------------------------------------------------- batch norm

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: np.ndarray,
               running_var: np.ndarray, training: bool, eps: float = BN_EPS,
               momentum: float = BN_MOMENTUM) -> Tensor:
    """Per-channel batch normalization over axis 1.

    In training mode the running statistics are updated in place.
    """
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"gamma/beta length {gamma.shape[0]}/{beta.shape[0]} != channel axis 1 size {c}")
    axes = (0,) + tuple(range(2, x.ndim))
    bshape = (1, c) + (1,) * (x.ndim - 2)
    if training:
        m = x.data.size // c
        if m == 0:
            raise ShapeError("batch_norm in train mode needs a non-empty batch")
        mean = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        running_mean *= 1 - momentum
        running_mean += momentum * mean
        unbiased = var * m / max(m - 1, 1)
        running_var *= 1 - momentum
        running_var += momentum * unbiased
    else:
        mean, var = running_mean, running_var
    inv_std = (1.0 / np.sqrt(var + eps)).astype(x.data.dtype)
    xhat = (x.data - mean.reshape(bshape)) * inv_std.reshape(bshape)
    out = gamma.data.reshape(bshape) * xhat + beta.data.reshape(bshape)

    def backward(g):
        ggamma = (g * xhat).sum(axis=axes)
        gbeta = g.sum(axis=axes)
        gxhat = g * gamma.data.reshape(bshape)
        if training:
            m = x.data.size // c
            gx = (inv_std.reshape(bshape) / m) * (
                m * gxhat
                - gxhat.sum(axis=axes).reshape(bshape)
                - xhat * (gxhat * xhat).sum(axis=axes).reshape(bshape)
            )
        else:
            gx = gxhat * inv_std.reshape(bshape)
        return gx, ggamma, gbeta

    return _result(out, "batch_norm", (x, gamma, beta), backward,
                   mean=mean, var=var, training=training)


# ---------------------------------------------------------------- pooling

def max_pool2d(x: Tensor, kernel: int = 2, stride: Optional[int] = None) -> Tensor:
    stride = stride or kernel
    if x.ndim != 4:
        raise ShapeError(f"max_pool2d expects (N, C, H, W), got shape {x.shape}")
    n, c, h, w = x.shape
    ho = conv_output_size(h, kernel, stride, 0)
    wo = conv_output_size(w, kernel, stride, 0)
    if ho < 1 or wo < 1:
        raise ShapeError(f"spatial axes {h}x{w} smaller than pooling kernel {kernel}")
    cols = im2col(x.data.reshape(n * c, 1, h, w), kernel, stride, 0)  # (n*c, k*k, L)
    arg = cols.argmax(axis=1)
    out = np.take_along_axis(cols, arg[:, None, :], axis=1).reshape(n, c, ho, wo)

    def backward(g):
        gcols = np.zeros_like(cols)
        np.put_along_axis(gcols, arg[:, None, :], g.reshape(n * c, 1, ho * wo), axis=1)
        return (col2im(gcols, (n * c, 1, h, w), kernel, stride, 0).reshape(n, c, h, w),)

    return _result(out, "max_pool2d", (x,), backward)


def global_avg_pool(x: Tensor) -> Tensor:
    """``(N, C, H, W) -> (N, C)``."""
    if x.ndim != 4:
        raise ShapeError(f"global_avg_pool expects (N, C, H, W), got shape {x.shape}")
    n, c, h, w = x.shape
    out = x.data.mean(axis=(2, 3))
    return _result(out, "global_avg_pool", (x,),
                   lambda g: (np.broadcast_to(g[:, :, None, None] / (h * w), x.shape).copy(),))


# ---------------------------------------------------------------- dense / loss

def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """``x @ weight.T + bias`` with ``weight`` of shape ``(out, in)``."""
    if x.ndim != 2 or weight.ndim != 2:
        raise ShapeError(f"linear expects 2-d input and weight, got {x.shape} and {weight.shape}")
    if x.shape[1] != weight.shape[1]:
        raise ShapeError(f"input axis 1 has {x.shape[1]} but weight axis 1 expects {weight.shape[1]}")
    out = x.data @ weight.data.T
    if bias is not None:
        out = out + bias.data

    def backward(g):
        grads = [g @ weight.data, g.T @ x.data]
        if bias is not None:
            grads.append(g.sum(axis=0))
        return grads

    inputs = (x, weight, bias) if bias is not None else (x, weight)
    return _result(out, "linear", inputs, backward)


def softmax_cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean cross-entropy of integer ``labels`` under ``softmax(logits)``."""
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError(f"logits {logits.shape} and labels {labels.shape} disagree on axis 0")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - logsum
    n = logits.shape[0]
    loss = np.asarray(-logp[np.arange(n), labels].mean(), dtype=logits.data.dtype)

    def backward(g):
        p = np.exp(logp)
        p[np.arange(n), labels] -= 1.0
        return (p * (g / n),)

    return _result(loss, "softmax_cross_entropy", (logits,), backward)
