"""Dense float64 tensors plus the neural-net primitives the mini detector needs.

Every operation runs eagerly on numpy arrays. When a :class:`Tape` is active
(see :func:`trace`) each primitive also records itself, so a scalar loss can be
differentiated with exact reverse-mode gradients via :meth:`Tape.backward`.
Replaying a tape recomputes every recorded output and checks it bitwise, which
doubles as a determinism test.
"""
from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np


class DimensionError(ValueError):
    """Shape mismatch between tensors; the message names the offending axis."""


class TapeError(RuntimeError):
    """Misuse of the tape, e.g. differentiating a value that was never recorded."""


def _as_f64(values) -> np.ndarray:
    # note: ascontiguousarray would promote 0-d scalars to shape (1,)
    return np.asarray(values, dtype=np.float64, order="C")


class Tensor:
    """Immutable-by-convention dense array of 64-bit reals, row-major."""

    __slots__ = ("data",)

    def __init__(self, data):
        self.data = _as_f64(data)

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape})"


class Parameter(Tensor):
    """A tensor slot that optimizers and `backward` may treat as trainable."""

    __slots__ = ("name", "trainable")

    def __init__(self, data, name: str = "", trainable: bool = True):
        super().__init__(data)
        self.name = name
        self.trainable = trainable

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.data.shape}, trainable={self.trainable})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class BatchNormLayer:
    """Per-channel batch normalization state: scale, shift and running statistics."""

    channels: int
    gamma: Parameter
    beta: Parameter
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.1
    epsilon: float = 1e-5

    @classmethod
    def create(cls, channels: int, momentum: float = 0.1, epsilon: float = 1e-5,
               name: str = "bn") -> "BatchNormLayer":
        if channels < 1:
            raise ValueError("channels must be positive")
        if not 0.0 <= momentum <= 1.0:
            raise ValueError("momentum must lie in [0, 1]")
        if epsilon <= 0.0:
            raise ValueError("epsilon must be positive")
        return cls(
            channels=channels,
            gamma=Parameter(np.ones(channels), name=f"{name}.gamma"),
            beta=Parameter(np.zeros(channels), name=f"{name}.beta"),
            running_mean=np.zeros(channels),
            running_var=np.ones(channels),
            momentum=momentum,
            epsilon=epsilon,
        )


# --------------------------------------------------------------------------
# Tape machinery
# --------------------------------------------------------------------------

@dataclass
class TapeEntry:
    name: str
    inputs: tuple
    output: Tensor
    backward_fn: Callable[[np.ndarray], tuple]
    forward_fn: Callable[..., np.ndarray]


@dataclass
class Tape:
    """Ordered trace of executed primitives; backward walks it in reverse."""

    entries: list = field(default_factory=list)

    def backward(self, loss: Tensor) -> dict:
        """Reverse-mode gradients of a recorded scalar w.r.t. trainable Parameters."""
        if not isinstance(loss, Tensor):
            raise TapeError("loss must be a Tensor")
        if loss.data.shape != ():
            raise TapeError(f"loss must be scalar, got shape {loss.data.shape}")
        recorded = {id(e.output) for e in self.entries}
        if id(loss) not in recorded:
            raise TapeError("loss is not an output recorded on this tape")

        grads: dict[int, np.ndarray] = {id(loss): np.ones((), dtype=np.float64)}
        holder: dict[int, Tensor] = {id(loss): loss}
        for entry in reversed(self.entries):
            gout = grads.get(id(entry.output))
            if gout is None:
                continue
            in_grads = entry.backward_fn(gout)
            for tensor, grad in zip(entry.inputs, in_grads):
                if grad is None:
                    continue
                key = id(tensor)
                if key in grads:
                    grads[key] = grads[key] + grad
                else:
                    grads[key] = grad
                holder[key] = tensor
        return {
            t: grads[key]
            for key, t in holder.items()
            if isinstance(t, Parameter) and t.trainable
        }

    def replay(self) -> None:
        """Re-run every recorded op; raise if any output is not bitwise identical."""
        for entry in self.entries:
            redone = entry.forward_fn(*(t.data for t in entry.inputs))
            if not np.array_equal(redone, entry.output.data):
                raise TapeError(f"replay mismatch in op {entry.name!r}")


_tls = threading.local()


def _active_tape() -> Tape | None:
    return getattr(_tls, "tape", None)


class trace:
    """Context manager activating a fresh tape for the current thread."""

    def __enter__(self) -> Tape:
        if _active_tape() is not None:
            raise TapeError("traces do not nest")
        _tls.tape = Tape()
        return _tls.tape

    def __exit__(self, *exc) -> None:
        _tls.tape = None


def _record(name, inputs, output, backward_fn, forward_fn) -> None:
    tape = _active_tape()
    if tape is not None:
        tape.entries.append(TapeEntry(name, tuple(inputs), output, backward_fn, forward_fn))


def backward(tape: Tape, loss: Tensor) -> dict:
    """Module-level alias for :meth:`Tape.backward`."""
    return tape.backward(loss)


# --------------------------------------------------------------------------
# Primitives
# --------------------------------------------------------------------------

def relu(x) -> Tensor:
    x = as_tensor(x)
    out = Tensor(np.maximum(x.data, 0.0))
    mask = x.data > 0.0

    def bwd(g, mask=mask):
        return (g * mask,)

    _record("relu", (x,), out, bwd, lambda xd: np.maximum(xd, 0.0))
    return out


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    s = 1.0 / (1.0 + np.exp(-x.data))
    out = Tensor(s)

    def bwd(g, s=s):
        return (g * s * (1.0 - s),)

    _record("sigmoid", (x,), out, bwd, lambda xd: 1.0 / (1.0 + np.exp(-xd)))
    return out


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise DimensionError(f"add: shapes differ {a.shape} vs {b.shape}")
    out = Tensor(a.data + b.data)
    _record("add", (a, b), out, lambda g: (g, g), lambda ad, bd: ad + bd)
    return out


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise DimensionError(f"mul: shapes differ {a.shape} vs {b.shape}")
    out = Tensor(a.data * b.data)

    def bwd(g, ad=a.data, bd=b.data):
        return (g * bd, g * ad)

    _record("mul", (a, b), out, bwd, lambda ad, bd: ad * bd)
    return out


def scale(x, c: float) -> Tensor:
    x = as_tensor(x)
    c = float(c)
    out = Tensor(x.data * c)
    _record("scale", (x,), out, lambda g: (g * c,), lambda xd: xd * c)
    return out


def reshape(x, shape: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    shape = tuple(shape)
    out = Tensor(x.data.reshape(shape))
    in_shape = x.shape
    _record("reshape", (x,), out,
            lambda g: (g.reshape(in_shape),),
            lambda xd: xd.reshape(shape))
    return out


def transpose(x, axes: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out = Tensor(np.ascontiguousarray(x.data.transpose(axes)))
    _record("transpose", (x,), out,
            lambda g: (g.transpose(inv),),
            lambda xd: np.ascontiguousarray(xd.transpose(axes)))
    return out


def take(x, indices) -> Tensor:
    """Gather along axis 0 with integer indices (1-D or row gather)."""
    x = as_tensor(x)
    idx = np.asarray(indices, dtype=np.intp).copy()
    out = Tensor(x.data[idx])
    in_shape = x.shape

    def bwd(g, idx=idx, in_shape=in_shape):
        gx = np.zeros(in_shape, dtype=np.float64)
        np.add.at(gx, idx, g)
        return (gx,)

    _record("take", (x,), out, bwd, lambda xd: xd[idx])
    return out


def slice_cols(x, start: int, stop: int) -> Tensor:
    x = as_tensor(x)
    if x.data.ndim != 2:
        raise DimensionError(f"slice_cols expects a matrix, got shape {x.shape}")
    out = Tensor(x.data[:, start:stop])
    in_shape = x.shape

    def bwd(g, in_shape=in_shape, start=start, stop=stop):
        gx = np.zeros(in_shape, dtype=np.float64)
        gx[:, start:stop] = g
        return (gx,)

    _record("slice_cols", (x,), out, bwd, lambda xd: xd[:, start:stop])
    return out


def sum_axis0(x) -> Tensor:
    x = as_tensor(x)
    out = Tensor(x.data.sum(axis=0))
    n = x.shape[0]

    def bwd(g, n=n):
        return (np.broadcast_to(g, (n,) + g.shape).copy(),)

    _record("sum_axis0", (x,), out, bwd, lambda xd: xd.sum(axis=0))
    return out


def sum_all(x) -> Tensor:
    x = as_tensor(x)
    out = Tensor(x.data.sum())
    in_shape = x.shape

    def bwd(g, in_shape=in_shape):
        return (np.full(in_shape, float(g), dtype=np.float64),)

    _record("sum_all", (x,), out, bwd, lambda xd: xd.sum())
    return out


def dense(x, weights, bias) -> Tensor:
    """Affine map: ``x @ weights + bias`` for a [batch, in] input."""
    x, w, b = as_tensor(x), as_tensor(weights), as_tensor(bias)
    if x.data.ndim != 2 or w.data.ndim != 2:
        raise DimensionError("dense expects 2-D input and weights")
    if x.shape[1] != w.shape[0]:
        raise DimensionError(
            f"dense: input feature axis {x.shape[1]} != weight rows {w.shape[0]}")
    if b.shape != (w.shape[1],):
        raise DimensionError(f"dense: bias axis {b.shape} != weight cols ({w.shape[1]},)")
    out = Tensor(x.data @ w.data + b.data)

    def bwd(g, xd=x.data, wd=w.data):
        return (g @ wd.T, xd.T @ g, g.sum(axis=0))

    _record("dense", (x, w, b), out, bwd, lambda xd, wd, bd: xd @ wd + bd)
    return out


def _conv2d_forward(xd, wd, bd, stride, padding):
    n, c, h, w = xd.shape
    f, _, kh, kw = wd.shape
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    xp = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else xd
    acc = np.zeros((n, ho, wo, f), dtype=np.float64)
    for i in range(kh):
        for j in range(kw):
            xs = xp[:, :, i:i + ho * stride:stride, j:j + wo * stride:stride]
            acc += xs.transpose(0, 2, 3, 1) @ wd[:, :, i, j].T
    out = acc.transpose(0, 3, 1, 2) + bd[None, :, None, None]
    return np.ascontiguousarray(out), xp


def conv2d(x, weights, bias, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation over an [N, C, H, W] input with odd square kernels."""
    x, w, b = as_tensor(x), as_tensor(weights), as_tensor(bias)
    if x.data.ndim != 4:
        raise DimensionError(f"conv2d: input must be 4-D [N,C,H,W], got {x.shape}")
    if w.data.ndim != 4:
        raise DimensionError(f"conv2d: weights must be 4-D [F,C,kH,kW], got {w.shape}")
    n, c, h, wdim = x.shape
    f, cw, kh, kw = w.shape
    if c != cw:
        raise DimensionError(f"conv2d: channel axis mismatch, input has {c}, weights expect {cw}")
    if b.shape != (f,):
        raise DimensionError(f"conv2d: bias axis {b.shape} != filter count ({f},)")
    if kh % 2 == 0 or kw % 2 == 0:
        raise DimensionError(f"conv2d: kernel axes must be odd, got {kh}x{kw}")
    if (h + 2 * padding - kh) % stride or (wdim + 2 * padding - kw) % stride:
        raise DimensionError(
            f"conv2d: spatial axes ({h},{wdim}) with padding {padding}, stride {stride} "
            f"do not tile the {kh}x{kw} kernel")

    out_data, xp = _conv2d_forward(x.data, w.data, b.data, stride, padding)
    out = Tensor(out_data)
    ho, wo = out_data.shape[2], out_data.shape[3]

    def bwd(g, xp=xp, wd=w.data, shape_in=x.shape):
        gacc = g.transpose(0, 2, 3, 1)
        gb = g.sum(axis=(0, 2, 3))
        gw = np.zeros_like(wd)
        gxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                xs = xp[:, :, i:i + ho * stride:stride, j:j + wo * stride:stride]
                gw[:, :, i, j] = np.tensordot(gacc, xs, axes=([0, 1, 2], [0, 2, 3]))
                gxs = gacc @ wd[:, :, i, j]
                gxp[:, :, i:i + ho * stride:stride, j:j + wo * stride:stride] += \
                    gxs.transpose(0, 3, 1, 2)
        if padding:
            gx = gxp[:, :, padding:padding + shape_in[2], padding:padding + shape_in[3]]
        else:
            gx = gxp
        return (gx, gw, gb)

    _record("conv2d", (x, w, b), out, bwd,
            lambda xd, wd, bd: _conv2d_forward(xd, wd, bd, stride, padding)[0])
    return out


def maxpool2(x) -> Tensor:
    """2x2 max pooling with stride 2; spatial axes must be even."""
    x = as_tensor(x)
    if x.data.ndim != 4:
        raise DimensionError(f"maxpool2: input must be 4-D, got {x.shape}")
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise DimensionError(f"maxpool2: spatial axes ({h},{w}) must be even")
    h2, w2 = h // 2, w // 2

    def fwd(xd):
        windows = xd.reshape(n, c, h2, 2, w2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h2, w2, 4)
        return windows.max(axis=-1)

    windows = x.data.reshape(n, c, h2, 2, w2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h2, w2, 4)
    argmax = windows.argmax(axis=-1)
    out = Tensor(np.take_along_axis(windows, argmax[..., None], axis=-1)[..., 0])

    def bwd(g, argmax=argmax):
        gwin = np.zeros((n, c, h2, w2, 4), dtype=np.float64)
        np.put_along_axis(gwin, argmax[..., None], g[..., None], axis=-1)
        return (gwin.reshape(n, c, h2, w2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w),)

    _record("maxpool2", (x,), out, bwd, fwd)
    return out


def batchnorm_forward(layer: BatchNormLayer, x, mode: str):
    """Normalize per channel and apply the layer's scale/shift.

    ``adapt`` mode normalizes with the mean/population-variance of the current
    input over the (N, H, W) axes; ``eval`` mode uses the stored running
    statistics. Neither mode mutates the running statistics. Returns
    ``(output, batch_mean, batch_var)`` with the batch statistics always
    computed from the given input.
    """
    if mode not in ("adapt", "eval"):
        raise ValueError(f"unknown batchnorm mode {mode!r}")
    x = as_tensor(x)
    if x.data.ndim != 4:
        raise DimensionError(f"batchnorm: input must be 4-D, got {x.shape}")
    n, c, h, w = x.shape
    if c != layer.channels:
        raise DimensionError(
            f"batchnorm: channel axis mismatch, input has {c}, layer expects {layer.channels}")
    m = n * h * w
    if mode == "adapt" and m < 2:
        raise DimensionError("batchnorm adapt mode needs at least 2 values per channel")

    eps = layer.epsilon
    batch_mean = x.data.mean(axis=(0, 2, 3))
    batch_var = x.data.var(axis=(0, 2, 3))
    gamma, beta = layer.gamma, layer.beta

    def _normalize(xd, mu, var, gd, bd, eps=eps):
        xh = (xd - mu[None, :, None, None]) / np.sqrt(var + eps)[None, :, None, None]
        return gd[None, :, None, None] * xh + bd[None, :, None, None], xh

    if mode == "adapt":
        out_data, xhat = _normalize(x.data, batch_mean, batch_var, gamma.data, beta.data)
        inv_std = 1.0 / np.sqrt(batch_var + eps)

        def bwd(g, xhat=xhat, inv_std=inv_std, gd=gamma.data):
            ggamma = (g * xhat).sum(axis=(0, 2, 3))
            gbeta = g.sum(axis=(0, 2, 3))
            gxhat = g * gd[None, :, None, None]
            mean_g = gxhat.mean(axis=(0, 2, 3), keepdims=True)
            mean_gx = (gxhat * xhat).mean(axis=(0, 2, 3), keepdims=True)
            gx = inv_std[None, :, None, None] * (gxhat - mean_g - xhat * mean_gx)
            return (gx, ggamma, gbeta)

        def fwd(xd, gd, bd):
            mu = xd.mean(axis=(0, 2, 3))
            var = xd.var(axis=(0, 2, 3))
            return _normalize(xd, mu, var, gd, bd)[0]
    else:
        rm = layer.running_mean.copy()
        rv = layer.running_var.copy()
        out_data, xhat = _normalize(x.data, rm, rv, gamma.data, beta.data)
        inv_std = 1.0 / np.sqrt(rv + eps)

        def bwd(g, xhat=xhat, inv_std=inv_std, gd=gamma.data):
            ggamma = (g * xhat).sum(axis=(0, 2, 3))
            gbeta = g.sum(axis=(0, 2, 3))
            gx = g * (gd * inv_std)[None, :, None, None]
            return (gx, ggamma, gbeta)

        def fwd(xd, gd, bd, rm=rm, rv=rv):
            return _normalize(xd, rm, rv, gd, bd)[0]

    out = Tensor(out_data)
    _record(f"batchnorm[{mode}]", (x, gamma, beta), out, bwd, fwd)
    return out, batch_mean, batch_var


def softmax_rows(x) -> Tensor:
    """Row-wise softmax of a matrix, stabilized by max subtraction."""
    x = as_tensor(x)
    if x.data.ndim != 2:
        raise DimensionError(f"softmax_rows expects a matrix, got shape {x.shape}")

    def fwd(xd):
        z = xd - xd.max(axis=1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=1, keepdims=True)

    s = fwd(x.data)
    out = Tensor(s)

    def bwd(g, s=s):
        dot = (g * s).sum(axis=1, keepdims=True)
        return (s * (g - dot),)

    _record("softmax_rows", (x,), out, bwd, fwd)
    return out


def softmax_cols(x) -> Tensor:
    """Column-wise softmax of a matrix, stabilized by max subtraction."""
    x = as_tensor(x)
    if x.data.ndim != 2:
        raise DimensionError(f"softmax_cols expects a matrix, got shape {x.shape}")

    def fwd(xd):
        z = xd - xd.max(axis=0, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=0, keepdims=True)

    s = fwd(x.data)
    out = Tensor(s)

    def bwd(g, s=s):
        dot = (g * s).sum(axis=0, keepdims=True)
        return (s * (g - dot),)

    _record("softmax_cols", (x,), out, bwd, fwd)
    return out


def scatter_rows(values, col_indices, num_cols: int) -> Tensor:
    """Place ``values[k]`` at column ``col_indices[k]`` of row k, zero elsewhere."""
    v = as_tensor(values)
    if v.data.ndim != 1:
        raise DimensionError(f"scatter_rows expects a vector, got shape {v.shape}")
    idx = np.asarray(col_indices, dtype=np.intp).copy()
    k = v.shape[0]
    if idx.shape != (k,):
        raise DimensionError(f"scatter_rows: index axis {idx.shape} != values axis ({k},)")

    def fwd(vd, idx=idx):
        out = np.zeros((k, num_cols), dtype=np.float64)
        out[np.arange(k), idx] = vd
        return out

    out = Tensor(fwd(v.data))

    def bwd(g, idx=idx):
        return (g[np.arange(k), idx],)

    _record("scatter_rows", (v,), out, bwd, fwd)
    return out


def roi_pool(fmap, boxes: np.ndarray, out_size: int, stride: float) -> Tensor:
    """Nearest-neighbor pooling of box windows from a [1, C, H, W] feature map.

    Boxes are in image coordinates; each is resampled to ``out_size`` x
    ``out_size`` and flattened, giving a [num_boxes, C*out_size**2] matrix.
    """
    fmap = as_tensor(fmap)
    if fmap.data.ndim != 4 or fmap.shape[0] != 1:
        raise DimensionError(f"roi_pool expects [1,C,H,W] features, got {fmap.shape}")
    _, c, fh, fw = fmap.shape
    boxes = np.asarray(boxes, dtype=np.float64)
    k = boxes.shape[0]
    r = out_size

    # Feature-space gather indices: constant w.r.t. differentiation.
    x1 = boxes[:, 0] / stride
    y1 = boxes[:, 1] / stride
    bw = np.maximum(boxes[:, 2] - boxes[:, 0], 1e-6) / stride
    bh = np.maximum(boxes[:, 3] - boxes[:, 1], 1e-6) / stride
    grid = (np.arange(r) + 0.5) / r
    ix = np.clip(np.floor(x1[:, None] + grid[None, :] * bw[:, None]).astype(np.intp), 0, fw - 1)
    iy = np.clip(np.floor(y1[:, None] + grid[None, :] * bh[:, None]).astype(np.intp), 0, fh - 1)
    # Flat index into [C, H, W] per (k, c, py, px).
    cell = iy[:, :, None] * fw + ix[:, None, :]                     # [K, r, r]
    flat = (np.arange(c)[None, :, None] * (fh * fw) +
            cell.reshape(k, 1, r * r)).reshape(k, c * r * r)        # [K, C*r*r]

    def fwd(fd, flat=flat):
        return fd.reshape(-1)[flat]

    out = Tensor(fwd(fmap.data))

    def bwd(g, flat=flat, shape=fmap.shape):
        gflat = np.zeros(shape[1] * shape[2] * shape[3], dtype=np.float64)
        np.add.at(gflat, flat.ravel(), g.ravel())
        return (gflat.reshape(shape),)

    _record("roi_pool", (fmap,), out, bwd, fwd)
    return out


# --------------------------------------------------------------------------
# Loss primitives
# --------------------------------------------------------------------------

def sigmoid_bce_with_logits(logits, targets, reduction: str = "mean") -> Tensor:
    """Binary cross-entropy of logits against {0,1} targets, mean or sum reduced."""
    x = as_tensor(logits)
    t = np.asarray(targets, dtype=np.float64).copy()
    if t.shape != x.shape:
        raise DimensionError(f"bce: target axis {t.shape} != logits axis {x.shape}")
    if reduction not in ("mean", "sum"):
        raise ValueError(f"unknown reduction {reduction!r}")
    n = max(x.size, 1) if reduction == "mean" else 1

    def fwd(xd, t=t):
        per = np.maximum(xd, 0.0) - xd * t + np.log1p(np.exp(-np.abs(xd)))
        if not xd.size:
            return np.float64(0.0)
        return per.mean() if reduction == "mean" else per.sum()

    out = Tensor(fwd(x.data))

    def bwd(g, xd=x.data, t=t):
        s = 1.0 / (1.0 + np.exp(-xd))
        return (float(g) * (s - t) / n,)

    _record("sigmoid_bce", (x,), out, bwd, fwd)
    return out


def softmax_cross_entropy(logits, labels, reduction: str = "mean") -> Tensor:
    """Cross-entropy of logit rows against integer class labels, mean or sum reduced."""
    x = as_tensor(logits)
    if x.data.ndim != 2:
        raise DimensionError(f"cross_entropy expects a matrix, got {x.shape}")
    y = np.asarray(labels, dtype=np.intp).copy()
    n = x.shape[0]
    if y.shape != (n,):
        raise DimensionError(f"cross_entropy: label axis {y.shape} != rows ({n},)")
    if reduction not in ("mean", "sum"):
        raise ValueError(f"unknown reduction {reduction!r}")
    denom = n if reduction == "mean" else 1

    def fwd(xd, y=y):
        z = xd - xd.max(axis=1, keepdims=True)
        lse = np.log(np.exp(z).sum(axis=1))
        per = lse - z[np.arange(n), y]
        return per.mean() if reduction == "mean" else per.sum()

    out = Tensor(fwd(x.data))

    def bwd(g, xd=x.data, y=y):
        z = xd - xd.max(axis=1, keepdims=True)
        e = np.exp(z)
        p = e / e.sum(axis=1, keepdims=True)
        p[np.arange(n), y] -= 1.0
        return (float(g) * p / denom,)

    _record("softmax_ce", (x,), out, bwd, fwd)
    return out


BCE_CLAMP = 1e-7


def multi_hot_bce(zhat, target) -> Tensor:
    """Mean per-class binary cross-entropy of probabilities against a multi-hot vector."""
    z = as_tensor(zhat)
    t = np.asarray(target, dtype=np.float64).copy()
    if t.shape != z.shape:
        raise DimensionError(f"multi_hot_bce: target axis {t.shape} != input axis {z.shape}")
    n = max(z.size, 1)
    lo, hi = BCE_CLAMP, 1.0 - BCE_CLAMP

    def fwd(zd, t=t):
        zc = np.clip(zd, lo, hi)
        return -(t * np.log(zc) + (1.0 - t) * np.log(1.0 - zc)).mean()

    out = Tensor(fwd(z.data))

    def bwd(g, zd=z.data, t=t):
        zc = np.clip(zd, lo, hi)
        inside = (zd > lo) & (zd < hi)
        gz = (-t / zc + (1.0 - t) / (1.0 - zc)) / n
        return (float(g) * gz * inside,)

    _record("multi_hot_bce", (z,), out, bwd, fwd)
    return out


def smooth_l1(pred, target, beta: float = 1.0) -> Tensor:
    """Mean smooth-L1 (Huber) distance between prediction and a constant target."""
    x = as_tensor(pred)
    t = np.asarray(target, dtype=np.float64).copy()
    if t.shape != x.shape:
        raise DimensionError(f"smooth_l1: target axis {t.shape} != input axis {x.shape}")
    n = max(x.size, 1)

    def fwd(xd, t=t):
        d = xd - t
        a = np.abs(d)
        per = np.where(a < beta, 0.5 * d * d / beta, a - 0.5 * beta)
        return per.mean() if xd.size else np.float64(0.0)

    out = Tensor(fwd(x.data))

    def bwd(g, xd=x.data, t=t):
        d = xd - t
        return (float(g) * np.clip(d / beta, -1.0, 1.0) / n,)

    _record("smooth_l1", (x,), out, bwd, fwd)
    return out
