"""Minimal reverse-mode differentiable tensor engine.

Only the handful of operations the network needs are provided: 3D convolution
(with stride, dilation and padding), its transpose, leaky ReLU, channel
concatenation and the squared-error loss. Feature maps are rank-5 arrays laid
out as ``(batch, channels, depth, height, width)``.

Every op builds a fresh output buffer; nothing participating in a graph is
mutated in place. Gradients are accumulated by :func:`backward` in reverse
creation order, which is a valid reverse topological order (a node is always
created after its parents) and makes the accumulation order fixed for a given
graph.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import as_strided

__all__ = [
    "Tensor",
    "ConvSpec",
    "ShapeError",
    "GraphError",
    "conv_output_size",
    "conv_transpose_output_size",
    "conv3d",
    "conv_transpose3d",
    "leaky_relu",
    "concat_channels",
    "mse_loss",
    "backward",
    "grad_check",
    "grad_check_detail",
    "GradCheckResult",
]

_AXES = ("depth", "height", "width")
_ids = itertools.count()
# sign patterns of leaky ReLU calls, collected only during guarded grad checks
_patterns: list | None = None


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible; the message names the axis."""


class GraphError(RuntimeError):
    """Raised for malformed graphs (non-scalar loss, cycles)."""


class Tensor:
    """A numpy array that can take part in a reverse-mode graph.

    Parameters
    ----------
    data : array_like
        Values. Floating arrays keep their precision (float32 for training,
        float64 for gradient checks); anything else is cast to float32.
    requires_grad : bool
        Whether :func:`backward` should populate ``grad`` for this tensor.
    """

    __slots__ = ("data", "grad", "requires_grad", "op", "_parents", "_backward", "_id")

    def __init__(self, data, requires_grad: bool = False, *, op: str = "leaf",
                 parents: tuple = (), backward_fn: Callable | None = None):
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.op = op
        self._parents = parents
        self._backward = backward_fn
        self._id = next(_ids)

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def parents(self) -> tuple:
        return self._parents

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self.op!r})"


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_dtypes(*tensors: Tensor | None) -> np.dtype:
    dtypes = {t.dtype for t in tensors if t is not None}
    if len(dtypes) != 1:
        raise TypeError(f"mixed precisions in one graph: {sorted(map(str, dtypes))}")
    return dtypes.pop()


def _make(data: np.ndarray, op: str, parents: tuple, backward_fn: Callable) -> Tensor:
    if any(p is not None and p.requires_grad for p in parents):
        return Tensor(data, True, op=op, parents=parents, backward_fn=backward_fn)
    return Tensor(data, op=op)


def _triple(v) -> tuple[int, int, int]:
    if np.isscalar(v):
        return (int(v),) * 3
    t = tuple(int(i) for i in v)
    if len(t) != 3:
        raise ValueError(f"expected 3 values, got {v!r}")
    return t


@dataclass(frozen=True)
class ConvSpec:
    """Geometry of one convolution.

    For :func:`conv_transpose3d`, ``in_channels`` is the channel count of the
    tensor being upsampled and ``out_channels`` that of the result.
    """

    in_channels: int
    out_channels: int
    kernel: tuple = (3, 3, 3)
    stride: tuple = (1, 1, 1)
    dilation: tuple = (1, 1, 1)
    padding: tuple = (0, 0, 0)

    def __post_init__(self):
        for name in ("kernel", "stride", "dilation", "padding"):
            object.__setattr__(self, name, _triple(getattr(self, name)))
        if min(self.kernel) < 1 or min(self.stride) < 1 or min(self.dilation) < 1:
            raise ValueError(f"kernel, stride and dilation must be >= 1: {self}")
        if min(self.padding) < 0:
            raise ValueError(f"padding must be >= 0: {self}")

    @classmethod
    def same(cls, in_channels: int, out_channels: int, dilation: int = 1,
             kernel: int = 3) -> "ConvSpec":
        """Stride-1 spec whose output size equals the input size (odd kernels)."""
        if kernel % 2 != 1:
            raise ValueError("'same' padding needs an odd kernel")
        pad = dilation * (kernel - 1) // 2
        return cls(in_channels, out_channels, kernel, 1, dilation, pad)

    @classmethod
    def resample(cls, in_channels: int, out_channels: int, factor: int) -> "ConvSpec":
        """Non-overlapping kernel == stride == factor, no padding."""
        return cls(in_channels, out_channels, factor, factor, 1, 0)

    @property
    def taps(self) -> int:
        return self.kernel[0] * self.kernel[1] * self.kernel[2]


def conv_output_size(spec: ConvSpec, size: Sequence[int]) -> tuple[int, int, int]:
    out = []
    for ax, n in enumerate(size):
        k, s, d, p = spec.kernel[ax], spec.stride[ax], spec.dilation[ax], spec.padding[ax]
        m = (n + 2 * p - d * (k - 1) - 1) // s + 1
        if m < 1:
            raise ShapeError(f"{_AXES[ax]} axis: input {n} gives empty output for {spec}")
        out.append(m)
    return tuple(out)


def conv_transpose_output_size(spec: ConvSpec, size: Sequence[int]) -> tuple[int, int, int]:
    out = []
    for ax, n in enumerate(size):
        k, s, d, p = spec.kernel[ax], spec.stride[ax], spec.dilation[ax], spec.padding[ax]
        m = (n - 1) * s - 2 * p + d * (k - 1) + 1
        if m < 1:
            raise ShapeError(f"{_AXES[ax]} axis: input {n} gives empty output for {spec}")
        out.append(m)
    return tuple(out)


# Column blocks of roughly this many bytes stay cache-resident between the
# gather and the matmul that consumes them.
_CHUNK_BYTES = 640 * 1024
# Below this many input channels per-tap matmuls are too thin and explicit
# columns win.
_TAPWISE_MIN_CHANNELS = 4


class _Lowering:
    """im2col / col2im for one convolution geometry.

    The convolution becomes ``W2 @ cols`` with ``W2`` of shape ``(O, C*taps)``
    and ``cols`` of shape ``(C*taps, L)`` per sample. Stride-1 convolutions use
    a flat layout: every row of ``cols`` is a contiguous slice of the padded
    input, so columns can be gathered block by block and never materialised
    in full. Flat output columns include positions past the valid height and
    width; ``unflatten`` drops them and ``flatten`` zero-fills them. Strided
    convolutions (only used for resampling) build the full column matrix.
    """

    def __init__(self, spec: ConvSpec, in_size: Sequence[int]):
        self.spec = spec
        self.in_size = tuple(in_size)
        self.out_size = conv_output_size(spec, in_size)
        p = spec.padding
        self.flat = spec.stride == (1, 1, 1)
        self._flipped = None
        extra = 1 if self.flat else 0
        self.pad_width = ((0, 0), (0, 0), (p[0], p[0] + extra), (p[1], p[1]), (p[2], p[2]))
        padded = [n + 2 * q for n, q in zip(self.in_size, p)]
        padded[0] += extra
        self.padded = tuple(padded)
        Do, Ho, Wo = self.out_size
        _, Hp, Wp = self.padded
        if self.flat:
            d, k = spec.dilation, spec.kernel
            self.offsets = [a * d[0] * Hp * Wp + b * d[1] * Wp + c * d[2]
                            for a in range(k[0]) for b in range(k[1]) for c in range(k[2])]
            self.L = Do * Hp * Wp
        else:
            self.L = Do * Ho * Wo

    def _pad(self, x: np.ndarray) -> np.ndarray:
        if any(q != (0, 0) for q in self.pad_width):
            return np.pad(x, self.pad_width)
        return np.ascontiguousarray(x)

    def _blocks(self, channels: int, itemsize: int):
        step = max(128, _CHUNK_BYTES // (channels * self.spec.taps * itemsize))
        return [(j, min(j + step, self.L)) for j in range(0, self.L, step)]

    def _gather(self, xf: np.ndarray, j0: int, j1: int) -> np.ndarray:
        C = xf.shape[0]
        col = np.empty((C, len(self.offsets), j1 - j0), dtype=xf.dtype)
        for t, off in enumerate(self.offsets):
            col[:, t] = xf[:, off + j0:off + j1]
        return col.reshape(C * len(self.offsets), j1 - j0)

    def cols(self, x: np.ndarray) -> np.ndarray:
        """Full ``(N, C*taps, L)`` column matrix."""
        N, C = x.shape[:2]
        xp = self._pad(x)
        if self.flat:
            xf = xp.reshape(N, C, -1)
            return np.stack([self._gather(xf[n], 0, self.L) for n in range(N)])
        k, s, d = self.spec.kernel, self.spec.stride, self.spec.dilation
        sn, sc, sd, sh, sw = xp.strides
        view = as_strided(
            xp, (N, C) + k + self.out_size,
            (sn, sc, sd * d[0], sh * d[1], sw * d[2], sd * s[0], sh * s[1], sw * s[2]),
            writeable=False)
        return view.reshape(N, C * self.spec.taps, self.L)

    def _tap_blocks(self, channels: int, itemsize: int):
        step = max(1024, _CHUNK_BYTES // (channels * itemsize))
        return [(j, min(j + step, self.L)) for j in range(0, self.L, step)]

    def apply(self, w2: np.ndarray, x: np.ndarray) -> np.ndarray:
        """``w2 @ cols(x)`` as an ``(N, O, L)`` array.

        Stride 1 never forms columns: each block of the output accumulates one
        small matmul per kernel tap against a shifted slice of the input.
        """
        if not self.flat:
            return np.matmul(w2, self.cols(x))
        N, C = x.shape[:2]
        K = self.spec.taps
        xf = self._pad(x).reshape(N, C, -1)
        y = np.empty((N, w2.shape[0], self.L), dtype=x.dtype)
        if C < _TAPWISE_MIN_CHANNELS:
            for n in range(N):
                for j0, j1 in self._blocks(C, x.itemsize):
                    y[n, :, j0:j1] = w2 @ self._gather(xf[n], j0, j1)
            return y
        wt = np.ascontiguousarray(w2.reshape(-1, C, K).transpose(2, 0, 1))
        offs = self.offsets
        for n in range(N):
            xn = xf[n]
            for j0, j1 in self._tap_blocks(C + w2.shape[0], x.itemsize):
                acc = wt[0] @ xn[:, offs[0] + j0:offs[0] + j1]
                for t in range(1, K):
                    acc += wt[t] @ xn[:, offs[t] + j0:offs[t] + j1]
                y[n, :, j0:j1] = acc
        return y

    def outer(self, g: np.ndarray, x: np.ndarray) -> np.ndarray:
        """``sum_n g[n] @ cols(x)[n].T`` in a fixed block order."""
        if not self.flat:
            cols = self.cols(x)
            acc = g[0] @ cols[0].T
            for n in range(1, g.shape[0]):
                acc += g[n] @ cols[n].T
            return acc
        N, C = x.shape[:2]
        K = self.spec.taps
        O = g.shape[1]
        xf = self._pad(x).reshape(N, C, -1)
        if C < _TAPWISE_MIN_CHANNELS:
            acc = np.zeros((O, C * K), dtype=x.dtype)
            for n in range(N):
                for j0, j1 in self._blocks(C, x.itemsize):
                    acc += g[n, :, j0:j1] @ self._gather(xf[n], j0, j1).T
            return acc
        acc = np.zeros((K, O, C), dtype=x.dtype)
        offs = self.offsets
        for n in range(N):
            xn = xf[n]
            for j0, j1 in self._tap_blocks(C + O, x.itemsize):
                gb = g[n, :, j0:j1]
                for t in range(K):
                    acc[t] += gb @ xn[:, offs[t] + j0:offs[t] + j1].T
        return np.ascontiguousarray(acc.transpose(1, 2, 0)).reshape(O, C * K)

    def apply_adjoint(self, w2: np.ndarray, g: np.ndarray) -> np.ndarray:
        """Scatter-add ``w2.T @ g`` back onto the un-padded input grid."""
        N = g.shape[0]
        K = self.spec.taps
        C = w2.shape[1] // K
        gp = np.zeros((N, C) + self.padded, dtype=g.dtype)
        w2t = np.ascontiguousarray(w2.T)
        if self.flat:
            gf = gp.reshape(N, C, -1)
            for n in range(N):
                for j0, j1 in self._blocks(C, g.itemsize):
                    gc = (w2t @ g[n, :, j0:j1]).reshape(C, K, j1 - j0)
                    for t, off in enumerate(self.offsets):
                        gf[n, :, off + j0:off + j1] += gc[:, t]
        else:
            k, s, d = self.spec.kernel, self.spec.stride, self.spec.dilation
            Do, Ho, Wo = self.out_size
            col = np.matmul(w2t, g).reshape((N, C) + k + self.out_size)
            for a in range(k[0]):
                for b in range(k[1]):
                    for c in range(k[2]):
                        gp[:, :,
                           a * d[0]:a * d[0] + s[0] * (Do - 1) + 1:s[0],
                           b * d[1]:b * d[1] + s[1] * (Ho - 1) + 1:s[1],
                           c * d[2]:c * d[2] + s[2] * (Wo - 1) + 1:s[2]] += col[:, :, a, b, c]
        D, H, W = self.in_size
        p = self.spec.padding
        return np.ascontiguousarray(gp[:, :, p[0]:p[0] + D, p[1]:p[1] + H, p[2]:p[2] + W])

    def adjoint(self, weight: np.ndarray, g: np.ndarray) -> np.ndarray:
        """Input-gradient map: ``(N, O, *out_size)`` -> ``(N, C, *in_size)``.

        For stride 1 this is itself a convolution of ``g`` with the spatially
        flipped, channel-transposed kernel, which reuses the blocked gather.
        """
        s = self.spec
        full_pad = tuple(d * (k - 1) - p for d, k, p in zip(s.dilation, s.kernel, s.padding))
        if self.flat and min(full_pad) >= 0:
            if self._flipped is None:
                self._flipped = _Lowering(ConvSpec(s.out_channels, s.in_channels, s.kernel, 1,
                                                   s.dilation, full_pad), self.out_size)
            low = self._flipped
            wf = np.ascontiguousarray(weight[:, :, ::-1, ::-1, ::-1].swapaxes(0, 1))
            return low.unflatten(low.apply(wf.reshape(wf.shape[0], -1), g))
        return self.apply_adjoint(weight.reshape(weight.shape[0], -1), self.flatten(g))

    def unflatten(self, y: np.ndarray) -> np.ndarray:
        N, O = y.shape[:2]
        if not self.flat:
            return y.reshape((N, O) + self.out_size)
        Do, Ho, Wo = self.out_size
        y = y.reshape(N, O, Do, self.padded[1], self.padded[2])
        return np.ascontiguousarray(y[:, :, :, :Ho, :Wo])

    def flatten(self, g: np.ndarray) -> np.ndarray:
        N, O = g.shape[:2]
        if not self.flat:
            return np.ascontiguousarray(g).reshape(N, O, self.L)
        Do, Ho, Wo = self.out_size
        full = np.zeros((N, O, Do, self.padded[1], self.padded[2]), dtype=g.dtype)
        full[:, :, :, :Ho, :Wo] = g
        return full.reshape(N, O, self.L)


def _check_feature_map(x: Tensor, channels: int, what: str) -> None:
    if x.data.ndim != 5:
        raise ShapeError(f"{what}: expected rank-5 (N, C, D, H, W) input, got shape {x.shape}")
    if x.shape[1] != channels:
        raise ShapeError(f"{what}: channel axis has {x.shape[1]}, expected {channels}")


def _check_bias(bias: Tensor | None, channels: int, what: str) -> None:
    if bias is not None and bias.shape != (channels,):
        raise ShapeError(f"{what}: bias shape {bias.shape}, expected ({channels},)")


def conv3d(x, weight, bias=None, spec: ConvSpec | None = None) -> Tensor:
    """Dilated, strided 3D cross-correlation (no kernel flip) plus per-channel bias."""
    x, weight = _as_tensor(x), _as_tensor(weight)
    bias = None if bias is None else _as_tensor(bias)
    if spec is None:
        spec = ConvSpec.same(weight.shape[1], weight.shape[0])
    _check_feature_map(x, spec.in_channels, "conv3d")
    want = (spec.out_channels, spec.in_channels) + spec.kernel
    if weight.shape != want:
        raise ShapeError(f"conv3d: weight shape {weight.shape}, expected {want}")
    _check_bias(bias, spec.out_channels, "conv3d")
    _check_dtypes(x, weight, bias)

    low = _Lowering(spec, x.shape[2:])
    w2 = weight.data.reshape(spec.out_channels, -1)
    y = low.unflatten(low.apply(w2, x.data))
    if bias is not None:
        y += bias.data.reshape(1, -1, 1, 1, 1)

    def _backward(g):
        gf = low.flatten(g)
        gx = low.adjoint(weight.data, g) if x.requires_grad else None
        gw = low.outer(gf, x.data).reshape(weight.shape) if weight.requires_grad else None
        gb = g.sum(axis=(0, 2, 3, 4)) if bias is not None and bias.requires_grad else None
        return gx, gw, gb

    return _make(y, "conv3d", (x, weight, bias), _backward)


def conv_transpose3d(x, weight, bias=None, spec: ConvSpec | None = None,
                     output_size: Sequence[int] | None = None) -> Tensor:
    """Transposed convolution: the input-gradient map of :func:`conv3d` with the same weights.

    ``weight`` has shape ``(in_channels, out_channels, *kernel)``, i.e. the weight
    of the forward convolution that maps ``out_channels`` to ``in_channels``.
    Several input sizes give the same conv3d output when the stride leaves a
    remainder; ``output_size`` picks one (default: the smallest).
    """
    x, weight = _as_tensor(x), _as_tensor(weight)
    bias = None if bias is None else _as_tensor(bias)
    if spec is None:
        raise ValueError("conv_transpose3d needs an explicit ConvSpec")
    _check_feature_map(x, spec.in_channels, "conv_transpose3d")
    want = (spec.in_channels, spec.out_channels) + spec.kernel
    if weight.shape != want:
        raise ShapeError(f"conv_transpose3d: weight shape {weight.shape}, expected {want}")
    _check_bias(bias, spec.out_channels, "conv_transpose3d")
    _check_dtypes(x, weight, bias)

    out_size = conv_transpose_output_size(spec, x.shape[2:])
    if output_size is not None:
        out_size = tuple(int(n) for n in output_size)
    fwd = ConvSpec(spec.out_channels, spec.in_channels, spec.kernel, spec.stride,
                   spec.dilation, spec.padding)
    low = _Lowering(fwd, out_size)
    if low.out_size != tuple(x.shape[2:]):
        raise ShapeError(f"conv_transpose3d: input {x.shape[2:]} is not reachable by {spec}")
    w2 = weight.data.reshape(spec.in_channels, -1)
    xf = low.flatten(x.data)
    y = low.adjoint(weight.data, x.data)
    if bias is not None:
        y += bias.data.reshape(1, -1, 1, 1, 1)

    def _backward(g):
        gx = low.unflatten(low.apply(w2, g)) if x.requires_grad else None
        gw = low.outer(xf, g).reshape(weight.shape) if weight.requires_grad else None
        gb = g.sum(axis=(0, 2, 3, 4)) if bias is not None and bias.requires_grad else None
        return gx, gw, gb

    return _make(y, "conv_transpose3d", (x, weight, bias), _backward)


def leaky_relu(x, slope: float = 0.1) -> Tensor:
    """x where x >= 0, slope * x elsewhere. The derivative at exactly 0 is ``slope``."""
    if not 0.0 < slope < 1.0:
        raise ValueError(f"slope must lie in (0, 1), got {slope}")
    x = _as_tensor(x)
    pos = x.data > 0
    if _patterns is not None:
        _patterns.append(np.packbits(pos).tobytes())
    y = np.where(pos, x.data, x.data * x.dtype.type(slope))

    def _backward(g):
        return (np.where(pos, g, g * g.dtype.type(slope)),)

    return _make(y, "leaky_relu", (x,), _backward)


def concat_channels(inputs: Sequence) -> Tensor:
    inputs = [_as_tensor(t) for t in inputs]
    if not inputs:
        raise ValueError("concat_channels needs at least one input")
    ref = inputs[0]
    for t in inputs:
        if t.data.ndim != 5:
            raise ShapeError(f"concat_channels: expected rank-5 inputs, got shape {t.shape}")
        if t.shape[0] != ref.shape[0]:
            raise ShapeError(f"concat_channels: batch axis {t.shape[0]} != {ref.shape[0]}")
        for ax in range(3):
            if t.shape[2 + ax] != ref.shape[2 + ax]:
                raise ShapeError(f"concat_channels: {_AXES[ax]} axis "
                                 f"{t.shape[2 + ax]} != {ref.shape[2 + ax]}")
    _check_dtypes(*inputs)
    y = np.concatenate([t.data for t in inputs], axis=1)
    bounds = np.cumsum([0] + [t.shape[1] for t in inputs])

    def _backward(g):
        return tuple(np.ascontiguousarray(g[:, lo:hi]) for lo, hi in zip(bounds[:-1], bounds[1:]))

    return _make(y, "concat_channels", tuple(inputs), _backward)


def mse_loss(predictions: Sequence, targets: Sequence, per_voxel: bool = False) -> Tensor:
    """Half mean over samples of the summed squared residual.

    ``loss = 1/(2N) * sum_i ||pred_i - target_i||^2``, where every batch entry of
    every prediction tensor counts as one sample. With ``per_voxel`` the result
    is further divided by the number of elements in one sample.
    """
    predictions = [_as_tensor(p) for p in predictions]
    if not predictions:
        raise ValueError("mse_loss needs at least one prediction")
    if len(predictions) != len(targets):
        raise ValueError(f"{len(predictions)} predictions vs {len(targets)} targets")
    dtype = _check_dtypes(*predictions)
    residuals = []
    for p, t in zip(predictions, targets):
        t = t.data if isinstance(t, Tensor) else np.asarray(t)
        if p.shape != t.shape:
            raise ShapeError(f"mse_loss: prediction shape {p.shape} != target shape {t.shape}")
        residuals.append(p.data - t.astype(dtype, copy=False))
    n = sum(p.shape[0] if p.data.ndim else 1 for p in predictions)
    scale = 1.0 / (2.0 * n)
    if per_voxel:
        p0 = predictions[0]
        scale /= p0.data[0].size if p0.data.ndim else 1
    total = sum(float(np.dot(r.ravel().astype(np.float64), r.ravel().astype(np.float64)))
                for r in residuals)
    y = np.asarray(total * scale, dtype=dtype)

    def _backward(g):
        k = dtype.type(2.0 * scale) * g
        return tuple(r * k for r in residuals)

    return _make(y, "mse_loss", tuple(predictions), _backward)


def backward(loss: Tensor, retain_graph: bool = False) -> None:
    """Populate ``grad`` on every tensor reachable from ``loss`` that requires it."""
    if loss.data.size != 1 or loss.data.ndim != 0:
        raise GraphError(f"backward needs a scalar loss, got shape {loss.shape}")
    nodes: dict[int, Tensor] = {}
    stack = [loss]
    while stack:
        t = stack.pop()
        if t._id in nodes or not t.requires_grad:
            continue
        nodes[t._id] = t
        for p in t._parents:
            if p is None:
                continue
            if p._id >= t._id:
                raise GraphError(f"cycle detected: {p!r} is not older than its consumer {t!r}")
            if p._id not in nodes:
                stack.append(p)

    grads: dict[int, np.ndarray] = {loss._id: np.ones((), dtype=loss.dtype)}
    for tid in sorted(nodes, reverse=True):
        t = nodes[tid]
        g = grads.pop(tid, None)
        if g is None:
            continue
        t.grad = g if t.grad is None else t.grad + g
        if t._backward is None:
            continue
        for p, gp in zip(t._parents, t._backward(g)):
            if p is None or gp is None or not p.requires_grad:
                continue
            if p._id in grads:
                grads[p._id] = grads[p._id] + gp
            else:
                grads[p._id] = gp
        if not retain_graph:
            t._backward = None
            t._parents = ()


@dataclass
class GradCheckResult:
    error: float
    checked: int
    skipped: int


def grad_check_detail(fn: Callable[..., Tensor], inputs: Sequence[np.ndarray], h: float = 1e-3,
                      max_coords: int | None = None, seed: int = 0,
                      kink_guard: bool = False) -> GradCheckResult:
    """Worst relative error between reverse-mode and central-difference gradients.

    ``fn`` maps tensors (built from ``inputs``) to a tensor of any shape; it is
    reduced to a scalar with :func:`mse_loss` against a fixed random target.
    Inputs must be float64. ``max_coords`` caps how many coordinates per input
    are probed (chosen at random, seeded); ``None`` checks all of them.

    The relative error of one coordinate is ``|a - n| / max(|a|, |n|, floor)``
    with ``floor = 1e-6 * max|n|`` so that coordinates with negligible gradient
    are compared on the scale of the whole gradient.

    With ``kink_guard`` every leaky ReLU records its sign pattern, and probes
    whose ``x - h`` or ``x + h`` evaluation flips any activation are skipped:
    a central difference straddling a kink does not estimate the derivative.
    """
    global _patterns
    arrays = [np.array(a, dtype=np.float64) for a in inputs]
    rng = np.random.default_rng(seed)
    leaves = [Tensor(a, requires_grad=True) for a in arrays]
    out = fn(*leaves)
    target = rng.standard_normal(out.shape)
    backward(mse_loss([out], [target]))
    analytic = [np.zeros_like(a) if t.grad is None else t.grad for a, t in zip(arrays, leaves)]

    def value():
        global _patterns
        _patterns = [] if kink_guard else None
        try:
            v = float(mse_loss([fn(*[Tensor(a) for a in arrays])], [target]).data)
            return v, _patterns
        finally:
            _patterns = None

    reference = value()[1]
    a_all, n_all = [], []
    skipped = 0
    for arr, ga in zip(arrays, analytic):
        flat = arr.reshape(-1)
        idx = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            idx = np.sort(rng.choice(flat.size, size=max_coords, replace=False))
        for i in idx:
            orig = flat[i]
            flat[i] = orig + h
            up, pat_up = value()
            flat[i] = orig - h
            down, pat_down = value()
            flat[i] = orig
            if kink_guard and (pat_up != reference or pat_down != reference):
                skipped += 1
                continue
            n_all.append((up - down) / (2 * h))
            a_all.append(ga.reshape(-1)[i])
    a_all, n_all = np.array(a_all), np.array(n_all)
    if a_all.size == 0:
        return GradCheckResult(0.0, 0, skipped)
    floor = max(1e-6 * np.abs(n_all).max(), 1e-300)
    denom = np.maximum(np.maximum(np.abs(a_all), np.abs(n_all)), floor)
    return GradCheckResult(float(np.max(np.abs(a_all - n_all) / denom)), int(a_all.size), skipped)


def grad_check(fn: Callable[..., Tensor], inputs: Sequence[np.ndarray], h: float = 1e-3,
               max_coords: int | None = None, seed: int = 0, kink_guard: bool = False) -> float:
    """Worst relative gradient error; see :func:`grad_check_detail`."""
    return grad_check_detail(fn, inputs, h, max_coords, seed, kink_guard).error
