"""Convolution, normalisation, resampling and the small module system.

All feature maps are (batch, channels, height, width). Convolution is
cross-correlation with zero padding.
"""

from __future__ import annotations

from typing import Iterator, Optional

import numpy as np

from .errors import ContractError, DimensionError
from .tensor import Tensor, add, make_node, mean, relu


def conv_out_size(n: int, k: int, padding: int, dilation: int, stride: int) -> int:
    return (n + 2 * padding - dilation * (k - 1) - 1) // stride + 1


def _live_taps(k: int, n_in: int, n_out: int, padding: int, dilation: int, stride: int) -> list[int]:
    # taps whose samples all fall in the zero border contribute nothing
    rows = np.arange(n_out) * stride - padding
    return [i for i in range(k) if np.any((rows + i * dilation >= 0) & (rows + i * dilation < n_in))]


def conv2d(
    x: Tensor,
    weight: Tensor,
    bias: Optional[Tensor] = None,
    stride: int = 1,
    padding: int = 0,
    dilation: int = 1,
) -> Tensor:
    if x.ndim != 4:
        raise DimensionError(f"conv2d expects a (B, C, H, W) map, got shape {x.shape}")
    B, C, H, W = x.shape
    O, Ci, kh, kw = weight.shape
    if Ci != C:
        raise DimensionError(f"conv2d: weight expects {Ci} input channels, input has {C}")
    Ho = conv_out_size(H, kh, padding, dilation, stride)
    Wo = conv_out_size(W, kw, padding, dilation, stride)
    if Ho < 1 or Wo < 1:
        raise DimensionError(f"conv2d: input {H}x{W} too small for kernel {kh}x{kw} at dilation {dilation}")

    rows = _live_taps(kh, H, Ho, padding, dilation, stride)
    cols = _live_taps(kw, W, Wo, padding, dilation, stride)
    taps = [(i, j) for i in rows for j in cols]
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    row_span = stride * (Ho - 1) + 1
    col_span = stride * (Wo - 1) + 1

    patches = np.empty((B, C, len(taps), Ho, Wo), dtype=x.dtype)
    for t, (i, j) in enumerate(taps):
        r0, c0 = i * dilation, j * dilation
        patches[:, :, t] = xp[:, :, r0 : r0 + row_span : stride, c0 : c0 + col_span : stride]
    patches = patches.reshape(B, C * len(taps), Ho * Wo)
    w_live = weight.data[:, :, [i for i, _ in taps], [j for _, j in taps]].reshape(O, C * len(taps))

    out = np.matmul(w_live, patches).reshape(B, O, Ho, Wo)
    if bias is not None:
        out += bias.data.reshape(1, O, 1, 1)

    def backward(g):
        g2 = g.reshape(B, O, Ho * Wo)
        gx = gw = gb = None
        if weight.requires_grad:
            gw_live = np.tensordot(g2, patches, axes=([0, 2], [0, 2])).reshape(O, C, len(taps))
            gw = np.zeros_like(weight.data)
            for t, (i, j) in enumerate(taps):
                gw[:, :, i, j] = gw_live[:, :, t]
        if x.requires_grad:
            gp = np.matmul(w_live.T, g2).reshape(B, C, len(taps), Ho, Wo)
            gxp = np.zeros_like(xp)
            for t, (i, j) in enumerate(taps):
                r0, c0 = i * dilation, j * dilation
                gxp[:, :, r0 : r0 + row_span : stride, c0 : c0 + col_span : stride] += gp[:, :, t]
            gx = gxp[:, :, padding : padding + H, padding : padding + W] if padding else gxp
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return make_node(out, parents, backward)


def batchnorm(
    x: Tensor,
    scale: Tensor,
    shift: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel normalisation. Training mode updates running stats in place."""
    if x.ndim != 4 or x.shape[1] != scale.shape[0]:
        raise DimensionError(f"batchnorm: input {x.shape} does not match {scale.shape[0]} channels")
    axes = (0, 2, 3)
    bshape = (1, -1, 1, 1)
    if training:
        m = x.size // x.shape[1]
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        unbiased = var * (m / (m - 1)) if m > 1 else var
        running_mean *= 1 - momentum
        running_mean += momentum * mu
        running_var *= 1 - momentum
        running_var += momentum * unbiased
    else:
        m = None
        mu, var = running_mean, running_var
    inv_std = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
    xhat = (x.data - mu.reshape(bshape)) * inv_std.reshape(bshape)
    out = xhat * scale.data.reshape(bshape) + shift.data.reshape(bshape)

    def backward(g):
        gscale = (g * xhat).sum(axis=axes)
        gshift = g.sum(axis=axes)
        dxhat = g * scale.data.reshape(bshape)
        if training:
            gx = (inv_std.reshape(bshape) / m) * (
                m * dxhat
                - dxhat.sum(axis=axes, keepdims=True)
                - xhat * (dxhat * xhat).sum(axis=axes, keepdims=True)
            )
        else:
            gx = dxhat * inv_std.reshape(bshape)
        return gx, gscale, gshift

    return make_node(out.astype(x.dtype), (x, scale, shift), backward)


def bilinear_matrix(n_in: int, n_out: int, dtype=np.float64) -> np.ndarray:
    """Interpolation weights (n_out x n_in), align-corners-false convention."""
    A = np.zeros((n_out, n_in), dtype=dtype)
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.maximum(src, 0.0)
    i0 = np.minimum(np.floor(src).astype(int), n_in - 1)
    i1 = np.minimum(i0 + 1, n_in - 1)
    frac = src - i0
    rows = np.arange(n_out)
    np.add.at(A, (rows, i0), 1.0 - frac)
    np.add.at(A, (rows, i1), frac)
    return A


def resize_bilinear(x: Tensor, out_h: int, out_w: int) -> Tensor:
    B, C, H, W = x.shape
    if (H, W) == (out_h, out_w):
        return x
    Ah = bilinear_matrix(H, out_h, x.dtype)
    Aw = bilinear_matrix(W, out_w, x.dtype)
    out = Ah @ (x.data @ Aw.T)
    return make_node(out, (x,), lambda g: ((Ah.T @ g) @ Aw,))


def bilinear_upsample(x: Tensor, factor: int) -> Tensor:
    if factor < 1:
        raise ContractError(f"bilinear_upsample: factor must be >= 1, got {factor}")
    return resize_bilinear(x, x.shape[2] * factor, x.shape[3] * factor)


def resize_nearest(labels: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Nearest-neighbour resize of the last two axes (no autodiff)."""
    H, W = labels.shape[-2:]
    rows = np.minimum((np.arange(out_h) * H) // out_h, H - 1)
    cols = np.minimum((np.arange(out_w) * W) // out_w, W - 1)
    return labels[..., rows[:, None], cols[None, :]]


def global_avg_pool(x: Tensor) -> Tensor:
    return mean(x, axis=(2, 3), keepdims=True)


def expand_spatial(x: Tensor, h: int, w: int) -> Tensor:
    """Broadcast a (B, C, 1, 1) map to (B, C, h, w)."""
    return add(x, Tensor(np.zeros((1, 1, h, w), dtype=x.dtype)))


# ---------------------------------------------------------------------------
# modules
# ---------------------------------------------------------------------------


class Module:
    """Container that discovers parameters, buffers and children by attribute.

    Tensor attributes with ``requires_grad`` are parameters, other tensors are
    buffers. Lists of modules are traversed with their index as the name.
    """

    training: bool = True

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def _children(self) -> Iterator[tuple[str, "Module"]]:
        for key, value in vars(self).items():
            if isinstance(value, Module):
                yield key, value
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield f"{key}.{i}", item

    def _named_tensors(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for key, value in vars(self).items():
            if isinstance(value, Tensor):
                yield prefix + key, value
        for name, child in self._children():
            yield from child._named_tensors(f"{prefix}{name}.")

    def named_parameters(self) -> Iterator[tuple[str, Tensor]]:
        return ((n, t) for n, t in self._named_tensors() if t.requires_grad)

    def named_buffers(self) -> Iterator[tuple[str, Tensor]]:
        return ((n, t) for n, t in self._named_tensors() if not t.requires_grad)

    def parameters(self) -> list[Tensor]:
        return [t for _, t in self.named_parameters()]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {n: t.data for n, t in self._named_tensors()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self._named_tensors())
        missing = set(own) - set(state)
        unexpected = set(state) - set(own)
        if missing or unexpected:
            raise ContractError(
                f"state mismatch: missing {sorted(missing)}, unexpected {sorted(unexpected)}"
            )
        for name, t in own.items():
            if state[name].shape != t.shape:
                raise DimensionError(f"{name}: stored shape {state[name].shape} != {t.shape}")
            t.data = np.array(state[name], dtype=t.dtype, copy=True)

    def train(self, mode: bool = True) -> "Module":
        self.training = mode
        for _, child in self._children():
            child.train(mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def to(self, dtype) -> "Module":
        for _, t in self._named_tensors():
            t.data = t.data.astype(dtype)
            t.grad = None
        return self

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None


def kaiming_normal(rng: np.random.Generator, shape: tuple[int, ...]) -> np.ndarray:
    fan_in = int(np.prod(shape[1:]))
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(np.float32)


class Conv2d(Module):
    def __init__(
        self,
        in_ch: int,
        out_ch: int,
        kernel: int,
        rng: np.random.Generator,
        stride: int = 1,
        padding: int = 0,
        dilation: int = 1,
        bias: bool = True,
    ):
        if kernel not in (1, 3):
            raise ContractError(f"kernel size must be 1 or 3, got {kernel}")
        if dilation < 1 or stride < 1:
            raise ContractError("stride and dilation must be >= 1")
        self.stride, self.padding, self.dilation = stride, padding, dilation
        self.weight = Tensor(kaiming_normal(rng, (out_ch, in_ch, kernel, kernel)), requires_grad=True)
        self.bias = Tensor(np.zeros(out_ch, np.float32), requires_grad=True) if bias else None

    @property
    def in_channels(self) -> int:
        return self.weight.shape[1]

    @property
    def out_channels(self) -> int:
        return self.weight.shape[0]

    def forward(self, x: Tensor) -> Tensor:
        return conv2d(x, self.weight, self.bias, self.stride, self.padding, self.dilation)


class BatchNorm2d(Module):
    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5):
        self.momentum, self.eps = momentum, eps
        self.scale = Tensor(np.ones(channels, np.float32), requires_grad=True)
        self.shift = Tensor(np.zeros(channels, np.float32), requires_grad=True)
        self.running_mean = Tensor(np.zeros(channels, np.float32))
        self.running_var = Tensor(np.ones(channels, np.float32))

    def forward(self, x: Tensor) -> Tensor:
        return batchnorm(
            x,
            self.scale,
            self.shift,
            self.running_mean.data,
            self.running_var.data,
            self.training,
            self.momentum,
            self.eps,
        )


class ConvBNReLU(Module):
    """Bias-free convolution followed by batch norm and ReLU."""

    def __init__(self, in_ch: int, out_ch: int, kernel: int, rng: np.random.Generator, stride: int = 1, dilation: int = 1):
        pad = dilation * (kernel // 2)
        self.conv = Conv2d(in_ch, out_ch, kernel, rng, stride=stride, padding=pad, dilation=dilation, bias=False)
        self.bn = BatchNorm2d(out_ch)

    @property
    def out_channels(self) -> int:
        return self.conv.out_channels

    def forward(self, x: Tensor) -> Tensor:
        return relu(self.bn(self.conv(x)))
