"""Object context pooling.

Each pixel p gets a distribution over all N = H*W pixels,

    w[p, i] = exp(q_p . k_i) / sum_j exp(q_p . k_j),

where q and k are 1x1 query/key projections of the input map. The pooled
feature at p is the w-weighted sum of the value projection phi(x_i).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import ContractError, DimensionError
from .nn import Conv2d, Module
from .tensor import Tensor, matmul, mul, softmax_rows


@dataclass
class ObjectContextMap:
    """Row-stochastic (batch, N, N) similarity map; row p is pixel p's context."""

    weights: Tensor
    height: int
    width: int

    def row(self, batch: int, y: int, x: int) -> np.ndarray:
        """Row of query pixel (y, x) reshaped to the (height, width) grid."""
        return self.weights.data[batch, y * self.width + x].reshape(self.height, self.width)


class ObjectContextPooling(Module):
    """Query, key and value transforms: bias-free 1x1 convolutions.

    With ``tied_init`` the key transform starts as a copy of the query
    transform. Similarity then begins as a symmetric kernel that scores
    pixels with alike features highest; the two weights train apart freely
    afterwards.
    """

    def __init__(
        self,
        in_ch: int,
        key_ch: int,
        out_ch: int,
        rng: np.random.Generator,
        scaled: bool = False,
        tied_init: bool = True,
    ):
        self.f_q = Conv2d(in_ch, key_ch, 1, rng, bias=False)
        self.f_k = Conv2d(in_ch, key_ch, 1, rng, bias=False)
        if tied_init:
            self.f_k.weight.data[...] = self.f_q.weight.data
        self.phi = Conv2d(in_ch, out_ch, 1, rng, bias=False)
        self.scaled = scaled
        self.last_map: Optional[ObjectContextMap] = None
        self.keep_map = False

    @property
    def in_channels(self) -> int:
        return self.f_q.in_channels

    @property
    def out_channels(self) -> int:
        return self.phi.out_channels

    def forward(self, x: Tensor) -> Tensor:
        out, ctx = ocp_forward(x, self, keep_map=self.keep_map)
        self.last_map = ctx
        return out


def _check_input(x: Tensor, p: ObjectContextPooling) -> None:
    if x.ndim != 4:
        raise DimensionError(f"expected a (B, C, H, W) map, got shape {x.shape}")
    if x.shape[2] * x.shape[3] == 0:
        raise ContractError("object context needs at least one pixel")
    if x.shape[1] != p.in_channels:
        raise DimensionError(f"input has {x.shape[1]} channels, transforms expect {p.in_channels}")


def object_context_estimate(x: Tensor, p: ObjectContextPooling) -> ObjectContextMap:
    _check_input(x, p)
    B, _, H, W = x.shape
    N = H * W
    q = p.f_q(x).reshape(B, -1, N).transpose(0, 2, 1)  # (B, N, key)
    k = p.f_k(x).reshape(B, -1, N)  # (B, key, N)
    sim = matmul(q, k)
    if p.scaled:
        sim = mul(sim, 1.0 / np.sqrt(q.shape[-1]))
    return ObjectContextMap(softmax_rows(sim), H, W)


def object_context_aggregate(x: Tensor, w: ObjectContextMap, p: ObjectContextPooling) -> Tensor:
    _check_input(x, p)
    B, _, H, W = x.shape
    N = H * W
    if w.weights.shape != (B, N, N):
        raise DimensionError(f"context map {w.weights.shape} does not match {B} x {N} pixels")
    v = p.phi(x).reshape(B, -1, N).transpose(0, 2, 1)  # (B, N, out)
    c = matmul(w.weights, v)
    return c.transpose(0, 2, 1).reshape(B, -1, H, W)


def ocp_forward(
    x: Tensor, p: ObjectContextPooling, keep_map: bool = False
) -> tuple[Tensor, Optional[ObjectContextMap]]:
    ctx = object_context_estimate(x, p)
    out = object_context_aggregate(x, ctx, p)
    return out, (ctx if keep_map else None)
