"""Context heads that sit between the backbone and the classifier.

Base-OC, Pyramid-OC and ASP-OC wrap object context pooling; the plain
3x3 head and the global-pooling head are the context-free and image-level
comparison points.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .errors import ContractError, DimensionError
from .nn import ConvBNReLU, Module, expand_spatial, global_avg_pool
from .ocp import ObjectContextMap, ObjectContextPooling
from .tensor import Tensor, concat, concat_channels

Region = tuple[int, int, int, int]  # row0, row1, col0, col1 (half-open)


@dataclass(frozen=True)
class ChannelPlan:
    backbone_ch: int
    mid_ch: int
    out_ch: int

    def __post_init__(self):
        if min(self.backbone_ch, self.mid_ch, self.out_ch) < 1:
            raise ContractError(f"channel counts must be positive: {self}")

    @property
    def key_ch(self) -> int:
        return max(1, self.out_ch // 2)


FULL_PLAN = ChannelPlan(2048, 512, 512)
TOY_PLAN = ChannelPlan(64, 16, 16)


def _check_channels(x: Tensor, expected: int, who: str) -> None:
    if x.ndim != 4 or x.shape[1] != expected:
        raise DimensionError(f"{who}: expected {expected} input channels, got shape {x.shape}")


def _bands(n: int, s: int) -> list[tuple[int, int]]:
    return [((i * n) // s, ((i + 1) * n) // s) for i in range(s)]


def pyramid_partition(h: int, w: int, s: int) -> list[Region]:
    """Split an h x w grid into s x s regions using floor boundaries, row-major."""
    if s < 1 or h < 1 or w < 1:
        raise ContractError(f"pyramid_partition needs positive sizes, got h={h} w={w} s={s}")
    if s > h or s > w:
        raise ContractError(f"scale {s} exceeds the {h}x{w} map")
    return [(r0, r1, c0, c1) for r0, r1 in _bands(h, s) for c0, c1 in _bands(w, s)]


def pyramid_branch(x: Tensor, ocp: ObjectContextPooling, scale: int) -> Tensor:
    """Run one OCP independently inside every region of an s x s partition."""
    H, W = x.shape[2:]
    regions = pyramid_partition(H, W, scale)
    rows = []
    for r in range(scale):
        pieces = []
        for c in range(scale):
            r0, r1, c0, c1 = regions[r * scale + c]
            pieces.append(ocp(x[:, :, r0:r1, c0:c1]))
        rows.append(concat(pieces, axis=3) if scale > 1 else pieces[0])
    return concat(rows, axis=2) if scale > 1 else rows[0]


class ContextHead(Module):
    """Common surface: ``forward`` maps backbone_ch to out_ch at fixed H, W."""

    plan: ChannelPlan
    junctions: dict[str, tuple[int, ...]]

    def context_map(self) -> Optional[ObjectContextMap]:
        return None

    def set_keep_map(self, keep: bool) -> None:
        for _, child in self._children():
            if isinstance(child, ObjectContextPooling):
                child.keep_map = keep


class BaseOC(ContextHead):
    def __init__(self, plan: ChannelPlan, rng: np.random.Generator, key_ch: Optional[int] = None, scaled: bool = False):
        self.plan = plan
        self.reduce = ConvBNReLU(plan.backbone_ch, plan.mid_ch, 3, rng)
        self.ocp = ObjectContextPooling(plan.mid_ch, key_ch or plan.key_ch, plan.mid_ch, rng, scaled=scaled)
        self.fuse = ConvBNReLU(2 * plan.mid_ch, plan.out_ch, 1, rng)
        self.extra = ConvBNReLU(plan.out_ch, plan.out_ch, 1, rng)
        self.junctions = {}

    def forward(self, x: Tensor) -> Tensor:
        _check_channels(x, self.plan.backbone_ch, "Base-OC")
        reduced = self.reduce(x)
        cat = concat_channels([self.ocp(reduced), reduced])
        self.junctions = {"concat": cat.shape}
        return self.extra(self.fuse(cat))

    def context_map(self):
        return self.ocp.last_map


class PyramidOC(ContextHead):
    def __init__(
        self,
        plan: ChannelPlan,
        rng: np.random.Generator,
        scales: Sequence[int] = (1, 2, 3, 6),
        key_ch: Optional[int] = None,
        scaled: bool = False,
    ):
        scales = tuple(int(s) for s in scales)
        if not scales or scales[0] < 1 or any(b <= a for a, b in zip(scales, scales[1:])):
            raise ContractError(f"pyramid scales must be strictly increasing and >= 1, got {scales}")
        self.plan = plan
        self.scales = scales
        n = len(scales)
        self.reduce = ConvBNReLU(plan.backbone_ch, plan.mid_ch, 3, rng)
        self.ocps = [
            ObjectContextPooling(plan.mid_ch, key_ch or plan.key_ch, plan.mid_ch, rng, scaled=scaled)
            for _ in scales
        ]
        self.widen = ConvBNReLU(plan.mid_ch, n * plan.mid_ch, 1, rng)
        self.fuse = ConvBNReLU(2 * n * plan.mid_ch, plan.out_ch, 1, rng)
        self.junctions = {}

    def set_keep_map(self, keep: bool) -> None:
        for ocp in self.ocps:
            ocp.keep_map = keep

    def forward(self, x: Tensor) -> Tensor:
        _check_channels(x, self.plan.backbone_ch, "Pyramid-OC")
        H, W = x.shape[2:]
        if self.scales[-1] > min(H, W):
            raise ContractError(f"pyramid scale {self.scales[-1]} exceeds the {H}x{W} map")
        reduced = self.reduce(x)
        branches = [pyramid_branch(reduced, ocp, s) for ocp, s in zip(self.ocps, self.scales)]
        cat = concat_channels(branches + [self.widen(reduced)])
        self.junctions = {"concat": cat.shape}
        return self.fuse(cat)

    def context_map(self):
        # only a scale-1 branch sees the whole map
        if self.scales[0] == 1:
            return self.ocps[0].last_map
        return None


class AspOC(ContextHead):
    def __init__(
        self,
        plan: ChannelPlan,
        rng: np.random.Generator,
        rates: Sequence[int] = (12, 24, 36),
        key_ch: Optional[int] = None,
        scaled: bool = False,
    ):
        rates = tuple(int(r) for r in rates)
        if len(rates) != 3 or min(rates) < 1:
            raise ContractError(f"ASP-OC needs three positive dilation rates, got {rates}")
        self.plan = plan
        self.rates = rates
        self.reduce = ConvBNReLU(plan.backbone_ch, plan.mid_ch, 3, rng)
        self.ocp = ObjectContextPooling(plan.mid_ch, key_ch or plan.key_ch, plan.mid_ch, rng, scaled=scaled)
        self.pointwise = ConvBNReLU(plan.backbone_ch, plan.mid_ch, 1, rng)
        self.atrous = [ConvBNReLU(plan.backbone_ch, plan.mid_ch, 3, rng, dilation=r) for r in rates]
        self.fuse = ConvBNReLU(5 * plan.mid_ch, plan.out_ch, 1, rng)
        self.junctions = {}

    def forward(self, x: Tensor) -> Tensor:
        _check_channels(x, self.plan.backbone_ch, "ASP-OC")
        branches = [self.ocp(self.reduce(x)), self.pointwise(x)] + [conv(x) for conv in self.atrous]
        cat = concat_channels(branches)
        self.junctions = {"concat": cat.shape}
        return self.fuse(cat)

    def context_map(self):
        return self.ocp.last_map


class PlainHead(ContextHead):
    """Context-free comparison: one 3x3 conv to out_ch."""

    def __init__(self, plan: ChannelPlan, rng: np.random.Generator):
        self.plan = plan
        self.conv = ConvBNReLU(plan.backbone_ch, plan.out_ch, 3, rng)
        self.junctions = {}

    def forward(self, x: Tensor) -> Tensor:
        _check_channels(x, self.plan.backbone_ch, "baseline")
        return self.conv(x)


class GlobalPoolHead(ContextHead):
    """Image-level context: reduced map concatenated with its spatial mean."""

    def __init__(self, plan: ChannelPlan, rng: np.random.Generator):
        self.plan = plan
        self.reduce = ConvBNReLU(plan.backbone_ch, plan.mid_ch, 3, rng)
        self.fuse = ConvBNReLU(2 * plan.mid_ch, plan.out_ch, 1, rng)
        self.junctions = {}

    def forward(self, x: Tensor) -> Tensor:
        _check_channels(x, self.plan.backbone_ch, "global-pool")
        reduced = self.reduce(x)
        pooled = expand_spatial(global_avg_pool(reduced), *reduced.shape[2:])
        cat = concat_channels([pooled, reduced])
        self.junctions = {"concat": cat.shape}
        return self.fuse(cat)


HEADS = {
    "baseline": PlainHead,
    "gp": GlobalPoolHead,
    "base-oc": BaseOC,
    "pyramid-oc": PyramidOC,
    "asp-oc": AspOC,
}


def build_head(kind: str, plan: ChannelPlan, rng: np.random.Generator, **kwargs) -> ContextHead:
    try:
        cls = HEADS[kind]
    except KeyError:
        raise ContractError(f"unknown context module {kind!r}; choose from {sorted(HEADS)}") from None
    return cls(plan, rng, **kwargs)
