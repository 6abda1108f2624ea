"""Toy dilated backbone, segmentation network, and multi-scale/flip inference."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .context import ChannelPlan, ContextHead, build_head
from .errors import ContractError
from .nn import Conv2d, ConvBNReLU, Module, resize_bilinear
from .tensor import Tensor, no_grad, softmax_rows

OUTPUT_STRIDE = 8


@dataclass(frozen=True)
class ToyBackboneConfig:
    """Five stages: three stride-2 reductions, then dilations 2 and 4.

    ``stage_channels`` lists the first four stage widths; the last stage
    emits ``out_channels``. The auxiliary tap is the output of the stage
    before the last one.
    """

    stage_channels: tuple[int, ...] = (16, 32, 48, 64)
    out_channels: int = 64
    blocks: tuple[int, ...] = (1, 1, 1, 1, 1)
    dilations: tuple[int, int] = (2, 4)
    aux_stage: int = 3

    def __post_init__(self):
        if len(self.stage_channels) != 4 or len(self.blocks) != 5:
            raise ContractError("toy backbone needs four stage widths and five block counts")
        if min(self.blocks) < 1 or min(self.stage_channels) < 1:
            raise ContractError("stage widths and block counts must be positive")

    @property
    def strides(self) -> tuple[int, ...]:
        return (2, 2, 2, 1, 1)

    @property
    def widths(self) -> tuple[int, ...]:
        return tuple(self.stage_channels) + (self.out_channels,)

    @property
    def aux_channels(self) -> int:
        return self.widths[self.aux_stage]

    def receptive_field(self) -> int:
        """Receptive field (input pixels) of one output feature."""
        rf, jump = 1, 1
        dil = (1, 1, 1) + tuple(self.dilations)
        for stride, d, n in zip(self.strides, dil, self.blocks):
            rf += 2 * d * jump  # first conv of the stage
            jump *= stride
            rf += 2 * d * jump * (n - 1)
        return rf


class ToyBackbone(Module):
    def __init__(self, cfg: ToyBackboneConfig, rng: np.random.Generator, in_ch: int = 3):
        self.cfg = cfg
        dil = (1, 1, 1) + tuple(cfg.dilations)
        self.stages = []
        prev = in_ch
        for width, stride, d, n in zip(cfg.widths, cfg.strides, dil, cfg.blocks):
            convs = [ConvBNReLU(prev, width, 3, rng, stride=stride, dilation=d)]
            convs += [ConvBNReLU(width, width, 3, rng, dilation=d) for _ in range(n - 1)]
            self.stages.append(_Stage(convs))
            prev = width

    def forward(self, image: Tensor) -> tuple[Tensor, Tensor]:
        H, W = image.shape[2:]
        if H % OUTPUT_STRIDE or W % OUTPUT_STRIDE:
            raise ContractError(f"input {H}x{W} is not divisible by the output stride {OUTPUT_STRIDE}")
        x = image
        aux = None
        for i, stage in enumerate(self.stages):
            x = stage(x)
            if i == self.cfg.aux_stage:
                aux = x
        return x, aux


class _Stage(Module):
    def __init__(self, convs):
        self.convs = convs

    def forward(self, x: Tensor) -> Tensor:
        for conv in self.convs:
            x = conv(x)
        return x


class SegmentationModel(Module):
    """Backbone -> context head -> 1x1 classifier, plus an auxiliary classifier."""

    def __init__(
        self,
        num_classes: int,
        head: str,
        plan: ChannelPlan,
        rng: np.random.Generator,
        backbone: Optional[ToyBackboneConfig] = None,
        head_kwargs: Optional[dict] = None,
    ):
        backbone = backbone or ToyBackboneConfig(out_channels=plan.backbone_ch)
        if backbone.out_channels != plan.backbone_ch:
            raise ContractError(
                f"backbone emits {backbone.out_channels} channels but the plan expects {plan.backbone_ch}"
            )
        self.num_classes = num_classes
        self.head_kind = head
        self.backbone = ToyBackbone(backbone, rng)
        self.head: ContextHead = build_head(head, plan, rng, **(head_kwargs or {}))
        self.classifier = Conv2d(plan.out_ch, num_classes, 1, rng)
        self.aux_head = ConvBNReLU(backbone.aux_channels, plan.mid_ch, 3, rng)
        self.aux_classifier = Conv2d(plan.mid_ch, num_classes, 1, rng)

    def forward(self, image: Tensor) -> tuple[Tensor, Tensor]:
        """Main and auxiliary logits at feature resolution (input / 8)."""
        feats, aux = self.backbone(image)
        logits = self.classifier(self.head(feats))
        aux_logits = self.aux_classifier(self.aux_head(aux))
        return logits, aux_logits

    def predict_logits(self, image: Tensor) -> Tensor:
        """Main logits upsampled to the input resolution."""
        logits, _ = self.forward(image)
        return resize_bilinear(logits, *image.shape[2:])


def round_to_stride(n: float, stride: int = OUTPUT_STRIDE) -> int:
    return max(stride, int(round(n / stride)) * stride)


def _class_probs(logits: Tensor) -> np.ndarray:
    # softmax over the class axis of (B, K, H, W)
    moved = np.moveaxis(logits.data, 1, -1)
    return np.moveaxis(softmax_rows(Tensor(moved)).data, -1, 1)


def ms_flip_infer(
    model: Callable[[Tensor], Tensor],
    image,
    scales: Sequence[float] = (1.0,),
    flip: bool = False,
) -> np.ndarray:
    """Average class probabilities over rescaled and mirrored copies.

    ``model`` maps a (B, 3, h, w) tensor to logits at any resolution (or to a
    tuple whose first element is the logits). Scaled sizes are rounded to
    the nearest multiple of 8.
    """
    if not scales:
        raise ContractError("ms_flip_infer needs at least one scale")
    image = image if isinstance(image, Tensor) else Tensor(image)
    H, W = image.shape[2:]
    was_training = getattr(model, "training", False)
    if isinstance(model, Module):
        model.eval()
    total = None
    count = 0
    try:
        with no_grad():
            for s in scales:
                h, w = round_to_stride(H * s), round_to_stride(W * s)
                scaled = resize_bilinear(image, h, w)
                views = [(scaled, False)] + ([(Tensor(scaled.data[..., ::-1].copy()), True)] if flip else [])
                for view, mirrored in views:
                    out = model(view)
                    logits = out[0] if isinstance(out, tuple) else out
                    probs = _class_probs(resize_bilinear(logits, H, W))
                    if mirrored:
                        probs = probs[..., ::-1]
                    total = probs.copy() if total is None else total + probs
                    count += 1
    finally:
        if isinstance(model, Module):
            model.train(was_training)
    return total / count
