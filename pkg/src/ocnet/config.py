"""Run configuration: plain-text ``key = value`` files.

Lists are comma-separated, ``#`` starts a comment, and unknown keys are
rejected with the offending line number. Every key has a default, so an
empty file is a valid configuration.
"""

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Optional, Union, get_args, get_origin

from .context import HEADS, ChannelPlan
from .errors import ContractError
from .model import ToyBackboneConfig
from .training import OhemConfig, ScheduleConfig, SupervisionConfig


class ConfigError(ContractError):
    """A configuration file or value was rejected."""

    def __init__(self, message: str, key: Optional[str] = None):
        super().__init__(message)
        self.key = key


@dataclass
class RunConfig:
    # model
    module: str = "base-oc"
    num_classes: int = 4
    backbone_ch: int = 64
    mid_ch: int = 16
    out_ch: int = 16
    backbone_stages: tuple[int, ...] = (16, 32, 48, 64)
    backbone_blocks: tuple[int, ...] = (1, 1, 1, 1, 1)
    key_ch: int = 0  # 0: out_ch // 2
    scaled_attention: bool = False
    pyramid_scales: tuple[int, ...] = (1, 2, 3, 6)
    aspp_rates: tuple[int, ...] = (12, 24, 36)
    # optimisation
    base_lr: float = 0.01
    max_iter: int = 2000
    lr_power: float = 0.9
    momentum: float = 0.9
    weight_decay: float = 0.0005
    batch_size: int = 8
    main_weight: float = 1.0
    aux_weight: float = 0.4
    class_balanced: bool = True
    ohem: bool = False
    ohem_theta: float = 0.7
    ohem_min_kept: int = 0  # 0: a quarter of the pixels in each batch
    augment: bool = True
    scale_min: float = 0.5
    scale_max: float = 2.0
    # data
    train_data: str = ""  # empty: the built-in toy split
    val_data: str = ""
    image_size: int = 64
    train_count: int = 2000
    val_count: int = 200
    ignore_label: int = 255
    # evaluation and logging
    eval_scales: tuple[float, ...] = (1.0,)
    flip: bool = False
    val_every: int = 0  # 0: validate only after the last iteration
    log_every: int = 10
    seed: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        checks = [
            ("module", self.module in HEADS, f"must be one of {sorted(HEADS)}"),
            ("num_classes", self.num_classes >= 2, "must be >= 2"),
            ("max_iter", self.max_iter >= 0, "must be >= 0"),
            ("batch_size", self.batch_size >= 1, "must be >= 1"),
            ("ohem_theta", 0 < self.ohem_theta <= 1, "must be in (0, 1]"),
            ("ohem_min_kept", self.ohem_min_kept >= 0, "must be >= 0"),
            ("base_lr", self.base_lr > 0, "must be positive"),
            ("lr_power", self.lr_power > 0, "must be positive"),
            ("main_weight", self.main_weight >= 0, "must be >= 0"),
            ("aux_weight", self.aux_weight >= 0, "must be >= 0"),
            ("eval_scales", len(self.eval_scales) > 0 and min(self.eval_scales) > 0, "must be positive and non-empty"),
            ("scale_max", 0 < self.scale_min <= self.scale_max, "scale range must satisfy 0 < scale_min <= scale_max"),
            ("image_size", self.image_size >= 8 and self.image_size % 8 == 0, "must be a positive multiple of 8"),
        ]
        for key, ok, message in checks:
            if not ok:
                raise ConfigError(f"{key} {message}, got {getattr(self, key)!r}", key=key)

    # -- derived records ------------------------------------------------
    @property
    def plan(self) -> ChannelPlan:
        return ChannelPlan(self.backbone_ch, self.mid_ch, self.out_ch)

    @property
    def backbone(self) -> ToyBackboneConfig:
        return ToyBackboneConfig(
            stage_channels=tuple(self.backbone_stages),
            out_channels=self.backbone_ch,
            blocks=tuple(self.backbone_blocks),
        )

    @property
    def schedule(self) -> ScheduleConfig:
        return ScheduleConfig(self.base_lr, self.max_iter, self.lr_power, self.weight_decay, self.momentum)

    @property
    def supervision(self) -> SupervisionConfig:
        return SupervisionConfig(self.main_weight, self.aux_weight)

    def ohem_config(self, batch_pixels: int) -> Optional[OhemConfig]:
        if not self.ohem:
            return None
        kept = self.ohem_min_kept or max(1, batch_pixels // 4)
        return OhemConfig(self.ohem_theta, kept)

    def head_kwargs(self) -> dict:
        kw: dict = {}
        if self.module in ("base-oc", "pyramid-oc", "asp-oc"):
            kw["key_ch"] = self.key_ch or None
            kw["scaled"] = self.scaled_attention
        if self.module == "pyramid-oc":
            kw["scales"] = self.pyramid_scales
        if self.module == "asp-oc":
            kw["rates"] = self.aspp_rates
        return kw

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            value = getattr(self, f.name)
            lines.append(f"{f.name} = {_format(value)}")
        return "\n".join(lines) + "\n"


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (tuple, list)):
        return ", ".join(_format(v) for v in value)
    return str(value)


def _parse_scalar(kind, raw: str):
    if kind is bool:
        low = raw.lower()
        if low in ("true", "yes", "on", "1"):
            return True
        if low in ("false", "no", "off", "0"):
            return False
        raise ValueError(f"expected a boolean, got {raw!r}")
    if kind is int:
        return int(raw)
    if kind is float:
        return float(raw)
    return raw


def _parse_value(f: dataclasses.Field, raw: str):
    kind = f.type
    if get_origin(kind) is tuple:
        inner = get_args(kind)[0]
        items = [item.strip() for item in raw.split(",") if item.strip()]
        return tuple(_parse_scalar(inner, item) for item in items)
    return _parse_scalar(kind, raw)


def parse_config(text: str, source: str = "<config>") -> RunConfig:
    by_name = {f.name: f for f in fields(RunConfig)}
    values: dict = {}
    lines: dict[str, int] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {line.strip()!r}")
        key, raw = (part.strip() for part in stripped.split("=", 1))
        if key not in by_name:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        try:
            values[key] = _parse_value(by_name[key], raw)
            lines[key] = lineno
        except ValueError as exc:
            raise ConfigError(f"{source}:{lineno}: bad value for {key!r}: {exc}") from None
    try:
        return RunConfig(**values)
    except ConfigError as exc:
        where = f"{source}:{lines[exc.key]}" if exc.key in lines else source
        raise ConfigError(f"{where}: {exc}", key=exc.key) from None


def load_config(path: Union[str, Path, None]) -> RunConfig:
    if path is None:
        return RunConfig()
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    return parse_config(text, str(path))


PACKAGED_DIR = Path(__file__).with_name("configs")


def packaged_config(name: str) -> Path:
    """Path of a configuration shipped with the package, e.g. ``toy``."""
    path = PACKAGED_DIR / f"{name}.conf"
    if not path.is_file():
        known = sorted(p.stem for p in PACKAGED_DIR.glob("*.conf"))
        raise ConfigError(f"no packaged config {name!r}; available: {', '.join(known)}")
    return path
