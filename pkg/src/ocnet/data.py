"""Synthetic shapes dataset, augmentation, and PPM/PGM dataset files.

Every image holds 1-4 non-overlapping filled shapes on a noisy background.
Rectangles, disks and triangles are classes 1, 2 and 3; background is 0.
All fills and the background draw their colour from one shared
distribution, so a pixel's colour says nothing about its class: only the
extent of the shape it belongs to does.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from .errors import ContractError, DataError
from .nn import bilinear_matrix, resize_nearest

IGNORE_LABEL = 255
SHAPE_KINDS = ("rectangle", "disk", "triangle")

# image normalisation: pixels/255 mapped to zero mean, unit-ish spread
PIXEL_MEAN = 0.5
PIXEL_STD = 0.25

# per-pixel gaussian noise and the minimum fill/background contrast
NOISE_SIGMA = 10.0
MIN_CONTRAST = 60.0


@dataclass
class Shape:
    kind: str
    label: int
    params: tuple[float, ...]

    def contains(self, rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
        """Analytic membership test for points (row, col) in pixel units."""
        if self.kind == "rectangle":
            r0, c0, r1, c1 = self.params
            return (rows >= r0) & (rows < r1) & (cols >= c0) & (cols < c1)
        if self.kind == "disk":
            cr, cc, rad = self.params
            return (rows - cr) ** 2 + (cols - cc) ** 2 <= rad**2
        if self.kind == "triangle":
            ar, ac, br, bc, pr, pc = self.params
            d1 = _edge(rows, cols, ar, ac, br, bc)
            d2 = _edge(rows, cols, br, bc, pr, pc)
            d3 = _edge(rows, cols, pr, pc, ar, ac)
            neg = (d1 < 0) | (d2 < 0) | (d3 < 0)
            pos = (d1 > 0) | (d2 > 0) | (d3 > 0)
            return ~(neg & pos)
        raise ContractError(f"unknown shape kind {self.kind!r}")


def _edge(r, c, r0, c0, r1, c1):
    return (c - c0) * (r1 - r0) - (r - r0) * (c1 - c0)


@dataclass
class SegmentationSample:
    """RGB pixels (H, W, 3) uint8 and labels (H, W) uint8."""

    pixels: np.ndarray
    labels: np.ndarray
    shapes: list[Shape] = field(default_factory=list)

    @property
    def image(self) -> np.ndarray:
        """Normalised float32 image, (3, H, W)."""
        return normalize(self.pixels)

    @property
    def height(self) -> int:
        return self.labels.shape[0]

    @property
    def width(self) -> int:
        return self.labels.shape[1]


def normalize(pixels: np.ndarray) -> np.ndarray:
    x = pixels.astype(np.float32) / np.float32(255.0)
    return np.moveaxis((x - np.float32(PIXEL_MEAN)) / np.float32(PIXEL_STD), -1, -3).copy()


def pixel_centers(h: int, w: int) -> tuple[np.ndarray, np.ndarray]:
    rows, cols = np.meshgrid(np.arange(h) + 0.5, np.arange(w) + 0.5, indexing="ij")
    return rows, cols


def _random_shape(rng: np.random.Generator, label: int, h: int, w: int, crowd: int = 1) -> Shape:
    # shapes shrink with the number sharing the image, so four still fit
    size = 1.5 * min(h, w) / np.sqrt(max(crowd, 1))
    limit = min(h, w) / 2 - 1
    kind = SHAPE_KINDS[label - 1]
    if kind == "rectangle":
        sh, sw = np.minimum(rng.uniform(0.3, 0.55, size=2) * size, 2 * limit)
        r0 = rng.uniform(0, h - sh)
        c0 = rng.uniform(0, w - sw)
        return Shape(kind, label, (r0, c0, r0 + sh, c0 + sw))
    if kind == "disk":
        rad = min(rng.uniform(0.16, 0.27) * size, limit)
        cr = rng.uniform(rad, h - rad)
        cc = rng.uniform(rad, w - rad)
        return Shape(kind, label, (cr, cc, rad))
    rad = min(rng.uniform(0.26, 0.38) * size, limit)
    cr = rng.uniform(rad, h - rad)
    cc = rng.uniform(rad, w - rad)
    angles = rng.uniform(0, 2 * np.pi) + np.array([0.0, 2.0, 4.0]) * np.pi / 3 + rng.uniform(-0.25, 0.25, size=3)
    pts = [(cr + rad * np.sin(a), cc + rad * np.cos(a)) for a in angles]
    return Shape(kind, label, tuple(v for p in pts for v in p))


def _dilate(mask: np.ndarray, steps: int) -> np.ndarray:
    out = mask.copy()
    for _ in range(steps):
        grown = out.copy()
        grown[1:] |= out[:-1]
        grown[:-1] |= out[1:]
        grown[:, 1:] |= out[:, :-1]
        grown[:, :-1] |= out[:, 1:]
        out = grown
    return out


def _random_color(rng: np.random.Generator) -> np.ndarray:
    return rng.uniform(30, 225, size=3)


def _render_one(
    rng: np.random.Generator,
    h: int,
    w: int,
    num_classes: int,
    count: int,
    attempts: int,
) -> Optional[SegmentationSample]:
    rows, cols = pixel_centers(h, w)
    labels = np.zeros((h, w), np.uint8)
    occupied = np.zeros((h, w), bool)
    background = _random_color(rng)
    canvas = np.broadcast_to(background, (h, w, 3)).copy()
    shapes: list[Shape] = []
    for _ in range(count):
        label = int(rng.integers(1, num_classes))
        for _ in range(attempts):
            shape = _random_shape(rng, label, h, w, count)
            mask = shape.contains(rows, cols)
            if mask.sum() >= 4 and not (_dilate(mask, 2) & occupied).any():
                break
        else:
            return None
        color = _random_color(rng)
        while np.abs(color - background).max() < MIN_CONTRAST:
            color = _random_color(rng)
        canvas[mask] = color
        labels[mask] = label
        occupied |= mask
        shapes.append(shape)
    noise = rng.normal(0.0, NOISE_SIGMA, size=(h, w, 3))
    pixels = np.clip(np.rint(canvas + noise), 0, 255).astype(np.uint8)
    return SegmentationSample(pixels, labels, shapes)


def generate_shapes(
    seed: int,
    n: int,
    h: int = 64,
    w: int = 64,
    num_classes: int = 4,
    shape_count: tuple[int, int] = (1, 4),
    attempts: int = 50,
    retries: int = 20,
) -> list[SegmentationSample]:
    """Deterministic synthetic dataset of ``n`` samples."""
    if not 2 <= num_classes <= len(SHAPE_KINDS) + 1:
        raise ContractError(f"num_classes must be in [2, {len(SHAPE_KINDS) + 1}], got {num_classes}")
    lo, hi = shape_count
    if lo < 0 or hi < lo:
        raise ContractError(f"invalid shape count range {shape_count}")
    rng = np.random.default_rng(seed)
    samples = []
    for idx in range(n):
        count = int(rng.integers(lo, hi + 1))
        for _ in range(retries):
            sample = _render_one(rng, h, w, num_classes, count, attempts)
            if sample is not None:
                samples.append(sample)
                break
        else:
            raise DataError(f"could not place {count} shapes in a {h}x{w} image (sample {idx})")
    return samples


# ---------------------------------------------------------------------------
# augmentation
# ---------------------------------------------------------------------------


def _resize_pixels(pixels: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    h, w = pixels.shape[:2]
    Ah = bilinear_matrix(h, out_h)
    Aw = bilinear_matrix(w, out_w)
    chw = np.moveaxis(pixels.astype(np.float64), -1, 0)
    out = np.moveaxis(Ah @ chw @ Aw.T, 0, -1)
    return np.clip(np.rint(out), 0, 255).astype(np.uint8)


def augment(
    sample: SegmentationSample,
    seed: Union[int, np.random.Generator, None] = None,
    flip: Optional[bool] = None,
    scale: Optional[float] = None,
    scale_range: tuple[float, float] = (0.5, 2.0),
) -> SegmentationSample:
    """Random horizontal flip and rescale, cropped or padded back to size.

    ``flip`` and ``scale`` override the random draws. Padding uses zero
    pixels and ``IGNORE_LABEL``.
    """
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    do_flip = bool(rng.random() < 0.5) if flip is None else flip
    factor = float(rng.uniform(*scale_range)) if scale is None else scale
    pixels, labels = sample.pixels, sample.labels
    h, w = labels.shape
    if do_flip:
        pixels, labels = pixels[:, ::-1], labels[:, ::-1]
    sh, sw = max(1, int(round(h * factor))), max(1, int(round(w * factor)))
    if (sh, sw) != (h, w):
        pixels = _resize_pixels(pixels, sh, sw)
        labels = resize_nearest(labels, sh, sw)

    out_pix = np.zeros((h, w, 3), np.uint8)
    out_lab = np.full((h, w), IGNORE_LABEL, np.uint8)
    r0 = int(rng.integers(0, sh - h + 1)) if sh > h else 0
    c0 = int(rng.integers(0, sw - w + 1)) if sw > w else 0
    ch, cw = min(h, sh), min(w, sw)
    out_pix[:ch, :cw] = pixels[r0 : r0 + ch, c0 : c0 + cw]
    out_lab[:ch, :cw] = labels[r0 : r0 + ch, c0 : c0 + cw]
    return SegmentationSample(out_pix, out_lab)


def batch_arrays(samples: Sequence[SegmentationSample]) -> tuple[np.ndarray, np.ndarray]:
    images = np.stack([s.image for s in samples])
    labels = np.stack([s.labels for s in samples]).astype(np.int64)
    return images, labels


# ---------------------------------------------------------------------------
# PPM / PGM files
# ---------------------------------------------------------------------------


def write_ppm(path: Union[str, Path], pixels: np.ndarray) -> None:
    h, w = pixels.shape[:2]
    with open(path, "wb") as f:
        f.write(b"P6\n%d %d\n255\n" % (w, h))
        f.write(np.ascontiguousarray(pixels, dtype=np.uint8).tobytes())


def write_pgm(path: Union[str, Path], values: np.ndarray) -> None:
    h, w = values.shape
    with open(path, "wb") as f:
        f.write(b"P5\n%d %d\n255\n" % (w, h))
        f.write(np.ascontiguousarray(values, dtype=np.uint8).tobytes())


def _read_netpbm(path: Union[str, Path], magic: bytes) -> tuple[np.ndarray, int, int]:
    with open(path, "rb") as f:
        raw = f.read()
    tokens: list[bytes] = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(raw) and raw[pos : pos + 1].isspace():
            pos += 1
        if raw[pos : pos + 1] == b"#":
            while pos < len(raw) and raw[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos : pos + 1].isspace():
            pos += 1
        tokens.append(raw[start:pos])
    if tokens[0] != magic:
        raise DataError(f"{path}: expected {magic.decode()} header, found {tokens[0]!r}")
    w, h, maxval = (int(t) for t in tokens[1:])
    if maxval != 255:
        raise DataError(f"{path}: only maxval 255 is supported, found {maxval}")
    return np.frombuffer(raw[pos + 1 :], dtype=np.uint8), h, w


def read_ppm(path: Union[str, Path]) -> np.ndarray:
    data, h, w = _read_netpbm(path, b"P6")
    if data.size != h * w * 3:
        raise DataError(f"{path}: truncated pixel data")
    return data.reshape(h, w, 3).copy()


def read_pgm(path: Union[str, Path]) -> np.ndarray:
    data, h, w = _read_netpbm(path, b"P5")
    if data.size != h * w:
        raise DataError(f"{path}: truncated pixel data")
    return data.reshape(h, w).copy()


MANIFEST_NAME = "manifest.txt"


def save_dataset(samples: Sequence[SegmentationSample], directory: Union[str, Path]) -> Path:
    """Write image/label pairs and a tab-separated manifest into ``directory``."""
    directory = Path(directory)
    try:
        directory.mkdir(parents=True, exist_ok=True)
        lines = []
        for i, s in enumerate(samples):
            img, lbl = f"image_{i:05d}.ppm", f"label_{i:05d}.pgm"
            write_ppm(directory / img, s.pixels)
            write_pgm(directory / lbl, s.labels)
            lines.append(f"{img}\t{lbl}\n")
        manifest = directory / MANIFEST_NAME
        manifest.write_text("".join(lines))
    except OSError as exc:
        raise OSError(f"cannot write dataset to {directory}: {exc.strerror or exc}") from exc
    return manifest


def load_dataset(manifest: Union[str, Path], num_classes: Optional[int] = None) -> list[SegmentationSample]:
    """Read the pairs listed in a manifest; relative paths resolve against its directory."""
    manifest = Path(manifest)
    if manifest.is_dir():
        manifest = manifest / MANIFEST_NAME
    if not manifest.exists():
        raise DataError(f"dataset manifest {manifest} does not exist")
    base = manifest.parent
    samples = []
    for lineno, line in enumerate(manifest.read_text().splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 2:
            raise DataError(f"{manifest}:{lineno}: expected 'image<TAB>label'")
        img_path, lbl_path = (Path(p) if os.path.isabs(p) else base / p for p in parts)
        pixels, labels = read_ppm(img_path), read_pgm(lbl_path)
        if pixels.shape[:2] != labels.shape:
            raise DataError(f"{manifest}:{lineno}: image and label sizes differ")
        if num_classes is not None:
            bad = (labels >= num_classes) & (labels != IGNORE_LABEL)
            if bad.any():
                raise DataError(f"{lbl_path}: label {int(labels[bad][0])} outside [0, {num_classes})")
        samples.append(SegmentationSample(pixels, labels))
    return samples
