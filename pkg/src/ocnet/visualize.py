"""Object context map rendering and the same-class attention statistic."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence, Union

import numpy as np

from .data import write_pgm, write_ppm
from .errors import ContractError
from .model import OUTPUT_STRIDE, SegmentationModel
from .nn import bilinear_matrix
from .tensor import Tensor, no_grad


@dataclass
class QueryMap:
    """Context row of one query pixel at feature resolution."""

    y: int
    x: int
    row: np.ndarray  # (h, w), sums to 1

    @property
    def cell(self) -> tuple[int, int]:
        return self.y // OUTPUT_STRIDE, self.x // OUTPUT_STRIDE


def normalize_map(row: np.ndarray) -> np.ndarray:
    """Min-max scale to [0, 255] floats; a constant map becomes all zeros."""
    row = np.asarray(row, dtype=np.float64)
    lo, hi = row.min(), row.max()
    if hi <= lo:
        return np.zeros_like(row)
    return (row - lo) / (hi - lo) * 255.0


def heatmap(row: np.ndarray, factor: int = OUTPUT_STRIDE) -> np.ndarray:
    """Normalised map upsampled ``factor`` times with bilinear weights, as uint8."""
    h, w = row.shape
    scaled = normalize_map(row)
    up = bilinear_matrix(h, h * factor, np.float64) @ scaled @ bilinear_matrix(w, w * factor, np.float64).T
    return np.clip(np.rint(up), 0, 255).astype(np.uint8)


def mark_pixel(pixels: np.ndarray, y: int, x: int, arm: int = 3) -> np.ndarray:
    """Copy of ``pixels`` with a red cross centred on (y, x)."""
    out = pixels.copy()
    h, w = out.shape[:2]
    out[max(0, y - arm) : min(h, y + arm + 1), x] = (255, 0, 0)
    out[y, max(0, x - arm) : min(w, x + arm + 1)] = (255, 0, 0)
    return out


def check_points(points: Sequence[tuple[int, int]], height: int, width: int) -> None:
    for y, x in points:
        if not (0 <= y < height and 0 <= x < width):
            raise ContractError(f"query pixel ({y}, {x}) lies outside the {height}x{width} image")


def query_maps(model: SegmentationModel, image: np.ndarray, points: Sequence[tuple[int, int]]) -> list[QueryMap]:
    """Run ``image`` (3, H, W) through the model and pick the context rows of ``points`` (y, x)."""
    H, W = image.shape[1:]
    check_points(points, H, W)
    head = model.head
    was_training = model.training
    model.eval()
    head.set_keep_map(True)
    try:
        with no_grad():
            model(Tensor(image[None]))
        ctx = head.context_map()
    finally:
        head.set_keep_map(False)
        model.train(was_training)
    if ctx is None:
        raise ContractError(f"the {model.head_kind!r} head has no object context map to show")
    return [QueryMap(y, x, ctx.row(0, y // OUTPUT_STRIDE, x // OUTPUT_STRIDE)) for y, x in points]


def feature_labels(labels: np.ndarray, stride: int = OUTPUT_STRIDE) -> np.ndarray:
    """Label of the centre pixel of each stride x stride cell."""
    return labels[stride // 2 :: stride, stride // 2 :: stride]


def same_class_ratio(row: np.ndarray, cell_labels: np.ndarray, label: int) -> float:
    """Attention mass on pixels of ``label`` divided by that label's area share."""
    same = cell_labels == label
    area = same.mean()
    if area == 0:
        raise ContractError(f"class {label} does not occur in the label map")
    return float(row[same].sum() / area)


def write_query_maps(
    out_dir: Union[str, Path],
    pixels: np.ndarray,
    maps: Sequence[QueryMap],
    stem: str = "context",
) -> list[Path]:
    """One heatmap PGM and one marked input PPM per query."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for q in maps:
        base = out_dir / f"{stem}_y{q.y}_x{q.x}"
        write_pgm(base.with_suffix(".pgm"), heatmap(q.row))
        write_ppm(base.with_suffix(".ppm"), mark_pixel(pixels, q.y, q.x))
        written += [base.with_suffix(".pgm"), base.with_suffix(".ppm")]
    return written
