"""OCN1 checkpoint files.

Layout (little-endian): magic ``OCN1``, format version (u32), tensor count
(u32), then per tensor: name length (u32), UTF-8 name, rank (u32), dims
(u32 each), raw float32 data. Optimizer velocities live under
``__opt__/<param name>``; the iteration counter and generator state are
stored under ``__iter__`` and ``__rng__`` as uint32 words whose bits are
written verbatim in the float32 slots.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Union

import numpy as np

from .errors import DataError

MAGIC = b"OCN1"
FORMAT_VERSION = 1
OPT_PREFIX = "__opt__/"
ITER_KEY = "__iter__"
RNG_KEY = "__rng__"


@dataclass
class Checkpoint:
    tensors: dict[str, np.ndarray]
    velocities: dict[str, np.ndarray] = field(default_factory=dict)
    iteration: int = 0
    rng_state: Optional[dict] = None


def _words_to_f32(words: list[int]) -> np.ndarray:
    return np.array(words, dtype="<u4").view("<f4")


def _f32_to_words(arr: np.ndarray) -> list[int]:
    return [int(w) for w in np.ascontiguousarray(arr, dtype="<f4").view("<u4")]


def _split128(value: int) -> list[int]:
    return [(value >> (32 * i)) & 0xFFFFFFFF for i in range(4)]


def _join128(words: list[int]) -> int:
    return sum(w << (32 * i) for i, w in enumerate(words))


def encode_rng(state: dict) -> np.ndarray:
    if state.get("bit_generator") != "PCG64":
        raise DataError(f"only PCG64 generator state can be stored, got {state.get('bit_generator')}")
    inner = state["state"]
    words = _split128(inner["state"]) + _split128(inner["inc"]) + [int(state["has_uint32"]), int(state["uinteger"])]
    return _words_to_f32(words)


def decode_rng(arr: np.ndarray) -> dict:
    words = _f32_to_words(arr)
    if len(words) != 10:
        raise DataError(f"generator state has {len(words)} words, expected 10")
    return {
        "bit_generator": "PCG64",
        "state": {"state": _join128(words[:4]), "inc": _join128(words[4:8])},
        "has_uint32": words[8],
        "uinteger": words[9],
    }


def _entries(ckpt: Checkpoint) -> list[tuple[str, np.ndarray]]:
    entries = list(ckpt.tensors.items())
    entries += [(OPT_PREFIX + name, v) for name, v in ckpt.velocities.items()]
    entries.append((ITER_KEY, _words_to_f32([ckpt.iteration])))
    if ckpt.rng_state is not None:
        entries.append((RNG_KEY, encode_rng(ckpt.rng_state)))
    return entries


def dumps(ckpt: Checkpoint) -> bytes:
    buf = io.BytesIO()
    entries = _entries(ckpt)
    buf.write(MAGIC)
    buf.write(struct.pack("<II", FORMAT_VERSION, len(entries)))
    for name, arr in entries:
        raw_name = name.encode("utf-8")
        arr = np.asarray(arr)
        buf.write(struct.pack("<I", len(raw_name)))
        buf.write(raw_name)
        buf.write(struct.pack("<I", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        if arr.dtype == np.dtype("<f4"):
            buf.write(np.ascontiguousarray(arr).tobytes())
        else:
            buf.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return buf.getvalue()


def loads(raw: bytes, source: str = "<checkpoint>") -> Checkpoint:
    view = memoryview(raw)
    if bytes(view[:4]) != MAGIC:
        raise DataError(f"{source}: not an OCN1 checkpoint")
    pos = 4

    def take(fmt: str):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(view):
            raise DataError(f"{source}: truncated checkpoint")
        values = struct.unpack_from(fmt, view, pos)
        pos += size
        return values

    version, count = take("<II")
    if version != FORMAT_VERSION:
        raise DataError(f"{source}: unsupported checkpoint version {version}")
    ckpt = Checkpoint(tensors={})
    for _ in range(count):
        (name_len,) = take("<I")
        name = bytes(view[pos : pos + name_len]).decode("utf-8")
        pos += name_len
        (rank,) = take("<I")
        dims = take(f"<{rank}I") if rank else ()
        n = int(np.prod(dims)) if rank else 1
        if pos + 4 * n > len(view):
            raise DataError(f"{source}: truncated data for {name!r}")
        arr = np.frombuffer(view, dtype="<f4", count=n, offset=pos).reshape(dims).copy()
        pos += 4 * n
        if name == ITER_KEY:
            ckpt.iteration = _f32_to_words(arr)[0]
        elif name == RNG_KEY:
            ckpt.rng_state = decode_rng(arr)
        elif name.startswith(OPT_PREFIX):
            ckpt.velocities[name[len(OPT_PREFIX) :]] = arr
        else:
            ckpt.tensors[name] = arr
    if pos != len(view):
        raise DataError(f"{source}: {len(view) - pos} trailing bytes")
    return ckpt


def save_checkpoint(path: Union[str, Path], ckpt: Checkpoint) -> None:
    path = Path(path)
    try:
        path.write_bytes(dumps(ckpt))
    except OSError as exc:
        raise OSError(f"cannot write checkpoint {path}: {exc.strerror or exc}") from exc


def load_checkpoint(path: Union[str, Path]) -> Checkpoint:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read checkpoint {path}: {exc.strerror or exc}") from None
    return loads(raw, str(path))
