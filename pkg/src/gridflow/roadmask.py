"""Per-direction road masks learned from training movies.

A pixel belongs to the direction-``d`` mask when the average of speed channel
``2d + 1`` over every training frame is strictly positive. Masks multiply both
the volume and speed output channels of their direction.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from typing import Iterable

import numpy as np

from .data import C_OUT, T_OUT, Movie, speed_channel
from .formats import ByteReader, atomic_write, pack_extents, pack_header, pack_string

MASK_MAGIC = b"GFMK"


class MaskPreconditionError(ValueError):
    """The target is nonzero somewhere the mask is zero."""


@dataclass(eq=False)
class RoadMasks:
    city: str
    masks: np.ndarray  # (4, H, W) uint8 in {0, 1}

    def __post_init__(self):
        m = np.asarray(self.masks)
        if m.ndim != 3 or m.shape[0] != 4:
            raise ValueError(f"expected 4 direction masks, got shape {m.shape}")
        if not np.isin(m, (0, 1)).all():
            raise ValueError("mask values must be 0 or 1")
        self.masks = m.astype(np.uint8)

    @property
    def extent(self) -> tuple[int, int]:
        return self.masks.shape[1:]

    def __eq__(self, other) -> bool:
        if not isinstance(other, RoadMasks):
            return NotImplemented
        return self.city == other.city and np.array_equal(self.masks, other.masks)

    def channel_mask(self) -> np.ndarray:
        """(T_OUT*C_OUT, H, W) multiplier matching the prediction channel layout."""
        per_frame = np.repeat(self.masks, 2, axis=0)  # vol/speed pair per direction
        return np.tile(per_frame, (T_OUT, 1, 1))


def _speed_sums(movies: Iterable[Movie]) -> tuple[np.ndarray, int, str]:
    total = None
    count = 0
    city = ""
    for m in movies:
        speeds = m.frames[..., [speed_channel(d) for d in range(4)]]
        s = speeds.sum(axis=(0,), dtype=np.float64).transpose(2, 0, 1)
        if total is None:
            total, city = s, m.city
        elif s.shape != total.shape:
            raise ValueError(f"inconsistent movie extents: {s.shape[1:]} vs {total.shape[1:]}")
        else:
            total += s
        count += m.frames.shape[0]
    if total is None:
        raise ValueError("compute_masks needs at least one training movie")
    return total, count, city


def compute_masks(training_movies: Iterable[Movie]) -> RoadMasks:
    """Threshold the per-direction average speed over all training frames at > 0."""
    total, count, city = _speed_sums(training_movies)
    average = total / count
    return RoadMasks(city, (average > 0).astype(np.uint8))


def compute_masks_max(training_movies: Iterable[Movie]) -> RoadMasks:
    """Same masks via the per-pixel maximum; equal to :func:`compute_masks` for non-negative speeds."""
    acc = None
    city = ""
    for m in training_movies:
        speeds = m.frames[..., [speed_channel(d) for d in range(4)]].max(axis=0).transpose(2, 0, 1)
        if acc is None:
            acc, city = speeds > 0, m.city
        else:
            if speeds.shape != acc.shape:
                raise ValueError("inconsistent movie extents")
            acc |= speeds > 0
    if acc is None:
        raise ValueError("compute_masks needs at least one training movie")
    return RoadMasks(city, acc.astype(np.uint8))


def apply_masks(prediction: np.ndarray, masks: RoadMasks) -> np.ndarray:
    """Multiply each direction's volume and speed channels by that direction's mask.

    ``prediction`` is (48, H, W) or batched (N, 48, H, W).
    """
    pred = np.asarray(prediction)
    if pred.shape[-3] != T_OUT * C_OUT:
        raise ValueError(f"prediction must have {T_OUT * C_OUT} channels, got {pred.shape[-3]}")
    if tuple(pred.shape[-2:]) != tuple(masks.extent):
        raise ValueError(f"prediction extent {pred.shape[-2:]} != mask extent {masks.extent}")
    return pred * masks.channel_mask().astype(pred.dtype)


def mask_mse_lemma_check(prediction: np.ndarray, target: np.ndarray, masks: RoadMasks) -> dict:
    """MSE before and after masking, for a target that is zero off-mask.

    Since masking zeroes exactly the off-mask entries, and there the target is
    zero, the squared error can only drop: off-mask terms go from ``p**2`` to 0
    and on-mask terms are unchanged.

    Raises:
        MaskPreconditionError: if ``target`` has nonzero values off-mask.
    """
    pred = np.asarray(prediction, dtype=np.float64)
    tgt = np.asarray(target, dtype=np.float64)
    if pred.shape != tgt.shape:
        raise ValueError("prediction and target shapes differ")
    keep = masks.channel_mask().astype(bool)
    keep = np.broadcast_to(keep, tgt.shape)
    off = ~keep & (tgt != 0)
    if off.any():
        raise MaskPreconditionError(f"target nonzero at {int(off.sum())} off-mask entries")
    before = float(np.mean((pred - tgt) ** 2))
    after = float(np.mean((apply_masks(pred, masks) - tgt) ** 2))
    return {
        "mse_before": before,
        "mse_after": after,
        "off_mask_energy": float(np.sum(pred[~keep] ** 2)),
    }


def write_masks(masks: RoadMasks, path: str | os.PathLike) -> None:
    """GFMK layout: magic, u16 version, H and W as u32, u16-prefixed city name,
    then four bit-packed H*W planes (row-major, least significant bit first)."""
    h, w = masks.extent
    planes = [np.packbits(masks.masks[d].reshape(-1), bitorder="little").tobytes() for d in range(4)]
    payload = b"".join([pack_header(MASK_MAGIC), pack_extents((h, w)), pack_string(masks.city), *planes])
    atomic_write(path, payload)


def read_masks(path: str | os.PathLike) -> RoadMasks:
    with open(path, "rb") as f:
        r = ByteReader(f.read(), what=f"mask file {os.fspath(path)}")
    r.header(MASK_MAGIC)
    h, w = r.unpack("<2I")
    city = r.string()
    nbytes = (h * w + 7) // 8
    planes = []
    for _ in range(4):
        bits = np.frombuffer(r.take(nbytes), dtype=np.uint8)
        planes.append(np.unpackbits(bits, count=h * w, bitorder="little").reshape(h, w))
    r.finish()
    return RoadMasks(city, np.stack(planes))
