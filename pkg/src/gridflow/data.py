"""Frames, movies, samples and the "GFMV" movie container.

A movie is one day of 288 five-minute frames, stored channel-last as uint8.
Channel ``2d`` is the volume and ``2d + 1`` the speed for heading quadrant
``d`` (0 NE, 1 NW, 2 SE, 3 SW); channel 8 is the incident level.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass
from typing import Iterable, Optional, Sequence, TypeVar

import numpy as np

from .formats import (
    ByteReader,
    ExtentOverflowError,
    atomic_write,
    pack_extents,
    pack_header,
    pack_string,
)

MOVIE_MAGIC = b"GFMV"

BIN_MINUTES = 5
FRAMES_PER_DAY = 288
T_IN = 12
T_OUT = 6
C_IN = 9
C_OUT = 8
C_STATIC = 1
OUTPUT_MINUTES = (5, 10, 15, 30, 45, 60)

DIRECTIONS = ("NE", "NW", "SE", "SW")
EVENT_CHANNEL = 8

INPUT_CHANNELS = T_IN * C_IN + C_STATIC
TARGET_CHANNELS = T_OUT * C_OUT


def volume_channel(d: int) -> int:
    return 2 * d


def speed_channel(d: int) -> int:
    return 2 * d + 1


class MovieTooShortError(ValueError):
    pass


class EmptySplitError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class Movie:
    city: str
    day_index: int
    frames: np.ndarray  # (T, H, W, C) uint8
    bin_minutes: int = BIN_MINUTES

    def __post_init__(self):
        if self.frames.dtype != np.uint8 or self.frames.ndim != 4:
            raise ValueError("movie frames must be a 4-D uint8 array (T, H, W, C)")

    @property
    def shape(self) -> tuple[int, int, int, int]:
        return self.frames.shape

    def __eq__(self, other) -> bool:
        if not isinstance(other, Movie):
            return NotImplemented
        return (
            self.city == other.city
            and self.day_index == other.day_index
            and self.bin_minutes == other.bin_minutes
            and self.frames.shape == other.frames.shape
            and np.array_equal(self.frames, other.frames)
        )


@dataclass(frozen=True)
class Sample:
    input: np.ndarray  # (T_IN*C_IN + C_STATIC, H, W), float in [0, 1]
    target: np.ndarray  # (T_OUT*C_OUT, H, W), float in [0, 1]
    origin: tuple[str, int, int]  # (city, day_index, t_start)

    @property
    def sample_id(self) -> str:
        city, day, t = self.origin
        return f"{city}_d{day:03d}_t{t:03d}"


def write_movie(movie: Movie, path: str | os.PathLike) -> None:
    """Write ``movie`` in the GFMV layout (see :func:`read_movie`)."""
    t, h, w, c = movie.frames.shape
    if not -(2**31) <= movie.day_index < 2**31:
        raise ExtentOverflowError("day_index does not fit in i32")
    payload = b"".join(
        [
            pack_header(MOVIE_MAGIC),
            pack_extents((t, h, w, c)),
            pack_string(movie.city),
            struct.pack("<i", movie.day_index),
            np.ascontiguousarray(movie.frames).tobytes(),
        ]
    )
    atomic_write(path, payload)


def read_movie(path: str | os.PathLike) -> Movie:
    """Read a GFMV file.

    Layout: magic ``GFMV``, u16 version, T/H/W/C as u32, u16-prefixed UTF-8
    city name, i32 day index, then ``T*H*W*C`` frame bytes in time-major,
    row-major, channel-last order.
    """
    with open(path, "rb") as f:
        r = ByteReader(f.read(), what=f"movie {os.fspath(path)}")
    r.header(MOVIE_MAGIC)
    t, h, w, c = r.unpack("<4I")
    city = r.string()
    (day_index,) = r.unpack("<i")
    n = t * h * w * c
    frames = np.frombuffer(r.take(n), dtype=np.uint8).reshape(t, h, w, c).copy()
    r.finish()
    return Movie(city=city, day_index=day_index, frames=frames)


def normalize(frames: np.ndarray, dtype=np.float32) -> np.ndarray:
    """Map uint8 values onto [0, 1] by dividing by 255."""
    return np.asarray(frames, dtype=dtype) / dtype(255.0)


def output_offsets(bin_minutes: int = BIN_MINUTES) -> list[int]:
    """Frame offsets of the six forecast horizons, counted from the last input frame."""
    if bin_minutes != BIN_MINUTES:
        raise ValueError(f"horizon offsets are defined for {BIN_MINUTES}-minute bins")
    return [m // bin_minutes for m in OUTPUT_MINUTES]


def target_frame_indices(t_start: int) -> list[int]:
    last = t_start + T_IN - 1
    return [last + k for k in output_offsets()]


class SampleSet(Sequence[Sample]):
    """Samples of one movie, built on access to keep memory flat.

    Args:
        movie: Source movie.
        static_map: (H, W) binary intersection map appended as the last input
            channel.
        stride: Spacing between consecutive window starts.
        dtype: Float type of the materialized tensors.
    """

    def __init__(self, movie: Movie, static_map: np.ndarray, stride: int = 1, dtype=np.float32):
        t = movie.frames.shape[0]
        span = T_IN - 1 + output_offsets()[-1] + 1
        if t < span:
            raise MovieTooShortError(f"movie has {t} frames, need at least {span}")
        if stride < 1:
            raise ValueError("stride must be >= 1")
        h, w = movie.frames.shape[1:3]
        if static_map.shape != (h, w):
            raise ValueError(f"static map {static_map.shape} does not match movie extent {(h, w)}")
        self.movie = movie
        self.static = np.asarray(static_map, dtype=dtype)
        self.dtype = dtype
        self.starts = list(range(0, t - span + 1, stride))

    def __len__(self) -> int:
        return len(self.starts)

    def __getitem__(self, i):
        if isinstance(i, slice):
            return [self[j] for j in range(*i.indices(len(self)))]
        t0 = self.starts[i]
        frames = self.movie.frames
        h, w = frames.shape[1:3]
        window = frames[t0 : t0 + T_IN]  # (T_IN, H, W, C_IN)
        x = np.empty((INPUT_CHANNELS, h, w), dtype=self.dtype)
        x[: T_IN * C_IN] = normalize(window.transpose(0, 3, 1, 2).reshape(T_IN * C_IN, h, w), self.dtype)
        x[T_IN * C_IN :] = self.static
        tgt = frames[target_frame_indices(t0)][..., :C_OUT]  # (T_OUT, H, W, C_OUT)
        y = normalize(tgt.transpose(0, 3, 1, 2).reshape(TARGET_CHANNELS, h, w), self.dtype)
        return Sample(input=x, target=y, origin=(self.movie.city, self.movie.day_index, t0))


def extract_samples(movie: Movie, static_map: np.ndarray, stride: int = 1, dtype=np.float32) -> SampleSet:
    """All 12-in / 6-out windows of ``movie`` (``T - 24 + 1`` of them at stride 1)."""
    return SampleSet(movie, static_map, stride=stride, dtype=dtype)


class ConcatSamples(Sequence[Sample]):
    """Read-only concatenation of several sample sequences."""

    def __init__(self, parts: Iterable[Sequence[Sample]]):
        self.parts = list(parts)
        self.offsets = np.cumsum([0] + [len(p) for p in self.parts])

    def __len__(self) -> int:
        return int(self.offsets[-1])

    def __getitem__(self, i):
        if isinstance(i, slice):
            return [self[j] for j in range(*i.indices(len(self)))]
        if i < 0:
            i += len(self)
        if not 0 <= i < len(self):
            raise IndexError(i)
        k = int(np.searchsorted(self.offsets, i, side="right")) - 1
        return self.parts[k][i - int(self.offsets[k])]


T = TypeVar("T")


def split_dataset(
    items: Sequence[T],
    ratios: tuple[float, float] = (181, 18),
    regimes: Optional[dict[int, str]] = None,
) -> dict[str, list[T]]:
    """Split movies (or anything with ``day_index``) into train/validation/test.

    Without ``regimes`` the split is proportional over day-sorted items:
    ``floor(n * p_train)`` train days (capped at ``n - 2``), then
    ``round(n * p_val)`` validation days capped so at least one day remains for
    test, and the remainder as test. Every split gets at least one day.

    With ``regimes`` (day_index -> "first_half" | "second_half") training
    takes every first-half day and the second-half days are divided between
    validation (first ``ceil(n/2)`` by day) and test (the rest).
    """
    ordered = sorted(items, key=lambda m: m.day_index)
    n = len(ordered)
    if n < 3:
        raise EmptySplitError(f"need at least 3 days for train/validation/test, got {n}")

    if regimes is not None:
        first = [m for m in ordered if regimes[m.day_index] == "first_half"]
        second = [m for m in ordered if regimes[m.day_index] == "second_half"]
        if not first or len(second) < 2:
            raise EmptySplitError("regime split needs >= 1 first-half and >= 2 second-half days")
        n_val = (len(second) + 1) // 2
        return {"train": first, "validation": second[:n_val], "test": second[n_val:]}

    total = float(sum(ratios))
    n_train = min(int(np.floor(n * ratios[0] / total)), n - 2)
    n_train = max(n_train, 1)
    n_val = int(round(n * ratios[1] / total))
    n_val = min(max(n_val, 1), n - n_train - 1)
    return {
        "train": ordered[:n_train],
        "validation": ordered[n_train : n_train + n_val],
        "test": ordered[n_train + n_val :],
    }
