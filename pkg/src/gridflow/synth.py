"""Procedural cities and traffic movies with known road geometry.

A city is a grid of two-way arterials plus perpendicular side streets hanging
off them (some one-way). Each road pixel carries traffic in the heading
quadrants of its road: eastbound -> NE, northbound -> NW, southbound -> SE,
westbound -> SW. Traffic is zero everywhere else, so the road raster is an
exact oracle for masks learned from the data.

Geometry depends only on ``seed``; a day's random stream depends only on
``(seed, day_index)``. The seasonal regime rescales speed and offsets volume
without touching either stream.
"""

from __future__ import annotations

import dataclasses
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .data import (
    C_IN,
    EVENT_CHANNEL,
    FRAMES_PER_DAY,
    Movie,
    speed_channel,
    volume_channel,
    write_movie,
)

logger = logging.getLogger(__name__)

FIRST_HALF = "first_half"
SECOND_HALF = "second_half"
REGIMES = (FIRST_HALF, SECOND_HALF)
SECOND_HALF_FIRST_DAY = 182

# heading quadrant per road orientation: (forward, backward)
_HEADINGS = {"h": (0, 3), "v": (1, 2)}


class DegenerateCityError(ValueError):
    pass


@dataclass(frozen=True)
class CitySpec:
    seed: int = 0
    height: int = 64
    width: int = 64
    road_density: float = 0.3
    n_arterials: int = 6
    seasonal_regime: str = FIRST_HALF
    noise_level: float = 6.0
    season_speed_factor: float = 0.8
    season_volume_offset: float = 15.0
    incident_rate: float = 2.0
    morning_peak_hour: float = 8.5
    evening_peak_hour: float = 17.5
    peak_width_hours: float = 1.5

    @property
    def city(self) -> str:
        return f"synth{self.seed}"

    def validate(self) -> None:
        if self.height < 32 or self.width < 32:
            raise ValueError("city extent must be at least 32x32")
        if not 0.0 < self.road_density < 1.0:
            raise ValueError("road_density must lie in (0, 1)")
        if self.seasonal_regime not in REGIMES:
            raise ValueError(f"unknown seasonal regime {self.seasonal_regime!r}")
        if self.noise_level < 0:
            raise ValueError("noise_level must be non-negative")
        if self.n_arterials < 1:
            raise DegenerateCityError("a city needs at least one arterial to attach streets to")


@dataclass(eq=False)
class GroundTruth:
    """Road geometry of a city.

    ``road_rasters[d]`` marks pixels that can carry traffic heading in
    quadrant ``d``; ``intersections`` marks pixels shared by a horizontal and
    a vertical road. ``free_speed`` and ``base_volume`` are per-direction
    traffic attributes (zero off-road) used by :func:`simulate_day`.
    """

    road_rasters: np.ndarray  # (4, H, W) uint8
    intersections: np.ndarray  # (H, W) uint8
    free_speed: np.ndarray  # (4, H, W) float32
    base_volume: np.ndarray  # (4, H, W) float32
    roads: list = field(default_factory=list)

    @property
    def union(self) -> np.ndarray:
        return self.road_rasters.any(axis=0)

    def to_bytes(self) -> bytes:
        return b"".join(
            np.ascontiguousarray(a).tobytes()
            for a in (self.road_rasters, self.intersections, self.free_speed, self.base_volume)
        )


@dataclass(frozen=True)
class Road:
    orientation: str  # "h" or "v"
    coord: int  # row for "h", column for "v"
    start: int
    stop: int  # exclusive
    kind: str  # "arterial" or "side"
    headings: tuple[int, ...]


def _spread(extent: int, count: int, rng: np.random.Generator) -> list[int]:
    gap = extent / (count + 1)
    jitter = max(0, int(gap // 4))
    out = []
    for i in range(count):
        p = int(round((i + 1) * gap)) + int(rng.integers(-jitter, jitter + 1))
        out.append(int(np.clip(p, 1, extent - 2)))
    return sorted(set(out))


def build_city(spec: CitySpec) -> GroundTruth:
    """Lay out arterials and side streets for ``spec.seed``.

    Raises:
        DegenerateCityError: when the spec yields no roads.
        ValueError: for extents below 32 or a density outside (0, 1).
    """
    spec.validate()
    h, w = spec.height, spec.width
    rng = np.random.default_rng([spec.seed, 0xC17])

    n_h = (spec.n_arterials + 1) // 2
    n_v = spec.n_arterials // 2
    roads: list[Road] = []
    for r in _spread(h, n_h, rng):
        roads.append(Road("h", r, 0, w, "arterial", _HEADINGS["h"]))
    for c in _spread(w, n_v, rng):
        roads.append(Road("v", c, 0, h, "arterial", _HEADINGS["v"]))
    arterials = list(roads)

    n_side = int(round(spec.road_density * (h + w) / 4))
    for _ in range(n_side):
        parent = arterials[int(rng.integers(len(arterials)))]
        orient = "v" if parent.orientation == "h" else "h"
        along = w if parent.orientation == "h" else h  # extent along the parent
        across = h if orient == "v" else w  # extent of the new street's axis
        coord = int(rng.integers(1, along - 1))
        length = int(rng.integers(6, max(7, across // 3)))
        if rng.random() < 0.5:
            start, stop = parent.coord, min(across, parent.coord + length)
        else:
            start, stop = max(0, parent.coord - length + 1), parent.coord + 1
        fwd, bwd = _HEADINGS[orient]
        if rng.random() < 0.3:
            headings = (fwd,) if rng.random() < 0.5 else (bwd,)
        else:
            headings = (fwd, bwd)
        roads.append(Road(orient, coord, start, stop, "side", headings))

    rasters = np.zeros((4, h, w), dtype=np.uint8)
    free_speed = np.zeros((4, h, w), dtype=np.float32)
    base_volume = np.zeros((4, h, w), dtype=np.float32)
    horiz = np.zeros((h, w), dtype=bool)
    vert = np.zeros((h, w), dtype=bool)
    for road in roads:
        if road.kind == "arterial":
            speed, vol = rng.uniform(150, 200), rng.uniform(80, 140)
        else:
            speed, vol = rng.uniform(70, 120), rng.uniform(15, 45)
        if road.orientation == "h":
            sl = (road.coord, slice(road.start, road.stop))
            horiz[sl] = True
        else:
            sl = (slice(road.start, road.stop), road.coord)
            vert[sl] = True
        for d in road.headings:
            rasters[d][sl] = 1
            free_speed[d][sl] = np.maximum(free_speed[d][sl], speed)
            base_volume[d][sl] = np.maximum(base_volume[d][sl], vol)

    if not rasters.any():
        raise DegenerateCityError("spec produced no road pixels")
    intersections = (horiz & vert).astype(np.uint8)
    return GroundTruth(rasters, intersections, free_speed, base_volume, roads)


def diurnal_profile(spec: CitySpec, n_bins: int = FRAMES_PER_DAY) -> np.ndarray:
    """Baseline plus morning and evening Gaussian bumps over one day of bins."""
    t = np.arange(n_bins, dtype=np.float64)
    bins_per_hour = n_bins / 24.0
    width = spec.peak_width_hours * bins_per_hour
    morning = np.exp(-0.5 * ((t - spec.morning_peak_hour * bins_per_hour) / width) ** 2)
    evening = np.exp(-0.5 * ((t - spec.evening_peak_hour * bins_per_hour) / width) ** 2)
    return 0.15 + 1.0 * morning + 0.9 * evening


def simulate_day(gt: GroundTruth, spec: CitySpec, day_index: int) -> Movie:
    """Simulate 288 frames of traffic on the roads of ``gt``.

    Off-road pixels stay exactly zero in all eight traffic channels, and
    on-road speed is at least 1 so every road pixel is visible in the data.
    """
    rng = np.random.default_rng([spec.seed, 0xDA7, day_index])
    t_bins = FRAMES_PER_DAY
    _, h, w = gt.road_rasters.shape
    on_road = gt.road_rasters.astype(bool)

    profile = diurnal_profile(spec, t_bins)
    amp = float(np.clip(1.0 + 0.1 * rng.standard_normal(), 0.7, 1.3))
    congestion = profile / profile.max()

    second = spec.seasonal_regime == SECOND_HALF
    speed_factor = spec.season_speed_factor if second else 1.0
    volume_offset = spec.season_volume_offset if second else 0.0

    prof = (profile * amp).astype(np.float32)[:, None, None, None]
    volume = gt.base_volume[None] * prof + np.float32(volume_offset)
    speed = gt.free_speed[None] * (1.0 - 0.45 * congestion.astype(np.float32))[:, None, None, None]
    speed *= np.float32(speed_factor)

    events = np.zeros((t_bins, h, w), dtype=np.float32)
    road_pixels = np.argwhere(gt.union)
    n_incidents = int(rng.poisson(spec.incident_rate))
    for _ in range(n_incidents):
        y, x = road_pixels[int(rng.integers(len(road_pixels)))]
        t0 = int(rng.integers(0, t_bins))
        dur = int(rng.integers(6, 37))
        level = int(rng.integers(1, 4))
        ys, xs = slice(max(0, y - 2), y + 3), slice(max(0, x - 2), x + 3)
        ts = slice(t0, min(t_bins, t0 + dur))
        speed[ts, :, ys, xs] *= np.float32(1.0 - 0.2 * level)
        events[ts, ys, xs] = np.maximum(events[ts, ys, xs], 80.0 * level)

    if spec.noise_level > 0:
        speed += np.float32(spec.noise_level) * rng.standard_normal(speed.shape, dtype=np.float32)
        volume += np.float32(spec.noise_level) * rng.standard_normal(volume.shape, dtype=np.float32)

    speed_q = np.clip(np.rint(speed), 1, 255) * on_road[None]
    volume_q = np.clip(np.rint(volume), 0, 255) * on_road[None]
    events *= gt.union[None]

    frames = np.zeros((t_bins, h, w, C_IN), dtype=np.uint8)
    for d in range(4):
        frames[..., volume_channel(d)] = volume_q[:, d]
        frames[..., speed_channel(d)] = speed_q[:, d]
    frames[..., EVENT_CHANNEL] = np.clip(events, 0, 255)
    return Movie(city=spec.city, day_index=day_index, frames=frames)


@dataclass
class ManifestRecord:
    filename: str
    day_index: int
    regime: str


@dataclass
class Manifest:
    params: dict[str, str]
    records: list[ManifestRecord]

    def regimes(self) -> dict[int, str]:
        return {r.day_index: r.regime for r in self.records}

    def city_spec(self) -> CitySpec:
        """Rebuild the generating :class:`CitySpec` from the header block."""
        kwargs = {}
        for f in dataclasses.fields(CitySpec):
            if f.name in self.params:
                kwargs[f.name] = type(f.default)(self.params[f.name])
        return CitySpec(**kwargs)

    def dumps(self) -> str:
        lines = ["# gridflow scenario"]
        lines += [f"# {k}={v}" for k, v in self.params.items()]
        lines += [f"{r.filename}\t{r.day_index}\t{r.regime}" for r in self.records]
        return "\n".join(lines) + "\n"

    @classmethod
    def loads(cls, text: str) -> "Manifest":
        params: dict[str, str] = {}
        records: list[ManifestRecord] = []
        for n, line in enumerate(text.splitlines(), 1):
            if not line.strip():
                continue
            if line.startswith("#"):
                body = line[1:].strip()
                if "=" in body:
                    k, v = body.split("=", 1)
                    params[k.strip()] = v.strip()
                continue
            parts = line.split("\t")
            if len(parts) != 3 or parts[2] not in REGIMES:
                raise ValueError(f"manifest line {n}: expected '<file>\\t<day>\\t<regime>', got {line!r}")
            records.append(ManifestRecord(parts[0], int(parts[1]), parts[2]))
        return cls(params, records)


MANIFEST_NAME = "manifest.tsv"


def read_manifest(path: str | os.PathLike) -> Manifest:
    return Manifest.loads(Path(path).read_text(encoding="utf-8"))


def generate_scenario(
    spec: CitySpec,
    n_days_first_half: int,
    n_days_second_half: int,
    out_dir: str | os.PathLike,
    gt: Optional[GroundTruth] = None,
) -> Manifest:
    """Write one movie per day plus a manifest recording each day's regime.

    First-half days are numbered from 0, second-half days from 182.
    """
    if n_days_first_half < 1 or n_days_second_half < 1:
        raise ValueError("scenario needs at least one day of each regime")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    gt = gt if gt is not None else build_city(spec)

    params = {f.name: str(getattr(spec, f.name)) for f in dataclasses.fields(CitySpec) if f.name != "seasonal_regime"}
    params["n_days_first_half"] = str(n_days_first_half)
    params["n_days_second_half"] = str(n_days_second_half)

    plan = [(i, FIRST_HALF) for i in range(n_days_first_half)]
    plan += [(SECOND_HALF_FIRST_DAY + i, SECOND_HALF) for i in range(n_days_second_half)]
    records = []
    for day, regime in plan:
        movie = simulate_day(gt, dataclasses.replace(spec, seasonal_regime=regime), day)
        name = f"{spec.city}_day{day:03d}.gfmv"
        write_movie(movie, out / name)
        records.append(ManifestRecord(name, day, regime))
        logger.info("wrote %s (%s)", name, regime)

    manifest = Manifest(params, records)
    (out / MANIFEST_NAME).write_text(manifest.dumps(), encoding="utf-8")
    return manifest
