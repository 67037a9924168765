"""Regional maximum activation (RMAC) descriptors and the near-duplicate audit."""

from __future__ import annotations

import csv
import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Hashable, Literal

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

DESCRIPTOR_MAGIC = b"RMACDESC"


@dataclass
class FeatureVolume:
    """A C x W x H activation volume; ``data[c, x, y]``."""

    data: np.ndarray
    source_id: Hashable = None
    resolution_tag: str = ""

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 3 or min(self.data.shape) < 1:
            raise ValueError(f"feature volume must be C x W x H with positive sizes, got {self.data.shape}")

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def height(self) -> int:
        return self.data.shape[2]


class RmacConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    L: int = Field(3, ge=1)
    stride_fraction: float = Field(0.6, gt=0.0, le=1.0)
    pooling: Literal["max", "alpha-sum"] = "max"
    alpha: float = Field(10.0, gt=0.0)
    resolutions: list[int] = Field(default_factory=lambda: [12, 16, 24])


@dataclass(frozen=True)
class RegionGrid:
    regions: tuple[tuple[int, int, int], ...]
    scales_used: int

    def __len__(self) -> int:
        return len(self.regions)


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def _offsets(extent: int, side: int, stride: int) -> list[int]:
    offs = list(range(0, extent - side + 1, stride))
    if offs[-1] + side < extent:
        offs.append(extent - side)
    return offs


def region_grid(width: int, height: int, cfg: RmacConfig | None = None) -> RegionGrid:
    """Square windows at scales l = 1..L.

    Side ``round(2 min(W,H) / (l+1))`` clamped to [1, min(W,H)], stride
    ``max(1, round(fraction * k_w))`` on the unrounded width, rounding half up;
    a last window is snapped to the far edge when stepping would leave a gap.
    """
    cfg = cfg or RmacConfig()
    if width < 1 or height < 1:
        raise ValueError("feature map sizes must be positive")
    short = min(width, height)
    seen: dict[tuple[int, int, int], None] = {}
    for level in range(1, cfg.L + 1):
        k_w = 2.0 * short / (level + 1)
        side = min(max(_round_half_up(k_w), 1), short)
        stride = max(1, _round_half_up(cfg.stride_fraction * k_w))
        for x0 in _offsets(width, side, stride):
            for y0 in _offsets(height, side, stride):
                seen.setdefault((x0, y0, side), None)
    return RegionGrid(tuple(seen), cfg.L)


def mac(fv: FeatureVolume) -> np.ndarray:
    """Per-channel spatial maximum."""
    return fv.data.reshape(fv.channels, -1).max(axis=1)


def _l2(v: np.ndarray) -> np.ndarray:
    n = np.sqrt(np.dot(v, v))
    return v / n if n > 0 else np.zeros_like(v)


def _pool(block: np.ndarray, cfg: RmacConfig) -> np.ndarray:
    flat = block.reshape(block.shape[0], -1)
    if cfg.pooling == "max":
        return flat.max(axis=1)
    return np.power(flat, cfg.alpha).sum(axis=1)


def rmac_descriptor(fv: FeatureVolume, cfg: RmacConfig | None = None) -> np.ndarray:
    """Pool each region, l2-normalize region vectors, sum them, l2-normalize."""
    cfg = cfg or RmacConfig()
    total = np.zeros(fv.channels)
    for x0, y0, side in region_grid(fv.width, fv.height, cfg).regions:
        total += _l2(_pool(fv.data[:, x0 : x0 + side, y0 : y0 + side], cfg))
    return _l2(total)


def multires_rmac(volumes: list[FeatureVolume], cfg: RmacConfig | None = None) -> np.ndarray:
    """Sum of per-resolution descriptors, l2-normalized."""
    if not volumes:
        raise ValueError("multires_rmac needs at least one volume")
    channels = {v.channels for v in volumes}
    if len(channels) != 1:
        raise ValueError(f"volumes disagree on channel count: {sorted(channels)}")
    return _l2(sum(rmac_descriptor(v, cfg) for v in volumes))


def find_ambiguous_pairs(descriptors: np.ndarray, top_k: int) -> list[tuple[int, int, float]]:
    """Closest unordered pairs by euclidean distance, ties broken by (i, j)."""
    x = np.asarray(descriptors, dtype=np.float64)
    n = len(x)
    if n < 2:
        raise ValueError("need at least two descriptors")
    if top_k < 1:
        raise ValueError("top_k must be at least 1")
    ii, jj = np.triu_indices(n, k=1)
    diff = x[ii] - x[jj]
    dist = np.sqrt((diff * diff).sum(axis=1))
    # triu order is already lexicographic in (i, j); a stable sort keeps it for ties
    order = np.argsort(dist, kind="stable")[:top_k]
    return [(int(ii[o]), int(jj[o]), float(dist[o])) for o in order]


# -- file formats ---------------------------------------------------------------
def save_descriptors(path: str | Path, descriptors: np.ndarray) -> None:
    """``RMACDESC`` magic, u64 n, u64 d, then n*d little-endian float64."""
    x = np.ascontiguousarray(descriptors, dtype="<f8")
    if x.ndim != 2:
        raise ValueError("descriptors must be an n x d matrix")
    with open(path, "wb") as fh:
        fh.write(DESCRIPTOR_MAGIC)
        fh.write(struct.pack("<QQ", *x.shape))
        fh.write(x.tobytes())


def load_descriptors(path: str | Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if raw[:8] != DESCRIPTOR_MAGIC:
        raise ValueError(f"{path}: not a descriptor dump (bad magic)")
    n, d = struct.unpack_from("<QQ", raw, 8)
    if len(raw) != 24 + 8 * n * d:
        raise ValueError(f"{path}: size does not match header ({n} x {d})")
    return np.frombuffer(raw, dtype="<f8", offset=24).reshape(n, d).astype(np.float64)


def write_pair_report(path: str | Path, pairs: list[tuple[int, int, float]]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["rank", "i", "j", "distance"])
        for rank, (i, j, d) in enumerate(pairs, start=1):
            writer.writerow([rank, i, j, f"{d:.9g}"])
