"""Sub-region sampling, coupled units and geometric ground truth."""
from __future__ import annotations

import itertools
import json
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .volume import SubRegion, Volume, extract, foreground_fraction, physical_center

__all__ = [
    "SubRegion", "CoupledUnit", "SamplingExhausted", "sample_subregions", "corner_offsets",
    "couple_corners", "build_coupled_unit", "gap_ground_truth", "center_expectation",
    "corner_distance_samples", "regions_manifest",
]


class SamplingExhausted(RuntimeError):
    def __init__(self, found: int, wanted: int, attempts: int):
        super().__init__(f"found {found}/{wanted} foreground regions after {attempts} attempts")
        self.found = found
        self.wanted = wanted
        self.attempts = attempts


def sample_subregions(v: Volume, alpha: int, size, min_fg: float, rng: np.random.Generator,
                      threshold: float = 0.05, max_attempts: int | None = None,
                      mode: str = "random") -> list[SubRegion]:
    """Draw ``alpha`` regions of ``size`` voxels that pass the foreground filter.

    ``mode="random"`` rejection-samples uniform start indices (regions may
    overlap).  ``mode="tile"`` picks ``alpha`` distinct cells of the
    non-overlapping grid of ``size``-blocks.
    """
    if alpha < 2:
        raise ValueError(f"alpha must be >= 2, got {alpha}")
    size = tuple(int(s) for s in size)
    room = np.asarray(v.shape) - np.asarray(size)
    if np.any(room < 0) or min(size) < 1:
        raise ValueError(f"region size {size} does not fit volume shape {v.shape}")
    if max_attempts is None:
        max_attempts = 200 * alpha

    if mode == "tile":
        grid = [range(0, v.shape[a] - size[a] + 1, size[a]) for a in range(3)]
        cells = [c for c in itertools.product(*grid) if foreground_fraction(v, c, size, threshold) >= min_fg]
        if len(cells) < alpha:
            raise SamplingExhausted(len(cells), alpha, int(np.prod([len(g) for g in grid])))
        pick = rng.choice(len(cells), size=alpha, replace=False)
        return [extract(v, cells[i], size) for i in pick]
    if mode != "random":
        raise ValueError(f"unknown sampling mode {mode!r}")

    regions: list[SubRegion] = []
    attempts = 0
    while len(regions) < alpha:
        if attempts >= max_attempts:
            raise SamplingExhausted(len(regions), alpha, attempts)
        attempts += 1
        start = tuple(int(rng.integers(0, r + 1)) for r in room)
        if foreground_fraction(v, start, size, threshold) >= min_fg:
            regions.append(extract(v, start, size))
    return regions


# --------------------------------------------------------------------------
# coupled units


@dataclass(frozen=True)
class CoupledUnit:
    adj1: SubRegion
    adj2: SubRegion
    dst1: SubRegion
    dst2: SubRegion
    parents: tuple[int, int]
    corners: tuple[int, int, int, int]  # corner index of adj1, adj2, dst1, dst2

    @property
    def members(self) -> tuple[SubRegion, SubRegion, SubRegion, SubRegion]:
        return self.adj1, self.adj2, self.dst1, self.dst2

    @property
    def adj_distance(self) -> float:
        return float(np.linalg.norm(self.adj1.center - self.adj2.center))

    @property
    def dst_distance(self) -> float:
        return float(np.linalg.norm(self.dst1.center - self.dst2.center))


def corner_offsets(p, v) -> np.ndarray:
    """Voxel offsets of the 8 corner-anchored ``v``-blocks inside a ``p``-block.

    Corner ``k`` has bits ``(k >> 2) & 1, (k >> 1) & 1, k & 1`` on (z, y, x),
    so the order is lexicographic.
    """
    span = np.asarray(p, dtype=np.int64) - np.asarray(v, dtype=np.int64)
    bits = np.array(list(itertools.product((0, 1), repeat=3)), dtype=np.int64)
    return bits * span


def couple_corners(start1, start2, p, v, spacing=(1.0, 1.0, 1.0)) -> tuple[tuple[int, int], tuple[int, int]]:
    """Corner indices ``(adj, dst)`` minimizing / maximizing cross-parent distance.

    Exhaustive over the 64 corner pairs; ties go to the lexicographically
    first ``(i, j)``.
    """
    offs = corner_offsets(p, v)
    spacing = np.asarray(spacing, dtype=np.float64)
    c1 = (np.asarray(start1) + offs) * spacing
    c2 = (np.asarray(start2) + offs) * spacing
    d2 = np.sum((c1[:, None, :] - c2[None, :, :]) ** 2, axis=-1).reshape(-1)
    lo = int(np.argmin(d2))
    hi = int(np.argmax(d2))
    return divmod(lo, 8), divmod(hi, 8)


def _member(parent: SubRegion, offset, v) -> SubRegion:
    start = tuple(int(s + o) for s, o in zip(parent.start, offset))
    o = [int(x) for x in offset]
    block = parent.voxels[o[0]:o[0] + v[0], o[1]:o[1] + v[1], o[2]:o[2] + v[2]]
    return SubRegion(parent.volume_id, start, tuple(v), physical_center(start, v, parent.spacing, parent.origin),
                     block, parent.spacing, parent.origin)


def build_coupled_unit(r1: SubRegion, r2: SubRegion, v, parents: tuple[int, int] = (0, 1)) -> CoupledUnit:
    v = tuple(int(x) for x in v)
    if r1.size != r2.size:
        raise ValueError(f"parent sizes differ: {r1.size} vs {r2.size}")
    if any(a > b for a, b in zip(v, r1.size)) or min(v) < 1:
        raise ValueError(f"member size {v} must satisfy 1 <= v <= p = {r1.size}")
    if r1.volume_id != r2.volume_id or r1.spacing != r2.spacing:
        raise ValueError("coupled parents must come from the same volume")
    (a1, a2), (d1, d2) = couple_corners(r1.start, r2.start, r1.size, v, r1.spacing)
    offs = corner_offsets(r1.size, v)
    return CoupledUnit(_member(r1, offs[a1], v), _member(r2, offs[a2], v),
                       _member(r1, offs[d1], v), _member(r2, offs[d2], v),
                       parents, (a1, a2, d1, d2))


# --------------------------------------------------------------------------
# ground truth


def gap_ground_truth(regions: Sequence[SubRegion]) -> np.ndarray:
    """Pairwise Euclidean distances (mm) between region centers."""
    if len(regions) < 2:
        raise ValueError("need at least 2 regions")
    if len({r.volume_id for r in regions}) != 1:
        raise ValueError("regions come from different volumes")
    centers = np.stack([r.center for r in regions])
    diff = centers[:, None, :] - centers[None, :, :]
    return np.sqrt(np.sum(diff * diff, axis=-1))


def center_expectation(s, p, v) -> tuple[np.ndarray, np.ndarray]:
    """Per-axis expected center coordinates ``((s-p+v)/2, (s+p-v)/2)`` of the two corner members.

    ``s``, ``p``, ``v`` are the volume, parent and member extents in mm.
    """
    s, p, v = (np.atleast_1d(np.asarray(x, dtype=np.float64)) for x in (s, p, v))
    if np.any(p <= v):
        raise ValueError("parent extent must exceed member extent on every axis")
    if np.any(s < p):
        raise ValueError("volume extent must be at least the parent extent")
    return (s - p + v) / 2.0, (s + p - v) / 2.0


def corner_distance_samples(s: int, p: int, v: int, n: int, rng: np.random.Generator):
    """Monte Carlo draws behind :func:`center_expectation` (unit spacing, voxel extents).

    Each draw places a parent uniformly in a cubic volume of side ``s`` and a
    partner parent one parent-width away on an independently random side of
    every axis, then couples them with :func:`couple_corners`.  The statistic
    per axis is the distance from the member center to the volume face on the
    partner's side.  Returns ``(adj, dst)`` arrays of shape ``(n, 3)``.
    """
    side = rng.choice(np.array([-1, 1]), size=(n, 3))
    start1 = rng.integers(0, s - p + 1, size=(n, 3))
    start2 = start1 + side * p
    offs = corner_offsets((p,) * 3, (v,) * 3)
    adj = np.empty((n, 3))
    dst = np.empty((n, 3))
    for k in range(n):
        (a1, _), (d1, _) = couple_corners(start1[k], start2[k], (p,) * 3, (v,) * 3)
        ca = start1[k] + offs[a1] + v / 2.0
        cd = start1[k] + offs[d1] + v / 2.0
        up = side[k] > 0
        adj[k] = np.where(up, s - ca, ca)
        dst[k] = np.where(up, s - cd, cd)
    return adj, dst


def regions_manifest(regions: Sequence[SubRegion]) -> str:
    return json.dumps({
        "volume_id": regions[0].volume_id if regions else "",
        "regions": [{"start": list(r.start), "size": list(r.size), "center": [float(c) for c in r.center]}
                    for r in regions],
    }, indent=2)
