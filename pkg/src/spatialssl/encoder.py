"""Small volumetric encoder.

One forward pass per parent region produces

* a region embedding (used by the position heads), and
* one embedding per corner-anchored member block (used for similarity),

so the number of encoder calls per batch is exactly the number of regions.
The region block is average-pooled to ``grid**3`` samples, grouped into
``(grid // cell)**3`` cells of ``cell**3`` samples each, and a shared per-cell
layer yields a feature map.  The flattened map gives the region embedding.
A member embedding mixes the map pooled over the member's corner footprint,
the region embedding and a learned per-corner code, so members can carry
where they sit and not only what they contain.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from .numerics import Eval, Node, ParamVector

ENCODER_SEGMENTS = ("enc.w1", "enc.b1", "enc.w2", "enc.b2", "enc.wm", "enc.wc", "enc.corner", "enc.bm", "enc.wo")
HEAD_SEGMENTS = ("gmp.w", "gmp.b", "rbcs.w", "rbcs.b")


def pool_block(block: np.ndarray, grid: int) -> np.ndarray:
    """Average-pool a 3-D block to ``grid`` samples per axis (nearest sampling if smaller)."""
    out = np.asarray(block, dtype=np.float64)
    for axis in range(3):
        n = out.shape[axis]
        if n >= grid:
            edges = (np.arange(grid) * n) // grid
            counts = np.diff(np.append(edges, n))
            out = np.add.reduceat(out, edges, axis=axis)
            shape = [1, 1, 1]
            shape[axis] = grid
            out = out / counts.reshape(shape)
        else:
            idx = ((np.arange(grid) + 0.5) * n / grid).astype(int)
            out = np.take(out, idx, axis=axis)
    return out


@dataclass(frozen=True)
class Encoder:
    grid: int = 8
    cell: int = 2
    hidden: int = 16
    dim: int = 32
    member_dim: int = 16

    def __post_init__(self):
        if self.grid % self.cell:
            raise ValueError(f"grid {self.grid} not divisible by cell {self.cell}")

    @property
    def cells(self) -> int:
        return self.grid // self.cell

    def init_params(self, rng: np.random.Generator, heads: bool = True) -> ParamVector:
        n_in = self.cell ** 3
        flat = self.cells ** 3 * self.hidden
        arrays = {
            "enc.w1": rng.normal(0.0, 1.0 / np.sqrt(n_in), (n_in, self.hidden)),
            "enc.b1": np.zeros(self.hidden),
            "enc.w2": rng.normal(0.0, 1.0 / np.sqrt(flat), (flat, self.dim)),
            "enc.b2": np.zeros(self.dim),
            "enc.wm": rng.normal(0.0, 1.0 / np.sqrt(self.hidden), (self.hidden, self.member_dim)),
            "enc.wc": rng.normal(0.0, 1.0 / np.sqrt(self.dim), (self.dim, self.member_dim)),
            "enc.corner": rng.normal(0.0, 1.0, (8, self.member_dim)),
            "enc.bm": np.zeros(self.member_dim),
            "enc.wo": rng.normal(0.0, 1.0 / np.sqrt(self.member_dim), (self.member_dim, self.member_dim)),
        }
        if heads:
            for name in ("gmp", "rbcs"):
                arrays[f"{name}.w"] = rng.normal(0.0, 1.0 / np.sqrt(self.dim), (self.dim, 3))
                arrays[f"{name}.b"] = np.zeros(3)
        return ParamVector.from_arrays(arrays)

    def cell_inputs(self, block: np.ndarray) -> np.ndarray:
        """Pooled block rearranged to ``(cells**3, cell**3)`` rows."""
        g, c = self.cells, self.cell
        pooled = pool_block(block, self.grid)
        x = pooled.reshape(g, c, g, c, g, c).transpose(0, 2, 4, 1, 3, 5)
        return np.ascontiguousarray(x.reshape(g ** 3, c ** 3))

    def corner_pooling(self, p, v) -> np.ndarray:
        """``(8, cells**3)`` averaging matrix mapping the feature map onto corner footprints."""
        g = self.cells
        frac = np.asarray(v, dtype=np.float64) / np.asarray(p, dtype=np.float64)
        span = np.clip(np.rint(frac * g).astype(int), 1, g)
        S = np.zeros((8, g ** 3))
        for k, bits in enumerate(itertools.product((0, 1), repeat=3)):
            ranges = [range(g - span[a], g) if b else range(span[a]) for a, b in enumerate(bits)]
            cells = [(z * g + y) * g + x for z, y, x in itertools.product(*ranges)]
            S[k, cells] = 1.0 / len(cells)
        return S

    def forward(self, ops: Eval, params: ParamVector, x: np.ndarray, corners: np.ndarray) -> tuple[Node, Node]:
        """Return ``(region embedding (dim,), member embeddings (8, member_dim))``."""
        p = {name: ops.param(params, name) for name in ENCODER_SEGMENTS}
        h = ops.tanh(ops.add(ops.matmul(x, p["enc.w1"]), p["enc.b1"]))
        region = ops.tanh(ops.add(ops.matmul(ops.reshape(h, (-1,)), p["enc.w2"]), p["enc.b2"]))
        local = ops.matmul(ops.matmul(corners, h), p["enc.wm"])
        context = ops.add(ops.matmul(region, p["enc.wc"]), p["enc.bm"])
        members = ops.tanh(ops.add(ops.add(local, p["enc.corner"]), context))
        return region, ops.matmul(members, p["enc.wo"])


def heads(ops: Eval, params: ParamVector, region, scale_mm: float) -> tuple[Node, Node]:
    """Affine position heads: ``(P_hat, M_hat)``, each ``(alpha, 3)`` in mm."""
    p_hat = ops.scale(ops.add(ops.matmul(region, ops.param(params, "gmp.w")), ops.param(params, "gmp.b")), scale_mm)
    m_hat = ops.scale(ops.add(ops.matmul(region, ops.param(params, "rbcs.w")), ops.param(params, "rbcs.b")), scale_mm)
    return p_hat, m_hat
