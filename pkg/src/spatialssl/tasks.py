"""The three spatial self-supervision objectives.

* CRSC: cosine similarity of closest vs antipodal member pairs.
* GMP: relative error of predicted pairwise center gaps.
* RBCS: accumulated predicted displacement along permutation routes.

Loss functions take an ``ops`` object (:class:`~spatialssl.numerics.Tape` or
:class:`~spatialssl.numerics.Eval`).  When ``ops`` is omitted they evaluate
eagerly on plain arrays and return a float.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numpy as np

from .encoder import Encoder, heads
from .numerics import Eval, Node, ParamVector
from .sampler import CoupledUnit, build_coupled_unit, gap_ground_truth
from .volume import SubRegion

AGGREGATE = "aggregate"
LITERAL = "literal"


def _finish(node: Node, eager: bool):
    return float(node.value) if eager else node


# --------------------------------------------------------------------------
# CRSC


def crsc_similarity(members: np.ndarray) -> np.ndarray:
    """``(n, 4, d)`` member embeddings -> ``(n, 4, 4)`` cosine blocks."""
    members = np.asarray(members, dtype=np.float64)
    ops = Eval()
    a = np.repeat(members[:, :, None, :], 4, axis=2)
    b = np.repeat(members[:, None, :, :], 4, axis=1)
    sim = ops.cosine(a, b).value
    # exact symmetry regardless of summation order
    return np.clip(0.5 * (sim + sim.transpose(0, 2, 1)), -1.0, 1.0)


def crsc_loss(adj1, adj2, dst1, dst2, ops: Eval | None = None):
    """Mean over units of ``cos(dst1, dst2) - cos(adj1, adj2)``; inputs ``(n, d)``."""
    eager = ops is None
    ops = ops or Eval()
    cos_adj = ops.cosine(adj1, adj2)
    cos_dst = ops.cosine(dst1, dst2)
    return _finish(ops.mean(ops.sub(cos_dst, cos_adj)), eager)


@dataclass(frozen=True)
class Inference:
    dst: int  # 0: first candidate pair is distant, 1: second
    tie: bool


def crsc_infer_cosines(cos_first: float, cos_second: float) -> Inference:
    if cos_first == cos_second:
        return Inference(1, True)
    return Inference(0 if cos_first < cos_second else 1, False)


def crsc_infer(e1, e2, e3, e4) -> Inference:
    """Label which of the candidate pairs ``(e1, e2)``, ``(e3, e4)`` is distant.

    The pair with the smaller cosine is distant; ties label the second pair
    and set ``tie``.
    """
    ops = Eval()
    return crsc_infer_cosines(float(ops.cosine(e1, e2).value), float(ops.cosine(e3, e4).value))


def crsc_accuracy(cos_adj, cos_dst) -> float:
    """Fraction of units whose distant pair is identified; ties count as misses."""
    cos_adj, cos_dst = np.asarray(cos_adj), np.asarray(cos_dst)
    return float(np.mean(cos_adj > cos_dst)) if cos_adj.size else float("nan")


# --------------------------------------------------------------------------
# GMP


def predicted_gaps(positions) -> np.ndarray:
    p = np.asarray(positions, dtype=np.float64)
    d = p[:, None, :] - p[None, :, :]
    return np.sqrt(np.sum(d * d, axis=-1))


def gmp_loss(positions, gaps, eps: float = 1.0, ops: Eval | None = None):
    """``mean_{i,j} ((|G_hat_ij - G_ij|) / (G_ij + eps))**2`` over all alpha^2 ordered pairs.

    ``G_hat`` is built from the rows of ``positions``; diagonal terms are zero
    by construction and skipped, so no norm is evaluated at the zero vector.
    """
    if not eps > 0:
        raise ValueError("eps must be positive")
    eager = ops is None
    ops = ops or Eval()
    gaps = np.asarray(gaps, dtype=np.float64)
    alpha = gaps.shape[0]
    i, j = np.nonzero(~np.eye(alpha, dtype=bool))
    pred = ops.norm(ops.sub(ops.gather(positions, i), ops.gather(positions, j)))
    rel = ops.mul(ops.sub(pred, gaps[i, j]), 1.0 / (gaps[i, j] + eps))
    return _finish(ops.scale(ops.sum(ops.square(rel)), 1.0 / alpha ** 2), eager)


# --------------------------------------------------------------------------
# RBCS


def iter_routes(alpha: int) -> Iterator[tuple[int, ...]]:
    """All visiting orders of ``alpha`` nodes by depth-first backtracking, lexicographic."""
    path: list[int] = []
    used = [False] * alpha

    def extend():
        if len(path) == alpha:
            yield tuple(path)
            return
        for node in range(alpha):
            if used[node]:
                continue
            used[node] = True
            path.append(node)
            yield from extend()
            path.pop()
            used[node] = False

    yield from extend()


def enumerate_routes(alpha: int, cap: int, rng: np.random.Generator | None = None) -> np.ndarray:
    """Route set ``(n_routes, alpha)``.

    All ``alpha!`` routes when they fit under ``cap``; otherwise ``cap``
    distinct routes drawn uniformly without replacement, returned sorted.
    """
    if alpha < 2 or cap < 1:
        raise ValueError(f"need alpha >= 2 and cap >= 1, got alpha={alpha}, cap={cap}")
    if math.factorial(alpha) <= cap:
        return np.array(list(iter_routes(alpha)), dtype=np.int64)
    if rng is None:
        raise ValueError("sampling routes needs an rng")
    seen: set[tuple[int, ...]] = set()
    while len(seen) < cap:
        seen.add(tuple(int(k) for k in rng.permutation(alpha)))
    return np.array(sorted(seen), dtype=np.int64)


def _check_route(route, alpha: int) -> np.ndarray:
    route = np.asarray(route, dtype=np.int64)
    if route.ndim != 1 or route.size != alpha or sorted(route.tolist()) != list(range(alpha)):
        raise ValueError(f"route {route.tolist()} is not a permutation of 0..{alpha - 1}")
    return route


def rbcs_delta(m_hat, m_true, route, mode: str = AGGREGATE) -> float:
    """Cumulative displacement error of one route.

    ``aggregate``: ``|| sum_t (M_hat[s_t+1] - M_hat[s_t]) - (M[s_last] - M[s_first]) ||``.
    ``literal``: the ground-truth endpoint displacement sits inside the sum,
    so it is subtracted once per step.
    """
    m_hat = np.asarray(m_hat, dtype=np.float64)
    m_true = np.asarray(m_true, dtype=np.float64)
    route = _check_route(route, m_hat.shape[0])
    truth = m_true[route[-1]] - m_true[route[0]]
    total = np.zeros(3)
    if mode == AGGREGATE:
        for a, b in zip(route[:-1], route[1:]):
            total += m_hat[b] - m_hat[a]
        total -= truth
    elif mode == LITERAL:
        for a, b in zip(route[:-1], route[1:]):
            total += (m_hat[b] - m_hat[a]) - truth
    else:
        raise ValueError(f"unknown RBCS mode {mode!r}")
    return float(np.sqrt(total @ total))


def rbcs_loss(m_hat, m_true, routes, mode: str = AGGREGATE, ops: Eval | None = None):
    """Mean squared cumulative displacement error over ``routes``."""
    if mode not in (AGGREGATE, LITERAL):
        raise ValueError(f"unknown RBCS mode {mode!r}")
    eager = ops is None
    ops = ops or Eval()
    routes = np.asarray(routes, dtype=np.int64)
    if routes.ndim != 2 or routes.shape[0] < 1:
        raise ValueError("need at least one route")
    k, alpha = routes.shape
    m_true = np.asarray(m_true, dtype=np.float64)
    steps = ops.sub(ops.gather(m_hat, routes[:, 1:].reshape(-1)), ops.gather(m_hat, routes[:, :-1].reshape(-1)))
    pred = ops.sum(ops.reshape(steps, (k, alpha - 1, 3)), axis=1)
    truth = m_true[routes[:, -1]] - m_true[routes[:, 0]]
    if mode == LITERAL:
        truth = truth * (alpha - 1)
    err = ops.sum(ops.square(ops.sub(pred, truth)), axis=1)
    return _finish(ops.mean(err), eager)


def rbcs_pair_loss(m_hat, m_true) -> float:
    """Ordered endpoint-pair form of the fully enumerated aggregate loss."""
    m_hat = np.asarray(m_hat, dtype=np.float64)
    m_true = np.asarray(m_true, dtype=np.float64)
    alpha = m_hat.shape[0]
    total, n = 0.0, 0
    for i in range(alpha):
        for j in range(alpha):
            if i != j:
                r = (m_hat[j] - m_hat[i]) - (m_true[j] - m_true[i])
                total += float(r @ r)
                n += 1
    return total / n


def endpoint_errors(m_hat, m_true) -> np.ndarray:
    """``|| (M_hat_j - M_hat_i) - (M_j - M_i) ||`` for every ordered pair ``i != j``."""
    m_hat = np.asarray(m_hat, dtype=np.float64)
    m_true = np.asarray(m_true, dtype=np.float64)
    i, j = np.nonzero(~np.eye(m_hat.shape[0], dtype=bool))
    r = (m_hat[j] - m_hat[i]) - (m_true[j] - m_true[i])
    return np.sqrt(np.sum(r * r, axis=1))


# --------------------------------------------------------------------------
# batches


@dataclass
class Batch:
    """Everything derived from one set of ``alpha`` regions of a volume."""

    regions: list[SubRegion]
    inputs: list[np.ndarray]
    corners: np.ndarray
    units: list[CoupledUnit]
    adj_index: np.ndarray  # (n_units, 2) rows into the stacked (alpha * 8) member table
    dst_index: np.ndarray
    gaps: np.ndarray
    centers: np.ndarray
    routes: np.ndarray

    @property
    def alpha(self) -> int:
        return len(self.regions)


def make_batch(regions: Sequence[SubRegion], member_size, encoder: Encoder, routes: np.ndarray) -> Batch:
    regions = list(regions)
    units, adj, dst = [], [], []
    for a, b in itertools.combinations(range(len(regions)), 2):
        unit = build_coupled_unit(regions[a], regions[b], member_size, parents=(a, b))
        c = unit.corners
        units.append(unit)
        adj.append((8 * a + c[0], 8 * b + c[1]))
        dst.append((8 * a + c[2], 8 * b + c[3]))
    return Batch(
        regions=regions,
        inputs=[encoder.cell_inputs(r.voxels) for r in regions],
        corners=encoder.corner_pooling(regions[0].size, member_size),
        units=units,
        adj_index=np.array(adj, dtype=np.int64).reshape(-1, 2),
        dst_index=np.array(dst, dtype=np.int64).reshape(-1, 2),
        gaps=gap_ground_truth(regions),
        centers=np.stack([r.center for r in regions]),
        routes=routes,
    )


class CountingEncoder:
    """Wraps an :class:`Encoder` and counts forward passes."""

    def __init__(self, encoder: Encoder):
        self.encoder = encoder
        self.calls = 0

    def forward(self, ops, params, x, corners):
        self.calls += 1
        return self.encoder.forward(ops, params, x, corners)


@dataclass
class Encoded:
    region: Node  # (alpha, dim)
    members: Node  # (alpha * 8, member_dim)
    selected: int
    tracked: list[bool] = field(default_factory=list)


def encode_batch(ops: Eval, encoder: Encoder | CountingEncoder, batch: Batch, online: ParamVector,
                 momentum: ParamVector, rng: np.random.Generator, selected: int | None = None) -> Encoded:
    """One online (tracked) pass for a uniformly chosen region, momentum passes for the rest."""
    alpha = batch.alpha
    if alpha < 2:
        raise ValueError(f"alpha must be >= 2, got {alpha}")
    if selected is None:
        selected = int(rng.integers(alpha))
    regions, members, tracked = [], [], []
    for i, x in enumerate(batch.inputs):
        if i == selected:
            r, m = encoder.forward(ops, online, x, batch.corners)
        else:
            r, m = encoder.forward(Eval(), momentum, x, batch.corners)
            r, m = ops.const(r.value), ops.const(m.value)
        regions.append(r)
        members.append(m)
        tracked.append(i == selected)
    member_table = ops.reshape(ops.stack(members), (alpha * 8, -1))
    return Encoded(ops.stack(regions), member_table, selected, tracked)


@dataclass(frozen=True)
class LossWeights:
    crsc: float = 1.0
    gmp: float = 1.0
    rbcs: float = 1.0


def crsc_term(ops: Eval, batch: Batch, encoded: Encoded) -> tuple[Node, Node, Node]:
    """``(L_crsc, cos_adj, cos_dst)`` over the batch's coupled units."""
    members = encoded.members
    a1, a2 = ops.gather(members, batch.adj_index[:, 0]), ops.gather(members, batch.adj_index[:, 1])
    d1, d2 = ops.gather(members, batch.dst_index[:, 0]), ops.gather(members, batch.dst_index[:, 1])
    cos_adj, cos_dst = ops.cosine(a1, a2), ops.cosine(d1, d2)
    return ops.mean(ops.sub(cos_dst, cos_adj)), cos_adj, cos_dst


def total_loss(ops: Eval, params: ParamVector, batch: Batch, encoded: Encoded,
               weights: LossWeights = LossWeights(), eps: float = 1.0, mode: str = AGGREGATE,
               scale_mm: float = 100.0) -> tuple[Node, dict]:
    """Weighted sum of the three task losses; also returns the components and diagnostics."""
    l_crsc, cos_adj, cos_dst = crsc_term(ops, batch, encoded)

    p_hat, m_hat = heads(ops, params, encoded.region, scale_mm)
    l_gmp = gmp_loss(p_hat, batch.gaps, eps, ops=ops)
    l_rbcs = rbcs_loss(m_hat, batch.centers, batch.routes, mode, ops=ops)

    total = ops.add(ops.add(ops.scale(l_crsc, weights.crsc), ops.scale(l_gmp, weights.gmp)),
                    ops.scale(l_rbcs, weights.rbcs))
    info = {
        "l_crsc": float(l_crsc.value), "l_gmp": float(l_gmp.value), "l_rbcs": float(l_rbcs.value),
        "l_total": float(total.value),
        "cos_adj": cos_adj.value, "cos_dst": cos_dst.value,
        "p_hat": p_hat.value, "m_hat": m_hat.value,
    }
    return total, info
