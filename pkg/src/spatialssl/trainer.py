"""Pretraining loop, checkpoints and evaluation.

Checkpoint file layout (all integers little-endian):

====== ======= ===========================================================
offset size    content
====== ======= ===========================================================
0      8       magic ``b"SSLCKPT\\0"``
8      4       format version (uint32, currently 1)
12     8       header length ``H`` in bytes (uint64)
20     H       UTF-8 JSON header: config, iteration, optimizer step count,
               rng state and the blob table ``[{name, layout, count}]``
20+H   8*N     float64 blob: ``online``, ``momentum``, ``adam_m``, ``adam_v``
               in table order; ``N`` is the sum of the table counts
====== ======= ===========================================================
"""
from __future__ import annotations

import csv
import dataclasses
import json
import logging
import struct
import time
from dataclasses import dataclass, field
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Callable

import numpy as np

from .config import TrainConfig
from .encoder import ENCODER_SEGMENTS, Encoder, heads
from .numerics import Eval, NumericOverflowError, ParamVector, Tape, backward, ema_update
from .sampler import sample_subregions
from .tasks import (Batch, CountingEncoder, LossWeights, crsc_accuracy, crsc_term, encode_batch, endpoint_errors,
                    enumerate_routes, gmp_loss, make_batch, predicted_gaps, rbcs_loss, total_loss)
from .volume import Volume, WindowSpec, apply_window, mm_to_voxels, synth_volume

log = logging.getLogger(__name__)

MAGIC = b"SSLCKPT\0"
VERSION = 1
BLOBS = ("online", "momentum", "adam_m", "adam_v")
CSV_HEADER = ("iter", "l_crsc", "l_gmp", "l_rbcs", "l_total", "crsc_acc", "wall_ms")


class CheckpointFormatError(ValueError):
    def __init__(self, msg: str, offset: int):
        super().__init__(f"{msg} (offset {offset})")
        self.offset = offset


class TrainingAborted(RuntimeError):
    def __init__(self, msg: str, checkpoint: "Checkpoint"):
        super().__init__(msg)
        self.checkpoint = checkpoint


@dataclass
class Checkpoint:
    config: TrainConfig
    online: ParamVector
    momentum: ParamVector
    adam_m: np.ndarray
    adam_v: np.ndarray
    adam_t: int
    iteration: int
    rng_state: dict

    def rng(self) -> np.random.Generator:
        bitgen = np.random.PCG64()
        bitgen.state = self.rng_state
        return np.random.Generator(bitgen)

    def copy(self) -> "Checkpoint":
        return Checkpoint(TrainConfig.from_dict(self.config.to_dict()), self.online.copy(), self.momentum.copy(),
                          self.adam_m.copy(), self.adam_v.copy(), self.adam_t, self.iteration,
                          json.loads(json.dumps(self.rng_state)))


# --------------------------------------------------------------------------
# serialization


def checkpoint_bytes(ck: Checkpoint) -> bytes:
    arrays = {"online": ck.online.values, "momentum": ck.momentum.values,
              "adam_m": ck.adam_m, "adam_v": ck.adam_v}
    layouts = {"online": ck.online.layout_json(), "momentum": ck.momentum.layout_json(),
               "adam_m": ck.online.layout_json(), "adam_v": ck.online.layout_json()}
    header = {
        "config": ck.config.to_dict(),
        "iteration": ck.iteration,
        "adam_t": ck.adam_t,
        "rng_state": ck.rng_state,
        "blobs": [{"name": n, "layout": layouts[n], "count": int(arrays[n].size)} for n in BLOBS],
    }
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    blob = b"".join(np.ascontiguousarray(arrays[n], dtype="<f8").tobytes() for n in BLOBS)
    return MAGIC + struct.pack("<IQ", VERSION, len(head)) + head + blob


def checkpoint_from_bytes(data: bytes) -> Checkpoint:
    if len(data) < 20:
        raise CheckpointFormatError("truncated preamble", len(data))
    if data[:8] != MAGIC:
        raise CheckpointFormatError("bad magic", 0)
    version, hlen = struct.unpack("<IQ", data[8:20])
    if version != VERSION:
        raise CheckpointFormatError(f"unsupported version {version}, expected {VERSION}", 8)
    if len(data) < 20 + hlen:
        raise CheckpointFormatError(f"truncated header: need {hlen} bytes", len(data))
    try:
        header = json.loads(data[20:20 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointFormatError(f"corrupt header: {exc}", 20) from exc
    offset = 20 + hlen
    arrays = {}
    for entry in header["blobs"]:
        nbytes = 8 * int(entry["count"])
        if len(data) < offset + nbytes:
            raise CheckpointFormatError(f"truncated blob {entry['name']!r}", len(data))
        arrays[entry["name"]] = (entry, np.frombuffer(data, dtype="<f8", count=int(entry["count"]),
                                                      offset=offset).astype(np.float64))
        offset += nbytes
    if offset != len(data):
        raise CheckpointFormatError(f"{len(data) - offset} trailing bytes", offset)
    missing = [n for n in BLOBS if n not in arrays]
    if missing:
        raise CheckpointFormatError(f"missing blobs {missing}", 20)
    try:
        online = ParamVector.from_layout_json(arrays["online"][0]["layout"], arrays["online"][1])
        momentum = ParamVector.from_layout_json(arrays["momentum"][0]["layout"], arrays["momentum"][1])
    except ValueError as exc:
        raise CheckpointFormatError(f"inconsistent parameter layout: {exc}", 20) from exc
    return Checkpoint(TrainConfig.from_dict(header["config"]), online, momentum,
                      arrays["adam_m"][1], arrays["adam_v"][1], int(header["adam_t"]),
                      int(header["iteration"]), header["rng_state"])


def save_checkpoint(ck: Checkpoint, path: str | Path) -> Path:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(checkpoint_bytes(ck))
    tmp.replace(path)
    return path


def load_checkpoint(path: str | Path) -> Checkpoint:
    return checkpoint_from_bytes(Path(path).read_bytes())


# --------------------------------------------------------------------------
# setup


def build_encoder(cfg: TrainConfig) -> Encoder:
    m = cfg.model
    return Encoder(grid=m.grid, cell=m.cell, hidden=m.hidden, dim=m.dim, member_dim=m.member_dim)


def initial_checkpoint(cfg: TrainConfig) -> Checkpoint:
    cfg.validate()
    rng = np.random.default_rng(cfg.run.seed)
    online = build_encoder(cfg).init_params(rng)
    momentum = online.select(ENCODER_SEGMENTS)
    zeros = np.zeros(len(online))
    return Checkpoint(cfg, online, momentum, zeros.copy(), zeros.copy(), 0, 0, rng.bit_generator.state)


_POOLS: dict[tuple, tuple[Volume, ...]] = {}


def volume_pool(cfg: TrainConfig, seeds, workers: int = 1) -> tuple[Volume, ...]:
    """Windowed phantoms for ``seeds``, cached per phantom/window configuration.

    ``workers > 1`` synthesizes on a thread pool; each volume depends only on
    its own seed, so the result is the same either way.
    """
    seeds = tuple(int(x) for x in seeds)
    s = cfg.sampling
    key = (json.dumps(dataclasses.asdict(cfg.phantom), sort_keys=True), seeds, s.window_level, s.window_width)
    if key not in _POOLS:
        spec = cfg.phantom.spec()
        window = WindowSpec(s.window_level, s.window_width)

        def make(seed):
            return apply_window(synth_volume(spec, seed), window)

        if workers > 1:
            with ThreadPoolExecutor(max_workers=workers) as ex:
                vols = tuple(ex.map(make, seeds))
        else:
            vols = tuple(make(x) for x in seeds)
        if len(_POOLS) >= 8:
            _POOLS.pop(next(iter(_POOLS)))
        _POOLS[key] = vols
    return _POOLS[key]


def region_sizes(cfg: TrainConfig, spacing) -> tuple[tuple[int, int, int], tuple[int, int, int]]:
    p = mm_to_voxels(cfg.sampling.patch_mm, spacing)
    v = mm_to_voxels(cfg.sampling.member_mm, spacing)
    v = tuple(min(a, b) for a, b in zip(v, p))
    return p, v


def draw_batch(cfg: TrainConfig, vol: Volume, encoder: Encoder, rng: np.random.Generator) -> Batch:
    s = cfg.sampling
    p, v = region_sizes(cfg, vol.spacing)
    regions = sample_subregions(vol, s.alpha, p, s.min_fg, rng, threshold=s.fg_threshold, mode=s.mode)
    routes = enumerate_routes(s.alpha, s.route_cap, rng)
    return make_batch(regions, v, encoder, routes)


def loss_weights(cfg: TrainConfig) -> LossWeights:
    return LossWeights(cfg.loss.w_crsc, cfg.loss.w_gmp, cfg.loss.w_rbcs)


# --------------------------------------------------------------------------
# training


@dataclass
class StepResult:
    l_crsc: float
    l_gmp: float
    l_rbcs: float
    l_total: float
    crsc_acc: float
    grad: np.ndarray = field(repr=False)
    probe: dict = field(default_factory=dict, repr=False)  # first volume's batch and head outputs


def compute_step(cfg: TrainConfig, ck: Checkpoint, rng: np.random.Generator,
                 counter: CountingEncoder | None = None) -> StepResult:
    """Loss and gradient for one step; advances ``rng``, leaves ``ck`` untouched."""
    encoder = counter or CountingEncoder(build_encoder(cfg))
    pool = volume_pool(cfg, range(cfg.run.train_volumes))
    tape = Tape()
    tape.params = ck.online
    totals, parts, cos_a, cos_d = [], [], [], []
    for _ in range(cfg.run.volumes_per_step):
        vol = pool[int(rng.integers(len(pool)))]
        batch = draw_batch(cfg, vol, encoder.encoder, rng)
        enc = encode_batch(tape, encoder, batch, ck.online, ck.momentum, rng)
        total, info = total_loss(tape, ck.online, batch, enc, loss_weights(cfg), cfg.loss.gmp_eps,
                                 cfg.loss.rbcs_mode, cfg.model.head_scale_mm)
        if not totals:
            probe = {"batch": batch, "p_hat": info["p_hat"], "m_hat": info["m_hat"]}
        totals.append(total)
        parts.append((info["l_crsc"], info["l_gmp"], info["l_rbcs"]))
        cos_a.append(info["cos_adj"])
        cos_d.append(info["cos_dst"])
    out = totals[0]
    for t in totals[1:]:
        out = tape.add(out, t)
    if len(totals) > 1:
        out = tape.scale(out, 1.0 / len(totals))
    grad = backward(tape, out)
    mean_parts = np.mean(np.asarray(parts), axis=0)
    acc = crsc_accuracy(np.concatenate(cos_a), np.concatenate(cos_d))
    return StepResult(*(float(x) for x in mean_parts), float(out.value), acc, grad, probe)


def route_arrows(batch: Batch, m_hat: np.ndarray, tag: int, route: int = 0) -> list[tuple]:
    """Segments of one route: (start xyz, predicted vector, true vector, tag) per hop."""
    m_true, order = batch.centers, batch.routes[route]
    return [(*m_true[a], *(m_hat[b] - m_hat[a]), *(m_true[b] - m_true[a]), tag)
            for a, b in zip(order[:-1], order[1:])]


def diagnostic_record(iteration: int, step: StepResult) -> dict:
    """JSON-ready per-iteration record: losses, accuracy, gap scatter pairs and route arrows."""
    batch = step.probe["batch"]
    g_hat = predicted_gaps(step.probe["p_hat"])
    iu, ju = np.triu_indices(batch.alpha, 1)
    return {
        "iter": iteration, "l_crsc": step.l_crsc, "l_gmp": step.l_gmp, "l_rbcs": step.l_rbcs,
        "l_total": step.l_total, "crsc_accuracy": step.crsc_acc,
        "gap_pairs": [[float(g), float(h)] for g, h in zip(batch.gaps[iu, ju], g_hat[iu, ju])],
        "route_arrows": [[float(x) for x in row[:-1]] for row in route_arrows(batch, step.probe["m_hat"], iteration)],
    }


def apply_update(cfg: TrainConfig, ck: Checkpoint, grad: np.ndarray) -> None:
    o = cfg.optim
    if o.rule == "sgd":
        new = ck.online.values - o.lr * grad
    else:
        t = ck.adam_t + 1
        ck.adam_m = o.beta1 * ck.adam_m + (1.0 - o.beta1) * grad
        ck.adam_v = o.beta2 * ck.adam_v + (1.0 - o.beta2) * grad * grad
        m_hat = ck.adam_m / (1.0 - o.beta1 ** t)
        v_hat = ck.adam_v / (1.0 - o.beta2 ** t)
        new = ck.online.values - o.lr * m_hat / (np.sqrt(v_hat) + o.eps)
        ck.adam_t = t
    if not np.all(np.isfinite(new)):
        raise NumericOverflowError("non-finite parameters after update")
    ck.online = ck.online.with_values(new)
    ck.momentum = ema_update(ck.momentum, ck.online.select(ENCODER_SEGMENTS), o.ema)


def train(cfg: TrainConfig, resume: Checkpoint | None = None, iterations: int | None = None,
          metrics_path: str | Path | None = None,
          callback: Callable[[int, Checkpoint, StepResult], None] | None = None,
          workers: int = 1, diagnostics_path: str | Path | None = None) -> tuple[Checkpoint, list[dict]]:
    """Run the pretraining loop; returns the final checkpoint and the metric rows.

    ``diagnostics_path`` receives one JSON record per logged iteration (see
    :func:`diagnostic_record`).

    ``iterations`` defaults to ``cfg.run.iterations`` counted from the start of
    training (a resumed run continues up to that total).
    """
    cfg.validate()
    ck = resume.copy() if resume is not None else initial_checkpoint(cfg)
    ck.config = cfg
    target = cfg.run.iterations if iterations is None else ck.iteration + iterations
    rng = ck.rng()
    rows: list[dict] = []
    writer = fh = None
    if metrics_path is not None:
        metrics_path = Path(metrics_path)
        append = resume is not None and metrics_path.exists()
        fh = open(metrics_path, "a" if append else "w", newline="", encoding="utf-8")
        writer = csv.writer(fh, lineterminator="\n")
        if not append:
            writer.writerow(CSV_HEADER)
    diag_fh = None
    if diagnostics_path is not None:
        diag_fh = open(diagnostics_path, "a" if resume is not None else "w", encoding="utf-8")
    volume_pool(cfg, range(cfg.run.train_volumes), workers=workers)
    counter = CountingEncoder(build_encoder(cfg))
    try:
        while ck.iteration < target:
            good = ck.copy()
            t0 = time.perf_counter()
            try:
                step = compute_step(cfg, ck, rng, counter)
                apply_update(cfg, ck, step.grad)
            except NumericOverflowError as exc:
                raise TrainingAborted(f"numeric failure at iteration {good.iteration + 1}: {exc}", good) from exc
            ck.iteration += 1
            ck.rng_state = rng.bit_generator.state
            wall = (time.perf_counter() - t0) * 1000.0
            if ck.iteration % cfg.run.log_every == 0 or ck.iteration == target:
                row = {"iter": ck.iteration, "l_crsc": step.l_crsc, "l_gmp": step.l_gmp, "l_rbcs": step.l_rbcs,
                       "l_total": step.l_total, "crsc_acc": step.crsc_acc, "wall_ms": wall}
                rows.append(row)
                if writer is not None:
                    writer.writerow([row["iter"]] + [repr(float(row[k])) for k in CSV_HEADER[1:-1]]
                                    + [f"{wall:.3f}"])
                if diag_fh is not None:
                    diag_fh.write(json.dumps(diagnostic_record(ck.iteration, step)) + "\n")
            if callback is not None:
                callback(ck.iteration, ck, step)
    finally:
        for handle in (fh, diag_fh):
            if handle is not None:
                handle.close()
    ck.rng_state = rng.bit_generator.state
    return ck, rows


# --------------------------------------------------------------------------
# evaluation


@dataclass
class Diagnostics:
    crsc_pairs: list[tuple[float, float, int]] = field(default_factory=list)
    gap_pairs: list[tuple[float, float]] = field(default_factory=list)
    route_arrows: list[tuple] = field(default_factory=list)
    endpoint_errors: list[float] = field(default_factory=list)
    gap_rel_errors: list[float] = field(default_factory=list)


def infer_batch(cfg: TrainConfig, params: ParamVector, batch: Batch, encoder: Encoder | None = None):
    """Embeddings and head outputs for every region using ``params`` (no tracking)."""
    encoder = encoder or build_encoder(cfg)
    ops = Eval()
    regions, members = [], []
    for x in batch.inputs:
        r, m = encoder.forward(ops, params, x, batch.corners)
        regions.append(r.value)
        members.append(m.value)
    region = np.stack(regions)
    member_table = np.concatenate(members)
    p_hat, m_hat = heads(ops, params, region, cfg.model.head_scale_mm)
    cos_adj = ops.cosine(member_table[batch.adj_index[:, 0]], member_table[batch.adj_index[:, 1]]).value
    cos_dst = ops.cosine(member_table[batch.dst_index[:, 0]], member_table[batch.dst_index[:, 1]]).value
    return {"region": region, "members": member_table, "p_hat": p_hat.value, "m_hat": m_hat.value,
            "cos_adj": cos_adj, "cos_dst": cos_dst}


def collect_diagnostics(ck: Checkpoint, n_volumes: int, seed: int | None = None) -> Diagnostics:
    cfg = ck.config
    seed = cfg.run.eval_seed if seed is None else seed
    encoder = build_encoder(cfg)
    rng = np.random.default_rng(seed)
    pool = volume_pool(cfg, range(seed, seed + n_volumes))
    diag = Diagnostics()
    for vol in pool:
        batch = draw_batch(cfg, vol, encoder, rng)
        out = infer_batch(cfg, ck.online, batch, encoder)
        for a, d in zip(out["cos_adj"], out["cos_dst"]):
            diag.crsc_pairs.append((float(a), float(d), int(a > d)))
        g_hat = predicted_gaps(out["p_hat"])
        iu, ju = np.triu_indices(batch.alpha, 1)
        for g, gh in zip(batch.gaps[iu, ju], g_hat[iu, ju]):
            diag.gap_pairs.append((float(g), float(gh)))
            diag.gap_rel_errors.append(abs(gh - g) / (g + cfg.loss.gmp_eps))
        diag.endpoint_errors.extend(endpoint_errors(out["m_hat"], batch.centers).tolist())
        diag.route_arrows.extend(route_arrows(batch, out["m_hat"], ck.iteration))
    return diag


def pearson(x, y) -> float:
    x, y = np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.float64)
    x, y = x - x.mean(), y - y.mean()
    den = np.sqrt((x @ x) * (y @ y))
    return float(x @ y / den) if den > 0 else 0.0


def evaluate(ck: Checkpoint, n_volumes: int | None = None, seed: int | None = None) -> dict:
    """Held-out metrics on freshly generated volumes (deterministic for a fixed seed)."""
    n_volumes = ck.config.run.eval_volumes if n_volumes is None else n_volumes
    diag = collect_diagnostics(ck, n_volumes, seed)
    gaps = np.asarray(diag.gap_pairs)
    q = (0.25, 0.5, 0.75)
    rel = np.quantile(diag.gap_rel_errors, q)
    ep = np.quantile(diag.endpoint_errors, q)
    return {
        "iteration": ck.iteration,
        "volumes": n_volumes,
        "units": len(diag.crsc_pairs),
        "crsc_accuracy": float(np.mean([c for _, _, c in diag.crsc_pairs])),
        "gap_pearson": pearson(gaps[:, 0], gaps[:, 1]),
        "gap_rel_err_q25": float(rel[0]), "gap_rel_err_median": float(rel[1]), "gap_rel_err_q75": float(rel[2]),
        "endpoint_err_q25": float(ep[0]), "endpoint_err_median": float(ep[1]), "endpoint_err_q75": float(ep[2]),
    }


# --------------------------------------------------------------------------
# gradient verification

GRADCHECK_LOSSES = {"crsc": None, "gmp": None, "rbcs_aggregate": "aggregate", "rbcs_literal": "literal",
                    "total": None}

TINY_OVERRIDES = ("model.grid=4", "model.cell=2", "model.hidden=3", "model.dim=4", "model.member_dim=3",
                  "sampling.alpha=3", "sampling.route_cap=6", "run.train_volumes=4")


def tiny_config(cfg: TrainConfig | None = None) -> TrainConfig:
    cfg = TrainConfig.from_dict((cfg or TrainConfig()).to_dict())
    return cfg.override(TINY_OVERRIDES)


class _MomentumCache:
    """Encoder wrapper that memoizes momentum passes; they do not depend on the checked parameters."""

    def __init__(self, encoder: Encoder, momentum: ParamVector):
        self.encoder, self.momentum, self.memo = encoder, momentum, {}

    def forward(self, ops, params, x, corners):
        if params is not self.momentum:
            return self.encoder.forward(ops, params, x, corners)
        key = id(x)
        if key not in self.memo:
            self.memo[key] = self.encoder.forward(ops, params, x, corners)
        return self.memo[key]


def loss_closure(cfg: TrainConfig, batch: Batch, momentum: ParamVector, selected: int, name: str) -> Callable:
    """Scalar ``f(ops, params)`` for one frozen batch, usable by :func:`grad_check`.

    ``name`` is a key of :data:`GRADCHECK_LOSSES`; single-task names build only
    that task's graph.
    """
    encoder = _MomentumCache(build_encoder(cfg), momentum)
    scale, eps = cfg.model.head_scale_mm, cfg.loss.gmp_eps

    def f(ops, params):
        enc = encode_batch(ops, encoder, batch, params, momentum, None, selected=selected)
        if name == "total":
            return total_loss(ops, params, batch, enc, loss_weights(cfg), eps, cfg.loss.rbcs_mode, scale)[0]
        if name == "crsc":
            return crsc_term(ops, batch, enc)[0]
        p_hat, m_hat = heads(ops, params, enc.region, scale)
        if name == "gmp":
            return gmp_loss(p_hat, batch.gaps, eps, ops=ops)
        return rbcs_loss(m_hat, batch.centers, batch.routes, GRADCHECK_LOSSES[name], ops=ops)

    return f


def gradcheck_losses(cfg: TrainConfig, n_batches: int = 1, tol: float = 1e-4, h: float = 1e-3,
                     seed: int | None = None, corrupt: int | None = None, losses=None, order: int = 4):
    """Run :func:`grad_check` for each task loss on ``n_batches`` seeded batches.

    Yields ``(loss name, batch index, report)``.  Parameters and the momentum
    twin are perturbed away from their initial values so every segment is
    exercised with non-trivial values.
    """
    from .numerics import grad_check
    cfg.validate()
    rng = np.random.default_rng(cfg.run.seed if seed is None else seed)
    encoder = build_encoder(cfg)
    pool = volume_pool(cfg, range(cfg.run.train_volumes))
    names = list(GRADCHECK_LOSSES) if losses is None else list(losses)
    for b in range(n_batches):
        online = encoder.init_params(rng)
        online = online.with_values(online.values + rng.normal(0.0, 0.05, len(online)))
        momentum = online.select(ENCODER_SEGMENTS)
        momentum = momentum.with_values(momentum.values + rng.normal(0.0, 0.05, len(momentum)))
        batch = draw_batch(cfg, pool[int(rng.integers(len(pool)))], encoder, rng)
        selected = int(rng.integers(batch.alpha))
        for name in names:
            f = loss_closure(cfg, batch, momentum, selected, name)
            yield name, b, grad_check(f, online, h=h, tol=tol, corrupt=corrupt, order=order)
