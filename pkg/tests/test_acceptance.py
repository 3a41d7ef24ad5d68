"""End-to-end acceptance checks; each prints one PASS/FAIL line."""
import math
import time

import numpy as np

from spatialssl.config import TrainConfig
from spatialssl.encoder import ENCODER_SEGMENTS
from spatialssl.numerics import Tape, ema_update
from spatialssl.sampler import center_expectation, corner_distance_samples, sample_subregions
from spatialssl.tasks import (CountingEncoder, encode_batch, enumerate_routes, gmp_loss, make_batch,
                              predicted_gaps, rbcs_loss, rbcs_pair_loss, total_loss)
from spatialssl.trainer import (build_encoder, checkpoint_bytes, evaluate, gradcheck_losses, initial_checkpoint,
                                load_checkpoint, region_sizes, save_checkpoint, tiny_config, train, volume_pool)


ACCEPTANCE_RESULTS: list[str] = []


def report(n, title, ok, detail):
    line = f"[criterion {n}] {'PASS' if ok else 'FAIL'}  {title}: {detail}"
    ACCEPTANCE_RESULTS.append(line)
    print("\n" + line)
    assert ok, detail


def random_rotation(rng):
    q, r = np.linalg.qr(rng.normal(size=(3, 3)))
    q = q * np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q


def test_1_gradient_fidelity():
    t0 = time.perf_counter()
    worst, fails, checks = {}, 0, 0
    for name, _, rep in gradcheck_losses(tiny_config(), n_batches=20, tol=1e-4):
        worst[name] = max(worst.get(name, 0.0), rep.max_rel_error)
        fails += not rep.passed
        checks += 1
    elapsed = time.perf_counter() - t0
    detail = ", ".join(f"{k} {v:.1e}" for k, v in worst.items())
    report(1, "gradient fidelity", fails == 0 and checks == 100 and elapsed < 60,
           f"{checks} checks, {fails} failed, worst rel err [{detail}], {elapsed:.1f} s")


def test_2_telescoping_oracle():
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    worst, n = 0.0, 0
    for alpha in range(2, 7):
        routes = enumerate_routes(alpha, math.factorial(alpha))
        for _ in range(100):
            m_hat = rng.normal(size=(alpha, 3)) * rng.uniform(1, 100)
            m = rng.normal(size=(alpha, 3)) * rng.uniform(1, 100)
            full, closed = rbcs_loss(m_hat, m, routes), rbcs_pair_loss(m_hat, m)
            worst = max(worst, abs(full - closed) / abs(closed))
            n += 1
    elapsed = time.perf_counter() - t0
    report(2, "telescoping collapse", worst < 1e-9 and elapsed < 60,
           f"{n} instances, max rel diff {worst:.2e}, {elapsed:.1f} s")


def test_3_rigid_invariance():
    rng = np.random.default_rng(3)
    alpha = 5
    routes = enumerate_routes(alpha, 120)
    worst_gmp, worst_rbcs = 0.0, 0.0
    for _ in range(100):
        p_hat = rng.normal(size=(alpha, 3)) * 50
        gaps = predicted_gaps(rng.normal(size=(alpha, 3)) * 50)
        moved = p_hat @ random_rotation(rng).T + rng.normal(size=3) * 200
        worst_gmp = max(worst_gmp, abs(gmp_loss(moved, gaps) - gmp_loss(p_hat, gaps)))
        m_hat, m = rng.normal(size=(alpha, 3)) * 50, rng.normal(size=(alpha, 3)) * 50
        shift = rng.normal(size=3) * 200
        for mode in ("aggregate", "literal"):
            base = rbcs_loss(m_hat, m, routes, mode)
            worst_rbcs = max(worst_rbcs, abs(rbcs_loss(m_hat + shift, m, routes, mode) - base) / base)
    report(3, "translation/rotation invariance", worst_gmp < 1e-10 and worst_rbcs < 1e-9,
           f"gmp max abs change {worst_gmp:.1e} over 100 rigid motions, "
           f"rbcs max rel change {worst_rbcs:.1e} over 100 translations (both modes)")


def test_4_center_expectation_monte_carlo():
    s, p, v, n = 96, 32, 8, 100_000
    adj, dst = corner_distance_samples(s, p, v, n, np.random.default_rng(4))
    e_adj, e_dst = center_expectation(s, p, v)
    se_a = adj.std(axis=0, ddof=1) / math.sqrt(n)
    se_d = dst.std(axis=0, ddof=1) / math.sqrt(n)
    z_a = np.abs(adj.mean(axis=0) - e_adj) / se_a
    z_d = np.abs(dst.mean(axis=0) - e_dst) / se_d
    z_order = (dst.mean() - adj.mean()) / math.sqrt(adj.var(ddof=1) / adj.size + dst.var(ddof=1) / dst.size)
    p_order = 0.5 * math.erfc(z_order / math.sqrt(2))
    ok = bool(np.all(z_a < 3) and np.all(z_d < 3) and p_order < 1e-6)
    report(4, "center expectation", ok,
           f"adj means {np.round(adj.mean(axis=0), 3).tolist()} (expect {e_adj[0]:.0f}, max {z_a.max():.2f} SE), "
           f"dst means {np.round(dst.mean(axis=0), 3).tolist()} (expect {e_dst[0]:.0f}, max {z_d.max():.2f} SE), "
           f"order p={p_order:.1e}")


def test_5_complexity_contract():
    results = []
    for alpha in (2, 4, 8, 16):
        cfg = TrainConfig().override([f"sampling.alpha={alpha}", "sampling.route_cap=8"])
        encoder = build_encoder(cfg)
        counter = CountingEncoder(encoder)
        rng = np.random.default_rng(alpha)
        vol = volume_pool(cfg, [0])[0]
        p, v = region_sizes(cfg, vol.spacing)
        regions = sample_subregions(vol, alpha, p, cfg.sampling.min_fg, rng)
        batch = make_batch(regions, v, encoder, enumerate_routes(alpha, 8, rng))
        params = encoder.init_params(rng)
        tape = Tape()
        enc = encode_batch(tape, counter, batch, params, params.select(ENCODER_SEGMENTS), rng)
        total_loss(tape, params, batch, enc)
        results.append((alpha, counter.calls, sum(enc.tracked), len(batch.units), math.comb(alpha, 2)))
    ok = all(calls == a and tracked == 1 and units == pairs for a, calls, tracked, units, pairs in results)
    report(5, "complexity contract", ok,
           "; ".join(f"alpha={a}: {c} passes, {u} units (C={q})" for a, c, _, u, q in results))


def test_6_learning_signal():
    cfg = TrainConfig()
    t0 = time.perf_counter()
    untrained = evaluate(initial_checkpoint(cfg))
    ck, _ = train(cfg)
    trained = evaluate(ck)
    elapsed = time.perf_counter() - t0
    reduction = 1.0 - trained["endpoint_err_median"] / untrained["endpoint_err_median"]
    units = trained["units"]
    # binomial test against 50% chance on held-out units
    z = (trained["crsc_accuracy"] - 0.5) / math.sqrt(0.25 / units)
    ok = (trained["crsc_accuracy"] >= 0.90 and trained["gap_pearson"] >= 0.8 and reduction >= 0.5
          and z > 2.33 and trained["gap_rel_err_median"] < untrained["gap_rel_err_median"])
    report(6, "learning signal", ok,
           f"{ck.iteration} steps in {elapsed:.0f} s; crsc acc {untrained['crsc_accuracy']:.3f} -> "
           f"{trained['crsc_accuracy']:.3f} ({units} units); gap r {untrained['gap_pearson']:.3f} -> "
           f"{trained['gap_pearson']:.3f}; endpoint median {untrained['endpoint_err_median']:.2f} -> "
           f"{trained['endpoint_err_median']:.2f} mm ({100 * reduction:.1f}% lower)")


def test_7_ema_contract():
    m = TrainConfig().optim.ema
    ck = initial_checkpoint(TrainConfig())
    online = ck.online.select(ENCODER_SEGMENTS)
    rng = np.random.default_rng(7)
    target = online.with_values(online.values + rng.normal(size=len(online)))
    prev = np.linalg.norm(target.values - online.values)
    worst = 0.0
    for _ in range(100):
        target = ema_update(target, online, m)
        cur = np.linalg.norm(target.values - online.values)
        worst = max(worst, abs(cur / prev - m))
        prev = cur
    report(7, "EMA contract", worst <= 1e-12, f"max |ratio - {m}| = {worst:.1e} over 100 steps")


def test_8_reproducibility(tmp_path):
    cfg = TrainConfig()
    cfg.run.iterations = 40
    runs = []
    for name in ("a", "b"):
        ck, _ = train(cfg, metrics_path=tmp_path / f"{name}.csv")
        rows = (tmp_path / f"{name}.csv").read_text().splitlines()
        runs.append((checkpoint_bytes(ck), [r.rsplit(",", 1)[0] for r in rows]))  # drop wall_ms
    same_runs = runs[0] == runs[1]
    half, _ = train(cfg, iterations=20)
    save_checkpoint(half, tmp_path / "half.ckpt")
    resumed, _ = train(cfg, resume=load_checkpoint(tmp_path / "half.ckpt"))
    same_resume = checkpoint_bytes(resumed) == runs[0][0]
    report(8, "reproducibility", same_runs and same_resume,
           f"two 40-step runs identical: {same_runs}; 20 + save/load + 20 identical: {same_resume}")
