import math
import struct

import numpy as np
import pytest

from spatialssl.config import TrainConfig
from spatialssl.encoder import ENCODER_SEGMENTS
from spatialssl.numerics import Eval, NumericOverflowError, ema_update
from spatialssl.tasks import LossWeights, encode_batch, total_loss
from spatialssl.trainer import (CSV_HEADER, CheckpointFormatError, TrainingAborted, build_encoder,
                                checkpoint_bytes, checkpoint_from_bytes, compute_step, draw_batch,
                                evaluate, gradcheck_losses, initial_checkpoint, load_checkpoint, loss_closure,
                                pearson, save_checkpoint, tiny_config, train, volume_pool)
import spatialssl.trainer as trainer_mod


def small_config(**overrides):
    cfg = tiny_config()
    cfg.override([f"{k}={v}" for k, v in overrides.items()])
    return cfg


# --- checkpoints ------------------------------------------------------------

def test_zero_iterations_is_initialization():
    cfg = small_config(**{"run.iterations": 0})
    ck, rows = train(cfg)
    init = initial_checkpoint(cfg)
    assert rows == []
    assert checkpoint_bytes(ck) == checkpoint_bytes(init)


def test_save_load_save_identical(tmp_path):
    ck, _ = train(small_config(**{"run.iterations": 3}))
    save_checkpoint(ck, tmp_path / "a.ckpt")
    save_checkpoint(load_checkpoint(tmp_path / "a.ckpt"), tmp_path / "b.ckpt")
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()


def test_round_trip_preserves_state(tmp_path):
    ck, _ = train(small_config(**{"run.iterations": 2}))
    back = load_checkpoint(save_checkpoint(ck, tmp_path / "c.ckpt"))
    assert back.iteration == 2 and back.adam_t == 2
    assert back.rng_state == ck.rng_state
    for a, b in ((back.online.values, ck.online.values), (back.momentum.values, ck.momentum.values),
                 (back.adam_m, ck.adam_m), (back.adam_v, ck.adam_v)):
        assert a.tobytes() == b.tobytes()
    assert back.config.to_dict() == ck.config.to_dict()


@pytest.mark.parametrize("cut", [5, 19, 40, -1, -8])
def test_truncated_checkpoint_rejected(cut):
    data = checkpoint_bytes(initial_checkpoint(small_config()))
    with pytest.raises(CheckpointFormatError, match="truncated") as exc:
        checkpoint_from_bytes(data[:cut])
    assert exc.value.offset >= 0


def test_version_and_magic_checked():
    data = bytearray(checkpoint_bytes(initial_checkpoint(small_config())))
    bad_version = bytes(data[:8]) + struct.pack("<I", 99) + bytes(data[12:])
    with pytest.raises(CheckpointFormatError, match="version") as exc:
        checkpoint_from_bytes(bad_version)
    assert exc.value.offset == 8
    data[0] = ord("X")
    with pytest.raises(CheckpointFormatError, match="magic"):
        checkpoint_from_bytes(bytes(data))
    with pytest.raises(CheckpointFormatError, match="trailing"):
        checkpoint_from_bytes(checkpoint_bytes(initial_checkpoint(small_config())) + b"\0")


def test_checkpoint_layout_documented_offsets():
    data = checkpoint_bytes(initial_checkpoint(small_config()))
    assert data[:8] == b"SSLCKPT\0"
    version, hlen = struct.unpack("<IQ", data[8:20])
    assert version == 1
    n = len(initial_checkpoint(small_config()).online)
    n_mom = len(initial_checkpoint(small_config()).momentum)
    assert len(data) == 20 + hlen + 8 * (3 * n + n_mom)


def test_split_training_matches_continuous(tmp_path):
    cfg = small_config(**{"run.iterations": 10})
    full, rows_full = train(cfg)
    half, rows_a = train(cfg, iterations=5)
    save_checkpoint(half, tmp_path / "half.ckpt")
    rest, rows_b = train(cfg, resume=load_checkpoint(tmp_path / "half.ckpt"))
    assert checkpoint_bytes(rest) == checkpoint_bytes(full)
    strip = lambda rows: [{k: v for k, v in r.items() if k != "wall_ms"} for r in rows]
    assert strip(rows_a + rows_b) == strip(rows_full)


# --- training behavior -------------------------------------------------------

def test_zero_weights_leave_parameters_unchanged():
    cfg = small_config(**{"run.iterations": 5, "loss.w_crsc": 0, "loss.w_gmp": 0, "loss.w_rbcs": 0})
    ck, _ = train(cfg)
    init = initial_checkpoint(cfg)
    assert np.array_equal(ck.online.values, init.online.values)
    assert np.array_equal(ck.momentum.values, init.momentum.values)


def test_heads_have_no_twin():
    ck = initial_checkpoint(TrainConfig())
    assert tuple(ck.momentum.names) == ENCODER_SEGMENTS
    assert {"gmp.w", "rbcs.w"} <= set(ck.online.names)


def test_metrics_csv(tmp_path):
    cfg = small_config(**{"run.iterations": 4})
    train(cfg, metrics_path=tmp_path / "m.csv")
    text = (tmp_path / "m.csv").read_bytes()
    assert b"\r" not in text
    lines = text.decode().splitlines()
    assert lines[0] == ",".join(CSV_HEADER) == "iter,l_crsc,l_gmp,l_rbcs,l_total,crsc_acc,wall_ms"
    assert len(lines) == 5 and all(len(line.split(",")) == 7 for line in lines)


def test_resumed_metrics_append(tmp_path):
    cfg = small_config(**{"run.iterations": 4})
    ck, _ = train(cfg, iterations=2, metrics_path=tmp_path / "m.csv")
    train(cfg, resume=ck, metrics_path=tmp_path / "m.csv")
    rows = (tmp_path / "m.csv").read_text().splitlines()
    assert [r.split(",")[0] for r in rows] == ["iter", "1", "2", "3", "4"]


def test_diagnostics_records(tmp_path):
    import json
    cfg = small_config(**{"run.iterations": 2})
    train(cfg, diagnostics_path=tmp_path / "d.jsonl")
    recs = [json.loads(line) for line in (tmp_path / "d.jsonl").read_text().splitlines()]
    assert [r["iter"] for r in recs] == [1, 2]
    alpha = cfg.sampling.alpha
    assert len(recs[0]["gap_pairs"]) == math.comb(alpha, 2)
    assert len(recs[0]["route_arrows"]) == alpha - 1 and len(recs[0]["route_arrows"][0]) == 9


@pytest.mark.parametrize("weights", [LossWeights(1, 0, 0), LossWeights(0, 1, 0), LossWeights(0, 0, 1)])
def test_small_gradient_step_does_not_increase_loss(weights):
    cfg = small_config()
    rng = np.random.default_rng(3)
    encoder = build_encoder(cfg)
    online = encoder.init_params(rng)
    momentum = online.select(ENCODER_SEGMENTS)
    batch = draw_batch(cfg, volume_pool(cfg, range(4))[0], encoder, rng)
    name = {0: "crsc", 1: "gmp", 2: "rbcs_aggregate"}[[weights.crsc, weights.gmp, weights.rbcs].index(1)]
    f = loss_closure(cfg, batch, momentum, 0, name)
    from spatialssl.numerics import backward, forward_record
    out, tape = forward_record(f, online)
    grad = backward(tape, out)
    lr = 1e-3 / max(1.0, float(np.linalg.norm(grad)))
    after = f(Eval(), online.with_values(online.values - lr * grad)).value
    assert after <= out.value


def test_ema_contracts_by_m():
    rng = np.random.default_rng(0)
    ck = initial_checkpoint(small_config())
    online = ck.online.select(ENCODER_SEGMENTS)
    target = online.with_values(online.values + rng.normal(size=len(online)))
    m = 0.99
    prev = np.linalg.norm(target.values - online.values)
    for _ in range(100):
        target = ema_update(target, online, m)
        cur = np.linalg.norm(target.values - online.values)
        assert abs(cur / prev - m) <= 1e-12
        prev = cur


def test_overflow_aborts_with_last_good_checkpoint(monkeypatch):
    cfg = small_config(**{"run.iterations": 5})
    real = trainer_mod.compute_step
    calls = {"n": 0}

    def flaky(cfg_, ck, rng, counter=None):
        calls["n"] += 1
        if calls["n"] == 3:
            raise NumericOverflowError("injected")
        return real(cfg_, ck, rng, counter)

    monkeypatch.setattr(trainer_mod, "compute_step", flaky)
    with pytest.raises(TrainingAborted) as exc:
        train(cfg)
    assert exc.value.checkpoint.iteration == 2
    monkeypatch.setattr(trainer_mod, "compute_step", real)
    ref, _ = train(cfg, iterations=2)
    assert checkpoint_bytes(exc.value.checkpoint) == checkpoint_bytes(ref)


def test_compute_step_leaves_checkpoint_untouched():
    cfg = small_config()
    ck = initial_checkpoint(cfg)
    before = checkpoint_bytes(ck)
    compute_step(cfg, ck, ck.rng())
    assert checkpoint_bytes(ck) == before


def test_sgd_rule_runs():
    cfg = small_config(**{"run.iterations": 2, "optim.rule": "sgd"})
    ck, _ = train(cfg)
    assert ck.adam_t == 0 and not np.array_equal(ck.online.values, initial_checkpoint(cfg).online.values)


# --- evaluation ---------------------------------------------------------------

def test_evaluate_deterministic():
    ck = initial_checkpoint(small_config())
    assert evaluate(ck, 3) == evaluate(ck, 3)
    m = evaluate(ck, 3)
    assert m["units"] == 3 * math.comb(ck.config.sampling.alpha, 2)
    assert m["gap_rel_err_q25"] <= m["gap_rel_err_median"] <= m["gap_rel_err_q75"]


def test_evaluation_volumes_unseen():
    cfg = small_config()
    assert cfg.run.eval_seed >= cfg.run.train_volumes


def test_pearson_oracle():
    rng = np.random.default_rng(0)
    x, y = rng.normal(size=50), rng.normal(size=50)
    assert pearson(x, y) == pytest.approx(np.corrcoef(x, y)[0, 1], rel=1e-12)
    assert pearson(x, 2 * x + 1) == pytest.approx(1.0)
    assert pearson(np.ones(4), x[:4]) == 0.0


# --- gradient checking --------------------------------------------------------

def test_gradcheck_all_losses_one_batch():
    reports = list(gradcheck_losses(small_config(), n_batches=1))
    assert [name for name, _, _ in reports] == ["crsc", "gmp", "rbcs_aggregate", "rbcs_literal", "total"]
    assert all(r.passed for _, _, r in reports), reports


def test_gradcheck_zero_weights_pass():
    cfg = small_config(**{"loss.w_crsc": 0, "loss.w_gmp": 0, "loss.w_rbcs": 0})
    (_, _, report), = gradcheck_losses(cfg, losses=["total"])
    assert report.passed and report.max_rel_error == 0.0


def test_gradcheck_detects_corruption():
    (_, _, report), = gradcheck_losses(small_config(), losses=["crsc"], corrupt=7)
    assert not report.passed and report.worst_index == 7


def test_momentum_passes_are_constants():
    cfg = small_config()
    rng = np.random.default_rng(0)
    enc = build_encoder(cfg)
    params = enc.init_params(rng)
    batch = draw_batch(cfg, volume_pool(cfg, range(4))[1], enc, rng)
    from spatialssl.numerics import Tape
    tape = Tape()
    out = encode_batch(tape, enc, batch, params, params.select(ENCODER_SEGMENTS), None, selected=0)
    total, _ = total_loss(tape, params, batch, out)
    assert sum(1 for n in tape.nodes if n.segment == "enc.w1") == 1


# --- untrained baselines --------------------------------------------------------

def _content_free(monkeypatch, seed):
    rng = np.random.default_rng(seed)
    real = trainer_mod.infer_batch

    def shuffled(cfg, params, batch, encoder=None):
        out = real(cfg, params, batch, encoder)
        out["p_hat"] = rng.normal(size=out["p_hat"].shape) * 50
        out["cos_adj"], out["cos_dst"] = rng.uniform(-1, 1, (2, len(out["cos_adj"])))
        return out

    monkeypatch.setattr(trainer_mod, "infer_batch", shuffled)


def test_content_free_predictions_sit_at_chance(monkeypatch):
    _content_free(monkeypatch, 0)
    m = evaluate(initial_checkpoint(TrainConfig()), 64)
    n = m["units"]
    assert n >= 500
    assert abs(m["gap_pearson"]) < 0.2
    assert abs(m["crsc_accuracy"] - 0.5) < 3 * math.sqrt(0.25 / n)


@pytest.mark.xfail(strict=True, reason="a random encoder already separates adjacent from distant members")
def test_untrained_encoder_crsc_near_chance():
    m = evaluate(initial_checkpoint(TrainConfig()))
    assert abs(m["crsc_accuracy"] - 0.5) < 3 * math.sqrt(0.25 / m["units"]), m["crsc_accuracy"]


@pytest.mark.xfail(strict=True, reason="random features of far-apart regions differ more, so gaps correlate")
def test_untrained_gap_scatter_uncorrelated():
    m = evaluate(initial_checkpoint(TrainConfig()))
    assert abs(m["gap_pearson"]) < 0.2, m["gap_pearson"]
