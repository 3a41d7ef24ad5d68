import numpy as np
import pytest

from spatialssl.encoder import ENCODER_SEGMENTS, HEAD_SEGMENTS, Encoder, heads, pool_block
from spatialssl.numerics import Eval, grad_check


def test_pool_block_averages():
    block = np.arange(64, dtype=float).reshape(4, 4, 4)
    out = pool_block(block, 2)
    assert out.shape == (2, 2, 2)
    assert out[0, 0, 0] == block[:2, :2, :2].mean()
    assert out.mean() == pytest.approx(block.mean())


def test_pool_block_upsamples_small_axes():
    out = pool_block(np.ones((3, 8, 8)), 4)
    assert out.shape == (4, 4, 4) and np.all(out == 1)


def test_cell_inputs_partition():
    enc = Encoder(grid=4, cell=2)
    block = np.random.default_rng(0).random((4, 4, 4))
    x = enc.cell_inputs(block)
    assert x.shape == (8, 8)
    assert sorted(x.ravel().tolist()) == sorted(block.ravel().tolist())


def test_corner_pooling_rows():
    enc = Encoder(grid=8, cell=2)
    S = enc.corner_pooling((24, 24, 24), (6, 6, 6))
    assert S.shape == (8, 64)
    np.testing.assert_allclose(S.sum(axis=1), 1.0)
    assert np.count_nonzero(S[0]) == 1 and S[0, 0] == 1.0 and S[7, 63] == 1.0


def test_grid_must_divide():
    with pytest.raises(ValueError):
        Encoder(grid=5, cell=2)


def test_param_segments():
    p = Encoder().init_params(np.random.default_rng(0))
    assert tuple(p.names) == ENCODER_SEGMENTS + HEAD_SEGMENTS
    assert tuple(Encoder().init_params(np.random.default_rng(0), heads=False).names) == ENCODER_SEGMENTS


def test_forward_shapes_and_gradients():
    enc = Encoder(grid=4, cell=2, hidden=3, dim=4, member_dim=3)
    rng = np.random.default_rng(1)
    params = enc.init_params(rng)
    x = enc.cell_inputs(rng.random((8, 8, 8)))
    corners = enc.corner_pooling((8, 8, 8), (2, 2, 2))
    region, members = enc.forward(Eval(), params, x, corners)
    assert region.value.shape == (4,) and members.value.shape == (8, 3)
    p_hat, m_hat = heads(Eval(), params, np.stack([region.value] * 2), 100.0)
    assert p_hat.value.shape == m_hat.value.shape == (2, 3)

    def f(ops, p):
        r, m = enc.forward(ops, p, x, corners)
        ph, _ = heads(ops, p, ops.stack([r]), 10.0)
        return ops.add(ops.sum(ops.square(m)), ops.sum(ph))

    assert grad_check(f, params, h=1e-4, order=4).passed
