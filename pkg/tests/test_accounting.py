import numpy as np
import pytest

from rotconv.accounting import account
from rotconv.airotate import AiPruneConfig, ai_prune_step
from rotconv.model import Model, build_network
from rotconv.nn import Conv2d
from rotconv.rotate import RotateConfig, RotateConv2d

# hand counts for a 1x28x28 input
CONV0, BN16, CONV1, BN32, CONV2 = 16 * 9, 4 * 16, 32 * 16 * 9, 4 * 32, 32 * 32 * 9
LINEAR = 32 * 7 * 7 * 10 + 10
TINY2 = CONV0 + BN16 + CONV1 + BN32 + LINEAR
TINY3 = TINY2 + CONV2 + BN32


def test_rotate4_layer_ratio():
    layer = RotateConv2d(np.zeros((32, 16, 3), np.float32), np.full((32, 16), 10.0, np.float32))
    rep = account(Model([layer]), (16, 8, 8))
    (row,) = rep.layers
    assert (row.stored_reals, row.dense_params) == (2048, 4608)
    assert row.real_ratio == pytest.approx(4 / 9)


def test_rotate3_layer_count():
    layer = RotateConv2d(np.zeros((32, 16, 3), np.float32), np.zeros(32, np.float32), per_filter=True)
    (row,) = account(Model([layer]), (16, 8, 8)).layers
    assert row.stored_reals == 1568
    assert row.real_ratio == pytest.approx((3 * 32 * 16 + 32) / (9 * 32 * 16))


def test_ai_all_alive_mac_ratio():
    K = np.random.default_rng(0).normal(size=(8, 4, 3, 3)).astype(np.float32) + 5
    state, P = ai_prune_step(K, AiPruneConfig(k=3))
    layer = Conv2d(P, None, prunable=True)
    layer.ai_state = state
    (row,) = account(Model([layer]), (4, 6, 6)).layers
    assert row.macs / row.dense_macs == pytest.approx(3 / 9)
    assert row.stored_reals == 2
    assert row.stored_ints == 8 * 4 * 6


def test_grid_angle_macs():
    layer = RotateConv2d(np.ones((2, 2, 3), np.float32), np.full((2, 2), 45.0, np.float32))
    (row,) = account(Model([layer]), (2, 5, 5)).layers
    assert row.macs == 3 * 4 * 25
    layer.theta[:] = 30.0
    (row,) = account(Model([layer]), (2, 5, 5)).layers
    assert row.macs == 5 * 4 * 25


def test_tiny2_totals():
    assert account(build_network("tiny2"), (1, 28, 28)).stored_reals == TINY2
    assert account(build_network("tiny2", method="rotate4"), (1, 28, 28)).stored_reals == TINY2 - CONV1 + 2048
    r3 = account(build_network("tiny2", method="rotate3"), (1, 28, 28)).stored_reals
    assert r3 == TINY2 - CONV1 + 1568


def test_tiny3_totals():
    dense = account(build_network("tiny3"), (1, 28, 28))
    assert dense.stored_reals == dense.dense_params == TINY3
    r4 = account(build_network("tiny3", method="rotate4"), (1, 28, 28))
    assert r4.stored_reals == TINY3 - CONV1 - CONV2 + 4 * 32 * 16 + 4 * 32 * 32
    convs = r4.conv_layers()
    assert [c.real_ratio for c in convs[1:]] == [pytest.approx(4 / 9)] * 2
    assert convs[0].real_ratio == 1.0


def test_dense_macs_and_totals():
    rep = account(build_network("tiny2"), (1, 28, 28))
    assert rep.dense_macs == CONV0 * 28 * 28 + CONV1 * 14 * 14 + (LINEAR - 10)
    assert rep.macs == rep.dense_macs
    assert rep.stored_reals == sum(l.stored_reals for l in rep.layers)


def test_first_layer_override():
    model = build_network("tiny2", method="rotate4", layers="all")
    assert isinstance(model.conv(0), RotateConv2d)
    cfg = RotateConfig(angle_init="fixed_list", fixed_angles=(90.0,))
    model = build_network("tiny2", method="rotate4", rotate_cfg=cfg)
    assert np.all(model.conv(1).theta == 90.0)


def test_rows_shape():
    rows = account(build_network("tiny2", method="rotate4"), (1, 28, 28)).rows()
    assert rows[0][0] == "layer"
    assert rows[-1][0] == "total"
    pct = {r[0]: r[5] for r in rows[1:]}
    assert pct[4] == "55.56"


def test_channel_mismatch():
    with pytest.raises(ValueError):
        account(build_network("tiny2"), (3, 28, 28))
