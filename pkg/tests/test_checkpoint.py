import struct

import numpy as np
import numpy.testing as npt
import pytest
from hypothesis import given, settings, strategies as st

from rotconv.airotate import AiPruneConfig, ai_prune_step
from rotconv.checkpoint import (MAGIC, BadMagicError, CheckpointError, DuplicateCellError,
                                RankOutOfRangeError, TruncatedError, UnsupportedLayerError,
                                ai_payload_size, describe, export_checkpoint, import_checkpoint,
                                infer_input_shape, load, rank_width, save)
from rotconv.model import Model, build_network
from rotconv.nn import Conv2d, Layer

from conftest import random_mixed_model

HEADER = 12
RECORD_HEAD = 5


def ai_model(n_alive=4, n=2, m=3, k=3, seed=0):
    r = np.random.default_rng(seed)
    K = r.normal(scale=0.1, size=(n, m, 3, 3)).astype(np.float32)
    dead = np.ones(n * m, bool)
    dead[r.choice(n * m, n_alive, replace=False)] = False
    K[dead.reshape(n, m)] = 0
    state, P = ai_prune_step(K, AiPruneConfig(k=k))
    layer = Conv2d(P, None, prunable=True)
    layer.ai_state = state
    return Model([layer])


def test_empty_model_is_header_only():
    buf = export_checkpoint(Model([]))
    assert len(buf) == 12
    assert buf == MAGIC + struct.pack("<HH", 1, 0)
    assert len(import_checkpoint(buf).layers) == 0


def test_ai_payload_layout():
    assert rank_width(12) == 1
    # dims 6 + n_alive 4 + w_min 4 + tau 4 + k 1, then 4 kernels of (2+2+3+3)
    assert ai_payload_size(4, 3) == 19 + 4 * 10 == 59
    buf = export_checkpoint(ai_model(4))
    assert len(buf) == HEADER + RECORD_HEAD + 59
    tag, length = struct.unpack_from("<BI", buf, HEADER)
    assert (tag, length) == (3, 59)


@pytest.mark.parametrize("n, width", [(1, 1), (2, 1), (256, 1), (257, 2), (65536, 2), (65537, 4)])
def test_rank_width_minimal(n, width):
    assert rank_width(n) == width


def test_wide_ranks_round_trip():
    # 32*32 alive kernels with k=9 gives n=9216 points, ranks need u16
    model = ai_model(n_alive=1024, n=32, m=32, k=9, seed=1)
    buf = export_checkpoint(model)
    assert len(buf) == HEADER + RECORD_HEAD + ai_payload_size(1024, 9)
    assert export_checkpoint(import_checkpoint(buf)) == buf


def test_all_dead_ai_layer():
    K = np.zeros((2, 2, 3, 3), np.float32)
    state, P = ai_prune_step(K, AiPruneConfig())
    layer = Conv2d(P, None, prunable=True)
    layer.ai_state = state
    buf = export_checkpoint(Model([layer]))
    assert len(buf) == HEADER + RECORD_HEAD + 19
    back = import_checkpoint(buf).layers[0]
    assert back.ai_state.is_empty and not back.weight.any()


def test_export_deterministic():
    model = build_network("tiny2", method="rotate4", seed=3)
    assert export_checkpoint(model) == export_checkpoint(model)


@pytest.mark.parametrize("seed", range(50))
def test_round_trip_random_models(seed):
    model, shape = random_mixed_model(seed)
    buf = export_checkpoint(model)
    back = import_checkpoint(buf)
    assert export_checkpoint(back) == buf
    x = np.random.default_rng(seed).normal(size=(2, *shape)).astype(np.float32)
    npt.assert_array_equal(back.forward(x), model.forward(x))


def test_restored_ai_forward_bitwise():
    model = ai_model(5, n=3, m=4)
    back = import_checkpoint(export_checkpoint(model))
    x = np.random.default_rng(0).normal(size=(2, 4, 6, 6)).astype(np.float32)
    npt.assert_array_equal(back.layers[0].weight, model.layers[0].weight)
    npt.assert_array_equal(back.forward(x), model.forward(x))


def test_save_load(tmp_path):
    model = build_network("tiny-res", method="rotate3", seed=2)
    save(model, tmp_path / "m.ckpt")
    assert export_checkpoint(load(tmp_path / "m.ckpt")) == export_checkpoint(model)


def test_bad_magic():
    buf = bytearray(export_checkpoint(Model([])))
    buf[0] ^= 0xFF
    with pytest.raises(BadMagicError, match="magic"):
        import_checkpoint(bytes(buf))


def test_bad_version():
    buf = MAGIC + struct.pack("<HH", 99, 0)
    with pytest.raises(CheckpointError, match="version"):
        import_checkpoint(buf)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10_000))
def test_truncation_always_detected(cut):
    buf = export_checkpoint(build_network("tiny2", method="ai", seed=0))
    cut = cut % len(buf)
    with pytest.raises(CheckpointError):
        import_checkpoint(buf[:cut])


def test_truncated_error_class():
    buf = export_checkpoint(ai_model())
    with pytest.raises(TruncatedError):
        import_checkpoint(buf[:-1])


def test_trailing_bytes_rejected():
    with pytest.raises(CheckpointError, match="trailing"):
        import_checkpoint(export_checkpoint(ai_model()) + b"\0")


def _first_kernel_offsets(k=3):
    # header, record head, fixed ai fields, then i, j
    base = HEADER + RECORD_HEAD + 19 + 4
    return base, base + k


def test_rank_out_of_range():
    buf = bytearray(export_checkpoint(ai_model()))
    _, rank_at = _first_kernel_offsets()
    buf[rank_at] = 12
    with pytest.raises(RankOutOfRangeError):
        import_checkpoint(bytes(buf))


def test_duplicate_cell():
    buf = bytearray(export_checkpoint(ai_model()))
    cell_at, _ = _first_kernel_offsets()
    buf[cell_at + 1] = buf[cell_at]
    with pytest.raises(DuplicateCellError):
        import_checkpoint(bytes(buf))


def test_rank_not_permutation():
    buf = bytearray(export_checkpoint(ai_model()))
    _, rank_at = _first_kernel_offsets()
    buf[rank_at + 1] = buf[rank_at]
    with pytest.raises(CheckpointError, match="permutation"):
        import_checkpoint(bytes(buf))


def test_unknown_tag():
    buf = MAGIC + struct.pack("<HH", 1, 1) + struct.pack("<BI", 42, 0)
    with pytest.raises(CheckpointError, match="tag"):
        import_checkpoint(buf)


def test_unsupported_layer():
    class Odd(Layer):
        pass

    with pytest.raises(UnsupportedLayerError):
        export_checkpoint(Model([Odd()]))


def test_error_classes_are_distinct():
    classes = [BadMagicError, TruncatedError, RankOutOfRangeError, DuplicateCellError]
    assert len(set(classes)) == 4
    for a in classes:
        for b in classes:
            assert a is b or not issubclass(a, b)


def test_describe_and_shape():
    model = build_network("tiny2", in_channels=3, in_hw=32, method="rotate4")
    assert infer_input_shape(model) == (3, 32, 32)
    lines = describe(model).splitlines()
    assert len(lines) == len(model.layers)
    assert "rotate4" in lines[4] and "reals=2048" in lines[4]
