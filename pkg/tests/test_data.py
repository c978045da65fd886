import gzip

import numpy as np
import numpy.testing as npt
import pytest

from rotconv.data import (DataFormatError, draw_line, load_cifar10_bin, load_idx, load_mnist_dir,
                          synth_angles)


def write_idx(path, magic, dims, payload, gz=False):
    head = magic.to_bytes(4, "big") + b"".join(int(d).to_bytes(4, "big") for d in dims)
    data = head + np.asarray(payload, np.uint8).tobytes()
    if gz:
        data = gzip.compress(data)
    with open(path, "wb") as fh:
        fh.write(data)


@pytest.fixture
def mnist_dir(tmp_path):
    r = np.random.default_rng(0)
    for prefix, n in (("train", 6), ("t10k", 3)):
        imgs = r.integers(0, 256, size=(n, 28, 28))
        write_idx(tmp_path / f"{prefix}-images-idx3-ubyte", 0x803, (n, 28, 28), imgs)
        write_idx(tmp_path / f"{prefix}-labels-idx1-ubyte", 0x801, (n,), np.arange(n) % 10)
    return tmp_path


def test_idx_first_image_offset(tmp_path):
    img = np.zeros((2, 28, 28), np.uint8)
    img[0, 0, 0] = 255
    img[1, 27, 27] = 255
    write_idx(tmp_path / "i", 0x803, (2, 28, 28), img)
    write_idx(tmp_path / "l", 0x801, (2,), [3, 7])
    ds = load_idx(str(tmp_path / "i"), str(tmp_path / "l"), mean=(0.0,), std=(1.0,))
    assert ds.images.shape == (2, 1, 28, 28)
    assert ds.images[0, 0, 0, 0] == 1.0 and ds.images[0].sum() == 1.0
    assert ds.images[1, 0, 27, 27] == 1.0
    npt.assert_array_equal(ds.labels, [3, 7])


def test_idx_gzip_and_limit(tmp_path):
    write_idx(tmp_path / "i.gz", 0x803, (4, 28, 28), np.zeros((4, 28, 28)), gz=True)
    write_idx(tmp_path / "l.gz", 0x801, (4,), [0, 1, 2, 3], gz=True)
    ds = load_idx(str(tmp_path / "i.gz"), str(tmp_path / "l.gz"), limit=2)
    assert len(ds) == 2


def test_idx_wrong_magic(tmp_path):
    write_idx(tmp_path / "i", 0x801, (1, 28, 28), np.zeros(784))
    write_idx(tmp_path / "l", 0x801, (1,), [0])
    with pytest.raises(DataFormatError, match="0x00000803"):
        load_idx(str(tmp_path / "i"), str(tmp_path / "l"))


def test_idx_count_mismatch(tmp_path):
    write_idx(tmp_path / "i", 0x803, (2, 28, 28), np.zeros(2 * 784))
    write_idx(tmp_path / "l", 0x801, (3,), [0, 1, 2])
    with pytest.raises(DataFormatError, match="labels"):
        load_idx(str(tmp_path / "i"), str(tmp_path / "l"))


def test_idx_short_payload(tmp_path):
    write_idx(tmp_path / "i", 0x803, (2, 28, 28), np.zeros(784))
    write_idx(tmp_path / "l", 0x801, (2,), [0, 1])
    with pytest.raises(DataFormatError):
        load_idx(str(tmp_path / "i"), str(tmp_path / "l"))


def test_mnist_dir(mnist_dir):
    train, test = load_mnist_dir(str(mnist_dir), n_train=4)
    assert (len(train), len(test)) == (4, 3)
    assert train.split == "train" and test.split == "test"


def cifar_record(label, fill=0):
    return bytes([label]) + bytes([fill]) * 3072


def test_cifar_single_record(tmp_path):
    p = tmp_path / "b.bin"
    p.write_bytes(cifar_record(9, 255))
    ds = load_cifar10_bin(str(p), mean=(0, 0, 0), std=(1, 1, 1))
    assert len(ds) == 1 and ds.labels[0] == 9
    assert ds.images.shape == (1, 3, 32, 32) and np.all(ds.images == 1.0)


def test_cifar_channel_order(tmp_path):
    rec = bytearray(cifar_record(1))
    rec[1 + 1024] = 255  # first pixel of the green plane
    p = tmp_path / "b.bin"
    p.write_bytes(bytes(rec))
    ds = load_cifar10_bin(str(p), mean=(0, 0, 0), std=(1, 1, 1))
    assert ds.images[0, 1, 0, 0] == 1.0 and ds.images[0].sum() == 1.0


def test_cifar_truncated(tmp_path):
    p = tmp_path / "b.bin"
    p.write_bytes(cifar_record(0) + cifar_record(1)[:-5])
    with pytest.raises(DataFormatError, match="3073"):
        load_cifar10_bin(str(p))


def test_synth_buckets_and_determinism():
    a = synth_angles(5, 200)
    b = synth_angles(5, 200)
    npt.assert_array_equal(a.images, b.images)
    npt.assert_array_equal(a.labels, b.labels)
    assert set(a.labels) == {0, 1, 2, 3}
    assert a.images.shape == (200, 1, 16, 16)
    assert not np.array_equal(synth_angles(6, 200).images, a.images)


def test_synth_balance():
    counts = np.bincount(synth_angles(0, 10_000).labels, minlength=4)
    assert np.all(np.abs(counts - 2500) <= 0.05 * 2500)


def test_synth_rejects_bad_buckets():
    with pytest.raises(ValueError):
        synth_angles(0, 10, num_buckets=7)


@pytest.mark.parametrize("angle, axis", [(0.0, "row"), (90.0, "col")])
def test_draw_line_orientation(angle, axis):
    img = draw_line(angle, size=15, length=9)
    profile = img.sum(axis=1) if axis == "row" else img.sum(axis=0)
    assert np.argmax(profile) == 7
    assert img[7, 7] == 1.0


def test_draw_line_diagonal_goes_up_right():
    img = draw_line(45.0, size=15, length=9)
    assert img[4, 10] > 0.5 and img[10, 4] > 0.5
    assert img[4, 4] == 0.0
