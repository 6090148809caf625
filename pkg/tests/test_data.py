import gzip
import struct

import numpy as np
import pytest

from depprune.data import (CIFAR_RECORD, IngestError, augment_batch, channel_stats, digits_idx_bytes,
                           load_dataset, normalize, parse_cifar_batch, parse_idx, write_idx)


def cifar_record(label, r=1, g=2, b=3):
    planes = np.stack([np.full((32, 32), v, np.uint8) for v in (r, g, b)])
    planes[0, 0, 1] = 200  # row 0, column 1 of the red plane
    planes[2, 31, 0] = 250  # last row, first column of the blue plane
    return bytes([label]) + planes.tobytes()


def idx_header(code, dims):
    return bytes([0, 0, code, len(dims)]) + b"".join(d.to_bytes(4, "big") for d in dims)


class TestCifar:
    def test_crafted_record(self):
        x, y = parse_cifar_batch(cifar_record(7))
        assert x.shape == (1, 3, 32, 32)
        assert y.tolist() == [7]
        assert x[0, 0, 0, 1] == 200 and x[0, 0, 0, 0] == 1
        assert x[0, 1].min() == x[0, 1].max() == 2
        assert x[0, 2, 31, 0] == 250 and x[0, 2, 0, 0] == 3

    def test_record_size(self):
        assert CIFAR_RECORD == 3073

    def test_partial_record_offset(self):
        buf = cifar_record(1) + cifar_record(2)[:100]
        with pytest.raises(IngestError, match="byte offset 3073") as err:
            parse_cifar_batch(buf)
        assert err.value.offset == 3073

    def test_bad_label_offset(self):
        with pytest.raises(IngestError) as err:
            parse_cifar_batch(cifar_record(3) + cifar_record(12))
        assert err.value.offset == 3073


class TestIdx:
    def test_image_header(self):
        pixels = np.arange(2 * 3 * 4, dtype=np.uint8)
        buf = bytes.fromhex("00000803") + struct.pack(">III", 2, 3, 4) + pixels.tobytes()
        x = parse_idx(buf)
        assert x.shape == (2, 3, 4)
        assert x[1, 2, 3] == 23

    def test_label_header(self):
        buf = bytes.fromhex("00000801") + (5).to_bytes(4, "big") + bytes([3, 1, 4, 1, 5])
        assert parse_idx(buf).tolist() == [3, 1, 4, 1, 5]

    def test_big_endian_wide_types(self):
        buf = idx_header(0x0C, [2]) + struct.pack(">ii", -7, 65536)
        assert parse_idx(buf).tolist() == [-7, 65536]

    def test_round_trip(self):
        a = np.random.default_rng(0).integers(0, 256, (5, 4, 3)).astype(np.uint8)
        assert np.array_equal(parse_idx(write_idx(a)), a)

    @pytest.mark.parametrize("buf,offset", [
        (b"\x00\x00", 2),
        (b"\x01\x00\x08\x01" + (1).to_bytes(4, "big") + b"\x00", 0),
        (b"\x00\x00\x07\x01" + (1).to_bytes(4, "big") + b"\x00", 2),
        (b"\x00\x00\x08\x02" + (1).to_bytes(4, "big"), 8),
        (idx_header(0x08, [2, 2]) + b"\x00\x00\x00", 15),
        (idx_header(0x08, [2]) + b"\x00\x00\x09", 10),
    ])
    def test_errors_carry_offsets(self, buf, offset):
        with pytest.raises(IngestError) as err:
            parse_idx(buf)
        assert err.value.offset == offset
        assert f"byte offset {offset}" in str(err.value)


def _write_mnist(root, n_train=30, n_test=10, gz=False):
    rng = np.random.default_rng(0)
    for prefix, n in (("train", n_train), ("t10k", n_test)):
        files = {f"{prefix}-images-idx3-ubyte": write_idx(rng.integers(0, 256, (n, 28, 28)).astype(np.uint8)),
                 f"{prefix}-labels-idx1-ubyte": write_idx((np.arange(n) % 10).astype(np.uint8))}
        for name, data in files.items():
            if gz:
                (root / f"{name}.gz").write_bytes(gzip.compress(data))
            else:
                (root / name).write_bytes(data)


class TestLoaders:
    @pytest.mark.parametrize("gz", [False, True])
    def test_mnist_files(self, tmp_path, gz):
        _write_mnist(tmp_path, gz=gz)
        train = load_dataset("mnist", "train", root=str(tmp_path), seed=1)
        val = load_dataset("mnist", "val", root=str(tmp_path), seed=1)
        test = load_dataset("mnist", "test", root=str(tmp_path), seed=1)
        assert (len(train), len(val), len(test)) == (27, 3, 10)
        assert train.shape == (1, 28, 28) and train.images.dtype == np.float32
        assert train.pad == 4 and not train.flip

    def test_env_root(self, tmp_path, monkeypatch):
        _write_mnist(tmp_path)
        monkeypatch.setenv("DEPPRUNE_DATA", str(tmp_path))
        assert len(load_dataset("mnist", "test")) == 10

    def test_missing_files(self, tmp_path):
        with pytest.raises(IngestError, match="not found"):
            load_dataset("mnist", "train", root=str(tmp_path))

    def test_corrupt_file(self, tmp_path):
        _write_mnist(tmp_path)
        p = tmp_path / "train-images-idx3-ubyte"
        p.write_bytes(p.read_bytes()[:-5])
        with pytest.raises(IngestError, match="truncated"):
            load_dataset("mnist", "train", root=str(tmp_path))

    def test_cifar_files(self, tmp_path):
        base = tmp_path / "cifar-10-batches-bin"
        base.mkdir()
        for i in range(1, 6):
            (base / f"data_batch_{i}.bin").write_bytes(b"".join(cifar_record(c) for c in range(10)))
        (base / "test_batch.bin").write_bytes(b"".join(cifar_record(c) for c in range(5)))
        train = load_dataset("cifar10", "train", root=str(tmp_path), per_class=3, val_fraction=0.0)
        assert len(train) == 30 and train.flip and train.pad == 4
        assert np.bincount(train.labels).tolist() == [3] * 10
        assert len(load_dataset("cifar10", "test", root=str(tmp_path))) == 5

    def test_digits(self):
        train = load_dataset("digits", "train", seed=1)
        val = load_dataset("digits", "val", seed=1)
        test = load_dataset("digits", "test", seed=1)
        assert train.shape == (1, 8, 8)
        assert len(train) + len(val) + len(test) == 1797
        assert len(test) == 359
        assert train.pad == 1
        assert abs(float(train.images.mean())) < 1e-3

    def test_test_split_fixed_val_split_seeded(self):
        t1, t2 = load_dataset("digits", "test", seed=1), load_dataset("digits", "test", seed=2)
        assert np.array_equal(t1.labels, t2.labels)
        v1, v2 = load_dataset("digits", "val", seed=1), load_dataset("digits", "val", seed=2)
        assert not np.array_equal(v1.images, v2.images)

    def test_digits_idx_header(self):
        xb, yb = digits_idx_bytes()
        assert xb[:4] == bytes.fromhex("00000803")
        assert struct.unpack(">III", xb[4:16]) == (1797, 8, 8)
        assert yb[:4] == bytes.fromhex("00000801")


class TestTransforms:
    def test_constant_image_normalizes_to_zero(self):
        imgs = np.full((4, 3, 5, 5), 100, np.uint8)
        mean, std = channel_stats(imgs)
        out = normalize(imgs, mean, np.ones(3, np.float32))
        assert np.abs(out).max() < 1e-6

    def test_channel_stats(self):
        imgs = np.random.default_rng(0).integers(0, 256, (6, 3, 4, 4)).astype(np.uint8)
        out = normalize(imgs, *channel_stats(imgs))
        assert np.abs(out.mean(axis=(0, 2, 3))).max() < 1e-5
        assert np.abs(out.std(axis=(0, 2, 3)) - 1).max() < 1e-4

    def test_crop_without_flip_preserves_content(self):
        x = np.random.default_rng(0).normal(size=(8, 1, 6, 6)).astype(np.float32)
        out = augment_batch(x, np.random.default_rng(1), pad=0, flip=False)
        assert np.array_equal(out, x)

    def test_crop_is_shift(self):
        x = np.arange(36, dtype=np.float32).reshape(1, 1, 6, 6)
        out = augment_batch(x, np.random.default_rng(3), pad=2, flip=False)
        padded = np.pad(x[0, 0], 2)
        assert any(np.array_equal(out[0, 0], padded[i:i + 6, j:j + 6]) for i in range(5) for j in range(5))

    def test_flip(self):
        x = np.arange(16, dtype=np.float32).reshape(1, 1, 4, 4).repeat(64, axis=0)
        out = augment_batch(x, np.random.default_rng(0), pad=0, flip=True)
        flipped = [np.array_equal(o[0], x[0, 0, :, ::-1]) for o in out]
        assert 0 < sum(flipped) < 64
        assert all(f or np.array_equal(o[0], x[0, 0]) for f, o in zip(flipped, out))

    def test_batches_deterministic(self):
        ds = load_dataset("digits", "val", seed=1)
        a = [y for _, y in ds.batches(16, np.random.default_rng(5), augment=True)]
        b = [y for _, y in ds.batches(16, np.random.default_rng(5), augment=True)]
        assert all(np.array_equal(p, q) for p, q in zip(a, b))
        assert sum(len(y) for y in a) == len(ds)
