import struct

import numpy as np
import pytest

from patchcompare.checkpoint import (MAGIC, BlobMismatchError, CheckpointError, TruncatedCheckpointError,
                                     VersionMismatchError, load_checkpoint, load_model, save_checkpoint)
from patchcompare.dataset import Normalization
from patchcompare.models import CONFIGURATIONS, build_model, build_reduced_model


def patches(n, size, seed=0):
    return np.random.default_rng(seed).standard_normal((n, size, size)).astype(np.float32)


@pytest.fixture
def saved(tmp_path):
    m = build_reduced_model("siam", seed=4, dtype=np.float32)
    m.normalization = Normalization(0.25, 0.5, "yosemite")
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, m, meta={"iterations": 7, "note": "hello"})
    return m, path


class TestRoundTrip:
    @pytest.mark.parametrize("name", sorted(CONFIGURATIONS))
    def test_forward_outputs_are_bitwise_equal(self, name, tmp_path):
        kind, mode = CONFIGURATIONS[name]
        m = build_model(kind, mode=mode, seed=3, dtype=np.float32)
        save_checkpoint(tmp_path / "m.ckpt", m)
        back = load_model(tmp_path / "m.ckpt")
        assert back.kind is m.kind and back.mode is m.mode
        P1, P2 = patches(3, 64, 1), patches(3, 64, 2)
        if m.mode.value == "l2":
            np.testing.assert_array_equal(back.describe_batch(P1), m.describe_batch(P1))
        else:
            np.testing.assert_array_equal(back.forward_batch(P1, P2), m.forward_batch(P1, P2))

    def test_header_fields(self, saved):
        m, path = saved
        ck = load_checkpoint(path)
        assert ck.version == 1 and ck.patch_size == 16 and ck.seed == 4 and ck.dtype == "float32"
        assert ck.archs == m.archs
        assert ck.normalization == Normalization(0.25, 0.5, "yosemite")
        assert ck.meta == {"iterations": 7, "note": "hello"}
        assert load_model(path).normalization == m.normalization

    def test_float64_model_keeps_dtype_at_stored_precision(self, tmp_path):
        m = build_reduced_model("2ch", seed=0)
        save_checkpoint(tmp_path / "a.ckpt", m)
        back = load_model(tmp_path / "a.ckpt")
        assert back.dtype == np.float64
        for k, v in m.state_dict().items():
            np.testing.assert_array_equal(back.state_dict()[k], v.astype(np.float32))
        save_checkpoint(tmp_path / "b.ckpt", back)
        assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()


class TestCorruption:
    def test_truncated(self, saved, tmp_path):
        _, path = saved
        data = path.read_bytes()
        for cut in (len(data) - 1, len(data) // 2, len(MAGIC) + 5):
            (tmp_path / "t.ckpt").write_bytes(data[:cut])
            with pytest.raises(TruncatedCheckpointError):
                load_checkpoint(tmp_path / "t.ckpt")

    def test_version_bump(self, saved, tmp_path):
        _, path = saved
        (tmp_path / "v.ckpt").write_bytes(path.read_bytes().replace(b"version=1\n", b"version=2\n", 1))
        with pytest.raises(VersionMismatchError, match="2"):
            load_checkpoint(tmp_path / "v.ckpt")

    def test_count_disagrees_with_shape(self, saved, tmp_path):
        _, path = saved
        data = bytearray(path.read_bytes())
        start = data.index(b"end\n") + 4
        (n,) = struct.unpack_from("<I", data, start)
        (ndim,) = struct.unpack_from("<I", data, start + 4 + n)
        count_at = start + 8 + n + 4 * ndim
        (count,) = struct.unpack_from("<Q", data, count_at)
        struct.pack_into("<Q", data, count_at, count + 1)
        (tmp_path / "c.ckpt").write_bytes(bytes(data))
        with pytest.raises(BlobMismatchError):
            load_checkpoint(tmp_path / "c.ckpt")

    def test_architecture_disagrees_with_blobs(self, saved, tmp_path):
        _, path = saved
        data = path.read_bytes()
        line = next(l for l in data.split(b"\n") if l.startswith(b"arch.branch="))
        widened = line.replace(b"C(8,", b"C(9,", 1)
        assert widened != line
        (tmp_path / "a.ckpt").write_bytes(data.replace(line, widened, 1))
        with pytest.raises(BlobMismatchError):
            load_model(tmp_path / "a.ckpt")

    def test_not_a_checkpoint(self, tmp_path):
        (tmp_path / "x").write_bytes(b"hello")
        with pytest.raises(CheckpointError):
            load_checkpoint(tmp_path / "x")

    def test_trailing_bytes(self, saved, tmp_path):
        _, path = saved
        (tmp_path / "t.ckpt").write_bytes(path.read_bytes() + b"\0")
        with pytest.raises(CheckpointError, match="trailing"):
            load_checkpoint(tmp_path / "t.ckpt")
