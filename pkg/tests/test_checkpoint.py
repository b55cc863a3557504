"""Checkpoint layout, round trips and corruption handling."""

import hashlib
import struct

import numpy as np
import pytest

from xmsynth.checkpoint import (
    DIGEST_SIZE,
    KIND_TAGS,
    MAGIC,
    decode_checkpoint,
    encode_checkpoint,
    load_checkpoint,
    save_checkpoint,
)
from xmsynth.errors import CheckpointFormatError, DataError, IntegrityError, KindMismatchError
from xmsynth.models import build_bundle
from xmsynth.training import TrainConfig, train


@pytest.fixture(scope="module")
def trained():
    """Briefly trained bundles, so optimizer moments and running stats are populated."""
    rng = np.random.default_rng(0)
    x = rng.uniform(-1, 1, size=(8, 1, 64, 64)).astype(np.float32)
    y = rng.uniform(-1, 1, size=(8, 1, 64, 64)).astype(np.float32)
    return {
        kind: train((x, y), TrainConfig.desk(kind, epochs=1, batch_size=4, base_channels=4, latent_dim=8))[0]
        for kind in KIND_TAGS
    }


@pytest.fixture
def probe():
    return np.random.default_rng(0).uniform(-1, 1, size=(3, 1, 64, 64)).astype(np.float32)


def parse_header(data):
    """Independent reader for the fixed-size header and config blob."""
    version, tag, n = struct.unpack_from("<III", data, 4)
    config = data[16 : 16 + n].decode()
    return version, tag, config, 16 + n


class TestLayout:
    def test_header_fields(self, trained):
        data = encode_checkpoint(trained["cyclegan"])
        version, tag, config, _ = parse_header(data)
        assert data[:4] == MAGIC == b"XMS1"
        assert (version, tag) == (1, 2)
        lines = config.splitlines()
        assert lines == sorted(lines) and "kind=cyclegan" in lines

    def test_first_record_layout(self, trained):
        bundle = trained["pix2pix"]
        data = encode_checkpoint(bundle)
        _, _, _, pos = parse_header(data)
        (count,) = struct.unpack_from("<I", data, pos)
        assert count == len(bundle.params) + len(bundle.buffers)
        (name_len,) = struct.unpack_from("<I", data, pos + 4)
        pos += 8
        name = data[pos : pos + name_len].decode()
        pos += name_len
        dtype_tag, rank = data[pos], data[pos + 1]
        dims = struct.unpack_from(f"<{rank}I", data, pos + 2)
        payload = np.frombuffer(data, "<f4", count=int(np.prod(dims)), offset=pos + 2 + 4 * rank)
        first = next(iter(bundle.params))
        assert (name, dtype_tag, dims) == (first, 1, bundle.params[first].shape)
        np.testing.assert_array_equal(payload.reshape(dims), bundle.params[first].data)

    def test_trailing_digest(self, trained):
        data = encode_checkpoint(trained["vae"])
        assert data[-DIGEST_SIZE:] == hashlib.blake2b(data[:-DIGEST_SIZE], digest_size=8).digest()

    def test_optimizer_section_is_optional(self, trained):
        full = encode_checkpoint(trained["vae"])
        bare = encode_checkpoint(trained["vae"], include_optimizer=False)
        assert len(bare) < len(full)
        assert decode_checkpoint(bare).optimizers == {}


@pytest.mark.parametrize("kind", sorted(KIND_TAGS))
class TestRoundTrip:
    def test_save_load_save_is_byte_identical(self, trained, kind, tmp_path):
        first = save_checkpoint(trained[kind], tmp_path / "a.xms")
        second = save_checkpoint(load_checkpoint(first), tmp_path / "b.xms")
        assert first.read_bytes() == second.read_bytes()

    def test_parameters_and_buffers_bit_exact(self, trained, kind):
        bundle = trained[kind]
        loaded = decode_checkpoint(encode_checkpoint(bundle))
        for name, p in bundle.params.items():
            assert np.array_equal(p.data, loaded.params[name].data) and p.dtype == loaded.params[name].dtype
        for name, buf in bundle.buffers.items():
            assert np.array_equal(buf, loaded.buffers[name])

    def test_forward_output_bit_identical(self, trained, kind, probe):
        bundle = trained[kind]
        loaded = decode_checkpoint(encode_checkpoint(bundle))
        assert np.array_equal(bundle.translate(probe), loaded.translate(probe))

    def test_optimizer_state_restored(self, trained, kind):
        bundle = trained[kind]
        loaded = decode_checkpoint(encode_checkpoint(bundle))
        assert list(loaded.optimizers) == list(bundle.optimizers)
        for name, st in bundle.optimizers.items():
            other = loaded.optimizers[name]
            assert (other.t, other.lr, other.beta1, other.beta2, other.eps) == (st.t, st.lr, st.beta1, st.beta2, st.eps)
            for k in st.m:
                assert np.array_equal(st.m[k], other.m[k]) and np.array_equal(st.v[k], other.v[k])

    def test_random_byte_flips_are_detected(self, trained, kind):
        data = encode_checkpoint(trained[kind], include_optimizer=False)
        positions = np.random.default_rng(1).choice(len(data), size=20, replace=False)
        for pos in positions:
            bad = bytearray(data)
            bad[pos] ^= 0x01
            with pytest.raises(DataError):
                decode_checkpoint(bytes(bad))


class TestErrors:
    def test_payload_flip_is_integrity_error(self, trained):
        data = bytearray(encode_checkpoint(trained["pix2pix"]))
        data[len(data) // 2] ^= 0xFF
        with pytest.raises(IntegrityError):
            decode_checkpoint(bytes(data))

    def test_bad_magic(self, trained):
        data = b"XMS2" + encode_checkpoint(trained["vae"])[4:]
        with pytest.raises(CheckpointFormatError):
            decode_checkpoint(data)

    def test_unsupported_version(self, trained):
        data = bytearray(encode_checkpoint(trained["vae"]))
        data[4:8] = struct.pack("<I", 7)
        with pytest.raises(CheckpointFormatError, match="version 7"):
            decode_checkpoint(bytes(data))

    @pytest.mark.parametrize("keep", [0.1, 0.5, 0.99])
    def test_truncated(self, trained, keep, tmp_path):
        data = encode_checkpoint(trained["vae"])
        path = tmp_path / "cut.xms"
        path.write_bytes(data[: int(len(data) * keep)])
        with pytest.raises(DataError):
            load_checkpoint(path)

    def test_kind_mismatch(self, trained, tmp_path):
        path = save_checkpoint(trained["vae"], tmp_path / "vae.xms")
        with pytest.raises(KindMismatchError):
            load_checkpoint(path, expect_kind="pix2pix")

    def test_shape_mismatch_against_config(self):
        bundle = build_bundle("pix2pix", 64, 1, 4)
        bundle.base_channels = 8
        with pytest.raises(IntegrityError, match="shape"):
            decode_checkpoint(encode_checkpoint(bundle))

    def test_missing_file(self, tmp_path):
        with pytest.raises(DataError):
            load_checkpoint(tmp_path / "absent.xms")

    def test_write_is_atomic(self, trained, tmp_path):
        path = save_checkpoint(trained["vae"], tmp_path / "sub" / "m.xms")
        assert sorted(p.name for p in path.parent.iterdir()) == ["m.xms"]
