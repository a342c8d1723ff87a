import struct
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bapm.checkpoint import (CheckpointError, decode_checkpoint, encode_checkpoint, load_checkpoint,
                             params_digest, save_checkpoint)
from bapm.model import DownstreamModel, ModelConfig, PretextModel, encoder_forward, load_encoder
from bapm.nifti import (TruncatedFileError, UnsupportedDatatypeError, UnsupportedFormatError, read_nifti,
                        write_nifti)
from bapm.tensor import Tensor, no_grad
from bapm.volume import LABELS, Volume

FIXTURES = Path(__file__).parent / "fixtures"
FIXTURE_AFFINE = np.array([[2.0, 0, 0, -3.0], [0, 1.5, 0, 4.0], [0, 0, 3.0, 10.0], [0, 0, 0, 1]])


class TestVolume:
    def test_label_range(self):
        with pytest.raises(ValueError, match="label values"):
            Volume(np.full((2, 2, 2), 4, np.uint8), kind=LABELS)

    def test_spacing_positive(self):
        with pytest.raises(ValueError):
            Volume(np.zeros((2, 2, 2)), spacing=(1, 0, 1))

    def test_not_3d(self):
        with pytest.raises(ValueError):
            Volume(np.zeros((2, 2)))

    def test_default_affine(self):
        v = Volume(np.zeros((2, 2, 2)), spacing=(1, 2, 3))
        np.testing.assert_array_equal(np.diag(v.affine), [1, 2, 3, 1])


# ---------------------------------------------------------------- nifti


class TestNiftiExternalFixtures:
    """Files written by nibabel (see fixtures/make_fixtures.py)."""

    def test_float32(self):
        v = read_nifti(FIXTURES / "nibabel_float32.nii")
        expected = np.arange(64, dtype=np.float32).reshape(4, 4, 4) * 0.5 - 3.0
        assert v.data.dtype == np.float32 and v.kind == "intensity"
        np.testing.assert_array_equal(v.data, expected)
        assert v.spacing == (2.0, 1.5, 3.0)
        np.testing.assert_array_equal(v.affine, FIXTURE_AFFINE)

    def test_uint8_labels(self):
        v = read_nifti(FIXTURES / "nibabel_uint8.nii")
        assert v.kind == LABELS
        np.testing.assert_array_equal(v.data, (np.arange(60).reshape(3, 4, 5) % 4).astype(np.uint8))

    def test_big_endian_int16(self):
        v = read_nifti(FIXTURES / "nibabel_int16_be.nii")
        np.testing.assert_array_equal(v.data, np.arange(24).reshape(2, 3, 4) * 100 - 1000)

    def test_scaled_int16(self):
        v = read_nifti(FIXTURES / "nibabel_int16_scaled.nii")
        np.testing.assert_array_equal(v.data, np.arange(8).reshape(2, 2, 2) * 0.5 + 10.0)


class TestNiftiRoundtrip:
    def test_float32(self, tmp_path, rng):
        v = Volume(rng.standard_normal((5, 6, 7)).astype(np.float32), spacing=(0.9, 1.1, 2.5))
        write_nifti(v, tmp_path / "v.nii")
        back = read_nifti(tmp_path / "v.nii")
        assert back.data.tobytes() == v.data.tobytes()
        np.testing.assert_allclose(back.spacing, v.spacing, atol=1e-6)
        np.testing.assert_allclose(back.affine, v.affine, atol=1e-6)

    def test_labels(self, tmp_path, rng):
        v = Volume(rng.integers(0, 4, (3, 4, 5)).astype(np.uint8), kind=LABELS)
        write_nifti(v, tmp_path / "l.nii")
        back = read_nifti(tmp_path / "l.nii")
        assert back.kind == LABELS and np.array_equal(back.data, v.data)

    def test_header_constants(self, tmp_path):
        write_nifti(Volume(np.zeros((2, 3, 4), np.float32)), tmp_path / "z.nii")
        raw = (tmp_path / "z.nii").read_bytes()
        assert struct.unpack_from("<i", raw, 0)[0] == 348
        assert raw[344:348] == b"n+1\0"
        assert struct.unpack_from("<f", raw, 108)[0] == 352.0
        assert len(raw) - 352 == 4 * 24

    def test_readable_by_nibabel(self, tmp_path, rng):
        nib = pytest.importorskip("nibabel")
        v = Volume(rng.standard_normal((3, 4, 5)).astype(np.float32), spacing=(1, 2, 3))
        write_nifti(v, tmp_path / "v.nii")
        img = nib.load(tmp_path / "v.nii")
        np.testing.assert_array_equal(np.asarray(img.dataobj), v.data)
        np.testing.assert_allclose(img.affine, v.affine)

    @settings(max_examples=25, deadline=None)
    @given(st.tuples(st.integers(1, 6), st.integers(1, 6), st.integers(1, 6)), st.integers(0, 2**31 - 1))
    def test_any_shape(self, tmp_path_factory, dims, seed):
        path = tmp_path_factory.mktemp("h") / "v.nii"
        data = np.random.default_rng(seed).standard_normal(dims).astype(np.float32)
        write_nifti(Volume(data), path)
        assert read_nifti(path).data.tobytes() == data.tobytes()


class TestNiftiErrors:
    def _file(self, tmp_path, patch=None, cut=None):
        write_nifti(Volume(np.zeros((2, 2, 2), np.float32)), tmp_path / "x.nii")
        raw = bytearray((tmp_path / "x.nii").read_bytes())
        if patch:
            patch(raw)
        if cut:
            raw = raw[:cut]
        (tmp_path / "y.nii").write_bytes(bytes(raw))
        return tmp_path / "y.nii"

    def test_pair_magic(self, tmp_path):
        path = self._file(tmp_path, lambda r: r.__setitem__(slice(344, 348), b"ni1\0"))
        with pytest.raises(UnsupportedFormatError) as err:
            read_nifti(path)
        assert err.value.field == "magic"

    def test_datatype(self, tmp_path):
        path = self._file(tmp_path, lambda r: struct.pack_into("<h", r, 70, 64))
        with pytest.raises(UnsupportedDatatypeError) as err:
            read_nifti(path)
        assert err.value.field == "datatype"

    def test_truncated(self, tmp_path):
        with pytest.raises(TruncatedFileError):
            read_nifti(self._file(tmp_path, cut=352 + 10))

    def test_extension(self, tmp_path):
        path = self._file(tmp_path, lambda r: r.__setitem__(348, 1))
        with pytest.raises(UnsupportedFormatError, match="extension"):
            read_nifti(path)

    def test_not_nifti(self, tmp_path):
        (tmp_path / "junk.nii").write_bytes(b"\0" * 400)
        with pytest.raises(UnsupportedFormatError):
            read_nifti(tmp_path / "junk.nii")


# ---------------------------------------------------------------- checkpoint


class TestCheckpoint:
    def test_roundtrip_bitwise(self, tmp_path, rng):
        params = {"a.w": rng.standard_normal((2, 3)).astype(np.float32), "b": np.float32([1.5])}
        save_checkpoint(params, {"seed": 3, "epoch": 7}, tmp_path / "c.ckpt")
        ck = load_checkpoint(tmp_path / "c.ckpt")
        assert list(ck.entries) == ["a.w", "b"]
        for k in params:
            assert ck.entries[k].tobytes() == params[k].tobytes()
        assert ck.metadata == {"epoch": "7", "seed": "3"}

    def test_byte_stable(self, rng):
        params = {"x": rng.standard_normal(4).astype(np.float32)}
        assert encode_checkpoint(params, {"b": 1, "a": 2}) == encode_checkpoint(params, {"a": 2, "b": 1})

    def test_layout(self):
        raw = encode_checkpoint({"w": np.float32([1.0, 2.0])}, {})
        assert raw[:8] == b"BAPMCKPT"
        assert struct.unpack_from("<II", raw, 8) == (1, 1)
        assert struct.unpack_from("<H", raw, 16)[0] == 1 and raw[18:19] == b"w"
        assert raw[19:21] == bytes([0, 1]) and struct.unpack_from("<I", raw, 21)[0] == 2
        assert np.frombuffer(raw[25:33], "<f4").tolist() == [1.0, 2.0]

    def test_version_mismatch(self):
        raw = bytearray(encode_checkpoint({"w": np.zeros(1)}))
        struct.pack_into("<I", raw, 8, 2)
        with pytest.raises(CheckpointError, match="version"):
            decode_checkpoint(bytes(raw))

    def test_truncated_and_magic(self):
        raw = encode_checkpoint({"w": np.zeros(10)})
        with pytest.raises(CheckpointError, match="truncated"):
            decode_checkpoint(raw[:30])
        with pytest.raises(CheckpointError, match="magic"):
            decode_checkpoint(b"NOTACKPT" + raw[8:])

    def test_encoder_prefix_filter(self):
        model = PretextModel(ModelConfig(1 / 8, (16, 16, 16)))
        ck = decode_checkpoint(encode_checkpoint(model.params), prefix="encoder.")
        enc = [k for k in model.params if k.startswith("encoder.")]
        assert sorted(ck.entries) == sorted(enc)
        assert not any(k.startswith("decoder_") for k in ck.entries)

    def test_load_encoder_errors(self):
        down = DownstreamModel(ModelConfig(1 / 8, (16, 16, 16)))
        entries = {k: v.data for k, v in down.params.items() if k.startswith("encoder.")}
        missing = dict(entries)
        missing.pop("encoder.block3.conv.weight")
        with pytest.raises(KeyError, match="block3"):
            load_encoder(down.params, missing)
        bad = dict(entries)
        bad["encoder.block1.conv.bias"] = np.zeros(3, np.float32)
        with pytest.raises(ValueError, match="expected"):
            load_encoder(down.params, bad)

    def test_transfer_gives_identical_encoder_activations(self, rng):
        config = ModelConfig(1 / 8, (16, 16, 16))
        pre = PretextModel(config, seed=5)
        down = DownstreamModel(config, seed=9)
        ck = decode_checkpoint(encode_checkpoint(pre.params), prefix="encoder.")
        load_encoder(down.params, ck.entries)
        x = Tensor(rng.standard_normal((1, 1, 16, 16, 16)))
        with no_grad():
            a = encoder_forward(x, pre.params).data
            b = encoder_forward(x, down.params).data
        assert a.tobytes() == b.tobytes()
        assert params_digest(pre.params, "encoder.") == params_digest(down.params, "encoder.")

    def test_digest_sensitive(self):
        p = {"encoder.w": np.zeros(3, np.float32)}
        d0 = params_digest(p)
        p["encoder.w"][1] = 1e-30
        assert params_digest(p) != d0
