"""Checkpoint format: byte-level layout, round trips, corruption reporting
with byte offsets, and whole-model save/load."""

import struct
import zlib

import numpy as np
import numpy.testing as npt
import pytest

from civt import checkpoint as C
from civt import models as M
from civt.errors import DataFormatError
from civt.tensor import Tensor, no_grad


def toy_tensors():
    rng = np.random.default_rng(0)
    return {
        "a.w": rng.normal(size=(3, 4)).astype(np.float32),
        "a.b": rng.normal(size=(4,)).astype(np.float32),
        "scalarish": np.float32(2.5),  # rank 0
    }


class TestTensorRoundTrip:
    def test_bitwise_round_trip_preserving_order(self, tmp_path):
        path = str(tmp_path / "t.civt")
        named = toy_tensors()
        C.save_tensors(path, named)
        back = C.load_tensors(path)
        assert list(back) == list(named)
        for k in named:
            npt.assert_array_equal(back[k], np.asarray(named[k], dtype=np.float32))

    def test_layout_is_as_documented(self, tmp_path):
        # header: magic, u32 version, u32 count; then per tensor: u32 name
        # length, name bytes, u32 rank, rank extents, u8 dtype tag, payload;
        # finally a crc32 of everything before it
        path = str(tmp_path / "t.civt")
        C.save_tensors(path, {"x": np.arange(6, dtype=np.float32).reshape(2, 3)})
        blob = open(path, "rb").read()
        assert blob[:4] == b"CIVT"
        version, count = struct.unpack_from("<II", blob, 4)
        assert (version, count) == (1, 1)
        name_len = struct.unpack_from("<I", blob, 12)[0]
        assert name_len == 1 and blob[16:17] == b"x"
        rank = struct.unpack_from("<I", blob, 17)[0]
        assert rank == 2
        assert struct.unpack_from("<II", blob, 21) == (2, 3)
        assert blob[29] == 0  # f32 tag
        payload = np.frombuffer(blob[30:30 + 24], dtype="<f4")
        npt.assert_array_equal(payload, np.arange(6, dtype=np.float32))
        stored_crc = struct.unpack("<I", blob[-4:])[0]
        assert stored_crc == (zlib.crc32(blob[:-4]) & 0xFFFFFFFF)
        assert len(blob) == 30 + 24 + 4

    def test_float64_input_is_stored_as_f32(self, tmp_path):
        path = str(tmp_path / "t.civt")
        C.save_tensors(path, {"w": np.array([1.0, 1 / 3], dtype=np.float64)})
        back = C.load_tensors(path)["w"]
        assert back.dtype == np.float32
        npt.assert_array_equal(back, np.array([1.0, 1 / 3], dtype=np.float32))


class TestCorruptionDetection:
    def write(self, tmp_path):
        path = str(tmp_path / "t.civt")
        C.save_tensors(path, toy_tensors())
        return path, bytearray(open(path, "rb").read())

    def test_flipped_payload_byte_fails_checksum(self, tmp_path):
        path, blob = self.write(tmp_path)
        blob[40] ^= 0xFF
        open(path, "wb").write(bytes(blob))
        with pytest.raises(DataFormatError, match="checksum mismatch"):
            C.load_tensors(path)

    def test_truncation_reports_byte_offset(self, tmp_path):
        path, blob = self.write(tmp_path)
        # chop inside the first payload but fix up the crc so the cut itself
        # is what gets reported
        cut = 40
        body = bytes(blob[:cut])
        open(path, "wb").write(body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF))
        with pytest.raises(DataFormatError, match="byte offset"):
            C.load_tensors(path)

    def test_bad_magic(self, tmp_path):
        path, blob = self.write(tmp_path)
        body = b"NOPE" + bytes(blob[4:-4])
        open(path, "wb").write(body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF))
        with pytest.raises(DataFormatError, match="magic"):
            C.load_tensors(path)

    def test_unsupported_version(self, tmp_path):
        path, blob = self.write(tmp_path)
        body = bytearray(blob[:-4])
        struct.pack_into("<I", body, 4, 99)
        body = bytes(body)
        open(path, "wb").write(body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF))
        with pytest.raises(DataFormatError, match="version 99"):
            C.load_tensors(path)

    def test_tiny_file(self, tmp_path):
        path = str(tmp_path / "t.civt")
        open(path, "wb").write(b"CIVT")
        with pytest.raises(DataFormatError, match="too short"):
            C.load_tensors(path)

    def test_missing_file(self, tmp_path):
        with pytest.raises(DataFormatError, match="cannot read"):
            C.load_tensors(str(tmp_path / "absent.civt"))


def small_spec():
    return M.ModelSpec(family="civt", image_size=16, channels=3, classes=5,
                       width=16, depth=2, heads=2, patch=4)


class TestModelRoundTrip:
    def test_weights_spec_and_extras_survive(self, tmp_path):
        path = str(tmp_path / "m.civt")
        model = M.build(small_spec(), seed=3)
        extras = {"__norm__/mean": np.array([0.1, 0.2, 0.3], dtype=np.float32),
                  "__norm__/std": np.array([1.0, 1.1, 1.2], dtype=np.float32)}
        C.save_model(path, model, extras)
        loaded, back_extras = C.load_model(path)
        assert loaded.spec == small_spec()
        for (na, pa), (nb, pb) in zip(model.named_parameters(),
                                      loaded.named_parameters()):
            assert na == nb
            npt.assert_array_equal(pa.data, pb.data)
        npt.assert_array_equal(back_extras["__norm__/mean"], extras["__norm__/mean"])
        npt.assert_array_equal(back_extras["__norm__/std"], extras["__norm__/std"])

    def test_extras_must_be_name_spaced(self, tmp_path):
        path = str(tmp_path / "m.civt")
        with pytest.raises(DataFormatError, match="__"):
            C.save_model(path, M.build(small_spec(), seed=0), {"mean": np.zeros(3)})

    def test_loaded_model_reproduces_logits(self, tmp_path):
        path = str(tmp_path / "m.civt")
        spec = M.ModelSpec(family="inn", image_size=16, channels=3, classes=4,
                           stage_widths=(8, 16), blocks_per_stage=1, gn_groups=4,
                           inv_kernel=3, inv_groups=2, inv_reduction=2)
        model = M.build(spec, seed=1)
        C.save_model(path, model)
        loaded, _ = C.load_model(path)
        x = Tensor(np.random.default_rng(2).normal(size=(2, 3, 16, 16)).astype(np.float32))
        with no_grad():
            a = M.forward_teacher(model, x).data
            b = M.forward_teacher(loaded, x).data
        npt.assert_array_equal(a, b)

    def test_teacher_round_trip_all_families(self, tmp_path):
        for family in ("cnn", "inn"):
            spec = M.ModelSpec(family=family, image_size=16, channels=3, classes=4,
                               stage_widths=(8,), blocks_per_stage=1, gn_groups=4,
                               inv_kernel=3, inv_groups=2, inv_reduction=2)
            path = str(tmp_path / f"{family}.civt")
            C.save_model(path, M.build(spec, seed=0))
            back, _ = C.load_model(path)
            assert back.spec.family == family

    def test_surplus_tensor_rejected(self, tmp_path):
        path = str(tmp_path / "m.civt")
        model = M.build(small_spec(), seed=0)
        C.save_model(path, model)
        named = C.load_tensors(path)
        named["rogue"] = np.zeros(3, dtype=np.float32)
        C.save_tensors(path, named)
        with pytest.raises(DataFormatError, match="rogue"):
            C.load_model(path)

    def test_missing_tensor_rejected(self, tmp_path):
        path = str(tmp_path / "m.civt")
        model = M.build(small_spec(), seed=0)
        C.save_model(path, model)
        named = C.load_tensors(path)
        dropped = next(k for k in named if not k.startswith("__"))
        del named[dropped]
        C.save_tensors(path, named)
        with pytest.raises(DataFormatError, match="missing"):
            C.load_model(path)

    def test_shape_mismatch_rejected(self, tmp_path):
        path = str(tmp_path / "m.civt")
        model = M.build(small_spec(), seed=0)
        C.save_model(path, model)
        named = C.load_tensors(path)
        key = next(k for k in named if k.endswith("head_class.w"))
        named[key] = named[key][:, :-1]
        C.save_tensors(path, named)
        with pytest.raises(DataFormatError, match="shape"):
            C.load_model(path)

    def test_spec_records_hidden_from_params(self, tmp_path):
        path = str(tmp_path / "m.civt")
        C.save_model(path, M.build(small_spec(), seed=0))
        loaded, extras = C.load_model(path)
        assert not any(n.startswith("__") for n, _ in loaded.named_parameters())
        assert not extras  # none were stored
