"""
Tests for the BFM1 model file format.
"""

import struct

import numpy as np
import orjson
import pytest

from backdoorlab.model_io import (
    MAGIC,
    ModelFormatError,
    UnsupportedVersionError,
    decode_model,
    encode_model,
    load_model,
    save_model,
)


def _split(data: bytes) -> tuple[dict, bytes]:
    (length,) = struct.unpack_from("<I", data, 4)
    return orjson.loads(data[8:8 + length]), data[8 + length:]


def _join(descriptor: dict, body: bytes) -> bytes:
    raw = orjson.dumps(descriptor)
    return MAGIC + struct.pack("<I", len(raw)) + raw + body


class TestRoundTrip:
    """Encoded models decode to the same parameters, flags and masks."""

    def test_params_and_arch_preserved(self, tiny_model):
        decoded = decode_model(encode_model(tiny_model))
        assert decoded.arch == tiny_model.arch
        for a, b in zip(tiny_model.params, decoded.params):
            np.testing.assert_array_equal(a, b)
            assert b.dtype == np.float32

    def test_trainable_and_masks_preserved(self, tiny_model):
        model = tiny_model.copy()
        model.set_policy(head_only=True)
        model.channel_masks[0] = np.array([True, False, False, True])
        decoded = decode_model(encode_model(model))
        assert decoded.trainable == model.trainable
        np.testing.assert_array_equal(decoded.channel_masks[0], model.channel_masks[0])

    def test_momentum_not_stored(self, tiny_model):
        model = tiny_model.copy()
        model.momentum[0][...] = 1.0
        assert np.all(decode_model(encode_model(model)).momentum[0] == 0)

    def test_save_and_load(self, tiny_model, tmp_path):
        path = tmp_path / "models" / "m.bfm"
        save_model(tiny_model, path)
        assert path.read_bytes()[:4] == MAGIC
        assert not (tmp_path / "models" / "m.bfm.tmp").exists()
        loaded = load_model(path)
        np.testing.assert_array_equal(loaded.params[2], tiny_model.params[2])

    def test_encoding_is_deterministic(self, tiny_model):
        assert encode_model(tiny_model) == encode_model(tiny_model.copy())


class TestMalformedFiles:
    """Decoding errors name what is wrong and where."""

    def test_bad_magic(self, tiny_model):
        data = b"XXXX" + encode_model(tiny_model)[4:]
        with pytest.raises(ModelFormatError) as exc:
            decode_model(data)
        assert exc.value.offset == 0

    def test_truncated_tensor_data(self, tiny_model):
        data = encode_model(tiny_model)
        with pytest.raises(ModelFormatError, match="truncated"):
            decode_model(data[:-40])

    def test_truncated_descriptor(self, tiny_model):
        with pytest.raises(ModelFormatError):
            decode_model(encode_model(tiny_model)[:20])

    def test_trailing_bytes(self, tiny_model):
        with pytest.raises(ModelFormatError, match="trailing"):
            decode_model(encode_model(tiny_model) + b"\x00\x00")

    def test_unsupported_version(self, tiny_model):
        descriptor, body = _split(encode_model(tiny_model))
        descriptor["format_version"] = 2
        with pytest.raises(UnsupportedVersionError, match="version 2"):
            decode_model(_join(descriptor, body))

    def test_shapes_disagree_with_arch(self, tiny_model):
        descriptor, body = _split(encode_model(tiny_model))
        descriptor["shapes"][0] = [5, 1, 3, 3]
        with pytest.raises(ModelFormatError, match="shapes"):
            decode_model(_join(descriptor, body))

    def test_descriptor_not_json(self, tiny_model):
        data = MAGIC + struct.pack("<I", 3) + b"{{{"
        with pytest.raises(ModelFormatError) as exc:
            decode_model(data)
        assert exc.value.offset == 8

    @pytest.mark.parametrize("payload", [b"[]", b"3", b"\"bfm\"", b"null"])
    def test_descriptor_not_an_object(self, payload):
        data = MAGIC + struct.pack("<I", len(payload)) + payload
        with pytest.raises(ModelFormatError) as exc:
            decode_model(data)
        assert exc.value.offset == 8
