import struct

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from adapterfusion.adapters import AdapterConfig, make_adapter
from adapterfusion.backbone import BackboneConfig, init_backbone
from adapterfusion.checkpoint import (
    MAGIC,
    decode_container,
    deserialize_adapter,
    deserialize_backbone,
    deserialize_fusion,
    deserialize_head,
    encode_container,
    read_container,
    read_metadata,
    serialize_adapter,
    serialize_backbone,
    serialize_fusion,
    serialize_head,
)
from adapterfusion.errors import CompatibilityError, FormatError
from adapterfusion.fusion import fusion_init
from adapterfusion.model import init_head

BCFG = BackboneConfig(vocab_size=16, max_seq_len=8, hidden_dim=8, num_layers=2, num_heads=2, ffn_dim=16)
DEEPER = BackboneConfig(vocab_size=16, max_seq_len=8, hidden_dim=8, num_layers=3, num_heads=2, ffn_dim=16)


def _adapter(acfg=None):
    phi = make_adapter(BCFG, acfg or AdapterConfig.pfeiffer(2, init_style="full_random"), 0, "sst")
    for t in phi:
        t.data = t.data + np.random.default_rng(0).normal(size=t.shape)
    return phi


def _same(a, b):
    return [(n, x.data.tobytes()) for n, x in a] == [(n, y.data.tobytes()) for n, y in b]


def test_layout_prefix(tmp_path):
    serialize_adapter(_adapter(), {}, tmp_path / "a.ckpt")
    blob = (tmp_path / "a.ckpt").read_bytes()
    magic, version, hlen = struct.unpack_from("<4sII", blob)
    assert magic == MAGIC == b"ADPT" and version == 1
    header, _ = read_container(tmp_path / "a.ckpt")
    offsets = [e["offset"] for e in header["tensors"]]
    assert offsets[0] == 0 and offsets == sorted(offsets)
    assert all(e["dtype"] == "f64" for e in header["tensors"])
    assert len(blob) == 12 + hlen + sum(e["byte_len"] for e in header["tensors"])


@pytest.mark.parametrize("acfg", [AdapterConfig.pfeiffer(2), AdapterConfig.houlsby(4),
                                  AdapterConfig(("top",), 2, new_ln="inside", pretrained_ln="none")])
def test_adapter_round_trip(tmp_path, acfg):
    phi = _adapter(acfg)
    serialize_adapter(phi, {"seed": 3, "dev_accuracy": 0.5}, tmp_path / "a.ckpt")
    back = deserialize_adapter(tmp_path / "a.ckpt", BCFG)
    assert _same(phi.named(), back.named())
    assert back.config == phi.config and back.task == "sst"
    assert read_metadata(tmp_path / "a.ckpt") == {"task": "sst", "seed": 3, "dev_accuracy": 0.5}


def test_adapter_into_other_depth(tmp_path):
    serialize_adapter(_adapter(), {}, tmp_path / "a.ckpt")
    with pytest.raises(CompatibilityError):
        deserialize_adapter(tmp_path / "a.ckpt", DEEPER)


def test_corrupt_header_byte(tmp_path):
    serialize_adapter(_adapter(), {}, tmp_path / "a.ckpt")
    blob = bytearray((tmp_path / "a.ckpt").read_bytes())
    for pos in (0, 5, 14):
        bad = bytearray(blob)
        bad[pos] ^= 0xFF
        with pytest.raises(FormatError):
            decode_container(bytes(bad))


def test_truncated_payload(tmp_path):
    serialize_adapter(_adapter(), {}, tmp_path / "a.ckpt")
    blob = (tmp_path / "a.ckpt").read_bytes()
    (tmp_path / "b.ckpt").write_bytes(blob[:-8])
    with pytest.raises(FormatError):
        deserialize_adapter(tmp_path / "b.ckpt", BCFG)


def test_flipped_payload_bit(tmp_path):
    serialize_adapter(_adapter(), {}, tmp_path / "a.ckpt")
    blob = bytearray((tmp_path / "a.ckpt").read_bytes())
    blob[-3] ^= 0x01
    with pytest.raises(FormatError):
        decode_container(bytes(blob))


def test_wrong_kind(tmp_path):
    serialize_head(init_head(8, 2, 0, "x"), {}, tmp_path / "h.ckpt")
    with pytest.raises(FormatError):
        deserialize_adapter(tmp_path / "h.ckpt", BCFG)


def test_backbone_round_trip(tmp_path):
    theta = init_backbone(BCFG, 4)
    extra = {"mlm.bias": np.arange(16.0)}
    serialize_backbone(theta, {"pretrained": True}, tmp_path / "b.ckpt", extra)
    back, got_extra = deserialize_backbone(tmp_path / "b.ckpt", BCFG)
    assert _same(theta.named(), back.named())
    np.testing.assert_array_equal(got_extra["mlm.bias"], extra["mlm.bias"])
    with pytest.raises(CompatibilityError):
        deserialize_backbone(tmp_path / "b.ckpt", DEEPER)


def test_fusion_round_trip(tmp_path):
    mem = [make_adapter(BCFG, AdapterConfig.pfeiffer(2), i, f"t{i}") for i in range(3)]
    psi = fusion_init(BCFG, mem, 1, "t1")
    serialize_fusion(psi, {}, tmp_path / "f.ckpt")
    back = deserialize_fusion(tmp_path / "f.ckpt", BCFG)
    assert _same(psi.named(), back.named())
    assert back.members == ["t0", "t1", "t2"] and back.target == "t1"
    with pytest.raises(CompatibilityError):
        deserialize_fusion(tmp_path / "f.ckpt", DEEPER)


def test_head_round_trip(tmp_path):
    head = init_head(8, 3, 2, "x")
    serialize_head(head, {}, tmp_path / "h.ckpt")
    back = deserialize_head(tmp_path / "h.ckpt")
    assert _same(head.named(), back.named()) and back.task == "x"


@given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 4)),
              elements=st.floats(allow_nan=False, allow_infinity=True, width=64)))
def test_container_round_trip_is_bit_exact(arr):
    header = {"config": {}, "fingerprint": "", "metadata": {}}
    _, out = decode_container(encode_container(header, {"x": arr, "y": -arr}))
    assert out["x"].tobytes() == arr.tobytes() and out["y"].tobytes() == (-arr).tobytes()


def test_atomic_write_leaves_no_temp(tmp_path):
    serialize_adapter(_adapter(), {}, tmp_path / "a.ckpt")
    serialize_adapter(_adapter(), {}, tmp_path / "a.ckpt")
    assert sorted(p.name for p in tmp_path.iterdir()) == ["a.ckpt"]
