"""Tensor-container checkpoint files.

Layout::

    0..3    magic b"ADPT"
    4..7    format version, uint32 little-endian (1)
    8..11   header length H, uint32 little-endian
    12..    UTF-8 JSON header of H bytes
    ...     raw little-endian float64 payloads

The header holds ``kind``, ``config``, ``fingerprint``, ``metadata`` and ``tensors``
(``name``, ``shape``, ``dtype="f64"``, ``offset``, ``byte_len``). Offsets are
relative to the start of the payload and tensors are stored in header order.
A ``payload_crc32`` field guards the payload bytes. Fusion checkpoints add
a ``members`` list naming the composed adapters in order.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
import zlib
from collections import OrderedDict
from pathlib import Path
from typing import Mapping

import numpy as np

from .adapters import AdapterConfig, AdapterParams, adapter_shapes
from .autodiff import Tensor
from .backbone import BackboneConfig, BackboneParams, backbone_param_shapes
from .errors import CompatibilityError, FormatError
from .fusion import FusionParams, fusion_shapes
from .model import ClassifierHead

MAGIC = b"ADPT"
VERSION = 1
_PREFIX = struct.Struct("<4sII")


def atomic_write_bytes(path: str | os.PathLike, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def encode_container(header: Mapping, tensors: Mapping[str, np.ndarray]) -> bytes:
    entries = []
    chunks = []
    offset = 0
    for name, arr in tensors.items():
        raw = np.ascontiguousarray(arr, dtype="<f8").tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "dtype": "f64", "offset": offset, "byte_len": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    payload = b"".join(chunks)
    full = dict(header)
    full["tensors"] = entries
    full["payload_crc32"] = zlib.crc32(payload)
    head = json.dumps(full, sort_keys=True).encode("utf-8")
    return _PREFIX.pack(MAGIC, VERSION, len(head)) + head + payload


def decode_container(blob: bytes) -> tuple[dict, "OrderedDict[str, np.ndarray]"]:
    if len(blob) < _PREFIX.size:
        raise FormatError("file too short for container prefix")
    magic, version, hlen = _PREFIX.unpack_from(blob)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}")
    if version != VERSION:
        raise FormatError(f"unsupported format version {version}")
    start = _PREFIX.size + hlen
    if start > len(blob):
        raise FormatError("header length exceeds file size")
    try:
        header = json.loads(blob[_PREFIX.size : start].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"unreadable header: {exc}") from None
    if not isinstance(header, dict):
        raise FormatError("header is not a JSON object")
    for key in ("config", "fingerprint", "metadata", "tensors", "payload_crc32"):
        if key not in header:
            raise FormatError(f"header missing {key!r}")
    payload = blob[start:]
    if zlib.crc32(payload) != header["payload_crc32"]:
        raise FormatError("payload checksum mismatch (truncated or corrupt)")
    out: OrderedDict[str, np.ndarray] = OrderedDict()
    expected = 0
    for entry in header["tensors"]:
        try:
            name, shape, off, n = entry["name"], tuple(entry["shape"]), entry["offset"], entry["byte_len"]
        except (KeyError, TypeError):
            raise FormatError(f"malformed tensor entry {entry!r}") from None
        if entry.get("dtype") != "f64":
            raise FormatError(f"unsupported dtype in {name!r}")
        if off != expected or n != 8 * int(np.prod(shape, dtype=np.int64)) or off + n > len(payload):
            raise FormatError(f"tensor {name!r} has inconsistent offset/length")
        out[name] = np.frombuffer(payload, dtype="<f8", count=n // 8, offset=off).astype(np.float64).reshape(shape)
        expected = off + n
    if expected != len(payload):
        raise FormatError("payload length does not match tensor table")
    return header, out


def read_container(path: str | os.PathLike) -> tuple[dict, "OrderedDict[str, np.ndarray]"]:
    return decode_container(Path(path).read_bytes())


def write_container(path: str | os.PathLike, header: Mapping, tensors: Mapping[str, np.ndarray]) -> None:
    atomic_write_bytes(path, encode_container(header, tensors))


def _check_shapes(arrays: Mapping[str, np.ndarray], expected: Mapping[str, tuple]) -> None:
    if list(arrays) != list(expected):
        raise CompatibilityError("tensor names do not match the expected layout")
    for k, shape in expected.items():
        if arrays[k].shape != tuple(shape):
            raise CompatibilityError(f"tensor {k!r} has shape {arrays[k].shape}, expected {tuple(shape)}")


# ---------------------------------------------------------------------------
# adapters


def serialize_adapter(phi: AdapterParams, metadata: Mapping, path: str | os.PathLike) -> None:
    header = {
        "kind": "adapter",
        "config": phi.config.to_dict(),
        "fingerprint": phi.backbone_fingerprint,
        "metadata": {"task": phi.task, **dict(metadata)},
    }
    write_container(path, header, OrderedDict((k, t.data) for k, t in phi.named()))


def deserialize_adapter(path: str | os.PathLike, bcfg: BackboneConfig) -> AdapterParams:
    header, arrays = read_container(path)
    if header.get("kind") != "adapter":
        raise FormatError(f"expected an adapter checkpoint, found {header.get('kind')!r}")
    if header["fingerprint"] != bcfg.fingerprint():
        raise CompatibilityError(
            f"adapter was trained for backbone {header['fingerprint']}, target backbone is {bcfg.fingerprint()}"
        )
    acfg = AdapterConfig.from_dict(header["config"])
    _check_shapes(arrays, adapter_shapes(acfg, bcfg))
    task = header["metadata"].get("task", "task")
    tensors = OrderedDict((k, Tensor(v, trainable=False, name=f"{task}/{k}")) for k, v in arrays.items())
    return AdapterParams(task, acfg, header["fingerprint"], bcfg.num_layers, bcfg.hidden_dim, tensors)


def read_metadata(path: str | os.PathLike) -> dict:
    header, _ = read_container(path)
    return header["metadata"]


# ---------------------------------------------------------------------------
# backbone


def serialize_backbone(params: BackboneParams, metadata: Mapping, path: str | os.PathLike,
                       extra: Mapping[str, np.ndarray] | None = None) -> None:
    header = {
        "kind": "backbone",
        "config": params.config.to_dict(),
        "fingerprint": params.config.fingerprint(),
        "metadata": dict(metadata),
        "extra": list(extra or {}),
    }
    arrays = OrderedDict((k, t.data) for k, t in params.named())
    arrays.update(extra or {})
    write_container(path, header, arrays)


def deserialize_backbone(path: str | os.PathLike, expect: BackboneConfig | None = None) -> tuple[BackboneParams, dict]:
    """Load a backbone. Returns the params and a dict of any extra tensors."""
    header, arrays = read_container(path)
    if header.get("kind") != "backbone":
        raise FormatError(f"expected a backbone checkpoint, found {header.get('kind')!r}")
    cfg = BackboneConfig.from_dict(header["config"])
    if cfg.fingerprint() != header["fingerprint"]:
        raise FormatError("backbone fingerprint does not match its own config")
    if expect is not None and expect.fingerprint() != cfg.fingerprint():
        raise CompatibilityError(f"backbone {cfg.fingerprint()} does not match expected {expect.fingerprint()}")
    extra_names = header.get("extra", [])
    extra = OrderedDict((k, arrays.pop(k)) for k in extra_names)
    _check_shapes(arrays, backbone_param_shapes(cfg))
    tensors = OrderedDict((k, Tensor(v, trainable=False, name=k)) for k, v in arrays.items())
    return BackboneParams(cfg, tensors), extra


# ---------------------------------------------------------------------------
# fusion


def serialize_fusion(psi: FusionParams, metadata: Mapping, path: str | os.PathLike) -> None:
    header = {
        "kind": "fusion",
        "config": {"target": psi.target, "num_layers": psi.num_layers, "hidden_dim": psi.hidden_dim},
        "members": list(psi.members),
        "fingerprint": psi.backbone_fingerprint,
        "metadata": dict(metadata),
    }
    write_container(path, header, OrderedDict((k, t.data) for k, t in psi.named()))


def deserialize_fusion(path: str | os.PathLike, bcfg: BackboneConfig) -> FusionParams:
    header, arrays = read_container(path)
    if header.get("kind") != "fusion":
        raise FormatError(f"expected a fusion checkpoint, found {header.get('kind')!r}")
    if header["fingerprint"] != bcfg.fingerprint():
        raise CompatibilityError(
            f"fusion was trained for backbone {header['fingerprint']}, target backbone is {bcfg.fingerprint()}"
        )
    members = header.get("members")
    if not isinstance(members, list) or not members:
        raise FormatError("fusion header lists no members")
    _check_shapes(arrays, fusion_shapes(bcfg.num_layers, bcfg.hidden_dim))
    target = header["config"]["target"]
    tensors = OrderedDict((k, Tensor(v, trainable=False, name=f"fusion.{target}/{k}")) for k, v in arrays.items())
    return FusionParams(target, list(members), header["fingerprint"], bcfg.num_layers, bcfg.hidden_dim, tensors)


def serialize_head(head: ClassifierHead, metadata: Mapping, path: str | os.PathLike) -> None:
    header = {
        "kind": "head",
        "config": {"task": head.task, "hidden_dim": head.weight.shape[0], "num_classes": head.weight.shape[1]},
        "fingerprint": "",
        "metadata": dict(metadata),
    }
    write_container(path, header, OrderedDict((k, t.data) for k, t in head.named()))


def deserialize_head(path: str | os.PathLike) -> ClassifierHead:
    header, arrays = read_container(path)
    if header.get("kind") != "head":
        raise FormatError(f"expected a head checkpoint, found {header.get('kind')!r}")
    cfg = header["config"]
    _check_shapes(arrays, {"weight": (cfg["hidden_dim"], cfg["num_classes"]), "bias": (cfg["num_classes"],)})
    task = cfg["task"]
    return ClassifierHead(task, Tensor(arrays["weight"], name=f"head.{task}/weight"),
                          Tensor(arrays["bias"], name=f"head.{task}/bias"))
