"""Model checkpoints.

Layout (little-endian)::

    b"CALM" | version: u8 | manifest length: u64 | JSON manifest | tensor records

The manifest lists the architecture (heads, classes, channel schedule,
attention normalization) and the parameter names and shapes in file order.
Each parameter follows as one record of the flat tensor format.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

from .model import AttentionModel
from .tensor import Tensor
from .tensor.serialize import FormatError, decode_array, encode_array

CHECKPOINT_MAGIC = b"CALM"
CHECKPOINT_VERSION = 1
_HEADER = struct.Struct("<BQ")


def checkpoint_to_bytes(model: AttentionModel, extra: dict | None = None) -> bytes:
    names = list(model.params)
    manifest = {
        "num_heads": model.num_heads,
        "num_classes": model.num_classes,
        "depth": model.depth,
        "channels": list(model.channels),
        "attention_norm": model.attention_norm,
        "parameters": [{"name": n, "shape": list(model.params[n].shape)} for n in names],
    }
    if extra:
        manifest["extra"] = extra
    meta = json.dumps(manifest, sort_keys=True).encode("utf-8")
    blobs = b"".join(encode_array(model.params[n].data) for n in names)
    return CHECKPOINT_MAGIC + _HEADER.pack(CHECKPOINT_VERSION, len(meta)) + meta + blobs


def checkpoint_from_bytes(buf: bytes) -> tuple[AttentionModel, dict]:
    """Rebuild a model; returns (model, manifest)."""
    head = len(CHECKPOINT_MAGIC) + _HEADER.size
    if len(buf) < head:
        raise FormatError("truncated checkpoint header", 0)
    if buf[:4] != CHECKPOINT_MAGIC:
        raise FormatError(f"bad checkpoint magic {bytes(buf[:4])!r}", 0)
    version, meta_len = _HEADER.unpack_from(buf, 4)
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", 4)
    if head + meta_len > len(buf):
        raise FormatError("truncated checkpoint manifest", head)
    try:
        meta = json.loads(buf[head : head + meta_len].decode("utf-8"))
        entries = [(e["name"], tuple(e["shape"])) for e in meta["parameters"]]
        channels = tuple(int(c) for c in meta["channels"])
        num_heads, num_classes = int(meta["num_heads"]), int(meta["num_classes"])
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
        raise FormatError(f"corrupt checkpoint manifest: {e}", head) from None
    if meta.get("depth") != len(channels):
        raise FormatError(f"manifest depth {meta.get('depth')} disagrees with {len(channels)} channel entries", head)
    pos = head + meta_len
    params = {}
    for name, shape in entries:
        arr, next_pos = decode_array(buf, pos)
        if arr.shape != shape:
            raise FormatError(f"parameter {name} has shape {arr.shape}, manifest says {shape}", pos)
        params[name] = Tensor(arr, requires_grad=True)
        pos = next_pos
    if pos != len(buf):
        raise FormatError("trailing bytes after last parameter", pos)
    if "backbone.0.weight" not in params:
        raise FormatError("checkpoint has no backbone.0.weight", head)
    expected = AttentionModel.create(
        num_classes, num_heads, channels=channels, in_channels=params["backbone.0.weight"].shape[1]
    ).params
    for name in sorted(set(expected) | set(params)):
        want = expected[name].shape if name in expected else None
        got = params[name].shape if name in params else None
        if want != got:
            raise FormatError(f"parameter {name}: checkpoint has {got}, architecture needs {want}", head)
    model = AttentionModel(params, num_heads, num_classes, channels, bool(meta.get("attention_norm", False)))
    return model, meta


def save_checkpoint(model: AttentionModel, path, extra: dict | None = None) -> None:
    Path(path).write_bytes(checkpoint_to_bytes(model, extra))


def load_checkpoint(path) -> tuple[AttentionModel, dict]:
    return checkpoint_from_bytes(Path(path).read_bytes())
