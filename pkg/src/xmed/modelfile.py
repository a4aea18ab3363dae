"""Bit-exact binary model file format.

Layout, with no padding between sections:

    bytes 0..3    magic "XMED"
    bytes 4..7    format version, uint32 little-endian (currently 1)
    bytes 8..15   N, uint64 little-endian
    N bytes       UTF-8 JSON: layers, capture layer, class count, input
                  shape, and the declared order/shape/role of every tensor
    rest          each tensor as raw float32 little-endian values, in the
                  declared order

save followed by load reproduces architecture and parameters bit-exactly.
"""

import json
import struct

import numpy as np

from .errors import FormatError
from .model import GraphModel, LayerSpec

MAGIC = b"XMED"
VERSION = 1


def _manifest(model):
    tensors = [{"name": k, "shape": list(v.shape), "role": "param"}
               for k, v in model.params.items()]
    tensors += [{"name": k, "shape": list(v.shape), "role": "buffer"}
                for k, v in model.buffers.items()]
    return {
        "layers": [{"name": s.name, "kind": s.kind, "hp": s.hp}
                   for s in model.layers],
        "capture_layer": model.capture_layer,
        "num_classes": model.num_classes,
        "input_shape": list(model.input_shape),
        "tensors": tensors,
    }


def save_model(model, path):
    """Write the model to path in the XMED format."""
    blob = json.dumps(_manifest(model), separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for store in (model.params, model.buffers):
            for tensor in store.values():
                fh.write(np.ascontiguousarray(tensor, dtype="<f4").tobytes())


def load_model(path):
    """Read a model file; raises FormatError (with offset) on any damage."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 16:
        raise FormatError(f"file too short for header ({len(raw)} bytes)",
                          offset=len(raw))
    if raw[:4] != MAGIC:
        raise FormatError(f"bad magic {raw[:4]!r}, expected {MAGIC!r}",
                          offset=0)
    (version,) = struct.unpack("<I", raw[4:8])
    if version != VERSION:
        raise FormatError(f"unsupported format version {version}", offset=4)
    (blob_len,) = struct.unpack("<Q", raw[8:16])
    if len(raw) < 16 + blob_len:
        raise FormatError("truncated JSON section", offset=len(raw))
    try:
        manifest = json.loads(raw[16:16 + blob_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"unreadable JSON section: {exc}", offset=16)

    try:
        layers = [LayerSpec(d["name"], d["kind"], d.get("hp", {}))
                  for d in manifest["layers"]]
        tensors = manifest["tensors"]
        capture = manifest["capture_layer"]
        num_classes = manifest["num_classes"]
        input_shape = tuple(manifest["input_shape"])
    except (KeyError, TypeError) as exc:
        raise FormatError(f"JSON section missing field: {exc}", offset=16)

    offset = 16 + blob_len
    params, buffers = {}, {}
    for entry in tensors:
        shape = tuple(entry["shape"])
        nbytes = 4 * int(np.prod(shape)) if shape else 4
        if len(raw) < offset + nbytes:
            raise FormatError(
                f"truncated tensor data for {entry['name']!r}", offset=offset)
        arr = np.frombuffer(raw[offset:offset + nbytes], dtype="<f4")
        arr = arr.reshape(shape).astype(np.float32, copy=True)
        (buffers if entry["role"] == "buffer" else params)[entry["name"]] = arr
        offset += nbytes
    if offset != len(raw):
        raise FormatError(f"{len(raw) - offset} trailing bytes after tensors",
                          offset=offset)
    return GraphModel(layers, params, buffers, capture, num_classes,
                      input_shape)
