"""Weight file format.

Layout::

    b"SLRPWGT\\0"            8-byte magic
    uint16 version           little-endian, currently 1
    uint32 header_len
    header                   UTF-8 JSON: input_shape, n_classes, layers[*].config
    payload                  little-endian float32 arrays, layer by layer in
                             declaration order, each layer's arrays in the
                             order given by ``layers.array_shapes``
"""

import json
import struct

import numpy as np

from ..errors import FormatError
from . import layers as L
from .network import NetworkSpec

MAGIC = b"SLRPWGT\0"
VERSION = 1
_PREFIX = struct.Struct("<8sHI")


def dumps(net: NetworkSpec) -> bytes:
    header = {
        "input_shape": list(net.input_shape),
        "n_classes": net.n_classes,
        "layers": [layer.config() for layer in net.layers],
    }
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    chunks = [_PREFIX.pack(MAGIC, VERSION, len(head)), head]
    for layer in net.layers:
        arrays = layer.arrays()
        for name in L.array_shapes(layer.config()):
            chunks.append(np.ascontiguousarray(arrays[name], dtype="<f4").tobytes())
    return b"".join(chunks)


def loads(blob: bytes) -> NetworkSpec:
    if len(blob) < _PREFIX.size:
        raise FormatError("weight file truncated before header")
    magic, version, hlen = _PREFIX.unpack_from(blob)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}")
    if version != VERSION:
        raise FormatError(f"unsupported weight format version {version}")
    start = _PREFIX.size
    if len(blob) < start + hlen:
        raise FormatError("weight file truncated inside header")
    try:
        header = json.loads(blob[start : start + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"corrupt header: {exc}") from None
    pos = start + hlen
    layers = []
    try:
        for cfg in header["layers"]:
            arrays = {}
            for name, shape in L.array_shapes(cfg).items():
                n = int(np.prod(shape)) * 4
                if pos + n > len(blob):
                    raise FormatError("weight payload truncated")
                arrays[name] = np.frombuffer(blob, dtype="<f4", count=n // 4, offset=pos).astype(np.float32).reshape(shape)
                pos += n
            layers.append(L.layer_from_config(cfg, arrays))
        if pos != len(blob):
            raise FormatError(f"{len(blob) - pos} trailing bytes after payload")
        return NetworkSpec(layers, tuple(header["input_shape"]), header["n_classes"])
    except (KeyError, TypeError) as exc:
        raise FormatError(f"malformed header: {exc}") from None


def save_weights(net: NetworkSpec, path):
    with open(path, "wb") as fh:
        fh.write(dumps(net))


def load_weights(path) -> NetworkSpec:
    with open(path, "rb") as fh:
        return loads(fh.read())
