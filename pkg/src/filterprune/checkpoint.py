"""Self-describing binary container shared by checkpoints, stats and datasets.

Layout (all integers little-endian)::

    magic    4 bytes  b"FPCK"
    version  u16
    nsect    u16
    length   u64      total file length including the trailing CRC
    section* tag (4 ascii bytes), payload length u64, payload
    crc32    u32      over every preceding byte

A section payload is a u32 header length, a UTF-8 JSON header, then the
raw array blob. The header's ``arrays`` table gives each array's name,
dtype string, shape, byte offset and byte count within the blob.

Network sections (tag ``NETW``) list layers in evaluation order with their
kind, consumers and weight/bias array names. Weights are stored as ``<f4``
unless the network is 64-bit, in which case ``<f8`` keeps the round trip
exact. Dense layers that follow a convolution read their input flattened
channel-major: column ``c*H*W + y*W + x`` holds channel ``c`` at ``(y, x)``.
"""

from __future__ import annotations

import json
import struct
import zlib

import numpy as np

from .netgraph import NetworkGraph, Node
from .tensor import LayerParams

MAGIC = b"FPCK"
FORMAT_VERSION = 1
_HEAD = struct.Struct("<4sHHQ")
_SECT = struct.Struct("<4sQ")
_CRC = struct.Struct("<I")


class CheckpointError(Exception):
    pass


class BadMagicError(CheckpointError):
    pass


class VersionMismatchError(CheckpointError):
    pass


class TruncatedError(CheckpointError):
    pass


class ChecksumError(CheckpointError):
    pass


def pack_section(meta: dict, arrays: dict[str, np.ndarray]) -> bytes:
    table = []
    blobs = []
    offset = 0
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        dt = arr.dtype.newbyteorder("<")
        raw = np.ascontiguousarray(arr.astype(dt, copy=False)).tobytes()
        table.append({"name": name, "dtype": dt.str, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = json.dumps({**meta, "arrays": table}, sort_keys=True).encode("utf-8")
    return struct.pack("<I", len(header)) + header + b"".join(blobs)


def unpack_section(payload: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    if len(payload) < 4:
        raise TruncatedError("section too short for its header")
    (hlen,) = struct.unpack_from("<I", payload)
    if 4 + hlen > len(payload):
        raise TruncatedError("section header runs past the payload")
    meta = json.loads(payload[4 : 4 + hlen].decode("utf-8"))
    blob = memoryview(payload)[4 + hlen :]
    arrays = {}
    for entry in meta.pop("arrays"):
        start, n = entry["offset"], entry["nbytes"]
        if start + n > len(blob):
            raise TruncatedError(f"array {entry['name']!r} runs past the section")
        dtype = np.dtype(entry["dtype"])
        arr = np.frombuffer(blob[start : start + n], dtype=dtype).reshape(entry["shape"])
        arrays[entry["name"]] = arr.astype(dtype.newbyteorder("="))
    return meta, arrays


def write_container(sections: list[tuple[str, bytes]]) -> bytes:
    body = b"".join(_SECT.pack(tag.encode("ascii"), len(p)) + p for tag, p in sections)
    total = _HEAD.size + len(body) + _CRC.size
    data = _HEAD.pack(MAGIC, FORMAT_VERSION, len(sections), total) + body
    return data + _CRC.pack(zlib.crc32(data))


def read_container(data: bytes) -> list[tuple[str, bytes]]:
    data = bytes(data)
    if len(data) < _HEAD.size:
        raise TruncatedError(f"file is {len(data)} bytes, shorter than the {_HEAD.size}-byte header")
    magic, version, nsect, total = _HEAD.unpack_from(data)
    if magic != MAGIC:
        raise BadMagicError(f"bad magic {magic!r}, expected {MAGIC!r}")
    if version != FORMAT_VERSION:
        raise VersionMismatchError(f"format version {version}, this build reads {FORMAT_VERSION}")
    if len(data) < total:
        raise TruncatedError(f"file is {len(data)} bytes, header declares {total}")
    if len(data) > total:
        raise CheckpointError(f"{len(data) - total} trailing bytes after container")
    (crc,) = _CRC.unpack_from(data, total - _CRC.size)
    if zlib.crc32(data[: total - _CRC.size]) != crc:
        raise ChecksumError("CRC mismatch; container is corrupt")
    pos = _HEAD.size
    sections = []
    for _ in range(nsect):
        if pos + _SECT.size > total - _CRC.size:
            raise TruncatedError("section table runs past the end")
        tag, n = _SECT.unpack_from(data, pos)
        pos += _SECT.size
        if pos + n > total - _CRC.size:
            raise TruncatedError(f"section {tag!r} runs past the end")
        sections.append((tag.decode("ascii"), data[pos : pos + n]))
        pos += n
    return sections


def find_section(sections, tag: str) -> bytes:
    for t, payload in sections:
        if t == tag:
            return payload
    raise CheckpointError(f"container has no {tag!r} section")


# networks ------------------------------------------------------------------


def network_section(network: NetworkGraph) -> bytes:
    wide = network.dtype == np.float64
    store = "<f8" if wide else "<f4"
    layers, arrays = [], {}
    for node in network.layers:
        entry = {"id": node.layer_id, "kind": node.kind, "consumers": list(node.consumers)}
        if node.params.has_weights:
            entry["weight"] = f"{node.layer_id}/weight"
            entry["bias"] = f"{node.layer_id}/bias"
            arrays[entry["weight"]] = node.params.weight.astype(store)
            arrays[entry["bias"]] = node.params.bias.astype(store)
        layers.append(entry)
    meta = {
        "layers": layers,
        "residual_links": [list(link) for link in network.residual_links],
        "class_count": network.class_count,
        "input_shape": list(network.input_shape),
        "family": network.family,
        "flatten": "channel-major",
    }
    return pack_section(meta, arrays)


def network_from_section(payload: bytes) -> NetworkGraph:
    meta, arrays = unpack_section(payload)
    nodes = []
    for entry in meta["layers"]:
        if "weight" in entry:
            params = LayerParams(entry["kind"], arrays[entry["weight"]], arrays[entry["bias"]])
        else:
            params = LayerParams(entry["kind"])
        nodes.append(Node(entry["id"], params, list(entry["consumers"])))
    net = NetworkGraph(nodes, [tuple(x) for x in meta["residual_links"]], meta["class_count"],
                       tuple(meta["input_shape"]), meta.get("family"))
    return net.validate()


def save_checkpoint(network: NetworkGraph) -> bytes:
    network.validate()
    return write_container([("NETW", network_section(network))])


def load_checkpoint(data: bytes) -> NetworkGraph:
    return network_from_section(find_section(read_container(data), "NETW"))


def save_checkpoint_file(network: NetworkGraph, path):
    with open(path, "wb") as f:
        f.write(save_checkpoint(network))


def load_checkpoint_file(path) -> NetworkGraph:
    with open(path, "rb") as f:
        return load_checkpoint(f.read())
