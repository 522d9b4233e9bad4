"""Bit-exact container for supernet checkpoints and standalone models.

Layout::

    b"DEPSNET\\0"                    8-byte magic
    <u64 header length>
    header                           UTF-8 JSON, sorted keys
    payload                          little-endian float32 arrays in header order
    <u64 length><u64 checksum>       length of everything before this record and
                                     the first 8 bytes of its SHA-256
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from .errors import FormatError
from .supernet import ArchConfig, ArchSpace, StandaloneModel, SupernetWeights
from .autodiff import Tensor

MAGIC = b"DEPSNET\x00"
FORMAT_VERSION = 1


def _checksum(blob: bytes) -> int:
    return int.from_bytes(hashlib.sha256(blob).digest()[:8], "little")


def write_container(path, header: dict, arrays: list):
    header = dict(header, format_version=FORMAT_VERSION,
                  tensors=[{"name": n, "shape": list(a.shape)} for n, a in arrays])
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    parts = [MAGIC, struct.pack("<Q", len(head)), head]
    parts += [np.ascontiguousarray(a, dtype="<f4").tobytes() for _, a in arrays]
    body = b"".join(parts)
    body += struct.pack("<QQ", len(body), _checksum(body))
    Path(path).write_bytes(body)


def read_container(path):
    blob = Path(path).read_bytes()
    if len(blob) < len(MAGIC) + 8 + 16:
        raise FormatError("file too short for a container", offset=len(blob))
    if blob[:8] != MAGIC:
        raise FormatError("bad magic", offset=0)
    length, checksum = struct.unpack("<QQ", blob[-16:])
    if length != len(blob) - 16:
        raise FormatError(f"trailer length {length} != body length {len(blob) - 16}", offset=len(blob) - 16)
    if checksum != _checksum(blob[:-16]):
        raise FormatError("checksum mismatch", offset=len(blob) - 8)
    (hlen,) = struct.unpack("<Q", blob[8:16])
    try:
        header = json.loads(blob[16:16 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"unreadable header: {exc}", offset=16) from None
    if header.get("format_version") != FORMAT_VERSION:
        raise FormatError(f"unsupported format version {header.get('format_version')}", offset=16)
    offset = 16 + hlen
    arrays = {}
    for spec in header["tensors"]:
        shape = tuple(spec["shape"])
        nbytes = 4 * int(np.prod(shape, dtype=np.int64))
        if offset + nbytes > len(blob) - 16:
            raise FormatError(f"tensor {spec['name']} runs past the payload", offset=offset)
        arrays[spec["name"]] = np.frombuffer(blob, dtype="<f4", count=nbytes // 4,
                                             offset=offset).reshape(shape).astype(np.float32)
        offset += nbytes
    if offset != len(blob) - 16:
        raise FormatError("trailing bytes after declared tensors", offset=offset)
    return header, arrays


def _bn_arrays(bn_stats):
    out = []
    for digest in sorted(bn_stats):
        for layer in sorted(bn_stats[digest]):
            mean, var = bn_stats[digest][layer]
            out.append((f"bn_stats/{digest}/{layer}/mean", mean))
            out.append((f"bn_stats/{digest}/{layer}/var", var))
    return out


def _bn_from_arrays(arrays):
    stats = {}
    for name, arr in arrays.items():
        if not name.startswith("bn_stats/"):
            continue
        _, digest, layer, which = name.split("/")
        entry = stats.setdefault(digest, {}).setdefault(layer, [None, None])
        entry[0 if which == "mean" else 1] = arr
    return {d: {l: tuple(mv) for l, mv in s.items()} for d, s in stats.items()}


def save_supernet(path, weights: SupernetWeights, meta=None):
    arrays = [(n, weights[n].data) for n in weights.order] + _bn_arrays(weights.bn_stats)
    header = {"kind": "supernet", "space": weights.space.to_dict(),
              "layer_order": list(weights.order), "meta": meta or {}}
    write_container(path, header, arrays)


def load_supernet(path) -> SupernetWeights:
    header, arrays = read_container(path)
    if header.get("kind") != "supernet":
        raise FormatError(f"expected a supernet container, got {header.get('kind')!r}")
    space = ArchSpace.from_dict(header["space"])
    params = {n: Tensor(arrays[n], requires_grad=True) for n in header["layer_order"]}
    return SupernetWeights(space, params, _bn_from_arrays(arrays))


def load_meta(path) -> dict:
    header, _ = read_container(path)
    return header.get("meta", {})


def save_standalone(path, model: StandaloneModel):
    arrays = [(n, model.params[n]) for n in sorted(model.params)]
    arrays += _bn_arrays({model.config.digest: model.bn_stats})
    header = {"kind": "standalone", "space": model.space.to_dict(),
              "config": model.config.to_dict()}
    write_container(path, header, arrays)


def load_standalone(path) -> StandaloneModel:
    header, arrays = read_container(path)
    if header.get("kind") != "standalone":
        raise FormatError(f"expected a standalone container, got {header.get('kind')!r}")
    space = ArchSpace.from_dict(header["space"])
    config = ArchConfig.from_dict(header["config"])
    params = {n: a for n, a in arrays.items() if not n.startswith("bn_stats/")}
    return StandaloneModel(space, config, params, _bn_from_arrays(arrays)[config.digest])
