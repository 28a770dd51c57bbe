"""Versioned binary container shared by model and feature files.

Layout: 4-byte magic, uint32 format version, uint32 header length, UTF-8
JSON header, then the raw float64 little-endian tensor payload in the order
declared by header["tensors"] (a list of [name, shape] pairs).
"""

from __future__ import annotations

import json
import struct

import numpy as np

MODEL_MAGIC = b"SNKE"
FEATURE_MAGIC = b"SNKF"
FORMAT_VERSION = 1


def save_container(path, magic, header, tensors):
    """tensors: ordered list of (name, ndarray); names go into the header."""
    header = dict(header)
    header["tensors"] = [[name, list(arr.shape)] for name, arr in tensors]
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(magic)
        fh.write(struct.pack("<II", FORMAT_VERSION, len(blob)))
        fh.write(blob)
        for _, arr in tensors:
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_container(path, magic):
    """Returns (header, {name: ndarray}); rejects bad magic/version/truncation."""
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < 12:
        raise ValueError(f"{path}: truncated file")
    if data[:4] != magic:
        raise ValueError(f"{path}: bad magic {data[:4]!r}, expected {magic!r}")
    version, hlen = struct.unpack("<II", data[4:12])
    if version != FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported format version {version}")
    if len(data) < 12 + hlen:
        raise ValueError(f"{path}: truncated header")
    try:
        header = json.loads(data[12:12 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ValueError(f"{path}: corrupt header: {exc}") from exc
    offset = 12 + hlen
    tensors = {}
    for name, shape in header.get("tensors", []):
        n = int(np.prod(shape)) if shape else 1
        nbytes = n * 8
        chunk = data[offset:offset + nbytes]
        if len(chunk) < nbytes:
            raise ValueError(f"{path}: truncated tensor payload at {name!r}")
        tensors[name] = np.frombuffer(chunk, dtype="<f8").astype(
            np.float64).reshape(shape)
        offset += nbytes
    if offset != len(data):
        raise ValueError(f"{path}: {len(data) - offset} trailing byte(s)")
    return header, tensors


def save_features(path, flow_ids, features, nb=784, npkt=32):
    features = np.asarray(features, dtype=np.float64)
    header = {"kind": "features", "nb": nb, "npkt": npkt,
              "count": features.shape[0], "dim": features.shape[1],
              "flow_ids": list(flow_ids)}
    save_container(path, FEATURE_MAGIC, header, [("features", features)])


def load_features(path):
    header, tensors = load_container(path, FEATURE_MAGIC)
    if header.get("kind") != "features":
        raise ValueError(f"{path}: not a feature file")
    return header["flow_ids"], tensors["features"], header
