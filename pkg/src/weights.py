#!/usr/bin/env python3
"""
MSVL Toolkit — Weight Files (`MSVLW001`)
"""
from __future__ import annotations

import json
import logging
import struct

import numpy as np

from autograd import Tensor
from model import Arch, ModelConfig, ModelParams, init_params
from topology import topology_from_json, topology_to_json
from utils.errors import CorruptionError, FormatError
from utils.io import PathOrStream, open_binary, sha256_hex

logger = logging.getLogger(__name__)

WEIGHTS_MAGIC = b"MSVLW001"
WEIGHTS_VERSION = 1


def _header(params: ModelParams, payload: bytes) -> bytes:
    header = {
        "format_version": WEIGHTS_VERSION,
        "arch": params.arch.value,
        "config": params.config.to_json(),
        "topology": topology_to_json(params.topology) if params.topology is not None else None,
        "band": params.band,
        "seed": params.seed,
        "tensors": [[name, list(t.data.shape)] for name, t in params.tensors.items()],
        "payload_sha256": sha256_hex(payload),
    }
    return json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")


def save_params(params: ModelParams, destination: PathOrStream) -> int:
    """Write weights as little-endian float64 in header order; returns bytes written."""
    payload = b"".join(t.data.astype("<f8").tobytes(order="C") for t in params.tensors.values())
    header = _header(params, payload)
    blob = WEIGHTS_MAGIC + struct.pack("<I", len(header)) + header + payload
    with open_binary(destination, "wb") as fh:
        fh.write(blob)
    logger.info("Saved %s weights (%d tensors, %d bytes)", params.arch.value, len(params.tensors), len(blob))
    return len(blob)


def load_params(source: PathOrStream) -> ModelParams:
    with open_binary(source, "rb") as fh:
        blob = fh.read()
    if blob[: len(WEIGHTS_MAGIC)] != WEIGHTS_MAGIC or len(blob) < len(WEIGHTS_MAGIC) + 4:
        raise FormatError(f"Not a weights file: bad magic {blob[:len(WEIGHTS_MAGIC)]!r}")
    (header_len,) = struct.unpack_from("<I", blob, len(WEIGHTS_MAGIC))
    start = len(WEIGHTS_MAGIC) + 4
    try:
        header = json.loads(blob[start:start + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise FormatError(f"Malformed weights header: {e}") from e
    if header.get("format_version") != WEIGHTS_VERSION:
        raise FormatError(f"Unsupported weights version {header.get('format_version')}")

    payload = blob[start + header_len:]
    if sha256_hex(payload) != header.get("payload_sha256"):
        raise CorruptionError("Weights payload checksum mismatch")

    try:
        arch = Arch.parse(header["arch"])
        config = ModelConfig.from_json(header["config"])
        topology = topology_from_json(header["topology"]) if header["topology"] is not None else None
        shapes = [(str(name), tuple(int(s) for s in shape)) for name, shape in header["tensors"]]
        band = header.get("band")
        expected = init_params(arch, config, topology=topology, band=band)
    except (KeyError, TypeError, ValueError) as e:
        raise FormatError(f"Malformed weights header: {e}") from e
    layout = [(name, t.data.shape) for name, t in expected.tensors.items()]
    if shapes != layout:
        missing = sorted(set(expected.tensors) - {n for n, _ in shapes})
        extra = sorted({n for n, _ in shapes} - set(expected.tensors))
        raise FormatError(
            f"Weights tensors do not match the {arch.value} layout (missing {missing}, unexpected {extra})"
        )

    tensors = {}
    offset = 0
    for name, shape in shapes:
        count = int(np.prod(shape, dtype=np.int64))
        chunk = payload[offset:offset + 8 * count]
        if len(chunk) != 8 * count:
            raise CorruptionError(f"Weights payload ends inside tensor {name}")
        data = np.frombuffer(chunk, dtype="<f8").astype(np.float64).reshape(shape)
        if not np.all(np.isfinite(data)):
            raise CorruptionError(f"Tensor {name} contains non-finite values")
        tensors[name] = Tensor(data, requires_grad=True, op="param")
        offset += 8 * count
    if offset != len(payload):
        raise CorruptionError(f"Weights payload has {len(payload) - offset} trailing bytes")

    return ModelParams(
        arch=arch, config=config, tensors=tensors, topology=topology,
        band=band, seed=int(header.get("seed", 0)),
    )
