#!/usr/bin/env python3
"""
MSVL Toolkit — Small File Helpers
"""
from __future__ import annotations

import hashlib
import io
import json
import os
from contextlib import contextmanager
from typing import Any, BinaryIO, Iterator, Union

from utils.errors import ArtifactIOError, FormatError

PathOrStream = Union[str, os.PathLike, BinaryIO]


def sha256_hex(payload: bytes) -> str:
    return hashlib.sha256(payload).hexdigest()


@contextmanager
def open_binary(target: PathOrStream, mode: str) -> Iterator[BinaryIO]:
    """Open a path (or pass through a stream); OSError is re-raised with the path."""
    if isinstance(target, (io.IOBase,)) or hasattr(target, "read") or hasattr(target, "write"):
        yield target  # type: ignore[misc]
        return
    path = os.fspath(target)
    try:
        if "w" in mode:
            os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
        fh = open(path, mode)
    except OSError as e:
        raise ArtifactIOError(path, e) from e
    try:
        yield fh
    except OSError as e:
        raise ArtifactIOError(path, e) from e
    finally:
        fh.close()


def read_json(path: Union[str, os.PathLike]) -> Any:
    try:
        with open(path, "r", encoding="utf-8") as f:
            return json.load(f)
    except OSError as e:
        raise ArtifactIOError(path, e) from e
    except json.JSONDecodeError as e:
        raise FormatError(f"{path}: invalid JSON ({e})") from e


def write_json(path: Union[str, os.PathLike], payload: Any) -> None:
    path = os.fspath(path)
    try:
        os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
        with open(path, "w", encoding="utf-8") as f:
            json.dump(payload, f, indent=2)
            f.write("\n")
    except OSError as e:
        raise ArtifactIOError(path, e) from e
