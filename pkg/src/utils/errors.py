#!/usr/bin/env python3
"""
MSVL Toolkit — Error Types
"""
from __future__ import annotations

from typing import Optional


class MsvlError(Exception):
    """Base error. `exit_code` is what the CLI returns when it escapes."""

    exit_code = 2


class RejectedInputError(MsvlError, ValueError):
    """A precondition of an operation does not hold."""


class DegenerateInputError(RejectedInputError):
    """Input is well-formed but carries no usable information (single class, singular system)."""


class FormatError(MsvlError):
    """File does not follow the expected format (magic, version, header)."""


class CorruptionError(FormatError):
    """File header is valid but the payload is not (size, checksum, values)."""


class ArtifactIOError(MsvlError, OSError):
    """I/O failure on an artifact, with the path that failed."""

    def __init__(self, path, cause: BaseException):
        self.path = str(path)
        self.cause = cause
        super().__init__(f"{self.path}: {cause}")


class NumericFault(MsvlError, ArithmeticError):
    """A non-finite value appeared during computation."""

    exit_code = 3

    def __init__(self, message: str, node: Optional[str] = None, epoch: Optional[int] = None):
        self.message = message
        self.node = node
        self.epoch = epoch
        parts = [message]
        if node:
            parts.append(f"node={node}")
        if epoch is not None:
            parts.append(f"epoch={epoch}")
        super().__init__(" | ".join(parts))
