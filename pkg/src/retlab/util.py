"""Shared plumbing: seeded substreams and atomic file writes."""

from __future__ import annotations

import os
import tempfile
import zlib

import numpy as np


def substream(master_seed: int, *tags) -> np.random.Generator:
    """Named, order-independent RNG substream derived from one master seed.

    Two calls with the same (master_seed, tags) always yield identical
    streams, regardless of what other substreams were drawn in between.
    Tags may be strings or ints.
    """
    words = [int(master_seed) & 0xFFFFFFFF]
    for tag in tags:
        if isinstance(tag, (int, np.integer)):
            words.append(int(tag) & 0xFFFFFFFF)
        else:
            words.append(zlib.crc32(str(tag).encode("utf-8")))
    return np.random.default_rng(np.random.SeedSequence(words))


def atomic_write_text(path: str, text: str) -> None:
    """Write text to `path` via a temp file + rename so readers never see
    a partially written file."""
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_bytes(path: str, blob: bytes) -> None:
    """Binary twin of :func:`atomic_write_text`."""
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(blob)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
