"""Reproducible random streams.

All randomness goes through Philox4x64, a counter-based generator: the
output for a given key is a pure function of (key, counter), so streams are
independent of evaluation order and identical under scene-parallel runs.
Keys are derived with ``SeedSequence`` from the master seed plus a tuple of
integer or string labels, e.g. ``stream(seed, "dropout", scene_index)``.
"""
from __future__ import annotations

import zlib

import numpy as np


def _label(x) -> int:
    if isinstance(x, str):
        return zlib.crc32(x.encode("utf-8"))
    return int(x)


def stream(seed: int, *labels) -> np.random.Generator:
    ss = np.random.SeedSequence([int(seed) & 0xFFFFFFFFFFFFFFFF, *(_label(x) for x in labels)])
    return np.random.Generator(np.random.Philox(ss))
