"""Named random sub-streams derived from one integer seed."""

from __future__ import annotations

import zlib

import numpy as np

STREAMS = ("datagen", "init", "shuffle", "prompt_init", "probe_init", "eval")


def stream(seed: int, name: str) -> np.random.Generator:
    """Independent generator for ``name``; reseeding one stream leaves the others intact."""
    key = zlib.crc32(name.encode("utf-8"))
    return np.random.default_rng(np.random.SeedSequence([int(seed), key]))


def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    """Normal(0, std^2) truncated to +-2 std by resampling."""
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > 2 * std
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > 2 * std
    return out
