"""Shared numerics and I/O helpers: deterministic reductions, counter-based
RNG substreams, atomic artifact writes, and CSV/JSON emission."""

from __future__ import annotations

import hashlib
import json
import os
import tempfile

import numpy as np
from numpy.random import Generator, Philox


def pairwise_sum(values) -> float:
    """Fixed-order pairwise summation.

    Reductions over ensembles go through this so that output bytes do not
    depend on worker count or chunking.
    """
    vals = np.asarray(values, dtype=np.float64).ravel()
    n = vals.size
    if n == 0:
        return 0.0
    work = vals.copy()
    while n > 1:
        half = n // 2
        work[:half] = work[:half] + work[half : 2 * half]
        if n % 2 == 1:
            work[half] = work[2 * half]
            n = half + 1
        else:
            n = half
    return float(work[0])


def pairwise_mean(values) -> float:
    vals = np.asarray(values, dtype=np.float64).ravel()
    if vals.size == 0:
        raise ValueError("mean of empty sequence")
    return pairwise_sum(vals) / vals.size


def mean_and_se(values) -> tuple[float, float]:
    """Ensemble mean and standard error with deterministic reduction order."""
    vals = np.asarray(values, dtype=np.float64).ravel()
    n = vals.size
    m = pairwise_mean(vals)
    if n < 2:
        return m, float("inf")
    var = pairwise_sum((vals - m) ** 2) / (n - 1)
    return m, float(np.sqrt(var / n))


def substream(seed: int, *counters: int) -> Generator:
    """Counter-based Philox substream.

    The same (seed, counters) always yields the same stream, independently of
    how many other streams were consumed: this is what makes per-cell
    resampling and parallel ensembles order-independent.
    """
    ctr = np.zeros(4, dtype=np.uint64)
    for i, c in enumerate(counters[:4]):
        ctr[i] = np.uint64(int(c) % (1 << 64))
    key = np.array([np.uint64(int(seed) % (1 << 64)), np.uint64(0x9E3779B97F4A7C15)])
    return Generator(Philox(counter=ctr, key=key))


def atomic_write_bytes(path: str, data: bytes) -> None:
    """Write via temp-then-rename so partial outputs never appear."""
    d = os.path.dirname(os.path.abspath(path))
    os.makedirs(d, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path: str, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def fmt_real(x) -> str:
    """Reals rendered with 17 significant digits (round-trip exact)."""
    return format(float(x), ".17g")


def write_csv(path: str, header: list[str], rows) -> None:
    """CSV dialect: UTF-8, comma separator, '.' decimal, header row."""
    lines = [",".join(header)]
    for row in rows:
        cells = []
        for v in row:
            if isinstance(v, (float, np.floating)):
                cells.append(fmt_real(v))
            else:
                cells.append(str(v))
        lines.append(",".join(cells))
    atomic_write_text(path, "\n".join(lines) + "\n")


def write_json(path: str, obj) -> None:
    atomic_write_text(path, json.dumps(obj, indent=2, sort_keys=True, default=_json_default) + "\n")


def _json_default(obj):
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"not JSON serializable: {type(obj)}")


def config_hash(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()
