"""Monte Carlo plumbing: seed derivation, jackknife errors, a deterministic worker pool."""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Iterable, Sequence, TypeVar

import numpy as np

T = TypeVar("T")
R = TypeVar("R")

THREADS_ENV = "RWRP_LAB_THREADS"


class BudgetExceeded(RuntimeError):
    pass


def derive_seeds(master_seed: int, count: int) -> list[int]:
    """``count`` 64-bit per-sample seeds, a pure function of ``master_seed``."""
    state = np.random.SeedSequence(int(master_seed)).generate_state(count, dtype=np.uint64)
    return [int(s) for s in state]


def default_threads() -> int:
    raw = os.environ.get(THREADS_ENV)
    return max(1, int(raw)) if raw else 1


def parallel_map(fn: Callable[[T], R], items: Iterable[T], threads: int | None = None) -> list[R]:
    """``[fn(x) for x in items]``; results come back in input order whatever the pool size."""
    items = list(items)
    threads = default_threads() if threads is None else max(1, int(threads))
    if threads == 1 or len(items) < 2:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


def jackknife(values: Sequence, statistic: Callable[[np.ndarray], float] = np.mean,
              groups: int | None = None) -> tuple[float, float]:
    """Full-sample statistic and its (grouped) delete-one jackknife standard error.

    ``values`` is indexed along axis 0.  With ``groups`` the sample is cut into
    that many contiguous blocks and one block is deleted at a time.
    """
    values = np.asarray(values)
    n = len(values)
    if n < 2:
        raise ValueError("jackknife needs at least two samples")
    full = float(statistic(values))
    g = n if groups is None else min(int(groups), n)
    edges = np.linspace(0, n, g + 1).astype(int)
    loo = np.array([
        statistic(np.concatenate([values[: edges[i]], values[edges[i + 1]:]], axis=0)) for i in range(g)
    ], dtype=float)
    se = float(np.sqrt((g - 1) / g * np.sum((loo - loo.mean()) ** 2)))
    return full, se
