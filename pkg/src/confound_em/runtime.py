"""Deterministic RNG streams and order-preserving parallel execution."""
from __future__ import annotations

import os
from concurrent.futures import ProcessPoolExecutor

import numpy as np

# Domain tags keep per-task streams disjoint when one user seed feeds
# several consumers (simulation replications, bootstrap replicates, ...).
DOMAIN_SIM = 1
DOMAIN_BOOT = 2
DOMAIN_VALIDATE = 3

THREADS_ENV = "CONFOUND_EM_THREADS"


def stream(seed: int, domain: int, index: int) -> np.random.Generator:
    """Independent generator for task `index` of `domain` under `seed`.

    The stream depends only on (seed, domain, index), never on execution
    order or worker count, so results derived from it are reproducible.
    """
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(domain), int(index)]))


def resolve_threads(flag=None, config=None) -> int:
    """Worker count with precedence: flag > environment > config > all cores."""
    for value in (flag, os.environ.get(THREADS_ENV), config):
        if value is not None and str(value).strip() != "":
            return max(1, int(value))
    return max(1, os.cpu_count() or 1)


def parallel_map(fn, items, threads: int) -> list:
    """map() over items preserving order; uses processes when threads > 1."""
    items = list(items)
    if threads <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    workers = min(threads, len(items))
    chunk = max(1, len(items) // (4 * workers))
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items, chunksize=chunk))
