"""Reference eviction policies used as control arms."""

from __future__ import annotations

import numpy as np

from .outlier import (
    BudgetError,
    LayerKv,
    SelectionResult,
    compute_base_kv,
    deviation_scores,
    index_set,
    select_outliers,
    select_top,
)

RECENCY_SINK = "recency_sink"
RANDOM_SEEDED = "random_seeded"
_RANDOM_STREAM = 0xE71C  # keeps eviction draws independent of other (seed, layer) streams
VALUE_NORM = "value_norm"
FLASHCACHE = "flashcache"
POLICIES = (RECENCY_SINK, RANDOM_SEEDED, VALUE_NORM, FLASHCACHE)


def _check(budget, prot):
    if budget < prot.size:
        raise BudgetError(f"budget {budget} is smaller than the {prot.size} protected positions")


def recency_sink(n: int, budget: int, protected=(), sink: int = 0) -> SelectionResult:
    """Protected + first ``sink`` positions, the rest of the budget filled from the end."""
    prot = index_set(protected, n)
    _check(budget, prot)
    keep = min(budget, n)
    mask = np.zeros(n, dtype=bool)
    mask[prot] = True
    left = keep - prot.size
    for i in range(min(sink, n)):
        if left == 0:
            break
        if not mask[i]:
            mask[i] = True
            left -= 1
    i = n - 1
    while left > 0:
        if not mask[i]:
            mask[i] = True
            left -= 1
        i -= 1
    return SelectionResult(np.flatnonzero(mask).astype(np.int64), int(budget), prot)


def random_seeded(n: int, budget: int, protected=(), seed: int = 0) -> SelectionResult:
    prot = index_set(protected, n)
    _check(budget, prot)
    keep = min(budget, n)
    rng = np.random.default_rng(seed)
    mask = np.ones(n, dtype=bool)
    mask[prot] = False
    pick = rng.choice(np.flatnonzero(mask), size=keep - prot.size, replace=False)
    return SelectionResult(np.sort(np.concatenate([prot, pick])).astype(np.int64), int(budget), prot)


def value_norm_scores(layer: LayerKv) -> np.ndarray:
    """Head-averaged ||k_x||^2 + ||v_x||^2 per position."""
    k = layer.keys.astype(np.float64)
    v = layer.values.astype(np.float64)
    return np.mean(np.sum(k * k, axis=2) + np.sum(v * v, axis=2), axis=0)


def select_baseline(
    policy: str,
    layer: LayerKv,
    budget: int,
    protected=(),
    seed: int = 0,
    sink: int = 0,
    gamma: float = 0.2,
) -> SelectionResult:
    """Dispatch on ``policy``; ``flashcache`` runs the frequency-domain outlier selection.

    Random draws use a generator seeded by (seed, layer_index, a fixed stream
    tag), so layers of one dump get different but reproducible samples that
    do not coincide with the synthetic generator's stream.
    """
    if policy == RECENCY_SINK:
        return recency_sink(layer.seq_len, budget, protected, sink)
    if policy == RANDOM_SEEDED:
        return random_seeded(layer.seq_len, budget, protected, [seed, layer.layer_index, _RANDOM_STREAM])
    if policy == VALUE_NORM:
        return select_top(value_norm_scores(layer), budget, protected)
    if policy == FLASHCACHE:
        return select_outliers(deviation_scores(layer, compute_base_kv(layer, gamma)), budget, protected)
    raise ValueError(f"unknown policy {policy!r}; choose from {', '.join(POLICIES)}")
