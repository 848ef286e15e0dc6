"""Base KV extraction, per-position deviation scores and outlier selection."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import spectral

__all__ = [
    "BaseKv",
    "BudgetError",
    "DeviationScores",
    "LayerKv",
    "SelectionResult",
    "compute_base_kv",
    "deviation_scores",
    "select_outliers",
    "select_top",
]

SEQ_AXIS = 1  # tensors are [heads, positions, channels]


class BudgetError(ValueError):
    """A retention budget that cannot be honoured (e.g. smaller than the protected set)."""


@dataclass
class LayerKv:
    """Keys and values of one layer, each shaped [kv_heads, seq_len, head_dim]."""

    keys: np.ndarray
    values: np.ndarray
    layer_index: int = 0

    def __post_init__(self):
        self.keys = np.asarray(self.keys)
        self.values = np.asarray(self.values)
        if self.keys.ndim != 3:
            raise ValueError(f"layer {self.layer_index}: keys must be 3-D [H, N, D], got shape {self.keys.shape}")
        if self.keys.shape != self.values.shape:
            raise ValueError(
                f"layer {self.layer_index}: keys {self.keys.shape} and values {self.values.shape} differ in shape"
            )
        if min(self.keys.shape) < 1:
            raise ValueError(f"layer {self.layer_index}: empty dimension in shape {self.keys.shape}")
        if self.layer_index < 0:
            raise ValueError(f"layer index must be >= 0, got {self.layer_index}")

    @property
    def kv_heads(self) -> int:
        return self.keys.shape[0]

    @property
    def seq_len(self) -> int:
        return self.keys.shape[1]

    @property
    def head_dim(self) -> int:
        return self.keys.shape[2]

    def check_finite(self) -> None:
        for name, t in (("keys", self.keys), ("values", self.values)):
            try:
                spectral.check_finite(t, name)
            except spectral.NonFiniteError as err:
                h, n, d = err.index
                raise spectral.NonFiniteError(
                    f"layer {self.layer_index} {name}: non-finite entry at head {h}, position {n}, channel {d}",
                    (self.layer_index, h, n, d),
                ) from None

    def take(self, positions) -> "LayerKv":
        positions = np.asarray(positions, dtype=np.int64)
        return LayerKv(self.keys[:, positions, :], self.values[:, positions, :], self.layer_index)


@dataclass
class BaseKv:
    keys_base: np.ndarray
    values_base: np.ndarray
    gamma: float


@dataclass
class DeviationScores:
    dev: np.ndarray
    dev_k: np.ndarray
    dev_v: np.ndarray

    @classmethod
    def from_parts(cls, dev_k, dev_v) -> "DeviationScores":
        dev_k = np.asarray(dev_k, dtype=np.float64)
        dev_v = np.asarray(dev_v, dtype=np.float64)
        return cls(dev_k + dev_v, dev_k, dev_v)

    def __len__(self):
        return len(self.dev)


@dataclass
class SelectionResult:
    retained: np.ndarray
    budget: int
    forced: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    def __len__(self):
        return len(self.retained)


def compute_base_kv(layer: LayerKv, gamma: float) -> BaseKv:
    """Smooth reconstruction of ``layer``: DCT along positions, drop the high band, invert.

    Each head/channel column is filtered independently; the result has the
    input's shape and is float64.
    """
    spectral.cutoff_index(layer.seq_len, gamma)  # validates gamma
    layer.check_finite()
    out = []
    for t in (layer.keys, layer.values):
        c = spectral.dct(t.astype(np.float64), axis=SEQ_AXIS)
        out.append(spectral.idct(spectral.lowpass(c, gamma, axis=SEQ_AXIS), axis=SEQ_AXIS))
    return BaseKv(out[0], out[1], float(gamma))


def _position_mse(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    r = x.astype(np.float64) - y
    # mean over heads and channels -> one score per position
    return np.mean(np.square(r), axis=(0, 2))


def deviation_scores(layer: LayerKv, base: BaseKv) -> DeviationScores:
    if layer.keys.shape != base.keys_base.shape or layer.values.shape != base.values_base.shape:
        raise ValueError(
            f"layer {layer.layer_index}: shape {layer.keys.shape} does not match base {base.keys_base.shape}"
        )
    return DeviationScores.from_parts(
        _position_mse(layer.keys, base.keys_base),
        _position_mse(layer.values, base.values_base),
    )


def index_set(protected, n: int) -> np.ndarray:
    if not isinstance(protected, np.ndarray):
        protected = list(protected)
    p = np.unique(np.asarray(protected, dtype=np.int64))
    if p.size and (p[0] < 0 or p[-1] >= n):
        raise ValueError(f"protected positions must lie in [0, {n}), got range [{p[0]}, {p[-1]}]")
    return p


def select_top(scores, budget: int, protected=()) -> SelectionResult:
    """Keep ``protected`` plus the highest-scoring remaining positions.

    Ties go to the lower index. Used by every score-based policy.
    """
    scores = np.asarray(scores, dtype=np.float64)
    n = scores.shape[0]
    prot = index_set(protected, n)
    budget = int(budget)
    if budget < prot.size:
        raise BudgetError(f"budget {budget} is smaller than the {prot.size} protected positions")
    keep = min(budget, n)
    mask = np.ones(n, dtype=bool)
    mask[prot] = False
    candidates = np.flatnonzero(mask)
    # stable sort on the negated score keeps lower indices first among equals
    order = np.argsort(-scores[candidates], kind="stable")
    chosen = candidates[order[: keep - prot.size]]
    retained = np.sort(np.concatenate([prot, chosen]))
    return SelectionResult(retained.astype(np.int64), budget, prot)


def select_outliers(scores: DeviationScores, budget: int, protected=()) -> SelectionResult:
    """Retain the positions whose KV deviates most from the Base KV."""
    dev = scores.dev if isinstance(scores, DeviationScores) else scores
    return select_top(dev, budget, protected)
