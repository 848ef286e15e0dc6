"""
Per-layer outlier-energy ratios and their conversion into integer KV quotas.

A layer's ratio is the share of its spectral energy sitting above the
low-pass cutoff, summed over keys and values (so it lies in [0, 2]).
``allocate`` turns those ratios into weights and splits a global budget
round(rho * total_len) across layers, respecting per-layer floors (protected
positions) and caps (layer length).

Splitting is done in exact rational arithmetic: every layer receives
clip(lam * w_l, floor_l, cap_l) for the unique water level ``lam`` that
spends the whole budget, then the fractional shares are rounded by largest
remainder (lower layer index first on ties).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Sequence

import numpy as np

from . import spectral
from .outlier import SEQ_AXIS, BudgetError, LayerKv

__all__ = [
    "DYNAMIC",
    "UNIFORM",
    "BudgetAllocation",
    "LayerEnergyRatio",
    "allocate",
    "global_budget",
    "largest_remainder",
    "layer_energy_ratio",
]

DYNAMIC = "dynamic"
UNIFORM = "uniform"


@dataclass
class LayerEnergyRatio:
    r_k: float
    r_v: float
    layer_index: int = 0
    r: float = field(init=False)

    def __post_init__(self):
        self.r = self.r_k + self.r_v


@dataclass
class BudgetAllocation:
    quotas: list[int]
    global_ratio: float
    total_budget: int
    mode: str
    floors: list[int] = field(default_factory=list)
    caps: list[int] = field(default_factory=list)


def _high_band_ratio(power: np.ndarray, cutoff: int) -> float:
    total = float(power.sum())
    if total <= 0.0:
        return 0.0
    high = float(power[:, cutoff:, :].sum())
    return min(1.0, max(0.0, high / total))


def layer_energy_ratio(layer: LayerKv, gamma: float) -> LayerEnergyRatio:
    cutoff = spectral.cutoff_index(layer.seq_len, gamma)
    layer.check_finite()
    ratios = []
    for t in (layer.keys, layer.values):
        c = spectral.dct(t.astype(np.float64), axis=SEQ_AXIS)
        ratios.append(_high_band_ratio(spectral.power_spectrum(c), cutoff))
    return LayerEnergyRatio(ratios[0], ratios[1], layer.layer_index)


def global_budget(rho: float, total_len: int) -> int:
    """round(rho * total_len), halves rounded up; the product is snapped to 9 decimals first."""
    if not 0.0 < rho <= 1.0:
        raise ValueError(f"rho must lie in (0, 1], got {rho}")
    return int(math.floor(round(rho * total_len, 9) + 0.5))


def largest_remainder(shares: Sequence[Fraction], total: int, caps: Sequence[int] | None = None) -> list[int]:
    """Round ``shares`` to integers summing to ``total``.

    Each share is floored; the leftover units go to the largest fractional
    parts, lower index first on ties, skipping entries already at their cap.
    """
    base = [math.floor(s) for s in shares]
    extra = total - sum(base)
    if extra < 0:
        raise ValueError(f"shares sum above total {total}")
    order = sorted(range(len(shares)), key=lambda i: (-(shares[i] - base[i]), i))
    for i in order:
        if extra == 0:
            break
        if caps is not None and base[i] >= caps[i]:
            continue
        base[i] += 1
        extra -= 1
    if extra:
        raise ValueError(f"cannot place {extra} remaining units under the caps")
    return base


def _fill(weights, floors, caps, total) -> list[Fraction]:
    """Exact shares clip(lam * w, floor, cap) summing to ``total``.

    Assumes sum(floors) <= total <= sum(caps) over layers that can still grow.
    """
    n = len(weights)

    def spent(lam):
        return sum(min(max(lam * w, lo), hi) for w, lo, hi in zip(weights, floors, caps))

    # breakpoints where a layer leaves its floor or reaches its cap
    points = sorted({Fraction(0)} | {b / w for w, lo, hi in zip(weights, floors, caps) if w > 0 for b in (lo, hi)})
    if spent(points[0]) >= total:
        lam = points[0]
    elif spent(points[-1]) < total:
        lam = points[-1]
    else:
        # spent() is nondecreasing: bisect for the first breakpoint reaching total
        lo, hi = 0, len(points) - 1
        while hi - lo > 1:
            mid = (lo + hi) // 2
            if spent(points[mid]) >= total:
                hi = mid
            else:
                lo = mid
        # spent() is linear between neighbouring breakpoints
        a, b = spent(points[lo]), spent(points[hi])
        lam = points[lo] + (points[hi] - points[lo]) * (total - a) / (b - a)
    shares = [min(max(lam * w, lo), hi) for w, lo, hi in zip(weights, floors, caps)]
    left = total - sum(shares)
    if left > 0:
        # positive-weight layers are all capped; the rest grow evenly
        grow = [i for i in range(n) if weights[i] == 0 and shares[i] < caps[i]]
        sub = _fill([Fraction(1)] * len(grow), [shares[i] for i in grow], [Fraction(caps[i]) for i in grow],
                    sum(shares[i] for i in grow) + left)
        for i, s in zip(grow, sub):
            shares[i] = s
    return shares


def allocate(
    ratios: Sequence[LayerEnergyRatio | float],
    rho: float,
    per_layer_len: int | Sequence[int],
    floors: Sequence[int] | None = None,
    mode: str = DYNAMIC,
) -> BudgetAllocation:
    """Split round(rho * sum of layer lengths) into per-layer quotas.

    ``dynamic`` weights layers by their outlier-energy ratio (falling back to
    uniform when every ratio is zero); ``uniform`` gives equal weights.
    Raises BudgetError if the floors alone exceed the budget.
    """
    if mode not in (DYNAMIC, UNIFORM):
        raise ValueError(f"unknown allocation mode {mode!r}")
    r = [x.r if isinstance(x, LayerEnergyRatio) else float(x) for x in ratios]
    n_layers = len(r)
    if n_layers == 0:
        raise ValueError("need at least one layer")
    if any(not math.isfinite(x) or x < 0 for x in r):
        raise ValueError(f"energy ratios must be finite and >= 0, got {r}")
    caps = [int(per_layer_len)] * n_layers if np.isscalar(per_layer_len) else [int(c) for c in per_layer_len]
    if len(caps) != n_layers:
        raise ValueError(f"{len(caps)} layer lengths for {n_layers} layers")
    floors = [0] * n_layers if floors is None else [int(f) for f in floors]
    if len(floors) != n_layers:
        raise ValueError(f"{len(floors)} floors for {n_layers} layers")
    for i, (lo, hi) in enumerate(zip(floors, caps)):
        if hi < 1 or not 0 <= lo <= hi:
            raise ValueError(f"layer {i}: need 0 <= floor ({lo}) <= length ({hi}) and length >= 1")

    total = global_budget(rho, sum(caps))
    if sum(floors) > total:
        raise BudgetError(
            f"protected positions need {sum(floors)} slots but the budget at rho={rho} is only {total}"
        )

    if mode == UNIFORM or sum(r) == 0:
        weights = [Fraction(1)] * n_layers
    else:
        weights = [Fraction(x) for x in r]
    wsum = sum(weights)
    weights = [w / wsum for w in weights]

    shares = _fill(weights, [Fraction(f) for f in floors], [Fraction(c) for c in caps], total)
    quotas = largest_remainder(shares, total, caps)
    return BudgetAllocation(quotas, float(rho), total, mode, floors, caps)
