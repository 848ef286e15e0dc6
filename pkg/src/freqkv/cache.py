"""
KV dump data model, the one-shot compression pipeline, decode-time append
and the dense-attention evaluation oracle.
"""

from __future__ import annotations

import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import baselines, spectral
from .budget import DYNAMIC, UNIFORM, BudgetAllocation, LayerEnergyRatio, allocate, global_budget
from .outlier import SEQ_AXIS, BudgetError, DeviationScores, LayerKv, SelectionResult, select_outliers

__all__ = [
    "ALL_TOKENS",
    "TEXT",
    "VISION",
    "VISION_ONLY",
    "CompressedCache",
    "CompressionConfig",
    "KvDump",
    "RetentionPlan",
    "append",
    "attention",
    "compress",
    "evaluate_plan",
    "protected_positions",
]

TEXT = 0
VISION = 1
ALL_TOKENS = "all_tokens"
VISION_ONLY = "vision_only"
DTYPE_ITEMSIZE = {"f32": 4, "f16": 2}


@dataclass
class KvDump:
    """Post-prefill cache of every layer plus a text/vision tag per position.

    ``dtype`` names the storage precision ("f32" or "f16"); the arrays held
    here are always float32.
    """

    layers: list[LayerKv]
    token_tags: np.ndarray
    dtype: str = "f32"

    def __post_init__(self):
        if not self.layers:
            raise ValueError("dump has no layers")
        if self.dtype not in DTYPE_ITEMSIZE:
            raise ValueError(f"unsupported dtype {self.dtype!r}")
        self.token_tags = np.asarray(self.token_tags, dtype=np.uint8)
        shape = self.layers[0].keys.shape
        for i, layer in enumerate(self.layers):
            if layer.keys.shape != shape:
                raise ValueError(f"layer {i} has shape {layer.keys.shape}, layer 0 has {shape}")
            if layer.layer_index != i:
                raise ValueError(f"layer at position {i} carries layer_index {layer.layer_index}")
        if self.token_tags.shape != (shape[1],):
            raise ValueError(f"token_tags has shape {self.token_tags.shape}, expected ({shape[1]},)")
        if np.any(self.token_tags > VISION):
            raise ValueError("token_tags must be 0 (text) or 1 (vision)")

    @classmethod
    def from_arrays(cls, keys, values, token_tags=None, dtype: str = "f32") -> "KvDump":
        """Build from [L, H, N, D] key and value arrays."""
        keys = np.asarray(keys, dtype=np.float32)
        values = np.asarray(values, dtype=np.float32)
        if keys.ndim != 4:
            raise ValueError(f"expected [L, H, N, D] arrays, got shape {keys.shape}")
        if token_tags is None:
            token_tags = np.full(keys.shape[2], VISION, dtype=np.uint8)
        layers = [LayerKv(keys[l], values[l], l) for l in range(keys.shape[0])]
        return cls(layers, token_tags, dtype)

    @property
    def num_layers(self) -> int:
        return len(self.layers)

    @property
    def kv_heads(self) -> int:
        return self.layers[0].kv_heads

    @property
    def head_dim(self) -> int:
        return self.layers[0].head_dim

    @property
    def seq_len(self) -> int:
        return self.layers[0].seq_len

    @property
    def itemsize(self) -> int:
        return DTYPE_ITEMSIZE[self.dtype]

    def meta(self) -> dict:
        return {
            "num_layers": self.num_layers,
            "kv_heads": self.kv_heads,
            "head_dim": self.head_dim,
            "seq_len": self.seq_len,
            "dtype": self.dtype,
        }


@dataclass
class CompressionConfig:
    rho: float = 0.2
    gamma: float = 0.2
    sink_count: int = 4
    recent_count: int = 8
    allocation_mode: str = DYNAMIC
    eviction_scope: str = ALL_TOKENS
    policy: str = baselines.FLASHCACHE
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.rho <= 1.0:
            raise ValueError(f"rho must lie in (0, 1], got {self.rho}")
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError(f"gamma must lie in [0, 1], got {self.gamma}")
        if self.sink_count < 0 or self.recent_count < 0:
            raise ValueError("protected counts must be >= 0")
        if self.allocation_mode not in (DYNAMIC, UNIFORM):
            raise ValueError(f"allocation_mode must be {DYNAMIC!r} or {UNIFORM!r}")
        if self.eviction_scope not in (ALL_TOKENS, VISION_ONLY):
            raise ValueError(f"eviction_scope must be {ALL_TOKENS!r} or {VISION_ONLY!r}")
        if self.policy not in baselines.POLICIES:
            raise ValueError(f"unknown policy {self.policy!r}; choose from {', '.join(baselines.POLICIES)}")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class RetentionPlan:
    per_layer: list[SelectionResult]
    allocation: BudgetAllocation
    config: CompressionConfig
    seq_len: int
    stats: list[dict] = field(default_factory=list)

    def to_dict(self) -> dict:
        alloc = self.allocation
        layers = []
        for l, sel in enumerate(self.per_layer):
            entry = {
                "layer": l,
                "quota": alloc.quotas[l],
                "retained": [int(i) for i in sel.retained],
                "forced": [int(i) for i in sel.forced],
            }
            if self.stats:
                entry.update(self.stats[l])
            layers.append(entry)
        return {
            "format": "freqkv-plan",
            "version": 1,
            "config": self.config.to_dict(),
            "num_layers": len(self.per_layer),
            "seq_len": self.seq_len,
            "allocation": {
                "mode": alloc.mode,
                "global_ratio": alloc.global_ratio,
                "total_budget": alloc.total_budget,
                "quotas": list(alloc.quotas),
                "floors": list(alloc.floors),
            },
            "layers": layers,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RetentionPlan":
        if d.get("format") != "freqkv-plan" or d.get("version") != 1:
            raise ValueError("not a version-1 freqkv plan")
        config = CompressionConfig(**d["config"])
        a = d["allocation"]
        n = int(d["seq_len"])
        alloc = BudgetAllocation(
            [int(q) for q in a["quotas"]], float(a["global_ratio"]), int(a["total_budget"]), a["mode"],
            [int(f) for f in a["floors"]], [n] * len(a["quotas"]),
        )
        per_layer, stats = [], []
        for entry in d["layers"]:
            per_layer.append(SelectionResult(
                np.asarray(entry["retained"], dtype=np.int64), int(entry["quota"]),
                np.asarray(entry["forced"], dtype=np.int64),
            ))
            stats.append({k: v for k, v in entry.items() if k not in ("layer", "quota", "retained", "forced")})
        plan = cls(per_layer, alloc, config, n, stats if any(stats) else [])
        plan.validate()
        return plan

    def validate(self, dump: KvDump | None = None) -> None:
        if len(self.per_layer) != len(self.allocation.quotas):
            raise ValueError(f"plan has {len(self.per_layer)} layers but {len(self.allocation.quotas)} quotas")
        if dump is not None:
            if dump.num_layers != len(self.per_layer) or dump.seq_len != self.seq_len:
                raise ValueError(
                    f"plan is for {len(self.per_layer)} layers x {self.seq_len} positions, dump has "
                    f"{dump.num_layers} x {dump.seq_len}"
                )
        for l, (sel, q) in enumerate(zip(self.per_layer, self.allocation.quotas)):
            r = sel.retained
            if len(r) != q:
                raise ValueError(f"layer {l}: {len(r)} retained positions but quota {q}")
            if len(r) and (r[0] < 0 or r[-1] >= self.seq_len or np.any(np.diff(r) <= 0)):
                raise ValueError(f"layer {l}: retained positions must be strictly increasing in [0, {self.seq_len})")


@dataclass
class CompressedCache:
    """Retained rows per layer; ``position_maps[l][j]`` is the original position of row j."""

    layers: list[LayerKv]
    position_maps: list[np.ndarray]
    next_position: list[int]

    def __len__(self):
        return len(self.layers)

    def lengths(self) -> list[int]:
        return [layer.seq_len for layer in self.layers]

    def append(self, layer_index: int, new_k, new_v) -> "CompressedCache":
        """Append one decoded token's K/V ([H, 1, D]) to ``layer_index`` in place.

        Appended tokens are never evicted.
        """
        layer = self.layers[layer_index]
        new_k = np.asarray(new_k, dtype=layer.keys.dtype)
        new_v = np.asarray(new_v, dtype=layer.values.dtype)
        want = (layer.kv_heads, 1, layer.head_dim)
        if new_k.shape != want or new_v.shape != want:
            raise ValueError(
                f"layer {layer_index}: expected new K/V of shape {want}, got {new_k.shape} and {new_v.shape}"
            )
        self.layers[layer_index] = LayerKv(
            np.concatenate([layer.keys, new_k], axis=SEQ_AXIS),
            np.concatenate([layer.values, new_v], axis=SEQ_AXIS),
            layer_index,
        )
        pos = self.next_position[layer_index]
        self.position_maps[layer_index] = np.append(self.position_maps[layer_index], np.int64(pos))
        self.next_position[layer_index] = pos + 1
        return self


def append(cache: CompressedCache, layer_index: int, new_k, new_v) -> CompressedCache:
    return cache.append(layer_index, new_k, new_v)


def protected_positions(tags: np.ndarray, sink: int, recent: int, scope: str = ALL_TOKENS) -> np.ndarray:
    """First ``sink`` and last ``recent`` positions; plus every text position under vision_only scope."""
    n = len(tags)
    mask = np.zeros(n, dtype=bool)
    mask[: min(sink, n)] = True
    if recent:
        mask[max(0, n - recent):] = True
    if scope == VISION_ONLY:
        mask |= np.asarray(tags) == TEXT
    return np.flatnonzero(mask).astype(np.int64)


@dataclass
class _LayerAnalysis:
    scores: DeviationScores
    ratio: LayerEnergyRatio


def _analyze_layer(layer: LayerKv, gamma: float) -> _LayerAnalysis:
    # one forward DCT per tensor feeds both the Base KV and the energy ratio
    layer.check_finite()
    n = layer.seq_len
    cutoff = spectral.cutoff_index(n, gamma)
    devs, ratios = [], []
    for t in (layer.keys, layer.values):
        x = t.astype(np.float64)
        c = spectral.dct(x, axis=SEQ_AXIS)
        base = spectral.idct(spectral.lowpass(c, gamma, axis=SEQ_AXIS), axis=SEQ_AXIS)
        devs.append(np.mean(np.square(x - base), axis=(0, 2)))
        power = spectral.power_spectrum(c)
        total = float(power.sum())
        ratios.append(min(1.0, float(power[:, cutoff:, :].sum()) / total) if total > 0 else 0.0)
    return _LayerAnalysis(DeviationScores.from_parts(devs[0], devs[1]), LayerEnergyRatio(ratios[0], ratios[1], layer.layer_index))


def _row_energy(layer: LayerKv) -> np.ndarray:
    k = layer.keys.astype(np.float64)
    v = layer.values.astype(np.float64)
    return np.sum(np.square(k), axis=(0, 2)) + np.sum(np.square(v), axis=(0, 2))


def _energy_fraction(layer: LayerKv, retained: np.ndarray) -> float:
    e = _row_energy(layer)
    total = float(e.sum())
    return float(e[retained].sum()) / total if total > 0 else 1.0


def _summary(x: np.ndarray) -> dict:
    return {"min": float(x.min()), "mean": float(x.mean()), "max": float(x.max())}


def compress(dump: KvDump, config: CompressionConfig, workers: int | None = None) -> tuple[RetentionPlan, CompressedCache]:
    """Score, budget and select every layer, then gather the retained rows.

    Layers are analysed independently (optionally on ``workers`` threads);
    the plan is assembled in layer order so results do not depend on the
    thread count.
    """
    n, n_layers = dump.seq_len, dump.num_layers
    prot = protected_positions(dump.token_tags, config.sink_count, config.recent_count, config.eviction_scope)
    floors = [len(prot)] * n_layers
    total = global_budget(config.rho, n * n_layers)
    if sum(floors) > total:
        what = "protected positions"
        if config.eviction_scope == VISION_ONLY:
            n_vision = int(np.sum(dump.token_tags == VISION))
            what = f"protected positions ({n - n_vision} text + sink/recent; {n_vision} vision rows evictable)"
        raise BudgetError(
            f"{what} need {len(prot)} slots per layer x {n_layers} layers = {sum(floors)}, "
            f"but rho={config.rho} allows only {total}"
        )

    def work(layer):
        return _analyze_layer(layer, config.gamma)

    if workers and workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            analyses = list(pool.map(work, dump.layers))
    else:
        analyses = [work(layer) for layer in dump.layers]

    alloc = allocate([a.ratio for a in analyses], config.rho, n, floors, config.allocation_mode)

    per_layer, stats, kept, maps = [], [], [], []
    for l, (layer, a) in enumerate(zip(dump.layers, analyses)):
        q = alloc.quotas[l]
        if config.policy == baselines.FLASHCACHE:
            sel = select_outliers(a.scores, q, prot)
        else:
            sel = baselines.select_baseline(
                config.policy, layer, q, prot, seed=config.seed, sink=config.sink_count, gamma=config.gamma
            )
        per_layer.append(sel)
        stats.append({
            "energy_ratio": {"r_k": a.ratio.r_k, "r_v": a.ratio.r_v, "r": a.ratio.r},
            "dev": _summary(a.scores.dev),
            "energy_retained": _energy_fraction(layer, sel.retained),
        })
        kept.append(layer.take(sel.retained))
        maps.append(sel.retained.copy())

    plan = RetentionPlan(per_layer, alloc, config, n, stats)
    cache = CompressedCache(kept, maps, [n] * n_layers)
    return plan, cache


def gather(dump: KvDump, plan: RetentionPlan) -> CompressedCache:
    plan.validate(dump)
    layers = [layer.take(sel.retained) for layer, sel in zip(dump.layers, plan.per_layer)]
    return CompressedCache(layers, [sel.retained.copy() for sel in plan.per_layer], [dump.seq_len] * dump.num_layers)


def attention(q: np.ndarray, keys: np.ndarray, values: np.ndarray) -> np.ndarray:
    """Dense softmax attention per KV head.

    q: [M, H, D]; keys, values: [H, n, D]. Returns [M, H, D]. Logits are
    scaled by 1/sqrt(D). With no keys the output is zero.
    """
    m, h, d = q.shape
    if keys.shape[1] == 0:
        return np.zeros((m, h, d))
    logits = np.einsum("mhd,hnd->mhn", q, keys) / math.sqrt(d)
    logits -= logits.max(axis=-1, keepdims=True)
    w = np.exp(logits)
    w /= w.sum(axis=-1, keepdims=True)
    return np.einsum("mhn,hnd->mhd", w, values)


def _attention_error(layer: LayerKv, retained: np.ndarray, q: np.ndarray) -> float:
    k = layer.keys.astype(np.float64)
    v = layer.values.astype(np.float64)
    full = attention(q, k, v)
    if len(retained) == layer.seq_len:
        part = full  # nothing evicted
    else:
        part = attention(q, k[:, retained, :], v[:, retained, :])
    num = np.linalg.norm(full - part, axis=-1)
    den = np.linalg.norm(full, axis=-1)
    rel = np.divide(num, den, out=np.where(num > 0, np.inf, 0.0), where=den > 0)
    return float(rel.mean())


def evaluate_plan(
    dump: KvDump,
    plan: RetentionPlan,
    queries: np.ndarray | None = None,
    method_latency_ms: float | None = None,
) -> dict:
    """Retained energy, memory accounting and (given queries) attention-output error.

    ``queries`` is [M, H*D]; each row is split into per-head query vectors.
    """
    plan.validate(dump)
    h, d = dump.kv_heads, dump.head_dim
    q = None
    if queries is not None:
        queries = np.asarray(queries, dtype=np.float64)
        if queries.ndim != 2 or queries.shape[1] != h * d:
            raise ValueError(f"queries must be [M, {h * d}] (kv_heads * head_dim), got shape {queries.shape}")
        spectral.check_finite(queries, "queries")
        q = queries.reshape(queries.shape[0], h, d)

    layers = []
    for l, (layer, sel) in enumerate(zip(dump.layers, plan.per_layer)):
        layers.append({
            "layer": l,
            "quota": int(len(sel.retained)),
            "energy_retained": _energy_fraction(layer, sel.retained),
            "attention_error": None if q is None else _attention_error(layer, sel.retained, q),
        })

    kept = sum(len(sel.retained) for sel in plan.per_layer)
    slots = dump.seq_len * dump.num_layers
    row_bytes = 2 * h * d * dump.itemsize  # K and V
    return {
        "layers": layers,
        "global": {
            "rho_requested": plan.config.rho,
            "rho_achieved": kept / slots,
            "bytes_before": slots * row_bytes,
            "bytes_after": kept * row_bytes,
            "method_latency_ms": method_latency_ms,
        },
    }


def timed_compress(dump: KvDump, config: CompressionConfig, workers: int | None = None):
    """compress() plus its wall time in milliseconds."""
    t0 = time.perf_counter()
    plan, cache = compress(dump, config, workers)
    return plan, cache, (time.perf_counter() - t0) * 1e3
